#![no_main]
use libfuzzer_sys::fuzz_target;

use tokentrack::model::checkpoint;

fuzz_target!(|data: &[u8]| {
    let _ = checkpoint::from_bytes(data);
});
