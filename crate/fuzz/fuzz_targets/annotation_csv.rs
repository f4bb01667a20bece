#![no_main]
use libfuzzer_sys::fuzz_target;

use tokentrack::annotations::{Sidecar, VideoAnnotations};

fuzz_target!(|data: &[u8]| {
    let sidecar = Sidecar {
        frame_count: 16,
        class_names: vec!["a".into(), "b".into()],
    };
    if let Ok(ann) = VideoAnnotations::read_csv(data, &sidecar) {
        let mut buf = Vec::new();
        ann.write_csv(&mut buf)
            .expect("parsed annotations serialize");
        let again = VideoAnnotations::read_csv(&buf[..], &sidecar).expect("written csv parses");
        assert_eq!(again, ann);
    }
});
