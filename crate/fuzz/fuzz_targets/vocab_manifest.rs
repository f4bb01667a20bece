#![no_main]
use libfuzzer_sys::fuzz_target;

use tokentrack::codec::{VocabManifest, Vocabulary};

fuzz_target!(|data: &[u8]| {
    let Ok(manifest) = serde_json::from_slice::<VocabManifest>(data) else {
        return;
    };
    if let Ok(vocab) = Vocabulary::from_manifest(&manifest) {
        assert_eq!(vocab.manifest(), manifest);
    }
});
