#![no_main]
use libfuzzer_sys::fuzz_target;

use tokentrack::codec::{build_vocabulary, decode_video, CoordMode, VocabConfig};

// Byte 0 picks the layout, byte 1 the slot count; the rest are little-endian u16 tokens.
fuzz_target!(|data: &[u8]| {
    let [mode, slots, rest @ ..] = data else {
        return;
    };
    let mode = if mode & 1 == 0 {
        CoordMode::TwoD
    } else {
        CoordMode::OneD
    };
    let vocab = build_vocabulary(VocabConfig {
        bins: 32,
        classes: 2,
        reserved: 3,
        mode,
    })
    .unwrap();
    let slots = (*slots as usize % 8) + 1;
    let tokens: Vec<u32> = rest
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    let decoded = decode_video(&tokens, &vocab, slots);
    for t in &decoded.tracklets {
        assert_eq!(t.slots.len(), slots);
        assert!(t.class_index < 2);
    }
});
