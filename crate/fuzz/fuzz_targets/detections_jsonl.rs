#![no_main]
use libfuzzer_sys::fuzz_target;

use tokentrack::merge_eval::{nms, read_detections_jsonl, Granularity};

fuzz_target!(|data: &[u8]| {
    if let Ok(dets) = read_detections_jsonl(data) {
        for g in [Granularity::PerFrame, Granularity::Tracklet] {
            let _ = nms(&dets, 0.5, g, false);
        }
    }
});
