//! Temporal windows over a video: enumeration by `(N, T, G)`, frame coverage and per-window
//! tracklet extraction. Frame indices are 1-based.

use serde::{Deserialize, Serialize};

use crate::annotations::VideoAnnotations;
use crate::codec::TrackletAnnotation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    /// Frames per window (`N`).
    pub length: usize,
    /// Offset between consecutive window anchors (`T`).
    pub stride: usize,
    /// Spacing between frames inside a window (`G`).
    pub gap: usize,
    /// Targets cover every frame between the first and last window frame.
    pub full_span: bool,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            length: 2,
            stride: 1,
            gap: 1,
            full_span: false,
        }
    }
}

impl WindowSpec {
    pub fn new(length: usize, stride: usize, gap: usize) -> Self {
        Self {
            length,
            stride,
            gap,
            full_span: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.stride == 0 || self.gap == 0 {
            return Err(Error::Config(format!(
                "window N, T, G must all be >= 1 (got N={}, T={}, G={})",
                self.length, self.stride, self.gap
            )));
        }
        Ok(())
    }

    /// Frames spanned from first to last window frame: `(N−1)·G + 1`.
    pub fn span(&self) -> usize {
        (self.length - 1) * self.gap + 1
    }

    /// Number of target slots per tracklet.
    pub fn target_slots(&self) -> usize {
        if self.full_span {
            self.span()
        } else {
            self.length
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalWindow {
    #[serde(rename = "window_index")]
    pub index: usize,
    pub frames: Vec<u32>,
}

impl TemporalWindow {
    pub fn first(&self) -> u32 {
        self.frames[0]
    }

    pub fn last(&self) -> u32 {
        *self.frames.last().expect("window has at least one frame")
    }

    /// Absolute frame for each target slot.
    pub fn slot_frames(&self, full_span: bool) -> Vec<u32> {
        if full_span {
            (self.first()..=self.last()).collect()
        } else {
            self.frames.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowEnumeration {
    pub windows: Vec<TemporalWindow>,
    /// Set when the video is shorter than one window span.
    pub diagnostic: Option<String>,
}

/// Anchors windows at `1, 1+T, 1+2T, …` while they fit, then appends one tail window ending at
/// frame `F` if the regular anchors left the end of the video uncovered.
pub fn enumerate_windows(frame_count: usize, spec: &WindowSpec) -> Result<WindowEnumeration> {
    spec.validate()?;
    let span = spec.span();
    if frame_count < span {
        return Ok(WindowEnumeration {
            windows: Vec::new(),
            diagnostic: Some(format!(
                "video shorter than window span ({frame_count} frames < {span})"
            )),
        });
    }
    let make = |index: usize, anchor: usize| TemporalWindow {
        index,
        frames: (0..spec.length)
            .map(|i| (anchor + i * spec.gap) as u32)
            .collect(),
    };
    let last_anchor = frame_count + 1 - span;
    let mut windows: Vec<TemporalWindow> = (1..=last_anchor)
        .step_by(spec.stride)
        .enumerate()
        .map(|(i, a)| make(i, a))
        .collect();
    if windows.last().map(|w| w.first() as usize) != Some(last_anchor) {
        windows.push(make(windows.len(), last_anchor));
    }
    Ok(WindowEnumeration {
        windows,
        diagnostic: None,
    })
}

/// Number of enumerated windows containing each frame; index 0 is frame 1.
pub fn coverage(frame_count: usize, spec: &WindowSpec) -> Result<Vec<usize>> {
    let mut counts = vec![0; frame_count];
    for w in enumerate_windows(frame_count, spec)?.windows {
        for f in w.frames {
            counts[f as usize - 1] += 1;
        }
    }
    Ok(counts)
}

/// One tracklet per track present in at least one target slot, ordered by track id.
pub fn extract_window_tracklets(
    annotations: &VideoAnnotations,
    window: &TemporalWindow,
    full_span: bool,
) -> Vec<TrackletAnnotation> {
    let frames = window.slot_frames(full_span);
    annotations
        .tracks
        .iter()
        .filter_map(|(&track_id, track)| {
            let slots: Vec<_> = frames.iter().map(|f| track.boxes.get(f).copied()).collect();
            slots
                .iter()
                .any(Option::is_some)
                .then_some(TrackletAnnotation {
                    slots,
                    class_index: track.class_index,
                    track_id,
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::Track;
    use crate::codec::BBox;

    fn frames(e: &WindowEnumeration) -> Vec<Vec<u32>> {
        e.windows.iter().map(|w| w.frames.clone()).collect()
    }

    #[test]
    fn enumerates_listed_examples() {
        let e = enumerate_windows(6, &WindowSpec::new(3, 1, 1)).unwrap();
        assert_eq!(
            frames(&e),
            vec![vec![1, 2, 3], vec![2, 3, 4], vec![3, 4, 5], vec![4, 5, 6]]
        );
        let e = enumerate_windows(14, &WindowSpec::new(6, 3, 2)).unwrap();
        assert_eq!(
            frames(&e),
            vec![vec![1, 3, 5, 7, 9, 11], vec![4, 6, 8, 10, 12, 14]]
        );
        let e = enumerate_windows(14, &WindowSpec::new(3, 1, 6)).unwrap();
        assert_eq!(frames(&e), vec![vec![1, 7, 13], vec![2, 8, 14]]);
    }

    #[test]
    fn tail_window_ends_at_last_frame() {
        let e = enumerate_windows(7, &WindowSpec::new(3, 3, 1)).unwrap();
        assert_eq!(
            frames(&e),
            vec![vec![1, 2, 3], vec![4, 5, 6], vec![5, 6, 7]]
        );
        assert_eq!(e.windows[2].index, 2);
    }

    #[test]
    fn short_video_yields_diagnostic() {
        let e = enumerate_windows(4, &WindowSpec::new(3, 1, 2)).unwrap();
        assert!(e.windows.is_empty());
        assert!(e.diagnostic.unwrap().contains("shorter"));
        assert!(enumerate_windows(4, &WindowSpec::new(0, 1, 1)).is_err());
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(
            coverage(10, &WindowSpec::new(3, 1, 1)).unwrap(),
            vec![1, 2, 3, 3, 3, 3, 3, 3, 2, 1]
        );
        assert_eq!(coverage(6, &WindowSpec::new(3, 3, 1)).unwrap(), vec![1; 6]);
        // windows (1,7,13) and (2,8,14): frame 7 sits in exactly one of them
        let c = coverage(14, &WindowSpec::new(3, 1, 6)).unwrap();
        assert_eq!(c, vec![1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1]);
    }

    fn video(present: impl IntoIterator<Item = u32>, frame_count: usize) -> VideoAnnotations {
        let mut ann = VideoAnnotations::new(frame_count, vec!["a".into()]);
        let bx = BBox::from_ltrb(0.1, 0.1, 0.2, 0.2);
        ann.tracks.insert(
            3,
            Track {
                class_index: 0,
                boxes: present.into_iter().map(|f| (f, bx)).collect(),
            },
        );
        ann
    }

    #[test]
    fn extracts_tracklets() {
        let w = TemporalWindow {
            index: 0,
            frames: vec![1, 2, 3],
        };
        let t = extract_window_tracklets(&video(1..=10, 10), &w, false);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].present_count(), 3);
        assert_eq!(t[0].track_id, 3);

        let t = extract_window_tracklets(&video(1..=2, 10), &w, false);
        assert!(t[0].slots[0].is_some() && t[0].slots[1].is_some() && t[0].slots[2].is_none());

        let t = extract_window_tracklets(&video(5..=6, 10), &w, false);
        assert!(t.is_empty());

        let w = TemporalWindow {
            index: 0,
            frames: vec![1, 7, 13],
        };
        let t = extract_window_tracklets(&video(1..=13, 14), &w, true);
        assert_eq!(t[0].slots.len(), 13);
        assert_eq!(t[0].present_count(), 13);
    }
}
