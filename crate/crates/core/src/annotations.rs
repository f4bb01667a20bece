//! Per-video ground truth and its on-disk form: a CSV with one row per (frame, track)
//! presence plus a JSON sidecar holding the frame count and class names.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::BBox;
use crate::error::{Error, Result};

pub const ANNOTATION_FILE: &str = "annotations.csv";
pub const SIDECAR_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub class_index: usize,
    /// Boxes keyed by 1-based frame index; a missing key means the track is absent.
    pub boxes: BTreeMap<u32, BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotations {
    pub frame_count: usize,
    pub class_names: Vec<String>,
    pub tracks: BTreeMap<u64, Track>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub frame_count: usize,
    pub class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    frame: u32,
    track_id: u64,
    class: usize,
    lx: f64,
    ty: f64,
    rx: f64,
    by: f64,
}

impl VideoAnnotations {
    pub fn new(frame_count: usize, class_names: Vec<String>) -> Self {
        Self {
            frame_count,
            class_names,
            tracks: BTreeMap::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Total number of (frame, track) presences.
    pub fn presence_count(&self) -> usize {
        self.tracks.values().map(|t| t.boxes.len()).sum()
    }

    /// Boxes present in one frame as `(track_id, class, box)`.
    pub fn frame_objects(&self, frame: u32) -> Vec<(u64, usize, BBox)> {
        self.tracks
            .iter()
            .filter_map(|(&id, t)| t.boxes.get(&frame).map(|b| (id, t.class_index, *b)))
            .collect()
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            frame_count: self.frame_count,
            class_names: self.class_names.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut rows: Vec<Row> = Vec::with_capacity(self.presence_count());
        for (&track_id, track) in &self.tracks {
            for (&frame, b) in &track.boxes {
                rows.push(Row {
                    frame,
                    track_id,
                    class: track.class_index,
                    lx: b.lx,
                    ty: b.ty,
                    rx: b.rx,
                    by: b.by,
                });
            }
        }
        rows.sort_by_key(|r| (r.frame, r.track_id));
        // explicit header so a clip without objects still round-trips
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        w.write_record(["frame", "track_id", "class", "lx", "ty", "rx", "by"])
            .map_err(|e| Error::parse("annotation csv", e))?;
        for r in &rows {
            w.serialize(r)
                .map_err(|e| Error::parse("annotation csv", e))?;
        }
        w.flush().map_err(|e| Error::parse("annotation csv", e))?;
        Ok(())
    }

    /// Parses the annotation CSV against a sidecar. Errors carry the 1-based data row number.
    pub fn read_csv<R: Read>(reader: R, sidecar: &Sidecar) -> Result<Self> {
        let mut ann = VideoAnnotations::new(sidecar.frame_count, sidecar.class_names.clone());
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::parse("annotation csv", e))?
            .clone();
        let expected = ["frame", "track_id", "class", "lx", "ty", "rx", "by"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::parse(
                "annotation csv",
                format!("expected header `{}`", expected.join(",")),
            ));
        }
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            let row_no = i + 1;
            let bad = |msg: String| Error::parse("annotation csv", format!("row {row_no}: {msg}"));
            let r = rec.map_err(|e| bad(e.to_string()))?;
            if r.frame == 0 || r.frame as usize > ann.frame_count {
                return Err(bad(format!(
                    "frame {} outside [1, {}]",
                    r.frame, ann.frame_count
                )));
            }
            if r.class >= ann.num_classes() {
                return Err(bad(format!(
                    "unknown class {} ({} classes)",
                    r.class,
                    ann.num_classes()
                )));
            }
            let b = BBox::from_ltrb(r.lx, r.ty, r.rx, r.by);
            if !b.ltrb().iter().all(|v| v.is_finite()) || b.rx < b.lx || b.by < b.ty {
                return Err(bad("box must be finite with lx <= rx and ty <= by".into()));
            }
            let track = ann.tracks.entry(r.track_id).or_insert_with(|| Track {
                class_index: r.class,
                boxes: BTreeMap::new(),
            });
            if track.class_index != r.class {
                return Err(bad(format!("track {} changes class", r.track_id)));
            }
            if track.boxes.insert(r.frame, b).is_some() {
                return Err(bad(format!(
                    "duplicate row for track {} in frame {}",
                    r.track_id, r.frame
                )));
            }
        }
        Ok(ann)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let csv_path = dir.join(ANNOTATION_FILE);
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        let side_path = dir.join(SIDECAR_FILE);
        let json = serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes");
        std::fs::write(&side_path, json).map_err(|e| Error::io(&side_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side_path = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: side_path.clone(),
            message: e.to_string(),
        })?;
        let csv_path = dir.join(ANNOTATION_FILE);
        let f = std::fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        Self::read_csv(std::io::BufReader::new(f), &sidecar).map_err(|e| Error::Data {
            path: csv_path,
            message: e.to_string(),
        })
    }
}
