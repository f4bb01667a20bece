//! Synthetic moving-rectangle clips with entry, exit and occlusion events.

use std::ops::RangeInclusive;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{Track, VideoAnnotations};
use crate::codec::BBox;
use crate::error::{Error, Result};

/// Pixel value of the patch drawn over an occluded object.
pub const OCCLUDER_INTENSITY: u8 = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Frame side length `D` in pixels.
    pub image_size: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: usize,
    /// Rectangle side range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Speed range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    pub p_enter: f64,
    pub p_exit: f64,
    pub p_occlude: f64,
    pub max_occlusion: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            frames: 8,
            min_objects: 1,
            max_objects: 3,
            classes: 2,
            min_size: 10,
            max_size: 22,
            min_speed: 0.5,
            max_speed: 3.0,
            p_enter: 0.15,
            p_exit: 0.15,
            p_occlude: 0.2,
            max_occlusion: 2,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < 16 {
            return fail(format!("image size must be >= 16, got {}", self.image_size));
        }
        if self.frames < 2 {
            return fail(format!("clips need >= 2 frames, got {}", self.frames));
        }
        if self.classes < 1 {
            return fail("scene needs at least one class".into());
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects exceeds max_objects".into());
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size >= self.image_size {
            return fail(format!(
                "object sizes must satisfy 2 <= min <= max < D (got {}..{})",
                self.min_size, self.max_size
            ));
        }
        if !(self.min_speed >= 0.0
            && self.min_speed <= self.max_speed
            && self.max_speed.is_finite())
        {
            return fail("speed range must satisfy 0 <= min <= max".into());
        }
        for (name, p) in [
            ("p_enter", self.p_enter),
            ("p_exit", self.p_exit),
            ("p_occlude", self.p_occlude),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class{c}")).collect()
    }
}

/// Fill intensity for a class; classes are spread over the upper part of the gray range.
pub fn class_intensity(class_index: usize, classes: usize) -> u8 {
    let lo = 110.0;
    let hi = 255.0;
    let t = if classes <= 1 {
        1.0
    } else {
        class_index as f64 / (classes - 1) as f64
    };
    (lo + t * (hi - lo)).round() as u8
}

/// Full description of one object's life in a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackPlan {
    pub class_index: usize,
    pub width: usize,
    pub height: usize,
    /// Top-left corner at frame 1, in pixels.
    pub origin: (f64, f64),
    pub velocity: (f64, f64),
    /// Frames between entry and exit (inclusive).
    pub visible: RangeInclusive<u32>,
    /// Frames within `visible` during which the object is hidden behind an occluder.
    pub occluded: Option<RangeInclusive<u32>>,
}

impl TrackPlan {
    pub fn is_annotated(&self, frame: u32) -> bool {
        self.visible.contains(&frame) && !self.occluded.as_ref().is_some_and(|o| o.contains(&frame))
    }

    /// Integer pixel rectangle `(x0, y0, x1, y1)` (exclusive end) at `frame`, with the
    /// trajectory reflected at the image borders.
    pub fn rect_at(&self, frame: u32, image_size: usize) -> (usize, usize, usize, usize) {
        let t = (frame - 1) as f64;
        let x = reflect(
            self.origin.0 + self.velocity.0 * t,
            (image_size - self.width) as f64,
        );
        let y = reflect(
            self.origin.1 + self.velocity.1 * t,
            (image_size - self.height) as f64,
        );
        let (x0, y0) = (x.round() as usize, y.round() as usize);
        (x0, y0, x0 + self.width, y0 + self.height)
    }
}

/// Folds `p` into `[0, limit]` as a point bouncing between two walls.
fn reflect(p: f64, limit: f64) -> f64 {
    if limit <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * limit;
    let m = p.rem_euclid(period);
    if m <= limit {
        m
    } else {
        period - m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedClip {
    pub frames: Vec<GrayImage>,
    pub annotations: VideoAnnotations,
}

/// Samples object plans for a clip from the config's seed.
pub fn plan_clip(config: &SceneConfig) -> Result<Vec<TrackPlan>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let f = config.frames as u32;
    let d = config.image_size;
    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let mut plans = Vec::with_capacity(count);
    for _ in 0..count {
        let class_index = rng.gen_range(0..config.classes);
        let width = rng.gen_range(config.min_size..=config.max_size);
        let height = rng.gen_range(config.min_size..=config.max_size);
        let origin = (
            rng.gen_range(0.0..=(d - width) as f64),
            rng.gen_range(0.0..=(d - height) as f64),
        );
        let speed = rng.gen_range(config.min_speed..=config.max_speed);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let velocity = (speed * angle.cos(), speed * angle.sin());

        let mut start = 1;
        let mut end = f;
        if rng.gen_bool(config.p_enter) {
            start = rng.gen_range(2..=f);
        }
        if rng.gen_bool(config.p_exit) && start < f {
            end = rng.gen_range(start..f);
        }
        let mut occluded = None;
        // occlusion strictly inside the visible range so the object is seen on both sides
        if config.max_occlusion > 0 && end >= start + 2 && rng.gen_bool(config.p_occlude) {
            let room = (end - start - 1) as usize;
            let len = rng.gen_range(1..=config.max_occlusion.min(room)) as u32;
            let first = rng.gen_range(start + 1..=end - len);
            occluded = Some(first..=first + len - 1);
        }
        plans.push(TrackPlan {
            class_index,
            width,
            height,
            origin,
            velocity,
            visible: start..=end,
            occluded,
        });
    }
    Ok(plans)
}

/// Rasterizes plans into frames and annotations. Track ids are `1..=plans.len()`.
pub fn render_clip(config: &SceneConfig, plans: &[TrackPlan]) -> Result<RenderedClip> {
    config.validate()?;
    let d = config.image_size;
    let mut annotations = VideoAnnotations::new(config.frames, config.class_names());
    let mut frames = Vec::with_capacity(config.frames);
    for frame in 1..=config.frames as u32 {
        let mut img = GrayImage::new(d as u32, d as u32);
        let mut occluders = Vec::new();
        for (i, plan) in plans.iter().enumerate() {
            if plan.class_index >= config.classes {
                return Err(Error::Config(format!(
                    "plan class {} outside [0, {})",
                    plan.class_index, config.classes
                )));
            }
            if !plan.visible.contains(&frame) {
                continue;
            }
            let rect = plan.rect_at(frame, d);
            let value = class_intensity(plan.class_index, config.classes);
            fill(&mut img, rect, value);
            if plan.is_annotated(frame) {
                let (x0, y0, x1, y1) = rect;
                let s = d as f64;
                annotations
                    .tracks
                    .entry(i as u64 + 1)
                    .or_insert_with(|| Track {
                        class_index: plan.class_index,
                        boxes: Default::default(),
                    })
                    .boxes
                    .insert(
                        frame,
                        BBox::from_ltrb(x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s),
                    );
            } else {
                occluders.push(rect);
            }
        }
        for (x0, y0, x1, y1) in occluders {
            let grow = 2;
            fill(
                &mut img,
                (
                    x0.saturating_sub(grow),
                    y0.saturating_sub(grow),
                    (x1 + grow).min(d),
                    (y1 + grow).min(d),
                ),
                OCCLUDER_INTENSITY,
            );
        }
        frames.push(img);
    }
    Ok(RenderedClip {
        frames,
        annotations,
    })
}

fn fill(img: &mut GrayImage, (x0, y0, x1, y1): (usize, usize, usize, usize), value: u8) {
    for y in y0..y1.min(img.height() as usize) {
        for x in x0..x1.min(img.width() as usize) {
            img.put_pixel(x as u32, y as u32, Luma([value]));
        }
    }
}

pub fn generate_clip(config: &SceneConfig) -> Result<RenderedClip> {
    let plans = plan_clip(config)?;
    render_clip(config, &plans)
}

pub fn frame_file_name(frame: u32) -> String {
    format!("frame_{frame:04}.pgm")
}

/// Writes `frame_%04d.pgm` (1-based), `annotations.csv` and `meta.json` into `dir`.
pub fn export_clip(clip: &RenderedClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in clip.frames.iter().enumerate() {
        let path = dir.join(frame_file_name(i as u32 + 1));
        std::fs::write(&path, encode_pgm(img)).map_err(|e| Error::io(&path, e))?;
    }
    clip.annotations.save(dir)
}

/// Reads a clip written by [`export_clip`].
pub fn load_clip(dir: &Path) -> Result<RenderedClip> {
    let annotations = VideoAnnotations::load(dir)?;
    let mut frames = Vec::with_capacity(annotations.frame_count);
    for f in 1..=annotations.frame_count as u32 {
        let path = dir.join(frame_file_name(f));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        frames.push(decode_pgm(&bytes).map_err(|e| Error::Data {
            path: path.clone(),
            message: e.to_string(),
        })?);
    }
    Ok(RenderedClip {
        frames,
        annotations,
    })
}

/// Binary (P5) graymap bytes.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.as_raw());
    out
}

/// Decodes any portable anymap and converts it to 8-bit gray.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::parse("portable anymap", e))?;
    Ok(img.to_luma8())
}
