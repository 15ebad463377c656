use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use crate::encoder::GtBox;
use crate::error::{Error, Result};
use crate::evaluator::iou;

const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Rectangle,
    Circle,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Rectangle, ShapeClass::Circle, ShapeClass::Triangle];

    pub fn id(self) -> usize {
        self as usize
    }

    /// Base fill color of the class family.
    pub fn color(self) -> [u8; 3] {
        match self {
            ShapeClass::Rectangle => [220, 60, 50],
            ShapeClass::Circle => [60, 200, 80],
            ShapeClass::Triangle => [70, 90, 230],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Training images.
    pub num_images: usize,
    pub val_images: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub classes: Vec<ShapeClass>,
    pub objects_per_image: (usize, usize),
    /// Shape extent as a fraction of the smaller image side.
    pub size_range: (f64, f64),
    /// Peak amplitude of uniform per-channel pixel noise, in `[0, 1]` units.
    pub noise_amplitude: f64,
    /// Maximum IoU between two ground-truth boxes of one scene.
    pub max_overlap_iou: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_images: 500,
            val_images: 100,
            image_height: 64,
            image_width: 64,
            classes: ShapeClass::ALL.to_vec(),
            objects_per_image: (1, 4),
            size_range: (0.2, 0.5),
            noise_amplitude: 0.08,
            max_overlap_iou: 0.3,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.to_string(),
                reason,
            })
        };
        if self.image_height < 8 || self.image_width < 8 {
            return bad("image_height", format!("{}x{} too small", self.image_height, self.image_width));
        }
        if self.classes.is_empty() {
            return bad("classes", "at least one class required".into());
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi {
            return bad("objects_per_image", format!("min {lo} exceeds max {hi}"));
        }
        let (smin, smax) = self.size_range;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return bad("size_range", format!("({smin}, {smax}) must satisfy 0 < min <= max <= 1"));
        }
        let side = self.image_height.min(self.image_width) as f64;
        if (smin * side).floor() < 4.0 {
            return bad("size_range", format!("smallest shape {:.2} px is below 4 px", smin * side));
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return bad("noise_amplitude", format!("{} not in [0, 1]", self.noise_amplitude));
        }
        if !(self.max_overlap_iou >= 0.0 && self.max_overlap_iou <= 1.0) {
            return bad("max_overlap_iou", format!("{} not in [0, 1]", self.max_overlap_iou));
        }
        Ok(())
    }

    /// Index of the first scene of a split in the scene stream.
    pub fn first_index(&self, split: Split) -> u64 {
        match split {
            Split::Train => 0,
            Split::Val => self.num_images as u64,
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_images,
            Split::Val => self.val_images,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub boxes: Vec<GtBox>,
    /// Objects dropped after exhausting placement retries.
    pub placement_failures: usize,
}

/// Pixel mask of one shape inside its integer bounding region.
struct ShapeMask {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    inside: Vec<bool>,
}

impl ShapeMask {
    fn rasterize(class: ShapeClass, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut inside = vec![false; w * h];
        for py in 0..h {
            for px in 0..w {
                // sample at pixel centers, relative to the region origin
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                inside[py * w + px] = match class {
                    ShapeClass::Rectangle => true,
                    ShapeClass::Circle => {
                        let r = w as f64 / 2.0;
                        (fx - r).powi(2) + (fy - r).powi(2) <= r * r
                    }
                    ShapeClass::Triangle => {
                        // apex at top-center, base along the bottom edge
                        let half = w as f64 / 2.0;
                        let frac = fy / h as f64;
                        (fx - half).abs() <= half * frac
                    }
                };
            }
        }
        Self { x0, y0, w, h, inside }
    }

    /// Tight hull of the set pixels as `[x_min, y_min, x_max, y_max]`.
    fn hull(&self) -> Option<[f64; 4]> {
        let mut hull: Option<[usize; 4]> = None;
        for py in 0..self.h {
            for px in 0..self.w {
                if self.inside[py * self.w + px] {
                    let (x, y) = (self.x0 + px, self.y0 + py);
                    hull = Some(match hull {
                        None => [x, y, x + 1, y + 1],
                        Some([a, b, c, d]) => [a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)],
                    });
                }
            }
        }
        hull.map(|h| h.map(|v| v as f64))
    }
}

fn jitter_color(base: [u8; 3], rng: &mut ChaCha8Rng) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.random_range(-20..=20)).clamp(0, 255) as u8)
}

/// Renders scene `index` of the stream defined by `config.seed`. Each scene
/// draws from its own ChaCha stream, so scenes are independent of one
/// another and of generation order.
pub fn generate_scene(config: &DatasetConfig, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let (w_img, h_img) = (config.image_width, config.image_height);
    let mut image = RgbImage::new(w_img, h_img);
    let bg = [40u8, 40, 48];
    for y in 0..h_img {
        for x in 0..w_img {
            image.put(x, y, bg);
        }
    }

    let count = rng.random_range(config.objects_per_image.0..=config.objects_per_image.1);
    let side = h_img.min(w_img) as f64;
    let (smin, smax) = (
        (config.size_range.0 * side).floor().max(4.0) as usize,
        (config.size_range.1 * side).floor().max(4.0) as usize,
    );
    let mut boxes: Vec<GtBox> = Vec::new();
    let mut failures = 0;
    for _ in 0..count {
        let class = config.classes[rng.random_range(0..config.classes.len())];
        let color = jitter_color(class.color(), &mut rng);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let w = rng.random_range(smin..=smax).min(w_img);
            let h = match class {
                ShapeClass::Circle => w.min(h_img),
                _ => rng.random_range(smin..=smax).min(h_img),
            };
            let x0 = rng.random_range(0..=w_img - w);
            let y0 = rng.random_range(0..=h_img - h);
            let mask = ShapeMask::rasterize(class, x0, y0, w, h);
            let Some(hull) = mask.hull() else { continue };
            let candidate = GtBox::new(class.id(), hull[0], hull[1], hull[2], hull[3]);
            if boxes
                .iter()
                .all(|b| iou(&b.as_array(), &candidate.as_array()) <= config.max_overlap_iou)
            {
                placed = Some((mask, candidate));
                break;
            }
        }
        match placed {
            Some((mask, b)) => {
                for py in 0..mask.h {
                    for px in 0..mask.w {
                        if mask.inside[py * mask.w + px] {
                            image.put(mask.x0 + px, mask.y0 + py, color);
                        }
                    }
                }
                boxes.push(b);
            }
            None => failures += 1,
        }
    }

    if config.noise_amplitude > 0.0 {
        let amp = config.noise_amplitude * 255.0;
        for v in image.pixels.iter_mut() {
            let n: f64 = rng.random_range(-amp..=amp);
            *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
    }

    Scene {
        image,
        boxes,
        placement_failures: failures,
    }
}

/// All scenes of one split, in index order.
pub fn generate_split(config: &DatasetConfig, split: Split) -> Result<Vec<Scene>> {
    config.validate()?;
    let start = config.first_index(split);
    Ok((0..config.split_len(split) as u64)
        .map(|i| generate_scene(config, start + i))
        .collect())
}
