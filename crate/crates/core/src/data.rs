//! Synthetic blob segmentation data and the on-disk dataset layout.
//!
//! ```text
//! DIR/images.fnt1   "images" (N, 3, H, W), values in [0, 1]
//! DIR/masks.fnt1    "masks"  (N, 1, H, W), values in {0, 1}
//! DIR/meta.json     {"spec": SynthSpec, "split": {"train": [..], "val": [..]}}
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::fnt1;
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.fnt1";
pub const MASKS_FILE: &str = "masks.fnt1";
pub const META_FILE: &str = "meta.json";

/// Allowed per-image foreground fraction.
pub const FG_FRACTION: (f64, f64) = (0.02, 0.6);
/// Draws per image before giving up on the foreground constraint.
pub const MAX_RETRIES: usize = 64;

/// Minimum per-channel mean colour distance between blob and background.
const MIN_CONTRAST: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of blobs per image.
    pub blobs: (usize, usize),
    /// Range of ellipse semi-axes in pixels.
    pub radius: (f64, f64),
    pub noise_sigma: f64,
    /// Width in pixels of the soft blob boundary ramp.
    pub edge_width: f64,
    /// Fraction of images held out for validation (rounded down).
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 32,
            height: 64,
            width: 64,
            blobs: (1, 3),
            radius: (5.0, 16.0),
            noise_sigma: 0.04,
            edge_width: 1.5,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.height == 0 || self.width == 0 {
            return Err(config_err!("count, height and width must be positive"));
        }
        if self.blobs.0 == 0 || self.blobs.0 > self.blobs.1 {
            return Err(config_err!("blob range {:?} is empty or zero", self.blobs));
        }
        let (r0, r1) = self.radius;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(config_err!("radius range {:?} invalid", self.radius));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config_err!("noise_sigma must be >= 0"));
        }
        if !(self.edge_width > 0.0 && self.edge_width.is_finite()) {
            return Err(config_err!("edge_width must be > 0"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err!("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    /// Every image in the training split.
    pub fn all_train(count: usize) -> Self {
        Split {
            train: (0..count).collect(),
            val: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub spec: SynthSpec,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub masks: Tensor,
    pub meta: Meta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images and masks at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((
            self.images.gather_batch(indices)?,
            self.masks.gather_batch(indices)?,
        ))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fnt1::save(&dir.join(IMAGES_FILE), &[("images", &self.images)])?;
        fnt1::save(&dir.join(MASKS_FILE), &[("masks", &self.masks)])?;
        let meta = serde_json::to_vec_pretty(&self.meta)?;
        fnt1::write_atomic(&dir.join(META_FILE), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "dataset directory {} not found",
                dir.display()
            )));
        }
        let read_one = |file: &str, name: &str| -> Result<Tensor> {
            let path = dir.join(file);
            let mut entries = fnt1::load(&path).map_err(|e| match e {
                Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
                other => other,
            })?;
            match entries.pop() {
                Some((n, t)) if n == name && entries.is_empty() => Ok(t),
                _ => Err(Error::Data(format!(
                    "{} must hold exactly one tensor named {name}",
                    path.display()
                ))),
            }
        };
        let images = read_one(IMAGES_FILE, "images")?;
        let masks = read_one(MASKS_FILE, "masks")?;
        let meta_path = dir.join(META_FILE);
        let meta: Meta = serde_json::from_slice(
            &fs::read(&meta_path)
                .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?,
        )?;
        let ds = Dataset {
            images,
            masks,
            meta,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Shape, value-range and split consistency.
    pub fn check(&self) -> Result<()> {
        let (n, c, h, w) = self.images.dims4()?;
        let (mn, mc, mh, mw) = self.masks.dims4()?;
        if (mn, mc, mh, mw) != (n, 1, h, w) || c == 0 {
            return Err(Error::Data(format!(
                "images {:?} and masks {:?} disagree",
                self.images.shape(),
                self.masks.shape()
            )));
        }
        if self.masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("masks must be binary".into()));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("image values must lie in [0, 1]".into()));
        }
        let split = &self.meta.split;
        if split.train.iter().chain(&split.val).any(|&i| i >= n) {
            return Err(Error::Data("split index out of range".into()));
        }
        Ok(())
    }
}

/// Generates a dataset; identical specs give identical tensors.
pub fn gen_synth(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(spec.count * 3 * hw);
    let mut masks = Vec::with_capacity(spec.count * hw);
    for index in 0..spec.count {
        let mut accepted = None;
        for _ in 0..MAX_RETRIES {
            let (img, mask) = draw_image(spec, &mut rng)?;
            let frac = mask.iter().sum::<f64>() / hw as f64;
            if (FG_FRACTION.0..=FG_FRACTION.1).contains(&frac) {
                accepted = Some((img, mask));
                break;
            }
        }
        let Some((img, mask)) = accepted else {
            return Err(Error::Data(format!(
                "image {index}: no draw met the foreground fraction range {FG_FRACTION:?} \
                 after {MAX_RETRIES} tries"
            )));
        };
        images.extend(img);
        masks.extend(mask);
    }
    let mut order: Vec<usize> = (0..spec.count).collect();
    order.shuffle(&mut rng);
    let n_val = (spec.count as f64 * spec.val_fraction).floor() as usize;
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Dataset {
        images: Tensor::new(&[spec.count, 3, h, w], images)?,
        masks: Tensor::new(&[spec.count, 1, h, w], masks)?,
        meta: Meta {
            spec: spec.clone(),
            split: Split { train, val },
        },
    })
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    color: [f64; 3],
}

impl Blob {
    /// Approximate signed distance in pixels; negative inside.
    fn signed_distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let r = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        (r - 1.0) * self.rx.min(self.ry)
    }
}

/// One image `(3, H, W)` and its mask `(H, W)`.
fn draw_image(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| config_err!("noise: {e}"))?;

    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    // Two low-frequency waves give the background some texture.
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.02..0.08),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();

    let n_blobs = rng.gen_range(spec.blobs.0..=spec.blobs.1);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let color = std::array::from_fn(|c| {
                let shift = rng.gen_range(MIN_CONTRAST..MIN_CONTRAST + 0.2);
                if bg[c] > 0.5 {
                    bg[c] - shift
                } else {
                    bg[c] + shift
                }
            });
            Blob {
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                ry: rng.gen_range(spec.radius.0..=spec.radius.1),
                rx: rng.gen_range(spec.radius.0..=spec.radius.1),
                cos: theta.cos(),
                sin: theta.sin(),
                color,
            }
        })
        .collect();

    let mut img = vec![0.0; 3 * hw];
    let mut mask = vec![0.0; hw];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let texture: f64 = waves
                .iter()
                .map(|&(f, px, py, a)| a * ((f * xf + px).sin() + (f * yf + py).cos()) / 2.0)
                .sum();
            let mut px = bg.map(|b| b + texture);
            let mut alpha_max: f64 = 0.0;
            for b in &blobs {
                let a = (0.5 - b.signed_distance(yf, xf) / spec.edge_width).clamp(0.0, 1.0);
                for (c, v) in px.iter_mut().enumerate() {
                    *v = *v * (1.0 - a) + b.color[c] * a;
                }
                alpha_max = alpha_max.max(a);
            }
            let i = y * w + x;
            mask[i] = if alpha_max >= 0.5 { 1.0 } else { 0.0 };
            for (c, v) in px.iter().enumerate() {
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                img[c * hw + i] = (v + n).clamp(0.0, 1.0);
            }
        }
    }
    Ok((img, mask))
}
