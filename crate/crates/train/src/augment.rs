//! Weak (geometric) and strong (geometric + photometric) augmentation, plus
//! rectangular cut-mix between two views.
//!
//! Both modes draw geometry from the same stream, so a strong view made with
//! the same seed as a weak view shares its geometry and the two stay pixel-aligned.

use derprop_core::theory::trial_rng;
use derprop_core::{LabelMap, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scene::SyntheticScene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub flip_prob: f64,
    pub crop_prob: f64,
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    pub color_prob: f64,
    /// Amplitude of brightness, contrast and per-channel shifts.
    pub color_strength: f64,
    /// Off by default: scene classes differ only in color.
    pub gray_prob: f64,
    pub blur_prob: f64,
    /// Probability that a strong unlabeled view is cut-mixed with another one.
    pub mix_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_prob: 0.5,
            min_crop: 0.7,
            color_prob: 0.8,
            color_strength: 0.2,
            gray_prob: 0.0,
            blur_prob: 0.5,
            mix_prob: 0.5,
        }
    }
}

impl AugmentParams {
    /// Every probability zero: augmentation is the identity.
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            crop_prob: 0.0,
            color_prob: 0.0,
            gray_prob: 0.0,
            blur_prob: 0.0,
            mix_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Horizontal mirror of a `[ch, H, W]` image.
pub fn flip_image(img: &Tensor) -> Tensor {
    let (ch, h, w) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for k in 0..ch {
        for r in 0..h {
            for c in 0..w {
                out[(k * h + r) * w + c] = src[(k * h + r) * w + (w - 1 - c)];
            }
        }
    }
    Tensor::new(img.dims().to_vec(), out).expect("same shape")
}

pub fn flip_labels(labels: &LabelMap, h: usize, w: usize) -> LabelMap {
    let l = labels.labels();
    let out = (0..h * w).map(|i| l[(i / w) * w + (w - 1 - i % w)]).collect();
    LabelMap::new(labels.classes(), out).expect("same classes")
}

/// Crop window `(top, left, height, width)` resized back with nearest-neighbour sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Crop {
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        (self.top + r * self.height / h, self.left + c * self.width / w)
    }
}

pub fn crop_image(img: &Tensor, crop: Crop) -> Tensor {
    let (ch, h, w) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for k in 0..ch {
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = crop.source(r, c, h, w);
                out[(k * h + r) * w + c] = src[(k * h + sr) * w + sc];
            }
        }
    }
    Tensor::new(img.dims().to_vec(), out).expect("same shape")
}

pub fn crop_labels(labels: &LabelMap, h: usize, w: usize, crop: Crop) -> LabelMap {
    let l = labels.labels();
    let out = (0..h * w)
        .map(|i| {
            let (sr, sc) = crop.source(i / w, i % w, h, w);
            l[sr * w + sc]
        })
        .collect();
    LabelMap::new(labels.classes(), out).expect("same classes")
}

fn photometric(img: &Tensor, rng: &mut impl Rng, p: &AugmentParams) -> Tensor {
    let (h, w) = (img.dims()[1], img.dims()[2]);
    let m = h * w;
    let mut data = img.data().to_vec();
    if rng.random_bool(p.color_prob) {
        let s = p.color_strength;
        let brightness = rng.random_range(-s..=s);
        let contrast = 1.0 + rng.random_range(-s..=s);
        let shift: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-s..=s) / 2.0);
        for k in 0..3 {
            let chan = &mut data[k * m..(k + 1) * m];
            let mean = chan.iter().sum::<f64>() / m as f64;
            for x in chan {
                *x = (*x - mean) * contrast + mean + brightness + shift[k];
            }
        }
    }
    if rng.random_bool(p.gray_prob) {
        for i in 0..m {
            let g = (data[i] + data[m + i] + data[2 * m + i]) / 3.0;
            data[i] = g;
            data[m + i] = g;
            data[2 * m + i] = g;
        }
    }
    if rng.random_bool(p.blur_prob) {
        let src = data.clone();
        for k in 0..3 {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                        for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                            acc += src[k * m + rr * w + cc];
                            n += 1.0;
                        }
                    }
                    data[k * m + r * w + c] = acc / n;
                }
            }
        }
    }
    Tensor::new(img.dims().to_vec(), data).expect("finite")
}

/// Applies the geometric stack (and for `Strong` the photometric stack) to a scene.
pub fn augment(scene: &SyntheticScene, mode: AugmentMode, seed: u64, p: &AugmentParams) -> SyntheticScene {
    let (h, w) = (scene.height, scene.width);
    let mut geo = trial_rng(seed, 0);
    let mut image = scene.image.clone();
    let mut labels = scene.labels.clone();
    if geo.random_bool(p.flip_prob) {
        image = flip_image(&image);
        labels = flip_labels(&labels, h, w);
    }
    if geo.random_bool(p.crop_prob) {
        let scale = geo.random_range(p.min_crop.clamp(0.0, 1.0)..=1.0);
        let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
        let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
        let crop = Crop {
            top: geo.random_range(0..=h - ch),
            left: geo.random_range(0..=w - cw),
            height: ch,
            width: cw,
        };
        image = crop_image(&image, crop);
        labels = crop_labels(&labels, h, w, crop);
    }
    if mode == AugmentMode::Strong {
        let mut photo = trial_rng(seed, 1);
        image = photometric(&image, &mut photo, p);
    }
    SyntheticScene {
        image,
        labels,
        ..scene.clone()
    }
}

/// Rectangle pasted from the second view in a cut-mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl MixBox {
    /// A box covering between a quarter and half of each side.
    pub fn sample(rng: &mut impl Rng, h: usize, w: usize) -> Self {
        let bh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
        let bw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
        Self {
            top: rng.random_range(0..=h - bh),
            left: rng.random_range(0..=w - bw),
            height: bh,
            width: bw,
        }
    }

    pub fn contains(&self, pixel: usize, w: usize) -> bool {
        let (r, c) = (pixel / w, pixel % w);
        (self.top..self.top + self.height).contains(&r) && (self.left..self.left + self.width).contains(&c)
    }
}

/// Replaces the pixel columns of `a` inside `b` with those of `other`. Works
/// for `[ch, M]` maps and for `[ch, H, W]` images alike.
pub fn mix_columns(a: &Tensor, other: &Tensor, bx: MixBox, w: usize) -> Tensor {
    assert_eq!(a.dims(), other.dims());
    let ch = a.dims()[0];
    let m = a.len() / ch;
    let mut out = a.data().to_vec();
    for p in (0..m).filter(|&p| bx.contains(p, w)) {
        for k in 0..ch {
            out[k * m + p] = other.data()[k * m + p];
        }
    }
    Tensor::new(a.dims().to_vec(), out).expect("same shape")
}

pub fn mix_mask(a: &[bool], other: &[bool], bx: MixBox, w: usize) -> Vec<bool> {
    a.iter()
        .zip(other)
        .enumerate()
        .map(|(p, (&x, &y))| if bx.contains(p, w) { y } else { x })
        .collect()
}

pub fn mix_labels(a: &LabelMap, other: &LabelMap, bx: MixBox, w: usize) -> LabelMap {
    let out = a
        .labels()
        .iter()
        .zip(other.labels())
        .enumerate()
        .map(|(p, (&x, &y))| if bx.contains(p, w) { y } else { x })
        .collect();
    LabelMap::new(a.classes(), out).expect("same classes")
}
