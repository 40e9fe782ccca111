//! Synthetic segmentation scenes: piecewise-constant class regions,
//! class-conditioned colors and additive Gaussian noise.

use derprop_core::theory::trial_rng;
use derprop_core::{LabelMap, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{TrainError, TrainResult};

/// How class regions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneLayout {
    /// Voronoi cells around `blobs` random sites; every class owns a site.
    Voronoi,
    /// Rectangles of classes `1..C` painted over a class-0 background.
    Rectangles,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub layout: SceneLayout,
    /// Voronoi sites, or rectangles painted over the background.
    pub blobs: usize,
    /// Per-pixel noise standard deviation.
    pub noise_sigma: f64,
    /// Per-scene, per-class color offset standard deviation.
    pub color_jitter: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            layout: SceneLayout::Voronoi,
            blobs: 6,
            noise_sigma: 0.4,
            color_jitter: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub params: SceneParams,
}

impl SyntheticScene {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.25, 0.30, 0.65],
    [0.70, 0.30, 0.30],
    [0.30, 0.65, 0.35],
    [0.65, 0.60, 0.25],
    [0.55, 0.30, 0.65],
    [0.30, 0.60, 0.65],
];

/// Mean color of `class`; classes past the fixed palette get evenly spread hues.
pub fn class_color(class: usize, classes: usize) -> [f64; 3] {
    if class < PALETTE.len() && classes <= PALETTE.len() {
        return PALETTE[class];
    }
    let h = class as f64 / classes as f64 * std::f64::consts::TAU;
    [
        0.5 + 0.25 * h.cos(),
        0.5 + 0.25 * (h + 2.0944).cos(),
        0.5 + 0.25 * (h + 4.1888).cos(),
    ]
}

fn voronoi_labels(rng: &mut impl Rng, h: usize, w: usize, c: usize, sites: usize) -> Vec<usize> {
    let sites: Vec<(f64, f64, usize)> = (0..sites.max(c))
        .map(|k| {
            let r = rng.random_range(0.0..h as f64);
            let col = rng.random_range(0.0..w as f64);
            (r, col, if k < c { k } else { rng.random_range(0..c) })
        })
        .collect();
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let dist = |s: &(f64, f64, usize)| (s.0 - r as f64).powi(2) + (s.1 - col as f64).powi(2);
            // First site wins ties, so the map is a pure function of the draws.
            let mut best = 0;
            for k in 1..sites.len() {
                if dist(&sites[k]) < dist(&sites[best]) {
                    best = k;
                }
            }
            labels.push(sites[best].2);
        }
    }
    labels
}

fn rectangle_labels(rng: &mut impl Rng, h: usize, w: usize, c: usize, blobs: usize) -> Vec<usize> {
    let mut labels = vec![0usize; h * w];
    for b in 0..blobs.max(c - 1) {
        // The first C−1 rectangles cover every foreground class once.
        let class = if b < c - 1 { b + 1 } else { rng.random_range(0..c) };
        let bh = rng.random_range(1..=(h / 2).max(1));
        let bw = rng.random_range(1..=(w / 2).max(1));
        let top = rng.random_range(0..=h - bh);
        let left = rng.random_range(0..=w - bw);
        for r in top..top + bh {
            for col in left..left + bw {
                labels[r * w + col] = class;
            }
        }
    }
    labels
}

pub fn generate_synthetic_scene(seed: u64, h: usize, w: usize, c: usize, params: SceneParams) -> TrainResult<SyntheticScene> {
    if h < 4 || w < 4 {
        return Err(TrainError::Config(format!("scene must be at least 4x4, got {h}x{w}")));
    }
    if c < 2 {
        return Err(TrainError::Config(format!("need at least 2 classes, got {c}")));
    }
    if !(params.noise_sigma >= 0.0 && params.color_jitter >= 0.0) {
        return Err(TrainError::Config("noise parameters must be non-negative".into()));
    }
    let mut rng = trial_rng(seed, 0);
    // Later rectangles can cover earlier ones; redraw until every class shows.
    let labels = loop {
        let l = match params.layout {
            SceneLayout::Voronoi => voronoi_labels(&mut rng, h, w, c, params.blobs),
            SceneLayout::Rectangles => rectangle_labels(&mut rng, h, w, c, params.blobs),
        };
        let mut seen = vec![false; c];
        l.iter().for_each(|&k| seen[k] = true);
        if seen.iter().all(|&s| s) {
            break l;
        }
    };
    let noise = Normal::new(0.0, params.noise_sigma).expect("sigma checked");
    let jitter = Normal::new(0.0, params.color_jitter).expect("sigma checked");
    let colors: Vec<[f64; 3]> = (0..c)
        .map(|k| {
            let base = class_color(k, c);
            [0, 1, 2].map(|ch| base[ch] + jitter.sample(&mut rng))
        })
        .collect();
    let m = h * w;
    let mut image = vec![0.0; 3 * m];
    for ch in 0..3 {
        for p in 0..m {
            image[ch * m + p] = colors[labels[p]][ch] + noise.sample(&mut rng);
        }
    }
    Ok(SyntheticScene {
        image: Tensor::new(vec![3, h, w], image)?,
        labels: LabelMap::new(c, labels)?,
        height: h,
        width: w,
        seed,
        params,
    })
}
