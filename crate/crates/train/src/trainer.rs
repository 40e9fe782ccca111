//! The semi-supervised training loop and run-directory output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use derprop_core::io::{export_pgm, write_atomic, write_tensor};
use derprop_core::losses::{loss_gradients, LossInputs, LossToggles, SampleTargets};
use derprop_core::similarity::{blend_pseudo_labels, confidence_mask, scaled_propagate, BlendSchedule};
use derprop_core::theory::trial_rng;
use derprop_core::{softmax_columns, LabelMap, LossParts, ProbMap, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{augment, mix_columns, mix_mask, AugmentMode, MixBox};
use crate::config::TrainConfig;
use crate::error::{TrainError, TrainResult};
use crate::metrics::Confusion;
use crate::model::{ForwardPass, Shape, ToyModel};
use crate::momentum::{momentum_update, MomentumState};
use crate::scene::{generate_synthetic_scene, SyntheticScene};

/// Header of `metrics.csv`.
pub const METRICS_HEADER: &str = "epoch,loss_ce,loss_kl,loss_der,miou_train,miou_val";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub loss_der: f64,
    pub miou_train: f64,
    pub miou_val: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: Vec<EpochMetrics>,
    pub final_model: ToyModel,
    /// `None` when the momentum network is disabled.
    pub momentum: Option<MomentumState>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl RunArtifacts {
    pub fn final_val_miou(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.miou_val)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
}

/// Train and validation scenes derived from the configuration seed.
pub fn generate_dataset(cfg: &TrainConfig) -> TrainResult<Dataset> {
    let scene = |i: u64| generate_synthetic_scene(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i), cfg.height, cfg.width, cfg.classes, cfg.scene);
    Ok(Dataset {
        train: (0..cfg.train_scenes as u64).map(scene).collect::<TrainResult<_>>()?,
        val: (0..cfg.val_scenes as u64).map(|i| scene(500_000 + i)).collect::<TrainResult<_>>()?,
    })
}

/// Deterministic labeled/unlabeled split of `n` training scenes.
pub fn split_indices(cfg: &TrainConfig, n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut trial_rng(cfg.seed, 2));
    let k = cfg.labeled_count().min(n);
    let mut labeled = idx[..k].to_vec();
    let mut unlabeled = idx[k..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    (labeled, unlabeled)
}

/// Teacher-side outputs for one unlabeled scene. Computed without gradients.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub pseudo: ProbMap,
    pub mask: Vec<bool>,
    /// Weak-branch features `V^w`.
    pub features: Tensor,
}

fn shape_of(cfg: &TrainConfig) -> Shape {
    Shape {
        hidden: cfg.hidden,
        dim: cfg.feature_dim,
        classes: cfg.classes,
    }
}

fn forward_checked(model: &ToyModel, image: &Tensor, epoch: usize) -> TrainResult<ForwardPass> {
    model.forward(image).map_err(|e| match e {
        TrainError::Core(derprop_core::Error::NonFinite { .. }) => TrainError::NonFinite { epoch, term: "forward" },
        other => other,
    })
}

/// Pseudo-labels `P̄`, confidence mask and `V^w` from the weak view.
pub fn teacher(model: &ToyModel, weak_image: &Tensor, cfg: &TrainConfig, sched: BlendSchedule, epoch: usize) -> TrainResult<TeacherOutput> {
    let fwd = forward_checked(model, weak_image, epoch)?;
    let pw = softmax_columns(&fwd.logits);
    let pseudo = if cfg.toggles.dlp_enabled {
        let rectified = scaled_propagate(&fwd.logits, &fwd.features, cfg.der_loss.variant, cfg.kernel_scale)?;
        blend_pseudo_labels(&pw, &softmax_columns(&rectified), sched)?
    } else {
        pw
    };
    let mask = confidence_mask(&pseudo, cfg.tau);
    Ok(TeacherOutput {
        pseudo,
        mask,
        features: fwd.features,
    })
}

fn toggles(cfg: &TrainConfig) -> LossToggles {
    LossToggles {
        rectified_ce: cfg.toggles.dlp_enabled,
        derivative: cfg.toggles.der_loss_enabled,
        kernel_scale: cfg.kernel_scale,
    }
}

fn check_parts(parts: &LossParts, epoch: usize) -> TrainResult<()> {
    match parts.first_non_finite() {
        Some(term) => Err(TrainError::NonFinite { epoch, term }),
        None => Ok(()),
    }
}

/// Loss parts and parameter gradient of the student on a strong view
/// supervised by fixed teacher outputs.
pub fn student_gradient(
    model: &ToyModel,
    strong_image: &Tensor,
    teacher: &TeacherOutput,
    cfg: &TrainConfig,
    epoch: usize,
) -> TrainResult<(LossParts, Vec<f64>)> {
    let fwd = forward_checked(model, strong_image, epoch)?;
    let g = loss_gradients(
        &LossInputs {
            features: &fwd.features,
            logits: &fwd.logits,
            targets: SampleTargets::Unlabeled {
                pseudo: &teacher.pseudo,
                mask: &teacher.mask,
                teacher_features: &teacher.features,
            },
        },
        &cfg.der_loss,
        &cfg.weights,
        toggles(cfg),
    )?;
    check_parts(&g.parts, epoch)?;
    Ok((g.parts, model.backward(&fwd, &g.d_features, &g.d_logits)))
}

fn labeled_gradient(model: &ToyModel, image: &Tensor, labels: &LabelMap, cfg: &TrainConfig, epoch: usize) -> TrainResult<(LossParts, Vec<f64>)> {
    let fwd = forward_checked(model, image, epoch)?;
    let g = loss_gradients(
        &LossInputs {
            features: &fwd.features,
            logits: &fwd.logits,
            targets: SampleTargets::Labeled { labels },
        },
        &cfg.der_loss,
        &cfg.weights,
        toggles(cfg),
    )?;
    check_parts(&g.parts, epoch)?;
    Ok((g.parts, model.backward(&fwd, &g.d_features, &g.d_logits)))
}

/// Dataset-level mIoU of `params` on `scenes` (unaugmented).
pub fn evaluate_params(shape: Shape, params: &[f64], scenes: &[SyntheticScene]) -> TrainResult<f64> {
    let model = ToyModel::with_params(shape, params.to_vec())?;
    let mut conf = Confusion::new(shape.classes);
    for s in scenes {
        conf.add(&model.predict(&s.image)?, s.labels.labels())?;
    }
    Ok(conf.report().mean)
}

fn add_scaled(acc: &mut [f64], g: &[f64], k: f64) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += k * b);
}

struct Optimizer {
    lr: f64,
    momentum: f64,
    clip: f64,
    velocity: Vec<f64>,
}

impl Optimizer {
    fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        if self.clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.clip {
                let k = self.clip / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grad.iter()).zip(&mut self.velocity) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

fn write_metrics(dir: &Path, rows: &[EpochMetrics]) -> TrainResult<()> {
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for r in rows {
        writeln!(
            csv,
            "{},{:.10},{:.10},{:.10},{:.10},{:.10}",
            r.epoch, r.loss_ce, r.loss_kl, r.loss_der, r.miou_train, r.miou_val
        )
        .expect("writing to a String");
    }
    write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;
    Ok(())
}

fn io(dir: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io(derprop_core::io::IoError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Runs training. With `out` set, writes `config.json`, `metrics.csv` (after
/// every epoch), `final_model.dpt`, `momentum_model.dpt` (momentum runs only)
/// and `maps/epNNN_imgKKK.pgm`.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> TrainResult<RunArtifacts> {
    cfg.validate()?;
    let shape = shape_of(cfg);
    for s in data.train.iter().chain(&data.val) {
        if s.height != cfg.height || s.width != cfg.width || s.classes() != cfg.classes {
            return Err(TrainError::Config("scene geometry does not match the configuration".into()));
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("maps")).map_err(|e| io(dir, e))?;
        write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    }
    let (labeled, unlabeled) = split_indices(cfg, data.train.len());
    let mut model = ToyModel::init(shape, cfg.seed);
    let mut momentum = cfg.toggles.momentum_enabled.then(|| MomentumState::new(&model.params));
    let mut opt = Optimizer {
        lr: cfg.learning_rate,
        momentum: cfg.optimizer_momentum,
        clip: cfg.grad_clip,
        velocity: vec![0.0; model.params.len()],
    };
    let bs = cfg.batch_size;
    let steps = if unlabeled.is_empty() {
        labeled.len().div_ceil(bs)
    } else {
        unlabeled.len().div_ceil(bs)
    };
    let mut rows = Vec::with_capacity(cfg.epochs);

    for ep in 0..cfg.epochs {
        let epoch = ep + 1;
        let sched = BlendSchedule::new(ep, cfg.epochs)?;
        let mut rng: ChaCha8Rng = trial_rng(cfg.seed, 1000 + ep as u64);
        let mut lab_order = labeled.clone();
        lab_order.shuffle(&mut rng);
        let mut unl_order = unlabeled.clone();
        unl_order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut samples = 0usize;

        for step in 0..steps {
            let mut grad = vec![0.0; model.params.len()];
            for b in 0..bs {
                let scene = &data.train[lab_order[(step * bs + b) % lab_order.len()]];
                let view = augment(scene, AugmentMode::Weak, rng.random(), &cfg.augment);
                let (parts, g) = labeled_gradient(&model, &view.image, &view.labels, cfg, epoch)?;
                add_scaled(&mut grad, &g, 1.0 / bs as f64);
                accumulate_parts(&mut sums, &parts);
                samples += 1;
            }
            let chunk = &unl_order[(step * bs).min(unl_order.len())..((step + 1) * bs).min(unl_order.len())];
            for (pos, &u) in chunk.iter().enumerate() {
                let seed = rng.random();
                let weak = augment(&data.train[u], AugmentMode::Weak, seed, &cfg.augment);
                let strong = augment(&data.train[u], AugmentMode::Strong, seed, &cfg.augment);
                let mut t = teacher(&model, &weak.image, cfg, sched, epoch)?;
                let mut image = strong.image;
                if unl_order.len() > 1 && rng.random_bool(cfg.augment.mix_prob) {
                    let partner = unl_order[(step * bs + pos + 1) % unl_order.len()];
                    let pseed = rng.random();
                    let pweak = augment(&data.train[partner], AugmentMode::Weak, pseed, &cfg.augment);
                    let pstrong = augment(&data.train[partner], AugmentMode::Strong, pseed, &cfg.augment);
                    let pt = teacher(&model, &pweak.image, cfg, sched, epoch)?;
                    let bx = MixBox::sample(&mut rng, cfg.height, cfg.width);
                    let w = cfg.width;
                    image = mix_columns(&image, &pstrong.image, bx, w);
                    t = TeacherOutput {
                        pseudo: ProbMap::new(mix_columns(t.pseudo.tensor(), pt.pseudo.tensor(), bx, w))?,
                        mask: mix_mask(&t.mask, &pt.mask, bx, w),
                        features: mix_columns(&t.features, &pt.features, bx, w),
                    };
                }
                let (parts, g) = student_gradient(&model, &image, &t, cfg, epoch)?;
                add_scaled(&mut grad, &g, 1.0 / chunk.len() as f64);
                accumulate_parts(&mut sums, &parts);
                samples += 1;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, term: "gradient" });
            }
            opt.step(&mut model.params, &mut grad);
        }

        if let Some(state) = momentum.take() {
            momentum = Some(momentum_update(state, &model.params)?);
        }
        let eval_params = momentum.as_ref().map_or(&model.params, |m| &m.theta_m);
        let n = samples.max(1) as f64;
        rows.push(EpochMetrics {
            epoch,
            loss_ce: sums.ce / n,
            loss_kl: sums.kl / n,
            loss_der: sums.der / n,
            miou_train: evaluate_params(shape, eval_params, &data.train)?,
            miou_val: evaluate_params(shape, eval_params, &data.val)?,
        });
        if let Some(dir) = out {
            write_metrics(dir, &rows)?;
            let eval_model = ToyModel::with_params(shape, eval_params.clone())?;
            for (k, s) in data.val.iter().take(cfg.saved_maps).enumerate() {
                let pred = LabelMap::new(cfg.classes, eval_model.predict(&s.image)?)?;
                export_pgm(&pred, s.height, s.width, dir.join("maps").join(format!("ep{epoch:03}_img{k:03}.pgm")))?;
            }
        }
    }

    if let Some(dir) = out {
        write_tensor(dir.join("final_model.dpt"), &Tensor::new(vec![model.params.len()], model.params.clone())?)?;
        if let Some(m) = &momentum {
            write_tensor(dir.join("momentum_model.dpt"), &Tensor::new(vec![m.theta_m.len()], m.theta_m.clone())?)?;
        }
    }
    Ok(RunArtifacts {
        metrics: rows,
        final_model: model,
        momentum,
        labeled,
        unlabeled,
    })
}

fn accumulate_parts(sum: &mut LossParts, p: &LossParts) {
    sum.ce += p.ce;
    sum.kl += p.kl;
    sum.der += p.der;
}
