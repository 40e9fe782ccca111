//! Seeded finite-difference suite over every loss with an analytic gradient.
//!
//! Objectives are evaluated through the plain value functions, never through
//! the gradient code, so each check compares two independent routes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::derivative::diff_columns;
use crate::error::Result;
use crate::gradcheck::finite_difference_check;
use crate::losses::{
    cross_entropy_masked, derivative_loss, derivative_loss_grad, kl_masked, labeled_target_stack, loss_gradients,
    prediction_stack, softmax_cross_entropy_grad, softmax_kl_grad, total_loss, unlabeled_target_stack, DerLossSpec,
    HighOrderTarget, LossInputs, LossParts, LossToggles, LossWeights, SampleTargets,
};
use crate::similarity::{gram, scaled_propagate, KernelScale, SimilarityMatrix};
use crate::tensor::{softmax_columns, LabelMap, ProbMap, Tensor};
use crate::theory::trial_rng;

/// Finite-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Instances whose non-smooth arguments come closer than this to zero are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;
/// Pass threshold on the maximum relative error.
pub const GRAD_TOL: f64 = 1e-4;

const DIM: usize = 6;
const PIXELS: usize = 4;
const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSuiteResult {
    pub case: String,
    pub instances: usize,
    /// Instances redrawn because they sat near a kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// The cases of the suite, in report order.
pub fn suite_cases() -> Vec<String> {
    let mut cases = Vec::new();
    for q in 0..=3 {
        for sparsity in [true, false] {
            cases.push(format!("derivative_loss Q={q} sparsity={}", if sparsity { "on" } else { "off" }));
        }
    }
    cases.extend(["cross_entropy", "kl", "total labeled", "total unlabeled"].map(String::from));
    cases
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).expect("finite")
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize, m: usize) -> ProbMap {
    softmax_columns(&uniform(rng, c, m, -2.0, 2.0))
}

fn random_mask(rng: &mut ChaCha8Rng, m: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
    mask[0] = true;
    mask
}

/// Smallest absolute argument of any `|·|` in the derivative loss at `v`.
fn derivative_kink_distance(v: &Tensor, gt: &[SimilarityMatrix], spec: &DerLossSpec) -> Result<f64> {
    let mut min = f64::INFINITY;
    for (q, g) in gt.iter().enumerate() {
        let s = gram(&diff_columns(v, q, spec.variant)?);
        for (a, b) in s.data().iter().zip(g.values.data()) {
            min = min.min((a - b).abs());
        }
    }
    if spec.sparsity_enabled {
        let high = diff_columns(v, spec.order_budget + 1, spec.variant)?;
        min = high.data().iter().fold(min, |acc, x| acc.min(x.abs()));
    }
    Ok(min)
}

fn derivative_instance(rng: &mut ChaCha8Rng, spec: &DerLossSpec) -> Result<(Tensor, Vec<SimilarityMatrix>)> {
    let v = uniform(rng, DIM, PIXELS, -0.5, 0.5);
    let teacher = uniform(rng, DIM, PIXELS, -0.5, 0.5);
    Ok((v, unlabeled_target_stack(&teacher, spec.order_budget, spec.variant)?))
}

/// Value of the overall objective through the value-only functions.
pub fn total_loss_value(
    features: &Tensor,
    logits: &Tensor,
    targets: &SampleTargets<'_>,
    spec: &DerLossSpec,
    w: &LossWeights,
    toggles: LossToggles,
) -> Result<f64> {
    let m = features.cols();
    let p = softmax_columns(logits);
    let mut parts = LossParts::default();
    let (target, mask, half, gt) = match *targets {
        SampleTargets::Labeled { labels } => (
            labels.one_hot(),
            vec![true; m],
            1.0,
            labeled_target_stack(labels, spec.order_budget, spec.labeled_high_order_target, spec.variant)?,
        ),
        SampleTargets::Unlabeled {
            pseudo,
            mask,
            teacher_features,
        } => {
            parts.kl = kl_masked(&p, pseudo.tensor(), mask)?;
            let half = if toggles.rectified_ce { 0.5 } else { 1.0 };
            (
                pseudo.tensor().clone(),
                mask.to_vec(),
                half,
                unlabeled_target_stack(teacher_features, spec.order_budget, spec.variant)?,
            )
        }
    };
    parts.ce = half * cross_entropy_masked(&p, &target, &mask)?;
    if toggles.rectified_ce {
        let rectified = softmax_columns(&scaled_propagate(logits, features, spec.variant, toggles.kernel_scale)?);
        parts.ce += half * cross_entropy_masked(&rectified, &target, &mask)?;
    }
    if toggles.derivative {
        parts.der = derivative_loss(&prediction_stack(features, spec.order_budget, spec.variant)?, &gt, features, spec)?;
    }
    Ok(total_loss(&parts, w))
}

fn run_case(case: usize, trials: usize, seed: u64) -> Result<GradSuiteResult> {
    let names = suite_cases();
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    for t in 0..trials {
        let mut rng = trial_rng(seed ^ ((case as u64) << 32), t as u64);
        let err = loop {
            if let Some(e) = one_instance(case, &mut rng)? {
                break e;
            }
            redrawn += 1;
        };
        worst = worst.max(err);
    }
    Ok(GradSuiteResult {
        case: names[case].clone(),
        instances: trials,
        redrawn,
        max_rel_error: worst,
        passed: worst < GRAD_TOL,
    })
}

/// Returns `None` when the drawn instance sits too close to a kink.
fn one_instance(case: usize, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    match case {
        0..=7 => {
            let spec = DerLossSpec {
                order_budget: case / 2,
                sparsity_enabled: case % 2 == 0,
                ..DerLossSpec::default()
            };
            let (v, gt) = derivative_instance(rng, &spec)?;
            if derivative_kink_distance(&v, &gt, &spec)? < KINK_MARGIN {
                return Ok(None);
            }
            let (_, grad) = derivative_loss_grad(&v, &gt, &spec)?;
            let f = |x: &Tensor| derivative_loss(&prediction_stack(x, spec.order_budget, spec.variant)?, &gt, x, &spec);
            Ok(Some(finite_difference_check(f, &v, FD_EPS, &grad)?.max_rel_error))
        }
        8 | 9 => {
            let logits = uniform(rng, CLASSES, PIXELS, -2.0, 2.0);
            let target = random_probs(rng, CLASSES, PIXELS);
            let mask = random_mask(rng, PIXELS);
            let kl = case == 9;
            let (_, grad) = if kl {
                softmax_kl_grad(&logits, target.tensor(), &mask)?
            } else {
                softmax_cross_entropy_grad(&logits, target.tensor(), &mask)?
            };
            let f = |x: &Tensor| {
                let p = softmax_columns(x);
                if kl {
                    kl_masked(&p, target.tensor(), &mask)
                } else {
                    cross_entropy_masked(&p, target.tensor(), &mask)
                }
            };
            Ok(Some(finite_difference_check(f, &logits, FD_EPS, &grad)?.max_rel_error))
        }
        _ => {
            let spec = DerLossSpec::default();
            let w = LossWeights::default();
            // The unlabeled case runs the scaled kernel the trainer uses.
            let toggles = LossToggles {
                kernel_scale: if case == 10 { KernelScale::Unit } else { KernelScale::DimOverPixels },
                ..LossToggles::default()
            };
            let v = uniform(rng, DIM, PIXELS, -0.5, 0.5);
            let logits = uniform(rng, CLASSES, PIXELS, -2.0, 2.0);
            let labels = LabelMap::new(CLASSES, (0..PIXELS).map(|_| rng.random_range(0..CLASSES)).collect())?;
            let pseudo = random_probs(rng, CLASSES, PIXELS);
            let mask = random_mask(rng, PIXELS);
            let teacher = uniform(rng, DIM, PIXELS, -0.5, 0.5);
            let targets = if case == 10 {
                SampleTargets::Labeled { labels: &labels }
            } else {
                SampleTargets::Unlabeled {
                    pseudo: &pseudo,
                    mask: &mask,
                    teacher_features: &teacher,
                }
            };
            let gt = match targets {
                SampleTargets::Labeled { labels } => {
                    labeled_target_stack(labels, spec.order_budget, HighOrderTarget::Ygram, spec.variant)?
                }
                SampleTargets::Unlabeled { teacher_features, .. } => {
                    unlabeled_target_stack(teacher_features, spec.order_budget, spec.variant)?
                }
            };
            if derivative_kink_distance(&v, &gt, &spec)? < KINK_MARGIN {
                return Ok(None);
            }
            let g = loss_gradients(
                &LossInputs {
                    features: &v,
                    logits: &logits,
                    targets,
                },
                &spec,
                &w,
                toggles,
            )?;
            let fv = |x: &Tensor| total_loss_value(x, &logits, &targets, &spec, &w, toggles);
            let fl = |x: &Tensor| total_loss_value(&v, x, &targets, &spec, &w, toggles);
            let ev = finite_difference_check(fv, &v, FD_EPS, &g.d_features)?.max_rel_error;
            let el = finite_difference_check(fl, &logits, FD_EPS, &g.d_logits)?.max_rel_error;
            Ok(Some(ev.max(el)))
        }
    }
}

/// Runs every case of [`suite_cases`] on `trials` seeded instances.
pub fn run_gradient_suite(trials: usize, seed: u64) -> Result<Vec<GradSuiteResult>> {
    (0..suite_cases().len()).map(|c| run_case(c, trials, seed)).collect()
}
