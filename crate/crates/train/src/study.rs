//! Multi-run comparisons: ablation presets over seeds and derivative
//! operator variants under one seed.

use derprop_core::DerivativeVariant;
use serde::Serialize;

use crate::config::{Ablation, TrainConfig};
use crate::error::TrainResult;
use crate::trainer::{generate_dataset, train};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Final validation mIoU per seed, in `seeds` order.
    pub final_val_miou: Vec<f64>,
    pub mean: f64,
}

fn final_miou(cfg: &TrainConfig) -> TrainResult<f64> {
    let data = generate_dataset(cfg)?;
    Ok(train(cfg, &data, None)?.final_val_miou())
}

fn row(name: String, seeds: &[u64], values: Vec<f64>) -> StudyRow {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    StudyRow {
        name,
        seeds: seeds.to_vec(),
        final_val_miou: values,
        mean,
    }
}

/// Trains every preset once per seed. The seed drives both the data and the
/// initialization, so presets see identical scenes and starting weights.
pub fn ablation_study(base: &TrainConfig, ablations: &[Ablation], seeds: &[u64]) -> TrainResult<Vec<StudyRow>> {
    ablations
        .iter()
        .map(|&ab| {
            let values = seeds
                .iter()
                .map(|&seed| final_miou(&ab.apply(TrainConfig { seed, ..base.clone() })))
                .collect::<TrainResult<Vec<_>>>()?;
            Ok(row(ab.name().to_string(), seeds, values))
        })
        .collect()
}

/// One entry per derivative variant: the run's final validation mIoU, or the
/// error that prevented it (e.g. an order budget the variant cannot reach).
pub fn operator_study(base: &TrainConfig) -> Vec<(DerivativeVariant, TrainResult<f64>)> {
    DerivativeVariant::ALL
        .iter()
        .map(|&variant| {
            let mut cfg = base.clone();
            cfg.der_loss.variant = variant;
            (variant, final_miou(&cfg))
        })
        .collect()
}
