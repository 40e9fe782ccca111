//! Confusion-matrix mIoU.

use derprop_core::LabelMap;
use serde::Serialize;

use crate::error::{TrainError, TrainResult};

/// `counts[gt][pred]`, accumulated over any number of label maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> TrainResult<()> {
        if pred.len() != gt.len() {
            return Err(TrainError::Config(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= self.classes || g >= self.classes {
                return Err(TrainError::Config(format!("class index out of range: pred {p}, gt {g}")));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let gt_total: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
                let pred_total: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, mean }
    }
}

/// `IoU_c = TP / (TP + FP + FN)` per class; classes absent from both maps are left out of the mean.
pub fn evaluate_miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> TrainResult<MiouReport> {
    let mut conf = Confusion::new(classes);
    conf.add(pred.labels(), gt.labels())?;
    Ok(conf.report())
}
