//! Training-protocol presets for external trainers, with a sampled
//! learning-rate table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{PTCGA200_MEAN, PTCGA200_STD};
use crate::vit::{lr_at, peak_lr};

/// Read from the "4k" batch size of the pretraining runs.
pub const PRETRAIN_BATCH: u32 = 4096;
pub const FINETUNE_ITERATIONS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { momentum: f64, nesterov: bool },
    Adamw { beta1: f64, beta2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepUnit {
    Epoch,
    Iteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePoint {
    pub step: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub preset: String,
    pub model: Option<String>,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub batch_size: u32,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub schedule: String,
    pub step_unit: StepUnit,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub image_size: Option<u32>,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
    pub lr_table: Vec<SchedulePoint>,
}

struct PretrainRow {
    key: &'static str,
    model: &'static str,
    epochs: u64,
    image_size: u32,
    weight_decay: f64,
    base_lr: f64,
    warmup: u64,
}

const PRETRAIN: [PretrainRow; 6] = [
    PretrainRow { key: "resnet18", model: "ResNet18", epochs: 60, image_size: 224, weight_decay: 5e-5, base_lr: 1e-3, warmup: 10 },
    PretrainRow { key: "resnet50", model: "ResNet50", epochs: 60, image_size: 224, weight_decay: 5e-5, base_lr: 5e-4, warmup: 10 },
    PretrainRow { key: "inceptionv3", model: "InceptionV3", epochs: 60, image_size: 299, weight_decay: 5e-5, base_lr: 1e-4, warmup: 10 },
    PretrainRow { key: "efficientnet-b3", model: "EfficientNet-b3", epochs: 60, image_size: 300, weight_decay: 5e-5, base_lr: 1e-4, warmup: 10 },
    PretrainRow { key: "vit-s16", model: "ViT-S/16", epochs: 80, image_size: 224, weight_decay: 0.03, base_lr: 1e-4, warmup: 15 },
    PretrainRow { key: "vit-b32", model: "ViT-B/32", epochs: 100, image_size: 224, weight_decay: 0.03, base_lr: 1e-4, warmup: 20 },
];

pub fn preset_names() -> Vec<String> {
    std::iter::once("finetune-default".to_string())
        .chain(PRETRAIN.iter().map(|r| format!("pretrain-{}", r.key)))
        .collect()
}

fn table(total: u64, warmup: u64, peak: f64, samples: usize) -> Result<Vec<SchedulePoint>> {
    let n = samples.max(1) as u64;
    let mut steps: Vec<u64> = (0..=n).map(|i| i * total / n).collect();
    if warmup > 0 {
        steps.push(warmup);
    }
    steps.sort_unstable();
    steps.dedup();
    // the peak is passed with batch 256 so it is used unscaled
    steps
        .into_iter()
        .map(|step| Ok(SchedulePoint { step, lr: lr_at(step, total, warmup, peak, 256)? }))
        .collect()
}

/// Resolves a preset. `samples` is the number of intervals in the
/// learning-rate table; the warmup boundary is always included.
pub fn protocol(name: &str, samples: usize) -> Result<Protocol> {
    if name == "finetune-default" {
        let peak = 0.05;
        return Ok(Protocol {
            preset: name.to_string(),
            model: None,
            optimizer: Optimizer::Sgd {
                momentum: 0.9,
                nesterov: false,
            },
            weight_decay: 0.0,
            batch_size: 512,
            base_lr: peak,
            peak_lr: peak,
            schedule: "cosine".into(),
            step_unit: StepUnit::Iteration,
            total_steps: FINETUNE_ITERATIONS,
            warmup_steps: 0,
            image_size: None,
            normalize_mean: PTCGA200_MEAN,
            normalize_std: PTCGA200_STD,
            lr_table: table(FINETUNE_ITERATIONS, 0, peak, samples)?,
        });
    }
    let row = name
        .strip_prefix("pretrain-")
        .and_then(|k| PRETRAIN.iter().find(|r| r.key == k))
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
    let peak = peak_lr(row.base_lr, PRETRAIN_BATCH);
    Ok(Protocol {
        preset: name.to_string(),
        model: Some(row.model.to_string()),
        optimizer: Optimizer::Adamw { beta1: 0.9, beta2: 0.999 },
        weight_decay: row.weight_decay,
        batch_size: PRETRAIN_BATCH,
        base_lr: row.base_lr,
        peak_lr: peak,
        schedule: "linear-warmup-cosine".into(),
        step_unit: StepUnit::Epoch,
        total_steps: row.epochs,
        warmup_steps: row.warmup,
        image_size: Some(row.image_size),
        normalize_mean: PTCGA200_MEAN,
        normalize_std: PTCGA200_STD,
        lr_table: table(row.epochs, row.warmup, peak, samples)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finetune_default() {
        let p = protocol("finetune-default", 10).unwrap();
        assert_eq!(p.optimizer, Optimizer::Sgd { momentum: 0.9, nesterov: false });
        assert_eq!((p.batch_size, p.peak_lr, p.weight_decay), (512, 0.05, 0.0));
        assert_eq!(p.lr_table.first().unwrap().lr, 0.05);
        assert!(p.lr_table.last().unwrap().lr.abs() < 1e-15);
    }

    #[test]
    fn pretrain_resnet50() {
        let p = protocol("pretrain-resnet50", 60).unwrap();
        assert_eq!((p.total_steps, p.image_size, p.weight_decay, p.base_lr, p.warmup_steps), (60, Some(224), 5e-5, 5e-4, 10));
        assert!((p.peak_lr - 8e-3).abs() < 1e-12);
        let at_warmup = p.lr_table.iter().find(|s| s.step == 10).unwrap();
        assert!((at_warmup.lr - 8e-3).abs() < 1e-12);
    }

    #[test]
    fn every_preset_resolves() {
        for name in preset_names() {
            protocol(&name, 5).unwrap();
        }
        assert_eq!(preset_names().len(), 7);
        assert!(matches!(protocol("pretrain-vgg16", 5), Err(Error::UnknownPreset(_))));
    }
}
