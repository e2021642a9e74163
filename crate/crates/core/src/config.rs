//! Compile configuration: a JSON document validated before any I/O.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::presets::DatasetKind;
use crate::sampler::SampleSpec;
use crate::split::{SplitPlan, SplitStrategy};
use crate::tissue::TissueParams;

/// Annotated fraction a patch needs to count as tumor.
pub const DEFAULT_ANNOTATION_TAU: f64 = 1.0;

fn default_annotation_tau() -> f64 {
    DEFAULT_ANNOTATION_TAU
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum LabelPolicy {
    #[default]
    None,
    /// Class from the slide's `organ` tag, after applying `merge`
    /// (source organ → class name).
    Organ {
        classes: Vec<String>,
        #[serde(default)]
        merge: BTreeMap<String, String>,
    },
    /// Tumor/normal from slide type and annotation coverage.
    Camelyon {
        #[serde(default = "default_annotation_tau")]
        annotation_tau: f64,
    },
    /// Co-cropped segmentation masks from the slide's annotation pyramid.
    Mask,
}

pub const CAMELYON_CLASSES: [&str; 2] = ["normal", "tumor"];
/// Class directory used for segmentation patches.
pub const MASK_CLASS_DIR: &str = "patches";
pub const UNLABELED_CLASS_DIR: &str = "unlabeled";

impl LabelPolicy {
    pub fn class_names(&self) -> Vec<String> {
        match self {
            LabelPolicy::Organ { classes, .. } => classes.clone(),
            LabelPolicy::Camelyon { .. } => CAMELYON_CLASSES.iter().map(|s| s.to_string()).collect(),
            LabelPolicy::Mask => (0..=crate::sampler::MAX_MASK_LABEL).map(|v| v.to_string()).collect(),
            LabelPolicy::None => Vec::new(),
        }
    }

    /// Class index and name for an organ tag.
    pub fn organ_class(&self, organ: &str) -> Result<(u32, String)> {
        let LabelPolicy::Organ { classes, merge } = self else {
            return Err(Error::ConfigConflict("organ labels need the organ policy".into()));
        };
        let name = merge.get(organ).map(String::as_str).unwrap_or(organ);
        classes
            .iter()
            .position(|c| c == name)
            .map(|i| (i as u32, name.to_string()))
            .ok_or_else(|| Error::UnknownClass(organ.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileConfig {
    pub name: String,
    #[serde(default)]
    pub kind: DatasetKind,
    pub corpus_root: PathBuf,
    pub sampling: SampleSpec,
    pub split: SplitPlan,
    #[serde(default)]
    pub labels: LabelPolicy,
    /// Slides are kept only when every listed metadata key has the value.
    #[serde(default)]
    pub filters: BTreeMap<String, String>,
    #[serde(default)]
    pub rebalance: bool,
    #[serde(default)]
    pub tissue: TissueParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
    /// Master seed; overrides the sampling and split seeds.
    #[serde(default)]
    pub seed: u64,
    /// Worker count; 0 uses all cores, 1 runs sequentially.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub emit_tissue_masks: bool,
}

impl CompileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: CompileConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if cfg.corpus_root.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.corpus_root = dir.join(&cfg.corpus_root);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Preset for one of the published datasets.
    pub fn preset(kind: DatasetKind, corpus_root: impl Into<PathBuf>) -> Self {
        let (sampling, split, labels, filters, rebalance) = match kind {
            DatasetKind::Ptcga200 | DatasetKind::Generic => (
                SampleSpec::random(500, kind.scale_um(), kind.out_px()),
                SplitPlan::new(ptcga_fractions(), SplitStrategy::SlideLevel, 0),
                LabelPolicy::None,
                BTreeMap::new(),
                false,
            ),
            DatasetKind::Pcam200 => (
                SampleSpec::grid(None, kind.scale_um(), kind.out_px()),
                SplitPlan::new([0.75, 0.25, 0.0], SplitStrategy::SourceConstrained, 0),
                LabelPolicy::Camelyon {
                    annotation_tau: DEFAULT_ANNOTATION_TAU,
                },
                BTreeMap::new(),
                true,
            ),
            DatasetKind::SegPanda200 => (
                SampleSpec::grid(None, kind.scale_um(), kind.out_px()),
                SplitPlan::new([0.7, 0.15, 0.15], SplitStrategy::StratifiedIsup, 0),
                LabelPolicy::Mask,
                BTreeMap::from([("provider".to_string(), "Radboud".to_string())]),
                false,
            ),
        };
        CompileConfig {
            name: kind.name().to_string(),
            kind,
            corpus_root: corpus_root.into(),
            sampling,
            split,
            labels,
            filters,
            rebalance,
            tissue: TissueParams::default(),
            augment: None,
            seed: 0,
            jobs: 0,
            emit_tissue_masks: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::InvalidConfig(format!("invalid dataset name {:?}", self.name)));
        }
        self.sampling.validate()?;
        self.split.validate()?;
        if !(self.tissue.work_mpp > 0.0) {
            return Err(Error::InvalidConfig("tissue work_mpp must be positive".into()));
        }
        match &self.labels {
            LabelPolicy::Organ { classes, merge } => {
                if classes.is_empty() {
                    return Err(Error::InvalidConfig("organ policy needs at least one class".into()));
                }
                let mut seen = std::collections::BTreeSet::new();
                if let Some(dup) = classes.iter().find(|c| !seen.insert(c.as_str())) {
                    return Err(Error::InvalidConfig(format!("duplicate class {dup:?}")));
                }
                if let Some((from, to)) = merge.iter().find(|(_, to)| !classes.contains(to)) {
                    return Err(Error::InvalidConfig(format!("merge {from:?} -> {to:?} targets an undeclared class")));
                }
            }
            LabelPolicy::Camelyon { annotation_tau } if !(0.0..=1.0).contains(annotation_tau) => {
                return Err(Error::InvalidConfig(format!("annotation_tau {annotation_tau} outside [0, 1]")));
            }
            _ => {}
        }
        if self.rebalance && matches!(self.labels, LabelPolicy::None | LabelPolicy::Mask) {
            return Err(Error::ConfigConflict("rebalance needs class labels".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn sample_spec(&self) -> SampleSpec {
        SampleSpec {
            seed: self.seed,
            ..self.sampling
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            seed: self.seed,
            ..self.split.clone()
        }
    }

    /// Hash of everything that determines the output; `jobs` is excluded.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.jobs = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Published PTCGA200 split proportions.
pub fn ptcga_fractions() -> [f64; 3] {
    let total = 5_110_000.0;
    [4_945_500.0 / total, 107_500.0 / total, 57_000.0 / total]
}
