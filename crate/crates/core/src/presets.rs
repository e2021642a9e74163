//! Dataset kinds and the geometry of the three published datasets.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Organ classification, random patches per slide.
    Ptcga200,
    /// Tumor/normal classification, grid patches from annotated slides.
    Pcam200,
    /// Prostate segmentation, grid patches with co-cropped masks.
    SegPanda200,
    #[default]
    Generic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Ptcga200 => "ptcga200",
            DatasetKind::Pcam200 => "pcam200",
            DatasetKind::SegPanda200 => "segpanda200",
            DatasetKind::Generic => "generic",
        }
    }

    /// Physical patch side in µm.
    pub fn scale_um(self) -> f64 {
        match self {
            DatasetKind::SegPanda200 => 400.0,
            _ => 200.0,
        }
    }

    /// Patch side in pixels.
    pub fn out_px(self) -> u32 {
        match self {
            DatasetKind::SegPanda200 => 1024,
            _ => 512,
        }
    }

    pub fn mpp(self) -> f64 {
        self.scale_um() / self.out_px() as f64
    }

    /// Evaluation images of these kinds are center-cropped before normalization.
    pub fn eval_center_crop(self) -> Option<u32> {
        match self {
            DatasetKind::Ptcga200 | DatasetKind::Pcam200 => Some(EVAL_CENTER_CROP),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const EVAL_CENTER_CROP: u32 = 287;

/// Published split sizes (train, val, test) for the full-scale datasets.
pub fn published_counts(kind: DatasetKind) -> Option<[u64; 3]> {
    match kind {
        DatasetKind::Ptcga200 => Some([4_945_500, 107_500, 57_000]),
        DatasetKind::Pcam200 => Some([28_539, 10_490, 17_674]),
        DatasetKind::SegPanda200 => Some([70_878, 15_042, 15_040]),
        DatasetKind::Generic => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_share_one_mpp() {
        for k in [DatasetKind::Ptcga200, DatasetKind::Pcam200, DatasetKind::SegPanda200] {
            assert_eq!(k.mpp(), 0.390625);
        }
    }

    #[test]
    fn published_totals() {
        let t: u64 = published_counts(DatasetKind::Ptcga200).unwrap().iter().sum();
        assert_eq!(t, 5_110_000);
        assert_eq!(t / 500, 10_220);
        let t: u64 = published_counts(DatasetKind::Pcam200).unwrap().iter().sum();
        assert_eq!(t, 56_703);
        let t: u64 = published_counts(DatasetKind::SegPanda200).unwrap().iter().sum();
        assert_eq!(t, 100_960);
    }
}
