//! Random access to a compiled dataset for training loops: one manifest
//! split, items fetched and transformed on demand.

use std::path::Path;

use crate::augment::{apply_eval, apply_train, AugRng, AugmentConfig, Normalize};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::raster::Raster;
use crate::sampler::{PatchRecord, Target};
use crate::split::Split;

#[derive(Debug, Clone)]
pub enum ItemMode {
    Eval(Normalize),
    /// Stream id of item `i` is `i`; `epoch_seed` selects the epoch.
    Train { augment: AugmentConfig, epoch_seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ItemTarget {
    None,
    Class(u32),
    /// Row-major `height × width` labels.
    Mask { data: Vec<u8>, height: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// Channel-major `3 × height × width`.
    pub image: Vec<f32>,
    pub shape: [usize; 3],
    pub target: ItemTarget,
}

/// Read-only view of one split; safe to share across loader threads.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    manifest: Manifest,
    indices: Vec<usize>,
}

impl ManifestDataset {
    /// `split = None` keeps every record. Records keep manifest order.
    pub fn open(path: &Path, split: Option<Split>) -> Result<Self> {
        Ok(Self::from_manifest(Manifest::load(path)?, split))
    }

    pub fn from_manifest(manifest: Manifest, split: Option<Split>) -> Self {
        let indices = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| split.is_none_or(|s| r.split == s))
            .map(|(i, _)| i)
            .collect();
        ManifestDataset { manifest, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn record(&self, index: usize) -> Result<&PatchRecord> {
        self.indices
            .get(index)
            .map(|&i| &self.manifest.records[i])
            .ok_or(Error::IndexOutOfRange {
                index,
                len: self.len(),
            })
    }

    /// Decoded patch and mask (if any) before any transform.
    pub fn load_raw(&self, index: usize) -> Result<(Raster<u8>, Option<Raster<u8>>)> {
        let r = self.record(index)?;
        let rel = r
            .path
            .as_deref()
            .ok_or_else(|| Error::Manifest(format!("{}#{} has no path", r.slide_id, r.index)))?;
        let img = Raster::load_png(&self.manifest.resolve(rel))?;
        let mask = match &r.target {
            Target::Mask { file, .. } => Some(Raster::load_png(&self.manifest.resolve(file))?),
            _ => None,
        };
        Ok((img, mask))
    }

    pub fn get_item(&self, index: usize, mode: &ItemMode) -> Result<Item> {
        let (img, mask) = self.load_raw(index)?;
        let (image, mask) = match mode {
            ItemMode::Eval(norm) => {
                let out = apply_eval(&img, self.manifest.header.kind, norm)?;
                (out, mask)
            }
            ItemMode::Train { augment, epoch_seed } => {
                apply_train(&img, mask.as_ref(), augment, &AugRng::new(*epoch_seed, index as u64))?
            }
        };
        let target = match (&self.record(index)?.target, mask) {
            (_, Some(m)) => ItemTarget::Mask {
                height: m.height() as usize,
                width: m.width() as usize,
                data: m.into_data(),
            },
            (Target::Class { index, .. }, None) => ItemTarget::Class(*index),
            _ => ItemTarget::None,
        };
        Ok(Item {
            shape: [3, image.height() as usize, image.width() as usize],
            image: image.to_planar(),
            target,
        })
    }
}
