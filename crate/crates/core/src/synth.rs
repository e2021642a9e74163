//! Synthetic slide corpora for tests, benchmarks and demos.
//!
//! Each slide is a pale background with one elliptical stained blob, stored
//! as a three-level pyramid directory. Optional companions: a tumor
//! annotation mask (a disc inside the blob) and a segmentation label mask
//! (vertical stripes labeled 1..=5 inside the blob, 0 outside).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::raster::Raster;
use crate::rng::slide_rng;
use crate::slide::write_pyramid_dir;

pub const SYNTH_DOWNSAMPLES: [u32; 3] = [1, 4, 16];
pub const ANNOTATION_DIR: &str = "annotation";
pub const MASK_DIR: &str = "mask";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub slides: usize,
    /// Level-0 side in pixels; a multiple of 16.
    pub size_px: u32,
    pub base_mpp: f64,
    pub organs: Vec<String>,
    pub providers: Vec<String>,
    /// Every other slide is a tumor slide with an annotation mask.
    pub tumor_annotations: bool,
    /// Every `test_every`-th slide is tagged `origin=test` (0 disables).
    pub test_every: usize,
    pub segmentation_masks: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            slides: 10,
            size_px: 1024,
            base_mpp: 1.0,
            organs: vec!["kidney".into(), "liver".into(), "lung".into()],
            providers: vec!["Radboud".into(), "Karolinska".into()],
            tumor_annotations: false,
            test_every: 3,
            segmentation_masks: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn slide_id(i: usize) -> String {
        format!("slide_{i:04}")
    }

    pub fn validate(&self) -> Result<()> {
        if self.size_px == 0 || self.size_px % 16 != 0 {
            return Err(Error::InvalidConfig(format!("size_px {} must be a positive multiple of 16", self.size_px)));
        }
        if !(self.base_mpp > 0.0) || self.organs.is_empty() || self.providers.is_empty() {
            return Err(Error::InvalidConfig("base_mpp, organs and providers must be set".into()));
        }
        Ok(())
    }

    /// Metadata of slide `i`.
    pub fn metadata(&self, i: usize) -> BTreeMap<String, String> {
        let tumor = self.tumor_annotations && i % 2 == 0;
        let test = self.test_every > 0 && i % self.test_every == self.test_every - 1;
        BTreeMap::from([
            ("organ".to_string(), self.organs[i % self.organs.len()].clone()),
            ("provider".to_string(), self.providers[i % self.providers.len()].clone()),
            ("isup".to_string(), (i % 6).to_string()),
            ("slide_type".to_string(), if tumor { "tumor" } else { "normal" }.to_string()),
            ("origin".to_string(), if test { "test" } else { "train" }.to_string()),
        ])
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Blob {
    fn inside(&self, x: f64, y: f64, scale: f64) -> bool {
        let dx = (x - self.cx * scale) / (self.rx * scale);
        let dy = (y - self.cy * scale) / (self.ry * scale);
        dx * dx + dy * dy <= 1.0
    }
}

/// Box-filter downsample by an integer factor.
fn downsample_rgb(img: &Raster<u8>, f: u32) -> Raster<u8> {
    let (w, h) = (img.width() / f, img.height() / f);
    Raster::from_fn(w, h, img.channels(), |x, y, c| {
        let mut sum = 0u32;
        for j in 0..f {
            for i in 0..f {
                sum += img.get(x * f + i, y * f + j, c) as u32;
            }
        }
        ((sum + f * f / 2) / (f * f)) as u8
    })
}

/// Label masks are rendered per level from the same geometry, so labels
/// never get averaged.
fn render_levels(size: u32, f: impl Fn(u32, u32, u32) -> u8) -> Vec<(f64, Raster<u8>)> {
    SYNTH_DOWNSAMPLES
        .iter()
        .map(|&ds| {
            let s = size / ds;
            // sample the level-0 pixel at the center of each coarse pixel
            (ds as f64, Raster::from_fn(s, s, 1, |x, y, _| f(x * ds + ds / 2, y * ds + ds / 2, size)))
        })
        .collect()
}

/// Writes slide `i` of the corpus into `root/{slide_id}`.
pub fn write_synthetic_slide(root: &Path, spec: &SynthSpec, i: usize) -> Result<PathBuf> {
    let id = SynthSpec::slide_id(i);
    let dir = root.join(&id);
    let mut rng = slide_rng(spec.seed, "synth", &id);
    let size = spec.size_px;
    let blob = Blob {
        cx: rng.random_range(0.42..0.58),
        cy: rng.random_range(0.42..0.58),
        rx: rng.random_range(0.28..0.38),
        ry: rng.random_range(0.28..0.38),
    };
    let tint: [f64; 3] = [rng.random_range(185.0..215.0), rng.random_range(95.0..135.0), rng.random_range(160.0..190.0)];
    let s = size as f64;
    let mut level0 = Raster::new(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let tissue = blob.inside(x as f64 + 0.5, y as f64 + 0.5, s);
            for c in 0..3u8 {
                let v = if tissue {
                    tint[c as usize] + rng.random_range(-25.0..25.0)
                } else {
                    236.0 + rng.random_range(-6.0..6.0)
                };
                level0.set(x, y, c, v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    let mut levels = vec![(1.0, level0.clone())];
    for &ds in &SYNTH_DOWNSAMPLES[1..] {
        levels.push((ds as f64, downsample_rgb(&level0, ds)));
    }

    let meta = spec.metadata(i);
    let mut annotation = None;
    if spec.tumor_annotations && meta["slide_type"] == "tumor" {
        let (tx, ty, tr) = (blob.cx, blob.cy, 0.5 * blob.rx.min(blob.ry));
        let levels = render_levels(size, |x, y, size| {
            let s = size as f64;
            let (dx, dy) = (x as f64 + 0.5 - tx * s, y as f64 + 0.5 - ty * s);
            (dx * dx + dy * dy <= (tr * s) * (tr * s)) as u8
        });
        write_pyramid_dir(&dir.join(ANNOTATION_DIR), &format!("{id}_annotation"), spec.base_mpp, &levels, &BTreeMap::new(), None)?;
        annotation = Some(ANNOTATION_DIR);
    }
    if spec.segmentation_masks {
        let levels = render_levels(size, |x, y, size| {
            if blob.inside(x as f64 + 0.5, y as f64 + 0.5, size as f64) {
                1 + (x * 5 / size) as u8
            } else {
                0
            }
        });
        write_pyramid_dir(&dir.join(MASK_DIR), &format!("{id}_mask"), spec.base_mpp, &levels, &BTreeMap::new(), None)?;
        annotation = Some(MASK_DIR);
    }
    write_pyramid_dir(&dir, &id, spec.base_mpp, &levels, &meta, annotation)?;
    Ok(dir)
}

/// Writes the whole corpus; returns the slide directories in id order.
pub fn write_synthetic_corpus(root: &Path, spec: &SynthSpec, exec: Exec) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let idx: Vec<usize> = (0..spec.slides).collect();
    exec.try_map(&idx, |&i| write_synthetic_slide(root, spec, i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::{open_slide, SlideKind};

    #[test]
    fn writes_openable_pyramids() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            slides: 2,
            size_px: 64,
            tumor_annotations: true,
            segmentation_masks: false,
            ..SynthSpec::default()
        };
        let paths = write_synthetic_corpus(dir.path(), &spec, Exec::Sequential).unwrap();
        let s = open_slide(&paths[0]).unwrap();
        assert_eq!(s.levels().len(), 3);
        assert_eq!(s.meta("slide_type"), Some("tumor"));
        let ann = open_slide(s.annotation_ref().unwrap()).unwrap();
        assert_eq!(ann.kind(), SlideKind::Mask);
        assert!(open_slide(&paths[1]).unwrap().annotation_ref().is_none());
    }

    #[test]
    fn deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            slides: 1,
            size_px: 32,
            ..SynthSpec::default()
        };
        write_synthetic_corpus(a.path(), &spec, Exec::Sequential).unwrap();
        write_synthetic_corpus(b.path(), &spec, Exec::from_jobs(4)).unwrap();
        let f = "slide_0000/level0.png";
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}
