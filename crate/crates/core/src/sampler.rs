//! Patch sampling: random-per-slide and overlapping grid modes, label
//! assignment, mask co-cropping and the tiny balanced subset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_resize, patch_window};
use crate::raster::Raster;
use crate::rng::{keyed_rng, slide_rng};
use crate::slide::{open_slide, Slide, SlideKind};
use crate::split::Split;
use crate::tissue::{CoverageMap, RectUm, TissueMask};

/// Largest label value allowed in segmentation masks.
pub const MAX_MASK_LABEL: u8 = 5;
pub const MASK_CLASSES: usize = MAX_MASK_LABEL as usize + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SampleMode {
    Random { patches_per_slide: usize },
    /// `stride_um` defaults to half the patch scale.
    Grid {
        #[serde(default)]
        stride_um: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    #[serde(flatten)]
    pub mode: SampleMode,
    pub scale_um: f64,
    pub out_px: u32,
    #[serde(default = "default_tau")]
    pub tissue_tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts_factor: usize,
}

fn default_tau() -> f64 {
    0.5
}

fn default_attempts() -> usize {
    50
}

impl SampleSpec {
    pub fn random(patches_per_slide: usize, scale_um: f64, out_px: u32) -> Self {
        SampleSpec {
            mode: SampleMode::Random { patches_per_slide },
            scale_um,
            out_px,
            tissue_tau: default_tau(),
            seed: 0,
            max_attempts_factor: default_attempts(),
        }
    }

    pub fn grid(stride_um: Option<f64>, scale_um: f64, out_px: u32) -> Self {
        SampleSpec {
            mode: SampleMode::Grid { stride_um },
            scale_um,
            out_px,
            tissue_tau: default_tau(),
            seed: 0,
            max_attempts_factor: default_attempts(),
        }
    }

    pub fn stride_um(&self) -> Option<f64> {
        match self.mode {
            SampleMode::Grid { stride_um } => Some(stride_um.unwrap_or(self.scale_um / 2.0)),
            SampleMode::Random { .. } => None,
        }
    }

    /// Micrometers per output pixel.
    pub fn mpp(&self) -> f64 {
        self.scale_um / self.out_px as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_um > 0.0) || self.out_px == 0 {
            return Err(Error::InvalidConfig("scale_um and out_px must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tissue_tau) {
            return Err(Error::InvalidConfig(format!("tissue_tau {} outside [0, 1]", self.tissue_tau)));
        }
        match self.mode {
            SampleMode::Random { patches_per_slide } if patches_per_slide == 0 => {
                Err(Error::InvalidConfig("patches_per_slide must be at least 1".into()))
            }
            SampleMode::Random { .. } if self.max_attempts_factor == 0 => {
                Err(Error::InvalidConfig("max_attempts_factor must be at least 1".into()))
            }
            SampleMode::Grid { .. } => {
                let stride = self.stride_um().unwrap_or_default();
                if !(stride > 0.0 && stride <= self.scale_um) {
                    return Err(Error::InvalidConfig(format!(
                        "grid stride {stride} must lie in (0, scale_um]"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// What a patch is labeled with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Unlabeled,
    Class { index: u32, name: String },
    Mask { file: String, histogram: [u64; MASK_CLASSES] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    /// Position in the slide's sampling order.
    pub index: u32,
    pub x0_um: f64,
    pub y0_um: f64,
    pub scale_um: f64,
    pub out_px: u32,
    pub target: Target,
    pub split: Split,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

impl PatchRecord {
    pub fn new(slide_id: &str, index: u32, x0_um: f64, y0_um: f64, scale_um: f64, out_px: u32) -> Self {
        PatchRecord {
            slide_id: slide_id.to_string(),
            index,
            x0_um,
            y0_um,
            scale_um,
            out_px,
            target: Target::Unlabeled,
            split: Split::Unassigned,
            metadata: BTreeMap::new(),
            path: None,
            sha256: None,
        }
    }

    pub fn rect(&self) -> RectUm {
        RectUm::square(self.x0_um, self.y0_um, self.scale_um)
    }

    pub fn class_index(&self) -> Option<u32> {
        match self.target {
            Target::Class { index, .. } => Some(index),
            _ => None,
        }
    }
}

const COPIED_METADATA: [&str; 5] = ["organ", "isup", "provider", "slide_type", "origin"];

fn new_record(slide: &Slide, index: usize, x: f64, y: f64, spec: &SampleSpec) -> PatchRecord {
    let mut r = PatchRecord::new(slide.id(), index as u32, x, y, spec.scale_um, spec.out_px);
    for key in COPIED_METADATA {
        if let Some(v) = slide.meta(key) {
            r.metadata.insert(key.to_string(), v.to_string());
        }
    }
    r
}

/// Tissue fraction with the rectangle clipped to the mask extent; the mask
/// level can be a few µm short of level 0 after integer downsampling.
fn clipped_fraction(mask: &TissueMask, rect: RectUm) -> Result<f64> {
    let m = mask.coverage.mask();
    let mpp = mask.mpp();
    let ext_x = m.width() as f64 * mpp.mpp_x;
    let ext_y = m.height() as f64 * mpp.mpp_y;
    let clipped = RectUm {
        x0: rect.x0.max(0.0),
        y0: rect.y0.max(0.0),
        x1: rect.x1.min(ext_x),
        y1: rect.y1.min(ext_y),
    };
    if clipped.x1 <= clipped.x0 || clipped.y1 <= clipped.y0 {
        return Ok(0.0);
    }
    mask.coverage.fraction(clipped)
}

/// Draws `patches_per_slide` tissue-bearing squares. Top-lefts are uniform
/// on the level-0 pixel lattice inside the tissue bounding box (expanded by
/// one patch), from a stream keyed by `(seed, slide_id)`.
pub fn random_patches(slide: &Slide, mask: &TissueMask, spec: &SampleSpec) -> Result<Vec<PatchRecord>> {
    spec.validate()?;
    let SampleMode::Random { patches_per_slide } = spec.mode else {
        return Err(Error::ConfigConflict("random_patches needs random mode".into()));
    };
    let limit = patches_per_slide.saturating_mul(spec.max_attempts_factor);
    let fail = |accepted, attempts| Error::InsufficientTissue {
        requested: patches_per_slide,
        accepted,
        attempts,
    };
    let l0 = slide.level(0)?;
    let (mx, my) = (l0.mpp.mpp_x, l0.mpp.mpp_y);
    let side_x = (spec.scale_um / mx).round() as i64;
    let side_y = (spec.scale_um / my).round() as i64;
    let max_x = l0.width_px as i64 - side_x;
    let max_y = l0.height_px as i64 - side_y;
    let Some(bounds) = mask.coverage.bounds_um() else {
        return Err(fail(0, 0));
    };
    let lo_x = ((bounds.x0 / mx).floor() as i64 - side_x).max(0);
    let hi_x = ((bounds.x1 / mx).ceil() as i64).min(max_x);
    let lo_y = ((bounds.y0 / my).floor() as i64 - side_y).max(0);
    let hi_y = ((bounds.y1 / my).ceil() as i64).min(max_y);
    if max_x < 0 || max_y < 0 || lo_x > hi_x || lo_y > hi_y {
        return Err(fail(0, 0));
    }

    let mut rng = slide_rng(spec.seed, "random-patches", slide.id());
    let mut out = Vec::with_capacity(patches_per_slide);
    let mut attempts = 0;
    while out.len() < patches_per_slide {
        if attempts >= limit {
            return Err(fail(out.len(), attempts));
        }
        attempts += 1;
        let x = rng.random_range(lo_x..=hi_x) as f64 * mx;
        let y = rng.random_range(lo_y..=hi_y) as f64 * my;
        if patch_window(slide, x, y, spec.scale_um, spec.out_px).is_err() {
            continue;
        }
        if clipped_fraction(mask, RectUm::square(x, y, spec.scale_um))? >= spec.tissue_tau {
            out.push(new_record(slide, out.len(), x, y, spec));
        }
    }
    Ok(out)
}

/// Number of grid positions along an axis of physical length `extent_um`.
pub fn grid_count(extent_um: f64, scale_um: f64, stride_um: f64) -> usize {
    if extent_um + 1e-9 < scale_um {
        return 0;
    }
    ((extent_um - scale_um) / stride_um + 1e-9).floor() as usize + 1
}

/// Row-major sliding window at `stride_um`; keeps squares whose tissue
/// fraction reaches `tissue_tau`.
pub fn grid_patches(slide: &Slide, mask: &TissueMask, spec: &SampleSpec) -> Result<Vec<PatchRecord>> {
    spec.validate()?;
    let Some(stride) = spec.stride_um() else {
        return Err(Error::ConfigConflict("grid_patches needs grid mode".into()));
    };
    let (ext_x, ext_y) = slide.extent_um();
    let nx = grid_count(ext_x, spec.scale_um, stride);
    let ny = grid_count(ext_y, spec.scale_um, stride);
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = (i as f64 * stride, j as f64 * stride);
            if patch_window(slide, x, y, spec.scale_um, spec.out_px).is_err() {
                continue;
            }
            if clipped_fraction(mask, RectUm::square(x, y, spec.scale_um))? >= spec.tissue_tau {
                out.push(new_record(slide, out.len(), x, y, spec));
            }
        }
    }
    Ok(out)
}

pub fn sample_slide(slide: &Slide, mask: &TissueMask, spec: &SampleSpec) -> Result<Vec<PatchRecord>> {
    match spec.mode {
        SampleMode::Random { .. } => random_patches(slide, mask, spec),
        SampleMode::Grid { .. } => grid_patches(slide, mask, spec),
    }
}

/// Closed rings in level-0 µm, combined with the even-odd rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonSet {
    pub polygons: Vec<Vec<[f64; 2]>>,
}

impl PolygonSet {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in &self.polygons {
            let n = ring.len();
            if n < 3 {
                continue;
            }
            let mut j = n - 1;
            for i in 0..n {
                let ([xi, yi], [xj, yj]) = (ring[i], ring[j]);
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
        }
        inside
    }
}

/// Samples per axis when estimating polygon coverage.
const POLYGON_SAMPLES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Mask(CoverageMap),
    Polygons(PolygonSet),
}

impl Annotation {
    /// Annotated fraction of a level-0 physical rectangle.
    pub fn coverage(&self, rect: RectUm) -> Result<f64> {
        match self {
            Annotation::Mask(m) => m.fraction(rect),
            Annotation::Polygons(p) => {
                let n = POLYGON_SAMPLES;
                let (w, h) = (rect.x1 - rect.x0, rect.y1 - rect.y0);
                let mut hits = 0usize;
                for j in 0..n {
                    for i in 0..n {
                        let x = rect.x0 + (i as f64 + 0.5) * w / n as f64;
                        let y = rect.y0 + (j as f64 + 0.5) * h / n as f64;
                        hits += p.contains(x, y) as usize;
                    }
                }
                Ok(hits as f64 / (n * n) as f64)
            }
        }
    }

    /// Loads a mask pyramid (non-zero = annotated) read at the level closest
    /// to `work_mpp`, or a polygon JSON file.
    pub fn load(path: &Path, work_mpp: f64) -> Result<Self> {
        let is_polygon_file = path.is_file()
            && path.extension().is_some_and(|e| e == "json")
            && path.file_name().is_some_and(|n| n != crate::slide::SLIDE_DESCRIPTOR);
        if is_polygon_file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if let Ok(p) = serde_json::from_str::<PolygonSet>(&text) {
                return Ok(Annotation::Polygons(p));
            }
        }
        let slide = open_slide(path)?;
        Annotation::from_mask_slide(&slide, work_mpp)
    }

    pub fn from_mask_slide(slide: &Slide, work_mpp: f64) -> Result<Self> {
        let level = slide.level_for_mpp(work_mpp).index;
        let raster = slide.read_level(level)?;
        let mask = if raster.channels() == 1 {
            raster
        } else {
            Raster::from_fn(raster.width(), raster.height(), 1, |x, y, _| raster.get(x, y, 0))
        };
        Ok(Annotation::Mask(CoverageMap::new(mask, slide.level(level)?.mpp)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamelyonLabel {
    Tumor,
    Normal,
    Reject,
}

/// Tumor slides: tumor when annotation coverage reaches `annotation_tau`,
/// otherwise reject. Normal slides: normal.
pub fn assign_label_camelyon(
    record: &PatchRecord,
    slide: &Slide,
    annotation: Option<&Annotation>,
    annotation_tau: f64,
) -> Result<CamelyonLabel> {
    match slide.meta("slide_type") {
        Some("normal") => Ok(CamelyonLabel::Normal),
        Some("tumor") => {
            let ann = annotation.ok_or_else(|| Error::MissingAnnotation(slide.id().to_string()))?;
            let cov = ann.coverage(record.rect())?;
            Ok(if cov + 1e-12 >= annotation_tau {
                CamelyonLabel::Tumor
            } else {
                CamelyonLabel::Reject
            })
        }
        _ => Err(Error::InvalidConfig(format!("slide {} has no slide_type", slide.id()))),
    }
}

/// Extracts the record's square from a geometrically aligned mask pyramid,
/// resized with nearest-neighbor. Returns the mask and per-label pixel counts.
pub fn co_crop_mask(mask_slide: &Slide, record: &PatchRecord) -> Result<(Raster<u8>, [u64; MASK_CLASSES])> {
    if mask_slide.kind() != SlideKind::Mask {
        return Err(Error::ConfigConflict(format!("{} is not a mask slide", mask_slide.id())));
    }
    let win = patch_window(mask_slide, record.x0_um, record.y0_um, record.scale_um, record.out_px)?;
    let region = mask_slide.read_region(win.level, win.x, win.y, win.w, win.h)?;
    if let Some(&bad) = region.data().iter().find(|&&v| v > MAX_MASK_LABEL) {
        return Err(Error::IllegalLabel(bad));
    }
    let out = nearest_resize(&region, record.out_px, record.out_px);
    Ok((out.clone(), label_histogram(&out)))
}

pub fn label_histogram(mask: &Raster<u8>) -> [u64; MASK_CLASSES] {
    let mut h = [0u64; MASK_CLASSES];
    for &v in mask.data() {
        if let Some(slot) = h.get_mut(v as usize) {
            *slot += 1;
        }
    }
    h
}

/// Balanced subset: `slides_per_organ` random slides per listed organ, then
/// `patches_per_slide` random records per chosen slide. Output follows the
/// organ list, then slide id, then original record order.
pub fn tiny_subset(
    records: &[PatchRecord],
    organs: &[String],
    slides_per_organ: usize,
    patches_per_slide: usize,
    seed: u64,
) -> Result<Vec<PatchRecord>> {
    let mut by_slide: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut slides_by_organ: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_slide.entry(&r.slide_id).or_default().push(i);
        if let Some(o) = r.metadata.get("organ") {
            slides_by_organ.entry(o).or_default().insert(&r.slide_id);
        }
    }
    let mut out = Vec::new();
    for organ in organs {
        let available: Vec<&str> = slides_by_organ
            .get(organ.as_str())
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        if available.len() < slides_per_organ {
            return Err(Error::InsufficientSlides {
                organ: organ.clone(),
                requested: slides_per_organ,
                available: available.len(),
            });
        }
        let mut picked = available;
        picked.shuffle(&mut keyed_rng(seed, &[b"tiny-slides", organ.as_bytes()]));
        picked.truncate(slides_per_organ);
        picked.sort_unstable();
        for slide in picked {
            let idx = &by_slide[slide];
            if idx.len() < patches_per_slide {
                return Err(Error::InsufficientPatches {
                    slide_id: slide.to_string(),
                    requested: patches_per_slide,
                    available: idx.len(),
                });
            }
            let mut rng = keyed_rng(seed, &[b"tiny-patches", slide.as_bytes()]);
            let mut chosen = index::sample(&mut rng, idx.len(), patches_per_slide).into_vec();
            chosen.sort_unstable();
            out.extend(chosen.into_iter().map(|k| records[idx[k]].clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::MppSpec;
    use crate::tissue::{tissue_fraction, tissue_mask, TissueParams};

    const MPP: f64 = 0.390625;

    fn meta(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    /// Level-0 slide of `side` px with a dark disk, plus a /16 level.
    fn disk_slide(id: &str, side: u32, radius_frac: f64) -> Slide {
        let draw = |s: u32| {
            let c = s as f64 / 2.0;
            let r = radius_frac * s as f64;
            Raster::from_fn(s, s, 3, move |x, y, ch| {
                let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                if dx * dx + dy * dy <= r * r {
                    [160, 70, 150][ch as usize]
                } else {
                    240
                }
            })
        };
        Slide::from_rasters(id, MPP, vec![(1.0, draw(side)), (16.0, draw(side / 16))], meta(&[("organ", "lung")])).unwrap()
    }

    fn full_mask(slide: &Slide) -> TissueMask {
        let l = slide.level(0).unwrap();
        TissueMask {
            coverage: CoverageMap::new(Raster::filled(l.width_px / 16, l.height_px / 16, 1, 1), MppSpec::square(MPP * 16.0)).unwrap(),
            level: 1,
            threshold: 0,
        }
    }

    #[test]
    fn random_sampling_respects_tau_and_is_deterministic() {
        let s = disk_slide("d1", 4096, 0.4);
        let mask = tissue_mask(&s, &TissueParams::default()).unwrap();
        let mut spec = SampleSpec::random(500, 200.0, 512);
        spec.seed = 42;
        let a = random_patches(&s, &mask, &spec).unwrap();
        assert_eq!(a.len(), 500);
        for r in &a {
            assert!(tissue_fraction(&mask, r.rect()).unwrap() >= 0.5);
            assert_eq!(r.metadata.get("organ").map(String::as_str), Some("lung"));
        }
        assert_eq!(a, random_patches(&s, &mask, &spec).unwrap());
    }

    #[test]
    fn background_slide_is_insufficient() {
        let s = disk_slide("d", 2048, 0.4);
        let empty = TissueMask {
            coverage: CoverageMap::new(Raster::filled(128, 128, 1, 0), MppSpec::square(MPP * 16.0)).unwrap(),
            level: 1,
            threshold: 0,
        };
        let spec = SampleSpec::random(5, 200.0, 512);
        assert!(matches!(random_patches(&s, &empty, &spec), Err(Error::InsufficientTissue { .. })));
    }

    #[test]
    fn grid_counts() {
        let s = disk_slide("g", 2048, 0.4);
        let mask = full_mask(&s);
        let mut spec = SampleSpec::grid(Some(200.0), 200.0, 512);
        spec.tissue_tau = 0.0;
        assert_eq!(grid_patches(&s, &mask, &spec).unwrap().len(), 16);
        spec.mode = SampleMode::Grid { stride_um: Some(100.0) };
        assert_eq!(grid_patches(&s, &mask, &spec).unwrap().len(), 49);
        assert_eq!(grid_count(800.0, 200.0, 200.0), 4);
        assert_eq!(grid_count(800.0, 200.0, 100.0), 7);
        assert_eq!(grid_count(100.0, 200.0, 100.0), 0);
    }

    #[test]
    fn grid_with_full_coverage_threshold() {
        let s = disk_slide("g", 2048, 0.4);
        // left half tissue at the mask level
        let mask = TissueMask {
            coverage: CoverageMap::new(Raster::from_fn(128, 128, 1, |x, _, _| (x < 64) as u8), MppSpec::square(MPP * 16.0)).unwrap(),
            level: 1,
            threshold: 0,
        };
        let mut spec = SampleSpec::grid(Some(100.0), 200.0, 512);
        spec.tissue_tau = 1.0;
        let recs = grid_patches(&s, &mask, &spec).unwrap();
        // columns with x0 + 200 <= 400 µm: x0 in {0, 100, 200}
        assert_eq!(recs.len(), 3 * 7);
        assert!(recs.iter().all(|r| r.x0_um + 200.0 <= 400.0 + 1e-9));
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SampleSpec::grid(Some(300.0), 200.0, 512);
        assert!(spec.validate().is_err());
        spec.mode = SampleMode::Random { patches_per_slide: 0 };
        assert!(spec.validate().is_err());
        assert_eq!(SampleSpec::grid(None, 200.0, 512).stride_um(), Some(100.0));
    }

    #[test]
    fn camelyon_labels() {
        let tumor = Slide::from_rasters("t", MPP, vec![(1.0, Raster::filled(2048, 2048, 3, 200))], meta(&[("slide_type", "tumor")])).unwrap();
        let normal = Slide::from_rasters("n", MPP, vec![(1.0, Raster::filled(2048, 2048, 3, 200))], meta(&[("slide_type", "normal")])).unwrap();
        let ann = Annotation::Polygons(PolygonSet {
            polygons: vec![vec![[0.0, 0.0], [400.0, 0.0], [400.0, 800.0], [0.0, 800.0]]],
        });
        let inside = PatchRecord::new("t", 0, 100.0, 100.0, 200.0, 512);
        let half = PatchRecord::new("t", 1, 300.0, 100.0, 200.0, 512);
        assert_eq!(assign_label_camelyon(&inside, &tumor, Some(&ann), 1.0).unwrap(), CamelyonLabel::Tumor);
        assert_eq!(assign_label_camelyon(&half, &tumor, Some(&ann), 1.0).unwrap(), CamelyonLabel::Reject);
        assert_eq!(assign_label_camelyon(&half, &tumor, Some(&ann), 0.5).unwrap(), CamelyonLabel::Tumor);
        assert_eq!(assign_label_camelyon(&half, &normal, None, 1.0).unwrap(), CamelyonLabel::Normal);
        assert!(matches!(assign_label_camelyon(&inside, &tumor, None, 1.0), Err(Error::MissingAnnotation(_))));

        let mask_ann = Annotation::Mask(CoverageMap::new(Raster::from_fn(128, 128, 1, |x, _, _| (x < 64) as u8), MppSpec::square(MPP * 16.0)).unwrap());
        assert_eq!(assign_label_camelyon(&inside, &tumor, Some(&mask_ann), 1.0).unwrap(), CamelyonLabel::Tumor);
        assert_eq!(assign_label_camelyon(&half, &tumor, Some(&mask_ann), 1.0).unwrap(), CamelyonLabel::Reject);
    }

    #[test]
    fn even_odd_polygons() {
        let p = PolygonSet {
            polygons: vec![
                vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]],
                vec![[3.0, 3.0], [7.0, 3.0], [7.0, 7.0], [3.0, 7.0]],
            ],
        };
        assert!(p.contains(1.0, 1.0));
        assert!(!p.contains(5.0, 5.0));
        assert!(!p.contains(11.0, 5.0));
    }

    fn mask_slide(f: impl Fn(u32, u32) -> u8) -> Slide {
        let r = Raster::from_fn(1024, 1024, 1, |x, y, _| f(x, y));
        Slide::from_rasters("m", MPP, vec![(1.0, r)], BTreeMap::new()).unwrap()
    }

    #[test]
    fn co_crop() {
        let rec = PatchRecord::new("m", 0, 0.0, 0.0, 200.0, 256);
        let (m, h) = co_crop_mask(&mask_slide(|_, _| 3), &rec).unwrap();
        assert_eq!(m.value_set(), vec![3]);
        assert_eq!(h[3], 256 * 256);

        let (_, h) = co_crop_mask(&mask_slide(|x, _| if x < 256 { 1 } else { 4 }), &rec).unwrap();
        let total = (256 * 256) as f64;
        assert!((h[1] as f64 / total - 0.5).abs() <= 0.01);
        assert!((h[4] as f64 / total - 0.5).abs() <= 0.01);

        assert!(matches!(co_crop_mask(&mask_slide(|x, y| if x == 5 && y == 5 { 7 } else { 0 }), &rec), Err(Error::IllegalLabel(7))));
    }

    fn organ_records(organs: &[(&str, usize)], patches: usize) -> Vec<PatchRecord> {
        let mut out = Vec::new();
        for (organ, n) in organs {
            for s in 0..*n {
                for i in 0..patches {
                    let mut r = PatchRecord::new(&format!("{organ}-{s:03}"), i as u32, 0.0, 0.0, 200.0, 512);
                    r.metadata.insert("organ".into(), organ.to_string());
                    out.push(r);
                }
            }
        }
        out
    }

    #[test]
    fn tiny_subset_counts() {
        let recs = organ_records(&[("brain", 3), ("lung", 2)], 4);
        let organs = vec!["brain".to_string(), "lung".to_string()];
        let one = tiny_subset(&recs, &organs, 1, 1, 7).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one, tiny_subset(&recs, &organs, 1, 1, 7).unwrap());
        let two = tiny_subset(&recs, &organs, 2, 3, 7).unwrap();
        assert_eq!(two.len(), 12);
        assert!(matches!(tiny_subset(&recs, &organs, 3, 1, 7), Err(Error::InsufficientSlides { .. })));
        assert!(matches!(tiny_subset(&recs, &organs, 1, 5, 7), Err(Error::InsufficientPatches { .. })));
    }
}
