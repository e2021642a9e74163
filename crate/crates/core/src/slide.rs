//! Multi-resolution slides with microns-per-pixel metadata.
//!
//! Two containers are understood natively:
//!
//! * a *pyramid directory*: `slide.json` plus one lossless PNG per level;
//! * a plain PNG with a JSON sidecar of the same schema describing one level.
//!
//! Other formats plug in through [`LevelSource`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Relative tolerance between a level's declared mpp and level-0 mpp × downsample.
pub const LEVEL_MPP_TOLERANCE: f64 = 0.01;
/// Maximum relative difference between `mpp_x` and `mpp_y`.
pub const ANISOTROPY_TOLERANCE: f64 = 0.01;

pub const SLIDE_DESCRIPTOR: &str = "slide.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MppSpec {
    pub mpp_x: f64,
    pub mpp_y: f64,
}

impl MppSpec {
    pub fn square(mpp: f64) -> Self {
        MppSpec { mpp_x: mpp, mpp_y: mpp }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mpp_x > 0.0 && self.mpp_y > 0.0) || !self.mpp_x.is_finite() || !self.mpp_y.is_finite() {
            return Err(Error::CorruptMetadata(format!(
                "mpp must be positive, got ({}, {})",
                self.mpp_x, self.mpp_y
            )));
        }
        if (self.mpp_x - self.mpp_y).abs() / self.mpp_x > ANISOTROPY_TOLERANCE {
            return Err(Error::CorruptMetadata(format!(
                "anisotropic pixels ({}, {}) exceed {}% tolerance",
                self.mpp_x,
                self.mpp_y,
                ANISOTROPY_TOLERANCE * 100.0
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        MppSpec {
            mpp_x: self.mpp_x * factor,
            mpp_y: self.mpp_y * factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub index: usize,
    pub width_px: u32,
    pub height_px: u32,
    pub downsample: f64,
    pub mpp: MppSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideKind {
    /// sRGB tissue image.
    #[default]
    Rgb,
    /// Single-channel integer label map.
    Mask,
}

impl SlideKind {
    pub fn channels(self) -> u8 {
        match self {
            SlideKind::Rgb => 3,
            SlideKind::Mask => 1,
        }
    }
}

/// Pixel access for one slide. Implementations must be safe to call from
/// many threads and must return identical pixels for identical requests.
pub trait LevelSource: Send + Sync {
    fn read_region(&self, level: usize, x: u32, y: u32, w: u32, h: u32) -> Result<Raster<u8>>;
}

#[derive(Clone)]
pub struct Slide {
    id: String,
    kind: SlideKind,
    levels: Vec<PyramidLevel>,
    metadata: BTreeMap<String, String>,
    annotation_ref: Option<PathBuf>,
    source: Arc<dyn LevelSource>,
}

impl fmt::Debug for Slide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Slide")
            .field("id", &self.id)
            .field("kind", &self.kind)
            .field("levels", &self.levels)
            .field("metadata", &self.metadata)
            .field("annotation_ref", &self.annotation_ref)
            .finish()
    }
}

/// Result of [`Slide::level_for_mpp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelChoice {
    pub index: usize,
    /// Set when even level 0 is coarser than the target.
    pub upsample: bool,
}

impl Slide {
    pub fn new(
        id: impl Into<String>,
        kind: SlideKind,
        levels: Vec<PyramidLevel>,
        metadata: BTreeMap<String, String>,
        annotation_ref: Option<PathBuf>,
        source: Arc<dyn LevelSource>,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::CorruptMetadata("empty slide id".into()));
        }
        validate_levels(&levels)?;
        validate_metadata(&metadata)?;
        Ok(Slide {
            id,
            kind,
            levels,
            metadata,
            annotation_ref,
            source,
        })
    }

    /// In-memory slide from precomputed level rasters. Level `i` has
    /// downsample `downsamples[i]` and mpp `base_mpp × downsample`.
    pub fn from_rasters(
        id: impl Into<String>,
        base_mpp: f64,
        rasters: Vec<(f64, Raster<u8>)>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let kind = match rasters.first().map(|(_, r)| r.channels()) {
            Some(1) => SlideKind::Mask,
            _ => SlideKind::Rgb,
        };
        let levels = rasters
            .iter()
            .enumerate()
            .map(|(index, (ds, r))| PyramidLevel {
                index,
                width_px: r.width(),
                height_px: r.height(),
                downsample: *ds,
                mpp: MppSpec::square(base_mpp * ds),
            })
            .collect();
        let source = MemorySource::new(rasters.into_iter().map(|(_, r)| r).collect());
        Slide::new(id, kind, levels, metadata, None, Arc::new(source))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> SlideKind {
        self.kind
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn level(&self, index: usize) -> Result<&PyramidLevel> {
        self.levels
            .get(index)
            .ok_or_else(|| Error::InvalidConfig(format!("slide {} has no level {index}", self.id)))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn annotation_ref(&self) -> Option<&Path> {
        self.annotation_ref.as_deref()
    }

    /// Physical size of level 0 in µm, `(width, height)`.
    pub fn extent_um(&self) -> (f64, f64) {
        let l0 = &self.levels[0];
        (l0.width_px as f64 * l0.mpp.mpp_x, l0.height_px as f64 * l0.mpp.mpp_y)
    }

    /// Exact pixels of one level, no resampling.
    pub fn read_region(&self, level: usize, x: u32, y: u32, w: u32, h: u32) -> Result<Raster<u8>> {
        let l = self.level(level)?;
        if w == 0 || h == 0 || x as u64 + w as u64 > l.width_px as u64 || y as u64 + h as u64 > l.height_px as u64 {
            return Err(Error::OutOfBounds {
                x: x as i64,
                y: y as i64,
                w: w as u64,
                h: h as u64,
                width: l.width_px as u64,
                height: l.height_px as u64,
            });
        }
        let r = self.source.read_region(level, x, y, w, h)?;
        if r.width() != w || r.height() != h || r.channels() != self.kind.channels() {
            return Err(Error::Decode(format!(
                "reader returned {}x{}x{} for a {w}x{h} request on {}",
                r.width(),
                r.height(),
                r.channels(),
                self.id
            )));
        }
        Ok(r)
    }

    pub fn read_level(&self, level: usize) -> Result<Raster<u8>> {
        let l = self.level(level)?;
        self.read_region(level, 0, 0, l.width_px, l.height_px)
    }

    /// Coarsest level whose mpp does not exceed `target_mpp`.
    pub fn level_for_mpp(&self, target_mpp: f64) -> LevelChoice {
        let limit = target_mpp * (1.0 + 1e-6);
        match self.levels.iter().rposition(|l| l.mpp.mpp_x <= limit) {
            Some(index) => LevelChoice { index, upsample: false },
            None => LevelChoice { index: 0, upsample: true },
        }
    }
}

/// Pixel count spanning `scale_um` at `mpp`, at least one.
pub fn physical_extent_px(scale_um: f64, mpp: f64) -> u32 {
    ((scale_um / mpp).round() as u32).max(1)
}

fn validate_levels(levels: &[PyramidLevel]) -> Result<()> {
    let Some(l0) = levels.first() else {
        return Err(Error::CorruptMetadata("slide has no levels".into()));
    };
    if (l0.downsample - 1.0).abs() > 1e-6 {
        return Err(Error::CorruptMetadata(format!(
            "level 0 downsample must be 1, got {}",
            l0.downsample
        )));
    }
    let mut prev_ds = 0.0;
    for (i, l) in levels.iter().enumerate() {
        if l.index != i {
            return Err(Error::CorruptMetadata(format!("level {i} carries index {}", l.index)));
        }
        if l.width_px == 0 || l.height_px == 0 {
            return Err(Error::CorruptMetadata(format!("level {i} has zero size")));
        }
        l.mpp.validate()?;
        if !(l.downsample > prev_ds) {
            return Err(Error::CorruptMetadata(format!(
                "downsample must strictly increase, level {i} has {}",
                l.downsample
            )));
        }
        prev_ds = l.downsample;
        let expected = l0.mpp.mpp_x * l.downsample;
        if (l.mpp.mpp_x - expected).abs() / expected > LEVEL_MPP_TOLERANCE {
            return Err(Error::CorruptMetadata(format!(
                "level {i} mpp {} contradicts downsample {} (expected {expected})",
                l.mpp.mpp_x, l.downsample
            )));
        }
    }
    Ok(())
}

pub const ISUP_GRADES: std::ops::RangeInclusive<u8> = 0..=5;

fn validate_metadata(meta: &BTreeMap<String, String>) -> Result<()> {
    for key in ["organ", "provider"] {
        if meta.get(key).is_some_and(|v| v.trim().is_empty()) {
            return Err(Error::CorruptMetadata(format!("metadata {key:?} is empty")));
        }
    }
    if let Some(v) = meta.get("isup") {
        match v.parse::<u8>() {
            Ok(g) if ISUP_GRADES.contains(&g) => {}
            _ => return Err(Error::CorruptMetadata(format!("invalid ISUP grade {v:?}"))),
        }
    }
    if let Some(v) = meta.get("slide_type") {
        if v != "tumor" && v != "normal" {
            return Err(Error::CorruptMetadata(format!("invalid slide_type {v:?}")));
        }
    }
    if let Some(v) = meta.get("origin") {
        if v != "train" && v != "test" {
            return Err(Error::CorruptMetadata(format!("invalid origin {v:?}")));
        }
    }
    Ok(())
}

/// On-disk slide descriptor (`slide.json` or sidecar).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideDescriptor {
    pub id: String,
    #[serde(default)]
    pub kind: SlideKind,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
    pub levels: Vec<LevelDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDescriptor {
    pub width: u32,
    pub height: u32,
    pub downsample: f64,
    pub mpp_x: f64,
    pub mpp_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

/// Opens a pyramid directory, a `slide.json`, or a PNG with a JSON sidecar.
pub fn open_slide(uri: impl AsRef<Path>) -> Result<Slide> {
    let path = uri.as_ref();
    if path.is_dir() {
        let desc = path.join(SLIDE_DESCRIPTOR);
        if !desc.is_file() {
            return Err(Error::UnknownFormat(format!("{} has no {SLIDE_DESCRIPTOR}", path.display())));
        }
        return open_descriptor(&desc, None);
    }
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("json") => open_descriptor(path, None),
        Some("png") => {
            let sidecar = path.with_extension("json");
            let alt = PathBuf::from(format!("{}.json", path.display()));
            let desc = if sidecar.is_file() {
                sidecar
            } else if alt.is_file() {
                alt
            } else {
                return Err(Error::UnknownFormat(format!("{} has no metadata sidecar", path.display())));
            };
            open_descriptor(&desc, Some(path))
        }
        _ => Err(Error::UnknownFormat(path.display().to_string())),
    }
}

fn open_descriptor(desc_path: &Path, image: Option<&Path>) -> Result<Slide> {
    let text = std::fs::read_to_string(desc_path).map_err(|e| Error::io(desc_path, e))?;
    let desc: SlideDescriptor = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptMetadata(format!("{}: {e}", desc_path.display())))?;
    let base = desc_path.parent().unwrap_or(Path::new("."));
    let mut files = Vec::with_capacity(desc.levels.len());
    for (i, l) in desc.levels.iter().enumerate() {
        let file = match (&l.file, image) {
            (Some(f), _) => base.join(f),
            (None, Some(img)) if i == 0 => img.to_path_buf(),
            (None, _) => {
                return Err(Error::CorruptMetadata(format!(
                    "{}: level {i} has no file",
                    desc_path.display()
                )))
            }
        };
        files.push(file);
    }
    let levels = desc
        .levels
        .iter()
        .enumerate()
        .map(|(index, l)| PyramidLevel {
            index,
            width_px: l.width,
            height_px: l.height,
            downsample: l.downsample,
            mpp: MppSpec {
                mpp_x: l.mpp_x,
                mpp_y: l.mpp_y,
            },
        })
        .collect::<Vec<_>>();
    let dims = levels.iter().map(|l| (l.width_px, l.height_px)).collect();
    let source = PngPyramidSource::new(files, dims, desc.kind.channels());
    let annotation_ref = desc.annotation.as_ref().map(|a| base.join(a));
    Slide::new(desc.id, desc.kind, levels, desc.metadata, annotation_ref, Arc::new(source))
}

/// Writes a pyramid directory: `slide.json` plus `level{i}.png` files.
pub fn write_pyramid_dir(
    dir: &Path,
    id: &str,
    base_mpp: f64,
    rasters: &[(f64, Raster<u8>)],
    metadata: &BTreeMap<String, String>,
    annotation: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let kind = match rasters.first().map(|(_, r)| r.channels()) {
        Some(1) => SlideKind::Mask,
        _ => SlideKind::Rgb,
    };
    let mut levels = Vec::new();
    for (i, (ds, r)) in rasters.iter().enumerate() {
        let file = format!("level{i}.png");
        r.save_png(&dir.join(&file))?;
        levels.push(LevelDescriptor {
            width: r.width(),
            height: r.height(),
            downsample: *ds,
            mpp_x: base_mpp * ds,
            mpp_y: base_mpp * ds,
            file: Some(file),
        });
    }
    let desc = SlideDescriptor {
        id: id.to_string(),
        kind,
        metadata: metadata.clone(),
        annotation: annotation.map(str::to_string),
        levels,
    };
    let path = dir.join(SLIDE_DESCRIPTOR);
    let json = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Lazily decodes whole PNG levels and keeps them for later reads.
struct PngPyramidSource {
    files: Vec<PathBuf>,
    dims: Vec<(u32, u32)>,
    channels: u8,
    cache: Vec<RwLock<Option<Arc<Raster<u8>>>>>,
}

impl PngPyramidSource {
    fn new(files: Vec<PathBuf>, dims: Vec<(u32, u32)>, channels: u8) -> Self {
        let cache = files.iter().map(|_| RwLock::new(None)).collect();
        PngPyramidSource {
            files,
            dims,
            channels,
            cache,
        }
    }

    fn level(&self, level: usize) -> Result<Arc<Raster<u8>>> {
        if let Some(r) = self.cache[level].read().expect("cache lock").as_ref() {
            return Ok(Arc::clone(r));
        }
        let path = &self.files[level];
        let mut raster = Raster::load_png(path)?;
        if raster.channels() != self.channels {
            raster = convert_channels(&raster, self.channels)
                .ok_or_else(|| Error::Decode(format!("{}: unexpected channel count", path.display())))?;
        }
        let (w, h) = self.dims[level];
        if raster.width() != w || raster.height() != h {
            return Err(Error::Decode(format!(
                "{} is {}x{}, metadata says {w}x{h}",
                path.display(),
                raster.width(),
                raster.height()
            )));
        }
        let raster = Arc::new(raster);
        let mut slot = self.cache[level].write().expect("cache lock");
        Ok(Arc::clone(slot.get_or_insert(raster)))
    }
}

fn convert_channels(r: &Raster<u8>, channels: u8) -> Option<Raster<u8>> {
    match (r.channels(), channels) {
        (1, 3) => Some(Raster::from_fn(r.width(), r.height(), 3, |x, y, _| r.get(x, y, 0))),
        _ => None,
    }
}

impl LevelSource for PngPyramidSource {
    fn read_region(&self, level: usize, x: u32, y: u32, w: u32, h: u32) -> Result<Raster<u8>> {
        self.level(level)?.crop(x, y, w, h)
    }
}

/// Levels held in memory.
pub struct MemorySource {
    levels: Vec<Raster<u8>>,
}

impl MemorySource {
    pub fn new(levels: Vec<Raster<u8>>) -> Self {
        MemorySource { levels }
    }
}

impl LevelSource for MemorySource {
    fn read_region(&self, level: usize, x: u32, y: u32, w: u32, h: u32) -> Result<Raster<u8>> {
        self.levels
            .get(level)
            .ok_or_else(|| Error::InvalidConfig(format!("no level {level}")))?
            .crop(x, y, w, h)
    }
}
