//! Training augmentation and evaluation transforms.
//!
//! The training chain runs, in order: random resized crop (or a plain random
//! crop in segmentation mode), color jitter, random grayscale (self-supervised
//! mode only), Gaussian blur, horizontal flip, vertical flip, normalization.
//!
//! Each op draws from its own random stream keyed by the op name, so
//! disabling one op never shifts the randomness seen by the others.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bicubic_resize, center_crop, nearest_resize};
use crate::presets::DatasetKind;
use crate::raster::Raster;
use crate::rng::{keyed_rng, StreamRng};
use crate::stats::{PTCGA200_MEAN, PTCGA200_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    RandomResizedCrop,
    RandomCrop,
    ColorJitter,
    RandomGrayscale,
    GaussianBlur,
    HorizontalFlip,
    VerticalFlip,
}

impl AugOp {
    pub const ALL: [AugOp; 7] = [
        AugOp::RandomResizedCrop,
        AugOp::RandomCrop,
        AugOp::ColorJitter,
        AugOp::RandomGrayscale,
        AugOp::GaussianBlur,
        AugOp::HorizontalFlip,
        AugOp::VerticalFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::RandomResizedCrop => "random_resized_crop",
            AugOp::RandomCrop => "random_crop",
            AugOp::ColorJitter => "color_jitter",
            AugOp::RandomGrayscale => "random_grayscale",
            AugOp::GaussianBlur => "gaussian_blur",
            AugOp::HorizontalFlip => "horizontal_flip",
            AugOp::VerticalFlip => "vertical_flip",
        }
    }
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        JitterParams {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalize {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalize {
    fn default() -> Self {
        Normalize {
            mean: PTCGA200_MEAN,
            std: PTCGA200_STD,
        }
    }
}

impl Normalize {
    /// Used when fine-tuning from random initialization.
    pub const HALF: Normalize = Normalize {
        mean: [0.5; 3],
        std: [0.5; 3],
    };

    pub fn identity() -> Self {
        Normalize {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn apply(&self, img: &Raster<f32>) -> Result<Raster<f32>> {
        check_rgb(img)?;
        let data = img
            .data()
            .chunks_exact(3)
            .flat_map(|p| (0..3).map(move |c| ((p[c] as f64 - self.mean[c]) / self.std[c]) as f32))
            .collect();
        Raster::from_vec(img.width(), img.height(), 3, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Output side of the random resized crop.
    pub image_size: u32,
    pub rrc_scale_min: f64,
    pub rrc_ratio: [f64; 2],
    /// Side of the plain random crop used in segmentation mode.
    pub crop_px: u32,
    pub jitter: JitterParams,
    pub jitter_p: f64,
    pub grayscale_p: f64,
    /// Enables random grayscale (self-supervised pretraining only).
    pub ssl_mode: bool,
    pub blur_sigma: [f64; 2],
    pub blur_p: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub segmentation_mode: bool,
    pub normalize: Normalize,
    pub ablate: BTreeSet<AugOp>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            image_size: 224,
            rrc_scale_min: 0.2,
            rrc_ratio: [3.0 / 4.0, 4.0 / 3.0],
            crop_px: 512,
            jitter: JitterParams::default(),
            jitter_p: 0.8,
            grayscale_p: 0.2,
            ssl_mode: false,
            blur_sigma: [0.1, 2.0],
            blur_p: 0.5,
            hflip_p: 0.5,
            vflip_p: 0.5,
            segmentation_mode: false,
            normalize: Normalize::default(),
            ablate: BTreeSet::new(),
        }
    }
}

impl AugmentConfig {
    /// Training variant for a dataset kind.
    pub fn for_kind(kind: DatasetKind) -> Self {
        let mut cfg = AugmentConfig::default();
        match kind {
            DatasetKind::Pcam200 => cfg.rrc_scale_min = 0.8,
            DatasetKind::SegPanda200 => cfg.segmentation_mode = true,
            _ => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.jitter_p, self.grayscale_p, self.blur_p, self.hflip_p, self.vflip_p];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.rrc_scale_min > 0.0 && self.rrc_scale_min <= 1.0) {
            return Err(Error::InvalidConfig(format!("rrc_scale_min {} outside (0, 1]", self.rrc_scale_min)));
        }
        if !(self.rrc_ratio[0] > 0.0 && self.rrc_ratio[0] <= self.rrc_ratio[1]) {
            return Err(Error::InvalidConfig(format!("invalid rrc_ratio {:?}", self.rrc_ratio)));
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return Err(Error::InvalidConfig(format!("invalid blur_sigma {:?}", self.blur_sigma)));
        }
        if self.normalize.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("normalize std must be positive".into()));
        }
        let j = &self.jitter;
        if [j.brightness, j.contrast, j.saturation].iter().any(|v| *v < 0.0) || !(0.0..=0.5).contains(&j.hue) {
            return Err(Error::InvalidConfig("invalid color jitter parameters".into()));
        }
        if self.image_size == 0 || self.crop_px == 0 {
            return Err(Error::InvalidConfig("crop sizes must be positive".into()));
        }
        Ok(())
    }

    fn enabled(&self, op: AugOp) -> bool {
        !self.ablate.contains(&op)
    }
}

/// Seed plus stream id (for example a sample index or epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugRng {
    pub seed: u64,
    pub stream: u64,
}

impl AugRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        AugRng { seed, stream }
    }

    pub fn op(&self, op: AugOp) -> StreamRng {
        keyed_rng(self.seed, &[b"augment", &self.stream.to_le_bytes(), op.name().as_bytes()])
    }
}

fn check_rgb(img: &Raster<f32>) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            actual: img.channels(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Samples a crop whose area fraction lies in `[scale_min, 1]` and whose
/// aspect ratio is log-uniform in `ratio`. After ten failed placements the
/// central crop with the aspect clamped to `ratio` is used.
pub fn sample_rrc_box(width: u32, height: u32, scale_min: f64, ratio: [f64; 2], rng: &mut impl Rng) -> CropBox {
    let area = width as f64 * height as f64;
    let (lr0, lr1) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale_min..=1.0);
        let aspect = if lr1 > lr0 { rng.random_range(lr0..lr1).exp() } else { ratio[0] };
        let w = (target * aspect).sqrt().round() as u32;
        let h = (target / aspect).sqrt().round() as u32;
        let frac = w as f64 * h as f64 / area;
        // rounding can push the area just below the requested minimum
        if w > 0 && h > 0 && w <= width && h <= height && frac + 1e-12 >= scale_min {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return CropBox { x, y, w, h };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio[0] {
        (width, ((width as f64 / ratio[0]).round() as u32).clamp(1, height))
    } else if in_ratio > ratio[1] {
        (((height as f64 * ratio[1]).round() as u32).clamp(1, width), height)
    } else {
        (width, height)
    };
    CropBox {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
    }
}

pub fn random_resized_crop(img: &Raster<f32>, out_px: u32, scale_min: f64, ratio: [f64; 2], rng: &mut impl Rng) -> Result<Raster<f32>> {
    let b = sample_rrc_box(img.width(), img.height(), scale_min, ratio, rng);
    Ok(bicubic_resize(&img.crop(b.x, b.y, b.w, b.h)?, out_px, out_px))
}

pub fn sample_random_crop(width: u32, height: u32, size: u32, rng: &mut impl Rng) -> Result<CropBox> {
    if size > width || size > height {
        return Err(Error::CropTooLarge { size, width, height });
    }
    Ok(CropBox {
        x: rng.random_range(0..=width - size),
        y: rng.random_range(0..=height - size),
        w: size,
        h: size,
    })
}

#[inline]
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn map_pixels(img: &Raster<f32>, f: impl Fn([f64; 3]) -> [f64; 3]) -> Raster<f32> {
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| f([p[0] as f64, p[1] as f64, p[2] as f64]).map(|v| v.clamp(0.0, 1.0) as f32))
        .collect();
    Raster::from_vec(img.width(), img.height(), 3, data).expect("same shape")
}

pub fn adjust_brightness(img: &Raster<f32>, factor: f64) -> Raster<f32> {
    map_pixels(img, |p| p.map(|v| v * factor))
}

/// Blends toward the mean gray level of the whole image.
pub fn adjust_contrast(img: &Raster<f32>, factor: f64) -> Raster<f32> {
    let n = (img.width() as f64 * img.height() as f64).max(1.0);
    let mean = img.data().chunks_exact(3).map(|p| luma(p[0] as f64, p[1] as f64, p[2] as f64)).sum::<f64>() / n;
    map_pixels(img, |p| p.map(|v| factor * v + (1.0 - factor) * mean))
}

/// Blends toward the per-pixel gray level.
pub fn adjust_saturation(img: &Raster<f32>, factor: f64) -> Raster<f32> {
    map_pixels(img, |p| {
        let g = luma(p[0], p[1], p[2]);
        p.map(|v| factor * v + (1.0 - factor) * g)
    })
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates hue by `shift` turns of the hue circle.
pub fn adjust_hue(img: &Raster<f32>, shift: f64) -> Raster<f32> {
    map_pixels(img, |p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([(h + shift).rem_euclid(1.0), s, v])
    })
}

/// Sampled color-jitter parameters. `None` means the sub-op is inactive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    pub order: [usize; 4],
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub saturation: Option<f64>,
    pub hue: Option<f64>,
}

impl JitterDraw {
    pub fn sample(params: &JitterParams, rng: &mut impl Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut order = [0, 1, 2, 3];
        order.shuffle(rng);
        let mut factor = |x: f64| (x > 0.0).then(|| rng.random_range((1.0 - x).max(0.0)..=1.0 + x));
        let brightness = factor(params.brightness);
        let contrast = factor(params.contrast);
        let saturation = factor(params.saturation);
        let hue = (params.hue > 0.0).then(|| rng.random_range(-params.hue..=params.hue));
        JitterDraw {
            order,
            brightness,
            contrast,
            saturation,
            hue,
        }
    }

    pub fn apply(&self, img: &Raster<f32>) -> Raster<f32> {
        let mut out = img.clone();
        for step in self.order {
            out = match step {
                0 => self.brightness.map_or(out.clone(), |f| adjust_brightness(&out, f)),
                1 => self.contrast.map_or(out.clone(), |f| adjust_contrast(&out, f)),
                2 => self.saturation.map_or(out.clone(), |f| adjust_saturation(&out, f)),
                _ => self.hue.map_or(out.clone(), |h| adjust_hue(&out, h)),
            };
        }
        out
    }
}

/// Color jitter with the four sub-ops in random order. Always applied; the
/// training chain gates it with its own probability.
pub fn color_jitter(img: &Raster<f32>, params: &JitterParams, rng: &mut impl Rng) -> Result<Raster<f32>> {
    check_rgb(img)?;
    Ok(JitterDraw::sample(params, rng).apply(img))
}

pub fn to_grayscale(img: &Raster<f32>) -> Raster<f32> {
    map_pixels(img, |p| [luma(p[0], p[1], p[2]); 3])
}

pub fn random_grayscale(img: &Raster<f32>, p: f64, rng: &mut impl Rng) -> Result<Raster<f32>> {
    check_rgb(img)?;
    Ok(if rng.random::<f64>() < p { to_grayscale(img) } else { img.clone() })
}

/// Normalized Gaussian taps, radius ⌈4σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let w: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with clamped edges.
pub fn blur_with_sigma(img: &Raster<f32>, sigma: f64) -> Raster<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h, c) = (img.width() as i64, img.height() as i64, img.channels() as usize);
    let src = img.data();
    let mut tmp = vec![0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0f64;
                for (i, kv) in k.iter().enumerate() {
                    let sx = (x + i as i64 - r).clamp(0, w - 1);
                    acc += kv * src[((y * w + sx) as usize) * c + ch] as f64;
                }
                tmp[((y * w + x) as usize) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0f64;
                for (i, kv) in k.iter().enumerate() {
                    let sy = (y + i as i64 - r).clamp(0, h - 1);
                    acc += kv * tmp[((sy * w + x) as usize) * c + ch];
                }
                out[((y * w + x) as usize) * c + ch] = acc as f32;
            }
        }
    }
    Raster::from_vec(img.width(), img.height(), img.channels(), out).expect("same shape")
}

/// With probability `p`, blurs with σ drawn uniformly from `sigma_range`.
pub fn gaussian_blur(img: &Raster<f32>, sigma_range: [f64; 2], p: f64, rng: &mut impl Rng) -> Raster<f32> {
    if rng.random::<f64>() < p {
        blur_with_sigma(img, rng.random_range(sigma_range[0]..=sigma_range[1]))
    } else {
        img.clone()
    }
}

/// What one op did during a training pass.
#[derive(Debug, Clone, PartialEq)]
pub enum OpEvent {
    Crop(CropBox),
    Jitter(Option<JitterDraw>),
    Grayscale(bool),
    Blur(Option<f64>),
    Flip(bool),
}

pub type AugTrace = Vec<(AugOp, OpEvent)>;

pub struct Augmented {
    pub image: Raster<f32>,
    pub mask: Option<Raster<u8>>,
    pub trace: AugTrace,
}

pub fn apply_train(img: &Raster<u8>, mask: Option<&Raster<u8>>, cfg: &AugmentConfig, rng: &AugRng) -> Result<(Raster<f32>, Option<Raster<u8>>)> {
    let a = apply_train_traced(img, mask, cfg, rng)?;
    Ok((a.image, a.mask))
}

/// Runs the training chain and records every op's sampled parameters.
pub fn apply_train_traced(img: &Raster<u8>, mask: Option<&Raster<u8>>, cfg: &AugmentConfig, rng: &AugRng) -> Result<Augmented> {
    cfg.validate()?;
    if mask.is_some() != cfg.segmentation_mode {
        return Err(Error::ConfigConflict(if cfg.segmentation_mode {
            "segmentation mode needs a mask".into()
        } else {
            "mask given without segmentation mode".into()
        }));
    }
    if img.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            actual: img.channels(),
        });
    }
    if let Some(m) = mask {
        if m.width() != img.width() || m.height() != img.height() || m.channels() != 1 {
            return Err(Error::ShapeMismatch("mask does not match image".into()));
        }
    }
    let mut image = img.to_normalized();
    let mut mask = mask.cloned();
    let mut trace = AugTrace::new();

    if cfg.segmentation_mode {
        if cfg.enabled(AugOp::RandomCrop) {
            let b = sample_random_crop(image.width(), image.height(), cfg.crop_px, &mut rng.op(AugOp::RandomCrop))?;
            image = image.crop(b.x, b.y, b.w, b.h)?;
            mask = mask.map(|m| m.crop(b.x, b.y, b.w, b.h)).transpose()?;
            trace.push((AugOp::RandomCrop, OpEvent::Crop(b)));
        }
    } else if cfg.enabled(AugOp::RandomResizedCrop) {
        let mut r = rng.op(AugOp::RandomResizedCrop);
        let b = sample_rrc_box(image.width(), image.height(), cfg.rrc_scale_min, cfg.rrc_ratio, &mut r);
        image = bicubic_resize(&image.crop(b.x, b.y, b.w, b.h)?, cfg.image_size, cfg.image_size);
        trace.push((AugOp::RandomResizedCrop, OpEvent::Crop(b)));
    }

    if cfg.enabled(AugOp::ColorJitter) {
        let mut r = rng.op(AugOp::ColorJitter);
        let draw = (r.random::<f64>() < cfg.jitter_p).then(|| JitterDraw::sample(&cfg.jitter, &mut r));
        if let Some(d) = &draw {
            image = d.apply(&image);
        }
        trace.push((AugOp::ColorJitter, OpEvent::Jitter(draw)));
    }

    if cfg.ssl_mode && cfg.enabled(AugOp::RandomGrayscale) {
        let hit = rng.op(AugOp::RandomGrayscale).random::<f64>() < cfg.grayscale_p;
        if hit {
            image = to_grayscale(&image);
        }
        trace.push((AugOp::RandomGrayscale, OpEvent::Grayscale(hit)));
    }

    if cfg.enabled(AugOp::GaussianBlur) {
        let mut r = rng.op(AugOp::GaussianBlur);
        let sigma = (r.random::<f64>() < cfg.blur_p).then(|| r.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]));
        if let Some(s) = sigma {
            image = blur_with_sigma(&image, s);
        }
        trace.push((AugOp::GaussianBlur, OpEvent::Blur(sigma)));
    }

    for (op, p, vertical) in [(AugOp::HorizontalFlip, cfg.hflip_p, false), (AugOp::VerticalFlip, cfg.vflip_p, true)] {
        if !cfg.enabled(op) {
            continue;
        }
        let hit = rng.op(op).random::<f64>() < p;
        if hit {
            image = if vertical { image.flip_vertical() } else { image.flip_horizontal() };
            mask = mask.map(|m| if vertical { m.flip_vertical() } else { m.flip_horizontal() });
        }
        trace.push((op, OpEvent::Flip(hit)));
    }

    Ok(Augmented {
        image: cfg.normalize.apply(&image)?,
        mask,
        trace,
    })
}

/// Evaluation transform: center crop for the kinds that use one, then
/// normalization.
pub fn apply_eval(img: &Raster<u8>, kind: DatasetKind, normalize: &Normalize) -> Result<Raster<f32>> {
    let img = match kind.eval_center_crop() {
        Some(size) => center_crop(img, size)?,
        None => img.clone(),
    };
    normalize.apply(&img.to_normalized())
}

/// Nearest-neighbor counterpart of a resized crop, for masks.
pub fn crop_resize_mask(mask: &Raster<u8>, b: CropBox, out_px: u32) -> Result<Raster<u8>> {
    Ok(nearest_resize(&mask.crop(b.x, b.y, b.w, b.h)?, out_px, out_px))
}
