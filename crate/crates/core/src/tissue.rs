//! Tissue detection on a low-resolution level.
//!
//! Luma is thresholded with Otsu's method (tissue is the dark class), cleaned
//! with a 3×3 opening and closing, and components below a size floor are
//! dropped. The resulting binary map answers coverage queries in level-0
//! physical coordinates through a summed-area table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::slide::{MppSpec, Slide};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueParams {
    pub work_mpp: f64,
    pub min_component_px: usize,
}

impl Default for TissueParams {
    fn default() -> Self {
        TissueParams {
            work_mpp: 8.0,
            min_component_px: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtsuThreshold {
    /// Bins `0..=threshold` form the lower class.
    pub threshold: u8,
    /// All mass sits in a single bin.
    pub degenerate: bool,
}

/// Otsu's threshold over a 256-bin histogram. Ties go to the lower cut.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<OtsuThreshold> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(OtsuThreshold {
            threshold: occupied[0] as u8,
            degenerate: true,
        });
    }
    let sum_all: u128 = hist.iter().enumerate().map(|(i, &n)| i as u128 * n as u128).sum();
    let n = total as f64;
    let mut n0: u64 = 0;
    let mut s0: u128 = 0;
    let mut best = (0u8, f64::NEG_INFINITY);
    for t in 0..256usize {
        n0 += hist[t];
        s0 += t as u128 * hist[t] as u128;
        let n1 = total - n0;
        let var = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            // w0 w1 (mu0 - mu1)^2 == d^2 / (N^2 n0 n1) with d = N S0 - n0 S
            let d = (total as i128 * s0 as i128 - n0 as i128 * sum_all as i128) as f64;
            d * d / (n * n * n0 as f64 * n1 as f64)
        };
        if var > best.1 {
            best = (t as u8, var);
        }
    }
    Ok(OtsuThreshold {
        threshold: best.0,
        degenerate: false,
    })
}

/// ITU-R BT.601 luma, rounded.
pub fn luma_u8(rgb: &Raster<u8>) -> Result<Raster<u8>> {
    if rgb.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            actual: rgb.channels(),
        });
    }
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8)
        .collect();
    Raster::from_vec(rgb.width(), rgb.height(), 1, data)
}

/// Binary map with physical geometry and O(1) rectangle counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMap {
    mask: Raster<u8>,
    mpp: MppSpec,
    integral: Vec<u64>,
}

/// Axis-aligned rectangle in level-0 physical coordinates (µm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectUm {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RectUm {
    pub fn square(x0: f64, y0: f64, side: f64) -> Self {
        RectUm {
            x0,
            y0,
            x1: x0 + side,
            y1: y0 + side,
        }
    }
}

impl CoverageMap {
    /// `mask` values are treated as set when non-zero.
    pub fn new(mask: Raster<u8>, mpp: MppSpec) -> Result<Self> {
        if mask.channels() != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: mask.channels(),
            });
        }
        let mask = Raster::from_vec(
            mask.width(),
            mask.height(),
            1,
            mask.data().iter().map(|&v| (v != 0) as u8).collect(),
        )?;
        let (w, h) = (mask.width() as usize, mask.height() as usize);
        let mut integral = vec![0u64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += mask.data()[y * w + x] as u64;
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        Ok(CoverageMap { mask, mpp, integral })
    }

    pub fn mask(&self) -> &Raster<u8> {
        &self.mask
    }

    pub fn mpp(&self) -> MppSpec {
        self.mpp
    }

    pub fn count(&self) -> u64 {
        *self.integral.last().unwrap_or(&0)
    }

    fn count_px(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u64 {
        let w = self.mask.width() as usize + 1;
        self.integral[y1 * w + x1] + self.integral[y0 * w + x0] - self.integral[y0 * w + x1] - self.integral[y1 * w + x0]
    }

    /// Pixel span whose centers fall inside `[a, b)`; at least the pixel
    /// containing the midpoint.
    fn span(a: f64, b: f64, mpp: f64, len: u32) -> (usize, usize) {
        let lo = (a / mpp - 0.5).ceil().max(0.0) as usize;
        let hi = ((b / mpp - 0.5).ceil().max(0.0) as usize).min(len as usize);
        if hi > lo {
            (lo, hi)
        } else {
            let mid = (((a + b) / 2.0 / mpp).floor().max(0.0) as usize).min(len as usize - 1);
            (mid, mid + 1)
        }
    }

    /// Fraction of set pixels inside `rect`.
    pub fn fraction(&self, rect: RectUm) -> Result<f64> {
        let ext_x = self.mask.width() as f64 * self.mpp.mpp_x;
        let ext_y = self.mask.height() as f64 * self.mpp.mpp_y;
        let slack = 1e-6 * ext_x.max(ext_y);
        if rect.x0 < -slack || rect.y0 < -slack || rect.x1 > ext_x + slack || rect.y1 > ext_y + slack || rect.x1 <= rect.x0 || rect.y1 <= rect.y0 {
            return Err(Error::OutOfBounds {
                x: rect.x0.floor() as i64,
                y: rect.y0.floor() as i64,
                w: (rect.x1 - rect.x0).max(0.0).ceil() as u64,
                h: (rect.y1 - rect.y0).max(0.0).ceil() as u64,
                width: ext_x.ceil() as u64,
                height: ext_y.ceil() as u64,
            });
        }
        let (x0, x1) = Self::span(rect.x0, rect.x1, self.mpp.mpp_x, self.mask.width());
        let (y0, y1) = Self::span(rect.y0, rect.y1, self.mpp.mpp_y, self.mask.height());
        let area = ((x1 - x0) * (y1 - y0)) as f64;
        Ok(self.count_px(x0, y0, x1, y1) as f64 / area)
    }

    /// Bounding box of set pixels in µm, if any.
    pub fn bounds_um(&self) -> Option<RectUm> {
        let (w, h) = (self.mask.width(), self.mask.height());
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if self.mask.get(x, y, 0) != 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != u32::MAX).then(|| RectUm {
            x0: x0 as f64 * self.mpp.mpp_x,
            y0: y0 as f64 * self.mpp.mpp_y,
            x1: x1 as f64 * self.mpp.mpp_x,
            y1: y1 as f64 * self.mpp.mpp_y,
        })
    }

    /// Writes the map as an 8-bit PNG with set pixels at 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let vis = Raster::from_vec(
            self.mask.width(),
            self.mask.height(),
            1,
            self.mask.data().iter().map(|&v| v * 255).collect(),
        )?;
        vis.save_png(path)
    }
}

/// Tissue map for one slide at a stated level.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub coverage: CoverageMap,
    pub level: usize,
    pub threshold: u8,
}

impl TissueMask {
    pub fn mask(&self) -> &Raster<u8> {
        self.coverage.mask()
    }

    pub fn mpp(&self) -> MppSpec {
        self.coverage.mpp()
    }
}

pub fn tissue_mask(slide: &Slide, params: &TissueParams) -> Result<TissueMask> {
    let level = slide.level_for_mpp(params.work_mpp).index;
    let rgb = slide.read_level(level)?;
    let gray = luma_u8(&rgb)?;
    let mut hist = [0u64; 256];
    for &v in gray.data() {
        hist[v as usize] += 1;
    }
    let otsu = otsu_threshold(&hist)?;
    if otsu.degenerate {
        return Err(Error::NoTissue);
    }
    let (w, h) = (gray.width(), gray.height());
    let raw: Vec<bool> = gray.data().iter().map(|&v| v <= otsu.threshold).collect();
    let opened = dilate(&erode(&raw, w, h), w, h);
    let closed = erode(&dilate(&opened, w, h), w, h);
    let cleaned = drop_small_components(&closed, w, h, params.min_component_px);
    if !cleaned.iter().any(|&b| b) {
        return Err(Error::NoTissue);
    }
    let mask = Raster::from_vec(w, h, 1, cleaned.iter().map(|&b| b as u8).collect())?;
    let mpp = slide.level(level)?.mpp;
    Ok(TissueMask {
        coverage: CoverageMap::new(mask, mpp)?,
        level,
        threshold: otsu.threshold,
    })
}

/// Fraction of tissue in a level-0 physical rectangle.
pub fn tissue_fraction(mask: &TissueMask, region: RectUm) -> Result<f64> {
    mask.coverage.fraction(region)
}

// 3x3 structuring element, edge pixels replicated.
fn morph(src: &[bool], w: u32, h: u32, erode: bool) -> Vec<bool> {
    let (w, h) = (w as i64, h as i64);
    let mut out = vec![false; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = erode;
            'n: for dy in -1..=1 {
                for dx in -1..=1 {
                    let nx = (x + dx).clamp(0, w - 1);
                    let ny = (y + dy).clamp(0, h - 1);
                    let v = src[(ny * w + nx) as usize];
                    if erode && !v {
                        acc = false;
                        break 'n;
                    }
                    if !erode && v {
                        acc = true;
                        break 'n;
                    }
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

fn erode(src: &[bool], w: u32, h: u32) -> Vec<bool> {
    morph(src, w, h, true)
}

fn dilate(src: &[bool], w: u32, h: u32) -> Vec<bool> {
    morph(src, w, h, false)
}

/// Removes 8-connected components smaller than `min_px`.
fn drop_small_components(src: &[bool], w: u32, h: u32, min_px: usize) -> Vec<bool> {
    let (w, h) = (w as i64, h as i64);
    let mut out = src.to_vec();
    let mut seen = vec![false; src.len()];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..src.len() {
        if !src[start] || seen[start] {
            continue;
        }
        component.clear();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = (i as i64 % w, i as i64 / w);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if src[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if component.len() < min_px {
            for &i in &component {
                out[i] = false;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    #[test]
    fn bimodal_histogram_separates() {
        let mut h = [0u64; 256];
        h[10] = 500;
        h[240] = 500;
        let t = otsu_threshold(&h).unwrap();
        assert!(!t.degenerate);
        assert!(t.threshold >= 10 && t.threshold < 240);
    }

    #[test]
    fn degenerate_and_empty() {
        let mut h = [0u64; 256];
        assert!(matches!(otsu_threshold(&h), Err(Error::EmptyHistogram)));
        h[128] = 77;
        assert_eq!(
            otsu_threshold(&h).unwrap(),
            OtsuThreshold {
                threshold: 128,
                degenerate: true
            }
        );
    }

    fn disk_slide(w: u32, h: u32, disks: &[(f64, f64, f64)], mpp: f64) -> Slide {
        let r = Raster::from_fn(w, h, 3, |x, y, c| {
            let inside = disks.iter().any(|&(cx, cy, rad)| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= rad * rad
            });
            if inside {
                [150, 60, 140][c as usize]
            } else {
                [245, 245, 245][c as usize]
            }
        });
        Slide::from_rasters("d", mpp, vec![(1.0, r)], BTreeMap::new()).unwrap()
    }

    #[test]
    fn disk_is_detected() {
        let s = disk_slide(100, 80, &[(50.0, 40.0, 20.0)], 8.0);
        let m = tissue_mask(&s, &TissueParams::default()).unwrap();
        for y in 0..80u32 {
            for x in 0..100u32 {
                let d = ((x as f64 + 0.5 - 50.0).powi(2) + (y as f64 + 0.5 - 40.0).powi(2)).sqrt();
                let set = m.mask().get(x, y, 0) == 1;
                if d < 19.0 {
                    assert!(set, "({x},{y}) inside");
                }
                if d > 21.0 {
                    assert!(!set, "({x},{y}) outside");
                }
            }
        }
    }

    #[test]
    fn white_slide_has_no_tissue() {
        let s = disk_slide(40, 40, &[], 8.0);
        assert!(matches!(tissue_mask(&s, &TissueParams::default()), Err(Error::NoTissue)));
    }

    #[test]
    fn small_component_is_removed() {
        // radius 3 disk has ~28 px, below the 64 px floor
        let s = disk_slide(100, 60, &[(30.0, 30.0, 15.0), (80.0, 30.0, 3.0)], 8.0);
        let m = tissue_mask(&s, &TissueParams::default()).unwrap();
        assert_eq!(m.mask().get(30, 30, 0), 1);
        assert_eq!(m.mask().get(80, 30, 0), 0);
    }

    #[test]
    fn fraction_queries() {
        // left half tissue, 64x64 at 1 µm/px
        let mask = Raster::from_fn(64, 64, 1, |x, _, _| (x < 32) as u8);
        let tm = TissueMask {
            coverage: CoverageMap::new(mask, MppSpec::square(1.0)).unwrap(),
            level: 0,
            threshold: 0,
        };
        assert_eq!(tissue_fraction(&tm, RectUm::square(0.0, 0.0, 16.0)).unwrap(), 1.0);
        assert_eq!(tissue_fraction(&tm, RectUm::square(40.0, 10.0, 16.0)).unwrap(), 0.0);
        let f = tissue_fraction(&tm, RectUm::square(24.0, 0.0, 16.0)).unwrap();
        assert!((f - 0.5).abs() <= 2.0 / 16.0);
        assert!(tissue_fraction(&tm, RectUm::square(56.0, 0.0, 16.0)).is_err());
    }
}
