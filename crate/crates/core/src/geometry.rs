//! Resampling kernels and magnification arithmetic.
//!
//! Coordinates follow the pixel-center convention: output pixel `d` samples
//! the source at `(d + 0.5) * src / dst - 0.5`. Out-of-range taps clamp to the
//! nearest edge pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::slide::{physical_extent_px, Slide, SlideKind};

/// Keys cubic convolution parameter.
pub const KEYS_A: f64 = -0.5;

#[inline]
pub fn keys_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((KEYS_A + 2.0) * x - (KEYS_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((KEYS_A * x - 5.0 * KEYS_A) * x + 8.0 * KEYS_A) * x - 4.0 * KEYS_A
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Bicubic,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResamplePlan {
    pub src_w: u32,
    pub src_h: u32,
    pub dst_w: u32,
    pub dst_h: u32,
    pub kernel: Kernel,
}

impl ResamplePlan {
    pub fn new(src_w: u32, src_h: u32, dst_w: u32, dst_h: u32, kernel: Kernel) -> Result<Self> {
        if src_w == 0 || src_h == 0 || dst_w == 0 || dst_h == 0 {
            return Err(Error::InvalidConfig("resample dimensions must be at least 1".into()));
        }
        Ok(ResamplePlan {
            src_w,
            src_h,
            dst_w,
            dst_h,
            kernel,
        })
    }

    /// Masks (single-channel label rasters) must be resampled with `Nearest`.
    pub fn apply(&self, img: &Raster<u8>, is_mask: bool) -> Result<Raster<u8>> {
        if img.width() != self.src_w || img.height() != self.src_h {
            return Err(Error::ShapeMismatch(format!(
                "plan expects {}x{}, got {}x{}",
                self.src_w,
                self.src_h,
                img.width(),
                img.height()
            )));
        }
        match (self.kernel, is_mask) {
            (Kernel::Nearest, _) => Ok(nearest_resize(img, self.dst_w, self.dst_h)),
            (Kernel::Bicubic, false) => Ok(bicubic_resize_u8(img, self.dst_w, self.dst_h)),
            (Kernel::Bicubic, true) => Err(Error::ConfigConflict("label masks must use nearest resampling".into())),
        }
    }
}

/// Four clamped taps per output coordinate.
fn taps(src: u32, dst: u32) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    let last = src as i64 - 1;
    (0..dst)
        .map(|d| {
            let s = (d as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let t = s - base;
            let base = base as i64;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let off = k as i64 - 1;
                idx[k] = (base + off).clamp(0, last) as usize;
                w[k] = keys_weight(t - off as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling of real-valued data, optionally clamped.
///
/// Accumulation is done in `f64`; the result is rounded to `f32` once.
pub fn resample_bicubic(src: &Raster<f32>, dst_w: u32, dst_h: u32, clamp: Option<(f32, f32)>) -> Raster<f32> {
    let (sw, sh, c) = (src.width() as usize, src.height() as usize, src.channels() as usize);
    if sw == dst_w as usize && sh == dst_h as usize {
        // unit scale puts every sample exactly on a source center
        let mut out = src.clone();
        if let Some((lo, hi)) = clamp {
            out.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
        return out;
    }
    let xt = taps(src.width(), dst_w);
    let yt = taps(src.height(), dst_h);
    let (dw, dh) = (dst_w as usize, dst_h as usize);
    let data = src.data();

    let mut horiz = vec![0f64; sh * dw * c];
    for y in 0..sh {
        let row = &data[y * sw * c..(y + 1) * sw * c];
        let out = &mut horiz[y * dw * c..(y + 1) * dw * c];
        for (x, (idx, w)) in xt.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0f64;
                for k in 0..4 {
                    acc += w[k] * row[idx[k] * c + ch] as f64;
                }
                out[x * c + ch] = acc;
            }
        }
    }

    let mut out = Vec::with_capacity(dw * dh * c);
    for (idx, w) in &yt {
        for i in 0..dw * c {
            let mut acc = 0f64;
            for k in 0..4 {
                acc += w[k] * horiz[idx[k] * dw * c + i];
            }
            let v = acc as f32;
            out.push(match clamp {
                Some((lo, hi)) => v.clamp(lo, hi),
                None => v,
            });
        }
    }
    Raster::from_vec(dst_w, dst_h, src.channels(), out).expect("sized buffer")
}

/// Bicubic resize of a normalized image; output clipped to `[0, 1]`.
pub fn bicubic_resize(img: &Raster<f32>, dst_w: u32, dst_h: u32) -> Raster<f32> {
    resample_bicubic(img, dst_w, dst_h, Some((0.0, 1.0)))
}

/// Bicubic resize of an 8-bit image, quantized once at the end.
pub fn bicubic_resize_u8(img: &Raster<u8>, dst_w: u32, dst_h: u32) -> Raster<u8> {
    if img.width() == dst_w && img.height() == dst_h {
        return img.clone();
    }
    bicubic_resize(&img.to_normalized(), dst_w, dst_h).to_u8()
}

pub fn nearest_resize<T: Copy + Default>(mask: &Raster<T>, dst_w: u32, dst_h: u32) -> Raster<T> {
    let pick = |src: u32, dst: u32, d: u32| -> u32 {
        let s = ((d as f64 + 0.5) * src as f64 / dst as f64).floor() as u32;
        s.min(src - 1)
    };
    let xs: Vec<u32> = (0..dst_w).map(|d| pick(mask.width(), dst_w, d)).collect();
    let ys: Vec<u32> = (0..dst_h).map(|d| pick(mask.height(), dst_h, d)).collect();
    Raster::from_fn(dst_w, dst_h, mask.channels(), |x, y, c| mask.get(xs[x as usize], ys[y as usize], c))
}

/// Top-left offset of a centered `size` crop along an axis of length `dim`.
pub fn center_offset(dim: u32, size: u32) -> u32 {
    (dim - size) / 2
}

pub fn center_crop<T: Copy + Default>(img: &Raster<T>, size: u32) -> Result<Raster<T>> {
    if size == 0 || size > img.width() || size > img.height() {
        return Err(Error::CropTooLarge {
            size,
            width: img.width(),
            height: img.height(),
        });
    }
    img.crop(center_offset(img.width(), size), center_offset(img.height(), size), size, size)
}

/// Pixel size after cropping `crop_px` pixels and resizing them to `out_px`.
pub fn effective_mpp(source_mpp: f64, crop_px: f64, out_px: f64) -> f64 {
    source_mpp * crop_px / out_px
}

/// Pixel window at a chosen level covering a physical square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub level: usize,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub upsample: bool,
}

/// Locates the pixels behind a physical square whose top-left sits at
/// level-0 physical coordinates `(x0_um, y0_um)`.
///
/// The coarsest level still at least as fine as `scale_um / out_px` is used.
pub fn patch_window(slide: &Slide, x0_um: f64, y0_um: f64, scale_um: f64, out_px: u32) -> Result<PatchWindow> {
    let choice = slide.level_for_mpp(scale_um / out_px as f64);
    let level = slide.level(choice.index)?;
    let w = physical_extent_px(scale_um, level.mpp.mpp_x);
    let h = physical_extent_px(scale_um, level.mpp.mpp_y);
    let x = (x0_um / level.mpp.mpp_x).round();
    let y = (y0_um / level.mpp.mpp_y).round();
    if x < 0.0 || y < 0.0 || x + w as f64 > level.width_px as f64 || y + h as f64 > level.height_px as f64 {
        return Err(Error::OutOfBounds {
            x: x as i64,
            y: y as i64,
            w: w as u64,
            h: h as u64,
            width: level.width_px as u64,
            height: level.height_px as u64,
        });
    }
    Ok(PatchWindow {
        level: choice.index,
        x: x as u32,
        y: y as u32,
        w,
        h,
        upsample: choice.upsample,
    })
}

/// Extracts a physical square and resamples it to `out_px`×`out_px`.
///
/// RGB slides use bicubic resampling, mask slides nearest-neighbor.
pub fn extract_normalized_patch(slide: &Slide, x0_um: f64, y0_um: f64, scale_um: f64, out_px: u32) -> Result<Raster<u8>> {
    let win = patch_window(slide, x0_um, y0_um, scale_um, out_px)?;
    let region = slide.read_region(win.level, win.x, win.y, win.w, win.h)?;
    Ok(match slide.kind() {
        SlideKind::Rgb => bicubic_resize_u8(&region, out_px, out_px),
        SlideKind::Mask => nearest_resize(&region, out_px, out_px),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    #[test]
    fn keys_weights_partition_unity() {
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let s: f64 = (-1..=2).map(|k| keys_weight(t - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(keys_weight(0.0), 1.0);
        assert_eq!(keys_weight(1.0), 0.0);
        assert_eq!(keys_weight(2.0), 0.0);
    }

    #[test]
    fn identity_and_constant() {
        let img = Raster::from_fn(7, 5, 3, |x, y, c| ((x * 31 + y * 17 + c as u32 * 5) % 256) as u8).to_normalized();
        assert_eq!(bicubic_resize(&img, 7, 5), img);
        let c = Raster::filled(9, 4, 3, 0.3f32);
        for (w, h) in [(3, 3), (20, 11), (1, 1), (9, 9)] {
            let r = bicubic_resize(&c, w, h);
            assert!(r.data().iter().all(|&v| v == 0.3), "{w}x{h}");
        }
    }

    #[test]
    fn nearest_blocks_and_closure() {
        let m = Raster::from_vec(2, 2, 1, vec![1u8, 2, 3, 4]).unwrap();
        let up = nearest_resize(&m, 4, 4);
        assert_eq!(up.data(), &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        assert_eq!(nearest_resize(&m, 2, 2), m);
        let single = Raster::filled(10, 10, 1, 5u8);
        assert_eq!(nearest_resize(&single, 3, 3).value_set(), vec![5]);
    }

    #[test]
    fn center_crop_offsets() {
        assert_eq!(center_offset(512, 287), 112);
        let img = Raster::from_fn(512, 512, 1, |x, y, _| ((x + y) % 256) as u8);
        let c = center_crop(&img, 287).unwrap();
        assert_eq!((c.width(), c.height()), (287, 287));
        assert_eq!(c.get(0, 0, 0), img.get(112, 112, 0));
        assert_eq!(c.get(286, 286, 0), img.get(398, 398, 0));
        assert_eq!(center_crop(&img, 512).unwrap(), img);
        assert!(matches!(center_crop(&img, 513), Err(Error::CropTooLarge { .. })));
    }

    #[test]
    fn effective_mpp_values() {
        assert!((effective_mpp(0.390625, 287.0, 384.0) - 0.29195).abs() < 1e-4);
        assert!((effective_mpp(0.390625, 512.0, 384.0) - 0.52083).abs() < 1e-4);
        assert_eq!(effective_mpp(0.7, 300.0, 300.0), 0.7);
    }

    #[test]
    fn plan_rejects_bicubic_masks() {
        let plan = ResamplePlan::new(4, 4, 8, 8, Kernel::Bicubic).unwrap();
        let m = Raster::filled(4, 4, 1, 2u8);
        assert!(matches!(plan.apply(&m, true), Err(Error::ConfigConflict(_))));
        assert!(ResamplePlan::new(0, 4, 8, 8, Kernel::Nearest).is_err());
        let plan = ResamplePlan::new(4, 4, 8, 8, Kernel::Nearest).unwrap();
        assert_eq!(plan.apply(&m, true).unwrap().value_set(), vec![2]);
    }

    fn slide_at(mpp: f64, side: u32) -> Slide {
        let r = Raster::from_fn(side, side, 3, |x, y, c| ((x / 7 + y / 5 + c as u32) % 256) as u8);
        Slide::from_rasters("s", mpp, vec![(1.0, r)], BTreeMap::new()).unwrap()
    }

    #[test]
    fn patch_at_native_scale_is_a_plain_read() {
        let s = slide_at(0.390625, 600);
        let p = extract_normalized_patch(&s, 10.0 * 0.390625, 20.0 * 0.390625, 200.0, 512).unwrap();
        assert_eq!(p, s.read_region(0, 10, 20, 512, 512).unwrap());
    }

    #[test]
    fn patch_from_finer_level_is_resized() {
        let s = slide_at(0.25, 900);
        let p = extract_normalized_patch(&s, 0.0, 0.0, 200.0, 512).unwrap();
        assert_eq!((p.width(), p.height()), (512, 512));
        let expected = bicubic_resize_u8(&s.read_region(0, 0, 0, 800, 800).unwrap(), 512, 512);
        assert_eq!(p, expected);
        assert!(matches!(
            extract_normalized_patch(&s, 100.0, 0.0, 200.0, 512),
            Err(Error::OutOfBounds { .. })
        ));
    }
}
