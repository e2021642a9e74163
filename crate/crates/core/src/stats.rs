//! Streaming per-channel mean and standard deviation.
//!
//! Welford updates inside a worker, Chan's pairwise merge across workers.
//! Standard deviations use the population convention (divide by N).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Channel means published for the full PTCGA200 corpus (reference only).
pub const PTCGA200_MEAN: [f64; 3] = [0.7184, 0.5076, 0.6476];
/// Channel standard deviations published for the full PTCGA200 corpus.
pub const PTCGA200_STD: [f64; 3] = [0.0380, 0.0527, 0.0352];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// Every pixel is one sample.
    #[default]
    PerPixel,
    /// Every image contributes its channel means as one sample.
    PerImageMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelMoments {
    pub count: u64,
    pub mean: [f64; 3],
    pub m2: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub count: u64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Fewer than two samples; `std` is reported as zero.
    pub degenerate: bool,
}

impl ChannelMoments {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, sample: [f64; 3]) {
        self.count += 1;
        let n = self.count as f64;
        for c in 0..3 {
            let delta = sample[c] - self.mean[c];
            self.mean[c] += delta / n;
            self.m2[c] += delta * (sample[c] - self.mean[c]);
        }
    }

    /// Adds every pixel of an 8-bit RGB image, scaled to `[0, 1]`.
    pub fn update(&mut self, img: &Raster<u8>) -> Result<()> {
        check_rgb(img.channels())?;
        for px in img.data().chunks_exact(3) {
            self.push([px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0]);
        }
        Ok(())
    }

    pub fn update_f32(&mut self, img: &Raster<f32>) -> Result<()> {
        check_rgb(img.channels())?;
        for px in img.data().chunks_exact(3) {
            self.push([px[0] as f64, px[1] as f64, px[2] as f64]);
        }
        Ok(())
    }

    /// Adds one sample: the image's channel means.
    pub fn update_image_mean(&mut self, img: &Raster<u8>) -> Result<()> {
        check_rgb(img.channels())?;
        let mut local = ChannelMoments::new();
        local.update(img)?;
        if local.count > 0 {
            self.push(local.mean);
        }
        Ok(())
    }

    pub fn update_mode(&mut self, img: &Raster<u8>, mode: StatsMode) -> Result<()> {
        match mode {
            StatsMode::PerPixel => self.update(img),
            StatsMode::PerImageMean => self.update_image_mean(img),
        }
    }

    pub fn merge(&self, other: &ChannelMoments) -> ChannelMoments {
        if other.count == 0 {
            return *self;
        }
        if self.count == 0 {
            return *other;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut out = ChannelMoments {
            count: self.count + other.count,
            ..Default::default()
        };
        for c in 0..3 {
            let delta = other.mean[c] - self.mean[c];
            out.mean[c] = (na * self.mean[c] + nb * other.mean[c]) / n;
            out.m2[c] = self.m2[c] + other.m2[c] + delta * delta * na * nb / n;
        }
        out
    }

    pub fn finalize(&self) -> Result<ChannelStats> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let n = self.count as f64;
        let degenerate = self.count < 2;
        let std = if degenerate {
            [0.0; 3]
        } else {
            self.m2.map(|m| (m.max(0.0) / n).sqrt())
        };
        Ok(ChannelStats {
            count: self.count,
            mean: self.mean,
            std,
            degenerate,
        })
    }
}

fn check_rgb(channels: u8) -> Result<()> {
    if channels != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            actual: channels,
        });
    }
    Ok(())
}

/// Folds accumulators left to right. The fold order is fixed so results are
/// reproducible to the last bit.
pub fn merge_all<'a>(parts: impl IntoIterator<Item = &'a ChannelMoments>) -> ChannelMoments {
    parts.into_iter().fold(ChannelMoments::new(), |acc, m| acc.merge(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_constant_images() {
        let mut acc = ChannelMoments::new();
        acc.update(&Raster::filled(4, 4, 3, 0)).unwrap();
        let s = acc.finalize().unwrap();
        assert_eq!(s.mean, [0.0; 3]);
        assert_eq!(s.std, [0.0; 3]);

        let mut acc = ChannelMoments::new();
        acc.update(&Raster::filled(5, 3, 3, 51)).unwrap();
        let s = acc.finalize().unwrap();
        for c in 0..3 {
            assert!((s.mean[c] - 0.2).abs() < 1e-15);
            assert!(s.std[c] < 1e-12);
        }
    }

    #[test]
    fn population_std() {
        let mut acc = ChannelMoments::new();
        acc.push([0.0; 3]);
        acc.push([1.0; 3]);
        let s = acc.finalize().unwrap();
        assert_eq!(s.mean, [0.5; 3]);
        assert_eq!(s.std, [0.5; 3]);

        let mut one = ChannelMoments::new();
        one.push([0.3; 3]);
        let s = one.finalize().unwrap();
        assert!(s.degenerate);
        assert_eq!(s.std, [0.0; 3]);
        assert!(matches!(ChannelMoments::new().finalize(), Err(Error::EmptyAccumulator)));
    }

    #[test]
    fn merge_identity_and_symmetry() {
        let mut a = ChannelMoments::new();
        for i in 0..10 {
            a.push([i as f64 * 0.1, 0.5, 1.0 - i as f64 * 0.05]);
        }
        let mut b = ChannelMoments::new();
        for i in 0..7 {
            b.push([0.9 - i as f64 * 0.1, i as f64 * 0.02, 0.3]);
        }
        assert_eq!(a.merge(&ChannelMoments::new()), a);
        assert_eq!(ChannelMoments::new().merge(&a), a);
        let (ab, ba) = (a.merge(&b), b.merge(&a));
        for c in 0..3 {
            assert!((ab.mean[c] - ba.mean[c]).abs() < 1e-12);
            assert!((ab.m2[c] - ba.m2[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch() {
        let mut acc = ChannelMoments::new();
        assert!(matches!(acc.update(&Raster::filled(2, 2, 1, 0)), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn per_image_mean_mode() {
        let mut acc = ChannelMoments::new();
        acc.update_mode(&Raster::filled(3, 3, 3, 0), StatsMode::PerImageMean).unwrap();
        acc.update_mode(&Raster::filled(5, 5, 3, 255), StatsMode::PerImageMean).unwrap();
        let s = acc.finalize().unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.mean, [0.5; 3]);
        assert_eq!(s.std, [0.5; 3]);
    }
}
