use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Point;
use crate::error::{Error, Result};

/// Point-cloud augmentation applied to training shapes: uniform scaling,
/// per-axis translation and random point dropout, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Translation bound per axis, in model units.
    pub translate: f64,
    /// Lower bound of the keep-rate; the rate is drawn from `[keep_lo, 1]`.
    pub keep_lo: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_lo: 0.9,
            scale_hi: 1.1,
            translate: 0.05,
            keep_lo: 0.875,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale_lo: 1.0,
            scale_hi: 1.0,
            translate: 0.0,
            keep_lo: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_lo > 0.0
            && self.scale_lo <= self.scale_hi
            && self.scale_hi.is_finite()
            && self.translate >= 0.0
            && self.translate.is_finite()
            && self.keep_lo > 0.0
            && self.keep_lo <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid augmentation {self:?}")))
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Returns an augmented copy of `points`. Colors are never modified and the
/// surviving points keep their relative order.
pub fn augment_points<R: Rng + ?Sized>(points: &[Point], rng: &mut R, config: &AugmentConfig) -> Vec<Point> {
    let scale = uniform(rng, config.scale_lo, config.scale_hi);
    let shift: [f64; 3] = std::array::from_fn(|_| uniform(rng, -config.translate, config.translate));
    let keep_rate = uniform(rng, config.keep_lo, 1.0);
    let n = points.len();
    let keep = ((keep_rate * n as f64).ceil() as usize).clamp(1.min(n), n);

    let transform = |p: &Point| Point {
        xyz: std::array::from_fn(|a| (p.xyz[a] as f64 * scale + shift[a]) as f32),
        rgb: p.rgb,
    };
    if keep == n {
        return points.iter().map(transform).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| transform(&points[i])).collect()
}
