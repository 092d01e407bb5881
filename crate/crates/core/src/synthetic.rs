//! Procedural image set whose samples need different input resolutions.
//!
//! Each class is a stripe orientation, up to mirroring. Coarse samples draw
//! wide stripes that survive downsampling; fine samples draw stripes a few
//! pixels wide that alias away at low resolution. A per-image tint and pixel noise keep the
//! task from being trivially separable.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;

/// Parameters of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct StripeSpec {
    pub count: usize,
    pub side: usize,
    pub classes: usize,
    /// Fraction of samples drawn with fine stripes.
    pub fine_fraction: f64,
    /// Stripe period in pixels for coarse samples.
    pub coarse_period: f64,
    /// Stripe period in pixels for fine samples.
    pub fine_period: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for StripeSpec {
    fn default() -> Self {
        StripeSpec {
            count: 2000,
            side: 32,
            classes: 4,
            fine_fraction: 0.5,
            coarse_period: 12.0,
            fine_period: 3.0,
            noise: 0.08,
            seed: 0,
        }
    }
}

/// Generates the dataset together with a per-sample "fine" flag.
pub fn stripes(spec: &StripeSpec) -> (Dataset, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite std");
    let s = spec.side;
    let mut pixels = Vec::with_capacity(spec.count * 3 * s * s);
    let mut labels = Vec::with_capacity(spec.count);
    let mut fine = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let class = rng.gen_range(0..spec.classes);
        let is_fine = rng.gen_bool(spec.fine_fraction.clamp(0.0, 1.0));
        let period = if is_fine { spec.fine_period } else { spec.coarse_period };
        // A class is an angle from the x axis up to a sign, so horizontal
        // flips keep the label. The half-step offset keeps every orientation
        // off the axes and diagonals, so aliased fine stripes fold onto the
        // wrong angle.
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let theta = sign * (0.5 * PI * (class as f64 + 0.5) / spec.classes as f64 + rng.gen_range(-0.04..0.04));
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (c, sn) = (theta.cos(), theta.sin());
        let tint: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
        let base: f64 = rng.gen_range(0.3..0.7);
        for t in tint {
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 * c + y as f64 * sn) * 2.0 * PI / period + phase;
                    let v = base + 0.3 * t * u.sin() + noise.sample(&mut rng);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(class);
        fine.push(is_fine);
    }
    let ds = Dataset::from_bytes(pixels, labels, 3, s).expect("extent matches");
    (ds, fine)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = StripeSpec {
            count: 400,
            ..Default::default()
        };
        let (a, fa) = stripes(&spec);
        let (b, fb) = stripes(&spec);
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        assert_eq!(a.class_count(), 4);
        let fine = fa.iter().filter(|f| **f).count();
        assert!((150..250).contains(&fine), "{fine}");
    }
}
