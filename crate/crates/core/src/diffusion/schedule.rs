use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

/// Cumulative signal coefficient ᾱ(t) on `t ∈ [0, 1]`.
///
/// Cosine: `f(t) = cos²(((t + s)/(1 + s))·π/2)`, `ᾱ(t) = f(t)/f(0)`, clipped
/// below at `alpha_bar_min` so `t = 1` stays invertible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub offset: f64,
    pub alpha_bar_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            offset: 0.008,
            alpha_bar_min: 1e-8,
        }
    }
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let ScheduleKind::Cosine = self.kind;
        let f = |u: f64| {
            let c = ((u + self.offset) / (1.0 + self.offset) * std::f64::consts::FRAC_PI_2).cos();
            c * c
        };
        (f(t) / f(0.0)).clamp(self.alpha_bar_min, 1.0)
    }

    /// `(√ᾱ, √(1 − ᾱ))`.
    pub fn coefficients(&self, t: f64) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.offset > 0.0 && self.alpha_bar_min > 0.0 && self.alpha_bar_min < 1e-2) {
            return Err(Error::InvalidArgument(format!("invalid noise schedule {self:?}")));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ(t)·z0 + √(1 − ᾱ(t))·ε`.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [0, 1]")));
    }
    let (a, b) = schedule.coefficients(t);
    let (a, b) = (a as f32, b as f32);
    z0.zip_map(eps, "add_noise", |x, e| a * x + b * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64) -> Tensor {
        Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0.0), 1.0);
        assert!(s.alpha_bar(1.0) <= 1e-7);
        let (z0, eps) = (random(1).scale(3.0), random(2));
        let start = add_noise(&z0, &eps, 0.0, &s).unwrap();
        assert!(start.max_abs_diff(&z0) < 1e-6);
        let end = add_noise(&z0, &eps, 1.0, &s).unwrap();
        assert!(end.max_abs_diff(&eps) < 1e-3, "{}", end.max_abs_diff(&eps));
    }

    #[test]
    fn equal_inputs_scale_by_coefficient_sum() {
        let s = NoiseSchedule::default();
        let v = random(3);
        for &t in &[0.1, 0.5, 0.9] {
            let (a, b) = s.coefficients(t);
            let got = add_noise(&v, &v, t, &s).unwrap();
            let want = v.scale((a + b) as f32);
            assert!(got.max_abs_diff(&want) < 1e-6);
        }
    }

    #[test]
    fn monotone_and_variance_preserving() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t: f64 = rng.random();
            let (a, b) = s.coefficients(t);
            assert!(((a * a + b * b) - 1.0).abs() < 1e-6);
        }
        let mut prev = 2.0;
        for i in 0..=1000 {
            let ab = s.alpha_bar(i as f64 / 1000.0);
            assert!(ab <= prev);
            prev = ab;
        }
    }

    #[test]
    fn rejects_out_of_range_timestep() {
        let s = NoiseSchedule::default();
        assert!(add_noise(&random(1), &random(2), 1.5, &s).is_err());
        assert!(add_noise(&random(1), &random(2), -0.1, &s).is_err());
    }
}
