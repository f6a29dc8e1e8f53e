//! Conditional optimal-transport probability path and its regression target.
//!
//! For a prior draw `x0`, a data draw `x1` and a flow step `t`:
//!
//! ```text
//! x_t = (1 − (1 − σ_min)·t)·x0 + t·x1
//! v_t = x1 − (1 − σ_min)·x0
//! ```

use serde::{Deserialize, Serialize};

use crate::datasets::ConditionId;
use crate::error::{invalid, Result};
use crate::numerics::{DenseVec, RngStream};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub sigma_min: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }
}

impl PathConfig {
    /// `sigma_min` must lie in `(0, 0.1]`.
    pub fn new(sigma_min: f64) -> Result<Self> {
        let cfg = Self { sigma_min };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The `σ_min = 0` limit. Used by analytic checks; not accepted by
    /// [`PathConfig::new`] or config validation.
    pub fn exact_transport() -> Self {
        Self { sigma_min: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= 0.1) {
            return Err(invalid(format!(
                "sigma_min must be in (0, 0.1], got {}",
                self.sigma_min
            )));
        }
        Ok(())
    }

    /// Prior coefficient `a_t = 1 − (1 − σ_min)·t`, evaluated as
    /// `(1 − t) + σ_min·t` so that `a_0 = 1` and `a_1 = σ_min` exactly.
    #[inline]
    pub fn prior_coef(&self, t: f64) -> f64 {
        (1.0 - t) + self.sigma_min * t
    }

    /// `(1 − σ_min)`, the prior's weight in `v_t` (and `−da_t/dt`).
    #[inline]
    pub fn velocity_prior_coef(&self) -> f64 {
        1.0 - self.sigma_min
    }
}

/// One training tuple on the conditional OT path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x0: DenseVec,
    pub x1: DenseVec,
    pub t: f64,
    pub x_t: DenseVec,
    pub v_t: DenseVec,
    pub cond: Option<ConditionId>,
}

/// Evaluates `(x_t, v_t)` for given endpoints and flow step.
pub fn interpolate(x0: &DenseVec, x1: &DenseVec, t: f64, cfg: &PathConfig) -> Result<(DenseVec, DenseVec)> {
    if x0.dim() != x1.dim() {
        return Err(invalid(format!(
            "dimension mismatch: x0 {} vs x1 {}",
            x0.dim(),
            x1.dim()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t must be in [0, 1], got {t}")));
    }
    let (x_t, v_t) = interpolate_slices(x0.as_slice(), x1.as_slice(), t, cfg);
    Ok((DenseVec::from_vec_unchecked(x_t), DenseVec::from_vec_unchecked(v_t)))
}

pub(crate) fn interpolate_slices(x0: &[f64], x1: &[f64], t: f64, cfg: &PathConfig) -> (Vec<f64>, Vec<f64>) {
    let a = cfg.prior_coef(t);
    let b = cfg.velocity_prior_coef();
    let x_t = x0.iter().zip(x1).map(|(p, d)| a * p + t * d).collect();
    let v_t = x0.iter().zip(x1).map(|(p, d)| d - b * p).collect();
    (x_t, v_t)
}

/// Builds a path sample with the given `x0` and `t`.
pub fn path_sample_at(
    x0: DenseVec,
    x1: DenseVec,
    t: f64,
    cond: Option<ConditionId>,
    cfg: &PathConfig,
) -> Result<PathSample> {
    let (x_t, v_t) = interpolate(&x0, &x1, t, cfg)?;
    Ok(PathSample {
        x0,
        x1,
        t,
        x_t,
        v_t,
        cond,
    })
}

/// Draws `t ~ U[0, 1]` then `x0 ~ N(0, I)` and builds the path sample.
pub fn sample_path(
    x1: &DenseVec,
    cond: Option<ConditionId>,
    cfg: &PathConfig,
    rng: &mut RngStream,
) -> Result<PathSample> {
    if !x1.is_finite() {
        return Err(invalid("x1 must be finite"));
    }
    let t = rng.uniform();
    let mut x0 = vec![0.0; x1.dim()];
    rng.fill_standard_normal(&mut x0);
    path_sample_at(DenseVec::from_vec_unchecked(x0), x1.clone(), t, cond, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_sample;

    fn v(x: &[f64]) -> DenseVec {
        DenseVec::from_slice(x).unwrap()
    }

    #[test]
    fn endpoints() {
        for sigma in [DEFAULT_SIGMA_MIN, 0.01, 0.037] {
            let cfg = PathConfig::new(sigma).unwrap();
            let mut rng = RngStream::new(9, 0);
            for _ in 0..200 {
                let x0 = gaussian_sample(&mut rng, 3).unwrap();
                let x1 = gaussian_sample(&mut rng, 3).unwrap().scale(4.0);
                check_endpoints(&cfg, x0, x1);
            }
        }
    }

    fn check_endpoints(cfg: &PathConfig, x0: DenseVec, x1: DenseVec) {
        let s0 = path_sample_at(x0.clone(), x1.clone(), 0.0, None, cfg).unwrap();
        assert_eq!(s0.x_t, x0);
        let expect_v: Vec<f64> = x1
            .iter()
            .zip(x0.iter())
            .map(|(d, p)| d - (1.0 - cfg.sigma_min) * p)
            .collect();
        assert_eq!(s0.v_t.as_slice(), expect_v.as_slice());

        let s1 = path_sample_at(x0.clone(), x1.clone(), 1.0, None, cfg).unwrap();
        let expect_x: Vec<f64> = x0
            .iter()
            .zip(x1.iter())
            .map(|(p, d)| cfg.sigma_min * p + d)
            .collect();
        assert_eq!(s1.x_t.as_slice(), expect_x.as_slice());
    }

    #[test]
    fn worked_example() {
        let cfg = PathConfig::new(0.01).unwrap();
        let (x_t, v_t) = interpolate(&v(&[1.0]), &v(&[3.0]), 0.5, &cfg).unwrap();
        assert!((x_t[0] - 2.005).abs() < 1e-15);
        assert!((v_t[0] - 2.01).abs() < 1e-15);
    }

    #[test]
    fn zero_endpoints_and_t_independence() {
        let cfg = PathConfig::default();
        let z = DenseVec::zeros(3);
        let (x_t, v_t) = interpolate(&z, &z, 0.4, &cfg).unwrap();
        assert_eq!(x_t, z);
        assert_eq!(v_t, z);

        let x0 = v(&[1.0, -2.0]);
        let x1 = v(&[0.5, 4.0]);
        let a = interpolate(&x0, &x1, 0.2, &cfg).unwrap().1;
        let b = interpolate(&x0, &x1, 0.9, &cfg).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn exact_transport_example() {
        let cfg = PathConfig::exact_transport();
        let (x_t, v_t) = interpolate(&v(&[0.0, 0.0]), &v(&[4.0, -2.0]), 0.25, &cfg).unwrap();
        assert_eq!(x_t.as_slice(), &[1.0, -0.5]);
        assert_eq!(v_t.as_slice(), &[4.0, -2.0]);
    }

    #[test]
    fn errors() {
        let cfg = PathConfig::default();
        assert!(interpolate(&v(&[1.0]), &v(&[1.0, 2.0]), 0.5, &cfg).is_err());
        assert!(interpolate(&v(&[1.0]), &v(&[1.0]), 1.5, &cfg).is_err());
        assert!(PathConfig::new(0.0).is_err());
        assert!(PathConfig::new(0.2).is_err());
    }

    #[test]
    fn straight_line_consistency() {
        let cfg = PathConfig::new(0.05).unwrap();
        let mut rng = RngStream::new(10, 0);
        for _ in 0..10_000 {
            let mut x1 = vec![0.0; 3];
            rng.fill_standard_normal(&mut x1);
            let x1: Vec<f64> = x1.iter().map(|x| 3.0 * x).collect();
            let s = sample_path(&v(&x1), None, &cfg, &mut rng).unwrap();
            for i in 0..3 {
                let lhs = s.x_t[i] + (1.0 - s.t) * s.v_t[i];
                let rhs = s.x1[i] + cfg.sigma_min * s.x0[i];
                let scale = s.x1[i].abs() + s.x0[i].abs() + 1e-300;
                assert!((lhs - rhs).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn finite_difference_in_t_matches_velocity() {
        let cfg = PathConfig::default();
        let x0 = v(&[0.7, -0.3]);
        let x1 = v(&[-1.5, 2.5]);
        let h = 1e-6;
        for &t in &[0.1, 0.5, 0.8] {
            let (a, vt) = interpolate(&x0, &x1, t, &cfg).unwrap();
            let (b, _) = interpolate(&x0, &x1, t + h, &cfg).unwrap();
            for i in 0..2 {
                assert!(((b[i] - a[i]) / h - vt[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_prior_recovers_scaled_data() {
        let cfg = PathConfig::exact_transport();
        let x1 = v(&[1.25, -3.5]);
        let (x_t, _) = interpolate(&DenseVec::zeros(2), &x1, 0.75, &cfg).unwrap();
        assert_eq!(x_t.as_slice(), &[0.75 * 1.25, 0.75 * -3.5]);
    }
}
