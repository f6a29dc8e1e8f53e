//! Synthetic class-conditional datasets.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{DenseMat, DenseVec, RngStream};

pub const MAX_CLASSES: usize = 64;

/// A class label in `[0, K)`. The unconditional ("null") condition is
/// represented as `None` wherever an `Option<ConditionId>` appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionId(pub usize);

impl ConditionId {
    pub fn new(id: usize, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > MAX_CLASSES {
            return Err(invalid(format!(
                "number of classes must be in 1..={MAX_CLASSES}, got {num_classes}"
            )));
        }
        if id >= num_classes {
            return Err(invalid(format!(
                "condition {id} out of range for {num_classes} classes"
            )));
        }
        Ok(Self(id))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianMixture,
    TwoMoons,
    Rings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub dim: usize,
    pub num_classes: usize,
    /// Per-class means (gaussian-mixture only).
    pub means: Vec<Vec<f64>>,
    /// Per-class isotropic covariance `scale · I` (gaussian-mixture only).
    pub scales: Vec<f64>,
    /// Additive isotropic noise std (two-moons, rings).
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        default_spec()
    }
}

/// Four-class 2-D Gaussian mixture: means at (±2, ±2), covariance 0.25·I.
pub fn default_spec() -> DatasetSpec {
    DatasetSpec {
        kind: DatasetKind::GaussianMixture,
        dim: 2,
        num_classes: 4,
        means: vec![
            vec![2.0, 2.0],
            vec![-2.0, 2.0],
            vec![-2.0, -2.0],
            vec![2.0, -2.0],
        ],
        scales: vec![0.25; 4],
        noise: 0.0,
        seed: 42,
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dataset dim must be >= 1"));
        }
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(invalid(format!(
                "number of classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        match self.kind {
            DatasetKind::GaussianMixture => {
                if self.means.len() != self.num_classes || self.scales.len() != self.num_classes {
                    return Err(invalid(format!(
                        "gaussian-mixture needs {} means and scales, got {} and {}",
                        self.num_classes,
                        self.means.len(),
                        self.scales.len()
                    )));
                }
                if let Some(m) = self.means.iter().find(|m| m.len() != self.dim) {
                    return Err(invalid(format!(
                        "mean of dim {} in a dim-{} dataset",
                        m.len(),
                        self.dim
                    )));
                }
                if self.means.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(invalid("non-finite class mean"));
                }
                if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(invalid("covariance scales must be strictly positive"));
                }
            }
            DatasetKind::TwoMoons | DatasetKind::Rings => {
                if self.dim != 2 {
                    return Err(invalid("two-moons and rings are 2-D datasets"));
                }
                if self.kind == DatasetKind::TwoMoons && self.num_classes != 2 {
                    return Err(invalid("two-moons has exactly 2 classes"));
                }
                if !(self.noise.is_finite() && self.noise >= 0.0) {
                    return Err(invalid("noise must be finite and non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Class-conditional Gaussian parameters `(mean, covariance)` for a
    /// gaussian-mixture spec; `None` for other kinds.
    pub fn class_gaussians(&self) -> Option<Vec<(DenseVec, DenseMat)>> {
        if self.kind != DatasetKind::GaussianMixture {
            return None;
        }
        Some(
            self.means
                .iter()
                .zip(&self.scales)
                .map(|(m, &s)| {
                    (
                        DenseVec::from_vec_unchecked(m.clone()),
                        DenseMat::diag(&vec![s; self.dim]),
                    )
                })
                .collect(),
        )
    }
}

/// One `(x1, c)` draw: `c` uniform over classes, `x1` from class `c`.
pub fn draw_pair(spec: &DatasetSpec, rng: &mut RngStream) -> Result<(DenseVec, ConditionId)> {
    spec.validate()?;
    Ok(draw_pair_unchecked(spec, rng))
}

/// [`draw_pair`] without re-validating the spec.
pub(crate) fn draw_pair_unchecked(spec: &DatasetSpec, rng: &mut RngStream) -> (DenseVec, ConditionId) {
    let c = rng.below(spec.num_classes);
    let x = match spec.kind {
        DatasetKind::GaussianMixture => {
            let sd = spec.scales[c].sqrt();
            let mut x = vec![0.0; spec.dim];
            rng.fill_standard_normal(&mut x);
            for (xi, mi) in x.iter_mut().zip(&spec.means[c]) {
                *xi = mi + sd * *xi;
            }
            x
        }
        DatasetKind::TwoMoons => {
            let theta = std::f64::consts::PI * rng.uniform();
            let (s, co) = theta.sin_cos();
            let mut x = if c == 0 {
                vec![co, s]
            } else {
                vec![1.0 - co, 0.5 - s]
            };
            for xi in &mut x {
                *xi += spec.noise * rng.standard_normal();
            }
            x
        }
        DatasetKind::Rings => {
            let theta = std::f64::consts::TAU * rng.uniform();
            let radius = (c + 1) as f64;
            let (s, co) = theta.sin_cos();
            let mut x = vec![radius * co, radius * s];
            for xi in &mut x {
                *xi += spec.noise * rng.standard_normal();
            }
            x
        }
    };
    (DenseVec::from_vec_unchecked(x), ConditionId(c))
}
