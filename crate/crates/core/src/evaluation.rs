//! Metrics, vector-field oracles and the guidance/step ablation sweeps.
//!
//! The brute-force oracle computes the marginal field `E[v_t | x_t = x]`
//! by integrating over the prior draw `x0`; it is the reference the
//! closed-form Gaussian and mixture fields are checked against.

use serde::{Deserialize, Serialize};

use crate::datasets::{ConditionId, DatasetKind, DatasetSpec};
use crate::error::{invalid, Error, Result};
use crate::fm_path::{sample_path, PathConfig, PathSample};
use crate::numerics::{symmetric_eigen, DenseMat, DenseVec, RngStream};
use crate::pipeline::Pipeline;
use crate::sampler::{sample_latents, GuidanceConfig, SolverConfig};
use crate::vector_field::VectorFieldNet;

const PSD_TOL: f64 = 1e-10;
const DIAGONAL_TOL: f64 = 1e-9;

/// Stream id of sampling prior draws under the evaluation seed.
pub const SAMPLE_STREAM: u64 = 0x5341_4d50;
/// Stream id of held-out loss batches under the evaluation seed.
pub const HELDOUT_STREAM: u64 = 0x484f_4c44;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DenseVec,
    pub covariance: DenseMat,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DenseVec::zeros(dim),
            covariance: DenseMat::identity(dim),
        }
    }

    pub fn isotropic(mean: DenseVec, variance: f64) -> Self {
        let d = mean.dim();
        Self {
            mean,
            covariance: DenseMat::diag(&vec![variance; d]),
        }
    }

    /// Symmetric to `1e-10`, eigenvalues `≥ −1e-10` (scaled by the largest
    /// eigenvalue magnitude when that exceeds 1).
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.covariance.rows() != d || self.covariance.cols() != d {
            return Err(invalid("covariance shape does not match mean"));
        }
        if self.covariance.max_asymmetry() > PSD_TOL {
            return Err(invalid("covariance is not symmetric"));
        }
        let (vals, _) = symmetric_eigen(&self.covariance)?;
        let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if vals.iter().any(|&v| v < -PSD_TOL * scale) {
            return Err(invalid("covariance is not positive semi-definite"));
        }
        Ok(())
    }

    /// Diagonal of the covariance, if off-diagonal entries are negligible.
    pub fn diagonal(&self) -> Option<Vec<f64>> {
        let d = self.dim();
        let scale = (0..d).fold(1.0f64, |m, i| m.max(self.covariance.get(i, i).abs()));
        for r in 0..d {
            for c in 0..d {
                if r != c && self.covariance.get(r, c).abs() > DIAGONAL_TOL * scale {
                    return None;
                }
            }
        }
        Some((0..d).map(|i| self.covariance.get(i, i)).collect())
    }
}

/// One evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet: f64,
    pub mode_accuracy: f64,
    pub mean_loss: f64,
    pub n_samples: usize,
    pub w: f64,
    pub num_steps: usize,
    pub sigma_min: f64,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "frechet,mode_accuracy,mean_loss,n_samples,w,N,sigma_min,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.frechet,
            self.mode_accuracy,
            self.mean_loss,
            self.n_samples,
            self.w,
            self.num_steps,
            self.sigma_min,
            self.seed
        )
    }
}

fn sqrt_psd(m: &DenseMat) -> Result<DenseMat> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let n = m.rows();
    let mut out = DenseMat::zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        if lam < -PSD_TOL * scale {
            return Err(invalid("matrix is not positive semi-definite"));
        }
        let s = lam.max(0.0).sqrt();
        for r in 0..n {
            for c in 0..n {
                let v = out.get(r, c) + s * vecs.get(r, k) * vecs.get(c, k);
                out.set(r, c, v);
            }
        }
    }
    Ok(out)
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The trace of `(Σa Σb)^{1/2}` is taken as the trace of the PSD square
/// root of the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`, which has the same
/// eigenvalues.
pub fn frechet_gaussian(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid("frechet_gaussian: dimension mismatch"));
    }
    a.validate()?;
    b.validate()?;
    let mean_term = a.mean.sub(&b.mean)?.norm_sq();
    let ra = sqrt_psd(&a.covariance)?;
    let inner = ra.matmul(&b.covariance)?.matmul(&ra)?.symmetrized();
    let (vals, _) = symmetric_eigen(&inner)?;
    let cross: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(samples: &[DenseVec]) -> Result<GaussianFit> {
    let d = samples.first().map(DenseVec::dim).ok_or_else(|| invalid("no samples"))?;
    if samples.len() < d + 1 {
        return Err(invalid(format!(
            "fit_gaussian needs at least {} samples, got {}",
            d + 1,
            samples.len()
        )));
    }
    if samples.iter().any(|s| s.dim() != d) {
        return Err(invalid("samples have mixed dimensions"));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DenseMat::zeros(d, d);
    for s in samples {
        for r in 0..d {
            let dr = s[r] - mean[r];
            for c in 0..=r {
                let v = cov.get(r, c) + dr * (s[c] - mean[c]);
                cov.set(r, c, v);
            }
        }
    }
    for r in 0..d {
        for c in 0..=r {
            let v = cov.get(r, c) / (n - 1.0);
            cov.set(r, c, v);
            cov.set(c, r, v);
        }
    }
    Ok(GaussianFit {
        mean: DenseVec::new(mean)?,
        covariance: cov,
    })
}

/// Fraction of samples whose nearest class mean is their conditioning class.
pub fn mode_accuracy(samples: &[DenseVec], conds: &[ConditionId], spec: &DatasetSpec) -> Result<f64> {
    if spec.kind != DatasetKind::GaussianMixture {
        return Err(Error::UnsupportedMetric(
            "mode_accuracy needs a gaussian-mixture dataset".into(),
        ));
    }
    if samples.len() != conds.len() || samples.is_empty() {
        return Err(invalid("need one condition per sample"));
    }
    let mut hits = 0usize;
    for (s, c) in samples.iter().zip(conds) {
        if s.dim() != spec.dim {
            return Err(invalid("sample dimension does not match the dataset"));
        }
        let nearest = spec
            .means
            .iter()
            .map(|m| m.iter().zip(s.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("at least one class");
        if nearest == c.index() {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Per-dimension coefficients `(k_i, m_i)` of the Gaussian marginal field
/// `u_i = k_i·(x_i − t·μ_i) + μ_i`, with
/// `k_i = (t·σ_i² − (1−σ_min)·a_t) / (a_t² + t²·σ_i²)`.
fn gaussian_field_coefs(target: &GaussianFit, path_cfg: &PathConfig, t: f64) -> Result<Vec<f64>> {
    let diag = target.diagonal().ok_or_else(|| {
        invalid("oracle_gaussian_field supports isotropic or diagonal covariance only")
    })?;
    let a = path_cfg.prior_coef(t);
    let b = path_cfg.velocity_prior_coef();
    diag.iter()
        .map(|&var| {
            let s2 = a * a + t * t * var;
            if s2 <= 0.0 {
                return Err(invalid("degenerate marginal at this t"));
            }
            Ok((t * var - b * a) / s2)
        })
        .collect()
}

/// Closed-form marginal vector field for a Gaussian target with diagonal
/// covariance: `ds_t/dt · (x − m_t)/s_t + dm_t/dt` per dimension, where
/// `m_t = t·μ` and `s_t² = a_t² + t²σ²`.
pub fn oracle_gaussian_field(target: &GaussianFit, path_cfg: &PathConfig, x: &DenseVec, t: f64) -> Result<DenseVec> {
    if x.dim() != target.dim() {
        return Err(invalid("oracle_gaussian_field: dimension mismatch"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid("t must be in [0, 1]"));
    }
    let k = gaussian_field_coefs(target, path_cfg, t)?;
    let out = (0..x.dim())
        .map(|i| {
            let mu = target.mean[i];
            k[i] * (x[i] - t * mu) + mu
        })
        .collect();
    Ok(DenseVec::from_vec_unchecked(out))
}

/// Closed-form marginal field for a mixture of diagonal Gaussians: the
/// per-component fields weighted by the components' posterior
/// responsibilities at `x_t = x`.
pub fn oracle_mixture_field(
    components: &[GaussianFit],
    weights: &[f64],
    path_cfg: &PathConfig,
    x: &DenseVec,
    t: f64,
) -> Result<DenseVec> {
    if components.is_empty() || components.len() != weights.len() {
        return Err(invalid("need one weight per mixture component"));
    }
    let a = path_cfg.prior_coef(t);
    let mut log_r = Vec::with_capacity(components.len());
    let mut fields = Vec::with_capacity(components.len());
    for (g, &w) in components.iter().zip(weights) {
        let diag = g
            .diagonal()
            .ok_or_else(|| invalid("mixture components must have diagonal covariance"))?;
        let mut lp = w.ln();
        for i in 0..x.dim() {
            let s2 = a * a + t * t * diag[i];
            let r = x[i] - t * g.mean[i];
            lp += -0.5 * (r * r / s2 + s2.ln());
        }
        log_r.push(lp);
        fields.push(oracle_gaussian_field(g, path_cfg, x, t)?);
    }
    let max = log_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NumericalUnderflow("all mixture responsibilities vanish".into()));
    }
    let r: Vec<f64> = log_r.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = r.iter().sum();
    let mut out = vec![0.0; x.dim()];
    for (ri, f) in r.iter().zip(&fields) {
        for (o, v) in out.iter_mut().zip(f.iter()) {
            *o += ri / total * v;
        }
    }
    Ok(DenseVec::from_vec_unchecked(out))
}

/// A target density `p1`, possibly unnormalised.
pub trait TargetDensity: Sync {
    fn dim(&self) -> usize;
    /// `log p1(x1)`; `−∞` outside the support.
    fn log_density(&self, x1: &[f64]) -> f64;
}

/// Gaussian density with a full (positive-definite) covariance.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: Vec<f64>,
    precision: DenseMat,
}

impl GaussianDensity {
    pub fn new(fit: &GaussianFit) -> Result<Self> {
        fit.validate()?;
        let (vals, vecs) = symmetric_eigen(&fit.covariance)?;
        if vals.iter().any(|&v| v <= 0.0) {
            return Err(invalid("density needs a positive-definite covariance"));
        }
        let d = fit.dim();
        let mut precision = DenseMat::zeros(d, d);
        for (k, lam) in vals.iter().enumerate() {
            for r in 0..d {
                for c in 0..d {
                    let v = precision.get(r, c) + vecs.get(r, k) * vecs.get(c, k) / lam;
                    precision.set(r, c, v);
                }
            }
        }
        Ok(Self {
            mean: fit.mean.as_slice().to_vec(),
            precision,
        })
    }
}

impl TargetDensity for GaussianDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x1: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        for r in 0..d {
            let dr = x1[r] - self.mean[r];
            for c in 0..d {
                q += dr * self.precision.get(r, c) * (x1[c] - self.mean[c]);
            }
        }
        -0.5 * q
    }
}

/// Weighted mixture of Gaussian densities.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    components: Vec<GaussianDensity>,
    /// `log w_k − ½ log det Σ_k`
    offsets: Vec<f64>,
}

impl MixtureDensity {
    pub fn new(components: &[GaussianFit], weights: &[f64]) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(invalid("need one weight per mixture component"));
        }
        let mut dens = Vec::new();
        let mut offsets = Vec::new();
        for (g, &w) in components.iter().zip(weights) {
            let (vals, _) = symmetric_eigen(&g.covariance)?;
            let logdet: f64 = vals.iter().map(|v| v.ln()).sum();
            dens.push(GaussianDensity::new(g)?);
            offsets.push(w.ln() - 0.5 * logdet);
        }
        Ok(Self {
            components: dens,
            offsets,
        })
    }
}

impl TargetDensity for MixtureDensity {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn log_density(&self, x1: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.offsets)
            .map(|(g, o)| g.log_density(x1) + o)
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return f64::NEG_INFINITY;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }
}

/// All mass at one point.
#[derive(Debug, Clone)]
pub struct PointMass {
    pub at: Vec<f64>,
}

impl TargetDensity for PointMass {
    fn dim(&self) -> usize {
        self.at.len()
    }

    fn log_density(&self, x1: &[f64]) -> f64 {
        if x1 == self.at.as_slice() {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// How the brute-force oracle integrates over `x0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BruteMethod {
    /// Tensor-product trapezoid grid on `[−half_width, half_width]^d`
    /// (`d ≤ 2`).
    Grid { half_width: f64, points_per_dim: usize },
    /// Self-normalised importance sampling with `x0 ~ N(0, I)`.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for BruteMethod {
    fn default() -> Self {
        BruteMethod::Grid {
            half_width: 9.0,
            points_per_dim: 901,
        }
    }
}

/// `E[v_t | x_t = x]` by direct integration over the prior draw:
/// weight `∝ p0(x0)·p1((x − a_t·x0)/t)`, value `x1 − (1−σ_min)·x0`.
pub fn oracle_brute_field(
    target: &dyn TargetDensity,
    path_cfg: &PathConfig,
    x: &DenseVec,
    t: f64,
    method: BruteMethod,
) -> Result<DenseVec> {
    let d = x.dim();
    if target.dim() != d {
        return Err(invalid("oracle_brute_field: dimension mismatch"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid(
            "oracle_brute_field: t must be in (0, 1]; at t = 0 x_t determines x0, not x1",
        ));
    }
    let a = path_cfg.prior_coef(t);
    let b = path_cfg.velocity_prior_coef();
    let mut x1 = vec![0.0; d];

    // log-sum-exp accumulation, rescaled whenever a larger log-weight shows up
    let mut max_lw = f64::NEG_INFINITY;
    let mut wsum = 0.0;
    let mut vsum = vec![0.0; d];
    let mut visit = |x0: &[f64], log_prior: f64| {
        for i in 0..d {
            x1[i] = (x[i] - a * x0[i]) / t;
        }
        let lw = log_prior + target.log_density(&x1);
        if lw == f64::NEG_INFINITY {
            return;
        }
        if lw > max_lw {
            let rescale = (max_lw - lw).exp();
            wsum *= rescale;
            vsum.iter_mut().for_each(|v| *v *= rescale);
            max_lw = lw;
        }
        let w = (lw - max_lw).exp();
        wsum += w;
        for i in 0..d {
            vsum[i] += w * (x1[i] - b * x0[i]);
        }
    };

    match method {
        BruteMethod::Grid {
            half_width,
            points_per_dim,
        } => {
            if d > 2 {
                return Err(invalid("grid brute-force oracle supports d <= 2"));
            }
            if points_per_dim < 2 || half_width <= 0.0 {
                return Err(invalid("grid needs >= 2 points and a positive half-width"));
            }
            let h = 2.0 * half_width / (points_per_dim - 1) as f64;
            let node = |k: usize| -half_width + k as f64 * h;
            let mut x0 = vec![0.0; d];
            if d == 1 {
                for k in 0..points_per_dim {
                    x0[0] = node(k);
                    visit(&x0, -0.5 * x0[0] * x0[0]);
                }
            } else {
                for k in 0..points_per_dim {
                    for l in 0..points_per_dim {
                        x0[0] = node(k);
                        x0[1] = node(l);
                        visit(&x0, -0.5 * (x0[0] * x0[0] + x0[1] * x0[1]));
                    }
                }
            }
        }
        BruteMethod::MonteCarlo { samples, seed } => {
            let mut rng = RngStream::new(seed, 0);
            let mut x0 = vec![0.0; d];
            for _ in 0..samples {
                rng.fill_standard_normal(&mut x0);
                visit(&x0, 0.0);
            }
        }
    }

    if !(wsum > 0.0) || !max_lw.is_finite() {
        return Err(Error::NumericalUnderflow(format!(
            "all integration weights vanish at t = {t}"
        )));
    }
    DenseVec::new(vsum.iter().map(|v| v / wsum).collect())
}

/// Held-out conditional regression loss on `n` fresh path samples.
pub fn heldout_loss(
    net: &VectorFieldNet,
    pipeline: &Pipeline,
    path_cfg: &PathConfig,
    n: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let batch = heldout_batch(pipeline, path_cfg, n, rng)?;
    net.loss(&batch)
}

pub(crate) fn heldout_batch(
    pipeline: &Pipeline,
    path_cfg: &PathConfig,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<PathSample>> {
    (0..n)
        .map(|_| {
            let (z1, c) = pipeline.draw_latent_pair(rng)?;
            sample_path(&z1, Some(c), path_cfg, rng)
        })
        .collect()
}

/// Shared inputs of a sweep.
pub struct SweepContext<'a> {
    pub net: &'a VectorFieldNet,
    pub pipeline: &'a Pipeline,
    pub path_cfg: PathConfig,
    /// Chains per setting; chain `i` is conditioned on class `i mod K`.
    pub n: usize,
    pub seed: u64,
}

impl SweepContext<'_> {
    fn conds(&self) -> Vec<ConditionId> {
        let k = self.pipeline.num_classes();
        (0..self.n).map(|i| ConditionId(i % k)).collect()
    }

    fn mean_loss(&self) -> Result<f64> {
        let mut rng = RngStream::new(self.seed, HELDOUT_STREAM);
        heldout_loss(self.net, self.pipeline, &self.path_cfg, self.n, &mut rng)
    }

    /// Decoded native-space samples and their conditions for one setting.
    pub fn generate(&self, g: &GuidanceConfig, solver: &SolverConfig) -> Result<(Vec<DenseVec>, Vec<ConditionId>)> {
        let conds = self.conds();
        let rng = RngStream::new(self.seed, SAMPLE_STREAM);
        let latents = sample_latents(self.net, &conds, g, solver, &rng, false)?;
        Ok((self.pipeline.latent_rows_to_native(&latents.terminal)?, conds))
    }

    fn report(&self, g: &GuidanceConfig, solver: &SolverConfig, mean_loss: f64) -> Result<MetricReport> {
        let (samples, conds) = self.generate(g, solver)?;
        let spec = self.pipeline.spec();
        Ok(MetricReport {
            frechet: class_frechet(&samples, &conds, self.pipeline)?,
            mode_accuracy: mode_accuracy(&samples, &conds, spec)?,
            mean_loss,
            n_samples: self.n,
            w: g.w,
            num_steps: solver.num_steps,
            sigma_min: self.path_cfg.sigma_min,
            seed: self.seed,
        })
    }

    /// One report at the given settings.
    pub fn single(&self, g: &GuidanceConfig, solver: &SolverConfig) -> Result<MetricReport> {
        self.report(g, solver, self.mean_loss()?)
    }
}

/// Mean over classes of the Fréchet distance between the Gaussian fit of
/// the generated class samples and the true class Gaussian.
pub fn class_frechet(samples: &[DenseVec], conds: &[ConditionId], pipeline: &Pipeline) -> Result<f64> {
    let targets = pipeline.native_class_targets().ok_or_else(|| {
        Error::UnsupportedMetric("class Fréchet distance needs a gaussian-mixture dataset".into())
    })?;
    let per_class = per_class_frechet(samples, conds, &targets)?;
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Fréchet distance of each class's generated samples to `targets[class]`.
pub fn per_class_frechet(samples: &[DenseVec], conds: &[ConditionId], targets: &[GaussianFit]) -> Result<Vec<f64>> {
    targets
        .iter()
        .enumerate()
        .map(|(k, target)| {
            let class: Vec<DenseVec> = samples
                .iter()
                .zip(conds)
                .filter(|(_, c)| c.index() == k)
                .map(|(s, _)| s.clone())
                .collect();
            frechet_gaussian(&fit_gaussian(&class)?, target)
        })
        .collect()
}

/// One report per guidance scale at a fixed step count; every setting uses
/// the same prior draws.
pub fn run_guidance_sweep(ctx: &SweepContext<'_>, w_list: &[f64], num_steps: usize) -> Result<Vec<MetricReport>> {
    let solver = SolverConfig::euler(num_steps);
    let loss = ctx.mean_loss()?;
    w_list
        .iter()
        .map(|&w| ctx.report(&GuidanceConfig { w }, &solver, loss))
        .collect()
}

/// One report per step count at a fixed guidance scale; every setting uses
/// the same prior draws.
pub fn run_step_sweep(ctx: &SweepContext<'_>, steps_list: &[usize], w: f64) -> Result<Vec<MetricReport>> {
    let g = GuidanceConfig { w };
    let loss = ctx.mean_loss()?;
    steps_list
        .iter()
        .map(|&n| ctx.report(&g, &SolverConfig::euler(n), loss))
        .collect()
}
