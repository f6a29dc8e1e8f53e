//! Self-checks run by `oracle-check`: path identities, field oracles,
//! Euler order and gradient correctness.

use flowmatch::evaluation::{
    oracle_brute_field, oracle_gaussian_field, oracle_mixture_field, BruteMethod, GaussianDensity,
    MixtureDensity,
};
use flowmatch::fm_path::path_sample_at;
use flowmatch::gradcheck::{gradient_check, random_problem};
use flowmatch::numerics::gaussian_sample;
use flowmatch::sampler::integrate;
use flowmatch::{DenseMat, DenseVec, GaussianFit, PathConfig, Result, RngStream, SolverConfig};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: String,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{:<20} {}  value={:.6e}  tolerance: {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.value,
            self.tolerance
        )
    }
}

/// Worst relative error of `x_t + (1 − t)·v_t = x1 + σ_min·x0` over `n`
/// random path samples, plus exact endpoint checks at `t = 0` and `t = 1`.
pub fn path_identities(n: usize, seed: u64) -> Result<CheckOutcome> {
    let cfg = PathConfig::default();
    let mut rng = RngStream::new(seed, 0);
    let mut worst: f64 = 0.0;
    let mut endpoints_exact = true;
    for _ in 0..n {
        let x1 = gaussian_sample(&mut rng, 3)?.scale(3.0);
        let x0 = gaussian_sample(&mut rng, 3)?;
        let t = rng.uniform();
        let s = path_sample_at(x0.clone(), x1.clone(), t, None, &cfg)?;
        let lhs = s.x_t.add(&s.v_t.scale(1.0 - t))?;
        let rhs = x1.add(&x0.scale(cfg.sigma_min))?;
        let rel = lhs.sub(&rhs)?.norm() / rhs.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);

        let s0 = path_sample_at(x0.clone(), x1.clone(), 0.0, None, &cfg)?;
        let v_expect = x1.sub(&x0.scale(1.0 - cfg.sigma_min))?;
        let s1 = path_sample_at(x0.clone(), x1.clone(), 1.0, None, &cfg)?;
        let x_expect = x0.scale(cfg.sigma_min).add(&x1)?;
        endpoints_exact &= s0.x_t == x0 && s0.v_t == v_expect && s1.x_t == x_expect;
    }
    Ok(CheckOutcome {
        name: "path-identities",
        value: worst,
        tolerance: "relative error < 1e-12; endpoints exact".into(),
        passed: worst < 1e-12 && endpoints_exact,
    })
}

/// Evaluation points covering ±3 marginal standard deviations per axis
/// at each `t`, for an isotropic Gaussian target.
fn marginal_grid(target: &GaussianFit, path_cfg: &PathConfig, t: f64, per_axis: usize) -> Vec<DenseVec> {
    let var = target.covariance.get(0, 0);
    let a = path_cfg.prior_coef(t);
    let s = (a * a + t * t * var).sqrt();
    let offs: Vec<f64> = (0..per_axis)
        .map(|i| -3.0 + 6.0 * i as f64 / (per_axis - 1) as f64)
        .collect();
    let mut out = Vec::new();
    for &u in &offs {
        for &v in &offs {
            out.push(DenseVec::from_slice(&[t * target.mean[0] + u * s, t * target.mean[1] + v * s]).expect("finite"));
        }
    }
    out
}

pub const ORACLE_TIMES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Max-abs gap between the closed-form Gaussian field and the brute-force
/// conditional-expectation oracle on the ±3σ × t ∈ {0.1..0.9} grid.
pub fn gaussian_oracle_agreement(per_axis: usize) -> Result<CheckOutcome> {
    let target = GaussianFit {
        mean: DenseVec::from_slice(&[2.0, -1.0])?,
        covariance: DenseMat::diag(&[0.25, 0.25]),
    };
    let dens = GaussianDensity::new(&target)?;
    let cfg = PathConfig::default();
    let mut worst: f64 = 0.0;
    for &t in &ORACLE_TIMES {
        for x in marginal_grid(&target, &cfg, t, per_axis) {
            let closed = oracle_gaussian_field(&target, &cfg, &x, t)?;
            let brute = oracle_brute_field(&dens, &cfg, &x, t, BruteMethod::default())?;
            worst = worst.max(closed.sub(&brute)?.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
        }
    }
    Ok(CheckOutcome {
        name: "gaussian-oracle",
        value: worst,
        tolerance: "max-abs < 1e-3".into(),
        passed: worst < 1e-3,
    })
}

/// Same comparison for the default four-component mixture (unconditional
/// marginal field).
pub fn mixture_oracle_agreement(per_axis: usize) -> Result<CheckOutcome> {
    let spec = flowmatch::default_spec();
    let comps: Vec<GaussianFit> = spec
        .class_gaussians()
        .expect("gaussian mixture")
        .into_iter()
        .map(|(mean, covariance)| GaussianFit { mean, covariance })
        .collect();
    let weights = vec![1.0 / comps.len() as f64; comps.len()];
    let dens = MixtureDensity::new(&comps, &weights)?;
    let cfg = PathConfig::default();
    let mut worst: f64 = 0.0;
    for &t in &ORACLE_TIMES {
        for comp in &comps {
            for x in marginal_grid(comp, &cfg, t, per_axis) {
                let closed = oracle_mixture_field(&comps, &weights, &cfg, &x, t)?;
                let brute = oracle_brute_field(&dens, &cfg, &x, t, BruteMethod::default())?;
                worst = worst.max(closed.sub(&brute)?.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
            }
        }
    }
    Ok(CheckOutcome {
        name: "mixture-oracle",
        value: worst,
        tolerance: "max-abs < 1e-3".into(),
        passed: worst < 1e-3,
    })
}

pub const EULER_STEPS: [usize; 5] = [8, 16, 32, 64, 128];
pub const EULER_REFERENCE_STEPS: usize = 4096;

/// Terminal errors of Euler integration of the Gaussian oracle field
/// against an `N = 4096` reference, one per entry of [`EULER_STEPS`].
pub fn euler_errors() -> Result<Vec<f64>> {
    let target = GaussianFit {
        mean: DenseVec::from_slice(&[2.0, -1.0])?,
        covariance: DenseMat::diag(&[0.25, 0.25]),
    };
    let cfg = PathConfig::default();
    let mut rng = RngStream::new(11, 0);
    let starts: Vec<DenseVec> = (0..16).map(|_| gaussian_sample(&mut rng, 2)).collect::<Result<_>>()?;
    let field = |x: &DenseVec, t: f64| oracle_gaussian_field(&target, &cfg, x, t);
    let terminal = |x0: &DenseVec, n: usize| -> Result<DenseVec> {
        Ok(integrate(field, x0, &SolverConfig::euler(n))?.terminal().clone())
    };
    let refs: Vec<DenseVec> = starts
        .iter()
        .map(|x0| terminal(x0, EULER_REFERENCE_STEPS))
        .collect::<Result<_>>()?;
    EULER_STEPS
        .iter()
        .map(|&n| {
            let mut sum = 0.0;
            for (x0, r) in starts.iter().zip(&refs) {
                sum += terminal(x0, n)?.sub(r)?.norm();
            }
            Ok(sum / starts.len() as f64)
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Observed Euler order: minus the log-log slope of error against `N`.
pub fn euler_order() -> Result<CheckOutcome> {
    let errs = euler_errors()?;
    let ns: Vec<f64> = EULER_STEPS.iter().map(|&n| n as f64).collect();
    let order = -loglog_slope(&ns, &errs);
    Ok(CheckOutcome {
        name: "euler-order",
        value: order,
        tolerance: "order in [0.8, 1.2] over N = 8..128 vs N = 4096".into(),
        passed: (0.8..=1.2).contains(&order),
    })
}

/// Worst finite-difference relative error over 5 nets × 5 batches.
pub fn gradient_correctness(corrupt: bool) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for net_seed in 0..5u64 {
        let (net, _) = random_problem(net_seed, 1)?;
        for batch_seed in 0..5u64 {
            let (_, batch) = random_problem(1000 + 10 * net_seed + batch_seed, 8)?;
            let report = gradient_check(&net, &batch, 1e-5, corrupt)?;
            worst = worst.max(report.max_rel_error);
        }
    }
    Ok(CheckOutcome {
        name: "gradient-check",
        value: worst,
        tolerance: "relative error < 1e-5 (central differences, h = 1e-5)".into(),
        passed: worst < 1e-5,
    })
}

/// Every check, in report order. `corrupt_gradient` is the fault hook.
pub fn run_all(corrupt_gradient: bool) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        path_identities(10_000, 1)?,
        gaussian_oracle_agreement(7)?,
        mixture_oracle_agreement(3)?,
        euler_order()?,
        gradient_correctness(corrupt_gradient)?,
    ])
}
