//! Euler (and midpoint) integration of the learned flow with
//! classifier-free guidance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::ConditionId;
use crate::error::{invalid, Error, Result};
use crate::latent_codec::LatentCodec;
use crate::numerics::{DenseVec, RngStream};
use crate::vector_field::VectorFieldNet;

/// Chains integrated together through one batched network call.
const CHAIN_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub num_steps: usize,
    pub scheme: Scheme,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            num_steps: 200,
            scheme: Scheme::Euler,
        }
    }
}

impl SolverConfig {
    pub fn euler(num_steps: usize) -> Self {
        Self {
            num_steps,
            scheme: Scheme::Euler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(invalid("solver needs num_steps >= 1"));
        }
        Ok(())
    }

    /// `t_k = k / N`
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.num_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub w: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w: 3.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w.is_finite() && self.w >= 0.0) {
            return Err(invalid(format!("guidance scale must be finite and >= 0, got {}", self.w)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DenseVec>,
    pub times: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &DenseVec {
        self.states.last().expect("trajectory has at least one state")
    }
}

/// `w·u(x,t,c) + (1−w)·u(x,t,∅)`. With `w == 1` the unconditional branch
/// is not evaluated.
pub fn guided_field(
    net: &VectorFieldNet,
    x: &DenseVec,
    t: f64,
    cond: ConditionId,
    g: &GuidanceConfig,
) -> Result<DenseVec> {
    let out = guided_field_rows(net, x.as_slice(), t, &[cond], g.w)?;
    Ok(DenseVec::from_vec_unchecked(out))
}

/// Guided field for a block of rows sharing `t`, one condition per row.
pub fn guided_field_rows(
    net: &VectorFieldNet,
    xs: &[f64],
    t: f64,
    conds: &[ConditionId],
    w: f64,
) -> Result<Vec<f64>> {
    let ts = vec![t; conds.len()];
    let cond_opts: Vec<Option<ConditionId>> = conds.iter().map(|&c| Some(c)).collect();
    let mut out = net.forward_batch(xs, &ts, &cond_opts)?;
    if w != 1.0 {
        let uncond = net.forward_batch(xs, &ts, &vec![None; conds.len()])?;
        for (c, u) in out.iter_mut().zip(&uncond) {
            *c = w * *c + (1.0 - w) * u;
        }
    }
    Ok(out)
}

fn check_finite(v: &[f64], step: usize, t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationDiverged { step, t })
    }
}

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `1` on the uniform grid.
pub fn integrate<F>(mut field: F, x0: &DenseVec, solver: &SolverConfig) -> Result<Trajectory>
where
    F: FnMut(&DenseVec, f64) -> Result<DenseVec>,
{
    solver.validate()?;
    let mut rows = |xs: &[f64], t: f64| -> Result<Vec<f64>> {
        let v = field(&DenseVec::from_vec_unchecked(xs.to_vec()), t)?;
        if v.dim() != xs.len() {
            return Err(invalid("field output dimension differs from state"));
        }
        Ok(v.into_vec())
    };
    let (_, states) = integrate_rows(&mut rows, x0.as_slice().to_vec(), solver, true)?;
    let states = states.expect("trajectory requested");
    Ok(Trajectory {
        states: states.into_iter().map(DenseVec::from_vec_unchecked).collect(),
        times: (0..=solver.num_steps).map(|k| solver.time(k)).collect(),
    })
}

/// Row-batched integration. `field` maps a flat block of states at time `t`
/// to velocities of the same shape. Returns the terminal block and, when
/// `keep` is set, every intermediate block (`N + 1` of them).
#[allow(clippy::type_complexity)]
pub fn integrate_rows<F>(
    field: &mut F,
    mut x: Vec<f64>,
    solver: &SolverConfig,
    keep: bool,
) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    solver.validate()?;
    let n = solver.num_steps;
    let h = 1.0 / n as f64;
    let mut states = keep.then(|| {
        let mut s = Vec::with_capacity(n + 1);
        s.push(x.clone());
        s
    });
    for k in 0..n {
        let t = solver.time(k);
        let v = field(&x, t)?;
        check_finite(&v, k, t)?;
        match solver.scheme {
            Scheme::Euler => {
                for (xi, vi) in x.iter_mut().zip(&v) {
                    *xi += h * vi;
                }
            }
            Scheme::Midpoint => {
                let mid: Vec<f64> = x.iter().zip(&v).map(|(xi, vi)| xi + 0.5 * h * vi).collect();
                let vm = field(&mid, t + 0.5 * h)?;
                check_finite(&vm, k, t + 0.5 * h)?;
                for (xi, vi) in x.iter_mut().zip(&vm) {
                    *xi += h * vi;
                }
            }
        }
        check_finite(&x, k, t)?;
        if let Some(s) = states.as_mut() {
            s.push(x.clone());
        }
    }
    Ok((x, states))
}

/// Prior draws for chains `0..n`; chain `i` uses `rng.child(i)`, so the
/// draw for a chain does not depend on `n` or on the other chains.
pub fn prior_draws(rng: &RngStream, n: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dim];
    for (i, row) in out.chunks_exact_mut(dim).enumerate() {
        rng.child(i as u64).fill_standard_normal(row);
    }
    out
}

/// Latent samples from a batch of chains, one condition per chain.
#[derive(Debug, Clone)]
pub struct LatentSamples {
    pub dim: usize,
    /// `n × dim` terminal states
    pub terminal: Vec<f64>,
    /// Per chain, `N + 1` states of `dim` values each (when requested).
    pub trajectories: Option<Vec<Vec<f64>>>,
}

/// Integrates the guided field for every chain. Chains run in parallel
/// blocks and are returned in chain order.
pub fn sample_latents(
    net: &VectorFieldNet,
    conds: &[ConditionId],
    g: &GuidanceConfig,
    solver: &SolverConfig,
    rng: &RngStream,
    keep_trajectories: bool,
) -> Result<LatentSamples> {
    g.validate()?;
    solver.validate()?;
    let d = net.config().input_dim;
    let prior = prior_draws(rng, conds.len(), d);
    let blocks: Vec<Result<(Vec<f64>, Option<Vec<Vec<f64>>>)>> = prior
        .par_chunks(CHAIN_BLOCK * d)
        .zip(conds.par_chunks(CHAIN_BLOCK))
        .map(|(x0, cs)| {
            let mut field = |xs: &[f64], t: f64| guided_field_rows(net, xs, t, cs, g.w);
            integrate_rows(&mut field, x0.to_vec(), solver, keep_trajectories)
        })
        .collect();
    let mut terminal = Vec::with_capacity(conds.len() * d);
    let mut trajectories = keep_trajectories.then(Vec::new);
    for block in blocks {
        let (x, states) = block?;
        let rows = x.len() / d;
        terminal.extend(x);
        if let (Some(all), Some(states)) = (trajectories.as_mut(), states) {
            for r in 0..rows {
                all.push(
                    states
                        .iter()
                        .flat_map(|s| s[r * d..(r + 1) * d].iter().copied())
                        .collect(),
                );
            }
        }
    }
    Ok(LatentSamples {
        dim: d,
        terminal,
        trajectories,
    })
}

/// `n` samples for one condition, integrated in latent space and decoded
/// once at `t = 1`.
pub fn sample(
    net: &VectorFieldNet,
    cond: ConditionId,
    g: &GuidanceConfig,
    solver: &SolverConfig,
    codec: &LatentCodec,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<DenseVec>> {
    if n == 0 {
        return Err(invalid("sample: n must be >= 1"));
    }
    if codec.latent_dim() != net.config().input_dim {
        return Err(invalid("codec latent_dim does not match the network"));
    }
    let latents = sample_latents(net, &vec![cond; n], g, solver, rng, false)?;
    let decoded = codec.decode_rows(&latents.terminal)?;
    Ok(decoded
        .chunks_exact(codec.data_dim())
        .map(|r| DenseVec::from_vec_unchecked(r.to_vec()))
        .collect())
}
