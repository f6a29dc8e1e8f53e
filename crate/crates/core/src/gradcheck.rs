//! Central finite-difference check of [`VectorFieldNet::loss_and_grad`].

use crate::datasets::ConditionId;
use crate::error::Result;
use crate::fm_path::{sample_path, PathConfig, PathSample};
use crate::numerics::{gaussian_sample, RngStream};
use crate::vector_field::{Activation, NetConfig, VectorFieldNet};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − fd| / (|analytic| + |fd| + 1e-8)`
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares every gradient coordinate with `(L(θ+h) − L(θ−h)) / 2h`.
/// `corrupt` perturbs the analytic gradient first (self-test hook).
pub fn gradient_check(net: &VectorFieldNet, batch: &[PathSample], h: f64, corrupt: bool) -> Result<GradCheckReport> {
    let (_, grads) = net.loss_and_grad(batch)?;
    let mut analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    if corrupt {
        analytic[0][0] += 1e-3 * (1.0 + analytic[0][0].abs());
    }
    let mut probe = net.clone();
    let names: Vec<String> = probe.param_slices_mut().into_iter().map(|s| s.name).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    for (a, grad) in analytic.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let orig = probe.param_slices()[a][i];
            probe.param_slices_mut()[a].values[i] = orig + h;
            let plus = probe.loss(batch)?;
            probe.param_slices_mut()[a].values[i] = orig - h;
            let minus = probe.loss(batch)?;
            probe.param_slices_mut()[a].values[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let rel = (g - fd).abs() / (g.abs() + fd.abs() + 1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = names[a].clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// A small random net and batch for gradient checking. Every parameter
/// (biases and embeddings included) is drawn non-trivially so no gradient
/// coordinate is structurally tiny.
pub fn random_problem(seed: u64, batch_size: usize) -> Result<(VectorFieldNet, Vec<PathSample>)> {
    let cfg = NetConfig {
        input_dim: 2,
        hidden_dim: 8,
        num_hidden_layers: 2,
        time_embed_freqs: 2,
        cond_embed_dim: 3,
        num_classes: 3,
        activation: Activation::Tanh,
    };
    let mut rng = RngStream::new(seed, 0);
    let mut net = VectorFieldNet::init(cfg, &mut rng)?;
    for slot in net.param_slices_mut() {
        if !slot.name.ends_with("weight") {
            for v in slot.values.iter_mut() {
                *v = 0.5 * rng.standard_normal();
            }
        }
    }
    let path_cfg = PathConfig::default();
    let batch = (0..batch_size)
        .map(|i| {
            let x1 = gaussian_sample(&mut rng, 2)?.scale(2.0);
            // one null row in every four
            let cond = (i % 4 != 3).then_some(ConditionId(i % 3));
            sample_path(&x1, cond, &path_cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((net, batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (net, batch) = random_problem(seed, 6).unwrap();
            let r = gradient_check(&net, &batch, 1e-5, false).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
            assert_eq!(r.coordinates, net.num_params());
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (net, batch) = random_problem(1, 6).unwrap();
        let r = gradient_check(&net, &batch, 1e-5, true).unwrap();
        assert!(r.max_rel_error > 1e-5);
        assert_eq!(r.worst_param, "layer0.weight");
    }
}
