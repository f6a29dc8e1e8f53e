//! Flow-matching regression with AdamW and per-sample condition dropout.

use serde::{Deserialize, Serialize};

use crate::datasets::ConditionId;
use crate::error::{invalid, Error, Result};
use crate::evaluation::oracle_gaussian_field;
use crate::fm_path::{sample_path, PathConfig, PathSample};
use crate::numerics::RngStream;
use crate::pipeline::Pipeline;
use crate::vector_field::{GradientBundle, NetConfig, VectorFieldNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub num_steps: u64,
    pub cond_dropout_prob: f64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 64,
            num_steps: 20_000,
            cond_dropout_prob: 0.10,
            eval_every: 5_000,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning_rate must be finite and >= 0"));
        }
        // 1.0 is admitted as the fully unconditional degenerate case
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(invalid("cond_dropout_prob must be in [0, 1]"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(invalid("betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("eps must be > 0 and weight_decay >= 0"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be >= 1"));
        }
        Ok(())
    }
}

/// First/second moment estimates, shaped like the net's parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(net: &VectorFieldNet) -> Self {
        let zeros: Vec<Vec<f64>> = net.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    /// Decoupled weight decay followed by the bias-corrected Adam step:
    /// `p ← p·(1 − lr·λ)` (decayed arrays only), then
    /// `p ← p − lr · m̂ / (√v̂ + ε)`.
    pub fn apply(&mut self, net: &mut VectorFieldNet, grads: &GradientBundle, cfg: &TrainConfig) -> Result<()> {
        let gslices = grads.slices();
        let mut params = net.param_slices_mut();
        if params.len() != gslices.len() || params.len() != self.first.len() {
            return Err(invalid("optimizer state does not match the network"));
        }
        self.step += 1;
        let [b1, b2] = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = cfg.learning_rate;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&gslices)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let decay = if p.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            for i in 0..p.values.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] = p.values[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Draws `cfg.batch_size` training tuples: `(z1, c)` from the pipeline,
/// `c` replaced by the null condition with probability
/// `cfg.cond_dropout_prob`, then a path sample.
pub fn build_batch(
    pipeline: &Pipeline,
    path_cfg: &PathConfig,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<PathSample>> {
    (0..cfg.batch_size)
        .map(|_| {
            let (z1, c) = pipeline.draw_latent_pair(rng)?;
            let cond = if rng.bernoulli(cfg.cond_dropout_prob) {
                None
            } else {
                Some(c)
            };
            sample_path(&z1, cond, path_cfg, rng)
        })
        .collect()
}

fn check_dims(net: &VectorFieldNet, pipeline: &Pipeline) -> Result<()> {
    let nc: &NetConfig = net.config();
    if nc.input_dim != pipeline.latent_dim() || nc.num_classes != pipeline.num_classes() {
        return Err(invalid(format!(
            "net expects dim {} / {} classes, pipeline provides dim {} / {} classes",
            nc.input_dim,
            nc.num_classes,
            pipeline.latent_dim(),
            pipeline.num_classes()
        )));
    }
    Ok(())
}

/// One optimizer step. Returns the batch loss before the update.
pub fn train_step(
    net: &mut VectorFieldNet,
    opt: &mut AdamWState,
    pipeline: &Pipeline,
    path_cfg: &PathConfig,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    check_dims(net, pipeline)?;
    let batch = build_batch(pipeline, path_cfg, cfg, rng)?;
    let (loss, grads) = net.loss_and_grad(&batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: opt.step + 1 });
    }
    opt.apply(net, &grads, cfg)?;
    Ok(loss)
}

/// Training loop state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: VectorFieldNet,
    pub opt: AdamWState,
    pub pipeline: Pipeline,
    pub path_cfg: PathConfig,
    pub cfg: TrainConfig,
    pub rng: RngStream,
    /// Condition draws seen so far and how many were nulled.
    pub cond_draws: u64,
    pub null_draws: u64,
}

/// Stream ids under the training seed.
pub const INIT_STREAM: u64 = 1;
pub const BATCH_STREAM: u64 = 2;

impl Trainer {
    /// Fresh net initialised from `cfg.seed`.
    pub fn new(net_cfg: NetConfig, pipeline: Pipeline, path_cfg: PathConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        path_cfg.validate()?;
        let net = VectorFieldNet::init(net_cfg, &mut RngStream::new(cfg.seed, INIT_STREAM))?;
        check_dims(&net, &pipeline)?;
        Ok(Self {
            opt: AdamWState::new(&net),
            rng: RngStream::new(cfg.seed, BATCH_STREAM),
            net,
            pipeline,
            path_cfg,
            cfg,
            cond_draws: 0,
            null_draws: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn step(&mut self) -> Result<f64> {
        let batch = build_batch(&self.pipeline, &self.path_cfg, &self.cfg, &mut self.rng)?;
        self.cond_draws += batch.len() as u64;
        self.null_draws += batch.iter().filter(|s| s.cond.is_none()).count() as u64;
        let (loss, grads) = self.net.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.opt.step + 1,
            });
        }
        self.opt.apply(&mut self.net, &grads, &self.cfg)?;
        if !self.net.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.opt.step,
            });
        }
        Ok(loss)
    }

    /// Runs `steps` steps, returning the per-step losses.
    pub fn run(&mut self, steps: u64) -> Result<Vec<f64>> {
        (0..steps).map(|_| self.step()).collect()
    }

    pub fn null_fraction(&self) -> f64 {
        if self.cond_draws == 0 {
            0.0
        } else {
            self.null_draws as f64 / self.cond_draws as f64
        }
    }
}

/// Monte-Carlo estimate of the irreducible regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorEstimate {
    pub mean: f64,
    /// Standard error of `mean`.
    pub std_err: f64,
    pub num_mc: usize,
}

/// `E‖v_t − E[v_t | x_t, t, c]‖²` under the conditional training
/// distribution, with the conditional expectation given by the exact
/// marginal field of each class's latent Gaussian.
pub fn loss_floor(pipeline: &Pipeline, path_cfg: &PathConfig, num_mc: usize, rng: &mut RngStream) -> Result<FloorEstimate> {
    if num_mc < 1000 {
        return Err(invalid("loss_floor needs num_mc >= 1000"));
    }
    let targets = pipeline.latent_class_targets().ok_or_else(|| {
        Error::UnsupportedMetric("loss_floor needs a gaussian-mixture dataset".into())
    })?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..num_mc {
        let (z1, c): (_, ConditionId) = pipeline.draw_latent_pair(rng)?;
        let s = sample_path(&z1, Some(c), path_cfg, rng)?;
        let m = oracle_gaussian_field(&targets[c.index()], path_cfg, &s.x_t, s.t)?;
        let r = s.v_t.sub(&m)?.norm_sq();
        sum += r;
        sum_sq += r * r;
    }
    let n = num_mc as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean) / (n - 1.0);
    Ok(FloorEstimate {
        mean,
        std_err: (var / n).sqrt(),
        num_mc,
    })
}
