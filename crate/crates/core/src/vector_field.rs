//! The conditioned velocity network `u(x, t, c)`.
//!
//! A tanh MLP whose input is the concatenation
//! `[x, time_features(t), embedding[c]]`. Row `K` of the embedding table is
//! the learned null (unconditional) token. Gradients are computed by a
//! hand-written reverse pass over the batched forward.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{ConditionId, MAX_CLASSES};
use crate::error::{invalid, Result};
use crate::fm_path::PathSample;
use crate::numerics::{gemm, DenseMat, DenseVec, RngStream};

/// Samples per gradient chunk. Chunks are reduced in index order, so the
/// result does not depend on how many threads ran them.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    pub time_embed_freqs: usize,
    pub cond_embed_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dim: 128,
            num_hidden_layers: 3,
            time_embed_freqs: 8,
            cond_embed_dim: 16,
            num_classes: 4,
            activation: Activation::Tanh,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.hidden_dim == 0
            || self.num_hidden_layers == 0
            || self.time_embed_freqs == 0
            || self.cond_embed_dim == 0
        {
            return Err(invalid("all network dimensions must be >= 1"));
        }
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(invalid(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn time_feature_dim(&self) -> usize {
        1 + 2 * self.time_embed_freqs
    }

    /// Width of the concatenated network input.
    pub fn concat_dim(&self) -> usize {
        self.input_dim + self.time_feature_dim() + self.cond_embed_dim
    }

    /// `(out, in)` shape of every dense layer, first to last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.hidden_dim, self.concat_dim())];
        for _ in 1..self.num_hidden_layers {
            shapes.push((self.hidden_dim, self.hidden_dim));
        }
        shapes.push((self.input_dim, self.hidden_dim));
        shapes
    }

    /// Embedding row used for `cond`; `None` selects the null row `K`.
    pub fn embedding_row(&self, cond: Option<ConditionId>) -> Result<usize> {
        match cond {
            None => Ok(self.num_classes),
            Some(c) if c.index() < self.num_classes => Ok(c.index()),
            Some(c) => Err(invalid(format!(
                "condition {} out of range for {} classes",
                c.index(),
                self.num_classes
            ))),
        }
    }
}

/// `[t, sin(2^0 πt), cos(2^0 πt), …, sin(2^{F−1} πt), cos(2^{F−1} πt)]`
pub fn time_features(t: f64, num_freqs: usize) -> DenseVec {
    let mut out = vec![0.0; 1 + 2 * num_freqs];
    write_time_features(t, &mut out);
    DenseVec::from_vec_unchecked(out)
}

fn write_time_features(t: f64, out: &mut [f64]) {
    out[0] = t;
    let mut freq = std::f64::consts::PI;
    for pair in out[1..].chunks_exact_mut(2) {
        let (s, c) = (freq * t).sin_cos();
        pair[0] = s;
        pair[1] = c;
        freq *= 2.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DenseMat,
    pub bias: DenseVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldNet {
    config: NetConfig,
    pub layers: Vec<Layer>,
    /// `(K + 1) × cond_embed_dim`; row `K` is the null token.
    pub embedding: DenseMat,
}

/// Gradients with the same layout as [`VectorFieldNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<Layer>,
    pub embedding: DenseMat,
}

/// One named parameter array, flattened.
pub struct ParamSlice<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub decay: bool,
}

fn zero_layers(config: &NetConfig) -> Vec<Layer> {
    config
        .layer_shapes()
        .into_iter()
        .map(|(o, i)| Layer {
            weight: DenseMat::zeros(o, i),
            bias: DenseVec::zeros(o),
        })
        .collect()
}

impl GradientBundle {
    pub fn zeros(config: &NetConfig) -> Self {
        Self {
            layers: zero_layers(config),
            embedding: DenseMat::zeros(config.num_classes + 1, config.cond_embed_dim),
        }
    }

    /// Flattened arrays in canonical parameter order (see
    /// [`VectorFieldNet::param_slices_mut`]).
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        let split = (self.embedding.rows() - 1) * self.embedding.cols();
        let (cls, null) = self.embedding.as_slice().split_at(split);
        out.push(cls);
        out.push(null);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        let split = (self.embedding.rows() - 1) * self.embedding.cols();
        let (cls, null) = self.embedding.as_mut_slice().split_at_mut(split);
        out.push(cls);
        out.push(null);
        out
    }

    fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Activations kept from a batched forward pass.
struct ForwardTrace {
    batch: usize,
    /// `batch × concat_dim`
    input: Vec<f64>,
    /// Post-activation output of each hidden layer, `batch × hidden_dim`.
    hidden: Vec<Vec<f64>>,
    /// `batch × input_dim`
    output: Vec<f64>,
}

impl VectorFieldNet {
    /// Weights `N(0, 1/fan_in)`, biases 0, embedding rows `N(0, 0.02²)`.
    pub fn init(config: NetConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut layers = zero_layers(&config);
        for l in &mut layers {
            let sd = 1.0 / (l.weight.cols() as f64).sqrt();
            let w = l.weight.as_mut_slice();
            rng.fill_standard_normal(w);
            w.iter_mut().for_each(|v| *v *= sd);
        }
        let mut embedding = DenseMat::zeros(config.num_classes + 1, config.cond_embed_dim);
        rng.fill_standard_normal(embedding.as_mut_slice());
        embedding.as_mut_slice().iter_mut().for_each(|v| *v *= 0.02);
        Ok(Self {
            config,
            layers,
            embedding,
        })
    }

    /// All parameters zero.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            layers: zero_layers(&config),
            embedding: DenseMat::zeros(config.num_classes + 1, config.cond_embed_dim),
            config,
        })
    }

    /// Rebuilds a net from parameter arrays in canonical order.
    pub fn from_param_arrays(config: NetConfig, arrays: &[Vec<f64>]) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut slots = net.param_slices_mut();
        if slots.len() != arrays.len() {
            return Err(invalid(format!(
                "expected {} parameter arrays, got {}",
                slots.len(),
                arrays.len()
            )));
        }
        for (slot, src) in slots.iter_mut().zip(arrays) {
            if slot.values.len() != src.len() {
                return Err(invalid(format!(
                    "parameter {} has length {}, expected {}",
                    slot.name,
                    src.len(),
                    slot.values.len()
                )));
            }
            slot.values.copy_from_slice(src);
        }
        drop(slots);
        if !net.is_finite() {
            return Err(invalid("non-finite parameter"));
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Parameter arrays in canonical order: per layer `weight`, `bias`;
    /// then class embedding rows `0..K`; then the null row `K`.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        let split = self.config.num_classes * self.config.cond_embed_dim;
        let (cls, null) = self.embedding.as_slice().split_at(split);
        out.push(cls);
        out.push(null);
        out
    }

    /// Mutable view of [`VectorFieldNet::param_slices`] with names and
    /// weight-decay flags. The null embedding row is exempt from decay.
    pub fn param_slices_mut(&mut self) -> Vec<ParamSlice<'_>> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push(ParamSlice {
                name: format!("layer{i}.weight"),
                values: l.weight.as_mut_slice(),
                decay: true,
            });
            out.push(ParamSlice {
                name: format!("layer{i}.bias"),
                values: l.bias.as_mut_slice(),
                decay: true,
            });
        }
        let split = self.config.num_classes * self.config.cond_embed_dim;
        let (cls, null) = self.embedding.as_mut_slice().split_at_mut(split);
        out.push(ParamSlice {
            name: "embedding.classes".into(),
            values: cls,
            decay: true,
        });
        out.push(ParamSlice {
            name: "embedding.null".into(),
            values: null,
            decay: false,
        });
        out
    }

    /// `u(x, t, cond)` for a single point.
    pub fn forward(&self, x: &DenseVec, t: f64, cond: Option<ConditionId>) -> Result<DenseVec> {
        let out = self.forward_batch(x.as_slice(), &[t], &[cond])?;
        Ok(DenseVec::from_vec_unchecked(out))
    }

    /// Batched forward. `xs` is `batch × input_dim` row-major; returns the
    /// same shape.
    pub fn forward_batch(&self, xs: &[f64], ts: &[f64], conds: &[Option<ConditionId>]) -> Result<Vec<f64>> {
        Ok(self.trace(xs, ts, conds)?.output)
    }

    /// Batched forward with one shared time and condition.
    pub fn forward_batch_shared(&self, xs: &[f64], t: f64, cond: Option<ConditionId>) -> Result<Vec<f64>> {
        let d = self.config.input_dim;
        if !xs.len().is_multiple_of(d) || xs.is_empty() {
            return Err(invalid(format!("batch length {} not a multiple of {d}", xs.len())));
        }
        let b = xs.len() / d;
        self.forward_batch(xs, &vec![t; b], &vec![cond; b])
    }

    fn trace(&self, xs: &[f64], ts: &[f64], conds: &[Option<ConditionId>]) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let d = cfg.input_dim;
        let b = ts.len();
        if b == 0 {
            return Err(invalid("empty batch"));
        }
        if xs.len() != b * d {
            return Err(invalid(format!(
                "dimension mismatch: expected {} x {d} inputs, got {} values",
                b,
                xs.len()
            )));
        }
        if conds.len() != b {
            return Err(invalid("one condition per batch row required"));
        }
        let width = cfg.concat_dim();
        let tf = cfg.time_feature_dim();
        let e = cfg.cond_embed_dim;
        let mut input = vec![0.0; b * width];
        for (i, row) in input.chunks_exact_mut(width).enumerate() {
            row[..d].copy_from_slice(&xs[i * d..(i + 1) * d]);
            write_time_features(ts[i], &mut row[d..d + tf]);
            let er = cfg.embedding_row(conds[i])?;
            row[d + tf..].copy_from_slice(&self.embedding.as_slice()[er * e..(er + 1) * e]);
        }

        let n_layers = self.layers.len();
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(n_layers - 1);
        let mut output = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let prev: &[f64] = if li == 0 { &input } else { &hidden[li - 1] };
            let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
            let mut z = Vec::with_capacity(b * out_dim);
            for _ in 0..b {
                z.extend_from_slice(layer.bias.as_slice());
            }
            gemm(b, in_dim, out_dim, prev, false, layer.weight.as_slice(), true, &mut z, 1.0);
            if li + 1 < n_layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
                hidden.push(z);
            } else {
                output = z;
            }
        }
        Ok(ForwardTrace {
            batch: b,
            input,
            hidden,
            output,
        })
    }

    /// Mean squared regression loss `mean_i ‖u(x_t,t,c) − v_t‖²` over
    /// `batch` and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[PathSample]) -> Result<(f64, GradientBundle)> {
        if batch.is_empty() {
            return Err(invalid("loss_and_grad: empty batch"));
        }
        let inv_n = 1.0 / batch.len() as f64;
        let parts: Vec<Result<(f64, GradientBundle)>> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| self.chunk_loss_and_grad(chunk, inv_n))
            .collect();
        let mut loss = 0.0;
        let mut grads = GradientBundle::zeros(&self.config);
        for part in parts {
            let (l, g) = part?;
            loss += l;
            grads.add_assign(&g);
        }
        Ok((loss, grads))
    }

    /// Loss only, without building gradients.
    pub fn loss(&self, batch: &[PathSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid("loss: empty batch"));
        }
        let inv_n = 1.0 / batch.len() as f64;
        let parts: Vec<Result<f64>> = batch
            .par_chunks(256)
            .map(|chunk| {
                let (xs, ts, conds, vs) = self.unpack(chunk)?;
                let tr = self.trace(&xs, &ts, &conds)?;
                Ok(tr
                    .output
                    .iter()
                    .zip(&vs)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    * inv_n)
            })
            .collect();
        parts.into_iter().sum()
    }

    #[allow(clippy::type_complexity)]
    fn unpack(&self, chunk: &[PathSample]) -> Result<(Vec<f64>, Vec<f64>, Vec<Option<ConditionId>>, Vec<f64>)> {
        let d = self.config.input_dim;
        let mut xs = Vec::with_capacity(chunk.len() * d);
        let mut vs = Vec::with_capacity(chunk.len() * d);
        for s in chunk {
            if s.x_t.dim() != d || s.v_t.dim() != d {
                return Err(invalid(format!(
                    "path sample of dim {} for a net of dim {d}",
                    s.x_t.dim()
                )));
            }
            xs.extend_from_slice(s.x_t.as_slice());
            vs.extend_from_slice(s.v_t.as_slice());
        }
        let ts = chunk.iter().map(|s| s.t).collect();
        let conds = chunk.iter().map(|s| s.cond).collect();
        Ok((xs, ts, conds, vs))
    }

    fn chunk_loss_and_grad(&self, chunk: &[PathSample], inv_n: f64) -> Result<(f64, GradientBundle)> {
        let cfg = &self.config;
        let (xs, ts, conds, vs) = self.unpack(chunk)?;
        let tr = self.trace(&xs, &ts, &conds)?;
        let b = tr.batch;

        let mut loss = 0.0;
        // dL/du = 2 (u − v) / n
        let mut delta: Vec<f64> = tr
            .output
            .iter()
            .zip(&vs)
            .map(|(u, v)| {
                let r = u - v;
                loss += r * r;
                2.0 * r * inv_n
            })
            .collect();
        loss *= inv_n;

        let mut grads = GradientBundle::zeros(cfg);
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
            let prev: &[f64] = if li == 0 { &tr.input } else { &tr.hidden[li - 1] };
            let g = &mut grads.layers[li];
            // dW = deltaᵀ · prev
            gemm(out_dim, b, in_dim, &delta, true, prev, false, g.weight.as_mut_slice(), 0.0);
            let gb = g.bias.as_mut_slice();
            for row in delta.chunks_exact(out_dim) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            // d(prev) = delta · W
            let mut d_prev = vec![0.0; b * in_dim];
            gemm(b, out_dim, in_dim, &delta, false, layer.weight.as_slice(), false, &mut d_prev, 0.0);
            if li > 0 {
                for (dp, h) in d_prev.iter_mut().zip(prev) {
                    *dp *= 1.0 - h * h;
                }
                delta = d_prev;
            } else {
                let width = cfg.concat_dim();
                let off = cfg.input_dim + cfg.time_feature_dim();
                let e = cfg.cond_embed_dim;
                for (i, row) in d_prev.chunks_exact(width).enumerate() {
                    let er = cfg.embedding_row(conds[i])?;
                    let dst = &mut grads.embedding.row_mut(er)[..e];
                    for (acc, v) in dst.iter_mut().zip(&row[off..off + e]) {
                        *acc += v;
                    }
                }
                break;
            }
        }
        Ok((loss, grads))
    }
}
