//! Dataset → lift → codec composition.
//!
//! Native dataset draws `y` (dim `spec.dim`) are lifted isometrically into
//! data space `x = Q·y` (dim `D`), then encoded to latents `z = E·x`
//! (dim `d`). Flow matching trains and integrates on `z`; metrics are taken
//! back in native space via `y = Qᵀ·G·z`.

use crate::datasets::{draw_pair_unchecked, ConditionId, DatasetSpec};
use crate::error::{invalid, Result};
use crate::evaluation::GaussianFit;
use crate::latent_codec::{CodecConfig, DataLift, LatentCodec};
use crate::numerics::{DenseMat, DenseVec, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    spec: DatasetSpec,
    lift: DataLift,
    codec: LatentCodec,
}

impl Pipeline {
    /// Lift seeded by `spec.seed`; codec built per `codec_cfg`.
    pub fn build(spec: &DatasetSpec, codec_cfg: &CodecConfig) -> Result<Self> {
        spec.validate()?;
        codec_cfg.validate()?;
        if codec_cfg.data_dim < spec.dim {
            return Err(invalid(format!(
                "codec data_dim {} is smaller than the dataset dim {}",
                codec_cfg.data_dim, spec.dim
            )));
        }
        let lift = DataLift::seeded(spec.dim, codec_cfg.data_dim, spec.seed)?;
        let codec = LatentCodec::build(codec_cfg, spec, &lift)?;
        Self::from_parts(spec.clone(), lift, codec)
    }

    /// Native data, no lift, identity codec.
    pub fn identity(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        Self::from_parts(
            spec.clone(),
            DataLift::identity(spec.dim),
            LatentCodec::identity(spec.dim),
        )
    }

    pub fn from_parts(spec: DatasetSpec, lift: DataLift, codec: LatentCodec) -> Result<Self> {
        if lift.native_dim() != spec.dim || lift.data_dim() != codec.data_dim() {
            return Err(invalid("lift/codec dimensions do not line up with the dataset"));
        }
        Ok(Self { spec, lift, codec })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn lift(&self) -> &DataLift {
        &self.lift
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    pub fn latent_dim(&self) -> usize {
        self.codec.latent_dim()
    }

    pub fn native_dim(&self) -> usize {
        self.spec.dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// One `(z1, c)` training pair in latent space.
    pub fn draw_latent_pair(&self, rng: &mut RngStream) -> Result<(DenseVec, ConditionId)> {
        let (y, c) = draw_pair_unchecked(&self.spec, rng);
        let z = self.codec.encode(&self.lift.lift(&y)?)?;
        Ok((z, c))
    }

    /// Decoded data-space rows (`n × D`) back to native rows (`n × dim`).
    pub fn data_rows_to_native(&self, xs: &[f64]) -> Result<Vec<DenseVec>> {
        xs.chunks_exact(self.codec.data_dim())
            .map(|x| self.lift.unlift(&DenseVec::from_vec_unchecked(x.to_vec())))
            .collect()
    }

    /// `Qᵀ·G·z` for each latent row.
    pub fn latent_rows_to_native(&self, zs: &[f64]) -> Result<Vec<DenseVec>> {
        self.data_rows_to_native(&self.codec.decode_rows(zs)?)
    }

    /// Linear map native → latent, `E·Q` (`d × dim`).
    pub fn native_to_latent_map(&self) -> DenseMat {
        self.codec
            .encoder()
            .matmul(self.lift.matrix())
            .expect("shapes checked at construction")
    }

    /// Class-conditional Gaussians in native space (gaussian-mixture only).
    pub fn native_class_targets(&self) -> Option<Vec<GaussianFit>> {
        self.spec.class_gaussians().map(|cs| {
            cs.into_iter()
                .map(|(mean, covariance)| GaussianFit { mean, covariance })
                .collect()
        })
    }

    /// Class-conditional Gaussians pushed through `E·Q` into latent space.
    pub fn latent_class_targets(&self) -> Option<Vec<GaussianFit>> {
        let m = self.native_to_latent_map();
        let mt = m.transpose();
        self.native_class_targets().map(|targets| {
            targets
                .into_iter()
                .map(|g| {
                    let mean = crate::numerics::matvec(&m, &g.mean).expect("dims");
                    let covariance = m
                        .matmul(&g.covariance)
                        .and_then(|a| a.matmul(&mt))
                        .expect("dims")
                        .symmetrized();
                    GaussianFit { mean, covariance }
                })
                .collect()
        })
    }
}
