//! Linear encode/decode pair between data space (dim `D`) and the latent
//! space (dim `d ≤ D`) where flow matching runs.

use serde::{Deserialize, Serialize};

use crate::datasets::{draw_pair_unchecked, DatasetSpec};
use crate::error::{invalid, Error, Result};
use crate::numerics::{gemm, matvec, random_orthonormal_columns, symmetric_eigen, DenseMat, DenseVec, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    Identity,
    LinearTrained,
    FixedOrthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub mode: CodecMode,
    /// Scale on the reconstruction objective reported by
    /// [`LatentCodec::objective`]; does not move the least-squares optimum.
    pub recon_weight: f64,
    /// Samples drawn by `linear-trained` fitting.
    pub fit_samples: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            data_dim: 8,
            latent_dim: 2,
            mode: CodecMode::LinearTrained,
            recon_weight: 1.0,
            fit_samples: 20_000,
            seed: 7,
        }
    }
}

impl CodecConfig {
    pub fn identity(dim: usize) -> Self {
        Self {
            data_dim: dim,
            latent_dim: dim,
            mode: CodecMode::Identity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > self.data_dim {
            return Err(invalid(format!(
                "need 1 <= latent_dim <= data_dim, got {} and {}",
                self.latent_dim, self.data_dim
            )));
        }
        if self.mode == CodecMode::Identity && self.latent_dim != self.data_dim {
            return Err(invalid("identity codec requires latent_dim == data_dim"));
        }
        if !(self.recon_weight.is_finite() && self.recon_weight > 0.0) {
            return Err(invalid("recon_weight must be positive"));
        }
        Ok(())
    }
}

/// Fixed isometric embedding of the native dataset space into data space:
/// `x = Q·y` with orthonormal columns `Q` (`D × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct DataLift {
    matrix: DenseMat,
}

/// Stream id reserved for drawing the lift.
const LIFT_STREAM: u64 = 0x4c49_4654;

impl DataLift {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DenseMat::identity(dim),
        }
    }

    /// Identity when `data_dim == native_dim`, otherwise a Haar-random
    /// isometry seeded by `seed`.
    pub fn seeded(native_dim: usize, data_dim: usize, seed: u64) -> Result<Self> {
        if data_dim == native_dim {
            return Ok(Self::identity(native_dim));
        }
        let mut rng = RngStream::new(seed, LIFT_STREAM);
        Ok(Self {
            matrix: random_orthonormal_columns(data_dim, native_dim, &mut rng)?,
        })
    }

    pub fn from_matrix(matrix: DenseMat) -> Result<Self> {
        if matrix.rows() < matrix.cols() {
            return Err(invalid("lift must map into an equal or larger space"));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DenseMat {
        &self.matrix
    }

    pub fn native_dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn data_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn lift(&self, y: &DenseVec) -> Result<DenseVec> {
        matvec(&self.matrix, y)
    }

    /// `Qᵀ·x`, the exact inverse on the lifted subspace.
    pub fn unlift(&self, x: &DenseVec) -> Result<DenseVec> {
        if x.dim() != self.data_dim() {
            return Err(invalid("unlift dimension mismatch"));
        }
        let out = (0..self.native_dim())
            .map(|c| (0..self.data_dim()).map(|r| self.matrix.get(r, c) * x[r]).sum())
            .collect();
        Ok(DenseVec::from_vec_unchecked(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    config: CodecConfig,
    /// `d × D`
    encoder: DenseMat,
    /// `D × d`
    decoder: DenseMat,
}

impl LatentCodec {
    pub fn identity(dim: usize) -> Self {
        Self {
            config: CodecConfig::identity(dim),
            encoder: DenseMat::identity(dim),
            decoder: DenseMat::identity(dim),
        }
    }

    /// Orthonormal encoder rows drawn from `cfg.seed`; decoder is the
    /// transpose.
    pub fn fixed_orthogonal(cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(cfg.seed, 0);
        let q = random_orthonormal_columns(cfg.data_dim, cfg.latent_dim, &mut rng)?;
        Ok(Self {
            config: CodecConfig {
                mode: CodecMode::FixedOrthogonal,
                ..cfg.clone()
            },
            encoder: q.transpose(),
            decoder: q,
        })
    }

    pub fn from_matrices(config: CodecConfig, encoder: DenseMat, decoder: DenseMat) -> Result<Self> {
        config.validate()?;
        if encoder.rows() != config.latent_dim
            || encoder.cols() != config.data_dim
            || decoder.rows() != config.data_dim
            || decoder.cols() != config.latent_dim
        {
            return Err(invalid("codec matrix shapes do not match config"));
        }
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// Builds the codec `cfg` describes, fitting on lifted draws from
    /// `spec` when the mode is `linear-trained`.
    pub fn build(cfg: &CodecConfig, spec: &DatasetSpec, lift: &DataLift) -> Result<Self> {
        cfg.validate()?;
        match cfg.mode {
            CodecMode::Identity => Ok(Self {
                config: cfg.clone(),
                ..Self::identity(cfg.data_dim)
            }),
            CodecMode::FixedOrthogonal => Self::fixed_orthogonal(cfg),
            CodecMode::LinearTrained => {
                let mut rng = RngStream::new(cfg.seed, 0);
                fit_linear(spec, lift, cfg, cfg.fit_samples, &mut rng)
            }
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn encoder(&self) -> &DenseMat {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseMat {
        &self.decoder
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn encode(&self, x: &DenseVec) -> Result<DenseVec> {
        matvec(&self.encoder, x)
    }

    pub fn decode(&self, z: &DenseVec) -> Result<DenseVec> {
        matvec(&self.decoder, z)
    }

    /// Decodes `n × d` row-major latents into `n × D` rows.
    pub fn decode_rows(&self, zs: &[f64]) -> Result<Vec<f64>> {
        let (d, big_d) = (self.latent_dim(), self.data_dim());
        if !zs.len().is_multiple_of(d) {
            return Err(invalid("decode_rows: length not a multiple of latent_dim"));
        }
        let n = zs.len() / d;
        let mut out = vec![0.0; n * big_d];
        if n > 0 {
            gemm(n, d, big_d, zs, false, self.decoder.as_slice(), true, &mut out, 0.0);
        }
        Ok(out)
    }

    /// Mean squared reconstruction error `‖x − G·E·x‖²` over `samples`.
    pub fn reconstruction_mse(&self, samples: &[DenseVec]) -> Result<f64> {
        if samples.is_empty() {
            return Err(invalid("no samples"));
        }
        let mut total = 0.0;
        for x in samples {
            let r = self.decode(&self.encode(x)?)?;
            total += x.sub(&r)?.norm_sq();
        }
        Ok(total / samples.len() as f64)
    }

    /// `recon_weight · reconstruction_mse`.
    pub fn objective(&self, samples: &[DenseVec]) -> Result<f64> {
        Ok(self.config.recon_weight * self.reconstruction_mse(samples)?)
    }
}

/// Least-squares linear autoencoder: the top-`d` eigenvectors of the
/// (uncentred) second-moment matrix of lifted dataset draws.
pub fn fit_linear(
    spec: &DatasetSpec,
    lift: &DataLift,
    cfg: &CodecConfig,
    num_samples: usize,
    rng: &mut RngStream,
) -> Result<LatentCodec> {
    spec.validate()?;
    if lift.native_dim() != spec.dim || lift.data_dim() != cfg.data_dim {
        return Err(invalid(format!(
            "lift maps {} -> {}, but dataset dim is {} and codec data_dim is {}",
            lift.native_dim(),
            lift.data_dim(),
            spec.dim,
            cfg.data_dim
        )));
    }
    let samples = (0..num_samples)
        .map(|_| lift.lift(&draw_pair_unchecked(spec, rng).0))
        .collect::<Result<Vec<_>>>()?;
    fit_linear_samples(&samples, cfg)
}

/// [`fit_linear`] on explicit data-space samples.
pub fn fit_linear_samples(samples: &[DenseVec], cfg: &CodecConfig) -> Result<LatentCodec> {
    cfg.validate()?;
    let big_d = cfg.data_dim;
    if samples.len() < 10 * big_d {
        return Err(invalid(format!(
            "fit_linear needs at least {} samples, got {}",
            10 * big_d,
            samples.len()
        )));
    }
    let mut moment = DenseMat::zeros(big_d, big_d);
    for x in samples {
        if x.dim() != big_d {
            return Err(invalid("sample dimension does not match data_dim"));
        }
        for r in 0..big_d {
            for c in 0..=r {
                let v = moment.get(r, c) + x[r] * x[c];
                moment.set(r, c, v);
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for r in 0..big_d {
        for c in 0..=r {
            let v = moment.get(r, c) * inv;
            moment.set(r, c, v);
            moment.set(c, r, v);
        }
    }
    let (values, vectors) = symmetric_eigen(&moment)?;
    let top = values[0].max(f64::MIN_POSITIVE);
    let rank = values.iter().filter(|&&v| v > 1e-12 * top).count();
    if rank < cfg.latent_dim {
        return Err(Error::RankDeficient {
            rank,
            required: cfg.latent_dim,
        });
    }
    let d = cfg.latent_dim;
    let mut encoder = DenseMat::zeros(d, big_d);
    for k in 0..d {
        // sign convention: largest-magnitude component positive
        let col: Vec<f64> = (0..big_d).map(|r| vectors.get(r, k)).collect();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in col.iter().enumerate() {
            encoder.set(k, r, sign * v);
        }
    }
    let decoder = encoder.transpose();
    Ok(LatentCodec {
        config: CodecConfig {
            mode: CodecMode::LinearTrained,
            ..cfg.clone()
        },
        encoder,
        decoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::default_spec;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVec {
        DenseVec::from_slice(x).unwrap()
    }

    fn trained_default() -> (DataLift, LatentCodec) {
        let spec = default_spec();
        let cfg = CodecConfig::default();
        let lift = DataLift::seeded(spec.dim, cfg.data_dim, spec.seed).unwrap();
        let codec = LatentCodec::build(&cfg, &spec, &lift).unwrap();
        (lift, codec)
    }

    #[test]
    fn identity_codec() {
        let c = LatentCodec::identity(3);
        let x = v(&[1.0, -2.0, 0.5]);
        assert_eq!(c.encode(&x).unwrap(), x);
        assert_eq!(c.decode(&x).unwrap(), x);
        assert_eq!(c.decode(&DenseVec::zeros(3)).unwrap(), DenseVec::zeros(3));
    }

    #[test]
    fn explicit_encoder_arithmetic() {
        let e = DenseMat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let cfg = CodecConfig {
            data_dim: 2,
            latent_dim: 2,
            mode: CodecMode::LinearTrained,
            ..CodecConfig::default()
        };
        let c = LatentCodec::from_matrices(cfg, e.clone(), e.transpose()).unwrap();
        assert_eq!(c.encode(&v(&[2.0, 2.0])).unwrap().as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn fixed_orthogonal_round_trip_and_isometry() {
        let cfg = CodecConfig {
            mode: CodecMode::FixedOrthogonal,
            ..CodecConfig::default()
        };
        let c = LatentCodec::fixed_orthogonal(&cfg).unwrap();
        let z = v(&[0.7, -1.3]);
        let x = c.decode(&z).unwrap();
        assert!((x.norm() - z.norm()).abs() < 1e-12);
        let back = c.decode(&c.encode(&x).unwrap()).unwrap();
        for i in 0..8 {
            assert!((back[i] - x[i]).abs() < 1e-12);
        }
        let gram = c.encoder().matmul(c.decoder()).unwrap();
        for r in 0..2 {
            for col in 0..2 {
                let e = if r == col { 1.0 } else { 0.0 };
                assert!((gram.get(r, col) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn subspace_data_is_recovered_exactly() {
        let (lift, codec) = trained_default();
        let mut rng = RngStream::new(1, 1);
        let samples: Vec<DenseVec> = (0..500)
            .map(|_| lift.lift(&draw_pair_unchecked(&default_spec(), &mut rng).0).unwrap())
            .collect();
        assert!(codec.reconstruction_mse(&samples).unwrap() < 1e-10);
        assert!(codec.objective(&samples).unwrap() < 1e-10);
    }

    #[test]
    fn recovered_subspace_aligns_with_lift() {
        let (lift, codec) = trained_default();
        // principal-angle cosines are the singular values of E·Q
        let m = codec.encoder().matmul(lift.matrix()).unwrap();
        let gram = m.transpose().matmul(&m).unwrap();
        let (vals, _) = symmetric_eigen(&gram).unwrap();
        for s2 in vals {
            assert!(s2.sqrt() > 0.999, "{s2}");
        }
    }

    #[test]
    fn full_rank_square_fit() {
        let cfg = CodecConfig {
            data_dim: 3,
            latent_dim: 3,
            mode: CodecMode::LinearTrained,
            ..CodecConfig::default()
        };
        let mut rng = RngStream::new(2, 0);
        let samples: Vec<DenseVec> = (0..100)
            .map(|_| crate::numerics::gaussian_sample(&mut rng, 3).unwrap())
            .collect();
        let c = fit_linear_samples(&samples, &cfg).unwrap();
        assert!(c.reconstruction_mse(&samples).unwrap() < 1e-10);
    }

    #[test]
    fn rank_deficient_errors() {
        let cfg = CodecConfig {
            data_dim: 3,
            latent_dim: 2,
            ..CodecConfig::default()
        };
        let samples: Vec<DenseVec> = (0..40).map(|i| v(&[i as f64, 0.0, 0.0])).collect();
        assert!(matches!(
            fit_linear_samples(&samples, &cfg),
            Err(Error::RankDeficient { rank: 1, required: 2 })
        ));
        let few: Vec<DenseVec> = (0..5).map(|i| v(&[i as f64, 1.0, 0.0])).collect();
        assert!(fit_linear_samples(&few, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = CodecConfig::default();
        c.latent_dim = 9;
        assert!(c.validate().is_err());
        let mut c = CodecConfig::default();
        c.mode = CodecMode::Identity;
        assert!(c.validate().is_err());
    }

    #[test]
    fn decode_rows_matches_decode() {
        let (_, codec) = trained_default();
        let zs = [0.1, 0.2, -1.0, 3.0];
        let rows = codec.decode_rows(&zs).unwrap();
        for i in 0..2 {
            let one = codec.decode(&v(&zs[2 * i..2 * i + 2])).unwrap();
            for j in 0..8 {
                assert!((rows[8 * i + j] - one[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lift_unlift_round_trip() {
        let lift = DataLift::seeded(2, 8, 42).unwrap();
        let y = v(&[1.5, -0.25]);
        let back = lift.unlift(&lift.lift(&y).unwrap()).unwrap();
        assert!((back[0] - 1.5).abs() < 1e-14 && (back[1] + 0.25).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn encode_is_linear_and_idempotent(
            x in proptest::collection::vec(-10.0f64..10.0, 8),
            y in proptest::collection::vec(-10.0f64..10.0, 8),
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let cfg = CodecConfig { mode: CodecMode::FixedOrthogonal, ..CodecConfig::default() };
            let c = LatentCodec::fixed_orthogonal(&cfg).unwrap();
            let (x, y) = (v(&x), v(&y));
            let combo = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = c.encode(&combo).unwrap();
            let rhs = c.encode(&x).unwrap().scale(a).add(&c.encode(&y).unwrap().scale(b)).unwrap();
            for i in 0..2 {
                let scale: f64 = (0..8)
                    .map(|j| c.encoder().get(i, j).abs() * (a.abs() * x[j].abs() + b.abs() * y[j].abs()))
                    .sum::<f64>()
                    .max(1.0);
                prop_assert!((lhs[i] - rhs[i]).abs() <= 1e-12 * scale);
            }
            let z = c.encode(&x).unwrap();
            let z2 = c.encode(&c.decode(&z).unwrap()).unwrap();
            for i in 0..2 {
                prop_assert!((z[i] - z2[i]).abs() < 1e-10);
            }
        }
    }
}
