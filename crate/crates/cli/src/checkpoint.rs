//! Checkpoint file format, version 1.
//!
//! A UTF-8 header of `key: value` lines, a line holding `---`, then the
//! payload: every array's `f64` values, little-endian, back to back.
//!
//! ```text
//! FLOWMATCH-CHECKPOINT
//! version: 1
//! created_by: flowmatch-cli 0.1.0
//! step: 20000
//! rng: <seed> <stream_id> <word_pos>
//! draws: <condition draws> <null draws>
//! config: <resolved run config, JSON on one line>
//! array: <name> <shape, e.g. 128x43> <byte offset> <value count>
//! ...
//! ---
//! <payload>
//! ```
//!
//! Arrays: `net.<param>` for every network parameter in canonical order,
//! `lift.q`, `codec.encoder`, `codec.decoder`, and optionally
//! `opt.m.<param>` / `opt.v.<param>` for the AdamW moments.

use std::path::Path;

use flowmatch::{
    AdamWState, DataLift, DenseMat, LatentCodec, Pipeline, RngStream, Trainer, VectorFieldNet,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: &str = "FLOWMATCH-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const SEPARATOR: &[u8] = b"\n---\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub created_by: String,
    /// `(seed, stream_id, word_pos)` of the training batch stream.
    pub rng: (u64, u64, u128),
    pub cond_draws: u64,
    pub null_draws: u64,
    pub config: RunConfig,
    pub net: VectorFieldNet,
    pub pipeline: Pipeline,
    pub opt: Option<AdamWState>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn mat_entry(name: &str, m: &DenseMat) -> ArrayEntry {
    ArrayEntry {
        name: name.into(),
        shape: vec![m.rows(), m.cols()],
        values: m.as_slice().to_vec(),
    }
}

fn net_shapes(net: &VectorFieldNet) -> Vec<Vec<usize>> {
    let cfg = net.config();
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    for (o, i) in cfg.layer_shapes() {
        shapes.push(vec![o, i]);
        shapes.push(vec![o]);
    }
    shapes.push(vec![cfg.num_classes, cfg.cond_embed_dim]);
    shapes.push(vec![cfg.cond_embed_dim]);
    shapes
}

fn param_names(net: &VectorFieldNet) -> Vec<String> {
    net.clone().param_slices_mut().into_iter().map(|s| s.name).collect()
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config: &RunConfig) -> Self {
        let rng = &trainer.rng;
        Self {
            step: trainer.step_count(),
            created_by: format!("flowmatch-cli {}", env!("CARGO_PKG_VERSION")),
            rng: (rng.seed(), rng.stream_id(), rng.word_pos()),
            cond_draws: trainer.cond_draws,
            null_draws: trainer.null_draws,
            config: config.clone(),
            net: trainer.net.clone(),
            pipeline: trainer.pipeline.clone(),
            opt: Some(trainer.opt.clone()),
        }
    }

    /// The training rng as it was when the checkpoint was taken.
    pub fn rng_stream(&self) -> RngStream {
        RngStream::from_state(self.rng.0, self.rng.1, self.rng.2)
    }

    fn arrays(&self) -> Vec<ArrayEntry> {
        let names = param_names(&self.net);
        let shapes = net_shapes(&self.net);
        let mut out: Vec<ArrayEntry> = self
            .net
            .param_slices()
            .iter()
            .zip(&names)
            .zip(&shapes)
            .map(|((v, n), s)| ArrayEntry {
                name: format!("net.{n}"),
                shape: s.clone(),
                values: v.to_vec(),
            })
            .collect();
        out.push(mat_entry("lift.q", self.pipeline.lift().matrix()));
        out.push(mat_entry("codec.encoder", self.pipeline.codec().encoder()));
        out.push(mat_entry("codec.decoder", self.pipeline.codec().decoder()));
        if let Some(opt) = &self.opt {
            for (prefix, moments) in [("opt.m", &opt.first), ("opt.v", &opt.second)] {
                for ((m, n), s) in moments.iter().zip(&names).zip(&shapes) {
                    out.push(ArrayEntry {
                        name: format!("{prefix}.{n}"),
                        shape: s.clone(),
                        values: m.clone(),
                    });
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let config = serde_json::to_string(&self.config).map_err(|e| corrupt(e.to_string()))?;
        let mut header = format!(
            "{MAGIC}\nversion: {FORMAT_VERSION}\ncreated_by: {}\nstep: {}\nrng: {} {} {}\ndraws: {} {}\n",
            self.created_by, self.step, self.rng.0, self.rng.1, self.rng.2, self.cond_draws, self.null_draws
        );
        if let Some(opt) = &self.opt {
            header.push_str(&format!("opt_step: {}\n", opt.step));
        }
        header.push_str(&format!("config: {config}\n"));
        let mut payload = Vec::new();
        for a in self.arrays() {
            let shape: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!(
                "array: {} {} {} {}\n",
                a.name,
                shape.join("x"),
                payload.len(),
                a.values.len()
            ));
            for v in &a.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = header.into_bytes();
        out.truncate(out.len() - 1);
        out.extend_from_slice(SEPARATOR);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let split = bytes
            .windows(SEPARATOR.len())
            .position(|w| w == SEPARATOR)
            .ok_or_else(|| corrupt("missing header separator"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| corrupt("header is not UTF-8"))?;
        let payload = &bytes[split + SEPARATOR.len()..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("not a flowmatch checkpoint"));
        }
        let mut fields: Vec<(&str, &str)> = Vec::new();
        for line in lines {
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| corrupt(format!("malformed header line {line:?}")))?;
            fields.push((k, v));
        }
        let get = |key: &str| -> CliResult<&str> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| corrupt(format!("missing header field {key}")))
        };
        let version: u32 = parse(get("version")?, "version")?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported checkpoint version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let step: u64 = parse(get("step")?, "step")?;
        let rng_parts: Vec<&str> = get("rng")?.split(' ').collect();
        let draws: Vec<&str> = get("draws")?.split(' ').collect();
        if rng_parts.len() != 3 || draws.len() != 2 {
            return Err(corrupt("malformed rng or draws field"));
        }
        let config: RunConfig = serde_json::from_str(get("config")?).map_err(|e| corrupt(format!("config: {e}")))?;
        config
            .validate()
            .map_err(|e| corrupt(format!("embedded config: {e}")))?;

        let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let mut expected_offset = 0usize;
        for (_, v) in fields.iter().filter(|(k, _)| *k == "array") {
            let parts: Vec<&str> = v.split(' ').collect();
            if parts.len() != 4 {
                return Err(corrupt(format!("malformed array entry {v:?}")));
            }
            let shape = parts[1]
                .split('x')
                .map(|d| parse::<usize>(d, "shape"))
                .collect::<CliResult<Vec<_>>>()?;
            let offset: usize = parse(parts[2], "offset")?;
            let count: usize = parse(parts[3], "count")?;
            if offset != expected_offset || shape.iter().product::<usize>() != count {
                return Err(corrupt(format!("inconsistent array entry {v:?}")));
            }
            let end = offset + 8 * count;
            if end > payload.len() {
                return Err(corrupt("payload is truncated"));
            }
            let values = payload[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((parts[0].to_string(), shape, values));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(corrupt("payload length does not match the header"));
        }

        let take = |name: &str| -> CliResult<(Vec<usize>, Vec<f64>)> {
            arrays
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, s, v)| (s.clone(), v.clone()))
                .ok_or_else(|| corrupt(format!("missing array {name}")))
        };
        let take_mat = |name: &str| -> CliResult<DenseMat> {
            let (shape, values) = take(name)?;
            if shape.len() != 2 {
                return Err(corrupt(format!("{name} is not a matrix")));
            }
            DenseMat::new(shape[0], shape[1], values).map_err(|e| corrupt(format!("{name}: {e}")))
        };

        let template = VectorFieldNet::zeros(config.net.clone()).map_err(|e| corrupt(e.to_string()))?;
        let names = param_names(&template);
        let shapes = net_shapes(&template);
        let mut params = Vec::with_capacity(names.len());
        for (n, s) in names.iter().zip(&shapes) {
            let (shape, values) = take(&format!("net.{n}"))?;
            if &shape != s {
                return Err(corrupt(format!("net.{n} has shape {shape:?}, config implies {s:?}")));
            }
            params.push(values);
        }
        let net = VectorFieldNet::from_param_arrays(config.net.clone(), &params).map_err(|e| corrupt(e.to_string()))?;
        let lift = DataLift::from_matrix(take_mat("lift.q")?).map_err(|e| corrupt(e.to_string()))?;
        let codec = LatentCodec::from_matrices(
            config.codec.clone(),
            take_mat("codec.encoder")?,
            take_mat("codec.decoder")?,
        )
        .map_err(|e| corrupt(e.to_string()))?;
        let pipeline = Pipeline::from_parts(config.dataset.clone(), lift, codec).map_err(|e| corrupt(e.to_string()))?;

        let opt = match fields.iter().find(|(k, _)| *k == "opt_step") {
            None => None,
            Some((_, v)) => {
                let mut first = Vec::new();
                let mut second = Vec::new();
                for n in &names {
                    first.push(take(&format!("opt.m.{n}"))?.1);
                    second.push(take(&format!("opt.v.{n}"))?.1);
                }
                Some(AdamWState {
                    first,
                    second,
                    step: parse(v, "opt_step")?,
                })
            }
        };

        Ok(Self {
            step,
            created_by: get("created_by")?.to_string(),
            rng: (
                parse(rng_parts[0], "rng seed")?,
                parse(rng_parts[1], "rng stream")?,
                parse(rng_parts[2], "rng position")?,
            ),
            cond_draws: parse(draws[0], "draws")?,
            null_draws: parse(draws[1], "draws")?,
            config,
            net,
            pipeline,
            opt,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<T> {
    s.trim()
        .parse()
        .map_err(|_| corrupt(format!("cannot parse {what} from {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowmatch::{PathConfig, TrainConfig};

    fn small_run() -> (Trainer, RunConfig) {
        let mut cfg = RunConfig::default();
        cfg.net.hidden_dim = 8;
        cfg.net.num_hidden_layers = 2;
        cfg.codec.fit_samples = 2000;
        cfg.train = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let pipeline = Pipeline::build(&cfg.dataset, &cfg.codec).unwrap();
        let mut tr = Trainer::new(cfg.net.clone(), pipeline, PathConfig::default(), cfg.train.clone()).unwrap();
        tr.run(3).unwrap();
        (tr, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (tr, cfg) = small_run();
        let ck = Checkpoint::from_trainer(&tr, &cfg);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut rng = back.rng_stream();
        let mut orig = tr.rng.clone();
        assert_eq!(rng.next_u64(), orig.next_u64());
    }

    #[test]
    fn bumped_version_is_rejected() {
        let (tr, cfg) = small_run();
        let bytes = Checkpoint::from_trainer(&tr, &cfg).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[..40]).to_string();
        assert!(text.contains("version: 1\n"));
        let mut bumped = bytes.clone();
        let pos = bytes.windows(10).position(|w| w == b"version: 1").unwrap();
        bumped[pos + 9] = b'2';
        let err = Checkpoint::from_bytes(&bumped).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let (tr, cfg) = small_run();
        let bytes = Checkpoint::from_trainer(&tr, &cfg).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"hello\n---\n").is_err());
        assert!(Checkpoint::from_bytes(b"").is_err());
    }

    #[test]
    fn optimizer_state_is_optional() {
        let (tr, cfg) = small_run();
        let mut ck = Checkpoint::from_trainer(&tr, &cfg);
        ck.opt = None;
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }
}
