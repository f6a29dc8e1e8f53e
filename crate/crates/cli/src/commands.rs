//! The `train`, `sample` and `eval` subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowmatch::evaluation::{run_guidance_sweep, run_step_sweep, SweepContext, SAMPLE_STREAM};
use flowmatch::sampler::sample_latents;
use flowmatch::{ConditionId, MetricReport, Pipeline, RngStream, Trainer};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SampleFormat};
use crate::error::{CliError, CliResult};

pub const LOSS_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";

/// Command-line values that override the config when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub w: Option<f64>,
    pub steps: Option<usize>,
    pub n: Option<usize>,
    pub cond: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    Guidance,
    Steps,
    None,
}

fn prepare_dir(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:08}.ckpt"))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub null_fraction: f64,
}

/// Trains per `cfg`, writing the config echo, `loss.csv`, a checkpoint
/// every `train.eval_every` steps and `final.ckpt`. With
/// `inject_nan_at = Some(k)` a parameter is poisoned just before step `k`
/// (fault-injection hook).
pub fn train(cfg: &RunConfig, out: &Path, inject_nan_at: Option<u64>) -> CliResult<TrainSummary> {
    cfg.validate()?;
    prepare_dir(out)?;
    cfg.echo(out)?;
    let pipeline = Pipeline::build(&cfg.dataset, &cfg.codec)?;
    let mut trainer = Trainer::new(cfg.net.clone(), pipeline, cfg.path, cfg.train.clone())?;
    let total = cfg.train.num_steps;
    if total == 0 {
        Checkpoint::from_trainer(&trainer, cfg).save(&out.join(FINAL_CHECKPOINT))?;
        return Ok(TrainSummary {
            steps: 0,
            final_loss: None,
            null_fraction: 0.0,
        });
    }
    std::fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    let mut log = BufWriter::new(File::create(out.join(LOSS_FILE))?);
    writeln!(log, "step,loss,wall_ms")?;
    let start = Instant::now();
    let mut last = None;
    let mut window = 0.0;
    for step in 1..=total {
        if inject_nan_at == Some(step) {
            trainer.net.layers[0].bias.as_mut_slice()[0] = f64::NAN;
        }
        let loss = match trainer.step() {
            Ok(l) => l,
            Err(e) => {
                log.flush()?;
                return Err(e.into());
            }
        };
        let wall_ms = if cfg.log_wall_clock {
            start.elapsed().as_millis()
        } else {
            0
        };
        writeln!(log, "{step},{loss},{wall_ms}")?;
        window += loss;
        last = Some(loss);
        if step % cfg.train.eval_every == 0 {
            let n = cfg.train.eval_every.min(step) as f64;
            eprintln!("step {step}/{total}  mean loss {:.5}", window / n);
            window = 0.0;
            Checkpoint::from_trainer(&trainer, cfg).save(&checkpoint_path(out, step))?;
        }
    }
    log.flush()?;
    Checkpoint::from_trainer(&trainer, cfg).save(&out.join(FINAL_CHECKPOINT))?;
    Ok(TrainSummary {
        steps: total,
        final_loss: last,
        null_fraction: trainer.null_fraction(),
    })
}

/// Run settings for sampling/evaluating a checkpoint: `file` when given
/// (its model sections are replaced by the checkpoint's), else the
/// checkpoint's own config; then command-line overrides.
pub fn resolve_for_checkpoint(ck: &Checkpoint, file: Option<RunConfig>) -> RunConfig {
    let mut cfg = file.unwrap_or_else(|| ck.config.clone());
    cfg.dataset = ck.config.dataset.clone();
    cfg.path = ck.config.path;
    cfg.net = ck.config.net.clone();
    cfg.train = ck.config.train.clone();
    cfg.codec = ck.config.codec.clone();
    cfg
}

/// Writes `n` samples of class `cond`, integrated in latent space, decoded
/// and mapped back to the dataset's native coordinates.
pub fn sample(ck: &Checkpoint, cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    cfg.validate()?;
    let k = ck.pipeline.num_classes();
    let cond = ConditionId::new(cfg.sample.cond, k)
        .map_err(|_| CliError::Argument(format!("cond {} out of range for {k} classes", cfg.sample.cond)))?;
    prepare_dir(out)?;
    cfg.echo(out)?;
    let rng = RngStream::new(cfg.seed, SAMPLE_STREAM);
    let conds = vec![cond; cfg.sample.n];
    let latents = sample_latents(&ck.net, &conds, &cfg.guidance, &cfg.solver, &rng, cfg.sample.trajectories)?;
    let native = ck.pipeline.latent_rows_to_native(&latents.terminal)?;
    let (w, steps, seed) = (cfg.guidance.w, cfg.solver.num_steps, cfg.seed);
    let path = match cfg.sample.format {
        SampleFormat::Csv => {
            let path = out.join("samples.csv");
            let mut f = BufWriter::new(File::create(&path)?);
            let dims: Vec<String> = (0..ck.pipeline.native_dim()).map(|i| format!("dim_{i}")).collect();
            writeln!(f, "chain_id,{},cond,w,N,seed", dims.join(","))?;
            for (i, x) in native.iter().enumerate() {
                let vals: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                writeln!(f, "{i},{},{},{w},{steps},{seed}", vals.join(","), cond.index())?;
            }
            f.flush()?;
            path
        }
        SampleFormat::Jsonl => {
            let path = out.join("samples.jsonl");
            let mut f = BufWriter::new(File::create(&path)?);
            for (i, x) in native.iter().enumerate() {
                let row = serde_json::json!({
                    "chain_id": i,
                    "x": x.as_slice(),
                    "cond": cond.index(),
                    "w": w,
                    "N": steps,
                    "seed": seed,
                });
                writeln!(f, "{row}")?;
            }
            f.flush()?;
            path
        }
    };
    if let Some(trajs) = &latents.trajectories {
        let mut f = BufWriter::new(File::create(out.join(TRAJECTORY_FILE))?);
        let d = latents.dim;
        let dims: Vec<String> = (0..d).map(|i| format!("z_{i}")).collect();
        writeln!(f, "chain_id,step,t,{}", dims.join(","))?;
        for (i, states) in trajs.iter().enumerate() {
            for (s, z) in states.chunks_exact(d).enumerate() {
                let vals: Vec<String> = z.iter().map(|v| v.to_string()).collect();
                writeln!(f, "{i},{s},{},{}", cfg.solver.time(s), vals.join(","))?;
            }
        }
        f.flush()?;
    }
    Ok(path)
}

/// Runs the requested sweep and writes `metrics.csv` and `metrics.json`.
pub fn eval(ck: &Checkpoint, cfg: &RunConfig, sweep: Sweep, out: &Path) -> CliResult<Vec<MetricReport>> {
    cfg.validate()?;
    prepare_dir(out)?;
    cfg.echo(out)?;
    let ctx = SweepContext {
        net: &ck.net,
        pipeline: &ck.pipeline,
        path_cfg: cfg.path,
        n: cfg.eval.n_samples,
        seed: cfg.seed,
    };
    let reports = match sweep {
        Sweep::Guidance => run_guidance_sweep(&ctx, &cfg.eval.guidance_scales, cfg.eval.guidance_steps)?,
        Sweep::Steps => run_step_sweep(&ctx, &cfg.eval.step_counts, cfg.eval.step_guidance)?,
        Sweep::None => vec![ctx.single(&cfg.guidance, &cfg.solver)?],
    };
    let mut csv = String::from(MetricReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(out.join(METRICS_CSV), csv)?;
    let json = serde_json::json!({
        "sweep": sweep,
        "config": cfg,
        "reports": reports,
    });
    let text = serde_json::to_string_pretty(&json).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(out.join(METRICS_JSON), text + "\n")?;
    Ok(reports)
}

/// Applies command-line overrides for `eval`.
pub fn apply_eval_overrides(cfg: &mut RunConfig, sweep: Sweep, o: &Overrides) {
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(n) = o.n {
        cfg.eval.n_samples = n;
    }
    match sweep {
        Sweep::Guidance => {
            if let Some(n) = o.steps {
                cfg.eval.guidance_steps = n;
            }
        }
        Sweep::Steps => {
            if let Some(w) = o.w {
                cfg.eval.step_guidance = w;
            }
        }
        Sweep::None => {
            if let Some(w) = o.w {
                cfg.guidance.w = w;
            }
            if let Some(n) = o.steps {
                cfg.solver.num_steps = n;
            }
        }
    }
}

/// Applies command-line overrides for `sample`.
pub fn apply_sample_overrides(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(w) = o.w {
        cfg.guidance.w = w;
    }
    if let Some(n) = o.steps {
        cfg.solver.num_steps = n;
    }
    if let Some(n) = o.n {
        cfg.sample.n = n;
    }
    if let Some(c) = o.cond {
        cfg.sample.cond = c;
    }
}
