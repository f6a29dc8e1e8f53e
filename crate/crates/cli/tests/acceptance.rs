//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use flowmatch::evaluation::{
    heldout_loss, mode_accuracy, oracle_gaussian_field, per_class_frechet, run_step_sweep, SweepContext,
    SAMPLE_STREAM,
};
use flowmatch::sampler::{integrate_rows, prior_draws, sample_latents};
use flowmatch::trainer::loss_floor;
use flowmatch::{ConditionId, DenseVec, GuidanceConfig, RngStream, SolverConfig};
use flowmatch_cli::checkpoint::Checkpoint;
use flowmatch_cli::commands::{self, FINAL_CHECKPOINT, LOSS_FILE, METRICS_CSV};
use flowmatch_cli::config::ECHO_FILE;
use flowmatch_cli::{oracle, RunConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

type Check = Box<dyn FnOnce(&mut Ctx) -> Outcome>;

/// State shared between criteria: the default benchmark is trained once.
struct Ctx {
    dir: tempfile::TempDir,
    trained: Option<Checkpoint>,
}

impl Ctx {
    fn trained(&mut self) -> &Checkpoint {
        if self.trained.is_none() {
            let out = self.dir.path().join("default-benchmark");
            let start = Instant::now();
            commands::train(&RunConfig::default(), &out, None).expect("default training");
            eprintln!("  (trained default benchmark in {:.1} s)", start.elapsed().as_secs_f64());
            self.trained = Some(Checkpoint::load(&out.join(FINAL_CHECKPOINT)).expect("load checkpoint"));
        }
        self.trained.as_ref().unwrap()
    }
}

fn c1_path_identities(_: &mut Ctx) -> Outcome {
    let r = oracle::path_identities(10_000, 2024).unwrap();
    outcome(r.passed, format!("max relative error {:.3e} (< 1e-12), endpoints exact", r.value))
}

fn c2_gradients(_: &mut Ctx) -> Outcome {
    let r = oracle::gradient_correctness(false).unwrap();
    outcome(r.passed, format!("worst relative error {:.3e} over 5 nets x 5 batches (< 1e-5)", r.value))
}

fn c3_oracle(_: &mut Ctx) -> Outcome {
    let r = oracle::gaussian_oracle_agreement(7).unwrap();
    outcome(r.passed, format!("max-abs gap {:.3e} on ±3σ x t=0.1..0.9 (< 1e-3)", r.value))
}

fn c4_euler(_: &mut Ctx) -> Outcome {
    let errs = oracle::euler_errors().unwrap();
    let ns: Vec<f64> = oracle::EULER_STEPS.iter().map(|&n| n as f64).collect();
    let slope = -oracle::loglog_slope(&ns, &errs);
    outcome(
        (0.8..=1.2).contains(&slope),
        format!("log-log slope magnitude {slope:.4} (in [0.8, 1.2]); errors {:?}", errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>()),
    )
}

const PER_CLASS: usize = 10_000;

fn c5_recovery(ctx: &mut Ctx) -> Outcome {
    let ck = ctx.trained().clone();
    let pipeline = &ck.pipeline;
    let k = pipeline.num_classes();
    let targets = pipeline.native_class_targets().unwrap();
    let sweep = SweepContext {
        net: &ck.net,
        pipeline,
        path_cfg: ck.config.path,
        n: PER_CLASS * k,
        seed: 5,
    };
    let solver = SolverConfig::euler(200);
    let (samples, conds) = sweep.generate(&GuidanceConfig { w: 1.0 }, &solver).unwrap();
    let trained = per_class_frechet(&samples, &conds, &targets).unwrap();

    // same prior draws pushed through the exact class-conditional field
    let latent_targets = pipeline.latent_class_targets().unwrap();
    let d = pipeline.latent_dim();
    let prior = prior_draws(&RngStream::new(5, SAMPLE_STREAM), PER_CLASS * k, d);
    let mut terminal = Vec::with_capacity(prior.len());
    for (i, x0) in prior.chunks_exact(d).enumerate() {
        let target = &latent_targets[i % k];
        let mut field = |xs: &[f64], t: f64| -> flowmatch::Result<Vec<f64>> {
            Ok(oracle_gaussian_field(target, &ck.config.path, &DenseVec::from_slice(xs)?, t)?.into_vec())
        };
        terminal.extend(integrate_rows(&mut field, x0.to_vec(), &solver, false).unwrap().0);
    }
    let oracle_samples = pipeline.latent_rows_to_native(&terminal).unwrap();
    let oracle_fd = per_class_frechet(&oracle_samples, &conds, &targets).unwrap();

    let passed = trained.iter().all(|f| *f < 0.1) && oracle_fd.iter().all(|f| *f < 0.02);
    outcome(
        passed,
        format!("per-class FD trained {trained:.4?} (< 0.1); oracle-field sampler {oracle_fd:.4?} (< 0.02)"),
    )
}

fn c6_guidance(ctx: &mut Ctx) -> Outcome {
    let ck = ctx.trained().clone();
    let n = 5000;
    let sweep = SweepContext {
        net: &ck.net,
        pipeline: &ck.pipeline,
        path_cfg: ck.config.path,
        n,
        seed: 6,
    };
    let solver = SolverConfig::euler(25);
    let acc = |w: f64| {
        let (s, c) = sweep.generate(&GuidanceConfig { w }, &solver).unwrap();
        mode_accuracy(&s, &c, ck.pipeline.spec()).unwrap()
    };
    let (a1, a3) = (acc(1.0), acc(3.0));

    // w = 1 against a plain per-chain conditional Euler loop
    let k = ck.pipeline.num_classes();
    let conds: Vec<ConditionId> = (0..n).map(|i| ConditionId(i % k)).collect();
    let rng = RngStream::new(6, SAMPLE_STREAM);
    let guided = sample_latents(&ck.net, &conds, &GuidanceConfig { w: 1.0 }, &solver, &rng, false).unwrap();
    let d = ck.pipeline.latent_dim();
    let prior = prior_draws(&rng, n, d);
    let h = 1.0 / solver.num_steps as f64;
    let mut plain = Vec::with_capacity(n * d);
    for (i, x0) in prior.chunks_exact(d).enumerate() {
        let mut x = DenseVec::from_slice(x0).unwrap();
        for step in 0..solver.num_steps {
            let v = ck.net.forward(&x, solver.time(step), Some(conds[i])).unwrap();
            x.axpy(h, &v).unwrap();
        }
        plain.extend_from_slice(x.as_slice());
    }
    let bitwise = guided.terminal.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        a3 >= a1 && bitwise,
        format!("mode accuracy w=3 {a3:.4} >= w=1 {a1:.4} at N=25, n={n}; w=1 bitwise equal to conditional: {bitwise}"),
    )
}

fn c7_steps(ctx: &mut Ctx) -> Outcome {
    let ck = ctx.trained().clone();
    let sweep = SweepContext {
        net: &ck.net,
        pipeline: &ck.pipeline,
        path_cfg: ck.config.path,
        n: 5000,
        seed: 7,
    };
    let r = run_step_sweep(&sweep, &[5, 10, 200], 3.0).unwrap();
    let (f5, f10, f200) = (r[0].frechet, r[1].frechet, r[2].frechet);
    outcome(
        f10 < f5 && (f10 - f200) < (f5 - f10),
        format!("FD N=5 {f5:.4}, N=10 {f10:.4}, N=200 {f200:.4}; gain 10→200 {:.4} < gain 5→10 {:.4}", f10 - f200, f5 - f10),
    )
}

fn c8_dropout(ctx: &mut Ctx) -> Outcome {
    let ck = ctx.trained();
    let frac = ck.null_draws as f64 / ck.cond_draws as f64;
    outcome(
        ck.cond_draws >= 100_000 && (frac - 0.10).abs() <= 0.01,
        format!("null fraction {frac:.5} over {} draws (0.10 ± 0.01)", ck.cond_draws),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_flowmatch"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    match (std::fs::read(a), std::fs::read(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn c9_reproducibility(ctx: &mut Ctx) -> Outcome {
    let root = ctx.dir.path().join("repro");
    std::fs::create_dir_all(&root).unwrap();
    let cfg_path = root.join("input.toml");
    std::fs::write(&cfg_path, "[train]\nnum_steps = 300\neval_every = 100\n[eval]\nn_samples = 800\n").unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (a, b) = (root.join("train-a"), root.join("train-b"));
    let mut ok = run_cli(&["train", "--config", &s(&cfg_path), "--out", &s(&a)]);
    ok &= run_cli(&["train", "--config", &s(&a.join(ECHO_FILE)), "--out", &s(&b)]);
    let loss_same = ok && same_bytes(&a.join(LOSS_FILE), &b.join(LOSS_FILE));

    let ck_path = a.join(FINAL_CHECKPOINT);
    let (e1, e2) = (root.join("eval-a"), root.join("eval-b"));
    ok &= run_cli(&["eval", "--checkpoint", &s(&ck_path), "--sweep", "guidance", "--out", &s(&e1)]);
    ok &= run_cli(&[
        "eval",
        "--checkpoint",
        &s(&ck_path),
        "--sweep",
        "guidance",
        "--config",
        &s(&e1.join(ECHO_FILE)),
        "--out",
        &s(&e2),
    ]);
    let metrics_same = ok && same_bytes(&e1.join(METRICS_CSV), &e2.join(METRICS_CSV));

    let bytes = std::fs::read(&ck_path).unwrap_or_default();
    let round_trip = Checkpoint::from_bytes(&bytes)
        .and_then(|c| c.to_bytes())
        .map(|again| again == bytes)
        .unwrap_or(false);
    outcome(
        ok && loss_same && metrics_same && round_trip,
        format!("commands ok {ok}; loss.csv identical {loss_same}; metrics.csv identical {metrics_same}; checkpoint round trip bit-exact {round_trip}"),
    )
}

fn c10_loss_floor(ctx: &mut Ctx) -> Outcome {
    let ck = ctx.trained().clone();
    let floor = loss_floor(&ck.pipeline, &ck.config.path, 1_000_000, &mut RngStream::new(10, 1)).unwrap();
    let held = heldout_loss(&ck.net, &ck.pipeline, &ck.config.path, 20_000, &mut RngStream::new(10, 2)).unwrap();
    let lo = floor.mean - 3.0 * floor.std_err;
    let hi = 1.5 * floor.mean;
    outcome(
        held >= lo && held <= hi,
        format!(
            "held-out loss {held:.5} in [{lo:.5}, {hi:.5}] (floor {:.5} ± {:.5}, 1e6 draws)",
            floor.mean, floor.std_err
        ),
    )
}

fn main() {
    let criteria: Vec<(&str, Duration, Check)> = vec![
        ("path identities", Duration::from_secs(1), Box::new(c1_path_identities)),
        ("gradient correctness", Duration::from_secs(30), Box::new(c2_gradients)),
        ("oracle cross-validation", Duration::from_secs(60), Box::new(c3_oracle)),
        ("euler convergence", Duration::from_secs(30), Box::new(c4_euler)),
        ("distribution recovery", Duration::from_secs(600), Box::new(c5_recovery)),
        ("guidance trend", Duration::from_secs(120), Box::new(c6_guidance)),
        ("step trend", Duration::from_secs(300), Box::new(c7_steps)),
        ("condition dropout rate", Duration::from_secs(10), Box::new(c8_dropout)),
        ("reproducibility", Duration::from_secs(60), Box::new(c9_reproducibility)),
        ("loss floor", Duration::from_secs(300), Box::new(c10_loss_floor)),
    ];
    let mut ctx = Ctx {
        dir: tempfile::tempdir().expect("temp dir"),
        trained: None,
    };
    // training time is shared, so it is not charged to any one criterion
    let train_start = Instant::now();
    ctx.trained();
    let train_time = train_start.elapsed();

    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let r = check(&mut ctx);
        let mut elapsed = start.elapsed();
        if i == 4 {
            elapsed += train_time;
        }
        let in_budget = elapsed <= budget;
        let passed = r.passed && in_budget;
        failures += usize::from(!passed);
        println!(
            "[{}] {:>2}. {name}: {} ({:.2} s, budget {} s{})",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            r.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
