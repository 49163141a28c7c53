//! Command-line entry point: train single models, extract expressions from
//! checkpoints, run OFAT sweep plans, and render reports.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 when runs failed.

use clap::{Args, Parser, Subcommand};
use kansr::basis::{GridSpec, SplineSpec};
use kansr::data::{load_manifest, parse_manifest, sample_dataset, SampleCaps, TaskSpec};
use kansr::expr;
use kansr::extract::{autosym, gsr, GsrConfig};
use kansr::gates::discretize;
use kansr::network::{BasisKind, KanModel, ModelConfig, RunBudget, SplitData};
use kansr::report::{build_report, ReportOptions};
use kansr::stats::{holm_adjust, mwu_one_sided, reduction_pct};
use kansr::sweep::{
    execute, expand_rows, parse_results_csv, results_csv, run_sweep_with, Executed, OfatConfig,
    Pipeline, RunKnobs, SweepPlan,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;

#[derive(Parser)]
#[command(
    name = "kansr",
    version,
    about = "KAN training, symbolic extraction, OFAT sweeps, and reports"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model with a chosen pipeline and save its artifacts.
    Train(TrainArgs),
    /// Extract an expression from a saved checkpoint.
    Extract(ExtractArgs),
    /// Run an OFAT sweep plan and write the results CSV.
    Sweep(SweepArgs),
    /// Render the stats CSV, markdown tables, and violin SVGs.
    Report(ReportArgs),
    /// Run a quick internal consistency battery.
    Selftest,
}

fn parse_pipeline(s: &str) -> Result<Pipeline, String> {
    s.parse()
}

#[derive(Args)]
struct TrainArgs {
    /// Task manifest JSON.
    #[arg(long, default_value = "data/feynman_manifest.json")]
    manifest: PathBuf,
    /// Task name from the manifest.
    #[arg(long)]
    task: String,
    /// One of: autosym, fastkan-autosym, gsr, fastkan-gsr, gmp.
    #[arg(long, default_value = "gsr", value_parser = parse_pipeline)]
    pipeline: Pipeline,
    #[arg(long)]
    seed: u64,
    /// Additive hidden units; the model always adds two product units.
    #[arg(long, default_value_t = 5)]
    width: usize,
    #[arg(long, default_value_t = 1e-2)]
    lambda: f64,
    /// Prune-and-refit cycles.
    #[arg(long, default_value_t = 3)]
    cycles: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Fine-tune steps per extraction trial.
    #[arg(long, default_value_t = 100)]
    tau: usize,
    #[arg(long, default_value_t = 2000)]
    train_points: usize,
    #[arg(long, default_value_t = 1000)]
    test_points: usize,
    #[arg(long, default_value_t = 600)]
    wall_secs: u64,
    /// Output directory for checkpoint, expression, and training log.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data/feynman_manifest.json")]
    manifest: PathBuf,
    /// Task whose data scores the extraction (same sampling as training).
    #[arg(long)]
    task: String,
    /// Extraction method: autosym or gsr.
    #[arg(long, default_value = "gsr")]
    method: String,
    /// Data seed; defaults to the seed stored in the checkpoint.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    tau: usize,
    #[arg(long, default_value_t = 2000)]
    train_points: usize,
    #[arg(long, default_value_t = 1000)]
    test_points: usize,
    #[arg(long, default_value_t = 600)]
    wall_secs: u64,
    /// Optional file for the expression text.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep plan JSON.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value = "data/feynman_manifest.json")]
    manifest: PathBuf,
    /// Reference seed; must be one of the plan's seed levels.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Completed-run ledger; defaults to `<out>.progress.jsonl`.
    #[arg(long)]
    progress: Option<PathBuf>,
    /// Ignore any progress ledger and re-run everything.
    #[arg(long)]
    no_resume: bool,
    /// Zero the wall-clock column for byte-identical reruns.
    #[arg(long)]
    zero_wall: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Results CSV produced by `kansr sweep`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "report")]
    out_dir: PathBuf,
    /// Reference configuration the sweep pivoted on.
    #[arg(long, default_value_t = 5)]
    ref_width: usize,
    #[arg(long, default_value_t = 1e-2)]
    ref_lambda: f64,
    #[arg(long, default_value_t = 3)]
    ref_cycles: usize,
    #[arg(long, default_value_t = 1)]
    ref_seed: u64,
    /// Bootstrap resamples per comparison.
    #[arg(long, default_value_t = 2000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 1)]
    stats_seed: u64,
}

fn main() -> ExitCode {
    init_threads();
    match Cli::parse().cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Extract(a) => cmd_extract(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Selftest => cmd_selftest(),
    }
}

/// KANSR_THREADS caps the rayon pool; unset means one thread per core.
fn init_threads() {
    if let Some(n) = std::env::var("KANSR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_CONFIG)
}

fn run_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("run failed: {msg}");
    ExitCode::from(EXIT_RUN)
}

fn find_task<'a>(tasks: &'a [TaskSpec], name: &str) -> Result<&'a TaskSpec, String> {
    tasks.iter().find(|t| t.name == name).ok_or_else(|| {
        let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        format!("unknown task '{}'; available tasks: {}", name, names.join(", "))
    })
}

fn file_stem(task: &str, pipeline: &str, seed: u64) -> String {
    let safe = |s: &str| -> String {
        s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' }).collect()
    };
    format!("{}_{}_seed{}", safe(task), safe(&pipeline.to_ascii_lowercase()), seed)
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn cmd_train(a: TrainArgs) -> ExitCode {
    let tasks = match load_manifest(&a.manifest) {
        Ok(t) => t,
        Err(e) => return config_error(e),
    };
    let task = match find_task(&tasks, &a.task) {
        Ok(t) => t,
        Err(e) => return config_error(e),
    };
    let caps = SampleCaps::new(a.train_points, a.test_points);
    if let Err(e) = caps.validate() {
        return config_error(e);
    }
    let knobs = RunKnobs {
        caps,
        steps_per_stage: a.steps,
        tau: a.tau,
        wall_cap_secs: a.wall_secs,
    };
    let cfg = OfatConfig { m: a.width, lambda: a.lambda, cycles: a.cycles, seed: a.seed };
    let done: Executed = match execute(task, a.pipeline, cfg, &knobs) {
        Ok(d) => d,
        Err(e) => return run_error(e.reason()),
    };
    if let Err(e) = std::fs::create_dir_all(&a.out) {
        return config_error(format!("cannot create {}: {e}", a.out.display()));
    }
    let stem = file_stem(&task.name, a.pipeline.name(), a.seed);
    let ckpt = a.out.join(format!("{stem}.ckpt.json"));
    let json = match done.model.to_checkpoint_json() {
        Ok(j) => j,
        Err(e) => return run_error(e),
    };
    let mut log = String::from("stage,loss\n");
    for s in &done.train.stages {
        log.push_str(&format!("{},{}\n", s.name, s.loss));
    }
    let expr_path = a.out.join(format!("{stem}.expr.txt"));
    let log_path = a.out.join(format!("{stem}.log.csv"));
    for (path, body) in [
        (&ckpt, json.as_str()),
        (&expr_path, &format!("{}\n", done.expression)),
        (&log_path, log.as_str()),
    ] {
        if let Err(e) = write_file(path, body) {
            return config_error(e);
        }
    }
    println!("checkpoint {}", ckpt.display());
    println!("expression {}", done.expression);
    println!("test_mse {:e}", done.test_mse);
    ExitCode::SUCCESS
}

fn cmd_extract(a: ExtractArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&a.checkpoint) {
        Ok(t) => t,
        Err(e) => return config_error(format!("cannot read {}: {e}", a.checkpoint.display())),
    };
    let mut model = match KanModel::from_checkpoint_json(&text) {
        Ok(m) => m,
        Err(e) => return config_error(e),
    };
    let tasks = match load_manifest(&a.manifest) {
        Ok(t) => t,
        Err(e) => return config_error(e),
    };
    let task = match find_task(&tasks, &a.task) {
        Ok(t) => t,
        Err(e) => return config_error(e),
    };
    let caps = SampleCaps::new(a.train_points, a.test_points);
    if let Err(e) = caps.validate() {
        return config_error(e);
    }
    let seed = a.seed.unwrap_or(model.cfg.seed);
    let ds = match sample_dataset(task, seed, caps) {
        Ok(d) => d,
        Err(e) => return config_error(e),
    };
    let split = SplitData::from_train(&ds.train_x, &ds.train_y, seed);
    let budget = RunBudget::with_cap(Duration::from_secs(a.wall_secs));
    // A still-gated checkpoint is discretised to its argmax operators first.
    discretize(&mut model);
    let extracted = match a.method.to_ascii_lowercase().as_str() {
        "autosym" => autosym(&mut model, &split, seed, 1e-2, &budget).map(|r| r.expression),
        "gsr" => {
            let gc = GsrConfig { tau: a.tau, ..GsrConfig::new(seed) };
            gsr(&mut model, &split, &gc, &budget).map(|r| r.expression)
        }
        other => {
            return config_error(format!("unknown method '{other}', expected autosym or gsr"))
        }
    };
    let expression = match extracted {
        Ok(e) => expr::serialize(&e),
        Err(e) => return run_error(e.reason()),
    };
    let mse = model.mse_on(&ds.test_x, &ds.test_y);
    if let Some(out) = &a.out {
        if let Err(e) = write_file(out, &format!("{expression}\n")) {
            return config_error(e);
        }
    }
    println!("expression {expression}");
    println!("test_mse {mse:e}");
    ExitCode::SUCCESS
}

fn cmd_sweep(a: SweepArgs) -> ExitCode {
    let mut plan = match SweepPlan::load(&a.plan) {
        Ok(p) => p,
        Err(e) => return config_error(e),
    };
    plan.reference.seed = a.seed;
    let tasks = match load_manifest(&a.manifest) {
        Ok(t) => t,
        Err(e) => return config_error(e),
    };
    let progress = if a.no_resume {
        None
    } else {
        Some(a.progress.clone().unwrap_or_else(|| {
            PathBuf::from(format!("{}.progress.jsonl", a.out.display()))
        }))
    };
    let results = match run_sweep_with(&plan, &tasks, None, a.zero_wall, progress.as_deref()) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    let rows = match expand_rows(&plan, &results) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    if let Err(e) = write_file(&a.out, &results_csv(&rows)) {
        return config_error(e);
    }
    let invalid = results.iter().filter(|r| !r.valid).count();
    println!(
        "{} unique runs, {} rows, {} invalid -> {}",
        results.len(),
        rows.len(),
        invalid,
        a.out.display()
    );
    if invalid > 0 {
        return ExitCode::from(EXIT_RUN);
    }
    ExitCode::SUCCESS
}

fn cmd_report(a: ReportArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&a.results) {
        Ok(t) => t,
        Err(e) => return config_error(format!("cannot read {}: {e}", a.results.display())),
    };
    let rows = match parse_results_csv(&text) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    let opts = ReportOptions {
        reference: OfatConfig {
            m: a.ref_width,
            lambda: a.ref_lambda,
            cycles: a.ref_cycles,
            seed: a.ref_seed,
        },
        bootstrap_reps: a.bootstrap,
        stats_seed: a.stats_seed,
    };
    let bundle = build_report(&rows, &opts);
    if let Err(e) = std::fs::create_dir_all(&a.out_dir) {
        return config_error(format!("cannot create {}: {e}", a.out_dir.display()));
    }
    let mut written = vec![
        (a.out_dir.join("stats.csv"), bundle.stats_csv),
        (a.out_dir.join("report.md"), bundle.report_md),
    ];
    for (name, svg) in bundle.violins {
        written.push((a.out_dir.join(name), svg));
    }
    for (path, body) in &written {
        if let Err(e) = write_file(path, body) {
            return config_error(e);
        }
        println!("wrote {}", path.display());
    }
    ExitCode::SUCCESS
}

fn selftest_checks() -> Vec<(&'static str, Box<dyn Fn() -> Result<(), String>>)> {
    vec![
        (
            "spline-partition-of-unity",
            Box::new(|| {
                let spec = SplineSpec::new(GridSpec::new(-1.0, 1.0, 8, 3));
                for i in 0..1000 {
                    let x = -1.0 + 2.0 * i as f64 / 999.0;
                    let (_, basis) = spec.local_basis(x);
                    let sum: f64 = basis.iter().sum();
                    if (sum - 1.0).abs() > 1e-10 {
                        return Err(format!("sum {sum} at x {x}"));
                    }
                }
                Ok(())
            }),
        ),
        (
            "snapshot-restore",
            Box::new(|| {
                let cfg = ModelConfig::new(2, 3, BasisKind::Spline, (-1.0, 1.0), 7);
                let mut model = KanModel::new(cfg);
                let snap = model.snapshot();
                model.layer1[0].params[0] += 1.0;
                model.restore(&snap);
                if model.matches_snapshot(&snap) {
                    Ok(())
                } else {
                    Err("parameters differ after restore".to_string())
                }
            }),
        ),
        (
            "exact-mwu",
            Box::new(|| {
                let (_, p) = mwu_one_sided(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
                if (p - 0.05).abs() < 1e-12 {
                    Ok(())
                } else {
                    Err(format!("p {p}, wanted 0.05"))
                }
            }),
        ),
        (
            "holm-adjust",
            Box::new(|| {
                let adj = holm_adjust(&[0.01, 0.02, 0.20]);
                let want = [0.03, 0.04, 0.20];
                for (a, w) in adj.iter().zip(want) {
                    if (a - w).abs() > 1e-12 {
                        return Err(format!("{adj:?}, wanted {want:?}"));
                    }
                }
                Ok(())
            }),
        ),
        (
            "reduction-arithmetic",
            Box::new(|| {
                for (ours, base, want) in
                    [(2.12e-2, 9.49, "99.8"), (3.05e-5, 2.17e-4, "85.9")]
                {
                    let got = format!("{:.1}", reduction_pct(ours, base).unwrap());
                    if got != want {
                        return Err(format!("got {got}, wanted {want}"));
                    }
                }
                Ok(())
            }),
        ),
        (
            "expr-round-trip",
            Box::new(|| {
                let text = "sin(x1) + x2^2";
                let tree = expr::parse(text).map_err(|e| e.to_string())?;
                let again = expr::parse(&expr::serialize(&tree)).map_err(|e| e.to_string())?;
                if tree == again {
                    Ok(())
                } else {
                    Err("round-trip changed the tree".to_string())
                }
            }),
        ),
        (
            "end-to-end-gsr",
            Box::new(|| {
                let task = parse_manifest(
                    r#"[{"name": "line", "formula": "0.5*x1",
                         "vars": [{"name": "x1", "lo": -2.0, "hi": 2.0}]}]"#,
                )
                .map_err(|e| e.to_string())?
                .remove(0);
                let knobs = RunKnobs {
                    caps: SampleCaps::new(60, 30),
                    steps_per_stage: 50,
                    tau: 5,
                    wall_cap_secs: 120,
                };
                let cfg = OfatConfig { m: 2, lambda: 1e-2, cycles: 1, seed: 1 };
                let done = execute(&task, Pipeline::Gsr, cfg, &knobs)
                    .map_err(|e| e.reason())?;
                if done.test_mse.is_finite() {
                    Ok(())
                } else {
                    Err("non-finite test mse".to_string())
                }
            }),
        ),
    ]
}

fn cmd_selftest() -> ExitCode {
    let mut failures = 0;
    for (name, check) in selftest_checks() {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                failures += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failures == 0 {
        println!("selftest ok");
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUN)
    }
}
