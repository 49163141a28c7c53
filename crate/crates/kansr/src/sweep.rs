//! OFAT sweep orchestration: plan enumeration around the reference
//! configuration, pipeline execution with failure capture, result rows, and
//! distribution building for the report stage.

use crate::data::{sample_dataset, SampleCaps, TaskSpec};
use crate::expr;
use crate::extract::{autosym, gsr, GsrConfig, POLISH_STEPS};
use crate::gates::{discretize, refine_restricted, train_gmp, GmpConfig};
use crate::network::{
    fit_stage, train_schedule, BasisKind, KanModel, ModelConfig, RunBudget, RunFailure,
    SplitData, TrainConfig, TrainReport,
};
use crate::stats::OfatDistribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

/// The five extraction pipelines. FastKAN variants swap the spline basis for
/// Gaussian RBFs; GMP trains a gated model instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    #[serde(rename = "AutoSym")]
    AutoSym,
    #[serde(rename = "FastKAN+AutoSym")]
    FastKanAutoSym,
    #[serde(rename = "GSR")]
    Gsr,
    #[serde(rename = "FastKAN+GSR")]
    FastKanGsr,
    #[serde(rename = "GMP")]
    Gmp,
}

impl Pipeline {
    pub const ALL: [Pipeline; 5] = [
        Pipeline::AutoSym,
        Pipeline::FastKanAutoSym,
        Pipeline::Gsr,
        Pipeline::FastKanGsr,
        Pipeline::Gmp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::AutoSym => "AutoSym",
            Pipeline::FastKanAutoSym => "FastKAN+AutoSym",
            Pipeline::Gsr => "GSR",
            Pipeline::FastKanGsr => "FastKAN+GSR",
            Pipeline::Gmp => "GMP",
        }
    }

    pub fn basis(self) -> BasisKind {
        match self {
            Pipeline::FastKanAutoSym | Pipeline::FastKanGsr => BasisKind::Rbf,
            _ => BasisKind::Spline,
        }
    }
}

impl std::fmt::Display for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Pipeline {
    type Err = String;
    /// Accepts the canonical names case-insensitively, with `-` for `+` so
    /// shells never need quoting.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "+");
        Pipeline::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| format!("unknown pipeline '{s}'"))
    }
}

/// One hyper-parameter setting of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfatConfig {
    pub m: usize,
    pub lambda: f64,
    pub cycles: usize,
    pub seed: u64,
}

impl OfatConfig {
    /// Hashable identity; lambda compared by bits.
    pub fn key(&self) -> (usize, u64, usize, u64) {
        (self.m, self.lambda.to_bits(), self.cycles, self.seed)
    }
}

fn default_caps() -> SampleCaps {
    SampleCaps::default()
}

fn default_steps() -> usize {
    200
}

fn default_tau() -> usize {
    100
}

fn default_wall() -> u64 {
    600
}

/// An OFAT sweep: factor level lists, the reference configuration every
/// factor pivots around, and the pipelines to run. The remaining knobs have
/// paper-scale defaults so desk-scale plans can shrink them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPlan {
    pub widths: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub cycles: Vec<usize>,
    pub seeds: Vec<u64>,
    pub reference: OfatConfig,
    pub pipelines: Vec<Pipeline>,
    /// Task names to run; empty means every task in the manifest.
    #[serde(default)]
    pub tasks: Vec<String>,
    #[serde(default = "default_caps")]
    pub caps: SampleCaps,
    #[serde(default = "default_steps")]
    pub steps_per_stage: usize,
    #[serde(default = "default_tau")]
    pub tau: usize,
    /// Per-run wall-clock cap; a run past it becomes an invalid result.
    #[serde(default = "default_wall")]
    pub wall_cap_secs: u64,
}

impl SweepPlan {
    pub fn load(path: &Path) -> Result<SweepPlan, PlanError> {
        let text = std::fs::read_to_string(path).map_err(|e| PlanError::Io(e.to_string()))?;
        let plan: SweepPlan =
            serde_json::from_str(&text).map_err(|e| PlanError::Format(e.to_string()))?;
        Ok(plan)
    }

    pub fn knobs(&self) -> RunKnobs {
        RunKnobs {
            caps: self.caps,
            steps_per_stage: self.steps_per_stage,
            tau: self.tau,
            wall_cap_secs: self.wall_cap_secs,
        }
    }
}

/// The non-factor settings of a run, shared by the sweep and the one-shot
/// CLI commands.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RunKnobs {
    pub caps: SampleCaps,
    pub steps_per_stage: usize,
    pub tau: usize,
    pub wall_cap_secs: u64,
}

impl Default for RunKnobs {
    fn default() -> Self {
        RunKnobs {
            caps: SampleCaps::default(),
            steps_per_stage: default_steps(),
            tau: default_tau(),
            wall_cap_secs: default_wall(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("cannot read plan: {0}")]
    Io(String),
    #[error("plan json: {0}")]
    Format(String),
    #[error("reference {field} = {value} is not a level of that factor")]
    MissingReference { field: &'static str, value: String },
    #[error("plan selects no pipelines")]
    NoPipelines,
    #[error("plan names task '{0}' which the manifest does not define")]
    UnknownTask(String),
}

/// The OFAT run list: each factor swept through its levels with the other
/// factors held at the reference. The reference setting appears once per
/// factor, so the paper's plan yields 15 entries and 12 unique settings.
pub fn enumerate_ofat(plan: &SweepPlan) -> Result<Vec<OfatConfig>, PlanError> {
    let r = plan.reference;
    if !plan.widths.contains(&r.m) {
        return Err(PlanError::MissingReference { field: "m", value: r.m.to_string() });
    }
    if !plan.lambdas.iter().any(|l| l.to_bits() == r.lambda.to_bits()) {
        return Err(PlanError::MissingReference {
            field: "lambda",
            value: r.lambda.to_string(),
        });
    }
    if !plan.cycles.contains(&r.cycles) {
        return Err(PlanError::MissingReference {
            field: "cycles",
            value: r.cycles.to_string(),
        });
    }
    if !plan.seeds.contains(&r.seed) {
        return Err(PlanError::MissingReference { field: "seed", value: r.seed.to_string() });
    }
    let mut out = Vec::new();
    for &m in &plan.widths {
        out.push(OfatConfig { m, ..r });
    }
    for &lambda in &plan.lambdas {
        out.push(OfatConfig { lambda, ..r });
    }
    for &cycles in &plan.cycles {
        out.push(OfatConfig { cycles, ..r });
    }
    for &seed in &plan.seeds {
        out.push(OfatConfig { seed, ..r });
    }
    Ok(out)
}

/// First-appearance deduplication of the enumerated list.
pub fn unique_configs(configs: &[OfatConfig]) -> Vec<OfatConfig> {
    let mut seen = std::collections::BTreeSet::new();
    configs.iter().filter(|c| seen.insert(c.key())).copied().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub dataset: String,
    pub pipeline: Pipeline,
    pub config: OfatConfig,
    pub test_mse: Option<f64>,
    pub valid: bool,
    /// Failure code for invalid runs, empty otherwise.
    pub reason: String,
    pub expression: String,
    pub wall_ms: u64,
}

/// Test-only fault injection: returning a failure for a job makes the runner
/// record it without training.
pub type FaultHook<'a> =
    Option<&'a (dyn Fn(&str, Pipeline, &OfatConfig) -> Option<RunFailure> + Sync)>;

fn input_range(xs: &[Vec<f64>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in xs {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

/// A finished pipeline run: the post-extraction model, its canonical
/// expression text, the test MSE, and the staged training log.
#[derive(Clone, Debug)]
pub struct Executed {
    pub model: KanModel,
    pub expression: String,
    pub test_mse: f64,
    pub train: TrainReport,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecError {
    Sample(String),
    Run(RunFailure),
    NonFiniteMse,
}

impl ExecError {
    /// Failure code recorded in the results CSV.
    pub fn reason(&self) -> String {
        match self {
            ExecError::Sample(e) => format!("sample-error: {e}"),
            ExecError::Run(f) => f.reason().to_string(),
            ExecError::NonFiniteMse => "non-finite-mse".to_string(),
        }
    }
}

/// Run one (task, pipeline, config) job end to end: sample, train on the
/// schedule, extract an expression, score the test MSE.
pub fn execute(
    task: &TaskSpec,
    pipeline: Pipeline,
    cfg: OfatConfig,
    knobs: &RunKnobs,
) -> Result<Executed, ExecError> {
    let ds = sample_dataset(task, cfg.seed, knobs.caps)
        .map_err(|e| ExecError::Sample(e.to_string()))?;
    let budget = RunBudget::with_cap(Duration::from_secs(knobs.wall_cap_secs));
    let split = SplitData::from_train(&ds.train_x, &ds.train_y, cfg.seed);
    let (lo, hi) = input_range(&ds.train_x);
    let mc = ModelConfig::new(task.dim(), cfg.m, pipeline.basis(), (lo, hi), cfg.seed);
    let tc = TrainConfig {
        lambda: cfg.lambda,
        cycles: cfg.cycles,
        steps_per_stage: knobs.steps_per_stage,
        ..TrainConfig::reference(cfg.seed)
    };
    let ran: Result<(KanModel, String, TrainReport), RunFailure> = (|| match pipeline {
        Pipeline::AutoSym | Pipeline::FastKanAutoSym => {
            let mut model = KanModel::new(mc);
            let train = train_schedule(&mut model, &split, &tc, &budget)?;
            let rep = autosym(&mut model, &split, cfg.seed, tc.lr, &budget)?;
            Ok((model, expr::serialize(&rep.expression), train))
        }
        Pipeline::Gsr | Pipeline::FastKanGsr => {
            let mut model = KanModel::new(mc);
            let train = train_schedule(&mut model, &split, &tc, &budget)?;
            let gc = GsrConfig { tau: knobs.tau, ..GsrConfig::new(cfg.seed) };
            let rep = gsr(&mut model, &split, &gc, &budget)?;
            Ok((model, expr::serialize(&rep.expression), train))
        }
        Pipeline::Gmp => {
            let gmp = GmpConfig::default();
            let mut model = KanModel::new_gated(mc, gmp.per_op_scale);
            let rep = train_gmp(&mut model, &split, &tc, &gmp, &budget)?;
            discretize(&mut model);
            if gmp.refine {
                let gc = GsrConfig { tau: knobs.tau, ..GsrConfig::new(cfg.seed) };
                refine_restricted(&mut model, &split, &rep.retained, &gc, &budget)?;
            }
            fit_stage(&mut model, &split, 0.0, None, POLISH_STEPS, tc.lr, &budget)?;
            let (e, _) = model.compose_expression();
            Ok((model, expr::serialize(&e), rep.train))
        }
    })();
    let (model, expression, train) = ran.map_err(ExecError::Run)?;
    let test_mse = model.mse_on(&ds.test_x, &ds.test_y);
    if !test_mse.is_finite() {
        return Err(ExecError::NonFiniteMse);
    }
    Ok(Executed { model, expression, test_mse, train })
}

/// `execute` folded into a result row. Every failure mode becomes an
/// invalid result; nothing panics the sweep.
pub fn run_pipeline(
    task: &TaskSpec,
    pipeline: Pipeline,
    cfg: OfatConfig,
    knobs: &RunKnobs,
) -> RunResult {
    run_pipeline_with(task, pipeline, cfg, knobs, None)
}

pub fn run_pipeline_with(
    task: &TaskSpec,
    pipeline: Pipeline,
    cfg: OfatConfig,
    knobs: &RunKnobs,
    hook: FaultHook,
) -> RunResult {
    let start = Instant::now();
    let mut row = RunResult {
        dataset: task.name.clone(),
        pipeline,
        config: cfg,
        test_mse: None,
        valid: false,
        reason: String::new(),
        expression: String::new(),
        wall_ms: 0,
    };
    let injected = hook.and_then(|h| h(&task.name, pipeline, &cfg));
    match injected.map(ExecError::Run).map_or_else(|| execute(task, pipeline, cfg, knobs), Err) {
        Ok(done) => {
            row.test_mse = Some(done.test_mse);
            row.valid = true;
            row.expression = done.expression;
        }
        Err(e) => row.reason = e.reason(),
    }
    row.wall_ms = start.elapsed().as_millis() as u64;
    row
}

fn select_tasks<'a>(
    plan: &SweepPlan,
    tasks: &'a [TaskSpec],
) -> Result<Vec<&'a TaskSpec>, PlanError> {
    if plan.tasks.is_empty() {
        return Ok(tasks.iter().collect());
    }
    plan.tasks
        .iter()
        .map(|name| {
            tasks
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| PlanError::UnknownTask(name.clone()))
        })
        .collect()
}

type JobKey = (String, &'static str, (usize, u64, usize, u64));

fn job_key(dataset: &str, pipeline: Pipeline, cfg: &OfatConfig) -> JobKey {
    (dataset.to_string(), pipeline.name(), cfg.key())
}

/// Run every unique (dataset, pipeline, config) job of the plan, in plan
/// order. One result per unique job; see `expand_rows` for the per-factor
/// row expansion.
pub fn run_sweep(plan: &SweepPlan, tasks: &[TaskSpec]) -> Result<Vec<RunResult>, PlanError> {
    run_sweep_with(plan, tasks, None, false, None)
}

/// Full-control variant: optional fault hook, zeroed wall times for
/// byte-level comparisons, and an optional progress file. Jobs already in
/// the progress file are reused instead of re-run; fresh completions are
/// appended to it, so an interrupted sweep resumes without duplicates.
pub fn run_sweep_with(
    plan: &SweepPlan,
    tasks: &[TaskSpec],
    hook: FaultHook,
    zero_wall: bool,
    progress: Option<&Path>,
) -> Result<Vec<RunResult>, PlanError> {
    if plan.pipelines.is_empty() {
        return Err(PlanError::NoPipelines);
    }
    let selected = select_tasks(plan, tasks)?;
    let uniques = unique_configs(&enumerate_ofat(plan)?);

    let mut done: BTreeMap<JobKey, RunResult> = BTreeMap::new();
    if let Some(path) = progress {
        if let Ok(text) = std::fs::read_to_string(path) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                if let Ok(r) = serde_json::from_str::<RunResult>(line) {
                    done.insert(job_key(&r.dataset, r.pipeline, &r.config), r);
                }
            }
        }
    }

    let mut jobs = Vec::new();
    for task in &selected {
        for &pipeline in &plan.pipelines {
            for &cfg in &uniques {
                jobs.push((*task, pipeline, cfg));
            }
        }
    }
    let pending: Vec<&(&TaskSpec, Pipeline, OfatConfig)> = jobs
        .iter()
        .filter(|(t, p, c)| !done.contains_key(&job_key(&t.name, *p, c)))
        .collect();
    let knobs = plan.knobs();
    let fresh: Vec<RunResult> = pending
        .par_iter()
        .map(|(task, pipeline, cfg)| run_pipeline_with(task, *pipeline, *cfg, &knobs, hook))
        .collect();
    if let Some(path) = progress {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| PlanError::Io(e.to_string()))?;
        for r in &fresh {
            let line = serde_json::to_string(r).expect("run result serializes");
            writeln!(file, "{line}").map_err(|e| PlanError::Io(e.to_string()))?;
        }
    }
    for r in fresh {
        done.insert(job_key(&r.dataset, r.pipeline, &r.config), r);
    }

    let mut out = Vec::with_capacity(jobs.len());
    for (task, pipeline, cfg) in &jobs {
        let mut r = done[&job_key(&task.name, *pipeline, cfg)].clone();
        if zero_wall {
            r.wall_ms = 0;
        }
        out.push(r);
    }
    Ok(out)
}

/// Expand unique results back onto the full enumerated run list, so the
/// reference row appears once per factor exactly as the plan counts runs.
pub fn expand_rows(
    plan: &SweepPlan,
    results: &[RunResult],
) -> Result<Vec<RunResult>, PlanError> {
    let list = enumerate_ofat(plan)?;
    let mut by_key: BTreeMap<JobKey, &RunResult> = BTreeMap::new();
    for r in results {
        by_key.insert(job_key(&r.dataset, r.pipeline, &r.config), r);
    }
    let mut datasets: Vec<&str> = Vec::new();
    for r in results {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let mut rows = Vec::new();
    for dataset in datasets {
        for &pipeline in &plan.pipelines {
            for cfg in &list {
                let key = job_key(dataset, pipeline, cfg);
                if let Some(r) = by_key.get(&key) {
                    rows.push((*r).clone());
                }
            }
        }
    }
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Results CSV in the documented schema. Invalid runs carry `NA` in the mse
/// column and their reason code.
pub fn results_csv(rows: &[RunResult]) -> String {
    let mut out = String::from(
        "dataset,pipeline,m,lambda,cycles,seed,test_mse,valid,reason,expression,wall_ms\n",
    );
    for r in rows {
        let mse = r.test_mse.map_or("NA".to_string(), |v| format!("{v}"));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.dataset,
            r.pipeline,
            r.config.m,
            r.config.lambda,
            r.config.cycles,
            r.config.seed,
            mse,
            r.valid,
            csv_field(&r.reason),
            csv_field(&r.expression),
            r.wall_ms
        );
    }
    out
}

/// Parse rows written by `results_csv`.
pub fn parse_results_csv(text: &str) -> Result<Vec<RunResult>, String> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let want = [
        "dataset", "pipeline", "m", "lambda", "cycles", "seed", "test_mse", "valid", "reason",
        "expression", "wall_ms",
    ];
    let got = rdr.headers().map_err(|e| e.to_string())?.clone();
    if got.iter().ne(want) {
        return Err(format!("results csv header mismatch: {got:?}"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_num = |i: usize, what: &str| -> Result<f64, String> {
            field(i).parse().map_err(|_| format!("bad {what}: '{}'", field(i)))
        };
        let test_mse = match field(6) {
            "NA" => None,
            v => Some(v.parse().map_err(|_| format!("bad test_mse: '{v}'"))?),
        };
        out.push(RunResult {
            dataset: field(0).to_string(),
            pipeline: field(1).parse()?,
            config: OfatConfig {
                m: parse_num(2, "m")? as usize,
                lambda: parse_num(3, "lambda")?,
                cycles: parse_num(4, "cycles")? as usize,
                seed: parse_num(5, "seed")? as u64,
            },
            test_mse,
            valid: field(7) == "true",
            reason: field(8).to_string(),
            expression: field(9).to_string(),
            wall_ms: parse_num(10, "wall_ms")? as u64,
        });
    }
    Ok(out)
}

/// Aggregate per (dataset, pipeline) distributions over unique
/// configurations. With `exclude_seed_factor` only runs at the reference
/// seed contribute, which drops the explicit seed sweep from the
/// distribution. Invalid runs are excluded from the samples but counted.
pub fn build_distributions(
    results: &[RunResult],
    reference: OfatConfig,
    exclude_seed_factor: bool,
) -> Vec<OfatDistribution> {
    let mut order: Vec<(String, Pipeline)> = Vec::new();
    for r in results {
        let k = (r.dataset.clone(), r.pipeline);
        if !order.contains(&k) {
            order.push(k);
        }
    }
    let mut out = Vec::new();
    for (dataset, pipeline) in order {
        let mut seen = std::collections::BTreeSet::new();
        let mut samples = Vec::new();
        let mut n_invalid = 0;
        for r in results {
            if r.dataset != dataset || r.pipeline != pipeline {
                continue;
            }
            if exclude_seed_factor && r.config.seed != reference.seed {
                continue;
            }
            if !seen.insert(r.config.key()) {
                continue;
            }
            match r.test_mse {
                Some(v) if r.valid => samples.push(v),
                _ => n_invalid += 1,
            }
        }
        out.push(OfatDistribution {
            method: pipeline.name().to_string(),
            dataset,
            samples,
            n_invalid,
        });
    }
    out
}

/// Mean and sample standard deviation of valid test MSE over the seed runs
/// at the reference hyper-parameters, per (dataset, pipeline).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSensitivityRow {
    pub dataset: String,
    pub pipeline: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n_valid: usize,
    pub n_seeds: usize,
}

pub fn seed_sensitivity(results: &[RunResult], reference: OfatConfig) -> Vec<SeedSensitivityRow> {
    let mut order: Vec<(String, Pipeline)> = Vec::new();
    for r in results {
        let k = (r.dataset.clone(), r.pipeline);
        if !order.contains(&k) {
            order.push(k);
        }
    }
    let at_ref = |c: &OfatConfig| {
        c.m == reference.m
            && c.lambda.to_bits() == reference.lambda.to_bits()
            && c.cycles == reference.cycles
    };
    let mut out = Vec::new();
    for (dataset, pipeline) in order {
        let mut seen = std::collections::BTreeSet::new();
        let mut mses = Vec::new();
        let mut n_seeds = 0;
        for r in results {
            if r.dataset != dataset || r.pipeline != pipeline || !at_ref(&r.config) {
                continue;
            }
            if !seen.insert(r.config.seed) {
                continue;
            }
            n_seeds += 1;
            if let (true, Some(v)) = (r.valid, r.test_mse) {
                mses.push(v);
            }
        }
        let n = mses.len();
        let (mean, std) = if n == 0 {
            (None, None)
        } else {
            let mean = mses.iter().sum::<f64>() / n as f64;
            let std = if n >= 2 {
                (mses.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            (Some(mean), Some(std))
        };
        out.push(SeedSensitivityRow {
            dataset,
            pipeline: pipeline.name().to_string(),
            mean,
            std,
            n_valid: n,
            n_seeds,
        });
    }
    out
}
