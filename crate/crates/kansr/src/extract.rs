//! Post-hoc symbolic extraction.
//!
//! Two strategies over a trained model: `autosym` fits a library operator to
//! each edge curve in isolation, `gsr` greedily converts one edge at a time
//! and scores every candidate operator by the end-to-end validation loss
//! after briefly fine-tuning the whole model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use crate::expr::Expr;
use crate::network::{
    fit_stage, EdgeId, EdgeImportance, EdgeKind, KanModel, RunBudget, RunFailure, SplitData,
};
use crate::oplib::{
    fit_affine_local, fit_grid, rank_forms_locally, LocalFit, OpForm, FIT_GRID_POINTS, LIBRARY,
    LOCAL_FIT_STEPS,
};
use crate::seeding;

/// Steps of the short non-regularised polishing fit run after extraction.
pub const POLISH_STEPS: usize = 200;

/// Candidate operators the greedy search may try on each edge.
#[derive(Clone, Debug, Default)]
pub enum CandidateSet {
    /// Every library operator, on every numeric edge.
    #[default]
    Full,
    /// Explicit candidate lists keyed by edge ordinal; edges without an
    /// entry are not eligible for conversion.
    PerEdge(BTreeMap<usize, Vec<OpForm>>),
}

/// Settings for greedy in-context symbolic regression.
#[derive(Clone, Debug)]
pub struct GsrConfig {
    /// Fine-tune steps per candidate trial; zero scores plain substitution.
    pub tau: usize,
    /// Edge selections to perform; `None` continues until no edge is
    /// eligible.
    pub max_edges: Option<usize>,
    /// Adam learning rate for trial and post-commit fits.
    pub lr: f64,
    /// Fine-tune for another `tau` steps after each commit.
    pub post_commit: bool,
    pub candidates: CandidateSet,
    pub seed: u64,
}

impl GsrConfig {
    pub fn new(seed: u64) -> Self {
        GsrConfig {
            tau: 100,
            max_edges: None,
            lr: 1e-2,
            post_commit: true,
            candidates: CandidateSet::Full,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_edges == Some(0) {
            return Err("max_edges must be at least 1".into());
        }
        if let CandidateSet::PerEdge(map) = &self.candidates {
            if map.values().any(|forms| forms.is_empty()) {
                return Err("per-edge candidate lists must be non-empty".into());
            }
        }
        Ok(())
    }
}

/// One candidate evaluation inside the greedy search.
#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub edge: EdgeId,
    pub edge_ordinal: usize,
    pub form: OpForm,
    /// Validation MSE after the trial fine-tune; infinite when the trial
    /// diverged.
    pub j: f64,
    pub committed: bool,
    pub wall_ms: u64,
}

/// Render a trial log as CSV.
pub fn trial_log_csv(run_id: &str, trials: &[TrialRecord]) -> String {
    let mut out = String::from("run-id,edge-id,form-id,J,committed,wall-time-ms\n");
    for t in trials {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            run_id,
            t.edge_ordinal,
            t.form.id(),
            t.j,
            t.committed,
            t.wall_ms
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct AutosymReport {
    pub expression: Expr,
    /// False when a flagged edge left a placeholder in the expression.
    pub complete: bool,
    /// Ordinals of edges left numeric because no operator fit their curve.
    pub flagged: Vec<usize>,
    /// Training loss after the polishing fit.
    pub polish_loss: f64,
}

#[derive(Clone, Debug)]
pub struct GsrReport {
    pub expression: Expr,
    pub complete: bool,
    pub trials: Vec<TrialRecord>,
    /// Ordinals of edges where every candidate trial was invalid.
    pub flagged: Vec<usize>,
    /// Edges committed to a symbolic operator.
    pub converted: usize,
    /// Fine-tune steps scheduled across trials and post-commit fits.
    pub step_batches: usize,
}

/// The locally best `(form, affine)` per numeric edge, each fitted to 64
/// curve samples taken over the edge's observed input range. `None` when no
/// operator reaches a finite fit error.
pub fn autosym_fits(
    model: &KanModel,
    xs: &[Vec<f64>],
    seed: u64,
) -> Vec<(EdgeId, Option<LocalFit>)> {
    let (r1, r2) = model.edge_input_ranges(xs);
    let mut out = Vec::new();
    for id in model.all_edge_ids() {
        if model.edge(id).kind != EdgeKind::Numeric {
            continue;
        }
        let (lo, hi) = match id {
            EdgeId::L1(e) => r1[e],
            EdgeId::L2(e) => r2[e],
        };
        let grid = fit_grid(lo, hi, FIT_GRID_POINTS);
        let ys = model.edge_curve(id, &grid);
        let ordinal = model.edge_ordinal(id) as u64;
        let fit_seed = seeding::derive(seed, &[seeding::tag("autosym"), ordinal]);
        let best = rank_forms_locally(&grid, &ys, fit_seed, LOCAL_FIT_STEPS)
            .into_iter()
            .find(|f| f.mse.is_finite());
        out.push((id, best));
    }
    out
}

/// Replace every numeric edge by its best isolated operator fit, then polish
/// the whole model with a short non-regularised fit.
///
/// All curves are sampled from the model as passed in, so the per-edge
/// conversions are independent of each other.
pub fn autosym(
    model: &mut KanModel,
    split: &SplitData,
    seed: u64,
    lr: f64,
    budget: &RunBudget,
) -> Result<AutosymReport, RunFailure> {
    let mut flagged = Vec::new();
    for (id, fit) in autosym_fits(model, &split.grad_x, seed) {
        match fit {
            Some(f) => {
                let params = f.params.to_array().to_vec();
                model.replace_edge(id, EdgeKind::Symbolic { form: f.form }, params);
            }
            None => flagged.push(model.edge_ordinal(id)),
        }
    }
    let polish_loss = fit_stage(model, split, 0.0, None, POLISH_STEPS, lr, budget)?;
    let (expression, complete) = model.compose_expression();
    Ok(AutosymReport { expression, complete, flagged, polish_loss })
}

fn eligible(
    model: &KanModel,
    id: EdgeId,
    ordinal: usize,
    done: &BTreeSet<usize>,
    cands: &CandidateSet,
) -> bool {
    if done.contains(&ordinal) {
        return false;
    }
    match cands {
        CandidateSet::Full => model.edge(id).kind == EdgeKind::Numeric,
        CandidateSet::PerEdge(map) => {
            map.contains_key(&ordinal)
                && matches!(model.edge(id).kind, EdgeKind::Numeric | EdgeKind::Symbolic { .. })
        }
    }
}

/// Most important eligible edge, ties broken by lowest ordinal.
fn select_edge(
    model: &KanModel,
    imp: &EdgeImportance,
    done: &BTreeSet<usize>,
    cands: &CandidateSet,
) -> Option<EdgeId> {
    let mut best: Option<(f64, EdgeId)> = None;
    for id in model.all_edge_ids() {
        let ordinal = model.edge_ordinal(id);
        if !eligible(model, id, ordinal, done, cands) {
            continue;
        }
        let score = match id {
            EdgeId::L1(e) => imp.l1[e],
            EdgeId::L2(e) => imp.l2[e],
        };
        let better = match &best {
            None => true,
            Some((b, _)) => score > *b,
        };
        if better {
            best = Some((score, id));
        }
    }
    best.map(|(_, id)| id)
}

/// Candidates for one edge in ascending form id, with the currently
/// committed operator always included.
fn candidate_forms(model: &KanModel, id: EdgeId, ordinal: usize, cands: &CandidateSet) -> Vec<OpForm> {
    let mut forms = match cands {
        CandidateSet::Full => LIBRARY.to_vec(),
        CandidateSet::PerEdge(map) => map[&ordinal].clone(),
    };
    if let EdgeKind::Symbolic { form } = model.edge(id).kind {
        forms.push(form);
    }
    forms.sort_by_key(|f| f.id());
    forms.dedup();
    forms
}

/// Affine warm start for one trial: the current parameters when the
/// candidate is already the committed operator, otherwise a local fit to the
/// sampled curve seeded per `(seed, edge, form)`.
fn warm_params(
    model: &KanModel,
    id: EdgeId,
    ordinal: usize,
    cand: OpForm,
    grid: &[f64],
    ys: &[f64],
    seed: u64,
) -> Vec<f64> {
    if let EdgeKind::Symbolic { form } = model.edge(id).kind {
        if form == cand {
            return model.edge(id).params.clone();
        }
    }
    let trial_seed =
        seeding::derive(seed, &[seeding::tag("gsr-trial"), ordinal as u64, cand.id() as u64]);
    fit_affine_local(grid, ys, cand, trial_seed, LOCAL_FIT_STEPS).params.to_array().to_vec()
}

/// Greedy in-context symbolic regression.
///
/// Repeats up to `max_edges` times: recompute edge importance, pick the most
/// important eligible edge, and for each candidate operator snapshot the
/// model, substitute the operator with a warm-started affine, fine-tune the
/// full model for `tau` steps, score the validation MSE, and restore. The
/// lowest-scoring candidate is committed permanently (ties fall to the
/// lowest form id) and briefly fine-tuned again. Edges where every candidate
/// diverges are flagged and skipped.
pub fn gsr(
    model: &mut KanModel,
    split: &SplitData,
    cfg: &GsrConfig,
    budget: &RunBudget,
) -> Result<GsrReport, RunFailure> {
    assert!(!split.val_x.is_empty(), "gsr scores trials on the validation split");
    let mut trials: Vec<TrialRecord> = Vec::new();
    let mut flagged = Vec::new();
    let mut done: BTreeSet<usize> = BTreeSet::new();
    let mut converted = 0usize;
    let mut step_batches = 0usize;

    for _ in 0..cfg.max_edges.unwrap_or(usize::MAX) {
        if budget.exceeded() {
            return Err(RunFailure::Timeout);
        }
        let imp = model.edge_importance(&split.grad_x);
        let Some(pick) = select_edge(model, &imp, &done, &cfg.candidates) else {
            break;
        };
        let ordinal = model.edge_ordinal(pick);

        let (r1, r2) = model.edge_input_ranges(&split.grad_x);
        let (lo, hi) = match pick {
            EdgeId::L1(e) => r1[e],
            EdgeId::L2(e) => r2[e],
        };
        let grid = fit_grid(lo, hi, FIT_GRID_POINTS);
        let ys = model.edge_curve(pick, &grid);

        let snap = model.snapshot();
        let mut best: Option<(f64, OpForm, Vec<f64>, usize)> = None;
        for cand in candidate_forms(model, pick, ordinal, &cfg.candidates) {
            if budget.exceeded() {
                return Err(RunFailure::Timeout);
            }
            let t0 = Instant::now();
            let warm = warm_params(model, pick, ordinal, cand, &grid, &ys, cfg.seed);
            model.replace_edge(pick, EdgeKind::Symbolic { form: cand }, warm.clone());
            let mut diverged = false;
            if cfg.tau > 0 {
                step_batches += cfg.tau;
                match fit_stage(model, split, 0.0, None, cfg.tau, cfg.lr, budget) {
                    Ok(_) => {}
                    Err(RunFailure::NonFiniteLoss) => diverged = true,
                    Err(e) => {
                        model.restore(&snap);
                        return Err(e);
                    }
                }
            }
            let j_raw =
                if diverged { f64::INFINITY } else { model.mse_on(&split.val_x, &split.val_y) };
            let j = if j_raw.is_finite() { j_raw } else { f64::INFINITY };
            trials.push(TrialRecord {
                edge: pick,
                edge_ordinal: ordinal,
                form: cand,
                j,
                committed: false,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
            model.restore(&snap);
            debug_assert!(model.matches_snapshot(&snap), "trial restore must be bit-exact");
            let better = match &best {
                None => j.is_finite(),
                Some((bj, ..)) => j < *bj,
            };
            if better {
                best = Some((j, cand, warm, trials.len() - 1));
            }
        }

        match best {
            Some((_, form, warm, idx)) => {
                trials[idx].committed = true;
                model.replace_edge(pick, EdgeKind::Symbolic { form }, warm);
                if cfg.post_commit && cfg.tau > 0 {
                    step_batches += cfg.tau;
                    match fit_stage(model, split, 0.0, None, cfg.tau, cfg.lr, budget) {
                        // A diverging post-commit fit leaves the committed
                        // parameters untouched; the commit itself was scored
                        // finite, so the run continues.
                        Ok(_) | Err(RunFailure::NonFiniteLoss) => {}
                        Err(e) => return Err(e),
                    }
                }
                converted += 1;
            }
            None => flagged.push(ordinal),
        }
        done.insert(ordinal);
    }

    let (expression, complete) = model.compose_expression();
    Ok(GsrReport { expression, complete, trials, flagged, converted, step_batches })
}
