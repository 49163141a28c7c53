//! Gated operator edges and the Gated Matching Pursuit pipeline.
//!
//! A gated edge carries the full operator library as a soft mixture: gate
//! logits select operators through a masked softmax, each operator output is
//! affine-wrapped and passed through a scaled-asinh compression, and the edge
//! output is the probability-weighted sum. Training sparsifies the gates
//! (entropy and l1 penalties plus periodic top-k pruning), after which each
//! edge is discretised to its argmax operator and optionally refined with a
//! restricted greedy pass.

use crate::autodiff::EvalCtx;
use crate::extract::{gsr, CandidateSet, GsrConfig, GsrReport};
use crate::network::{
    fit_stage, EdgeId, EdgeKind, KanModel, RunBudget, RunFailure, SplitData, StageRecord,
    TrainConfig, TrainReport,
};
use crate::oplib::{OpForm, LIBRARY};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Operator library size; gated parameter blocks always reserve all slots so
/// masking never shifts the layout.
pub const K: usize = LIBRARY.len();

/// Mask with every operator active.
pub const FULL_MASK: u32 = (1 << K as u32) - 1;

/// Parameter block length for one gated edge:
/// `K` logits, `K` affine quadruples, then one shared or `K` per-operator
/// compression log-scales.
pub fn gated_param_len(per_op_scale: bool) -> usize {
    K + 4 * K + if per_op_scale { K } else { 1 }
}

fn logit_idx(base: usize, k: usize) -> usize {
    base + k
}

fn affine_idx(base: usize, k: usize) -> usize {
    base + K + 4 * k
}

fn scale_idx(base: usize, k: usize, per_op_scale: bool) -> usize {
    base + 5 * K + if per_op_scale { k } else { 0 }
}

pub fn active_ops(mask: u32) -> impl Iterator<Item = usize> {
    (0..K).filter(move |k| mask & (1 << *k as u32) != 0)
}

/// Scaled asinh compression: approximately linear for |z| << s, logarithmic
/// for |z| >> s.
pub fn compress(z: f64, s: f64) -> f64 {
    s * (z / s).asinh()
}

/// Masked softmax over the active logits, as `(form index, probability)`
/// pairs in ascending form order. Largest active logit is subtracted before
/// exponentiation.
fn softmax_nodes<C: EvalCtx>(ctx: &mut C, base: usize, mask: u32) -> Vec<(usize, C::V)> {
    let ks: Vec<usize> = active_ops(mask).collect();
    assert!(!ks.is_empty(), "gated edge with empty active mask");
    let logits: Vec<C::V> = ks.iter().map(|&k| ctx.param(logit_idx(base, k))).collect();
    let mut jmax = 0;
    for (j, &l) in logits.iter().enumerate() {
        if ctx.cur(l) > ctx.cur(logits[jmax]) {
            jmax = j;
        }
    }
    let top = logits[jmax];
    let exps: Vec<C::V> = logits
        .iter()
        .map(|&l| {
            let d = ctx.sub(l, top);
            ctx.exp(d)
        })
        .collect();
    let mut denom = exps[0];
    for &e in &exps[1..] {
        denom = ctx.add(denom, e);
    }
    ks.iter()
        .zip(exps)
        .map(|(&k, e)| (k, ctx.div(e, denom)))
        .collect()
}

/// Gate probabilities from a plain parameter slice.
pub fn gate_probs(params: &[f64], base: usize, mask: u32) -> Vec<(usize, f64)> {
    let mut ctx = crate::autodiff::F64Ctx::new(params);
    softmax_nodes(&mut ctx, base, mask)
}

/// Gated edge output: sum over active operators of
/// pi_k * compress(alpha_k g_k(beta_k x + gamma_k) + delta_k; s).
pub fn eval_gated<C: EvalCtx>(
    ctx: &mut C,
    base: usize,
    mask: u32,
    per_op_scale: bool,
    x: C::V,
) -> C::V {
    let probs = softmax_nodes(ctx, base, mask);
    let shared_s = if per_op_scale {
        None
    } else {
        let ls = ctx.param(scale_idx(base, 0, false));
        Some(ctx.exp(ls))
    };
    let mut out = ctx.lit(0.0);
    for (k, pi) in probs {
        let a = affine_idx(base, k);
        let alpha = ctx.param(a);
        let beta = ctx.param(a + 1);
        let gamma = ctx.param(a + 2);
        let delta = ctx.param(a + 3);
        let s = match shared_s {
            Some(s) => s,
            None => {
                let ls = ctx.param(scale_idx(base, k, true));
                ctx.exp(ls)
            }
        };
        let bx = ctx.mul(beta, x);
        let u = ctx.add(bx, gamma);
        let g = LIBRARY[k].eval(ctx, u);
        let ag = ctx.mul(alpha, g);
        let z = ctx.add(ag, delta);
        let zs = ctx.div(z, s);
        let az = ctx.asinh(zs);
        let comp = ctx.mul(s, az);
        let term = ctx.mul(pi, comp);
        out = ctx.add(out, term);
    }
    out
}

/// Per-edge gate regularizer terms: entropy of the active softmax and l1 of
/// the active logits. Probabilities that underflow to exactly 0 contribute 0
/// entropy (the 0*ln 0 := 0 convention).
pub fn gate_regularizers<C: EvalCtx>(ctx: &mut C, base: usize, mask: u32) -> (C::V, C::V) {
    let probs = softmax_nodes(ctx, base, mask);
    let mut ent = ctx.lit(0.0);
    for &(_, pi) in &probs {
        if ctx.cur(pi) > 0.0 {
            let lp = ctx.ln(pi);
            let t = ctx.mul(pi, lp);
            ent = ctx.sub(ent, t);
        }
    }
    let mut l1 = ctx.lit(0.0);
    for (k, _) in probs {
        let l = ctx.param(logit_idx(base, k));
        let a = ctx.abs(l);
        l1 = ctx.add(l1, a);
    }
    (ent, l1)
}

/// Keep the k most probable active operators (ties broken by lowest form id)
/// and return the shrunk mask. No parameters change; renormalisation is
/// implicit in the masked softmax.
pub fn topk_mask(params: &[f64], base: usize, mask: u32, k: usize) -> u32 {
    assert!(k >= 1);
    let mut probs = gate_probs(params, base, mask);
    if probs.len() <= k {
        return mask;
    }
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    probs[..k]
        .iter()
        .map(|&(form, _)| 1u32 << form as u32)
        .fold(0, |m, b| m | b)
}

/// Argmax-probability operator of a gated edge and its learned affine
/// parameters, for discretisation. Ties pick the lowest form id.
pub fn argmax_op(params: &[f64], base: usize, mask: u32) -> (OpForm, [f64; 4]) {
    let probs = gate_probs(params, base, mask);
    let mut best = probs[0];
    for &(k, p) in &probs[1..] {
        if p > best.1 {
            best = (k, p);
        }
    }
    let a = affine_idx(base, best.0);
    (
        LIBRARY[best.0],
        [params[a], params[a + 1], params[a + 2], params[a + 3]],
    )
}

/// GMP hyper-parameters. The prune cap shrinks linearly from `initial_cap`
/// to `final_topk` across the schedule's prune-and-refit cycles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmpConfig {
    pub lambda_ent: f64,
    pub lambda_l1: f64,
    pub initial_cap: usize,
    pub final_topk: usize,
    pub per_op_scale: bool,
    pub refine: bool,
}

impl Default for GmpConfig {
    fn default() -> Self {
        GmpConfig {
            lambda_ent: 1e-3,
            lambda_l1: 1e-2,
            initial_cap: 10,
            final_topk: 5,
            per_op_scale: false,
            refine: true,
        }
    }
}

impl GmpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.final_topk < 1 || self.final_topk > self.initial_cap || self.initial_cap > K {
            return Err(format!(
                "gate caps must satisfy 1 <= final ({}) <= initial ({}) <= {K}",
                self.final_topk, self.initial_cap
            ));
        }
        if self.lambda_ent < 0.0 || self.lambda_l1 < 0.0 {
            return Err("gate penalty weights must be nonnegative".into());
        }
        Ok(())
    }

    /// Operator cap after prune cycle `c` of `cycles`.
    pub fn cap_at(&self, c: usize, cycles: usize) -> usize {
        if cycles == 0 || c >= cycles {
            return self.final_topk;
        }
        let span = (self.initial_cap - self.final_topk) as f64;
        (self.initial_cap as f64 - span * c as f64 / cycles as f64).round() as usize
    }
}

/// Operator sets still active on each gated edge, keyed by edge ordinal.
/// Pruned and non-gated edges are omitted.
pub fn retained_sets(model: &KanModel) -> BTreeMap<usize, Vec<OpForm>> {
    let mut out = BTreeMap::new();
    for id in model.all_edge_ids() {
        if let EdgeKind::Gated { mask } = model.edge(id).kind {
            let forms = active_ops(mask).map(|k| LIBRARY[k]).collect();
            out.insert(model.edge_ordinal(id), forms);
        }
    }
    out
}

/// Shrink every surviving gated edge to its `cap` most probable operators.
fn prune_gates(model: &mut KanModel, cap: usize) {
    for e in model.layer1.iter_mut().chain(model.layer2.iter_mut()) {
        if let EdgeKind::Gated { mask } = e.kind {
            e.kind = EdgeKind::Gated { mask: topk_mask(&e.params, 0, mask, cap) };
        }
    }
}

/// Result of the gated training schedule: stage losses plus the operator
/// sets left on each gated edge after the final prune, which bound the
/// restricted refinement.
#[derive(Clone, Debug)]
pub struct GmpTrainReport {
    pub train: TrainReport,
    pub retained: BTreeMap<usize, Vec<OpForm>>,
}

/// Gated analogue of `network::train_schedule`: the same stage layout, with
/// the entropy and l1 gate penalties active in every stage and a per-edge
/// top-k gate prune (on the shrinking cap schedule) after each node prune.
pub fn train_gmp(
    model: &mut KanModel,
    split: &SplitData,
    cfg: &TrainConfig,
    gmp: &GmpConfig,
    budget: &RunBudget,
) -> Result<GmpTrainReport, RunFailure> {
    let gate = Some((gmp.lambda_ent, gmp.lambda_l1));
    let mut train = TrainReport::default();
    let loss = fit_stage(model, split, 0.0, gate, cfg.steps_per_stage, cfg.lr, budget)?;
    train.stages.push(StageRecord { name: "init".into(), loss });
    for c in 1..=cfg.cycles {
        if budget.exceeded() {
            return Err(RunFailure::Timeout);
        }
        let imp = model.edge_importance(&split.grad_x);
        let survivors = model.prune(&imp, cfg.node_threshold, cfg.edge_threshold);
        if survivors == 0 {
            return Err(RunFailure::AllPruned);
        }
        prune_gates(model, gmp.cap_at(c, cfg.cycles));
        let loss = fit_stage(model, split, cfg.lambda, gate, cfg.steps_per_stage, cfg.lr, budget)?;
        train.stages.push(StageRecord { name: format!("cycle-{c}"), loss });
    }
    let loss = fit_stage(model, split, 0.0, gate, cfg.steps_per_stage, cfg.lr, budget)?;
    train.stages.push(StageRecord { name: "final".into(), loss });
    Ok(GmpTrainReport { retained: retained_sets(model), train })
}

/// Replace every gated edge with its argmax-probability operator and that
/// operator's learned affine, dropping the compression wrapper. Returns the
/// picks in edge id order.
pub fn discretize(model: &mut KanModel) -> Vec<(EdgeId, OpForm)> {
    let mut picks = Vec::new();
    for id in model.all_edge_ids() {
        if let EdgeKind::Gated { mask } = model.edge(id).kind {
            let (form, affine) = argmax_op(&model.edge(id).params, 0, mask);
            model.replace_edge(id, EdgeKind::Symbolic { form }, affine.to_vec());
            picks.push((id, form));
        }
    }
    picks
}

/// Greedy refinement after discretisation, restricted to the retained sets:
/// each edge may only trial the operators its gates kept, so the trial count
/// is bounded by edges x top-k.
pub fn refine_restricted(
    model: &mut KanModel,
    split: &SplitData,
    retained: &BTreeMap<usize, Vec<OpForm>>,
    cfg: &GsrConfig,
    budget: &RunBudget,
) -> Result<GsrReport, RunFailure> {
    let cfg = GsrConfig { candidates: CandidateSet::PerEdge(retained.clone()), ..cfg.clone() };
    gsr(model, split, &cfg, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_diff, max_rel_err, F64Ctx, Tape};
    use rand::Rng;

    fn id_bit() -> u32 {
        1 << OpForm::Id.id()
    }

    fn params_with(
        mask: u32,
        per_op: bool,
        logits: &[(usize, f64)],
        affines: &[(usize, [f64; 4])],
        log_s: f64,
    ) -> Vec<f64> {
        let mut p = vec![0.0; gated_param_len(per_op)];
        for &(k, l) in logits {
            p[logit_idx(0, k)] = l;
        }
        for &(k, a) in affines {
            p[affine_idx(0, k)..affine_idx(0, k) + 4].copy_from_slice(&a);
        }
        for k in active_ops(mask) {
            p[scale_idx(0, k, per_op)] = log_s;
            if !per_op {
                break;
            }
        }
        p
    }

    #[test]
    fn single_identity_op_with_large_scale_is_nearly_linear() {
        let mask = id_bit();
        let p = params_with(
            mask,
            false,
            &[],
            &[(OpForm::Id.id(), [1.0, 1.0, 0.0, 0.0])],
            1e6f64.ln(),
        );
        let mut ctx = F64Ctx::new(&p);
        for &x in &[-1.0, -0.3, 0.0, 0.4, 1.0] {
            let xv = ctx.lit(x);
            let out = eval_gated(&mut ctx, 0, mask, false, xv);
            assert!((out - x).abs() < 1e-6, "x={x} out={out}");
        }
    }

    #[test]
    fn all_zero_operator_outputs_give_zero() {
        let mask = (1 << OpForm::Sin.id()) | (1 << OpForm::Exp.id());
        let p = params_with(mask, false, &[], &[], 0.0);
        let mut ctx = F64Ctx::new(&p);
        let xv = ctx.lit(0.7);
        let out = eval_gated(&mut ctx, 0, mask, false, xv);
        assert_eq!(out, 0.0);
    }

    #[test]
    fn two_constant_ops_mix_through_compression() {
        // Forms with g == 1 and alpha 1 and 3: z values 1 and 3, pi = (.5,.5),
        // s = 1 -> 0.5*asinh(1) + 0.5*asinh(3).
        let mask = (1 << OpForm::Const.id()) | (1 << OpForm::Id.id());
        let p = params_with(
            mask,
            false,
            &[],
            &[
                (OpForm::Const.id(), [1.0, 0.0, 0.0, 0.0]),
                (OpForm::Id.id(), [3.0, 0.0, 1.0, 0.0]),
            ],
            0.0,
        );
        let mut ctx = F64Ctx::new(&p);
        let xv = ctx.lit(0.0);
        let out = eval_gated(&mut ctx, 0, mask, false, xv);
        let want = 0.5 * 1.0f64.asinh() + 0.5 * 3.0f64.asinh();
        assert!((out - want).abs() < 1e-12, "{out} vs {want}");
        assert!((want - 1.3499100231258049).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_sums_to_one() {
        let mut rng = crate::seeding::stream(7, &[crate::seeding::tag("gate-simplex")]);
        for _ in 0..50 {
            let mut mask = 0u32;
            while mask.count_ones() == 0 {
                mask = rng.gen_range(1..=FULL_MASK);
            }
            let mut p = vec![0.0; gated_param_len(false)];
            for k in active_ops(mask) {
                p[k] = rng.gen_range(-6.0..6.0);
            }
            let probs = gate_probs(&p, 0, mask);
            let sum: f64 = probs.iter().map(|&(_, pi)| pi).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert_eq!(probs.len(), mask.count_ones() as usize);
        }
    }

    #[test]
    fn entropy_matches_closed_forms() {
        // Uniform over 5 active ops -> ln 5.
        let mask = 0b11111u32;
        let p = vec![0.0; gated_param_len(false)];
        let mut ctx = F64Ctx::new(&p);
        let (ent, l1) = gate_regularizers(&mut ctx, 0, mask);
        assert!((ent - 5.0f64.ln()).abs() < 1e-12);
        assert_eq!(l1, 0.0);

        // Single active op -> one-hot -> entropy 0.
        let mut ctx = F64Ctx::new(&p);
        let (ent, _) = gate_regularizers(&mut ctx, 0, 1 << 3);
        assert_eq!(ent, 0.0);

        // Logits (ln 2, 0) on two active ops -> pi = (2/3, 1/3),
        // H = ln 3 - (2/3) ln 2.
        let mut p = vec![0.0; gated_param_len(false)];
        p[0] = 2.0f64.ln();
        let mut ctx = F64Ctx::new(&p);
        let (ent, l1) = gate_regularizers(&mut ctx, 0, 0b11);
        let want = 3.0f64.ln() - (2.0 / 3.0) * 2.0f64.ln();
        assert!((ent - want).abs() < 1e-12, "{ent} vs {want}");
        assert!((want - 0.6365141682948128).abs() < 1e-12);
        assert!((l1 - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn topk_keeps_most_probable_and_renormalises() {
        // pi = (0.5, 0.3, 0.2) via log-probability logits.
        let mut p = vec![0.0; gated_param_len(false)];
        p[0] = 0.5f64.ln();
        p[1] = 0.3f64.ln();
        p[2] = 0.2f64.ln();
        let mask = 0b111u32;
        assert_eq!(topk_mask(&p, 0, mask, 3), mask);
        let m2 = topk_mask(&p, 0, mask, 2);
        assert_eq!(m2, 0b011);
        let probs = gate_probs(&p, 0, m2);
        assert!((probs[0].1 - 0.625).abs() < 1e-12);
        assert!((probs[1].1 - 0.375).abs() < 1e-12);
        // Survivor order is preserved.
        assert!(probs[0].1 > probs[1].1);
    }

    #[test]
    fn topk_one_equals_single_compressed_operator() {
        let mut p = vec![0.0; gated_param_len(false)];
        p[OpForm::Sin.id()] = 2.0;
        p[OpForm::Sq.id()] = -1.0;
        for k in [OpForm::Sin.id(), OpForm::Sq.id()] {
            p[affine_idx(0, k)..affine_idx(0, k) + 4].copy_from_slice(&[1.3, 0.9, 0.1, -0.2]);
        }
        let mask = (1 << OpForm::Sin.id()) | (1 << OpForm::Sq.id());
        let m1 = topk_mask(&p, 0, mask, 1);
        assert_eq!(m1, 1 << OpForm::Sin.id());
        let mut ctx = F64Ctx::new(&p);
        let xv = ctx.lit(0.6);
        let out = eval_gated(&mut ctx, 0, m1, false, xv);
        let z = 1.3 * (0.9f64 * 0.6 + 0.1).sin() - 0.2;
        assert!((out - compress(z, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn discretisation_picks_argmax_with_low_id_ties() {
        let mut p = vec![0.0; gated_param_len(false)];
        p[1] = 1.0;
        p[4] = 1.0;
        p[affine_idx(0, 1)..affine_idx(0, 1) + 4].copy_from_slice(&[2.0, 1.0, 0.0, 0.5]);
        let (form, aff) = argmax_op(&p, 0, 0b10111);
        assert_eq!(form.id(), 1);
        assert_eq!(aff, [2.0, 1.0, 0.0, 0.5]);
    }

    #[test]
    fn compress_is_odd_monotone_with_documented_limits() {
        let mut rng = crate::seeding::stream(9, &[crate::seeding::tag("compress")]);
        for _ in 0..200 {
            let s = rng.gen_range(1e-3..1e3f64);
            let z = rng.gen_range(-1e4..1e4f64);
            assert!((compress(-z, s) + compress(z, s)).abs() < 1e-12 * (1.0 + z.abs()));
            let z2 = z + rng.gen_range(1e-6..1.0);
            assert!(compress(z2, s) > compress(z, s));
            let small = s * 1e-3 * rng.gen_range(0.1..1.0);
            assert!((compress(small, s) - small).abs() <= 1e-6 * small.abs());
            let big = s * rng.gen_range(10.0..1e4);
            assert!(compress(big, s) <= s * ((2.0 * big / s).ln() + 1.0));
        }
    }

    #[test]
    fn gated_gradients_match_finite_differences() {
        for per_op in [false, true] {
            let mask = (1 << OpForm::Sin.id()) | (1 << OpForm::Sq.id()) | (1 << OpForm::Tanh.id());
            let mut rng = crate::seeding::stream(11, &[crate::seeding::tag("gate-grad")]);
            let mut p = vec![0.0; gated_param_len(per_op)];
            for k in active_ops(mask) {
                p[logit_idx(0, k)] = rng.gen_range(-1.0..1.0);
                for j in 0..4 {
                    p[affine_idx(0, k) + j] = rng.gen_range(-1.5..1.5);
                }
            }
            let n_scales = if per_op { K } else { 1 };
            for k in 0..n_scales {
                p[5 * K + k] = rng.gen_range(-0.5..0.5);
            }
            let x = 0.37;
            let mut tape = Tape::new();
            tape.reset(&p);
            let xv = tape.lit(x);
            let out = eval_gated(&mut tape, 0, mask, per_op, xv);
            tape.backward(out);
            let grad = tape.grad().to_vec();
            let fd = central_diff(
                |q| {
                    let mut ctx = F64Ctx::new(q);
                    let xv = ctx.lit(x);
                    eval_gated(&mut ctx, 0, mask, per_op, xv)
                },
                &p,
                1e-5,
            );
            assert!(max_rel_err(&grad, &fd) < 1e-4, "per_op={per_op}");
        }
    }

    #[test]
    fn cap_schedule_is_linear_ten_to_five() {
        let cfg = GmpConfig::default();
        assert_eq!(cfg.cap_at(1, 1), 5);
        let caps: Vec<usize> = (1..=5).map(|c| cfg.cap_at(c, 5)).collect();
        assert_eq!(caps, vec![9, 8, 7, 6, 5]);
        let caps: Vec<usize> = (1..=3).map(|c| cfg.cap_at(c, 3)).collect();
        assert_eq!(caps, vec![8, 7, 5]);
        assert!(GmpConfig { final_topk: 11, ..GmpConfig::default() }.validate().is_err());
        assert!(GmpConfig::default().validate().is_ok());
    }

    fn dataset(
        f: impl Fn(&[f64]) -> f64,
        d: usize,
        n: usize,
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = crate::seeding::stream(seed, &[crate::seeding::tag("gmp-test")]);
        let xs: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let ys = xs.iter().map(|x| f(x)).collect();
        (xs, ys)
    }

    fn gated_model(d: usize, seed: u64) -> KanModel {
        let mut cfg =
            crate::network::ModelConfig::new(d, 1, crate::network::BasisKind::Spline, (-3.0, 3.0), seed);
        cfg.n_mult = 0;
        KanModel::new_gated(cfg, false)
    }

    fn edge_entropy(e: &crate::network::Edge) -> f64 {
        let EdgeKind::Gated { mask } = e.kind else { panic!("not a gated edge") };
        gate_probs(&e.params, 0, mask)
            .iter()
            .map(|&(_, p)| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum()
    }

    #[test]
    fn heavy_entropy_penalty_collapses_the_gates() {
        let mut model = gated_model(1, 5);
        let (xs, ys) = dataset(|x| x[0].sin(), 1, 120, 5);
        let split = SplitData::from_train(&xs, &ys, 5);
        let tc = TrainConfig {
            lambda: 0.0,
            cycles: 1,
            steps_per_stage: 300,
            ..TrainConfig::reference(5)
        };
        let gmp = GmpConfig { lambda_ent: 1.0, lambda_l1: 0.0, ..GmpConfig::default() };
        train_gmp(&mut model, &split, &tc, &gmp, &RunBudget::unlimited()).unwrap();
        for e in model.layer1.iter().chain(model.layer2.iter()) {
            if matches!(e.kind, EdgeKind::Gated { .. }) {
                let h = edge_entropy(e);
                assert!(h < 0.1, "edge entropy {h} after heavy entropy penalty");
            }
        }
    }

    #[test]
    fn zero_gate_penalties_still_fit_a_representable_target() {
        // With both gate penalties off every stage loss is the plain MSE, so
        // the mixture should train well below the untrained model even though
        // nothing pushes the gates towards sparsity.
        let mut model = gated_model(1, 9);
        let (xs, ys) = dataset(|x| 0.8 * (1.1 * x[0]).sin(), 1, 120, 9);
        let split = SplitData::from_train(&xs, &ys, 9);
        let pre = model.mse_on(&split.grad_x, &split.grad_y);
        let tc = TrainConfig {
            lambda: 0.0,
            cycles: 1,
            steps_per_stage: 300,
            ..TrainConfig::reference(9)
        };
        let gmp = GmpConfig { lambda_ent: 0.0, lambda_l1: 0.0, ..GmpConfig::default() };
        let report = train_gmp(&mut model, &split, &tc, &gmp, &RunBudget::unlimited()).unwrap();
        for stage in &report.train.stages {
            assert!(
                stage.loss < 0.2 * pre,
                "{} loss {} vs untrained {pre}",
                stage.name,
                stage.loss
            );
        }
    }

    #[test]
    fn gmp_training_is_deterministic_and_keeps_the_simplex() {
        let run = || {
            let mut model = gated_model(2, 3);
            let (xs, ys) = dataset(|x| x[0].sin() + x[1] * x[1], 2, 150, 3);
            let split = SplitData::from_train(&xs, &ys, 3);
            let tc =
                TrainConfig { cycles: 2, steps_per_stage: 120, ..TrainConfig::reference(3) };
            let gmp = GmpConfig::default();
            let report =
                train_gmp(&mut model, &split, &tc, &gmp, &RunBudget::unlimited()).unwrap();
            (model, report)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert!(m1.matches_snapshot(&m2.snapshot()));
        let bits = |r: &GmpTrainReport| -> Vec<u64> {
            r.train.stages.iter().map(|s| s.loss.to_bits()).collect()
        };
        assert_eq!(bits(&r1), bits(&r2));
        assert_eq!(r1.retained, r2.retained);
        for e in m1.layer1.iter().chain(m1.layer2.iter()) {
            if let EdgeKind::Gated { mask } = e.kind {
                assert_eq!(mask.count_ones() as usize, GmpConfig::default().final_topk);
                let sum: f64 = gate_probs(&e.params, 0, mask).iter().map(|&(_, p)| p).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        for forms in r1.retained.values() {
            assert_eq!(forms.len(), GmpConfig::default().final_topk);
        }
    }

    #[test]
    fn discretise_replaces_gates_with_their_argmax_operator() {
        let mut model = gated_model(1, 7);
        let ids = model.all_edge_ids();
        let want = vec![(ids[0], OpForm::Sin), (ids[1], OpForm::Id)];
        for &(id, form) in &want {
            let e = model.edge_mut(id);
            e.params[logit_idx(0, form.id())] = 3.0;
            let a = affine_idx(0, form.id());
            e.params[a..a + 4].copy_from_slice(&[1.5, 0.5, -0.25, 0.125]);
        }
        let picks = discretize(&mut model);
        assert_eq!(picks, want);
        for &(id, form) in &want {
            let e = model.edge(id);
            assert_eq!(e.kind, EdgeKind::Symbolic { form });
            assert_eq!(e.params, vec![1.5, 0.5, -0.25, 0.125]);
        }
        // Idempotent: nothing gated remains.
        assert!(discretize(&mut model).is_empty());
    }

    #[test]
    fn restricted_refinement_stays_inside_the_retained_sets() {
        let mut model = gated_model(2, 1);
        let (xs, ys) = dataset(|x| x[0].sin() + x[1] * x[1], 2, 150, 1);
        let split = SplitData::from_train(&xs, &ys, 1);
        let tc = TrainConfig { cycles: 1, steps_per_stage: 150, ..TrainConfig::reference(1) };
        let gmp = GmpConfig::default();
        let report = train_gmp(&mut model, &split, &tc, &gmp, &RunBudget::unlimited()).unwrap();
        let picks = discretize(&mut model);
        assert_eq!(picks.len(), report.retained.len());
        for (id, form) in &picks {
            let ordinal = model.edge_ordinal(*id);
            assert!(report.retained[&ordinal].contains(form));
        }

        let cfg = GsrConfig { tau: 5, ..GsrConfig::new(1) };
        let refine =
            refine_restricted(&mut model, &split, &report.retained, &cfg, &RunBudget::unlimited())
                .unwrap();
        assert!(refine.trials.len() <= report.retained.len() * gmp.final_topk);
        for t in &refine.trials {
            assert!(
                report.retained[&t.edge_ordinal].contains(&t.form),
                "trialled {:?} outside the retained set of edge {}",
                t.form,
                t.edge_ordinal
            );
        }
        for ordinal in report.retained.keys() {
            assert!(refine.trials.iter().any(|t| t.edge_ordinal == *ordinal && t.committed));
        }
    }
}
