//! The MultKAN model: a single hidden layer of additive and multiplication
//! units with learnable univariate edge functions, plus a scalar additive
//! output node. Covers forward evaluation (plain or on tape), edge
//! importance, node pruning, the multi-stage training schedule, bit-exact
//! snapshot/restore, and JSON checkpoints.
//!
//! Hidden layout for width `[m, n_mult]`: sub-nodes `0..m` are additive unit
//! sums, sub-nodes `m..m+2*n_mult` are the internal summation inputs of the
//! multiplication units (two per unit, adjacent). Every sub-node receives one
//! edge from every input. Hidden unit `m+j` outputs the product of sub-nodes
//! `m+2j` and `m+2j+1`. The output node sums one edge per hidden unit. There
//! are no biases.

use crate::autodiff::{Adam, EvalCtx, F64Ctx, Tape};
use crate::basis::{RbfSpec, SplineSpec, GridSpec, DEFAULT_DEGREE, DEFAULT_GRID_RES};
use crate::expr::{self, Expr};
use crate::gates;
use crate::oplib::{self, AffineParams, OpForm};
use crate::seeding;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Spline,
    Rbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Numeric,
    Symbolic { form: OpForm },
    Gated { mask: u32 },
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    pub params: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeId {
    L1(usize),
    L2(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub m: usize,
    pub n_mult: usize,
    pub basis: BasisKind,
    pub resolution: usize,
    pub degree: usize,
    pub lo: f64,
    pub hi: f64,
    pub per_op_scale: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(d_in: usize, m: usize, basis: BasisKind, range: (f64, f64), seed: u64) -> Self {
        ModelConfig {
            d_in,
            m,
            n_mult: 2,
            basis,
            resolution: DEFAULT_GRID_RES,
            degree: DEFAULT_DEGREE,
            lo: range.0,
            hi: range.1,
            per_op_scale: false,
            seed,
        }
    }
}

/// Parameter offsets of each edge inside the flat parameter vector, in edge
/// order (layer 1 first).
pub struct Layout {
    pub l1: Vec<usize>,
    pub l2: Vec<usize>,
    pub total: usize,
}

/// Full structural + parameter copy; `restore` brings the model back
/// bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    l1: Vec<Edge>,
    l2: Vec<Edge>,
}

/// Per-edge importance scores: mean |edge output| over the scoring inputs,
/// and the same normalized by the per-layer maximum.
#[derive(Clone, Debug)]
pub struct EdgeImportance {
    pub raw_l1: Vec<f64>,
    pub raw_l2: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite parameter at edge {0}")]
    NonFinite(usize),
}

#[derive(Clone, Debug)]
pub struct KanModel {
    pub cfg: ModelConfig,
    pub layer1: Vec<Edge>,
    pub layer2: Vec<Edge>,
    spline: SplineSpec,
    rbf: RbfSpec,
}

fn build_specs(cfg: &ModelConfig) -> (SplineSpec, RbfSpec) {
    let grid = GridSpec::new(cfg.lo, cfg.hi, cfg.resolution, cfg.degree);
    (SplineSpec::new(grid), RbfSpec::new(grid))
}

impl KanModel {
    /// Number of layer-1 destination sub-nodes.
    pub fn n_subs(&self) -> usize {
        self.cfg.m + 2 * self.cfg.n_mult
    }

    /// Number of hidden units (additive + multiplication).
    pub fn n_hidden(&self) -> usize {
        self.cfg.m + self.cfg.n_mult
    }

    /// Fresh numeric model; every edge initialised near SiLU with seeded
    /// noise, per-edge streams keyed by the edge ordinal.
    pub fn new(cfg: ModelConfig) -> KanModel {
        let (spline, rbf) = build_specs(&cfg);
        let n_l1 = (cfg.m + 2 * cfg.n_mult) * cfg.d_in;
        let n_l2 = cfg.m + cfg.n_mult;
        // Fan-in scaling keeps node sums inside the grid range at init, so
        // second-layer edges start on their responsive region instead of the
        // clamped tails.
        let init = |ordinal: u64, scale: f64| -> Vec<f64> {
            match cfg.basis {
                BasisKind::Spline => {
                    crate::basis::init_coeffs_spline(&spline, scale, cfg.seed, ordinal)
                }
                BasisKind::Rbf => crate::basis::init_coeffs_rbf(&rbf, scale, cfg.seed, ordinal),
            }
        };
        let s1 = 1.0 / cfg.d_in as f64;
        let s2 = 1.0 / n_l2 as f64;
        let layer1 = (0..n_l1)
            .map(|e| Edge { kind: EdgeKind::Numeric, params: init(e as u64, s1) })
            .collect();
        let layer2 = (0..n_l2)
            .map(|j| Edge { kind: EdgeKind::Numeric, params: init((n_l1 + j) as u64, s2) })
            .collect();
        KanModel { cfg, layer1, layer2, spline, rbf }
    }

    /// Fresh gated model: every edge carries the full operator library with
    /// uniform gates (zero logits), affine (1, 1, 0, 0) plus seeded jitter on
    /// beta and gamma, and log s = 0.
    pub fn new_gated(mut cfg: ModelConfig, per_op_scale: bool) -> KanModel {
        cfg.per_op_scale = per_op_scale;
        let (spline, rbf) = build_specs(&cfg);
        let n_l1 = (cfg.m + 2 * cfg.n_mult) * cfg.d_in;
        let n_l2 = cfg.m + cfg.n_mult;
        let init = |ordinal: u64| -> Edge {
            let mut params = vec![0.0; gates::gated_param_len(per_op_scale)];
            let mut rng = seeding::stream(cfg.seed, &[seeding::tag("gate-init"), ordinal]);
            for k in 0..gates::K {
                let a = gates::K + 4 * k;
                params[a] = 1.0;
                params[a + 1] = 1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal);
                params[a + 2] = 0.05 * rng.sample::<f64, _>(StandardNormal);
            }
            Edge { kind: EdgeKind::Gated { mask: gates::FULL_MASK }, params }
        };
        let layer1 = (0..n_l1).map(|e| init(e as u64)).collect();
        let layer2 = (0..n_l2).map(|j| init((n_l1 + j) as u64)).collect();
        KanModel { cfg, layer1, layer2, spline, rbf }
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        match id {
            EdgeId::L1(e) => &self.layer1[e],
            EdgeId::L2(e) => &self.layer2[e],
        }
    }

    pub fn edge_mut(&mut self, id: EdgeId) -> &mut Edge {
        match id {
            EdgeId::L1(e) => &mut self.layer1[e],
            EdgeId::L2(e) => &mut self.layer2[e],
        }
    }

    /// Stable global edge number (layer 1 edges first), used for logs and
    /// seeded streams.
    pub fn edge_ordinal(&self, id: EdgeId) -> usize {
        match id {
            EdgeId::L1(e) => e,
            EdgeId::L2(e) => self.layer1.len() + e,
        }
    }

    pub fn all_edge_ids(&self) -> Vec<EdgeId> {
        (0..self.layer1.len())
            .map(EdgeId::L1)
            .chain((0..self.layer2.len()).map(EdgeId::L2))
            .collect()
    }

    pub fn replace_edge(&mut self, id: EdgeId, kind: EdgeKind, params: Vec<f64>) {
        let e = self.edge_mut(id);
        e.kind = kind;
        e.params = params;
    }

    pub fn layout(&self) -> Layout {
        let mut total = 0;
        let mut l1 = Vec::with_capacity(self.layer1.len());
        for e in &self.layer1 {
            l1.push(total);
            total += e.params.len();
        }
        let mut l2 = Vec::with_capacity(self.layer2.len());
        for e in &self.layer2 {
            l2.push(total);
            total += e.params.len();
        }
        Layout { l1, l2, total }
    }

    pub fn gather(&self, layout: &Layout) -> Vec<f64> {
        let mut flat = Vec::with_capacity(layout.total);
        for e in self.layer1.iter().chain(&self.layer2) {
            flat.extend_from_slice(&e.params);
        }
        flat
    }

    pub fn scatter(&mut self, layout: &Layout, flat: &[f64]) {
        assert_eq!(flat.len(), layout.total);
        let mut at = 0;
        for e in self.layer1.iter_mut().chain(self.layer2.iter_mut()) {
            let n = e.params.len();
            e.params.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    fn eval_edge<C: EvalCtx>(&self, ctx: &mut C, edge: &Edge, offset: usize, x: C::V) -> C::V {
        match edge.kind {
            EdgeKind::Pruned => ctx.lit(0.0),
            EdgeKind::Numeric => match self.cfg.basis {
                BasisKind::Spline => self.spline.eval(ctx, offset, x),
                BasisKind::Rbf => self.rbf.eval(ctx, offset, x),
            },
            EdgeKind::Symbolic { form } => oplib::eval_symbolic_edge(ctx, form, offset, x),
            EdgeKind::Gated { mask } => {
                gates::eval_gated(ctx, offset, mask, self.cfg.per_op_scale, x)
            }
        }
    }

    /// Forward pass recording every edge output into `edge_out` (layer-1
    /// edges in index order, then layer-2).
    pub fn forward_edges<C: EvalCtx>(
        &self,
        ctx: &mut C,
        layout: &Layout,
        x: &[C::V],
        edge_out: &mut Vec<C::V>,
    ) -> C::V {
        debug_assert_eq!(x.len(), self.cfg.d_in);
        edge_out.clear();
        let d = self.cfg.d_in;
        let mut subs = Vec::with_capacity(self.n_subs());
        for sub in 0..self.n_subs() {
            let mut acc = ctx.lit(0.0);
            for (i, &xi) in x.iter().enumerate() {
                let e = sub * d + i;
                let v = self.eval_edge(ctx, &self.layer1[e], layout.l1[e], xi);
                edge_out.push(v);
                acc = ctx.add(acc, v);
            }
            subs.push(acc);
        }
        let mut hidden = Vec::with_capacity(self.n_hidden());
        hidden.extend_from_slice(&subs[..self.cfg.m]);
        for j in 0..self.cfg.n_mult {
            let a = subs[self.cfg.m + 2 * j];
            let b = subs[self.cfg.m + 2 * j + 1];
            hidden.push(ctx.mul(a, b));
        }
        let mut out = ctx.lit(0.0);
        for (u, &h) in hidden.iter().enumerate() {
            let v = self.eval_edge(ctx, &self.layer2[u], layout.l2[u], h);
            edge_out.push(v);
            out = ctx.add(out, v);
        }
        out
    }

    pub fn forward<C: EvalCtx>(&self, ctx: &mut C, layout: &Layout, x: &[C::V]) -> C::V {
        let mut edge_out = Vec::new();
        self.forward_edges(ctx, layout, x, &mut edge_out)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let layout = self.layout();
        let flat = self.gather(&layout);
        let mut ctx = F64Ctx::new(&flat);
        self.forward(&mut ctx, &layout, x)
    }

    pub fn predictions(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        let layout = self.layout();
        let flat = self.gather(&layout);
        let mut ctx = F64Ctx::new(&flat);
        xs.iter().map(|x| self.forward(&mut ctx, &layout, x)).collect()
    }

    pub fn mse_on(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        assert_eq!(xs.len(), ys.len());
        if xs.is_empty() {
            return 0.0;
        }
        let preds = self.predictions(xs);
        let sse: f64 = preds.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum();
        sse / xs.len() as f64
    }

    /// Mean |edge output| per edge over the given inputs.
    pub fn edge_abs_means(&self, xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let layout = self.layout();
        let flat = self.gather(&layout);
        let mut ctx = F64Ctx::new(&flat);
        let mut acc1 = vec![0.0; self.layer1.len()];
        let mut acc2 = vec![0.0; self.layer2.len()];
        let mut edge_out = Vec::new();
        for x in xs {
            self.forward_edges(&mut ctx, &layout, x, &mut edge_out);
            for (e, v) in edge_out[..self.layer1.len()].iter().enumerate() {
                acc1[e] += v.abs();
            }
            for (e, v) in edge_out[self.layer1.len()..].iter().enumerate() {
                acc2[e] += v.abs();
            }
        }
        let n = xs.len().max(1) as f64;
        for a in acc1.iter_mut().chain(acc2.iter_mut()) {
            *a /= n;
        }
        (acc1, acc2)
    }

    /// Importance scores on the given inputs; pruned edges score zero and
    /// each layer is normalized by its maximum.
    pub fn edge_importance(&self, xs: &[Vec<f64>]) -> EdgeImportance {
        let (raw_l1, raw_l2) = self.edge_abs_means(xs);
        let norm = |raw: &[f64]| -> Vec<f64> {
            let max = raw.iter().fold(0.0f64, |m, &v| m.max(v));
            if max > 0.0 {
                raw.iter().map(|&v| v / max).collect()
            } else {
                vec![0.0; raw.len()]
            }
        };
        EdgeImportance { l1: norm(&raw_l1), l2: norm(&raw_l2), raw_l1, raw_l2 }
    }

    /// Incoming layer-1 edge indices of hidden unit `u`.
    fn unit_in_edges(&self, u: usize) -> Vec<usize> {
        let d = self.cfg.d_in;
        let subs: &[usize] = if u < self.cfg.m {
            &[u]
        } else {
            let j = u - self.cfg.m;
            return ((self.cfg.m + 2 * j) * d..(self.cfg.m + 2 * j + 2) * d).collect();
        };
        (subs[0] * d..(subs[0] + 1) * d).collect()
    }

    /// Mask hidden units whose best incoming and best outgoing importance
    /// both fall below `node_thr`, then drop any edge below `edge_thr`.
    /// Returns the number of surviving hidden units.
    pub fn prune(&mut self, imp: &EdgeImportance, node_thr: f64, edge_thr: f64) -> usize {
        for u in 0..self.n_hidden() {
            let in_edges = self.unit_in_edges(u);
            let max_in = in_edges.iter().map(|&e| imp.l1[e]).fold(0.0f64, f64::max);
            let max_out = imp.l2[u];
            if max_in < node_thr && max_out < node_thr {
                for e in in_edges {
                    self.layer1[e].kind = EdgeKind::Pruned;
                }
                self.layer2[u].kind = EdgeKind::Pruned;
            }
        }
        for (e, edge) in self.layer1.iter_mut().enumerate() {
            if imp.l1[e] < edge_thr {
                edge.kind = EdgeKind::Pruned;
            }
        }
        for (e, edge) in self.layer2.iter_mut().enumerate() {
            if imp.l2[e] < edge_thr {
                edge.kind = EdgeKind::Pruned;
            }
        }
        self.surviving_units()
    }

    pub fn surviving_units(&self) -> usize {
        self.layer2.iter().filter(|e| e.kind != EdgeKind::Pruned).count()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { l1: self.layer1.clone(), l2: self.layer2.clone() }
    }

    pub fn restore(&mut self, snap: &Snapshot) {
        assert_eq!(snap.l1.len(), self.layer1.len(), "snapshot structure mismatch");
        assert_eq!(snap.l2.len(), self.layer2.len(), "snapshot structure mismatch");
        self.layer1 = snap.l1.clone();
        self.layer2 = snap.l2.clone();
    }

    /// True when every edge kind and parameter equals the snapshot bit for
    /// bit.
    pub fn matches_snapshot(&self, snap: &Snapshot) -> bool {
        fn eq(a: &[Edge], b: &[Edge]) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.kind == y.kind
                        && x.params.len() == y.params.len()
                        && x.params.iter().zip(&y.params).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        }
        eq(&self.layer1, &snap.l1) && eq(&self.layer2, &snap.l2)
    }

    /// Observed input interval per edge: the data column for layer-1 edges,
    /// the hidden unit output for layer-2 edges.
    pub fn edge_input_ranges(&self, xs: &[Vec<f64>]) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let d = self.cfg.d_in;
        let mut col = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for x in xs {
            for (i, &v) in x.iter().enumerate() {
                col[i].0 = col[i].0.min(v);
                col[i].1 = col[i].1.max(v);
            }
        }
        let l1 = (0..self.layer1.len()).map(|e| col[e % d]).collect();

        let layout = self.layout();
        let flat = self.gather(&layout);
        let mut ctx = F64Ctx::new(&flat);
        let mut hid = vec![(f64::INFINITY, f64::NEG_INFINITY); self.n_hidden()];
        for x in xs {
            let h = self.hidden_values(&mut ctx, &layout, x);
            for (u, &v) in h.iter().enumerate() {
                hid[u].0 = hid[u].0.min(v);
                hid[u].1 = hid[u].1.max(v);
            }
        }
        (l1, hid)
    }

    fn hidden_values(&self, ctx: &mut F64Ctx, layout: &Layout, x: &[f64]) -> Vec<f64> {
        let d = self.cfg.d_in;
        let mut subs = Vec::with_capacity(self.n_subs());
        for sub in 0..self.n_subs() {
            let mut acc = 0.0;
            for (i, &xi) in x.iter().enumerate() {
                let e = sub * d + i;
                acc += self.eval_edge(ctx, &self.layer1[e], layout.l1[e], xi);
            }
            subs.push(acc);
        }
        let mut hidden = Vec::with_capacity(self.n_hidden());
        hidden.extend_from_slice(&subs[..self.cfg.m]);
        for j in 0..self.cfg.n_mult {
            hidden.push(subs[self.cfg.m + 2 * j] * subs[self.cfg.m + 2 * j + 1]);
        }
        hidden
    }

    /// The univariate function of one edge, evaluated at the given points
    /// with current parameters.
    pub fn edge_curve(&self, id: EdgeId, points: &[f64]) -> Vec<f64> {
        let layout = self.layout();
        let flat = self.gather(&layout);
        let mut ctx = F64Ctx::new(&flat);
        let (edge, offset) = match id {
            EdgeId::L1(e) => (&self.layer1[e], layout.l1[e]),
            EdgeId::L2(e) => (&self.layer2[e], layout.l2[e]),
        };
        points.iter().map(|&x| self.eval_edge(&mut ctx, edge, offset, x)).collect()
    }

    /// Closed-form expression of a fully symbolic model. Numeric or gated
    /// edges become named placeholder leaves and flip the `complete` flag.
    pub fn compose_expression(&self) -> (Expr, bool) {
        let d = self.cfg.d_in;
        let mut complete = true;
        let mut edge_term = |edge: &Edge, ordinal: usize, inner: Expr| -> Option<Expr> {
            match edge.kind {
                EdgeKind::Pruned => None,
                EdgeKind::Symbolic { form } => {
                    let p = AffineParams::from_slice(&edge.params);
                    Some(expr::symbolic_edge_expr(form, &p, inner))
                }
                EdgeKind::Numeric | EdgeKind::Gated { .. } => {
                    complete = false;
                    Some(Expr::Hole(format!("edge{ordinal}")))
                }
            }
        };
        let mut subs = Vec::with_capacity(self.n_subs());
        for sub in 0..self.n_subs() {
            let mut terms = Vec::new();
            for i in 0..d {
                let e = sub * d + i;
                if let Some(t) = edge_term(&self.layer1[e], e, Expr::Var(i)) {
                    terms.push(t);
                }
            }
            subs.push(match terms.len() {
                0 => Expr::Const(0.0),
                1 => terms.pop().unwrap(),
                _ => Expr::Add(terms),
            });
        }
        let mut hidden = Vec::with_capacity(self.n_hidden());
        hidden.extend_from_slice(&subs[..self.cfg.m]);
        for j in 0..self.cfg.n_mult {
            hidden.push(Expr::Mul(vec![
                subs[self.cfg.m + 2 * j].clone(),
                subs[self.cfg.m + 2 * j + 1].clone(),
            ]));
        }
        let mut terms = Vec::new();
        for (u, h) in hidden.into_iter().enumerate() {
            if let Some(t) = edge_term(&self.layer2[u], self.layer1.len() + u, h) {
                terms.push(t);
            }
        }
        let out = match terms.len() {
            0 => Expr::Const(0.0),
            1 => terms.pop().unwrap(),
            _ => Expr::Add(terms),
        };
        (out.simplify(), complete)
    }

    pub fn to_checkpoint_json(&self) -> Result<String, ModelError> {
        for (i, e) in self.layer1.iter().chain(&self.layer2).enumerate() {
            if e.params.iter().any(|p| !p.is_finite()) {
                return Err(ModelError::NonFinite(i));
            }
        }
        let file = CheckpointFile {
            version: 1,
            config: self.cfg.clone(),
            layer1: self.layer1.clone(),
            layer2: self.layer2.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint_json(text: &str) -> Result<KanModel, ModelError> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if file.version != 1 {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        let cfg = file.config;
        let n_l1 = (cfg.m + 2 * cfg.n_mult) * cfg.d_in;
        let n_l2 = cfg.m + cfg.n_mult;
        if file.layer1.len() != n_l1 || file.layer2.len() != n_l2 {
            return Err(ModelError::Checkpoint("edge count mismatch".into()));
        }
        let (spline, rbf) = build_specs(&cfg);
        Ok(KanModel { cfg, layer1: file.layer1, layer2: file.layer2, spline, rbf })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    layer1: Vec<Edge>,
    layer2: Vec<Edge>,
}

// ── Training ───────────────────────────────────────────────────────────────

/// Gradient/validation partition of the training points. The validation
/// side never contributes gradient steps; it scores candidate trials.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub grad_x: Vec<Vec<f64>>,
    pub grad_y: Vec<f64>,
    pub val_x: Vec<Vec<f64>>,
    pub val_y: Vec<f64>,
}

impl SplitData {
    /// Seeded 80/20 split of the training rows.
    pub fn from_train(xs: &[Vec<f64>], ys: &[f64], seed: u64) -> SplitData {
        assert_eq!(xs.len(), ys.len());
        let n = xs.len();
        let n_val = if n >= 2 { (n / 5).max(1) } else { 0 };
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = seeding::stream(seed, &[seeding::tag("val-split")]);
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let (val_idx, grad_idx) = idx.split_at(n_val);
        let pick = |ids: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
            (ids.iter().map(|&i| xs[i].clone()).collect(), ids.iter().map(|&i| ys[i]).collect())
        };
        let (val_x, val_y) = pick(val_idx);
        let (grad_x, grad_y) = pick(grad_idx);
        SplitData { grad_x, grad_y, val_x, val_y }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub cycles: usize,
    pub steps_per_stage: usize,
    pub lr: f64,
    pub node_threshold: f64,
    pub edge_threshold: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// The reference training configuration: lambda 1e-2, 3 cycles, 200
    /// steps per stage, Adam lr 1e-2, node threshold 0.1, edge threshold 0.
    pub fn reference(seed: u64) -> Self {
        TrainConfig {
            lambda: 1e-2,
            cycles: 3,
            steps_per_stage: 200,
            lr: 1e-2,
            node_threshold: 0.1,
            edge_threshold: 0.0,
            seed,
        }
    }
}

/// Wall-clock cap for a run; exceeding it converts the run to a timeout
/// failure instead of blocking the sweep.
#[derive(Clone, Copy, Debug)]
pub struct RunBudget {
    deadline: Option<Instant>,
}

impl RunBudget {
    pub fn unlimited() -> Self {
        RunBudget { deadline: None }
    }

    pub fn with_cap(cap: Duration) -> Self {
        RunBudget { deadline: Some(Instant::now() + cap) }
    }

    pub fn exceeded(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RunFailure {
    #[error("non-finite-loss")]
    NonFiniteLoss,
    #[error("all-pruned")]
    AllPruned,
    #[error("timeout")]
    Timeout,
}

impl RunFailure {
    pub fn reason(self) -> &'static str {
        match self {
            RunFailure::NonFiniteLoss => "non-finite-loss",
            RunFailure::AllPruned => "all-pruned",
            RunFailure::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub name: String,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub stages: Vec<StageRecord>,
}

/// Extra per-step penalties for gated models: `(lambda_ent, lambda_l1)`.
pub type GatePenalty = Option<(f64, f64)>;

fn stage_loss(
    model: &KanModel,
    tape: &mut Tape,
    layout: &Layout,
    xs: &[Vec<f64>],
    ys: &[f64],
    lambda: f64,
    gate: GatePenalty,
    edge_out: &mut Vec<crate::autodiff::V>,
) -> crate::autodiff::V {
    let n_edges = model.layer1.len() + model.layer2.len();
    let inv_n = 1.0 / xs.len() as f64;
    let mut sse = tape.lit(0.0);
    let with_reg = lambda != 0.0;
    let mut abs_acc = if with_reg {
        (0..n_edges).map(|_| tape.lit(0.0)).collect::<Vec<_>>()
    } else {
        Vec::new()
    };
    for (x, &y) in xs.iter().zip(ys) {
        let xv: Vec<_> = x.iter().map(|&v| tape.lit(v)).collect();
        let pred = model.forward_edges(tape, layout, &xv, edge_out);
        let target = tape.lit(y);
        let err = tape.sub(pred, target);
        let sq = tape.mul(err, err);
        sse = tape.add(sse, sq);
        if with_reg {
            for (e, &v) in edge_out.iter().enumerate() {
                let a = tape.abs(v);
                abs_acc[e] = tape.add(abs_acc[e], a);
            }
        }
    }
    let inv = tape.lit(inv_n);
    let mut loss = tape.mul(sse, inv);
    if with_reg {
        let mut reg = tape.lit(0.0);
        for &a in &abs_acc {
            reg = tape.add(reg, a);
        }
        let reg_mean = tape.mul(reg, inv);
        let lam = tape.lit(lambda);
        let term = tape.mul(lam, reg_mean);
        loss = tape.add(loss, term);
    }
    if let Some((l_ent, l_l1)) = gate {
        let mut ent_sum = tape.lit(0.0);
        let mut l1_sum = tape.lit(0.0);
        let offsets = layout.l1.iter().chain(&layout.l2);
        for (edge, &off) in model.layer1.iter().chain(&model.layer2).zip(offsets) {
            if let EdgeKind::Gated { mask } = edge.kind {
                let (ent, l1) = gates::gate_regularizers(tape, off, mask);
                ent_sum = tape.add(ent_sum, ent);
                l1_sum = tape.add(l1_sum, l1);
            }
        }
        let we = tape.lit(l_ent);
        let te = tape.mul(we, ent_sum);
        loss = tape.add(loss, te);
        let w1 = tape.lit(l_l1);
        let t1 = tape.mul(w1, l1_sum);
        loss = tape.add(loss, t1);
    }
    loss
}

/// One optimisation stage: full-batch Adam on the gradient split with a
/// fresh optimiser state. Returns the last computed loss.
pub fn fit_stage(
    model: &mut KanModel,
    split: &SplitData,
    lambda: f64,
    gate: GatePenalty,
    steps: usize,
    lr: f64,
    budget: &RunBudget,
) -> Result<f64, RunFailure> {
    let layout = model.layout();
    let mut flat = model.gather(&layout);
    let mut adam = Adam::new(lr, flat.len());
    let mut tape = Tape::new();
    let mut edge_out = Vec::new();
    let mut last = f64::NAN;
    for _ in 0..steps {
        if budget.exceeded() {
            return Err(RunFailure::Timeout);
        }
        tape.reset(&flat);
        let loss = stage_loss(
            model,
            &mut tape,
            &layout,
            &split.grad_x,
            &split.grad_y,
            lambda,
            gate,
            &mut edge_out,
        );
        last = tape.value(loss);
        if !last.is_finite() {
            return Err(RunFailure::NonFiniteLoss);
        }
        tape.backward(loss);
        adam.step(&mut flat, tape.grad());
    }
    model.scatter(&layout, &flat);
    Ok(last)
}

/// The multi-stage schedule: an unregularised initial fit, `cycles` rounds
/// of importance pruning plus a regularised refit, then an unregularised
/// final fit.
pub fn train_schedule(
    model: &mut KanModel,
    split: &SplitData,
    cfg: &TrainConfig,
    budget: &RunBudget,
) -> Result<TrainReport, RunFailure> {
    let mut report = TrainReport::default();
    let loss = fit_stage(model, split, 0.0, None, cfg.steps_per_stage, cfg.lr, budget)?;
    report.stages.push(StageRecord { name: "init".into(), loss });
    for c in 1..=cfg.cycles {
        if budget.exceeded() {
            return Err(RunFailure::Timeout);
        }
        let imp = model.edge_importance(&split.grad_x);
        let survivors = model.prune(&imp, cfg.node_threshold, cfg.edge_threshold);
        if survivors == 0 {
            return Err(RunFailure::AllPruned);
        }
        let loss = fit_stage(model, split, cfg.lambda, None, cfg.steps_per_stage, cfg.lr, budget)?;
        report.stages.push(StageRecord { name: format!("cycle-{c}"), loss });
    }
    let loss = fit_stage(model, split, 0.0, None, cfg.steps_per_stage, cfg.lr, budget)?;
    report.stages.push(StageRecord { name: "final".into(), loss });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(form: OpForm, a: f64, b: f64, g: f64, d: f64) -> (EdgeKind, Vec<f64>) {
        (EdgeKind::Symbolic { form }, vec![a, b, g, d])
    }

    fn tiny_cfg(d_in: usize, m: usize, n_mult: usize, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::new(d_in, m, BasisKind::Spline, (-1.0, 1.0), seed);
        cfg.n_mult = n_mult;
        cfg
    }

    #[test]
    fn zero_edges_give_zero_output() {
        let mut model = KanModel::new(tiny_cfg(2, 2, 1, 3));
        for id in model.all_edge_ids() {
            let n = model.edge(id).params.len();
            model.edge_mut(id).params = vec![0.0; n];
        }
        for x in [[0.2, -0.7], [0.0, 0.0], [1.0, 0.5]] {
            assert_eq!(model.predict(&x), 0.0);
        }
    }

    #[test]
    fn identity_edge_chain_passes_input_through() {
        let mut model = KanModel::new(tiny_cfg(1, 1, 0, 1));
        let (k, p) = sym(OpForm::Id, 1.0, 1.0, 0.0, 0.0);
        model.replace_edge(EdgeId::L1(0), k, p.clone());
        model.replace_edge(EdgeId::L2(0), k, p);
        for &x in &[-0.9, -0.1, 0.0, 0.4, 0.8] {
            assert!((model.predict(&[x]) - x).abs() < 1e-15);
        }
    }

    #[test]
    fn committed_sin_plus_square_matches_formula() {
        let mut model = KanModel::new(tiny_cfg(2, 2, 0, 1));
        // Unit 0 reads sin(x1), unit 1 reads x2^2; cross edges pruned.
        let (k, p) = sym(OpForm::Sin, 1.0, 1.0, 0.0, 0.0);
        model.replace_edge(EdgeId::L1(0), k, p);
        model.edge_mut(EdgeId::L1(1)).kind = EdgeKind::Pruned;
        model.edge_mut(EdgeId::L1(2)).kind = EdgeKind::Pruned;
        let (k, p) = sym(OpForm::Sq, 1.0, 1.0, 0.0, 0.0);
        model.replace_edge(EdgeId::L1(3), k, p);
        let (k, p) = sym(OpForm::Id, 1.0, 1.0, 0.0, 0.0);
        model.replace_edge(EdgeId::L2(0), k, p.clone());
        model.replace_edge(EdgeId::L2(1), k, p);
        let mut worst = 0.0f64;
        for i in 0..20 {
            for j in 0..20 {
                let x1 = -1.0 + i as f64 / 10.0;
                let x2 = -1.0 + j as f64 / 10.0;
                let err = model.predict(&[x1, x2]) - (x1.sin() + x2 * x2);
                worst = worst.max(err * err);
            }
        }
        assert!(worst < 1e-12, "mse {worst}");

        let (e, complete) = model.compose_expression();
        assert!(complete);
        assert_eq!(expr::serialize(&e), "sin(x1) + x2^2");
    }

    #[test]
    fn additive_model_is_sum_of_single_edge_forwards() {
        // One additive unit with identity read-out: f(x) = sum_i phi_i(x_i).
        let model = {
            let mut m = KanModel::new(tiny_cfg(3, 1, 0, 9));
            let (k, p) = sym(OpForm::Id, 1.0, 1.0, 0.0, 0.0);
            m.replace_edge(EdgeId::L2(0), k, p);
            m
        };
        let mut rng = seeding::stream(5, &[seeding::tag("linearity")]);
        use rand::Rng;
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let full = model.predict(&x);
            let mut sum = 0.0;
            for keep in 0..3 {
                let mut single = model.clone();
                for e in 0..3 {
                    if e != keep {
                        single.edge_mut(EdgeId::L1(e)).kind = EdgeKind::Pruned;
                    }
                }
                sum += single.predict(&x);
            }
            assert!((full - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn multiplication_unit_is_product_of_sub_sums() {
        let model = KanModel::new(tiny_cfg(2, 1, 1, 11));
        let layout = model.layout();
        let flat = model.gather(&layout);
        let mut rng = seeding::stream(6, &[seeding::tag("mult")]);
        use rand::Rng;
        for _ in 0..20 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let mut ctx = F64Ctx::new(&flat);
            let curve = |ctx: &mut F64Ctx, e: usize, x: f64| {
                model.eval_edge(ctx, &model.layer1[e], layout.l1[e], x)
            };
            // Sub-nodes 1 and 2 feed the multiplication unit.
            let sa = curve(&mut ctx, 2, x[0]) + curve(&mut ctx, 3, x[1]);
            let sb = curve(&mut ctx, 4, x[0]) + curve(&mut ctx, 5, x[1]);
            let h = model.hidden_values(&mut ctx, &layout, &x);
            assert!((h[1] - sa * sb).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_scores_match_hand_computation() {
        let mut model = KanModel::new(tiny_cfg(1, 2, 0, 2));
        // phi constant 2 on edge 0, pruned edge 1.
        let (k, p) = sym(OpForm::Const, 2.0, 1.0, 0.0, 0.0);
        model.replace_edge(EdgeId::L1(0), k, p);
        model.edge_mut(EdgeId::L1(1)).kind = EdgeKind::Pruned;
        let (k, p) = sym(OpForm::Id, 1.0, 1.0, 0.0, 0.0);
        model.replace_edge(EdgeId::L2(0), k.clone(), p.clone());
        model.replace_edge(EdgeId::L2(1), k, p);
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0]).collect();
        let imp = model.edge_importance(&xs);
        assert_eq!(imp.raw_l1[0], 2.0);
        assert_eq!(imp.raw_l1[1], 0.0);
        assert_eq!(imp.l1[0], 1.0);
        assert_eq!(imp.l1[1], 0.0);
        // Layer 2: edge 0 sees constant 2 -> |2|; edge 1 sees 0 -> 0.
        assert_eq!(imp.raw_l2[0], 2.0);
        assert_eq!(imp.raw_l2[1], 0.0);
    }

    #[test]
    fn identical_edges_get_identical_scores() {
        let mut model = KanModel::new(tiny_cfg(1, 2, 0, 2));
        let coeffs = model.edge(EdgeId::L1(0)).params.clone();
        model.edge_mut(EdgeId::L1(1)).params = coeffs;
        let xs: Vec<Vec<f64>> = (0..16).map(|i| vec![-1.0 + i as f64 / 8.0]).collect();
        let imp = model.edge_importance(&xs);
        assert_eq!(imp.raw_l1[0], imp.raw_l1[1]);
    }

    #[test]
    fn prune_masks_exactly_the_negligible_unit() {
        let mut model = KanModel::new(tiny_cfg(1, 3, 0, 4));
        let mk = |a: f64| sym(OpForm::Const, a, 1.0, 0.0, 0.0);
        for (u, amp) in [(0usize, 1.0f64), (1, 0.01), (2, 0.8)] {
            let (k, p) = mk(amp);
            model.replace_edge(EdgeId::L1(u), k, p);
            let (k, p) = mk(amp);
            model.replace_edge(EdgeId::L2(u), k, p);
        }
        let xs = vec![vec![0.0], vec![0.5]];
        let imp = model.edge_importance(&xs);
        let survivors = model.prune(&imp, 0.1, 0.0);
        assert_eq!(survivors, 2);
        assert_eq!(model.layer1[1].kind, EdgeKind::Pruned);
        assert_eq!(model.layer2[1].kind, EdgeKind::Pruned);
        assert_ne!(model.layer1[0].kind, EdgeKind::Pruned);
        assert_ne!(model.layer2[2].kind, EdgeKind::Pruned);
        // Idempotent at fixed scores.
        let before = model.snapshot();
        model.prune(&imp, 0.1, 0.0);
        assert_eq!(model.snapshot(), before);
        // Threshold zero changes nothing.
        let mut fresh = KanModel::new(tiny_cfg(1, 3, 0, 4));
        let imp = fresh.edge_importance(&xs);
        let before = fresh.snapshot();
        fresh.prune(&imp, 0.0, 0.0);
        assert_eq!(fresh.snapshot(), before);
    }

    fn line_data(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![-1.0 + 2.0 * i as f64 / (n - 1) as f64]).collect();
        let ys = xs.iter().map(|x| x[0]).collect();
        (xs, ys)
    }

    #[test]
    fn zero_cycles_runs_exactly_init_and_final() {
        let (xs, ys) = line_data(16);
        let split = SplitData::from_train(&xs, &ys, 7);
        let mut model = KanModel::new(tiny_cfg(1, 1, 0, 7));
        let cfg = TrainConfig { cycles: 0, steps_per_stage: 5, ..TrainConfig::reference(7) };
        let report = train_schedule(&mut model, &split, &cfg, &RunBudget::unlimited()).unwrap();
        let names: Vec<&str> = report.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["init", "final"]);
    }

    #[test]
    fn linear_target_trains_below_one_em3() {
        let (xs, ys) = line_data(64);
        let split = SplitData::from_train(&xs, &ys, 7);
        let mut model = KanModel::new(tiny_cfg(1, 1, 0, 7));
        let cfg = TrainConfig::reference(7);
        let report = train_schedule(&mut model, &split, &cfg, &RunBudget::unlimited()).unwrap();
        assert_eq!(report.stages.len(), 5);
        let mse = model.mse_on(&xs, &ys);
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (xs, ys) = line_data(32);
        let split = SplitData::from_train(&xs, &ys, 5);
        let cfg = TrainConfig { cycles: 1, steps_per_stage: 40, ..TrainConfig::reference(5) };
        let run = || {
            let mut model = KanModel::new(tiny_cfg(1, 2, 1, 5));
            train_schedule(&mut model, &split, &cfg, &RunBudget::unlimited()).unwrap();
            let layout = model.layout();
            model.gather(&layout).iter().map(|p| p.to_bits()).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_flags_invalid() {
        let xs = vec![vec![0.1], vec![0.2], vec![0.3]];
        let ys = vec![1e200, -1e200, 1e200];
        let split = SplitData::from_train(&xs, &ys, 1);
        let mut model = KanModel::new(tiny_cfg(1, 1, 0, 1));
        let cfg = TrainConfig { cycles: 0, ..TrainConfig::reference(1) };
        let err = train_schedule(&mut model, &split, &cfg, &RunBudget::unlimited()).unwrap_err();
        assert_eq!(err, RunFailure::NonFiniteLoss);
        assert_eq!(err.reason(), "non-finite-loss");
    }

    #[test]
    fn snapshot_restore_round_trips_bit_exactly() {
        let mut model = KanModel::new(tiny_cfg(2, 2, 1, 13));
        let snap = model.snapshot();
        for id in model.all_edge_ids() {
            for p in &mut model.edge_mut(id).params {
                *p += 0.123;
            }
        }
        let (k, p) = sym(OpForm::Sin, 1.0, 1.0, 0.0, 0.0);
        model.replace_edge(EdgeId::L1(0), k, p);
        model.restore(&snap);
        assert_eq!(model.layer1[0].kind, EdgeKind::Numeric);
        let now = model.snapshot();
        assert_eq!(now, snap);
        let layout = model.layout();
        let a: Vec<u64> = model.gather(&layout).iter().map(|v| v.to_bits()).collect();
        model.restore(&snap);
        let b: Vec<u64> = model.gather(&layout).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn nested_snapshots_restore_lifo() {
        let mut model = KanModel::new(tiny_cfg(1, 1, 0, 17));
        let s0 = model.snapshot();
        model.edge_mut(EdgeId::L1(0)).params[0] = 10.0;
        let s1 = model.snapshot();
        model.edge_mut(EdgeId::L1(0)).params[0] = 20.0;
        model.restore(&s1);
        assert_eq!(model.edge(EdgeId::L1(0)).params[0], 10.0);
        model.restore(&s0);
        assert_eq!(model.snapshot(), s0);
    }

    #[test]
    fn checkpoint_json_round_trips_exactly() {
        let mut model = KanModel::new(tiny_cfg(2, 2, 1, 21));
        model.edge_mut(EdgeId::L1(0)).params[0] = 0.1 + 0.2;
        let (k, p) = sym(OpForm::Tanh, 0.5, -1.5, 0.25, 1e-17);
        model.replace_edge(EdgeId::L1(3), k, p);
        model.edge_mut(EdgeId::L2(1)).kind = EdgeKind::Pruned;
        let json = model.to_checkpoint_json().unwrap();
        let back = KanModel::from_checkpoint_json(&json).unwrap();
        assert_eq!(back.layer1, model.layer1);
        assert_eq!(back.layer2, model.layer2);
        let la = model.layout();
        let a: Vec<u64> = model.gather(&la).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.gather(&back.layout()).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);

        model.edge_mut(EdgeId::L1(1)).params[2] = f64::NAN;
        assert!(model.to_checkpoint_json().is_err());
        assert!(KanModel::from_checkpoint_json("{}").is_err());
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let models = [
            KanModel::new(tiny_cfg(2, 2, 1, 23)),
            KanModel::new(ModelConfig { basis: BasisKind::Rbf, ..tiny_cfg(2, 2, 1, 23) }),
            KanModel::new_gated(tiny_cfg(2, 1, 1, 23), false),
        ];
        let mut rng = seeding::stream(8, &[seeding::tag("fwd-parity")]);
        use rand::Rng;
        for model in &models {
            let layout = model.layout();
            let flat = model.gather(&layout);
            let mut tape = Tape::new();
            for _ in 0..10 {
                let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let mut ctx = F64Ctx::new(&flat);
                let plain = model.forward(&mut ctx, &layout, &x);
                tape.reset(&flat);
                let xv = [tape.lit(x[0]), tape.lit(x[1])];
                let out = model.forward(&mut tape, &layout, &xv);
                assert_eq!(tape.value(out).to_bits(), plain.to_bits());
            }
        }
    }

    #[test]
    fn edge_input_ranges_cover_columns_and_hidden_outputs() {
        let model = KanModel::new(tiny_cfg(2, 1, 1, 31));
        let xs = vec![vec![-0.5, 0.25], vec![0.75, -1.0], vec![0.1, 0.9]];
        let (l1, l2) = model.edge_input_ranges(&xs);
        assert_eq!(l1.len(), model.layer1.len());
        assert_eq!(l2.len(), model.layer2.len());
        assert_eq!(l1[0], (-0.5, 0.75));
        assert_eq!(l1[1], (-1.0, 0.9));
        assert_eq!(l1[2], (-0.5, 0.75));
        let layout = model.layout();
        let flat = model.gather(&layout);
        let mut ctx = F64Ctx::new(&flat);
        for (u, &(lo, hi)) in l2.iter().enumerate() {
            for x in &xs {
                let h = model.hidden_values(&mut ctx, &layout, x)[u];
                assert!(h >= lo && h <= hi);
            }
        }
    }

    #[test]
    fn compose_expression_flags_numeric_leftovers() {
        let model = KanModel::new(tiny_cfg(1, 1, 0, 2));
        let (e, complete) = model.compose_expression();
        assert!(!complete);
        assert!(e.contains_hole());

        let mut model = KanModel::new(tiny_cfg(1, 1, 0, 2));
        let (k, p) = sym(OpForm::Const, 0.0, 1.0, 0.0, 0.0);
        model.replace_edge(EdgeId::L1(0), k, p);
        let (k, p) = sym(OpForm::Id, 1.0, 1.0, 0.0, 0.0);
        model.replace_edge(EdgeId::L2(0), k, p);
        let (e, complete) = model.compose_expression();
        assert!(complete);
        assert_eq!(expr::serialize(&e), "0");
    }
}
