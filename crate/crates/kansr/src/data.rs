//! Task manifests and seeded dataset sampling.
//!
//! Tasks ship as a JSON manifest of named formulas with per-variable uniform
//! sampling ranges. Sampling draws a pooled set of rows, applies a seeded
//! permutation, and splits it into disjoint train and test parts, so dataset
//! bytes are a pure function of (task, seed, caps).

use crate::expr::{self, Expr, ParseError};
use crate::seeding;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Hard row caps: larger requests are a configuration error.
pub const MAX_TRAIN: usize = 2000;
pub const MAX_TEST: usize = 1000;

/// Draws allowed per row before a non-finite target becomes an error.
const RESAMPLE_LIMIT: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// One regression target: a formula over named variables plus the uniform
/// range each variable is sampled from. `provenance` records where the
/// formula and ranges were taken from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub formula: String,
    pub vars: Vec<VarSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl TaskSpec {
    /// Parse the formula with this task's variable names; variable i maps to
    /// input column i.
    pub fn parsed(&self) -> Result<Expr, ParseError> {
        let names: Vec<String> = self.vars.iter().map(|v| v.name.clone()).collect();
        expr::parse_with_vars(&self.formula, &names)
    }

    pub fn dim(&self) -> usize {
        self.vars.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest is not a task array: {0}")]
    Json(#[from] serde_json::Error),
    #[error("task {task}: formula {source}")]
    Formula { task: String, source: ParseError },
    #[error("task {task}: no variables")]
    NoVars { task: String },
    #[error("task {task}, variable {var}: bad range [{lo}, {hi}]")]
    BadRange { task: String, var: String, lo: f64, hi: f64 },
    #[error("task {task}: duplicate variable {var}")]
    DuplicateVar { task: String, var: String },
    #[error("duplicate task name {0}")]
    DuplicateTask(String),
}

pub fn load_manifest(path: &Path) -> Result<Vec<TaskSpec>, ManifestError> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

/// Parse and validate a manifest. Formulas must parse over their declared
/// variables (unknown identifiers and functions are rejected with a byte
/// position), ranges must be finite with lo < hi, and names must be unique.
pub fn parse_manifest(text: &str) -> Result<Vec<TaskSpec>, ManifestError> {
    let tasks: Vec<TaskSpec> = serde_json::from_str(text)?;
    let mut names = std::collections::BTreeSet::new();
    for t in &tasks {
        if !names.insert(t.name.clone()) {
            return Err(ManifestError::DuplicateTask(t.name.clone()));
        }
        if t.vars.is_empty() {
            return Err(ManifestError::NoVars { task: t.name.clone() });
        }
        let mut vars = std::collections::BTreeSet::new();
        for v in &t.vars {
            if !v.lo.is_finite() || !v.hi.is_finite() || v.lo >= v.hi {
                return Err(ManifestError::BadRange {
                    task: t.name.clone(),
                    var: v.name.clone(),
                    lo: v.lo,
                    hi: v.hi,
                });
            }
            if !vars.insert(v.name.clone()) {
                return Err(ManifestError::DuplicateVar {
                    task: t.name.clone(),
                    var: v.name.clone(),
                });
            }
        }
        t.parsed()
            .map_err(|source| ManifestError::Formula { task: t.name.clone(), source })?;
    }
    Ok(tasks)
}

/// Requested split sizes, bounded by `MAX_TRAIN` and `MAX_TEST`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCaps {
    pub train: usize,
    pub test: usize,
}

impl Default for SampleCaps {
    fn default() -> Self {
        SampleCaps { train: MAX_TRAIN, test: MAX_TEST }
    }
}

impl SampleCaps {
    pub fn new(train: usize, test: usize) -> Self {
        SampleCaps { train, test }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        if self.train < 1 || self.train > MAX_TRAIN || self.test > MAX_TEST {
            return Err(SampleError::BadCaps { train: self.train, test: self.test });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("task {task}: formula {source}")]
    Formula { task: String, source: ParseError },
    #[error("task {task}: row {row} stayed non-finite after {RESAMPLE_LIMIT} draws")]
    NonFinite { task: String, row: usize },
    #[error("caps out of range: train {train} (1..={MAX_TRAIN}), test {test} (0..={MAX_TEST})")]
    BadCaps { train: usize, test: usize },
}

/// Draw `caps.train + caps.test` rows uniformly over the task's variable
/// ranges, evaluate the formula per row (redrawing a row whose target comes
/// out non-finite, up to `RESAMPLE_LIMIT` times), then split the pool by a
/// seeded permutation.
pub fn sample_dataset(
    task: &TaskSpec,
    seed: u64,
    caps: SampleCaps,
) -> Result<Dataset, SampleError> {
    caps.validate()?;
    let f = task
        .parsed()
        .map_err(|source| SampleError::Formula { task: task.name.clone(), source })?;
    let d = task.dim();
    let total = caps.train + caps.test;
    let mut rng = seeding::stream(seed, &[seeding::tag("sample"), seeding::tag(&task.name)]);
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut ys: Vec<f64> = Vec::with_capacity(total);
    for row in 0..total {
        let mut x = vec![0.0; d];
        let mut y = f64::NAN;
        for _ in 0..RESAMPLE_LIMIT {
            for (j, v) in task.vars.iter().enumerate() {
                x[j] = rng.gen_range(v.lo..v.hi);
            }
            y = f.eval(&x);
            if y.is_finite() {
                break;
            }
        }
        if !y.is_finite() {
            return Err(SampleError::NonFinite { task: task.name.clone(), row });
        }
        xs.push(x);
        ys.push(y);
    }
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut rng);
    let (train_idx, test_idx) = idx.split_at(caps.train);
    let pick = |ids: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (ids.iter().map(|&i| xs[i].clone()).collect(), ids.iter().map(|&i| ys[i]).collect())
    };
    let (train_x, train_y) = pick(train_idx);
    let (test_x, test_y) = pick(test_idx);
    Ok(Dataset { train_x, train_y, test_x, test_y, seed })
}

/// CSV rows with header `x1,..,xd,y`. Floats print in shortest round-trip
/// form.
pub fn dataset_csv(xs: &[Vec<f64>], ys: &[f64]) -> String {
    assert_eq!(xs.len(), ys.len());
    let d = xs.first().map_or(0, Vec::len);
    let mut out = String::new();
    for j in 1..=d {
        let _ = write!(out, "x{j},");
    }
    out.push_str("y\n");
    for (x, y) in xs.iter().zip(ys) {
        for v in x {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{y}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(name: &str, formula: &str, vars: &[(&str, f64, f64)]) -> TaskSpec {
        TaskSpec {
            name: name.into(),
            formula: formula.into(),
            vars: vars
                .iter()
                .map(|&(n, lo, hi)| VarSpec { name: n.into(), lo, hi })
                .collect(),
            provenance: None,
        }
    }

    #[test]
    fn identity_manifest_round_trips() {
        let text = r#"[{"name": "id", "formula": "x1", "vars": [{"name": "x1", "lo": -1.0, "hi": 1.0}]}]"#;
        let tasks = parse_manifest(text).unwrap();
        assert_eq!(tasks.len(), 1);
        let ds = sample_dataset(&tasks[0], 1, SampleCaps::new(50, 20)).unwrap();
        for (x, y) in ds.train_x.iter().zip(&ds.train_y) {
            assert_eq!(x[0], *y);
        }
        assert_eq!(ds.train_x.len(), 50);
        assert_eq!(ds.test_x.len(), 20);
    }

    #[test]
    fn manifest_validation_rejects_bad_input() {
        let inverted = task("t", "x1", &[("x1", 2.0, 1.0)]);
        let text = serde_json::to_string(&vec![inverted]).unwrap();
        assert!(matches!(parse_manifest(&text), Err(ManifestError::BadRange { .. })));

        let unknown_fn = task("t", "sinc(x1)", &[("x1", 0.0, 1.0)]);
        let text = serde_json::to_string(&vec![unknown_fn]).unwrap();
        match parse_manifest(&text) {
            Err(ManifestError::Formula { task, source }) => {
                assert_eq!(task, "t");
                assert!(source.to_string().contains("unknown function"));
            }
            other => panic!("wanted formula error, got {other:?}"),
        }

        let unknown_var = task("t", "x1 + q", &[("x1", 0.0, 1.0)]);
        let text = serde_json::to_string(&vec![unknown_var]).unwrap();
        assert!(matches!(parse_manifest(&text), Err(ManifestError::Formula { .. })));

        let dup = task("t", "x1", &[("x1", 0.0, 1.0), ("x1", 0.0, 2.0)]);
        let text = serde_json::to_string(&vec![dup]).unwrap();
        assert!(matches!(parse_manifest(&text), Err(ManifestError::DuplicateVar { .. })));

        let a = task("t", "x1", &[("x1", 0.0, 1.0)]);
        let text = serde_json::to_string(&vec![a.clone(), a]).unwrap();
        assert!(matches!(parse_manifest(&text), Err(ManifestError::DuplicateTask(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_faithful() {
        let t = task("toy", "sin(v) + w^2", &[("v", -3.0, 3.0), ("w", -3.0, 3.0)]);
        let caps = SampleCaps::new(120, 60);
        let a = sample_dataset(&t, 7, caps).unwrap();
        let b = sample_dataset(&t, 7, caps).unwrap();
        assert_eq!(a, b);
        let c = sample_dataset(&t, 8, caps).unwrap();
        assert_ne!(a.train_x, c.train_x);

        for (x, y) in a.train_x.iter().zip(&a.train_y).chain(a.test_x.iter().zip(&a.test_y)) {
            assert!((y - (x[0].sin() + x[1] * x[1])).abs() < 1e-12);
            assert!(x.iter().all(|v| (-3.0..3.0).contains(v)));
        }
    }

    #[test]
    fn pool_split_is_disjoint() {
        // With continuous draws, a repeated row would be a split bug rather
        // than a collision.
        let t = task("toy", "x1", &[("x1", 0.0, 1.0)]);
        let ds = sample_dataset(&t, 3, SampleCaps::new(200, 100)).unwrap();
        let mut seen: Vec<u64> = ds
            .train_x
            .iter()
            .chain(&ds.test_x)
            .map(|r| r[0].to_bits())
            .collect();
        let n = seen.len();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), n);
    }

    #[test]
    fn non_finite_rows_are_redrawn_or_rejected() {
        // log is finite only on the positive half of the range, so roughly
        // half of all draws need a redraw.
        let t = task("halflog", "log(u)", &[("u", -1.0, 1.0)]);
        let ds = sample_dataset(&t, 5, SampleCaps::new(300, 0)).unwrap();
        assert!(ds.train_y.iter().all(|y| y.is_finite()));
        assert!(ds.train_x.iter().all(|x| x[0] > 0.0));

        // Nowhere finite: the redraw budget runs out.
        let t = task("neglog", "log(u)", &[("u", -2.0, -1.0)]);
        match sample_dataset(&t, 5, SampleCaps::new(10, 0)) {
            Err(SampleError::NonFinite { task, row }) => {
                assert_eq!(task, "neglog");
                assert_eq!(row, 0);
            }
            other => panic!("wanted non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn caps_are_enforced() {
        let t = task("toy", "x1", &[("x1", 0.0, 1.0)]);
        assert!(matches!(
            sample_dataset(&t, 1, SampleCaps::new(MAX_TRAIN + 1, 0)),
            Err(SampleError::BadCaps { .. })
        ));
        assert!(matches!(
            sample_dataset(&t, 1, SampleCaps::new(0, 10)),
            Err(SampleError::BadCaps { .. })
        ));
        assert_eq!(SampleCaps::default(), SampleCaps::new(2000, 1000));
    }

    #[test]
    fn csv_header_and_rows() {
        let xs = vec![vec![0.5, -1.0], vec![2.0, 0.25]];
        let ys = vec![1.5, -0.125];
        assert_eq!(dataset_csv(&xs, &ys), "x1,x2,y\n0.5,-1,1.5\n2,0.25,-0.125\n");
    }

    #[test]
    fn bundled_manifest_lists_the_ten_targets() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../data/feynman_manifest.json");
        let tasks = load_manifest(&path).unwrap();
        let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "I.9.18",
                "I.10.7",
                "I.12.1",
                "I.12.4",
                "I.13.4",
                "I.34.1",
                "II.6.15a",
                "II.6.15b",
                "II.21.32",
                "II.34.29a",
            ]
        );
        for t in &tasks {
            assert!(t.provenance.is_some(), "task {} lacks provenance", t.name);
            let ds = sample_dataset(t, 2, SampleCaps::new(64, 32)).unwrap();
            let f = t.parsed().unwrap();
            for (x, y) in ds.train_x.iter().zip(&ds.train_y) {
                assert!((y - f.eval(x)).abs() < 1e-12);
            }
        }
    }
}
