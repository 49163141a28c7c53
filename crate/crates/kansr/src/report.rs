//! Report rendering: turns sweep result rows into a stats CSV, markdown
//! tables, and one violin SVG per dataset. Everything here is a pure
//! function of its inputs so re-running a report reproduces identical bytes.

use crate::stats::{self, median, reduction_pct, stars, DatasetStats, OfatDistribution};
use crate::sweep::{
    build_distributions, seed_sensitivity, OfatConfig, RunResult, SeedSensitivityRow,
};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug)]
pub struct ReportOptions {
    /// Reference configuration of the sweep; identifies the seed repeats and
    /// which runs count as hyper-parameter perturbations.
    pub reference: OfatConfig,
    pub bootstrap_reps: usize,
    pub stats_seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            reference: OfatConfig { m: 5, lambda: 1e-2, cycles: 3, seed: 1 },
            bootstrap_reps: 2000,
            stats_seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReportBundle {
    pub stats_csv: String,
    pub report_md: String,
    /// (file name, svg body) per dataset, in first-appearance order.
    pub violins: Vec<(String, String)>,
}

/// Scientific notation with three significant digits, the notation used in
/// every table.
pub fn fmt_sci(v: f64) -> String {
    format!("{v:.2e}")
}

pub fn violin_file_name(dataset: &str) -> String {
    let safe: String = dataset
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    format!("violin_{safe}.svg")
}

pub fn build_report(results: &[RunResult], opts: &ReportOptions) -> ReportBundle {
    let dists = build_distributions(results, opts.reference, true);
    let stats = stats::dataset_stats(&dists, opts.bootstrap_reps, opts.stats_seed);
    let stats_csv = stats::stats_csv(&stats);
    let sens = seed_sensitivity(results, opts.reference);
    let report_md = render_markdown(&dists, &stats, &sens, opts);

    let mut datasets: Vec<&str> = Vec::new();
    for d in &dists {
        if !datasets.contains(&d.dataset.as_str()) {
            datasets.push(&d.dataset);
        }
    }
    let violins = datasets
        .into_iter()
        .map(|name| {
            let group: Vec<&OfatDistribution> =
                dists.iter().filter(|d| d.dataset == name).collect();
            (violin_file_name(name), violin_svg(name, &group))
        })
        .collect();
    ReportBundle { stats_csv, report_md, violins }
}

fn seed_cell(row: &SeedSensitivityRow, bold: bool) -> String {
    let mark = if row.n_valid > 0 && row.n_valid < 3 { "†" } else { "" };
    let body = match (row.mean, row.std) {
        (None, _) => return "N/A".to_string(),
        (Some(mean), _) if row.n_valid == 1 => format!("{}{mark}", fmt_sci(mean)),
        (Some(mean), Some(std)) => format!("{} ± {}{mark}", fmt_sci(mean), fmt_sci(std)),
        (Some(mean), None) => format!("{}{mark}", fmt_sci(mean)),
    };
    if bold {
        format!("**{body}**")
    } else {
        body
    }
}

fn render_markdown(
    dists: &[OfatDistribution],
    stats: &[DatasetStats],
    sens: &[SeedSensitivityRow],
    opts: &ReportOptions,
) -> String {
    let r = opts.reference;
    let mut md = String::new();
    let _ = writeln!(md, "# OFAT sweep report\n");
    let _ = writeln!(
        md,
        "Reference configuration: width {}, lambda {}, {} pruning cycles, seed {}.\n",
        r.m, r.lambda, r.cycles, r.seed
    );

    // Seed sensitivity matrix: datasets down, pipelines across.
    let mut methods: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for row in sens {
        if !methods.contains(&row.pipeline.as_str()) {
            methods.push(&row.pipeline);
        }
        if !datasets.contains(&row.dataset.as_str()) {
            datasets.push(&row.dataset);
        }
    }
    let _ = writeln!(md, "## Seed sensitivity at the reference configuration\n");
    let _ = writeln!(
        md,
        "Test MSE as mean ± std over seed repeats of the reference setting only. \
         Lowest mean per dataset in bold; † marks fewer than 3 successful seeds; \
         N/A marks methods with no successful run.\n"
    );
    let _ = writeln!(md, "| dataset | {} |", methods.join(" | "));
    let _ = writeln!(md, "|---{}|", "|---".repeat(methods.len()));
    for dataset in &datasets {
        let row_of = |m: &str| {
            sens.iter().find(|s| s.dataset == *dataset && s.pipeline == m)
        };
        let best_mean = methods
            .iter()
            .filter_map(|m| row_of(m).and_then(|s| s.mean))
            .min_by(f64::total_cmp);
        let cells: Vec<String> = methods
            .iter()
            .map(|m| match row_of(m) {
                None => "N/A".to_string(),
                Some(s) => {
                    let bold = match (s.mean, best_mean) {
                        (Some(a), Some(b)) => a == b,
                        _ => false,
                    };
                    seed_cell(s, bold)
                }
            })
            .collect();
        let _ = writeln!(md, "| {} | {} |", dataset, cells.join(" | "));
    }

    // Median OFAT table with the reduction column against AutoSym.
    let _ = writeln!(md, "\n## Median OFAT test MSE\n");
    let _ = writeln!(
        md,
        "Best pipeline by median over valid hyper-parameter OFAT runs (seed \
         repeats excluded), against the AutoSym baseline; reduction is \
         100 (1 - med(best) / med(AutoSym)).\n"
    );
    let _ = writeln!(md, "| dataset | best | med(best) | med(AutoSym) | reduction % |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for ds in stats {
        if ds.best.is_empty() {
            let _ = writeln!(md, "| {} | N/A | N/A | N/A | N/A |", ds.dataset);
            continue;
        }
        let find = |m: &str| {
            dists
                .iter()
                .find(|d| d.dataset == ds.dataset && d.method == m && !d.samples.is_empty())
        };
        let med_best = median(&find(&ds.best).expect("best has samples").samples);
        let (auto_cell, red_cell) = match find("AutoSym") {
            Some(a) => {
                let med_auto = median(&a.samples);
                let red = reduction_pct(med_best, med_auto)
                    .map_or("N/A".to_string(), |p| format!("{p:.1}"));
                (fmt_sci(med_auto), red)
            }
            None => ("N/A".to_string(), "N/A".to_string()),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            ds.dataset,
            ds.best,
            fmt_sci(med_best),
            auto_cell,
            red_cell
        );
    }

    // Full comparison battery.
    let _ = writeln!(md, "\n## Distribution comparisons\n");
    let _ = writeln!(
        md,
        "One-sided Mann-Whitney U (best < other), Holm-adjusted within each \
         dataset, Cliff's delta, and a 95% bootstrap CI of the median \
         difference. Stars: * p<0.05, ** p<0.01, *** p<0.001 after \
         adjustment.\n"
    );
    let _ = writeln!(
        md,
        "| dataset | comparison | med(best) | med(other) | U | p | p (Holm) | delta | 95% CI | |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|---|---|");
    for ds in stats {
        for row in &ds.rows {
            let _ = writeln!(
                md,
                "| {} | {} vs {} | {} | {} | {} | {} | {} | {:.2} | [{}, {}] | {} |",
                row.dataset,
                row.best,
                row.other,
                fmt_sci(row.med_best),
                fmt_sci(row.med_other),
                row.u,
                fmt_sci(row.p_raw),
                fmt_sci(row.p_holm),
                row.delta,
                fmt_sci(row.ci_lo),
                fmt_sci(row.ci_hi),
                stars(row.p_holm)
            );
        }
        for method in &ds.skipped {
            let _ = writeln!(
                md,
                "| {} | {} | N/A | N/A | N/A | N/A | N/A | N/A | N/A | no valid OFAT runs |",
                ds.dataset, method
            );
        }
    }

    let _ = writeln!(md, "\n## Figures\n");
    let mut seen: Vec<&str> = Vec::new();
    for d in dists {
        if !seen.contains(&d.dataset.as_str()) {
            seen.push(&d.dataset);
            let _ = writeln!(md, "- {}: `{}`", d.dataset, violin_file_name(&d.dataset));
        }
    }
    md
}

fn coord(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

fn log10_clamped(v: f64) -> f64 {
    v.max(1e-300).log10()
}

/// Silverman's rule on the log-scale samples; falls back to a fixed width
/// for degenerate spreads.
fn kde_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.15;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[(p * (n - 1) as f64).round() as usize];
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    if h > 1e-9 {
        h
    } else {
        0.15
    }
}

fn kde(xs: &[f64], grid: &[f64]) -> Vec<f64> {
    let h = kde_bandwidth(xs);
    grid.iter()
        .map(|&g| xs.iter().map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>())
        .collect()
}

const SLOT_W: f64 = 130.0;
const PLOT_H: f64 = 300.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 80.0;
const GRID_N: usize = 80;

/// One dataset's distributions as a violin figure on a log10 MSE axis.
/// Methods without valid runs get a red x marker instead of a violin.
pub fn violin_svg(dataset: &str, dists: &[&OfatDistribution]) -> String {
    let width = MARGIN_L + SLOT_W * dists.len() as f64 + 30.0;
    let height = MARGIN_T + PLOT_H + MARGIN_B;

    let logs: Vec<Vec<f64>> = dists
        .iter()
        .map(|d| d.samples.iter().map(|&v| log10_clamped(v)).collect())
        .collect();
    let all: Vec<f64> = logs.iter().flatten().copied().collect();
    let (mut lo, mut hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if all.is_empty() {
        lo = -1.0;
        hi = 1.0;
    }
    let pad = (0.08 * (hi - lo)).max(0.5);
    lo -= pad;
    hi += pad;
    let y_of = |v: f64| MARGIN_T + (hi - v) / (hi - lo) * PLOT_H;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\" font-family=\"sans-serif\" font-size=\"12\">",
        coord(width),
        coord(height),
        coord(width),
        coord(height)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">{} OFAT test MSE</text>",
        coord(width / 2.0),
        dataset
    );
    // Axis line and decade ticks.
    let _ = writeln!(
        svg,
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#000\"/>",
        l = coord(MARGIN_L),
        t = coord(MARGIN_T),
        b = coord(MARGIN_T + PLOT_H)
    );
    let mut k = lo.ceil() as i64;
    while k as f64 <= hi {
        let y = y_of(k as f64);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#000\"/>\
             <text x=\"{}\" y=\"{ty}\" text-anchor=\"end\">1e{k}</text>",
            coord(MARGIN_L - 5.0),
            coord(MARGIN_L),
            coord(MARGIN_L - 8.0),
            y = coord(y),
            ty = coord(y + 4.0),
        );
        k += 1;
    }
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">test MSE</text>",
        coord(MARGIN_T + PLOT_H / 2.0),
        coord(MARGIN_T + PLOT_H / 2.0)
    );

    let grid: Vec<f64> = (0..GRID_N)
        .map(|i| lo + (hi - lo) * i as f64 / (GRID_N - 1) as f64)
        .collect();
    for (slot, (d, xs)) in dists.iter().zip(&logs).enumerate() {
        let cx = MARGIN_L + SLOT_W * (slot as f64 + 0.5);
        let label_y = MARGIN_T + PLOT_H + 16.0;
        let _ = writeln!(
            svg,
            "<text x=\"{x}\" y=\"{y}\" text-anchor=\"end\" transform=\"rotate(-30 {x} {y})\">{}</text>",
            d.method,
            x = coord(cx),
            y = coord(label_y),
        );
        if xs.is_empty() {
            // The missing-method marker: no valid runs to aggregate.
            let cy = MARGIN_T + PLOT_H / 2.0;
            let _ = writeln!(
                svg,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#c00\" stroke-width=\"3.5\"/>\
                 <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#c00\" stroke-width=\"3.5\"/>",
                coord(cx - 12.0),
                coord(cy - 12.0),
                coord(cx + 12.0),
                coord(cy + 12.0),
                coord(cx - 12.0),
                coord(cy + 12.0),
                coord(cx + 12.0),
                coord(cy - 12.0)
            );
            continue;
        }
        let dens = kde(xs, &grid);
        let dmax = dens.iter().copied().fold(f64::MIN, f64::max).max(1e-300);
        let half = |i: usize| 0.42 * SLOT_W * dens[i] / dmax;
        let mut pts = String::new();
        for i in 0..GRID_N {
            let _ = write!(pts, "{},{} ", coord(cx + half(i)), coord(y_of(grid[i])));
        }
        for i in (0..GRID_N).rev() {
            let _ = write!(pts, "{},{} ", coord(cx - half(i)), coord(y_of(grid[i])));
        }
        let _ = writeln!(
            svg,
            "<polygon points=\"{}\" fill=\"#7aa6c2\" fill-opacity=\"0.55\" stroke=\"#33596e\"/>",
            pts.trim_end()
        );
        let med = median(&d.samples);
        let my = y_of(log10_clamped(med));
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{my}\" x2=\"{}\" y2=\"{my}\" stroke=\"#000\" stroke-width=\"1.5\"/>",
            coord(cx - 22.0),
            coord(cx + 22.0),
            my = coord(my)
        );
        for (i, &x) in xs.iter().enumerate() {
            let dx = ((i % 5) as f64 - 2.0) * 4.5;
            let _ = writeln!(
                svg,
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"#222\" fill-opacity=\"0.6\"/>",
                coord(cx + dx),
                coord(y_of(x))
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
