//! Derived quantities over result tables: error rates, mean boosts,
//! base-normalized curves, reduced-dataset slopes and the report CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{TreatmentKind, TreatmentResult};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("accuracy {0} is outside [0, 1]")]
    Range(f64),
    #[error("missing rows: {}", .0.join("; "))]
    Coverage(Vec<String>),
    #[error("abscissae must be strictly increasing: {0}")]
    Abscissa(String),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Formats like C's `%g`: 6 significant digits, trailing zeros trimmed.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Top-1 error in percent.
pub fn error_from_accuracy(acc: f64) -> Result<f64, AnalysisError> {
    if !(0.0..=1.0).contains(&acc) {
        return Err(AnalysisError::Range(acc));
    }
    Ok((1.0 - acc) * 100.0)
}

/// Display series after merging mirror-image directions: `AnA` rows count as
/// `BnB`, `BnA` rows as `AnB`, and both bases as `baseB`.
pub fn series_of(row: &TreatmentResult) -> &'static str {
    match (row.treatment, row.finetune) {
        (TreatmentKind::Base, _) => "baseB",
        (TreatmentKind::Selffer, false) => "BnB",
        (TreatmentKind::Selffer, true) => "BnB+",
        (TreatmentKind::Transfer, false) => "AnB",
        (TreatmentKind::Transfer, true) => "AnB+",
        (TreatmentKind::Random, false) => "random",
        (TreatmentKind::Random, true) => "random+",
        (TreatmentKind::Reduced, _) => "reduced",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Base,
    SelfferFineTuned,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Base => "baseB",
            BaselineKind::SelfferFineTuned => "BnB+",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoostSummary {
    pub range: (usize, usize),
    pub baseline: BaselineKind,
    /// Percentage points.
    pub mean_boost: f64,
    pub cells: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Mean over `AnB+` cells with `n` in `range` (inclusive) of the accuracy gap
/// to the baseline, in percentage points. The base baseline is the mean of all
/// base rows; the selffer baseline is the `BnB+` mean at the same `n`.
pub fn mean_boost(
    table: &[TreatmentResult],
    range: (usize, usize),
    baseline: BaselineKind,
) -> Result<BoostSummary, AnalysisError> {
    let (lo, hi) = range;
    let mut missing = Vec::new();
    let of = |series: &str, n: Option<usize>| -> Vec<f64> {
        table
            .iter()
            .filter(|r| series_of(r) == series && n.is_none_or(|n| r.n == n))
            .map(|r| r.top1_accuracy)
            .collect()
    };
    let base_mean = mean(of("baseB", None));
    if baseline == BaselineKind::Base && base_mean.is_none() {
        missing.push("baseB".to_string());
    }
    let mut gaps = Vec::new();
    for n in lo..=hi {
        let treated = of("AnB+", Some(n));
        if treated.is_empty() {
            missing.push(format!("AnB+ n={n}"));
        }
        let reference = match baseline {
            BaselineKind::Base => base_mean,
            BaselineKind::SelfferFineTuned => {
                let m = mean(of("BnB+", Some(n)));
                if m.is_none() {
                    missing.push(format!("BnB+ n={n}"));
                }
                m
            }
        };
        if let Some(r) = reference {
            gaps.extend(treated.iter().map(|a| a - r));
        }
    }
    if lo > hi {
        missing.push(format!("empty range {lo}-{hi}"));
    }
    if !missing.is_empty() {
        return Err(AnalysisError::Coverage(missing));
    }
    Ok(BoostSummary {
        range,
        baseline,
        mean_boost: mean(gaps.iter().copied()).expect("non-empty") * 100.0,
        cells: gaps.len(),
    })
}

/// Per-(split, series, n) mean of accuracy minus the mean base accuracy of the
/// same split and target side. Bases and reduced rows are excluded from the
/// keys except the base series itself.
pub fn normalize_by_base(
    table: &[TreatmentResult],
) -> Result<BTreeMap<(String, &'static str, usize), f64>, AnalysisError> {
    let mut bases: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in table.iter().filter(|r| r.treatment == TreatmentKind::Base) {
        bases
            .entry((&r.split, r.target_side()))
            .or_default()
            .push(r.top1_accuracy);
    }
    let base_means: BTreeMap<_, f64> = bases
        .into_iter()
        .map(|(k, v)| (k, mean(v).expect("non-empty")))
        .collect();
    let mut missing = Vec::new();
    let mut sums: BTreeMap<(String, &'static str, usize), (f64, usize)> = BTreeMap::new();
    for r in table.iter().filter(|r| r.treatment != TreatmentKind::Reduced) {
        match base_means.get(&(r.split.as_str(), r.target_side())) {
            Some(base) => {
                let e = sums.entry((r.split.clone(), series_of(r), r.n)).or_default();
                e.0 += r.top1_accuracy - base;
                e.1 += 1;
            }
            None => missing.push(format!("base for split {} side {}", r.split, r.target_side())),
        }
    }
    if !missing.is_empty() {
        missing.dedup();
        return Err(AnalysisError::Coverage(missing));
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, c))| (k, s / c as f64))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub left: f64,
    pub right: f64,
    pub rise: f64,
    pub slope: f64,
}

/// Rise and slope of each adjacent pair of `(examples_per_class, accuracy)`
/// points; the last segment is the rightmost.
pub fn overfit_slope(points: &[(f64, f64)]) -> Result<Vec<Segment>, AnalysisError> {
    if points.len() < 2 {
        return Err(AnalysisError::TooFewPoints(points.len()));
    }
    points
        .windows(2)
        .map(|w| {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if !(x1 > x0) {
                return Err(AnalysisError::Abscissa(format!("{x0} then {x1}")));
            }
            let rise = y1 - y0;
            Ok(Segment {
                left: x0,
                right: x1,
                rise,
                slope: rise / (x1 - x0),
            })
        })
        .collect()
}

/// Default boost ranges for networks with `max_n` transplantable layers.
pub fn default_ranges(max_n: usize) -> Vec<(usize, usize)> {
    [1, 3, 5]
        .into_iter()
        .filter(|&lo| lo <= max_n)
        .map(|lo| (lo, max_n))
        .collect()
}

pub const FIG2_HEADER: &str = "split,series,n,seed,direction,top1_accuracy";
pub const FIG3_HEADER: &str = "split,series,n,normalized_accuracy";
pub const TABLE1_HEADER: &str = "split,range,baseline,mean_boost_points,cells";
pub const REDUCED_HEADER: &str = "split,examples_per_class,mean_accuracy,rise,slope";

/// Writes `fig2_points.csv` (every row), `fig3_normalized.csv`,
/// `table1_boosts.csv` and `reduced_curve.csv` under `out_dir`. Splits lacking
/// the rows a file needs contribute nothing to it. `ranges` defaults to
/// [`default_ranges`] over the largest transplant `n` present.
pub fn emit_report(
    table: &[TreatmentResult],
    out_dir: &Path,
    ranges: Option<&[(usize, usize)]>,
) -> Result<Vec<PathBuf>, AnalysisError> {
    let files = [
        ("fig2_points.csv", fig2_points(table)),
        ("fig3_normalized.csv", fig3_normalized(table)),
        ("table1_boosts.csv", table1_boosts(table, ranges)),
        ("reduced_curve.csv", reduced_curve(table)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        crate::io_util::write_atomic(&path, body.as_bytes()).map_err(|source| AnalysisError::Io {
            path: path.display().to_string(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

fn splits(table: &[TreatmentResult]) -> Vec<&str> {
    let mut s: Vec<&str> = table.iter().map(|r| r.split.as_str()).collect();
    s.sort_unstable();
    s.dedup();
    s
}

fn fig2_points(table: &[TreatmentResult]) -> String {
    let mut rows: Vec<_> = table
        .iter()
        .map(|r| (r.split.as_str(), series_of(r), r.n, r.seed, r.direction.as_str(), r.top1_accuracy))
        .collect();
    rows.sort_by(|a, b| {
        (a.0, a.1, a.2, a.3, a.4)
            .cmp(&(b.0, b.1, b.2, b.3, b.4))
            .then(a.5.total_cmp(&b.5))
    });
    let mut out = format!("{FIG2_HEADER}\n");
    for (split, series, n, seed, dir, acc) in rows {
        let _ = writeln!(out, "{split},{series},{n},{seed},{dir},{}", sig6(acc));
    }
    out
}

fn fig3_normalized(table: &[TreatmentResult]) -> String {
    let mut out = format!("{FIG3_HEADER}\n");
    for split in splits(table) {
        let rows: Vec<TreatmentResult> = table.iter().filter(|r| r.split == split).cloned().collect();
        if let Ok(curves) = normalize_by_base(&rows) {
            for ((split, series, n), v) in curves {
                let _ = writeln!(out, "{split},{series},{n},{}", sig6(v));
            }
        }
    }
    out
}

fn table1_boosts(table: &[TreatmentResult], ranges: Option<&[(usize, usize)]>) -> String {
    let mut out = format!("{TABLE1_HEADER}\n");
    for split in splits(table) {
        let rows: Vec<TreatmentResult> = table.iter().filter(|r| r.split == split).cloned().collect();
        let max_n = rows
            .iter()
            .filter(|r| series_of(r) == "AnB+")
            .map(|r| r.n)
            .max()
            .unwrap_or(0);
        let chosen = match ranges {
            Some(r) => r.to_vec(),
            None => default_ranges(max_n),
        };
        for kind in [BaselineKind::Base, BaselineKind::SelfferFineTuned] {
            for &range in &chosen {
                if let Ok(b) = mean_boost(&rows, range, kind) {
                    let _ = writeln!(
                        out,
                        "{split},{}-{},{},{},{}",
                        range.0,
                        range.1,
                        kind.label(),
                        sig6(b.mean_boost),
                        b.cells
                    );
                }
            }
        }
    }
    out
}

fn reduced_curve(table: &[TreatmentResult]) -> String {
    let mut out = format!("{REDUCED_HEADER}\n");
    for split in splits(table) {
        let mut by_cap: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in table
            .iter()
            .filter(|r| r.split == split && r.treatment == TreatmentKind::Reduced)
        {
            by_cap.entry(r.n).or_default().push(r.top1_accuracy);
        }
        let points: Vec<(f64, f64)> = by_cap
            .into_iter()
            .map(|(cap, v)| (cap as f64, mean(v).expect("non-empty")))
            .collect();
        let segments = overfit_slope(&points).unwrap_or_default();
        for (i, &(cap, acc)) in points.iter().enumerate() {
            let (rise, slope) = match i.checked_sub(1).and_then(|j| segments.get(j)) {
                Some(s) => (sig6(s.rise), sig6(s.slope)),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(out, "{split},{cap},{},{rise},{slope}", sig6(acc));
        }
    }
    out
}
