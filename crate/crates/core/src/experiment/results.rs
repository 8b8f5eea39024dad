//! Results CSV: one row per executed grid cell.

use std::io;
use std::path::Path;

use thiserror::Error;

pub const RESULTS_HEADER: [&str; 10] = [
    "treatment",
    "n",
    "direction",
    "finetune",
    "seed",
    "top1_accuracy",
    "iterations",
    "base_ckpt_hash",
    "config_hash",
    "split",
];

/// Split label used when a results file has no `split` column.
pub const DEFAULT_SPLIT: &str = "random";

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("results csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("results row {row}: {reason}")]
    Row { row: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TreatmentKind {
    Base,
    Selffer,
    Transfer,
    Random,
    Reduced,
}

impl TreatmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TreatmentKind::Base => "base",
            TreatmentKind::Selffer => "selffer",
            TreatmentKind::Transfer => "transfer",
            TreatmentKind::Random => "random",
            TreatmentKind::Reduced => "reduced",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "base" => TreatmentKind::Base,
            "selffer" => TreatmentKind::Selffer,
            "transfer" => TreatmentKind::Transfer,
            "random" => TreatmentKind::Random,
            "reduced" => TreatmentKind::Reduced,
            _ => return None,
        })
    }
}

/// One persisted cell. `n` is the split layer (0 for bases) or the per-class
/// cap for reduced bases. `direction` is `A>B` style for transplants (`R>B`
/// for random layers) and the bare side for bases.
#[derive(Clone, Debug, PartialEq)]
pub struct TreatmentResult {
    pub treatment: TreatmentKind,
    pub n: usize,
    pub direction: String,
    pub finetune: bool,
    pub seed: u64,
    pub top1_accuracy: f64,
    pub iterations: u64,
    pub base_ckpt_hash: String,
    pub config_hash: String,
    pub split: String,
}

impl TreatmentResult {
    /// Side the network was trained and evaluated on.
    pub fn target_side(&self) -> &str {
        self.direction
            .rsplit_once('>')
            .map(|(_, t)| t)
            .unwrap_or(&self.direction)
    }

    fn record(&self) -> [String; 10] {
        [
            self.treatment.as_str().to_string(),
            self.n.to_string(),
            self.direction.clone(),
            self.finetune.to_string(),
            self.seed.to_string(),
            // shortest round-trip form, so reruns can be compared bit for bit
            self.top1_accuracy.to_string(),
            self.iterations.to_string(),
            self.base_ckpt_hash.clone(),
            self.config_hash.clone(),
            self.split.clone(),
        ]
    }
}

pub fn to_csv(rows: &[TreatmentResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).expect("in-memory write");
    for row in rows {
        w.write_record(row.record()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn from_csv(text: &str) -> Result<Vec<TreatmentResult>, ResultsError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut index = [0usize; 9];
    for (slot, name) in index.iter_mut().zip(RESULTS_HEADER) {
        *slot = col(name).ok_or_else(|| ResultsError::Row {
            row: 0,
            reason: format!("missing column `{name}`"),
        })?;
    }
    let split_col = col("split");
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |k: usize| record.get(index[k]).unwrap_or("");
        let bad = |what: &str, v: &str| ResultsError::Row {
            row,
            reason: format!("bad {what} `{v}`"),
        };
        let treatment = TreatmentKind::parse(field(0)).ok_or_else(|| bad("treatment", field(0)))?;
        let top1_accuracy: f64 = field(5).parse().map_err(|_| bad("top1_accuracy", field(5)))?;
        if !(0.0..=1.0).contains(&top1_accuracy) {
            return Err(bad("top1_accuracy", field(5)));
        }
        rows.push(TreatmentResult {
            treatment,
            n: field(1).parse().map_err(|_| bad("n", field(1)))?,
            direction: field(2).to_string(),
            finetune: field(3).parse().map_err(|_| bad("finetune", field(3)))?,
            seed: field(4).parse().map_err(|_| bad("seed", field(4)))?,
            top1_accuracy,
            iterations: field(6).parse().map_err(|_| bad("iterations", field(6)))?,
            base_ckpt_hash: field(7).to_string(),
            config_hash: field(8).to_string(),
            split: split_col
                .and_then(|c| record.get(c))
                .filter(|s| !s.is_empty())
                .unwrap_or(DEFAULT_SPLIT)
                .to_string(),
        });
    }
    Ok(rows)
}

pub fn read_results(path: &Path) -> Result<Vec<TreatmentResult>, ResultsError> {
    let text = std::fs::read_to_string(path).map_err(|source| ResultsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_csv(&text)
}

/// Rewrites the whole file atomically.
pub fn write_results(path: &Path, rows: &[TreatmentResult]) -> Result<(), ResultsError> {
    crate::io_util::write_atomic(path, to_csv(rows).as_bytes()).map_err(|source| ResultsError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(acc: f64) -> TreatmentResult {
        TreatmentResult {
            treatment: TreatmentKind::Transfer,
            n: 3,
            direction: "A>B".into(),
            finetune: true,
            seed: 2,
            top1_accuracy: acc,
            iterations: 3000,
            base_ckpt_hash: "00ff".into(),
            config_hash: "abcd".into(),
            split: "semantic".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let rows = vec![row(0.1 + 0.2), row(1.0 / 3.0)];
        assert_eq!(from_csv(&to_csv(&rows)).unwrap(), rows);
        assert_eq!(rows[0].target_side(), "B");
    }

    #[test]
    fn split_column_is_optional() {
        let text = "treatment,n,direction,finetune,seed,top1_accuracy,iterations,base_ckpt_hash,config_hash\n\
                    base,0,A,false,0,0.5,10,,x\n";
        let rows = from_csv(text).unwrap();
        assert_eq!(rows[0].split, DEFAULT_SPLIT);
        assert_eq!(rows[0].target_side(), "A");
    }

    #[test]
    fn rejects_bad_rows() {
        let head = RESULTS_HEADER.join(",");
        assert!(from_csv(&format!("{head}\nbase,0,A,false,0,1.5,10,,x,r\n")).is_err());
        assert!(from_csv(&format!("{head}\nwhat,0,A,false,0,0.5,10,,x,r\n")).is_err());
        assert!(from_csv("treatment,n\nbase,0\n").is_err());
    }
}
