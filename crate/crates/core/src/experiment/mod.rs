//! Treatments, evaluation, and the resumable treatment grid.

mod grid;
mod plan;
mod results;

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use grid::{reproduce_cell, run_grid, GridError, GridOptions, GridSummary, RESULTS_FILE};
pub use plan::{Cell, GridPlan, PlanError, SplitPlan, PLAN_KEYS, DESK_ARCHITECTURE};
pub use results::{
    from_csv, read_results, to_csv, write_results, ResultsError, TreatmentKind, TreatmentResult,
    DEFAULT_SPLIT, RESULTS_HEADER,
};

use crate::datasplit::{reduce_per_class, restrict, ClassSplit, DatasetPair, LabeledDataset, Role, Side, SplitError};
use crate::nncore::{Model, ModelSpec, ShapeError, Tensor};
use crate::optim::{train, MetricTrace, TrainConfig, TrainError};
use crate::surgery::{
    init_random, randomize_first_n, transplant, Checkpoint, Provenance, SurgeryError, TransplantMode,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid treatment: {0}")]
    Treatment(String),
    #[error("dependency: {0}")]
    Dependency(String),
    #[error("evaluation needs a validation set, got a training set ({0})")]
    Role(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

/// One treatment applied to a target side. Selffers and transfers copy the
/// first `n` layers of the same-side or other-side base respectively.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Treatment {
    Base { side: Side },
    Selffer { side: Side, n: usize, finetune: bool },
    Transfer { target: Side, n: usize, finetune: bool },
    RandomFirstN { side: Side, n: usize },
    ReducedBase { side: Side, cap: usize },
}

impl Treatment {
    pub fn kind(&self) -> TreatmentKind {
        match self {
            Treatment::Base { .. } => TreatmentKind::Base,
            Treatment::Selffer { .. } => TreatmentKind::Selffer,
            Treatment::Transfer { .. } => TreatmentKind::Transfer,
            Treatment::RandomFirstN { .. } => TreatmentKind::Random,
            Treatment::ReducedBase { .. } => TreatmentKind::Reduced,
        }
    }

    /// Split layer, or the per-class cap for reduced bases.
    pub fn n(&self) -> usize {
        match *self {
            Treatment::Base { .. } => 0,
            Treatment::Selffer { n, .. } | Treatment::Transfer { n, .. } | Treatment::RandomFirstN { n, .. } => n,
            Treatment::ReducedBase { cap, .. } => cap,
        }
    }

    pub fn finetune(&self) -> bool {
        matches!(
            self,
            Treatment::Selffer { finetune: true, .. } | Treatment::Transfer { finetune: true, .. }
        )
    }

    pub fn target(&self) -> Side {
        match *self {
            Treatment::Base { side }
            | Treatment::Selffer { side, .. }
            | Treatment::RandomFirstN { side, .. }
            | Treatment::ReducedBase { side, .. } => side,
            Treatment::Transfer { target, .. } => target,
        }
    }

    /// Side whose trained base this treatment copies from.
    pub fn base_side(&self) -> Option<Side> {
        match *self {
            Treatment::Selffer { side, .. } => Some(side),
            Treatment::Transfer { target, .. } => Some(target.other()),
            _ => None,
        }
    }

    pub fn direction(&self) -> String {
        match *self {
            Treatment::Base { side } | Treatment::ReducedBase { side, .. } => side.to_string(),
            Treatment::Selffer { side, .. } => format!("{side}>{side}"),
            Treatment::Transfer { target, .. } => format!("{}>{target}", target.other()),
            Treatment::RandomFirstN { side, .. } => format!("R>{side}"),
        }
    }

    /// Checks `1 <= n <= L-1` for layer treatments and `cap >= 1`.
    pub fn validate(&self, weight_layers: usize) -> Result<(), ExperimentError> {
        match *self {
            Treatment::Base { .. } => Ok(()),
            Treatment::ReducedBase { cap, .. } if cap == 0 => {
                Err(ExperimentError::Treatment("reduced base needs cap >= 1".into()))
            }
            Treatment::ReducedBase { .. } => Ok(()),
            _ => {
                let n = self.n();
                if n == 0 {
                    Err(ExperimentError::Treatment(format!(
                        "{self}: n = 0 is only meaningful as a base network"
                    )))
                } else if n >= weight_layers {
                    Err(ExperimentError::Treatment(format!(
                        "{self}: n must be at most {} for {weight_layers} weight layers",
                        weight_layers - 1
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let plus = if self.finetune() { "+" } else { "" };
        match self {
            Treatment::Base { side } => write!(f, "base {side}"),
            Treatment::ReducedBase { side, cap } => write!(f, "reduced {side} cap={cap}"),
            _ => write!(f, "{}{plus} n={} {}", self.kind().as_str(), self.n(), self.direction()),
        }
    }
}

/// Seed for one cell's initialization and shuffling, derived from the
/// repetition seed so that every treatment draws its own upper-layer weights.
pub fn cell_seed(repetition_seed: u64, treatment: &Treatment) -> u64 {
    let digest = Sha256::digest(format!("{repetition_seed}/{treatment}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_from_logits<'a>(rows: impl IntoIterator<Item = (&'a [f32], usize)>) -> f64 {
    let (hits, total) = rows
        .into_iter()
        .fold((0usize, 0usize), |(h, t), (logits, label)| {
            (h + usize::from(argmax(logits) == label), t + 1)
        });
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn top1_accuracy(model: &Model<f32>, dataset: &LabeledDataset) -> Result<f64, ShapeError> {
    let classes = model.spec().num_classes();
    if dataset.classes.len() != classes {
        return Err(ShapeError::Mismatch {
            what: "dataset class count",
            expected: classes.to_string(),
            found: vec![dataset.classes.len()],
        });
    }
    let logits: Vec<Tensor<f32>> = dataset
        .examples
        .iter()
        .map(|ex| model.logits(&ex.image))
        .collect::<Result<_, _>>()?;
    Ok(accuracy_from_logits(
        logits
            .iter()
            .zip(&dataset.examples)
            .map(|(l, ex)| (l.data(), ex.label)),
    ))
}

/// Top-1 accuracy of a checkpoint on a validation set.
pub fn evaluate(ckpt: &Checkpoint, dataset: &LabeledDataset) -> Result<f64, ExperimentError> {
    if dataset.role != Role::Validation {
        return Err(ExperimentError::Role(dataset.id.clone()));
    }
    Ok(top1_accuracy(&ckpt.to_model(), dataset)?)
}

/// Train and validation sets of both sides of one class split.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub id: String,
    pub split: ClassSplit,
    train: [LabeledDataset; 2],
    validation: [LabeledDataset; 2],
}

fn slot(side: Side) -> usize {
    match side {
        Side::A => 0,
        Side::B => 1,
    }
}

impl SplitData {
    pub fn new(id: impl Into<String>, split: ClassSplit, data: &DatasetPair) -> Self {
        let id = id.into();
        let part = |d: &LabeledDataset, side| {
            let mut r = restrict(d, &split, side);
            r.id = format!("{}/{id}:{side}", d.id);
            r
        };
        SplitData {
            train: [part(&data.train, Side::A), part(&data.train, Side::B)],
            validation: [part(&data.validation, Side::A), part(&data.validation, Side::B)],
            split,
            id,
        }
    }

    pub fn train(&self, side: Side) -> &LabeledDataset {
        &self.train[slot(side)]
    }

    pub fn validation(&self, side: Side) -> &LabeledDataset {
        &self.validation[slot(side)]
    }
}

/// Settings shared by every cell of a grid.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Architecture; the classifier width is set per target side.
    pub spec: ModelSpec,
    /// Training settings; the seed is replaced per cell.
    pub train: TrainConfig,
    /// Let random-first-n layers learn instead of staying frozen.
    pub train_random: bool,
    /// Text identifying the data, folded into the config hash.
    pub data_manifest: String,
}

impl ExperimentConfig {
    pub fn spec_for(&self, classes: usize) -> Result<ModelSpec, ShapeError> {
        self.spec.with_num_classes(classes)
    }

    /// Short hash of everything that determines a cell's outcome apart from
    /// the base checkpoint.
    pub fn cell_hash(&self, split: &SplitData, treatment: &Treatment, seed: u64) -> String {
        let t = &self.train;
        let s = &t.schedule;
        let text = format!(
            "arch={}\nbatch={} momentum={} decay={} lr={} drop={} every={} iters={}\n\
             train_random={}\ndata={}\nsplit={}\n{}\ntreatment={treatment}\nseed={seed}\n",
            self.spec.descriptor(),
            t.batch_size,
            t.momentum,
            t.weight_decay,
            s.base_rate,
            s.drop_factor,
            s.drop_every,
            t.total_iterations,
            self.train_random,
            self.data_manifest,
            split.id,
            split.split.to_manifest(),
        );
        crate::io_util::short_hash(text.as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct CellOutput {
    pub result: TreatmentResult,
    pub checkpoint: Checkpoint,
    pub trace: MetricTrace,
}

/// Builds the treatment's starting network, trains it on the target side and
/// evaluates it on the target side's validation set. `base` must be the
/// trained base of [`Treatment::base_side`] when that is `Some`.
pub fn run_treatment(
    treatment: &Treatment,
    seed: u64,
    data: &SplitData,
    base: Option<&Checkpoint>,
    config: &ExperimentConfig,
) -> Result<CellOutput, ExperimentError> {
    let target = treatment.target();
    let spec = config.spec_for(data.train(target).classes.len())?;
    treatment.validate(spec.num_weight_layers())?;
    let cseed = cell_seed(seed, treatment);
    let mut train_set = data.train(target);
    let reduced;

    let mut base_hash = String::new();
    let model = match *treatment {
        Treatment::Base { .. } => init_random(&spec, cseed),
        Treatment::ReducedBase { cap, .. } => {
            reduced = reduce_per_class(train_set, cap, cseed)?;
            train_set = &reduced;
            init_random(&spec, cseed)
        }
        Treatment::RandomFirstN { n, .. } => randomize_first_n(&spec, n, cseed, config.train_random)?,
        Treatment::Selffer { n, finetune, .. } | Treatment::Transfer { n, finetune, .. } => {
            let source = treatment.base_side().expect("transplant has a base side");
            let base = base.ok_or_else(|| {
                ExperimentError::Dependency(format!("{treatment} needs the trained base of side {source}"))
            })?;
            let expected = &data.train(source).id;
            if &base.provenance.dataset_id != expected {
                return Err(ExperimentError::Dependency(format!(
                    "{treatment} needs a base trained on {expected}, got one trained on {}",
                    base.provenance.dataset_id
                )));
            }
            base_hash = base.content_hash();
            let mode = if finetune {
                TransplantMode::FineTune
            } else {
                TransplantMode::Frozen
            };
            transplant(base, &spec, n, mode, cseed)?
        }
    };

    let train_config = TrainConfig {
        seed: cseed,
        ..config.train.clone()
    };
    let (mut checkpoint, trace) = train(model, train_set, &train_config, None)?;
    checkpoint.provenance = Provenance {
        dataset_id: train_set.id.clone(),
        seed: cseed,
        iterations: train_config.total_iterations,
    };
    let accuracy = evaluate(&checkpoint, data.validation(target))?;
    if treatment.kind() == TreatmentKind::Base {
        base_hash = checkpoint.content_hash();
    }
    let finetune = match treatment {
        Treatment::RandomFirstN { .. } => config.train_random,
        t => t.finetune(),
    };
    Ok(CellOutput {
        result: TreatmentResult {
            treatment: treatment.kind(),
            n: treatment.n(),
            direction: treatment.direction(),
            finetune,
            seed,
            top1_accuracy: accuracy,
            iterations: train_config.total_iterations,
            base_ckpt_hash: base_hash,
            config_hash: config.cell_hash(data, treatment, seed),
            split: data.id.clone(),
        },
        checkpoint,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
        assert_eq!(argmax(&[-1.0, -0.5]), 1);
    }

    #[test]
    fn treatment_labels() {
        let t = Treatment::Transfer {
            target: Side::A,
            n: 3,
            finetune: true,
        };
        assert_eq!(t.direction(), "B>A");
        assert_eq!(t.base_side(), Some(Side::B));
        assert_eq!(t.to_string(), "transfer+ n=3 B>A");
        let s = Treatment::Selffer {
            side: Side::B,
            n: 2,
            finetune: false,
        };
        assert_eq!(s.direction(), "B>B");
        assert_eq!(s.base_side(), Some(Side::B));
        let r = Treatment::RandomFirstN { side: Side::B, n: 1 };
        assert_eq!(r.direction(), "R>B");
        assert_eq!(r.base_side(), None);
        assert_ne!(cell_seed(0, &t), cell_seed(0, &s));
        assert_ne!(cell_seed(0, &t), cell_seed(1, &t));
    }

    #[test]
    fn n_bounds() {
        let at = |n| Treatment::Transfer {
            target: Side::B,
            n,
            finetune: false,
        };
        assert!(at(0).validate(8).is_err());
        assert!(at(1).validate(8).is_ok());
        assert!(at(7).validate(8).is_ok());
        assert!(at(8).validate(8).is_err());
        assert!(Treatment::ReducedBase { side: Side::A, cap: 0 }.validate(8).is_err());
    }
}
