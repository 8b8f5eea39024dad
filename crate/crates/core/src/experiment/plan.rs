//! Declarative grid plans.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{ExperimentConfig, SplitData, Treatment};
use crate::config::{parse_range, ConfigError, KvConfig};
use crate::datasplit::{split_random, ClassSplit, DatasetSource, Side, SplitError, ToyParams};
use crate::hierarchy::{assign_leftovers, semantic_split, ClassDag, HierarchyError};
use crate::nncore::{InitConfig, ModelSpec};
use crate::optim::{LrSchedule, TrainConfig};

/// Every key a plan may set.
pub const PLAN_KEYS: &[&str] = &[
    "name",
    "toy.classes",
    "toy.per_class",
    "toy.val_per_class",
    "toy.image_size",
    "toy.noise",
    "toy.amplitude",
    "toy.seed",
    "split",
    "split.seeds",
    "split.dag",
    "split.roots",
    "split.manual",
    "split.manifest",
    "architecture",
    "init.weight_std",
    "init.bias",
    "init.layer_std",
    "train.batch_size",
    "train.iterations",
    "train.base_rate",
    "train.drop_factor",
    "train.drop_every",
    "train.momentum",
    "train.weight_decay",
    "treatments",
    "n",
    "directions",
    "repetitions",
    "seed",
    "reduced.caps",
    "random.train",
    "workers",
];

pub const DESK_ARCHITECTURE: &str = "input 1x12x12 | conv 8 5 1 2 | relu | maxpool 2 2 | lrn | conv 16 3 1 1 | relu | maxpool 2 2 | lrn | conv 16 3 1 1 | relu | fc 64 | relu | dropout 0.5 | fc 10 | softmax";

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("plan: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitPlan {
    /// One random split per seed.
    Random { seeds: Vec<u64> },
    /// Subtrees under two hierarchy roots, leftovers from a manual manifest.
    Semantic {
        dag: PathBuf,
        roots: (String, String),
        manual: Option<PathBuf>,
    },
    /// A fixed `class_id,side` manifest.
    Manifest { path: PathBuf },
}

impl SplitPlan {
    pub fn ids(&self) -> Vec<String> {
        match self {
            SplitPlan::Random { seeds } => seeds.iter().map(|s| format!("random-s{s}")).collect(),
            SplitPlan::Semantic { .. } => vec!["semantic".into()],
            SplitPlan::Manifest { .. } => vec!["manual".into()],
        }
    }
}

/// One grid cell: a treatment on a split at a repetition seed.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub split: String,
    pub treatment: Treatment,
    pub seed: u64,
}

impl Cell {
    /// File-name friendly label.
    pub fn slug(&self) -> String {
        let t = &self.treatment;
        let plus = if t.finetune() { "p" } else { "" };
        format!(
            "{}_{}{plus}_n{}_{}_s{}",
            self.split,
            t.kind().as_str(),
            t.n(),
            t.direction().replace('>', "to"),
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPlan {
    pub name: String,
    pub toy: ToyParams,
    pub split: SplitPlan,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    /// Treatment tokens: selffer, selffer+, transfer, transfer+, random; `none` in a plan gives bases only.
    pub treatments: Vec<String>,
    pub n_range: (usize, usize),
    /// Target sides, one per direction.
    pub targets: Vec<Side>,
    pub seeds: Vec<u64>,
    pub reduced_caps: Vec<usize>,
    pub train_random: bool,
    pub workers: usize,
}

const TREATMENT_TOKENS: &[&str] = &["selffer", "selffer+", "transfer", "transfer+", "random"];

impl GridPlan {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PlanError> {
        let text = fs::read_to_string(path).map_err(|source| PlanError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = KvConfig::parse(&text)?;
        for o in overrides {
            cfg.set_pair(o)?;
        }
        Self::from_config(&cfg, path.parent().unwrap_or(Path::new(".")))
    }

    /// Missing keys take the desk-scale defaults; relative paths resolve
    /// against `base_dir`.
    pub fn from_config(cfg: &KvConfig, base_dir: &Path) -> Result<Self, PlanError> {
        cfg.check_known(PLAN_KEYS)?;
        let toy = ToyParams {
            num_classes: cfg.parse_or("toy.classes", 20)?,
            per_class: cfg.parse_or("toy.per_class", 500)?,
            val_per_class: cfg.parse_or("toy.val_per_class", 100)?,
            image_size: cfg.parse_or("toy.image_size", 12)?,
            noise: cfg.parse_or("toy.noise", 1.0)?,
            amplitude: cfg.parse_or("toy.amplitude", 1.0)?,
            seed: cfg.parse_or("toy.seed", 1)?,
        };
        let path = |key: &str| -> Result<PathBuf, PlanError> { Ok(base_dir.join(cfg.require(key)?)) };
        let split = match cfg.get("split").unwrap_or("random") {
            "random" => SplitPlan::Random {
                seeds: cfg.list_or("split.seeds", vec![0])?,
            },
            "semantic" => {
                let roots: Vec<String> = cfg.list_or("split.roots", vec![])?;
                if roots.len() != 2 {
                    return Err(PlanError::Invalid("split.roots needs exactly two nodes".into()));
                }
                SplitPlan::Semantic {
                    dag: path("split.dag")?,
                    roots: (roots[0].clone(), roots[1].clone()),
                    manual: cfg.get("split.manual").map(|m| base_dir.join(m)),
                }
            }
            "manifest" => SplitPlan::Manifest {
                path: path("split.manifest")?,
            },
            other => return Err(PlanError::Invalid(format!("unknown split kind `{other}`"))),
        };
        let layer_std = cfg
            .list_or::<String>("init.layer_std", vec![])?
            .into_iter()
            .map(|item| {
                let (l, s) = item
                    .split_once(':')
                    .ok_or_else(|| PlanError::Invalid(format!("init.layer_std item `{item}` is not layer:std")))?;
                let layer = l.trim().parse().map_err(|_| PlanError::Invalid(format!("bad layer `{l}`")))?;
                let std = s.trim().parse().map_err(|_| PlanError::Invalid(format!("bad std `{s}`")))?;
                Ok((layer, std))
            })
            .collect::<Result<Vec<_>, PlanError>>()?;
        let init = InitConfig {
            weight_std: cfg.parse_or("init.weight_std", 0.03)?,
            bias: cfg.parse_or("init.bias", 0.0)?,
            layer_std,
        };
        let spec: ModelSpec = cfg
            .get("architecture")
            .unwrap_or(DESK_ARCHITECTURE)
            .parse()
            .map_err(|e| PlanError::Invalid(format!("architecture: {e}")))?;
        let spec = spec.with_init(init);
        let desk = TrainConfig::desk();
        let schedule = LrSchedule::new(
            cfg.parse_or("train.base_rate", desk.schedule.base_rate)?,
            cfg.parse_or("train.drop_factor", desk.schedule.drop_factor)?,
            cfg.parse_or("train.drop_every", desk.schedule.drop_every)?,
        )
        .map_err(|e| PlanError::Invalid(e.to_string()))?;
        let train = TrainConfig {
            batch_size: cfg.parse_or("train.batch_size", desk.batch_size)?,
            momentum: cfg.parse_or("train.momentum", desk.momentum)?,
            weight_decay: cfg.parse_or("train.weight_decay", desk.weight_decay)?,
            schedule,
            total_iterations: cfg.parse_or("train.iterations", desk.total_iterations)?,
            seed: 0,
            val_every: None,
        };
        train.validate().map_err(|e| PlanError::Invalid(e.to_string()))?;
        let treatments: Vec<String> = match cfg.get("treatments") {
            Some("none") => Vec::new(),
            _ => cfg.list_or("treatments", TREATMENT_TOKENS.iter().map(|s| s.to_string()).collect())?,
        };
        if let Some(bad) = treatments.iter().find(|t| !TREATMENT_TOKENS.contains(&t.as_str())) {
            return Err(PlanError::Invalid(format!("unknown treatment `{bad}`")));
        }
        let layers = spec.num_weight_layers();
        let n_range = match cfg.get("n") {
            Some(r) => parse_range(r).map_err(|e| PlanError::Invalid(format!("n: {e}")))?,
            None => (1, layers - 1),
        };
        if n_range.0 == 0 || n_range.1 >= layers {
            return Err(PlanError::Invalid(format!(
                "n range {}-{} must lie within 1-{}",
                n_range.0,
                n_range.1,
                layers - 1
            )));
        }
        let targets = cfg
            .list_or::<String>("directions", vec!["A>B".into(), "B>A".into()])?
            .iter()
            .map(|d| match d.as_str() {
                "A>B" => Ok(Side::B),
                "B>A" => Ok(Side::A),
                other => Err(PlanError::Invalid(format!("direction `{other}` is not A>B or B>A"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let repetitions: u64 = cfg.parse_or("repetitions", 4)?;
        let first_seed: u64 = cfg.parse_or("seed", 0)?;
        if repetitions == 0 || targets.is_empty() {
            return Err(PlanError::Invalid("need at least one repetition and one direction".into()));
        }
        Ok(GridPlan {
            name: cfg.get("name").unwrap_or("grid").to_string(),
            toy,
            split,
            spec,
            train,
            treatments,
            n_range,
            targets,
            seeds: (first_seed..first_seed + repetitions).collect(),
            reduced_caps: cfg.list_or("reduced.caps", vec![])?,
            train_random: cfg.parse_or("random.train", false)?,
            workers: cfg.parse_or("workers", 1)?,
        })
    }

    fn has(&self, token: &str) -> bool {
        self.treatments.iter().any(|t| t == token)
    }

    /// Every cell, bases first.
    pub fn cells(&self) -> Vec<Cell> {
        let transfers = self.has("transfer") || self.has("transfer+");
        let mut base_sides: Vec<Side> = Vec::new();
        for &t in &self.targets {
            base_sides.push(t);
            if transfers {
                base_sides.push(t.other());
            }
        }
        base_sides.sort();
        base_sides.dedup();

        let mut bases = Vec::new();
        let mut rest = Vec::new();
        for split in self.split.ids() {
            for &seed in &self.seeds {
                let cell = |treatment| Cell {
                    split: split.clone(),
                    treatment,
                    seed,
                };
                bases.extend(base_sides.iter().map(|&side| cell(Treatment::Base { side })));
                for &side in &self.targets {
                    for &cap in &self.reduced_caps {
                        rest.push(cell(Treatment::ReducedBase { side, cap }));
                    }
                    for token in &self.treatments {
                        for n in self.n_range.0..=self.n_range.1 {
                            let finetune = token.ends_with('+');
                            let treatment = match token.trim_end_matches('+') {
                                "selffer" => Treatment::Selffer { side, n, finetune },
                                "transfer" => Treatment::Transfer {
                                    target: side,
                                    n,
                                    finetune,
                                },
                                _ => Treatment::RandomFirstN { side, n },
                            };
                            rest.push(cell(treatment));
                        }
                    }
                }
            }
        }
        bases.extend(rest);
        bases
    }

    /// Generates the data and class splits.
    pub fn prepare(&self) -> Result<(ExperimentConfig, Vec<SplitData>), PlanError> {
        let data = self.toy.load()?;
        let mut splits = Vec::new();
        let ids = self.split.ids();
        match &self.split {
            SplitPlan::Random { seeds } => {
                for (id, &seed) in ids.iter().zip(seeds) {
                    splits.push(SplitData::new(id.clone(), split_random(&data.train.classes, seed)?, &data));
                }
            }
            SplitPlan::Semantic { dag, roots, manual } => {
                let dag = ClassDag::parse(&read(dag)?)?;
                let sem = semantic_split(&dag, &roots.0, &roots.1)?;
                let manual = match manual {
                    Some(p) => ClassSplit::from_manifest(&read(p)?)?.assignment,
                    None => BTreeMap::new(),
                };
                let split = assign_leftovers(&sem, &manual)?;
                check_covers(&split, &data.train.classes)?;
                splits.push(SplitData::new(ids[0].clone(), split, &data));
            }
            SplitPlan::Manifest { path } => {
                let split = ClassSplit::from_manifest(&read(path)?)?;
                check_covers(&split, &data.train.classes)?;
                splits.push(SplitData::new(ids[0].clone(), split, &data));
            }
        }
        for s in &splits {
            let (a, b) = s.split.sizes();
            if a == 0 || b == 0 {
                return Err(PlanError::Invalid(format!("split {} leaves a side empty", s.id)));
            }
        }
        let config = ExperimentConfig {
            spec: self.spec.clone(),
            train: self.train.clone(),
            train_random: self.train_random,
            data_manifest: self.toy.manifest_header(),
        };
        Ok((config, splits))
    }
}

fn read(path: &Path) -> Result<String, PlanError> {
    fs::read_to_string(path).map_err(|source| PlanError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_covers(split: &ClassSplit, classes: &[u32]) -> Result<(), PlanError> {
    let assigned: Vec<u32> = split.assignment.keys().copied().collect();
    let mut expected = classes.to_vec();
    expected.sort_unstable();
    if assigned != expected {
        return Err(PlanError::Invalid(format!(
            "split assigns {} classes but the dataset has {}",
            assigned.len(),
            expected.len()
        )));
    }
    Ok(())
}
