//! Labeled datasets, class splits, per-class reduction and the synthetic toy
//! image generator.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nncore::Tensor;
use crate::optim::stream_rng;

pub type ClassId = u32;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("need at least 2 classes to split, got {0}")]
    TooFewClasses(usize),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("bad split manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::A => "A",
            Side::B => "B",
        })
    }
}

impl FromStr for Side {
    type Err = SplitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Side::A),
            "B" | "b" => Ok(Side::B),
            other => Err(SplitError::Param(format!("unknown side `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub image: Tensor<f32>,
    /// Dense index into the owning dataset's class list.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub id: String,
    pub role: Role,
    pub classes: Vec<ClassId>,
    pub examples: Vec<Example>,
}

impl LabeledDataset {
    pub fn class_of(&self, example: &Example) -> ClassId {
        self.classes[example.label]
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts: BTreeMap<ClassId, usize> = self.classes.iter().map(|&c| (c, 0)).collect();
        for ex in &self.examples {
            *counts.entry(self.class_of(ex)).or_default() += 1;
        }
        counts
    }
}

/// A train/validation pair drawn from the same classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
}

/// Anything that can produce a dataset pair; the toy generator is one source.
pub trait DatasetSource {
    fn load(&self) -> Result<DatasetPair, SplitError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMethod {
    Random,
    Semantic,
    Manual,
}

impl fmt::Display for SplitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMethod::Random => "random",
            SplitMethod::Semantic => "semantic",
            SplitMethod::Manual => "manual",
        })
    }
}

impl FromStr for SplitMethod {
    type Err = SplitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SplitMethod::Random),
            "semantic" => Ok(SplitMethod::Semantic),
            "manual" => Ok(SplitMethod::Manual),
            other => Err(SplitError::Param(format!("unknown split method `{other}`"))),
        }
    }
}

/// Assignment of every class to side A or B.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub assignment: BTreeMap<ClassId, Side>,
    pub method: SplitMethod,
    pub seed: Option<u64>,
}

impl ClassSplit {
    pub fn side_of(&self, class: ClassId) -> Option<Side> {
        self.assignment.get(&class).copied()
    }

    pub fn classes(&self, side: Side) -> Vec<ClassId> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == side)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.classes(Side::A).len(), self.classes(Side::B).len())
    }

    /// `class_id,side` rows preceded by a `#` header recording method and seed.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("# method={}", self.method);
        if let Some(seed) = self.seed {
            out.push_str(&format!(" seed={seed}"));
        }
        out.push_str("\nclass_id,side\n");
        for (c, s) in &self.assignment {
            out.push_str(&format!("{c},{s}\n"));
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, SplitError> {
        let mut method = SplitMethod::Manual;
        let mut seed = None;
        let mut assignment = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let bad = |reason: String| SplitError::Manifest { line: i + 1, reason };
            if let Some(header) = line.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("method", m)) => method = m.parse()?,
                        Some(("seed", s)) => {
                            seed = Some(s.parse().map_err(|_| bad(format!("bad seed `{s}`")))?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() || line == "class_id,side" {
                continue;
            }
            let (c, s) = line
                .split_once(',')
                .ok_or_else(|| bad("expected `class_id,side`".into()))?;
            let class: ClassId = c
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad class id `{c}`")))?;
            let side: Side = s.parse().map_err(|e: SplitError| bad(e.to_string()))?;
            if assignment.insert(class, side).is_some() {
                return Err(bad(format!("class {class} listed twice")));
            }
        }
        Ok(ClassSplit {
            assignment,
            method,
            seed,
        })
    }
}

/// Seeded split into two halves whose sizes differ by at most one (A gets the
/// extra class when the count is odd).
pub fn split_random(classes: &[ClassId], seed: u64) -> Result<ClassSplit, SplitError> {
    let unique: BTreeSet<ClassId> = classes.iter().copied().collect();
    if unique.len() < 2 {
        return Err(SplitError::TooFewClasses(unique.len()));
    }
    let mut order: Vec<ClassId> = unique.into_iter().collect();
    order.shuffle(&mut stream_rng(seed, 0));
    let half = order.len().div_ceil(2);
    let assignment = order
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, if i < half { Side::A } else { Side::B }))
        .collect();
    Ok(ClassSplit {
        assignment,
        method: SplitMethod::Random,
        seed: Some(seed),
    })
}

/// Examples whose class lies on `side`, with labels re-indexed densely in the
/// order of the original class list.
pub fn restrict(dataset: &LabeledDataset, split: &ClassSplit, side: Side) -> LabeledDataset {
    let mut remap = vec![None; dataset.classes.len()];
    let mut classes = Vec::new();
    for (old, &c) in dataset.classes.iter().enumerate() {
        if split.side_of(c) == Some(side) {
            remap[old] = Some(classes.len());
            classes.push(c);
        }
    }
    let examples = dataset
        .examples
        .iter()
        .filter_map(|ex| {
            remap[ex.label].map(|label| Example {
                id: ex.id,
                image: ex.image.clone(),
                label,
            })
        })
        .collect();
    LabeledDataset {
        id: format!("{}:{side}", dataset.id),
        role: dataset.role,
        classes,
        examples,
    }
}

/// Keeps at most `cap` examples per class: the first `cap` of a seeded
/// per-class shuffle, so smaller caps select subsets of larger ones. Validation
/// sets are returned unchanged.
pub fn reduce_per_class(dataset: &LabeledDataset, cap: usize, seed: u64) -> Result<LabeledDataset, SplitError> {
    if cap == 0 {
        return Err(SplitError::Param("cap must be >= 1".into()));
    }
    if dataset.role == Role::Validation {
        return Ok(dataset.clone());
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        by_class.entry(ex.label).or_default().push(i);
    }
    let mut keep = vec![false; dataset.examples.len()];
    for (label, mut members) in by_class {
        let class = dataset.classes[label] as u64;
        members.shuffle(&mut stream_rng(seed, class + 1));
        for &i in members.iter().take(cap) {
            keep[i] = true;
        }
    }
    Ok(LabeledDataset {
        id: format!("{}@{cap}", dataset.id),
        role: dataset.role,
        classes: dataset.classes.clone(),
        examples: dataset
            .examples
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(ex, _)| ex.clone())
            .collect(),
    })
}

/// Parameters of the procedural image generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyParams {
    pub num_classes: usize,
    pub per_class: usize,
    pub val_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Overall pixel amplitude.
    pub amplitude: f64,
    pub seed: u64,
}

impl ToyParams {
    pub fn new(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        ToyParams {
            num_classes,
            per_class,
            val_per_class: (per_class / 2).max(1),
            image_size,
            noise: 0.3,
            amplitude: 1.0,
            seed,
        }
    }

    pub fn dataset_id(&self) -> String {
        format!("toy{}-s{}", self.num_classes, self.seed)
    }

    /// One-line description that regenerates the data.
    pub fn manifest_header(&self) -> String {
        format!(
            "# toy classes={} per_class={} val_per_class={} image_size={} noise={} amplitude={} seed={}",
            self.num_classes,
            self.per_class,
            self.val_per_class,
            self.image_size,
            self.noise,
            self.amplitude,
            self.seed
        )
    }
}

impl DatasetSource for ToyParams {
    fn load(&self) -> Result<DatasetPair, SplitError> {
        generate_toy(self)
    }
}

/// Procedural data: classes in the first half are oriented gratings, classes in
/// the second half are blob constellations. Train and validation draw from
/// disjoint RNG streams.
pub fn toy_dataset(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<DatasetPair, SplitError> {
    generate_toy(&ToyParams::new(num_classes, per_class, image_size, seed))
}

/// First class id of the blob family.
pub fn toy_blob_start(num_classes: usize) -> usize {
    num_classes / 2
}

#[derive(Clone, Debug)]
enum Pattern {
    Grating { angle: f64, freq: f64 },
    Blobs { centers: Vec<(f64, f64, f64)>, radius: f64 },
}

fn class_patterns(params: &ToyParams) -> Vec<Pattern> {
    let n = params.num_classes;
    let blob_start = toy_blob_start(n);
    let size = params.image_size as f64;
    let mut rng = stream_rng(params.seed, 0);
    let gratings = blob_start.max(1);
    let mut patterns = Vec::with_capacity(n);
    for c in 0..n {
        if c < blob_start {
            // orientations spread evenly over the half circle, frequencies cycle
            let angle = PI * c as f64 / gratings as f64 + rng.random_range(-0.05..0.05);
            let freq = [1.5, 2.5, 3.5][c % 3] / size;
            patterns.push(Pattern::Grating { angle, freq });
        } else {
            let count = 2 + (c - blob_start) % 2;
            let centers = (0..count)
                .map(|_| {
                    let x = rng.random_range(0.2..0.8) * size;
                    let y = rng.random_range(0.2..0.8) * size;
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (x, y, sign)
                })
                .collect();
            let radius = size * rng.random_range(0.08..0.16);
            patterns.push(Pattern::Blobs { centers, radius });
        }
    }
    patterns
}

fn render(pattern: &Pattern, params: &ToyParams, rng: &mut impl Rng) -> Tensor<f32> {
    let s = params.image_size;
    let mut img = vec![0f32; s * s];
    let contrast = rng.random_range(0.7..1.3);
    match pattern {
        Pattern::Grating { angle, freq } => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let (sin, cos) = angle.sin_cos();
            for y in 0..s {
                for x in 0..s {
                    let t = (x as f64 * cos + y as f64 * sin) * freq * 2.0 * PI + phase;
                    img[y * s + x] = (contrast * t.cos()) as f32;
                }
            }
        }
        Pattern::Blobs { centers, radius } => {
            let dx = rng.random_range(-1.0..1.0);
            let dy = rng.random_range(-1.0..1.0);
            for &(cx, cy, sign) in centers {
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (x as f64 - cx - dx).powi(2) + (y as f64 - cy - dy).powi(2);
                        let v = sign * contrast * 1.5 * (-d2 / (2.0 * radius * radius)).exp();
                        img[y * s + x] += v as f32;
                    }
                }
            }
        }
    }
    for v in &mut img {
        let noise = params.noise * rng.sample::<f64, _>(StandardNormal);
        *v = ((*v as f64 + noise) * params.amplitude) as f32;
    }
    Tensor::from_vec(&[1, s, s], img).expect("image shape")
}

fn generate_toy(params: &ToyParams) -> Result<DatasetPair, SplitError> {
    if params.num_classes < 2 {
        return Err(SplitError::TooFewClasses(params.num_classes));
    }
    if params.image_size < 4 || params.per_class == 0 {
        return Err(SplitError::Param(
            "toy data needs image_size >= 4 and per_class >= 1".into(),
        ));
    }
    let patterns = class_patterns(params);
    let classes: Vec<ClassId> = (0..params.num_classes as ClassId).collect();
    let build = |role: Role, per_class: usize, stream: u64, id_base: u64| {
        let mut rng = stream_rng(params.seed, stream);
        let mut examples = Vec::with_capacity(per_class * patterns.len());
        for i in 0..per_class {
            for (label, pattern) in patterns.iter().enumerate() {
                examples.push(Example {
                    id: id_base + (i * patterns.len() + label) as u64,
                    image: render(pattern, params, &mut rng),
                    label,
                });
            }
        }
        LabeledDataset {
            id: params.dataset_id(),
            role,
            classes: classes.clone(),
            examples,
        }
    };
    Ok(DatasetPair {
        train: build(Role::Train, params.per_class, 1, 0),
        validation: build(Role::Validation, params.val_per_class, 2, 1 << 40),
    })
}
