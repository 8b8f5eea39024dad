//! SGD with momentum and weight decay, step learning-rate schedules, and the
//! minibatch training loop.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datasplit::LabeledDataset;
use crate::experiment::top1_accuracy;
use crate::nncore::{Gradients, Model, ShapeError, Tensor};
use crate::surgery::{Checkpoint, Provenance};

/// Piecewise-constant step decay: `base_rate / drop_factor^floor(i / drop_every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub drop_factor: f64,
    pub drop_every: u64,
}

impl LrSchedule {
    pub fn new(base_rate: f64, drop_factor: f64, drop_every: u64) -> Result<Self, OptimError> {
        if !(base_rate > 0.0) || !(drop_factor > 1.0) || drop_every == 0 {
            return Err(OptimError::Config(format!(
                "schedule needs base_rate > 0, drop_factor > 1, drop_every >= 1 \
                 (got {base_rate}, {drop_factor}, {drop_every})"
            )));
        }
        Ok(LrSchedule {
            base_rate,
            drop_factor,
            drop_every,
        })
    }

    /// 0.01, divided by 10 every 100k iterations.
    pub fn full_scale() -> Self {
        LrSchedule {
            base_rate: 0.01,
            drop_factor: 10.0,
            drop_every: 100_000,
        }
    }

    /// Reduced-dataset schedule: 0.0125, divided by 10 every 64k iterations.
    pub fn fast() -> Self {
        LrSchedule {
            base_rate: 0.0125,
            drop_factor: 10.0,
            drop_every: 64_000,
        }
    }

    pub fn desk() -> Self {
        LrSchedule {
            base_rate: 0.01,
            drop_factor: 10.0,
            drop_every: 2_000,
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let drops = (iteration / self.drop_every) as i32;
        self.base_rate / self.drop_factor.powi(drops)
    }
}

pub fn lr_at(schedule: &LrSchedule, iteration: u64) -> f64 {
    schedule.lr_at(iteration)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub total_iterations: u64,
    pub seed: u64,
    /// Validation cadence; `None` means `max(1, total / 20)`.
    pub val_every: Option<u64>,
}

impl Default for TrainConfig {
    /// Full-scale settings: batch 256, momentum 0.9, decay 0.0005, 450k iterations.
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 0.0005,
            schedule: LrSchedule::full_scale(),
            total_iterations: 450_000,
            seed: 0,
            val_every: None,
        }
    }
}

impl TrainConfig {
    /// Reduced-dataset profile: the fast schedule, stopping after 200k iterations.
    pub fn fast() -> Self {
        TrainConfig {
            schedule: LrSchedule::fast(),
            total_iterations: 200_000,
            ..TrainConfig::default()
        }
    }

    /// CPU-sized profile: batch 32, 3000 iterations, LR drop at 2000.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            schedule: LrSchedule::desk(),
            total_iterations: 3_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        LrSchedule::new(
            self.schedule.base_rate,
            self.schedule.drop_factor,
            self.schedule.drop_every,
        )?;
        if self.batch_size == 0 {
            return Err(OptimError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimError::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(OptimError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn val_interval(&self) -> u64 {
        self.val_every
            .unwrap_or_else(|| (self.total_iterations / 20).max(1))
            .max(1)
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("gradient for weight layer {layer} does not match its parameters: {reason}")]
    GradShape { layer: usize, reason: String },
}

/// Momentum buffers, present only for trainable layers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    velocity: Vec<Option<(Tensor<f32>, Tensor<f32>)>>,
}

impl OptimState {
    pub fn new(model: &Model<f32>) -> Self {
        OptimState {
            velocity: model
                .layers()
                .iter()
                .map(|l| {
                    (!l.frozen).then(|| {
                        (
                            Tensor::zeros(l.weights.shape()),
                            Tensor::zeros(l.bias.shape()),
                        )
                    })
                })
                .collect(),
        }
    }

    pub fn velocity(&self, layer: usize) -> Option<&(Tensor<f32>, Tensor<f32>)> {
        self.velocity.get(layer).and_then(Option::as_ref)
    }
}

/// One momentum step: `v <- m v - lr (g + decay w)`, `w <- w + v`. Biases take
/// no weight decay; frozen layers are skipped entirely.
pub fn sgd_step(
    model: &mut Model<f32>,
    grads: &Gradients<f32>,
    state: &mut OptimState,
    config: &TrainConfig,
    iteration: u64,
) -> Result<(), OptimError> {
    let lr = config.schedule.lr_at(iteration) as f32;
    let momentum = config.momentum as f32;
    let decay = config.weight_decay as f32;
    if grads.len() != model.layers().len() || state.velocity.len() != model.layers().len() {
        return Err(OptimError::GradShape {
            layer: 0,
            reason: "layer count differs from model".into(),
        });
    }
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        if layer.frozen {
            continue;
        }
        let mismatch = |reason: &str| OptimError::GradShape {
            layer: i + 1,
            reason: reason.to_string(),
        };
        let (gw, gb) = grads.layer(i).ok_or_else(|| mismatch("missing gradient"))?;
        let (vw, vb) = state.velocity[i]
            .as_mut()
            .ok_or_else(|| mismatch("missing velocity"))?;
        if gw.shape() != layer.weights.shape() || gb.shape() != layer.bias.shape() {
            return Err(mismatch(&format!(
                "gradient shapes {:?}/{:?} vs parameters {:?}/{:?}",
                gw.shape(),
                gb.shape(),
                layer.weights.shape(),
                layer.bias.shape()
            )));
        }
        update(layer.weights.data_mut(), vw.data_mut(), gw.data(), lr, momentum, decay);
        update(layer.bias.data_mut(), vb.data_mut(), gb.data(), lr, momentum, 0.0);
    }
    Ok(())
}

#[inline]
fn update(w: &mut [f32], v: &mut [f32], g: &[f32], lr: f32, momentum: f32, decay: f32) {
    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v - lr * (g + decay * *w);
        *w += *v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub iteration: u64,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Per-iteration training loss with periodic validation accuracy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTrace {
    pub points: Vec<TracePoint>,
}

impl MetricTrace {
    /// CSV with header `iteration,loss,val_accuracy`; the accuracy cell is empty
    /// when it was not measured.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val_accuracy\n");
        for p in &self.points {
            let acc = p.val_accuracy.map(crate::analysis::sig6).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", p.iteration, crate::analysis::sig6(p.loss), acc);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        crate::io_util::write_atomic(path, self.to_csv().as_bytes())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] OptimError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("dataset has {found} classes but the model head has {expected}")]
    ClassCount { expected: usize, found: usize },
    #[error("dataset `{0}` has no examples")]
    EmptyDataset(String),
    #[error("non-finite loss at iteration {iteration}; weight norms per layer: {layer_norms:?}")]
    NonFinite {
        iteration: u64,
        layer_norms: Vec<f64>,
    },
}

/// RNG stream for minibatch shuffling.
const SHUFFLE_STREAM: u64 = 1;
/// RNG stream for dropout masks.
const DROPOUT_STREAM: u64 = 2;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Minibatch SGD for `config.total_iterations` steps over `dataset`, with
/// epoch-wise reshuffling. Returns the final checkpoint and the trace.
pub fn train(
    mut model: Model<f32>,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    validation: Option<&LabeledDataset>,
) -> Result<(Checkpoint, MetricTrace), TrainError> {
    config.validate()?;
    if dataset.examples.is_empty() {
        return Err(TrainError::EmptyDataset(dataset.id.clone()));
    }
    let classes = model.spec().num_classes();
    if dataset.classes.len() != classes {
        return Err(TrainError::ClassCount {
            expected: classes,
            found: dataset.classes.len(),
        });
    }
    if let Some(first) = dataset.examples.first() {
        let expected = model.spec().input_shape();
        if first.image.shape() != expected {
            return Err(ShapeError::Mismatch {
                what: "dataset image",
                expected: format!("{expected:?}"),
                found: first.image.shape().to_vec(),
            }
            .into());
        }
    }

    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream_rng(config.seed, DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..dataset.examples.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0;

    let mut state = OptimState::new(&model);
    let mut trace = MetricTrace::default();
    let val_every = config.val_interval();
    let mut batch = Vec::with_capacity(config.batch_size);
    for iteration in 0..config.total_iterations {
        batch.clear();
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (loss, grads) = model.batch_gradients(
            batch.iter().map(|&i| {
                let ex = &dataset.examples[i];
                (&ex.image, ex.label)
            }),
            &mut dropout_rng,
        )?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::NonFinite {
                iteration,
                layer_norms: model.layer_norms(),
            });
        }
        sgd_step(&mut model, &grads, &mut state, config, iteration)?;
        let done = iteration + 1;
        let val_accuracy = match validation {
            Some(v) if done % val_every == 0 || done == config.total_iterations => {
                Some(top1_accuracy(&model, v)?)
            }
            _ => None,
        };
        trace.points.push(TracePoint {
            iteration: done,
            loss: loss as f64,
            val_accuracy,
        });
    }
    let provenance = Provenance {
        dataset_id: dataset.id.clone(),
        seed: config.seed,
        iterations: config.total_iterations,
    };
    Ok((Checkpoint::from_model(&model, provenance), trace))
}
