use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use super::{ForwardMode, Gradients, Model, ModelSpec, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("non-finite {which} gradient in weight layer {layer}")]
    NonFinite { layer: usize, which: &'static str },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over all checked parameters of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_relative_error: f64,
    /// Per weight layer maximum; `None` for frozen (unchecked) layers.
    pub per_layer: Vec<Option<f64>>,
    pub checked_params: usize,
}

const EXAMPLES: usize = 2;

/// Compares back-propagated gradients against central finite differences for
/// a freshly initialized `f64` model of `spec`.
pub fn grad_check(spec: &ModelSpec, seed: u64, epsilon: f64) -> Result<GradCheckReport, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::init_gaussian(spec.clone(), &mut rng);
    grad_check_model(&model, seed, epsilon)
}

/// Gradient check of an existing model; frozen layers are skipped. Dropout
/// masks are drawn once and replayed for every finite-difference evaluation.
pub fn grad_check_model(
    model: &Model<f64>,
    seed: u64,
    epsilon: f64,
) -> Result<GradCheckReport, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = model.spec().input_shape();
    let classes = model.spec().num_classes();
    let batch: Vec<(Tensor<f64>, usize)> = (0..EXAMPLES)
        .map(|_| {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            (
                Tensor::from_vec(&shape, data).expect("input shape"),
                rng.random_range(0..classes),
            )
        })
        .collect();

    let mut masks = Vec::with_capacity(EXAMPLES);
    let mut analytic = Gradients::zeros_for(model);
    for (image, label) in &batch {
        let cache = model.forward(image, ForwardMode::Train(&mut rng))?;
        model.backward(&cache, *label, &mut analytic)?;
        masks.push(cache.masks());
    }
    analytic.scale(1.0 / EXAMPLES as f64);

    let loss = |m: &Model<f64>| -> Result<f64, ShapeError> {
        let mut total = 0.0;
        for ((image, label), mask) in batch.iter().zip(&masks) {
            let cache = m.forward(image, ForwardMode::Replay(mask))?;
            let (l, _) = super::layers::softmax_xent(cache.logits(), *label)?;
            total += l;
        }
        Ok(total / EXAMPLES as f64)
    };

    let mut probe = model.clone();
    let mut per_layer = Vec::with_capacity(model.layers().len());
    let mut checked = 0;
    for ordinal in 0..model.layers().len() {
        let Some((gw, gb)) = analytic.layer(ordinal) else {
            per_layer.push(None);
            continue;
        };
        if !gw.is_finite() {
            return Err(GradCheckError::NonFinite { layer: ordinal + 1, which: "weight" });
        }
        if !gb.is_finite() {
            return Err(GradCheckError::NonFinite { layer: ordinal + 1, which: "bias" });
        }
        let mut worst: f64 = 0.0;
        for (is_bias, grad) in [(false, gw), (true, gb)] {
            for (idx, &a) in grad.data().iter().enumerate() {
                let original = *grad_slot(&mut probe, ordinal, is_bias, idx);
                *grad_slot(&mut probe, ordinal, is_bias, idx) = original + epsilon;
                let plus = loss(&probe)?;
                *grad_slot(&mut probe, ordinal, is_bias, idx) = original - epsilon;
                let minus = loss(&probe)?;
                *grad_slot(&mut probe, ordinal, is_bias, idx) = original;
                let numeric = (plus - minus) / (2.0 * epsilon);
                if !numeric.is_finite() {
                    return Err(GradCheckError::NonFinite { layer: ordinal + 1, which: "numeric" });
                }
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max((a - numeric).abs() / denom);
                checked += 1;
            }
        }
        per_layer.push(Some(worst));
    }
    let max_relative_error = per_layer.iter().flatten().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_layer,
        checked_params: checked,
    })
}

fn grad_slot(model: &mut Model<f64>, ordinal: usize, is_bias: bool, idx: usize) -> &mut f64 {
    let layer = &mut model.layers_mut()[ordinal];
    let t = if is_bias { &mut layer.bias } else { &mut layer.weights };
    &mut t.data_mut()[idx]
}
