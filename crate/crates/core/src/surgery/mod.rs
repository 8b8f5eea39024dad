//! Network surgery: random initialization, copying the first `n` weight layers
//! of a trained base network, and random-weight baselines.

mod checkpoint;

use thiserror::Error;

pub use checkpoint::{
    fingerprint, load, save, Checkpoint, CheckpointError, Provenance, FORMAT_VERSION, MAGIC,
};

use crate::nncore::{Model, ModelSpec};
use crate::optim::stream_rng;

/// RNG stream for weight initialization.
const INIT_STREAM: u64 = 0;

/// Whether transplanted layers keep learning on the target task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransplantMode {
    Frozen,
    FineTune,
}

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("n = {n} is out of range: {reason}")]
    LayerCount { n: usize, reason: String },
    #[error("base checkpoint architecture ({found:016x}) does not match the target ({expected:016x})")]
    Fingerprint { expected: u64, found: u64 },
}

/// Gaussian weights (`spec.init`), constant biases, all layers trainable and
/// tagged `random`. Deterministic in `(spec, seed)`.
pub fn init_random(spec: &ModelSpec, seed: u64) -> Model<f32> {
    let mut rng = stream_rng(seed, INIT_STREAM);
    Model::init_gaussian(spec.clone(), &mut rng)
}

/// Copies weight layers `1..=n` from `base` (keeping their origin tags) on top
/// of `init_random(spec, seed)`. The classifier layer is never copied, so the
/// base may differ from `spec` in head width only.
pub fn transplant(
    base: &Checkpoint,
    spec: &ModelSpec,
    n: usize,
    mode: TransplantMode,
    seed: u64,
) -> Result<Model<f32>, SurgeryError> {
    let total = spec.num_weight_layers();
    if n >= total {
        return Err(SurgeryError::LayerCount {
            n,
            reason: format!(
                "at most {} of {total} weight layers can be copied; copying all of them leaves nothing to train",
                total - 1
            ),
        });
    }
    let comparable = spec
        .with_num_classes(base.spec().num_classes())
        .map(|s| fingerprint(&s))
        .unwrap_or_else(|_| fingerprint(spec));
    if comparable != base.fingerprint() {
        return Err(SurgeryError::Fingerprint {
            expected: fingerprint(spec),
            found: base.fingerprint(),
        });
    }
    let mut model = init_random(spec, seed);
    let frozen = mode == TransplantMode::Frozen;
    for (dst, src) in model.layers_mut().iter_mut().zip(base.layers()).take(n) {
        *dst = src.clone();
        dst.frozen = frozen;
    }
    Ok(model)
}

/// Random first `n` layers. They are frozen unless `train_random` is set, so
/// they stay untrained; the remaining layers are random and trainable.
pub fn randomize_first_n(
    spec: &ModelSpec,
    n: usize,
    seed: u64,
    train_random: bool,
) -> Result<Model<f32>, SurgeryError> {
    let total = spec.num_weight_layers();
    if n == 0 || n >= total {
        return Err(SurgeryError::LayerCount {
            n,
            reason: format!("random-first-n needs 1 <= n <= {}", total - 1),
        });
    }
    let mut model = init_random(spec, seed);
    for layer in model.layers_mut().iter_mut().take(n) {
        layer.frozen = !train_random;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::RANDOM_ORIGIN;

    fn spec() -> ModelSpec {
        "input 1x8x8 | conv 4 3 1 1 | relu | maxpool 2 2 | lrn | conv 4 3 1 1 | relu | fc 8 | relu | fc 3 | softmax"
            .parse()
            .unwrap()
    }

    fn base() -> Checkpoint {
        let mut model = init_random(&spec(), 77);
        for l in model.layers_mut() {
            l.origin = "A".into();
        }
        Checkpoint::from_model(
            &model,
            Provenance {
                dataset_id: "A".into(),
                seed: 77,
                iterations: 0,
            },
        )
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_random(&spec(), 1), init_random(&spec(), 1));
        assert_ne!(init_random(&spec(), 1), init_random(&spec(), 2));
    }

    #[test]
    fn init_statistics() {
        let big: ModelSpec = "input 1x1x1 | fc 100000 | softmax".parse().unwrap();
        let model = init_random(&big, 3);
        let w = model.layers()[0].weights.data();
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        // standard errors of the sample mean and standard deviation
        assert!(mean.abs() < 3.0 * 0.01 / n.sqrt(), "mean {mean}");
        assert!((std - 0.01).abs() < 3.0 * 0.01 / (2.0 * (n - 1.0)).sqrt(), "std {std}");
        assert!(model.layers()[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn transplant_zero_is_init() {
        let m = transplant(&base(), &spec(), 0, TransplantMode::Frozen, 5).unwrap();
        assert_eq!(m, init_random(&spec(), 5));
    }

    #[test]
    fn transplant_copies_and_freezes() {
        let b = base();
        let m = transplant(&b, &spec(), 3, TransplantMode::Frozen, 5).unwrap();
        for i in 0..3 {
            assert_eq!(m.layers()[i].weights, b.layers()[i].weights);
            assert_eq!(m.layers()[i].bias, b.layers()[i].bias);
            assert!(m.layers()[i].frozen);
            assert_eq!(m.layers()[i].origin, "A");
        }
        assert_ne!(m.layers()[3].weights, b.layers()[3].weights);
        assert!(!m.layers()[3].frozen);
        assert_eq!(m.layers()[3].origin, RANDOM_ORIGIN);
    }

    #[test]
    fn transplant_rejects_all_layers_and_foreign_bases() {
        let b = base();
        assert!(matches!(
            transplant(&b, &spec(), 4, TransplantMode::Frozen, 1),
            Err(SurgeryError::LayerCount { n: 4, .. })
        ));
        let other: ModelSpec =
            "input 1x8x8 | conv 5 3 1 1 | relu | maxpool 2 2 | lrn | conv 4 3 1 1 | relu | fc 8 | relu | fc 3 | softmax"
                .parse()
                .unwrap();
        assert!(matches!(
            transplant(&b, &other, 1, TransplantMode::Frozen, 1),
            Err(SurgeryError::Fingerprint { .. })
        ));
    }

    #[test]
    fn transplant_tolerates_different_head_width() {
        let wider = spec().with_num_classes(5).unwrap();
        let m = transplant(&base(), &wider, 3, TransplantMode::FineTune, 1).unwrap();
        assert_eq!(m.spec().num_classes(), 5);
        assert!(m.layers().iter().all(|l| !l.frozen));
    }

    #[test]
    fn randomize_freezes_prefix() {
        let m = randomize_first_n(&spec(), 1, 9, false).unwrap();
        let frozen: Vec<bool> = m.layers().iter().map(|l| l.frozen).collect();
        assert_eq!(frozen, vec![true, false, false, false]);
        assert!(m.layers().iter().all(|l| l.origin == RANDOM_ORIGIN));
        assert_eq!(m.spec(), &spec());
        assert!(randomize_first_n(&spec(), 0, 9, false).is_err());
        assert!(randomize_first_n(&spec(), 4, 9, false).is_err());
        let trainable = randomize_first_n(&spec(), 2, 9, true).unwrap();
        assert!(trainable.layers().iter().all(|l| !l.frozen));
    }
}
