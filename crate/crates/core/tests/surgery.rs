use proptest::prelude::*;
use transferlab::nncore::{ForwardMode, Model, ModelSpec, Tensor, RANDOM_ORIGIN};
use transferlab::surgery::*;

const SPEC: &str = "input 1x8x8 | conv 4 3 1 1 | relu | maxpool 2 2 | lrn | conv 6 3 1 1 | relu | fc 12 | relu | fc 5 | softmax";

fn spec() -> ModelSpec {
    SPEC.parse().unwrap()
}

fn base(seed: u64) -> Checkpoint {
    let mut model = init_random(&spec(), seed);
    for l in model.layers_mut() {
        l.origin = "toy:A".into();
    }
    Checkpoint::from_model(
        &model,
        Provenance {
            dataset_id: "toy:A".into(),
            seed,
            iterations: 123,
        },
    )
}

fn crc_of(layers: &[transferlab::nncore::LayerState<f32>]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for l in layers {
        for v in l.weights.data().iter().chain(l.bias.data()) {
            h.update(&v.to_le_bytes());
        }
    }
    h.finalize()
}

fn same_bits(a: &Model<f32>, b: &Model<f32>) -> bool {
    a.layers().iter().zip(b.layers()).all(|(x, y)| {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        bits(&x.weights) == bits(&y.weights) && bits(&x.bias) == bits(&y.bias)
    })
}

#[test]
fn init_statistics_large_layer() {
    let spec: ModelSpec = "input 1x1x1 | fc 100000 | softmax".parse().unwrap();
    let model = init_random(&spec, 5);
    let w = model.layers()[0].weights.data();
    let n = w.len() as f64;
    let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = 0.01;
    assert!(mean.abs() < 3.0 * std / n.sqrt(), "{mean}");
    // sample std has standard error std / sqrt(2(n-1))
    assert!((var.sqrt() - std).abs() < 3.0 * std / (2.0 * (n - 1.0)).sqrt(), "{}", var.sqrt());
    assert!(model.layers()[0].bias.data().iter().all(|&b| b == 0.0));
    assert!(model.layers().iter().all(|l| !l.frozen && l.origin == RANDOM_ORIGIN));
}

#[test]
fn seeds_matter() {
    assert!(same_bits(&init_random(&spec(), 1), &init_random(&spec(), 1)));
    assert!(!same_bits(&init_random(&spec(), 1), &init_random(&spec(), 2)));
}

#[test]
fn copied_region_checksum() {
    let base = base(11);
    let total = spec().num_weight_layers();
    for n in 0..total {
        for mode in [TransplantMode::Frozen, TransplantMode::FineTune] {
            let model = transplant(&base, &spec(), n, mode, 99).unwrap();
            assert_eq!(crc_of(&model.layers()[..n]), crc_of(&base.layers()[..n]));
            for (i, l) in model.layers().iter().enumerate() {
                if i < n {
                    assert_eq!(l.frozen, mode == TransplantMode::Frozen);
                    assert_eq!(l.origin, "toy:A");
                } else {
                    assert!(!l.frozen);
                    assert_eq!(l.origin, RANDOM_ORIGIN);
                    assert_ne!(l.weights.data(), base.layers()[i].weights.data());
                }
            }
        }
    }
    assert!(matches!(
        transplant(&base, &spec(), total, TransplantMode::Frozen, 0),
        Err(SurgeryError::LayerCount { .. })
    ));
}

#[test]
fn freezing_does_not_change_the_forward_pass() {
    let base = base(3);
    let frozen = transplant(&base, &spec(), 2, TransplantMode::Frozen, 4).unwrap();
    let tuned = transplant(&base, &spec(), 2, TransplantMode::FineTune, 4).unwrap();
    let image = Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let a = frozen.forward(&image, ForwardMode::Eval).unwrap();
    let b = tuned.forward(&image, ForwardMode::Eval).unwrap();
    assert_eq!(a.logits().data(), b.logits().data());
}

#[test]
fn random_prefix_keeps_structure() {
    let model = randomize_first_n(&spec(), 1, 8, false).unwrap();
    let frozen: Vec<bool> = model.layers().iter().map(|l| l.frozen).collect();
    assert_eq!(frozen, vec![true, false, false, false]);
    assert_eq!(model.spec(), &spec());
    assert!(randomize_first_n(&spec(), 0, 8, false).is_err());
    assert!(randomize_first_n(&spec(), 4, 8, false).is_err());
    assert!(randomize_first_n(&spec(), 2, 8, true).unwrap().layers().iter().all(|l| !l.frozen));
}

#[test]
fn truncated_files_are_rejected() {
    let bytes = base(1).to_bytes();
    for len in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..len]), Err(CheckpointError::Corrupt(_))),
            "length {len}"
        );
    }
}

#[test]
fn flipped_payload_byte_names_the_layer() {
    let ckpt = base(1);
    let bytes = ckpt.to_bytes();
    // the last layer's bias sits just before its trailing crc
    let mut last = bytes.clone();
    let at = last.len() - 5;
    last[at] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&last), Err(CheckpointError::Checksum { layer: 4 })));
    // first weight of layer 1
    let first = ckpt.layers()[0].weights.data()[0].to_le_bytes();
    let pos = bytes.windows(4).position(|w| w == first).unwrap();
    let mut early = bytes.clone();
    early[pos] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&early), Err(CheckpointError::Checksum { layer: 1 })));
}

#[test]
fn version_and_magic() {
    let mut bytes = base(1).to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(CheckpointError::Version { found, .. }) if found == FORMAT_VERSION + 1
    ));
    let mut bad = base(1).to_bytes();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Corrupt(_))));
}

#[test]
fn file_round_trip_and_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/base.tflb");
    let ckpt = base(2);
    save(&ckpt, &path).unwrap();
    assert_eq!(load(&path).unwrap(), ckpt);
    assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    let other: ModelSpec = SPEC.replace("fc 12", "fc 13").parse().unwrap();
    assert!(matches!(Checkpoint::load_for(&path, &other), Err(CheckpointError::Fingerprint { .. })));
    assert!(Checkpoint::load_for(&path, &spec()).is_ok());
    assert!(matches!(load(&dir.path().join("missing")), Err(CheckpointError::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bytes_round_trip(seed in any::<u64>(), n in 0usize..4, frozen in any::<bool>(), iterations in any::<u64>()) {
        let mode = if frozen { TransplantMode::Frozen } else { TransplantMode::FineTune };
        let model = transplant(&base(seed), &spec(), n, mode, seed ^ 7).unwrap();
        let ckpt = Checkpoint::from_model(&model, Provenance { dataset_id: format!("d{seed}"), seed, iterations });
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(back.content_hash(), ckpt.content_hash());
        prop_assert!(same_bits(&back.to_model(), &model));
        prop_assert_eq!(back, ckpt);
    }
}
