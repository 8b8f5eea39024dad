use std::path::Path;

use rand::{Rng, SeedableRng};
use transferlab::config::KvConfig;
use transferlab::datasplit::{split_random, toy_dataset, Role, Side};
use transferlab::experiment::*;
use transferlab::nncore::{LayerState, Model, ModelSpec, Tensor};
use transferlab::surgery::{transplant, TransplantMode};

const TINY: &str = "
name = tiny
toy.classes = 6
toy.per_class = 24
toy.val_per_class = 12
toy.image_size = 8
architecture = input 1x8x8 | conv 4 3 1 1 | relu | maxpool 2 2 | conv 6 3 1 1 | relu | fc 16 | relu | fc 10 | softmax
train.iterations = 40
train.batch_size = 8
train.drop_every = 30
repetitions = 2
n = 1-2
";

fn plan(extra: &str) -> GridPlan {
    GridPlan::from_config(&KvConfig::parse(&format!("{TINY}\n{extra}")).unwrap(), Path::new(".")).unwrap()
}

fn constant_model(classes: usize, favourite: usize) -> Model<f32> {
    let spec: ModelSpec = format!("input 1x4x4 | fc {classes} | softmax").parse().unwrap();
    let mut bias = Tensor::zeros(&[classes]);
    bias.data_mut()[favourite] = 1.0;
    Model::new(spec, vec![LayerState::new(Tensor::zeros(&[classes, 16]), bias)]).unwrap()
}

fn balanced(classes: usize, per_class: usize) -> transferlab::datasplit::LabeledDataset {
    let mut d = toy_dataset(classes, per_class, 4, 0).unwrap().validation;
    d.examples.truncate(classes * per_class);
    d
}

#[test]
fn constant_prediction_scores_one_over_c() {
    for classes in [2, 5, 10] {
        let data = balanced(classes, 4);
        let counts = data.class_counts();
        assert!(counts.values().all(|&c| c == counts[&data.classes[0]]));
        let acc = top1_accuracy(&constant_model(classes, 0), &data).unwrap();
        assert!((acc - 1.0 / classes as f64).abs() < 1e-12, "{acc}");
    }
}

#[test]
fn label_logits_score_one() {
    let rows: Vec<(Vec<f32>, usize)> = (0..50)
        .map(|i| {
            let mut l = vec![0.0; 7];
            l[i % 7] = 1.0;
            (l, i % 7)
        })
        .collect();
    assert_eq!(accuracy_from_logits(rows.iter().map(|(l, y)| (l.as_slice(), *y))), 1.0);
}

#[test]
fn random_logits_score_chance() {
    let (classes, n) = (500usize, 10_000usize);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let rows: Vec<(Vec<f32>, usize)> = (0..n)
        .map(|_| ((0..classes).map(|_| rng.random::<f32>()).collect(), rng.random_range(0..classes)))
        .collect();
    let acc = accuracy_from_logits(rows.iter().map(|(l, y)| (l.as_slice(), *y)));
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() < 3.0 * sigma, "{acc}");
}

#[test]
fn evaluation_needs_validation_data() {
    let model = constant_model(3, 1);
    let ckpt = transferlab::surgery::Checkpoint::from_model(
        &model,
        transferlab::surgery::Provenance {
            dataset_id: "x".into(),
            seed: 0,
            iterations: 0,
        },
    );
    let mut data = balanced(3, 2);
    assert!(evaluate(&ckpt, &data).is_ok());
    data.role = Role::Train;
    assert!(matches!(evaluate(&ckpt, &data), Err(ExperimentError::Role(_))));
}

#[test]
fn cell_count_matches_the_cross_product() {
    let arch = "input 1x4x4 | conv 2 3 1 1 | relu | conv 2 3 1 1 | relu | conv 2 3 1 1 | relu | conv 2 3 1 1 | relu | conv 2 3 1 1 | relu | fc 4 | relu | fc 4 | relu | fc 10 | softmax";
    let text = format!(
        "architecture = {arch}\nsplit.seeds = 0,1,2,3\nrepetitions = 1\ndirections = A>B\n\
         treatments = selffer,selffer+,transfer,transfer+\nn = 1-7\n"
    );
    let plan = GridPlan::from_config(&KvConfig::parse(&text).unwrap(), Path::new(".")).unwrap();
    assert_eq!(plan.spec.num_weight_layers(), 8);
    let cells = plan.cells();
    let splits = 4;
    let dependents = splits * 4 * 7;
    let bases = splits * 2;
    assert_eq!(cells.len(), dependents + bases);
    assert_eq!(cells.iter().filter(|c| c.treatment.base_side().is_none()).count(), bases);
}

fn split_data(plan: &GridPlan) -> (ExperimentConfig, SplitData) {
    let (config, mut splits) = plan.prepare().unwrap();
    (config, splits.remove(0))
}

#[test]
fn untrained_selffer_scores_like_its_transplant() {
    let plan = plan("");
    let (config, data) = split_data(&plan);
    let base = run_treatment(&Treatment::Base { side: Side::B }, 0, &data, None, &config).unwrap();
    let mut zero = config.clone();
    zero.train.total_iterations = 0;
    for n in 1..=3 {
        for finetune in [false, true] {
            let t = Treatment::Selffer { side: Side::B, n, finetune };
            let out = run_treatment(&t, 5, &data, Some(&base.checkpoint), &zero).unwrap();
            let spec = config.spec_for(data.train(Side::B).classes.len()).unwrap();
            let mode = if finetune { TransplantMode::FineTune } else { TransplantMode::Frozen };
            let model = transplant(&base.checkpoint, &spec, n, mode, cell_seed(5, &t)).unwrap();
            let expected = top1_accuracy(&model, data.validation(Side::B)).unwrap();
            assert_eq!(out.result.top1_accuracy, expected);
            assert_eq!(out.result.base_ckpt_hash, base.checkpoint.content_hash());
            assert_eq!(out.result.direction, "B>B");
        }
    }
}

#[test]
fn dependencies_are_checked() {
    let plan = plan("");
    let (config, data) = split_data(&plan);
    let t = Treatment::Transfer { target: Side::B, n: 1, finetune: true };
    assert!(matches!(run_treatment(&t, 0, &data, None, &config), Err(ExperimentError::Dependency(_))));
    let wrong = run_treatment(&Treatment::Base { side: Side::B }, 0, &data, None, &config).unwrap();
    assert!(matches!(
        run_treatment(&t, 0, &data, Some(&wrong.checkpoint), &config),
        Err(ExperimentError::Dependency(_))
    ));
    let too_deep = Treatment::Selffer { side: Side::B, n: 4, finetune: false };
    assert!(matches!(
        run_treatment(&too_deep, 0, &data, Some(&wrong.checkpoint), &config),
        Err(ExperimentError::Treatment(_))
    ));
}

#[test]
fn random_prefix_stays_at_initialization() {
    let plan = plan("");
    let (config, data) = split_data(&plan);
    let t = Treatment::RandomFirstN { side: Side::A, n: 2 };
    let out = run_treatment(&t, 1, &data, None, &config).unwrap();
    let spec = config.spec_for(data.train(Side::A).classes.len()).unwrap();
    let init = transferlab::surgery::init_random(&spec, cell_seed(1, &t));
    for (trained, initial) in out.checkpoint.layers().iter().zip(init.layers()).take(2) {
        assert_eq!((&trained.weights, &trained.bias), (&initial.weights, &initial.bias));
        assert!(trained.frozen);
    }
    assert_ne!(out.checkpoint.layers()[2].weights, init.layers()[2].weights);
    assert_eq!(out.result.direction, "R>A");
    assert!(!out.result.finetune);
}

#[test]
fn grid_resumes_and_isolates_failures() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan("reduced.caps = 0, 5\ntreatments = transfer+, selffer, random\ndirections = A>B");
    let cells = plan.cells();
    let options = GridOptions::default();

    let first = run_grid(&plan, dir.path(), &options).unwrap();
    // cap 0 is rejected, once per seed
    assert_eq!(first.failures.len(), 2);
    assert!(first.failures.iter().all(|(slug, _)| slug.contains("reduced_n0")));
    assert_eq!(first.executed, cells.len() - 2);
    assert_eq!(first.skipped, 0);
    let on_disk = read_results(&dir.path().join(RESULTS_FILE)).unwrap();
    assert_eq!(on_disk, first.results);
    for split in ["random-s0"] {
        assert!(dir.path().join("splits").join(format!("{split}.csv")).exists());
    }

    let again = run_grid(&plan, dir.path(), &options).unwrap();
    assert_eq!(again.executed, 0);
    assert_eq!(again.skipped, first.results.len());
    assert_eq!(again.results, first.results);

    // dropping rows re-runs exactly those cells, with identical values
    let kept: Vec<TreatmentResult> = first.results.iter().skip(3).cloned().collect();
    write_results(&dir.path().join(RESULTS_FILE), &kept).unwrap();
    let partial = run_grid(&plan, dir.path(), &options).unwrap();
    assert_eq!(partial.executed, 3);
    assert_eq!(partial.results, first.results);

    // any change to the configuration invalidates every row
    let changed = GridPlan::from_config(
        &KvConfig::parse(&format!("{TINY}\nreduced.caps = 0, 5\ntreatments = transfer+, selffer, random\ndirections = A>B\ntrain.momentum = 0.8")).unwrap(),
        Path::new("."),
    )
    .unwrap();
    let rerun = run_grid(&changed, dir.path(), &options).unwrap();
    assert_eq!(rerun.executed, cells.len() - 2);
}

#[test]
fn parallel_grid_matches_serial() {
    let plan = plan("treatments = transfer, selffer+");
    let serial = tempfile::tempdir().unwrap();
    let parallel = tempfile::tempdir().unwrap();
    let a = run_grid(&plan, serial.path(), &GridOptions::default()).unwrap();
    let b = run_grid(&plan, parallel.path(), &GridOptions { workers: 4, ..Default::default() }).unwrap();
    assert_eq!(a.results, b.results);
    assert_eq!(
        std::fs::read(serial.path().join(RESULTS_FILE)).unwrap(),
        std::fs::read(parallel.path().join(RESULTS_FILE)).unwrap()
    );
}

#[test]
fn cells_reproduce_from_their_records() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan("treatments = transfer+, random\nreduced.caps = 3");
    let summary = run_grid(&plan, dir.path(), &GridOptions::default()).unwrap();
    assert!(summary.failures.is_empty());
    for row in &summary.results {
        let again = reproduce_cell(&plan, dir.path(), row).unwrap();
        assert_eq!(again.top1_accuracy.to_bits(), row.top1_accuracy.to_bits());
        assert_eq!(&again, row);
    }
    let mut forged = summary.results.last().unwrap().clone();
    forged.config_hash = "0000".into();
    assert!(matches!(reproduce_cell(&plan, dir.path(), &forged), Err(GridError::Provenance(_))));
    let mut stray = forged.clone();
    stray.seed = 99;
    assert!(matches!(reproduce_cell(&plan, dir.path(), &stray), Err(GridError::UnknownCell(_))));
}

#[test]
fn tampered_base_checkpoint_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan("treatments = transfer\nrepetitions = 1\nn = 1");
    let summary = run_grid(&plan, dir.path(), &GridOptions::default()).unwrap();
    let row = summary.results.iter().find(|r| r.treatment == TreatmentKind::Transfer).unwrap().clone();
    let ckpts = dir.path().join("checkpoints/random-s0");
    std::fs::copy(ckpts.join("base-B-s0.tflb"), ckpts.join("base-A-s0.tflb")).unwrap();
    assert!(matches!(reproduce_cell(&plan, dir.path(), &row), Err(GridError::Provenance(_))));
}

#[test]
fn split_ids_follow_seeds() {
    let p = plan("split.seeds = 3, 9");
    let (_, splits) = p.prepare().unwrap();
    let ids: Vec<&str> = splits.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["random-s3", "random-s9"]);
    let direct = split_random(&splits[1].split.assignment.keys().copied().collect::<Vec<_>>(), 9).unwrap();
    assert_eq!(direct.assignment, splits[1].split.assignment);
}

#[test]
fn zero_layer_transfer_is_rejected() {
    let t = Treatment::Transfer { target: Side::B, n: 0, finetune: false };
    assert!(matches!(t.validate(5), Err(ExperimentError::Treatment(_))));
    assert!(Treatment::Base { side: Side::B }.validate(5).is_ok());
}

/// Sample variance, floored at the binomial variance of one accuracy measured
/// on `trials` examples.
fn noise_variance(values: &[f64], trials: usize) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sample = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    sample.max(mean * (1.0 - mean) / trials as f64)
}

#[test]
fn first_layer_transfers_within_noise() {
    let plan = GridPlan::from_config(
        &KvConfig::parse("toy.per_class = 200\ntrain.iterations = 1500\ntrain.drop_every = 1000\nrepetitions = 4").unwrap(),
        Path::new("."),
    )
    .unwrap();
    let (config, data) = split_data(&plan);
    let mut base_acc = Vec::new();
    let mut transfer_acc = Vec::new();
    for &seed in &plan.seeds {
        let base_a = run_treatment(&Treatment::Base { side: Side::A }, seed, &data, None, &config).unwrap();
        let base_b = run_treatment(&Treatment::Base { side: Side::B }, seed, &data, None, &config).unwrap();
        let t = Treatment::Transfer { target: Side::B, n: 1, finetune: false };
        let out = run_treatment(&t, seed, &data, Some(&base_a.checkpoint), &config).unwrap();
        base_acc.push(base_b.result.top1_accuracy);
        transfer_acc.push(out.result.top1_accuracy);
    }
    let trials = data.validation(Side::B).examples.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = ((noise_variance(&base_acc, trials) + noise_variance(&transfer_acc, trials)) / 4.0).sqrt();
    let gap = mean(&transfer_acc) - mean(&base_acc);
    assert!(gap.abs() < 3.0 * se, "base {base_acc:?} transfer {transfer_acc:?}");
}

#[test]
fn shipped_plans_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../plans");
    let load = |name: &str| GridPlan::load(&dir.join(name), &[]).unwrap();
    let desk = load("desk.plan");
    assert_eq!(desk.cells().len(), 8 + 128 + 32);
    assert_eq!(desk.spec.num_weight_layers(), 5);
    let semantic = load("semantic.plan");
    let (_, splits) = semantic.prepare().unwrap();
    assert_eq!(splits[0].split.sizes(), (10, 10));
    // gratings on one side, blobs on the other
    assert!(splits[0].split.classes(Side::A).iter().all(|&c| c < 10));
    let reduced = load("reduced.plan");
    assert_eq!(reduced.cells().len(), 2 * (1 + 6));
    assert!(reduced.cells().iter().all(|c| c.treatment.base_side().is_none()));
}
