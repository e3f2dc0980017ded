use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use facepipe::dataset::{stratified_kfold, EmotionLabel, Manifest, SampleRecord};
use facepipe::metrics::{build_report, confusion};
use facepipe::pipeline::Condition;
use facepipe::trainer::{
    class_weights, forward, predict, run_cv, train_full, train_two_stage, ClassWeighting, Example,
    FeatureVector, MemoryImageSource, ModelParams, TrainConfig,
};
use facepipe::ImageBuffer;

fn params_strategy() -> impl Strategy<Value = (ModelParams, Vec<f64>)> {
    (
        1usize..10,
        proptest::collection::vec(1usize..8, 0..3),
        2usize..9,
        any::<u64>(),
    )
        .prop_flat_map(|(input, hidden, classes, seed)| {
            proptest::collection::vec(0.0..=1.0f64, input)
                .prop_map(move |x| (ModelParams::init(input, &hidden, classes, seed), x))
        })
}

proptest! {
    #[test]
    fn softmax_sums_to_one((params, x) in params_strategy()) {
        let probs = forward(&params, &FeatureVector::new(x.clone()).unwrap()).unwrap();
        prop_assert_eq!(probs.len(), params.num_classes());
        prop_assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let best = predict(&params, &FeatureVector::new(x).unwrap()).unwrap();
        prop_assert!(probs.iter().all(|&p| p <= probs[best]));
    }

    #[test]
    fn model_file_round_trips((params, _) in params_strategy()) {
        let mut bytes = Vec::new();
        params.write_to(&mut bytes).unwrap();
        prop_assert_eq!(&bytes[..4], b"FPMD");
        prop_assert_eq!(ModelParams::read_from(bytes.as_slice()).unwrap(), params);
    }
}

#[test]
fn wrong_dimension_and_bad_features_are_rejected() {
    let params = ModelParams::init(4, &[3], 2, 0);
    assert!(forward(&params, &FeatureVector::new(vec![0.5; 3]).unwrap()).is_err());
    assert!(FeatureVector::new(vec![1.5]).is_err());
    assert!(ModelParams::read_from(&b"NOPE\0\0\0\0"[..]).is_err());
}

fn blob_data(n: usize, dim: usize, minority_every: usize, seed: u64) -> Vec<Example> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = usize::from(i % minority_every == 0);
            let center = if class == 1 { 0.6 } else { 0.4 };
            let f = (0..dim)
                .map(|_| (center + rng.random_range(-0.25..0.25f64)).clamp(0.0, 1.0))
                .collect();
            Example {
                features: FeatureVector::new(f).unwrap(),
                class,
            }
        })
        .collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        stage_a_epochs: 3,
        stage_b_epochs: 10,
        learning_rate: 0.05,
        input_edge: 2,
        hidden_widths: vec![8],
        val_fraction: 0.0,
        ..TrainConfig::default()
    }
}

fn minority_sensitivity(params: &ModelParams, data: &[Example]) -> f64 {
    let minority: Vec<&Example> = data.iter().filter(|e| e.class == 1).collect();
    let hits = minority
        .iter()
        .filter(|e| predict(params, &e.features).unwrap() == 1)
        .count();
    hits as f64 / minority.len() as f64
}

#[test]
fn inverse_frequency_weighting_helps_the_minority() {
    let train = blob_data(400, 6, 10, 1);
    let test = blob_data(400, 6, 10, 2);
    let init = ModelParams::init(6, &[8], 2, 3);
    let run = |w| {
        let cfg = TrainConfig {
            class_weighting: w,
            ..small_cfg()
        };
        train_two_stage(&init, &train, &[], &cfg).unwrap().0
    };
    let plain = minority_sensitivity(&run(ClassWeighting::None), &test);
    let weighted = minority_sensitivity(&run(ClassWeighting::InverseFrequency), &test);
    assert!(
        weighted > plain,
        "weighted {weighted} vs unweighted {plain}"
    );
}

#[test]
fn inverse_frequency_weights_formula() {
    let data = blob_data(100, 2, 10, 4);
    let w = class_weights(&data, 3, ClassWeighting::InverseFrequency);
    // 90 majority, 10 minority, third class absent.
    assert!((w[0] - 100.0 / (3.0 * 90.0)).abs() < 1e-12);
    assert!((w[1] - 100.0 / (3.0 * 10.0)).abs() < 1e-12);
    assert_eq!(w[2], 0.0);
    assert_eq!(class_weights(&data, 3, ClassWeighting::None), vec![1.0; 3]);
}

#[test]
fn separable_two_class_problem_is_learned() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let data: Vec<Example> = (0..300)
        .map(|i| {
            let class = i % 2;
            let mut f: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..0.2)).collect();
            f[class] = 0.9;
            Example {
                features: FeatureVector::new(f).unwrap(),
                class,
            }
        })
        .collect();
    let init = ModelParams::init(8, &[8], 2, 6);
    let (params, _) = train_two_stage(&init, &data, &[], &small_cfg()).unwrap();
    let correct = data
        .iter()
        .filter(|e| predict(&params, &e.features).unwrap() == e.class)
        .count();
    assert!(correct as f64 / data.len() as f64 >= 0.99, "{correct}/300");
}

#[test]
fn training_is_deterministic() {
    let data = blob_data(120, 5, 3, 7);
    let (train, val) = data.split_at(100);
    let init = ModelParams::init(5, &[6, 4], 2, 8);
    let cfg = TrainConfig {
        val_fraction: 0.1,
        ..small_cfg()
    };
    let a = train_two_stage(&init, train, val, &cfg).unwrap();
    let b = train_two_stage(&init, train, val, &cfg).unwrap();
    assert_eq!(a, b);
    let history = &a.1;
    assert!(history.epochs.iter().all(|e| e.val_loss.is_some()));
    assert!(history
        .to_csv()
        .starts_with("stage,epoch,train_loss,val_loss,val_accuracy\n"));
}

#[test]
fn early_stopping_respects_patience() {
    let data = blob_data(80, 4, 2, 9);
    let (train, val) = data.split_at(60);
    let init = ModelParams::init(4, &[4], 2, 1);
    let cfg = TrainConfig {
        stage_a_epochs: 2,
        stage_b_epochs: 200,
        early_stop_patience: 3,
        learning_rate: 0.5,
        ..small_cfg()
    };
    let (_, history) = train_two_stage(&init, train, val, &cfg).unwrap();
    assert!(
        history.epochs.len() < 202,
        "stage B ran all {} epochs",
        history.epochs.len()
    );
}

fn toy_corpus(n: usize) -> (Manifest, MemoryImageSource) {
    let mut images = BTreeMap::new();
    let mut records = Vec::new();
    for i in 0..n {
        let label = [
            EmotionLabel::Fear,
            EmotionLabel::Anger,
            EmotionLabel::Neutral,
        ][i % 3];
        let v = [40u8, 128, 220][i % 3];
        let id = format!("t{i:03}");
        images.insert(
            id.clone(),
            ImageBuffer::from_fn(4, 4, |c, r| [v, (c * 10) as u8, (r * 10) as u8]),
        );
        records.push(SampleRecord {
            image_path: format!("{id}.png"),
            id,
            raw_labels: vec![label],
            landmarks: None,
            bbox: None,
        });
    }
    (
        Manifest::from_records(records).unwrap(),
        MemoryImageSource { images },
    )
}

#[test]
fn cross_validation_predicts_every_sample_once() {
    let (m, source) = toy_corpus(30);
    let plan = stratified_kfold(&m, 3, 1).unwrap();
    let cfg = TrainConfig {
        input_edge: 4,
        batch_size: 4,
        stage_b_epochs: 60,
        learning_rate: 0.2,
        ..small_cfg()
    };
    let out = run_cv(&m, &plan, &cfg, Condition::Full, &source).unwrap();
    assert_eq!(out.pairs.len(), 30);
    assert_eq!(out.ids.len(), 30);
    assert_eq!(out.histories.len(), 3);
    for (r, (_, truth)) in m.records().iter().zip(&out.pairs) {
        assert_eq!(r.label(), Some(*truth));
    }
    let report = build_report(&confusion(&out.pairs, &out.classes).unwrap()).unwrap();
    assert!(report.accuracy > 0.9, "accuracy {}", report.accuracy);
    assert_eq!(
        run_cv(&m, &plan, &cfg, Condition::Full, &source).unwrap(),
        out
    );
}

#[test]
fn two_sample_cross_validation_runs() {
    let (m, source) = toy_corpus(4);
    let plan = stratified_kfold(&m, 2, 0).unwrap();
    let cfg = TrainConfig {
        input_edge: 4,
        ..small_cfg()
    };
    let out = run_cv(&m, &plan, &cfg, Condition::Top, &source).unwrap();
    assert_eq!(out.pairs.len(), 4);
}

#[test]
fn missing_image_fails_before_training() {
    let (m, mut source) = toy_corpus(9);
    source.images.remove("t004");
    let plan = stratified_kfold(&m, 3, 0).unwrap();
    let cfg = TrainConfig {
        input_edge: 4,
        ..small_cfg()
    };
    let err = run_cv(&m, &plan, &cfg, Condition::Full, &source).unwrap_err();
    assert!(err.to_string().contains("t004"));
    assert!(train_full(&m, &cfg, Condition::Full, &source).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let (m, source) = toy_corpus(6);
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..small_cfg()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..small_cfg()
        },
        TrainConfig {
            sam_rho: -1.0,
            ..small_cfg()
        },
        TrainConfig {
            val_fraction: 1.0,
            ..small_cfg()
        },
    ] {
        assert!(cfg.validate().is_err());
        assert!(train_full(&m, &cfg, Condition::Full, &source).is_err());
    }
}
