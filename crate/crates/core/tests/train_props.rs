mod common;

use proptest::prelude::*;

use dtvit_core::checkpoint::{load_checkpoint, save_checkpoint};
use dtvit_core::datapipe::eval_transform;
use dtvit_core::optim::{AdamW, AdamWConfig};
use dtvit_core::train::{evaluate, train, TrainConfig};
use dtvit_core::{Dtvit, DtvitConfig, ParamStore, Presence, Tensor};

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        batch_size_unaugmented: 8,
        seed,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn equal_weights_stay_equal(
        w in -5.0f64..5.0,
        lr in 1e-5f64..0.1,
        grads in prop::collection::vec(-10.0f64..10.0, 1..60),
    ) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![w, w]).unwrap()).unwrap();
        let cfg = AdamWConfig { lr, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &p).unwrap();
        for g in grads {
            opt.step(&mut p, &[Tensor::new(&[2], vec![g, g]).unwrap()]).unwrap();
            let d = p.get("w").unwrap().data();
            prop_assert_eq!(d[0].to_bits(), d[1].to_bits());
        }
    }
}

#[test]
fn repeat_runs_are_bitwise_identical() {
    let (_, _, augment) = common::tiny_pipeline();
    let data = common::phantom_samples(6, 1);
    let (train_set, val_set) = data.split_at(16);
    let run = || {
        let model = Dtvit::init(DtvitConfig::tiny(), 9).unwrap();
        train(model, train_set, val_set, &quick(3, 2), &augment, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |o: &dtvit_core::train::TrainOutcome| -> Vec<u64> {
        o.history
            .iter()
            .flat_map(|r| [r.train_loss, r.val_loss.unwrap(), r.train_presence_acc, r.val_location_acc.unwrap()])
            .map(f64::to_bits)
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.last.params(), b.last.params());
    assert!(a.steps > 0);
}

#[test]
fn checkpoint_round_trip_preserves_outputs_bitwise() {
    let (_, _, augment) = common::tiny_pipeline();
    let data = common::phantom_samples(2, 4);
    let model = Dtvit::init(DtvitConfig::tiny(), 5).unwrap();
    let outcome = train(model, &data, &[], &quick(1, 1), &augment, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.dtv");
    save_checkpoint(&path, &outcome.last, Some(&outcome.optimizer), Some(1)).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let probe: Vec<_> = data.iter().map(|s| eval_transform(&s.image, &augment).unwrap()).collect();
    let refs: Vec<_> = probe.iter().collect();
    let (a1, a2) = outcome.last.logits(&refs).unwrap();
    let (b1, b2) = back.model.logits(&refs).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&b1));
    assert_eq!(bits(&a2), bits(&b2));
    assert_eq!(back.optimizer.unwrap(), outcome.optimizer);
    assert_eq!(back.rng_state, Some(1));
}

#[test]
fn zero_learning_rate_reproduces_the_initial_evaluation() {
    let (_, _, augment) = common::tiny_pipeline();
    let data = common::phantom_samples(4, 2);
    let (train_set, val_set) = data.split_at(8);
    let model = Dtvit::init(DtvitConfig::tiny(), 2).unwrap();
    let before = evaluate(&model, val_set, &augment, 32).unwrap();
    let mut cfg = quick(2, 3);
    cfg.optimizer.lr = 0.0;
    let out = train(model, train_set, val_set, &cfg, &augment, |_| {}).unwrap();
    let last = out.history.last().unwrap();
    assert_eq!(last.val_loss, Some(before.combined_loss));
    assert_eq!(last.val_presence_acc, Some(before.presence_accuracy()));
    assert_eq!(last.val_location_acc, Some(before.location_accuracy()));
}

#[test]
fn untrained_presence_accuracy_is_near_chance() {
    let (_, _, augment) = common::tiny_pipeline();
    let data = common::phantom_samples(30, 3);
    let normals = data.iter().filter(|s| s.presence == Presence::Normal);
    let ich = data.iter().filter(|s| s.presence == Presence::Ich).take(30);
    let balanced: Vec<_> = normals.chain(ich).cloned().collect();
    assert_eq!(balanced.len(), 60);
    let accs: Vec<f64> = (0..10)
        .map(|seed| {
            let model = Dtvit::init(DtvitConfig::tiny(), seed).unwrap();
            evaluate(&model, &balanced, &augment, 32).unwrap().presence_accuracy()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean untrained accuracy {mean} ({accs:?})");
}
