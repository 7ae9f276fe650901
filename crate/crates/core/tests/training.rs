use pic::config::{DataConfig, OptimizerConfig, RunConfig, Variant};
use pic::metrics::accuracy;
use pic::network::{build_cascade, Labels};
use pic::ops::NormMode;
use pic::optim::{self, OptState};
use pic::synthdata::{labels_for, stack, Dataset};
use pic::train::train;

fn toy() -> RunConfig {
    RunConfig {
        variant: Variant::Pic,
        depth: 2,
        window: 3,
        keys: 8,
        values: 8,
        channels: 16,
        epochs: 20,
        batch_size: 8,
        data: DataConfig {
            num_classes: 2,
            segments_per_class: 2,
            actions_per_segment: 2,
            vocabulary: 8,
            timesteps: 16,
            noise_sigma: 0.3,
            train_samples: 32,
            test_samples: 8,
            ..DataConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn loss_decreases_over_small_steps() {
    let mut cfg = toy();
    cfg.optimizer = OptimizerConfig {
        lr: 1e-3,
        ..OptimizerConfig::sgd()
    };
    let data = Dataset::generate(&cfg.data, cfg.channels).unwrap();
    let x = stack(&data.train).unwrap();
    let y = labels_for(&data.train, cfg.task, &data.taxonomy).unwrap();
    for v in Variant::ALL {
        cfg.variant = v;
        let mut m = build_cascade(&cfg).unwrap();
        let mut opt = OptState::new(&cfg.optimizer, &m.params());
        let mut losses = Vec::new();
        for _ in 0..5 {
            let step = m.loss_and_grads(&x, &y).unwrap();
            losses.push(step.loss);
            optim::step(&mut m.params_mut(), &step.grads, &mut opt).unwrap();
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{v}: {losses:?}");
    }
}

#[test]
fn toy_problem_is_fit_exactly() {
    let cfg = toy();
    let data = Dataset::generate(&cfg.data, cfg.channels).unwrap();
    let out = train(build_cascade(&cfg).unwrap(), &data.train, &data.test, &data.taxonomy, &cfg).unwrap();
    let x = stack(&data.train).unwrap();
    let Labels::Single(y) = labels_for(&data.train, cfg.task, &data.taxonomy).unwrap() else {
        panic!("single-label task");
    };
    let logits = out.model.forward(&x, NormMode::Eval).unwrap();
    assert_eq!(accuracy(&logits, &y).unwrap(), 1.0);
    assert_eq!(out.history.records.len(), 20);
}

#[test]
fn multi_label_training_runs() {
    let mut cfg = toy();
    cfg.task = pic::Task::MultiLabel;
    cfg.epochs = 3;
    let data = Dataset::generate(&cfg.data, cfg.channels).unwrap();
    let out = train(build_cascade(&cfg).unwrap(), &data.train, &data.test, &data.taxonomy, &cfg).unwrap();
    let last = out.history.records.last().unwrap();
    let map = last.eval_metric.unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(out.model.num_classes(), 8);
}
