use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::corpus::NormStats;
use crate::model::{ForecasterKind, ModelConfig};

fn tiny_config(kind: ForecasterKind) -> ModelConfig {
    ModelConfig {
        channels: 1,
        lookback: 4,
        horizon: 2,
        embed_dim: 4,
        d_model: 4,
        heads: 2,
        hidden: 8,
        forecaster: kind,
        prior_weight: 0.5,
        dropout: 0.0,
        init_std: 0.1,
    }
}

/// Targets continue a noisy sine; the text embedding is irrelevant noise.
fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = rng::keyed(seed, Stream::Synth, &[]);
    (0..n)
        .map(|k| {
            let phase = k as f64 * 0.37;
            let series: Vec<f64> = (0..6).map(|t| (phase + t as f64 * 0.5).sin()).collect();
            Sample {
                x: Tensor::new([4, 1], series[..4].to_vec()).unwrap(),
                e: Tensor::from_fn([4, 4], |_| rng.sample::<f64, _>(StandardNormal)),
                y: Tensor::new([2, 1], series[4..].to_vec()).unwrap(),
                stats: NormStats {
                    mean: vec![10.0],
                    std: vec![2.0],
                },
            }
        })
        .collect()
}

fn quick(cfg: TrainConfig) -> TrainConfig {
    let max_epochs = cfg.max_epochs.min(15);
    TrainConfig {
        max_epochs,
        patience: cfg.patience.min(max_epochs),
        batch_size: 8,
        ..cfg
    }
}

#[test]
fn defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.lr_model, c.lr_per_sup, c.lr_cross_attn), (1e-3, 1e-2, 1e-2));
    assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
    assert_eq!((c.clip_norm, c.max_epochs, c.patience), (5.0, 50, 20));
    c.validate().unwrap();
    let bad = TrainConfig {
        lr_model: -1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TrainConfig {
        patience: 51,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn adam_first_step_is_signed_lr() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), Group::Model);
    let b = store.add("b", Tensor::new([1], vec![5.0]).unwrap(), Group::PerSup);
    store.get_mut(a).grad = Tensor::new([3], vec![0.5, -2.0, 0.0]).unwrap();
    store.get_mut(b).grad = Tensor::new([1], vec![1.0]).unwrap();
    let cfg = TrainConfig {
        lr_model: 0.1,
        lr_per_sup: 0.0,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(&store, &cfg);
    adam.step(&mut store);
    let v = store.value(a).data();
    assert!((v[0] - 0.9).abs() < 1e-7);
    assert!((v[1] - 2.1).abs() < 1e-7);
    assert_eq!(v[2], 3.0);
    assert_eq!(store.value(b).data(), &[5.0]);
}

#[test]
fn clipping_caps_global_norm() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::zeros([2]), Group::Model);
    store.get_mut(a).grad = Tensor::new([2], vec![30.0, 40.0]).unwrap();
    assert_eq!(clip_grad_norm(&mut store, 5.0), 50.0);
    assert!((store.grad_norm() - 5.0).abs() < 1e-12);
    assert_eq!(clip_grad_norm(&mut store, 10.0), store.grad_norm());
    assert!((store.get(a).grad.data()[0] - 3.0).abs() < 1e-12);
}

#[test]
fn early_stopping_counts_strict_improvements() {
    let mut s = EarlyStopping::new(3);
    assert_eq!(s.update(1.0), StopDecision::Improved);
    assert_eq!(s.update(1.0), StopDecision::Continue);
    assert_eq!(s.update(0.5), StopDecision::Improved);
    assert_eq!(s.update(0.6), StopDecision::Continue);
    assert_eq!(s.update(0.7), StopDecision::Continue);
    assert_eq!(s.update(0.5), StopDecision::Stop);
    assert_eq!(s.best_epoch(), Some(2));
    assert_eq!(s.best(), 0.5);
}

#[test]
fn run_epochs_stops_exactly_after_patience() {
    let cfg = TrainConfig::default();
    let losses = |e: usize| if e <= 7 { 1.0 / (e + 1) as f64 } else { 1.0 };
    let mut bests = Vec::new();
    let r = run_epochs(&cfg, |e| Ok((0.0, losses(e), 0.0)), |e| bests.push(e)).unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.best_epoch, 7);
    assert_eq!(r.epochs.len(), 7 + 20 + 1);
    assert_eq!(bests, (0..=7).collect::<Vec<_>>());

    let r = run_epochs(&cfg, |e| Ok((0.0, -(e as f64), 0.0)), |_| {}).unwrap();
    assert!(!r.stopped_early);
    assert_eq!(r.epochs.len(), 50);
    assert_eq!(r.best_epoch, 49);
}

#[test]
fn fit_reduces_validation_loss_and_restores_best() {
    for kind in [ForecasterKind::Gru, ForecasterKind::Mlp] {
        let train = samples(48, 1);
        let val = samples(16, 2);
        let mut m = ParNet::new(tiny_config(kind), 3).unwrap();
        let before = normalized_loss(&m, &val, Variant::Full, 8).unwrap();
        let cfg = quick(TrainConfig {
            lr_model: 1e-2,
            ..TrainConfig::default()
        });
        let r = fit(&mut m, &train, &val, &cfg).unwrap();
        let after = normalized_loss(&m, &val, Variant::Full, 8).unwrap();
        assert!(after < 0.5 * before, "{kind:?}: {before} -> {after}");
        assert!((after - r.best_val_loss).abs() < 1e-12);
        assert_eq!(r.epochs.len(), 15);
    }
}

#[test]
fn fit_is_deterministic() {
    let train = samples(20, 1);
    let val = samples(8, 2);
    let run = |shuffle: bool| {
        let cfg = quick(TrainConfig {
            max_epochs: 3,
            shuffle,
            ..TrainConfig::default()
        });
        let mut m = ParNet::new(
            ModelConfig {
                dropout: 0.1,
                ..tiny_config(ForecasterKind::Gru)
            },
            3,
        )
        .unwrap();
        let r = fit(&mut m, &train, &val, &cfg).unwrap();
        (m.store.snapshot(), r)
    };
    assert_eq!(run(false), run(false));
    assert_eq!(run(true), run(true));
    assert_ne!(run(false).0, run(true).0);
}

#[test]
fn zero_per_sup_rate_freezes_projection() {
    let train = samples(24, 1);
    let val = samples(8, 2);
    let mut m = ParNet::new(tiny_config(ForecasterKind::Mlp), 3).unwrap();
    let before: Vec<_> = m
        .store
        .iter()
        .filter(|p| p.group == Group::PerSup)
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect();
    let cfg = quick(TrainConfig {
        lr_per_sup: 0.0,
        max_epochs: 4,
        ..TrainConfig::default()
    });
    fit(&mut m, &train, &val, &cfg).unwrap();
    let after: Vec<_> = m
        .store
        .iter()
        .filter(|p| p.group == Group::PerSup)
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect();
    assert_eq!(before, after);
    let moved = m
        .store
        .iter()
        .any(|p| p.group == Group::Model && p.value != *ParNet::new(tiny_config(ForecasterKind::Mlp), 3).unwrap().param(&p.name).unwrap());
    assert!(moved);
}

#[test]
fn evaluation_ignores_batch_size() {
    let val = samples(13, 4);
    let m = ParNet::new(tiny_config(ForecasterKind::Gru), 1).unwrap();
    let reference = evaluate(&m, &val, Variant::Full, 1).unwrap();
    for bs in [2, 5, 13, 64] {
        let got = evaluate(&m, &val, Variant::Full, bs).unwrap();
        assert!((got.mse - reference.mse).abs() <= 1e-12 * reference.mse.max(1.0));
        assert!((got.mae - reference.mae).abs() <= 1e-12 * reference.mae.max(1.0));
        assert_eq!(got.count, 26);
    }
}

#[test]
fn metrics_are_on_data_scale() {
    let val = samples(5, 4);
    let m = ParNet::new(tiny_config(ForecasterKind::Gru), 1).unwrap();
    let norm = normalized_loss(&m, &val, Variant::Full, 4).unwrap();
    let metrics = evaluate(&m, &val, Variant::Full, 4).unwrap();
    // std is 2 for every sample
    assert!((metrics.mse - 4.0 * norm).abs() < 1e-9);
}

#[test]
fn non_finite_loss_aborts() {
    let train = samples(8, 1);
    let val = samples(4, 2);
    let mut m = ParNet::new(tiny_config(ForecasterKind::Mlp), 3).unwrap();
    m.param_mut("mlp.l2.bias").unwrap().data_mut()[0] = f64::MAX;
    let err = fit(&mut m, &train, &val, &quick(TrainConfig::default())).unwrap_err();
    assert!(matches!(err, Error::NanLoss { epoch: 0, batch: 0 }), "{err}");
}

#[test]
fn empty_splits_rejected() {
    let mut m = ParNet::new(tiny_config(ForecasterKind::Mlp), 3).unwrap();
    let none: Vec<Sample> = Vec::new();
    assert!(matches!(
        fit(&mut m, &samples(4, 0), &none, &TrainConfig::default()),
        Err(Error::EmptySplit { .. })
    ));
    assert!(evaluate(&m, &none, Variant::Full, 4).is_err());
}

#[test]
fn epoch_log_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let stats = vec![EpochStats {
        epoch: 0,
        train_loss: 0.5,
        val_loss: 0.25,
        grad_norm: 1.5,
        improved: true,
    }];
    write_epoch_log(&path, &stats).unwrap();
    let s = std::fs::read_to_string(&path).unwrap();
    assert_eq!(s, "epoch,train_loss,val_loss,grad_norm,improved\n0,0.5,0.25,1.5,true\n");
}

mod sources {
    use super::*;
    use crate::corpus::{make_windows, Frequency, Step, TextualNumericalSeries};
    use crate::embed::{Embedder, EmbedderConfig};
    use crate::perturb::PerturbationSpec;

    fn series() -> TextualNumericalSeries {
        let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let mut date = start;
        let steps = (0..30)
            .map(|t| {
                let s = Step {
                    date,
                    values: vec![t as f64],
                    text: format!("prices rise slightly in period {t} across the region"),
                };
                date = Frequency::Monthly.next(date);
                s
            })
            .collect();
        TextualNumericalSeries {
            steps,
            frequency: Frequency::Monthly,
            channel_names: vec!["v".into()],
            target: 0,
        }
    }

    #[test]
    fn fixed_vs_resampled() {
        let windows = make_windows(&series(), 8, 4, 6, 1).unwrap();
        let emb = Embedder::new(EmbedderConfig::default()).unwrap();
        let spec = PerturbationSpec::new(0.5, 7);
        let fixed = PerturbedSource::new(&windows, &emb, spec.clone(), 0, false).unwrap();
        assert_eq!(fixed.samples(0).unwrap(), fixed.samples(3).unwrap());
        let fresh = PerturbedSource::new(&windows, &emb, spec, 0, true).unwrap();
        assert_eq!(fresh.samples(0).unwrap(), fixed.samples(0).unwrap());
        assert_ne!(fresh.samples(1).unwrap(), fresh.samples(2).unwrap());
        assert_eq!(fresh.samples(1).unwrap(), fresh.samples(1).unwrap());

        let (clean, records) = prepare_samples(&windows, &emb, None, 0).unwrap();
        assert!(records.is_empty());
        assert_eq!(clean.len(), windows.len());
        assert_eq!(clean[0].x, fixed.fixed()[0].x);
        assert_ne!(clean[0].e, fixed.fixed()[0].e);
    }
}
