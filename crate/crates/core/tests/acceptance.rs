//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use parnet::autodiff::{grad_check, Group, Mode, Tensor};
use parnet::bench::{emit_csv, load_dataset, sweep, CellResult, ExperimentConfig, SweepResult};
use parnet::certify::{
    bias_variance, certify, combine_bound, empirical_lipschitz, spectral_norm, verify_prop2, CertifyOptions,
    Prop2Config,
};
use parnet::model::{ForecasterKind, ModelConfig, ParNet, Variant};
use parnet::perturb::{insert_irrelevant, perturb_window, shuffle_tokens, PerturbationSpec, Strategy};
use parnet::rng::{self, Stream};
use parnet::train::{fit, run_epochs, Sample, TrainConfig};
use parnet::corpus::NormStats;
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn randn(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn wake_projection(m: &mut ParNet, rng: &mut impl Rng) {
    let shape = m.param("phi.l2.weight").unwrap().shape().to_vec();
    *m.param_mut("phi.l2.weight").unwrap() = randn(&shape, rng, 0.3);
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        Err(format!("took {took:.1?}, limit {limit:?}"))
    } else {
        Ok(())
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::keyed(1, Stream::Synth, &[]);
    let mut worst = 0.0f64;
    let (mut checked, mut noise) = (0, 0);
    for k in 0..50 {
        let kind = if k % 2 == 0 { ForecasterKind::Gru } else { ForecasterKind::Mlp };
        let config = ModelConfig {
            hidden: rng.random_range(4..=12),
            forecaster: kind,
            init_std: 0.3,
            ..ModelConfig::new(rng.random_range(1..=3), rng.random_range(1..=8), rng.random_range(1..=4))
        };
        let mut m = ParNet::new(config.clone(), k).map_err(|e| e.to_string())?;
        wake_projection(&mut m, &mut rng);
        let batch = rng.random_range(1..=2);
        let x = randn(&[batch, config.lookback, config.channels], &mut rng, 1.0);
        let e = randn(&[batch, config.lookback, config.embed_dim], &mut rng, 1.0);
        let y = randn(&[batch, config.horizon, config.channels], &mut rng, 1.0);
        let skeleton = m.clone();
        let report = grad_check(
            |tape, store| {
                let mut net = skeleton.clone();
                net.store = store.clone();
                let xv = tape.leaf(x.clone())?;
                let ev = tape.leaf(e.clone())?;
                let out = net.forward_on(tape, xv, ev, Variant::Full, Mode::Eval, 0)?;
                tape.mse_loss(out, &y)
            },
            &mut m.store,
            1e-5,
            1e-4,
        )
        .map_err(|e| e.to_string())?;
        if !report.passed {
            return Err(format!("config {k} ({kind:?}, {config:?}): {report:?}"));
        }
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
        noise += report.within_noise;
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "50 configs, {checked} coordinates ({noise} within rounding noise), max rel error {worst:.2e}, {:.1?}",
        start.elapsed()
    ))
}

fn texts(rng: &mut impl Rng, n: usize) -> Vec<String> {
    const WORDS: [&str; 12] = [
        "prices", "rise", "fall", "market", "demand", "steady", "the", "output", "up", "down", "report", "news",
    ];
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..12);
            (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

fn sorted_tokens(s: &str) -> Vec<&str> {
    let mut t: Vec<&str> = s.split_whitespace().collect();
    t.sort_unstable();
    t
}

fn is_subsequence(needle: &[&str], hay: &[&str]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

fn perturbation() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::keyed(2, Stream::Synth, &[]);
    let spec = PerturbationSpec::new(0.5, 0);
    let cases = 1200;
    for case in 0..cases as u64 {
        let lookback = rng.random_range(1..=512);
        let rho: f64 = match case % 4 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random(),
        };
        let seed = rng.random::<u64>();
        let ts = texts(&mut rng, lookback);
        let spec = PerturbationSpec { rho, seed, ..spec.clone() };
        let (out, records) = perturb_window(&ts, &spec, case).map_err(|e| e.to_string())?;
        let want = (rho * lookback as f64).floor() as usize;
        if records.len() != want {
            return Err(format!("case {case}: {} perturbed, want {want}", records.len()));
        }
        let touched: Vec<usize> = records.iter().map(|r| r.position).collect();
        for (i, (a, b)) in ts.iter().zip(&out).enumerate() {
            if !touched.contains(&i) && a != b {
                return Err(format!("case {case}: unselected position {i} changed"));
            }
        }
        for r in &records {
            let ok = match r.strategy {
                Strategy::ShuffleTokens => sorted_tokens(&r.original) == sorted_tokens(&r.perturbed),
                Strategy::InsertIrrelevant => {
                    let o: Vec<&str> = r.original.split_whitespace().collect();
                    let p: Vec<&str> = r.perturbed.split_whitespace().collect();
                    p.len() > o.len() && is_subsequence(&o, &p)
                }
                Strategy::InjectContradiction => true,
            };
            if !ok {
                return Err(format!("case {case}: {:?} broke its invariant: {r:?}", r.strategy));
            }
        }
        let (again, records_again) = perturb_window(&ts, &spec, case).map_err(|e| e.to_string())?;
        let bytes = |v: &[String]| v.join("\u{0}").into_bytes();
        if bytes(&out) != bytes(&again) || records != records_again {
            return Err(format!("case {case}: rerun differs"));
        }

        let text = &ts[0];
        let s = shuffle_tokens(text, seed);
        if sorted_tokens(&s) != sorted_tokens(text) || s != shuffle_tokens(text, seed) {
            return Err(format!("case {case}: shuffle lost tokens or is not deterministic"));
        }
        let ins = insert_irrelevant(text, seed, &spec.lexicon).map_err(|e| e.to_string())?;
        let o: Vec<&str> = text.split_whitespace().collect();
        let p: Vec<&str> = ins.split_whitespace().collect();
        if !is_subsequence(&o, &p) || ins != insert_irrelevant(text, seed, &spec.lexicon).unwrap() {
            return Err(format!("case {case}: insertion broke the original order"));
        }
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("{cases} cases, {:.1?}", start.elapsed()))
}

fn svd_norm(m: &Tensor) -> f64 {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    nalgebra::DMatrix::from_row_slice(r, c, m.data()).singular_values().max()
}

fn lipschitz() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::keyed(3, Stream::Synth, &[]);
    let mut ratios = Vec::new();
    for k in 0..20u64 {
        let config = ModelConfig {
            forecaster: ForecasterKind::Mlp,
            init_std: 0.1 + 0.2 * rng.random::<f64>(),
            ..ModelConfig::new(rng.random_range(1..=2), rng.random_range(2..=8), rng.random_range(1..=4))
        };
        let mut m = ParNet::new(config.clone(), 100 + k).map_err(|e| e.to_string())?;
        wake_projection(&mut m, &mut rng);
        let anchors: Vec<Tensor> = (0..3).map(|_| randn(&[config.lookback, config.channels], &mut rng, 1.0)).collect();
        let opts = CertifyOptions {
            seed: k,
            ..CertifyOptions::default()
        };
        let cert = certify(&m, &anchors, &opts).map_err(|e| e.to_string())?;
        let observed =
            empirical_lipschitz(&m, &anchors, cert.radius_e, 10_000, k).map_err(|e| e.to_string())?;
        if !(observed <= cert.l_total) {
            return Err(format!("instance {k}: observed {observed} > certified {}", cert.l_total));
        }
        ratios.push(observed / cert.l_total);
    }
    let combined = combine_bound(2.0, 3.0, 0.5);
    if combined != 9.0 {
        return Err(format!("combine_bound(2, 3, 0.5) = {combined}"));
    }
    let mut worst = 0.0f64;
    for k in 0..100 {
        let r = 1 + k % 32;
        let c = 1 + (k * 7 + 3) % 32;
        let m = randn(&[r, c], &mut rng, 1.0);
        let got = spectral_norm(&m).map_err(|e| e.to_string())?;
        worst = worst.max((got - svd_norm(&m)).abs());
    }
    if worst > 1e-8 {
        return Err(format!("spectral norm off by {worst:e}"));
    }
    within(start, Duration::from_secs(300))?;
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "20/20 certified (max observed/certified {max_ratio:.2e}), combine_bound 9, spectral err {worst:.1e}, {:.1?}",
        start.elapsed()
    ))
}

fn denoising() -> Outcome {
    let start = Instant::now();
    let cfg = Prop2Config::default();
    if (cfg.dim, cfg.dim - cfg.signal_dim, cfg.sigma, cfg.trials, cfg.reps) != (12, 4, 1.0, 100_000, 100) {
        return Err(format!("unexpected default setup {cfg:?}"));
    }
    let report = verify_prop2(&cfg).map_err(|e| e.to_string())?;
    within(start, Duration::from_secs(300))?;
    let summary = format!(
        "positive margins {}/100, bound held {}/100, {:.1?}",
        report.positive_margins,
        report.bounds_held,
        start.elapsed()
    );
    if report.positive_margins >= 99 && report.bounds_held == 100 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn bias_variance_identity() -> Outcome {
    let mut rng = rng::keyed(5, Stream::Synth, &[]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let width = rng.random_range(1..=6);
        let scale = 10f64.powi(rng.random_range(-2..=1));
        let offset: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let row = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..width).map(|_| offset + scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let preds: Vec<Vec<f64>> = (0..n).map(|_| row(&mut rng)).collect();
        let targets: Vec<Vec<f64>> = (0..n).map(|_| row(&mut rng)).collect();
        let bv = bias_variance(&preds, &targets).map_err(|e| e.to_string())?;
        worst = worst.max((bv.mse - (bv.bias_sq + bv.variance)).abs());
    }
    if worst < 1e-12 {
        Ok(format!("1000 sets, max gap {worst:.1e}"))
    } else {
        Err(format!("gap {worst:e}"))
    }
}

fn benchmark(result: &SweepResult, took: Duration) -> Outcome {
    if !result.failures.is_empty() {
        return Err(format!("{} cells failed: {:?}", result.failures.len(), result.failures));
    }
    if result.cells.len() != 80 {
        return Err(format!("{} cells, want 80", result.cells.len()));
    }
    let at = |v: Variant, rho: f64| -> HashMap<u64, &CellResult> {
        result.cells.iter().filter(|c| c.variant == v && c.rho == rho).map(|c| (c.seed, c)).collect()
    };
    let full = at(Variant::Full, 0.9);
    let no_ppm = at(Variant::NoPpm, 0.9);
    let wins = full.iter().filter(|(s, c)| c.mse <= no_ppm[s].mse).count();
    let mut invariant = true;
    for seed in full.keys() {
        let uni: Vec<(u64, u64)> = result
            .cells
            .iter()
            .filter(|c| c.variant == Variant::Unimodal && c.seed == *seed)
            .map(|c| (c.mse.to_bits(), c.mae.to_bits()))
            .collect();
        invariant &= uni.len() == 4 && uni.windows(2).all(|w| w[0] == w[1]);
    }
    let summary = format!(
        "full <= no_ppm at rho 0.9 in {wins}/5 seeds, unimodal rho-invariant: {invariant}, sweep {took:.1?}"
    );
    if wins >= 4 && invariant && took < Duration::from_secs(1800) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn toy_samples(n: usize, config: &ModelConfig, seed: u64) -> Vec<Sample> {
    let mut rng = rng::keyed(seed, Stream::Synth, &[]);
    (0..n)
        .map(|_| Sample {
            x: randn(&[config.lookback, config.channels], &mut rng, 1.0),
            e: randn(&[config.lookback, config.embed_dim], &mut rng, 1.0),
            y: randn(&[config.horizon, config.channels], &mut rng, 1.0),
            stats: NormStats {
                mean: vec![0.0; config.channels],
                std: vec![1.0; config.channels],
            },
        })
        .collect()
}

fn training_contract() -> Outcome {
    let cfg = TrainConfig::default();
    if (cfg.patience, cfg.max_epochs) != (20, 50) {
        return Err(format!("defaults patience {} max_epochs {}", cfg.patience, cfg.max_epochs));
    }
    // best at the first epoch, then 20 epochs that never beat it
    let flat = run_epochs(&cfg, |e| Ok((0.0, if e == 0 { 1.0 } else { 1.0 + (e % 3) as f64 }, 0.0)), |_| {})
        .map_err(|e| e.to_string())?;
    if !(flat.stopped_early && flat.epochs.len() == 21 && flat.best_epoch == 0) {
        return Err(format!("stopped after {} epochs, best {}", flat.epochs.len(), flat.best_epoch));
    }
    let falling = run_epochs(&cfg, |e| Ok((0.0, 1.0 / (e + 1) as f64, 0.0)), |_| {}).map_err(|e| e.to_string())?;
    if falling.stopped_early || falling.epochs.len() != 50 {
        return Err(format!("improving run lasted {} epochs", falling.epochs.len()));
    }

    let config = ModelConfig {
        hidden: 16,
        ..ModelConfig::new(1, 8, 6)
    };
    let mut m = ParNet::new(config.clone(), 7).map_err(|e| e.to_string())?;
    wake_projection(&mut m, &mut rng::keyed(7, Stream::Synth, &[]));
    let phi_bytes = |m: &ParNet| -> Vec<u8> {
        m.store
            .iter()
            .filter(|p| p.group == Group::PerSup)
            .flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    };
    let before = phi_bytes(&m);
    let frozen = TrainConfig {
        lr_per_sup: 0.0,
        max_epochs: 5,
        patience: 5,
        batch_size: 8,
        ..TrainConfig::default()
    };
    fit(&mut m, &toy_samples(40, &config, 1), &toy_samples(10, &config, 2), &frozen).map_err(|e| e.to_string())?;
    if phi_bytes(&m) != before {
        return Err("projection moved with lr_per_sup = 0".into());
    }
    Ok("stop after 1 + 20 epochs, 50-epoch cap, projection byte-identical".into())
}

fn report(n: usize, outcome: &Outcome) -> bool {
    match outcome {
        Ok(msg) => println!("criterion {n}: PASS {msg}"),
        Err(msg) => println!("criterion {n}: FAIL {msg}"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, &gradients());
    ok &= report(2, &perturbation());
    ok &= report(3, &lipschitz());
    ok &= report(4, &denoising());
    ok &= report(5, &bias_variance_identity());

    let cfg = ExperimentConfig::default();
    let data = load_dataset(&cfg).expect("synthetic dataset");
    let start = Instant::now();
    let first = sweep(&cfg, &data);
    let took = start.elapsed();
    ok &= report(
        6,
        &first.as_ref().map_err(|e| e.to_string()).and_then(|r| benchmark(r, took)),
    );
    ok &= report(7, &training_contract());

    let determinism = || -> Outcome {
        let first = first.as_ref().map_err(|e| e.to_string())?;
        let second = sweep(&cfg, &data).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        emit_csv(&first.table(), &a).map_err(|e| e.to_string())?;
        emit_csv(&second.table(), &b).map_err(|e| e.to_string())?;
        let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        if a == b {
            Ok(format!("two sweeps, {} identical bytes", a.len()))
        } else {
            Err("sweep CSVs differ".into())
        }
    };
    ok &= report(8, &determinism());

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
