use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::autodiff::{Tape, Var};
use crate::model::{ForecasterKind, ModelConfig, ParNet};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng::keyed(seed, Stream::Synth, &[]);
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

fn svd_norm(m: &Tensor) -> f64 {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    DMatrix::from_row_slice(r, c, m.data()).singular_values().max()
}

#[test]
fn spectral_norm_matches_svd() {
    for k in 0..20u64 {
        let r = 1 + (k as usize * 7) % 32;
        let c = 1 + (k as usize * 13) % 32;
        let m = randn(&[r, c], k);
        let got = spectral_norm(&m).unwrap();
        let want = svd_norm(&m);
        assert!((got - want).abs() <= 1e-8 * want.max(1.0), "{r}x{c}: {got} vs {want}");
    }
}

#[test]
fn spectral_norm_special_cases() {
    let diag = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { [2.0, -5.0, 1.0][i / 4] } else { 0.0 });
    assert!((spectral_norm(&diag).unwrap() - 5.0).abs() < 1e-12);
    assert_eq!(spectral_norm(&Tensor::zeros([4, 2])).unwrap(), 0.0);
    let rank1 = Tensor::from_fn([3, 2], |i| [1.0, 2.0, 2.0][i / 2] * [3.0, 4.0][i % 2]);
    assert!((spectral_norm(&rank1).unwrap() - 15.0).abs() < 1e-12);
    assert!(matches!(spectral_norm(&Tensor::zeros([2, 2, 2])), Err(Error::Shape { .. })));
    let mut bad = Tensor::zeros([2, 2]);
    bad.data_mut()[0] = f64::NAN;
    assert!(matches!(spectral_norm(&bad), Err(Error::NonFinite(_))));
    let m = randn(&[6, 6], 3);
    assert!(matches!(spectral_norm_with(&m, 0.0, 2), Err(Error::Estimation { iterations: 2, .. })));
}

#[test]
fn spectral_norm_handles_nearly_tied_singular_values() {
    // orthogonal mixing of diag(5, 5 - 1e-7, 1) so the tie is not axis aligned
    let (s, c) = (0.6f64, 0.8f64);
    let q = [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0];
    let d = [5.0, 5.0 - 1e-7, 1.0];
    let m = Tensor::from_fn([3, 3], |i| {
        let (r, k) = (i / 3, i % 3);
        (0..3).map(|j| q[r * 3 + j] * d[j] * q[k * 3 + j]).sum()
    });
    let got = spectral_norm(&m).unwrap();
    assert!((got - svd_norm(&m)).abs() < 1e-8, "{got}");
    let wide = randn(&[3, 17], 5);
    assert!((spectral_norm(&wide).unwrap() - svd_norm(&wide)).abs() < 1e-8);
}

#[test]
fn layer_constants_and_products() {
    let w = Tensor::from_fn([2, 2], |i| [3.0, 0.0, 0.0, 1.0][i]);
    let layers = [Layer::Linear(w.clone()), Layer::Relu, Layer::Linear(w)];
    assert!((lipschitz_mlp(&layers).unwrap() - 9.0).abs() < 1e-12);
    assert_eq!(lipschitz_mlp(&[]).unwrap(), 1.0);
    assert_eq!(Layer::Sigmoid.constant().unwrap(), 0.25);
    let ln = Layer::LayerNorm {
        gamma: vec![0.5, -2.0],
        eps: 1e-4,
    };
    assert!((ln.constant().unwrap() - 200.0).abs() < 1e-9);
    let gru = [Layer::Relu, Layer::Unsupported("gru".into())];
    assert!(matches!(lipschitz_mlp(&gru), Err(Error::Certification(_))));
}

#[test]
fn combine_bound_example() {
    assert_eq!(combine_bound(2.0, 3.0, 0.5), 9.0);
    assert_eq!(combine_bound(1.0, 1.0, 0.0), 1.0);
}

#[test]
fn bias_variance_identity() {
    for k in 0..50u64 {
        let n = 1 + (k as usize % 17);
        let p = randn(&[n, 3], k);
        let y = randn(&[n, 3], k + 100);
        let rows = |t: &Tensor| (0..n).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let bv = bias_variance(&rows(&p), &rows(&y)).unwrap();
        assert!((bv.mse - bv.bias_sq - bv.variance).abs() < 1e-12);
        assert!(bv.variance >= 0.0);
    }
    let bv = bias_variance(&[vec![1.0], vec![2.0]], &[vec![2.0], vec![3.0]]).unwrap();
    assert_eq!((bv.mse, bv.bias_sq, bv.variance), (1.0, 1.0, 0.0));
    assert!(bias_variance(&[vec![1.0]], &[]).is_err());
    assert!(bias_variance(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
}

#[test]
fn local_jacobian_of_linear_map_is_its_norm() {
    let w = randn(&[5, 3], 9);
    let want = spectral_norm(&w).unwrap();
    let g = |tape: &mut Tape, z: Var| -> crate::Result<Var> {
        let wv = tape.leaf(w.clone())?;
        tape.matmul(z, wv)
    };
    let got = local_jacobian_norm(&g, &randn(&[2, 5], 1), 60, 1e-5, 0).unwrap();
    assert!((got - want).abs() < 1e-6 * want, "{got} vs {want}");
}

fn cert_model(kind: ForecasterKind, seed: u64) -> ParNet {
    let c = ModelConfig {
        channels: 1,
        lookback: 4,
        horizon: 2,
        hidden: 16,
        forecaster: kind,
        init_std: 0.3,
        ..ModelConfig::new(1, 4, 2)
    };
    let mut m = ParNet::new(c, seed).unwrap();
    let shape = m.param("phi.l2.weight").unwrap().shape().to_vec();
    *m.param_mut("phi.l2.weight").unwrap() = randn(&shape, seed + 1).map(|v| 0.2 * v);
    m
}

fn quick_opts() -> CertifyOptions {
    CertifyOptions {
        points_per_rung: 2,
        pairs_per_rung: 16,
        power_iters: 10,
        ..CertifyOptions::default()
    }
}

#[test]
fn certificate_dominates_observed_slopes() {
    for kind in [ForecasterKind::Mlp, ForecasterKind::Gru] {
        let m = cert_model(kind, 4);
        let anchors = vec![randn(&[4, 1], 1), randn(&[4, 1], 2)];
        let cert = certify(&m, &anchors, &quick_opts()).unwrap();
        let observed = empirical_lipschitz(&m, &anchors, cert.radius_e, 400, 3).unwrap();
        assert!(observed > 0.0);
        assert!(observed <= cert.l_total, "{kind:?}: {observed} > {}", cert.l_total);
        assert_eq!(cert.radius_e, 2.0);
        assert_eq!(cert.l_attention, 1.5 * cert.attention_observed);
        assert!(cert.attention_closed_form >= cert.attention_observed);
        assert!(cert.softmax_jacobian_observed <= 0.5 + 1e-12);
        assert_eq!(
            cert.forecaster_method,
            if kind == ForecasterKind::Mlp { "global" } else { "observed" }
        );
        assert_eq!(cert.checkpoint_sha256, m.fingerprint().unwrap());
        let json = cert.to_json().unwrap();
        let back: Certificate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cert);
    }
}

#[test]
fn attention_estimate_is_monotone_in_radius() {
    let m = cert_model(ForecasterKind::Mlp, 8);
    let anchors = vec![randn(&[4, 1], 1)];
    let opts = quick_opts();
    let mut last = 0.0;
    for r in [0.1, 0.5, 1.0, 3.0, 9.0] {
        let (est, _, _) = lipschitz_attention(&m, &anchors, r, &opts).unwrap();
        assert!(est >= last);
        last = est;
    }
}

#[test]
fn certify_rejects_bad_anchors() {
    let m = cert_model(ForecasterKind::Mlp, 0);
    assert!(certify(&m, &[], &quick_opts()).is_err());
    assert!(matches!(
        certify(&m, &[randn(&[3, 1], 0)], &quick_opts()),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn oracle_projector_is_orthogonal_projection() {
    let model = SignalNoiseModel::new(Prop2Config::default()).unwrap();
    let p = oracle_projector(&model);
    let d = 12;
    let pp = crate::model::matmul2(&p, &p);
    assert!(pp.max_abs_diff(&p) < 1e-12);
    assert!(p.max_abs_diff(&p.transpose2()) < 1e-15);
    let trace: f64 = (0..d).map(|i| p.at(i, i)).sum();
    assert!((trace - 4.0).abs() < 1e-12);
}

#[test]
fn quadrature_matches_closed_form_margin() {
    for seed in 0..5 {
        let model = SignalNoiseModel::new(Prop2Config {
            seed,
            sigma: 0.7,
            ..Prop2Config::default()
        })
        .unwrap();
        let gh = gauss_hermite_noise_margin(&model);
        assert!((gh - model.expected_margin()).abs() < 1e-12 * gh.max(1.0));
    }
}

#[test]
fn small_verification_run() {
    let cfg = Prop2Config {
        trials: 20_000,
        reps: 4,
        seed: 3,
        ..Prop2Config::default()
    };
    let report = verify_prop2(&cfg).unwrap();
    assert!(report.passed(), "{report:?}");
    for rep in &report.reps {
        assert!((rep.margin - report.expected_margin).abs() < 0.1 * report.expected_margin);
        assert!((rep.noise_energy - 4.0).abs() < 0.2);
        assert!(rep.conditional_mean_gap < 1e-20);
        assert!((rep.raw.mse - rep.raw.bias_sq - rep.raw.variance).abs() < 1e-12);
    }
    assert_eq!(verify_prop2(&cfg).unwrap(), report);
    assert!(matches!(
        verify_prop2(&Prop2Config {
            signal_dim: 12,
            ..cfg
        }),
        Err(Error::Config(_))
    ));
}
