use super::*;
use crate::tinylm::ModelConfig;
use proptest::prelude::*;

fn worked() -> PairLogprobs {
    PairLogprobs::new(-10.0, -12.0, -11.0, -11.0)
}

fn cfg(kind: LossKind) -> LossConfig {
    LossConfig::new(kind)
}

// scalar oracle written independently of the implementation
fn log_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

#[test]
fn closed_form_values() {
    let p = worked();
    assert!((dpo_loss(&p, &cfg(LossKind::Dpo)).value - 0.598139).abs() < 1e-6);
    assert!((dpo_loss(&p, &cfg(LossKind::Dpo)).value + log_sigmoid(0.2)).abs() < 1e-12);
    assert!((ipo_loss(&p, &cfg(LossKind::Ipo)).value - 9.0).abs() < 1e-12);
    let kto = kto_pair_loss(&p, &cfg(LossKind::Kto), &[p]).unwrap().value;
    assert!((kto - 0.462594).abs() < 1e-6, "{kto}");
    assert!((cpo_loss(&p, &cfg(LossKind::Cpo)).value - 10.598139).abs() < 1e-6);
    assert!((rso_loss(&p, &cfg(LossKind::Rso)).value - 0.8).abs() < 1e-12);
}

#[test]
fn policy_equals_reference_values() {
    let p = PairLogprobs::new(-7.0, -9.0, -7.0, -9.0);
    assert!((dpo_loss(&p, &cfg(LossKind::Dpo)).value - 2f64.ln()).abs() < 1e-12);
    assert!((ipo_loss(&p, &cfg(LossKind::Ipo)).value - 25.0).abs() < 1e-12);
    assert!((rso_loss(&p, &cfg(LossKind::Rso)).value - 1.0).abs() < 1e-12);
    assert!((kto_pair_loss(&p, &cfg(LossKind::Kto), &[p]).unwrap().value - 0.5).abs() < 1e-12);
    let zero = PairLogprobs::new(0.0, 0.0, 3.0, -4.0);
    assert!((cpo_loss(&zero, &cfg(LossKind::Cpo)).value - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn kto_weighting() {
    let p = worked();
    let mut c = cfg(LossKind::Kto);
    c.lambda_d = 2.0;
    c.lambda_u = 0.0;
    let oracle = 2.0 * (1.0 - 1.0 / (1.0 + (-0.1f64).exp())) / 2.0;
    let v = kto_pair_loss(&p, &c, &[p]).unwrap().value;
    assert!((v - oracle).abs() < 1e-12);
    assert!((v - 0.475021).abs() < 1e-6);
    assert!(matches!(kto_pair_loss(&p, &c, &[]), Err(PrefError::EmptyBatch)));
}

#[test]
fn ipo_minimum_and_rso_saturation() {
    let c = cfg(LossKind::Ipo);
    // h = 1/(2τ) = 5
    let p = PairLogprobs::new(-1.0, -6.0, -3.0, -3.0);
    assert_eq!(ipo_loss(&p, &c).value, 0.0);
    let p = PairLogprobs::new(0.0, -20.0, 0.0, 0.0);
    assert_eq!(rso_loss(&p, &cfg(LossKind::Rso)).value, 0.0);
    assert_eq!(rso_loss(&p, &cfg(LossKind::Rso)).d_lw_pol, 0.0);
}

#[test]
fn cpo_decomposes_into_preference_and_nll() {
    let p = worked();
    let c = cfg(LossKind::Cpo);
    let prefer = -log_sigmoid(c.beta * (p.lw_pol - p.ll_pol));
    assert!((cpo_loss(&p, &c).value - (-p.lw_pol) - prefer).abs() < 1e-12);
}

#[test]
fn config_validation() {
    let mut c = cfg(LossKind::Dpo);
    assert!(c.validate().is_ok());
    c.tau = 0.0;
    assert!(c.validate().is_err());
    assert!(TrainConfig { epochs: 0, ..TrainConfig::desk(0) }.validate().is_err());
    assert_eq!(TrainConfig::large_model(0).num_updates(33), 3 * 3);
    assert_eq!(TrainConfig::desk(0).num_updates(33), 3 * 5);
}

fn numeric(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn any_pair() -> impl Strategy<Value = PairLogprobs> {
    (-30.0..0.0f64, -30.0..0.0f64, -30.0..0.0f64, -30.0..0.0f64).prop_map(|(a, b, c, d)| PairLogprobs::new(a, b, c, d))
}

proptest! {
    #[test]
    fn translation_invariance(p in any_pair(), a in -5.0..5.0f64, b in -5.0..5.0f64) {
        let q = PairLogprobs::new(p.lw_pol + a, p.ll_pol + b, p.lw_ref + a, p.ll_ref + b);
        for k in [LossKind::Dpo, LossKind::Ipo, LossKind::Rso] {
            let (x, y) = (pair_loss(&p, &cfg(k)).value, pair_loss(&q, &cfg(k)).value);
            prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()), "{k}: {x} vs {y}");
        }
    }

    #[test]
    fn cpo_is_not_translation_invariant(p in any_pair(), a in 0.5..5.0f64) {
        let q = PairLogprobs::new(p.lw_pol + a, p.ll_pol + a, p.lw_ref + a, p.ll_ref + a);
        let c = cfg(LossKind::Cpo);
        prop_assert!((cpo_loss(&p, &c).value - cpo_loss(&q, &c).value).abs() > 1e-3);
    }

    #[test]
    fn dpo_and_rso_non_increasing_in_margin(p in any_pair(), d in 0.0..10.0f64) {
        let q = PairLogprobs { lw_pol: p.lw_pol + d, ..p };
        for k in [LossKind::Dpo, LossKind::Rso] {
            prop_assert!(pair_loss(&q, &cfg(k)).value <= pair_loss(&p, &cfg(k)).value + 1e-15);
        }
        let c = cfg(LossKind::Ipo);
        let at_min = PairLogprobs { lw_pol: p.lw_pol + (1.0 / (2.0 * c.tau) - p.margin()), ..p };
        prop_assert!(ipo_loss(&at_min, &c).value <= ipo_loss(&p, &c).value);
        prop_assert!(ipo_loss(&at_min, &c).value < 1e-12);
    }

    #[test]
    fn values_are_nonnegative(p in any_pair()) {
        for k in [LossKind::Ipo, LossKind::Rso, LossKind::Kto] {
            prop_assert!(pair_loss(&p, &cfg(k)).value >= 0.0);
        }
        prop_assert!(dpo_loss(&p, &cfg(LossKind::Dpo)).value > 0.0);
        prop_assert!(cpo_loss(&p, &cfg(LossKind::Cpo)).value > 0.0);
    }

    #[test]
    fn scalar_derivatives_match_differences(p in any_pair()) {
        for k in [LossKind::Dpo, LossKind::Ipo, LossKind::Cpo, LossKind::Rso, LossKind::Kto] {
            let c = cfg(k);
            let out = pair_loss(&p, &c);
            if k == LossKind::Rso && (1.0 - c.gamma * p.margin()).abs() < 1e-4 {
                continue;
            }
            if k == LossKind::Kto && (p.chosen_ratio().abs() < 1e-4 || p.rejected_ratio().abs() < 1e-4) {
                continue;
            }
            let dw = numeric(|x| pair_loss(&PairLogprobs { lw_pol: x, ..p }, &c).value, p.lw_pol);
            let dl = numeric(|x| pair_loss(&PairLogprobs { ll_pol: x, ..p }, &c).value, p.ll_pol);
            prop_assert!((out.d_lw_pol - dw).abs() < 1e-5 * (1.0 + dw.abs()), "{k} w {} {dw}", out.d_lw_pol);
            prop_assert!((out.d_ll_pol - dl).abs() < 1e-5 * (1.0 + dl.abs()), "{k} l {} {dl}", out.d_ll_pol);
        }
    }

    #[test]
    fn kto_batch_derivatives_match_differences(ps in proptest::collection::vec(any_pair(), 1..5), j in 0usize..5) {
        let c = cfg(LossKind::Kto);
        let j = j % ps.len();
        let kl = KtoKl::of(&ps);
        let n = ps.len() as f64;
        let cm = ps.iter().map(|q| q.chosen_ratio()).sum::<f64>() / n;
        let rm = ps.iter().map(|q| q.rejected_ratio()).sum::<f64>() / n;
        prop_assume!(cm.abs() > 1e-3 && rm.abs() > 1e-3);
        let _ = kl;
        let bl = batch_loss(&ps, &c).unwrap();
        let f = |x: f64, chosen: bool| {
            let mut qs = ps.clone();
            if chosen { qs[j].lw_pol = x } else { qs[j].ll_pol = x }
            batch_loss(&qs, &c).unwrap().value
        };
        let dw = numeric(|x| f(x, true), ps[j].lw_pol);
        let dl = numeric(|x| f(x, false), ps[j].ll_pol);
        prop_assert!((bl.d_lw_pol[j] - dw).abs() < 1e-7, "{} {dw}", bl.d_lw_pol[j]);
        prop_assert!((bl.d_ll_pol[j] - dl).abs() < 1e-7, "{} {dl}", bl.d_ll_pol[j]);
        // single-pair form agrees with the batch form on its own value
        let single = kto_pair_loss(&ps[j], &c, &ps).unwrap();
        let mean: f64 = ps.iter().map(|q| kto_pair_loss(q, &c, &ps).unwrap().value).sum::<f64>() / n;
        prop_assert!((mean - bl.value).abs() < 1e-12);
        prop_assert!(single.value.is_finite());
    }
}

fn tiny_model(seed: u64) -> PolicyModel {
    PolicyModel::init(ModelConfig {
        vocab_size: 11,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_dim: 16,
        context_len: 16,
        seed,
    })
    .unwrap()
}

fn pairs() -> Vec<TokenPair> {
    vec![
        TokenPair {
            prompt: vec![0, 5, 6],
            chosen: vec![7, 8, 1],
            rejected: vec![9, 1],
        },
        TokenPair {
            prompt: vec![0, 6],
            chosen: vec![3, 1],
            rejected: vec![4, 10, 1],
        },
        TokenPair {
            prompt: vec![0, 7, 7, 2],
            chosen: vec![5],
            rejected: vec![6, 6, 6, 1],
        },
    ]
}

/// Reference one SGD step away from the policy so that log-ratios are non-zero.
fn shifted_reference(policy: &PolicyModel) -> PolicyModel {
    let mut r = policy.thawed();
    let g = r.grad_sequence_logprob(&[0, 5], &[9, 9, 1]).unwrap();
    for (p, g) in r.params_mut().unwrap().iter_mut().zip(&g) {
        *p -= 0.5 * g;
    }
    r.snapshot_frozen()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    use rand::{Rng, SeedableRng};
    for (i, kind) in LossKind::ALL.into_iter().enumerate() {
        for normalized in [false, true] {
            let policy = tiny_model(i as u64);
            let reference = shifted_reference(&policy);
            let mut c = cfg(kind);
            c.length_normalized = normalized;
            let ps = pairs();
            let refs = reference_logprobs(&reference, &ps, &c).unwrap();
            let (_, grad) = loss_and_grad(&policy, &ps, &refs, &c).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let mut worst: f64 = 0.0;
            for _ in 0..60 {
                let j = rng.gen_range(0..grad.len());
                let h = 1e-4 * policy.params()[j].abs().max(1.0);
                let eval = |d: f64| {
                    let mut p = policy.params().to_vec();
                    p[j] += d;
                    let m = PolicyModel::from_params(*policy.config(), p, false).unwrap();
                    loss_value(&m, &ps, &refs, &c).unwrap()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (grad[j] - num).abs() / grad[j].abs().max(num.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst <= 1e-3, "{kind} normalized={normalized}: {worst}");
        }
    }
}

#[test]
fn zero_learning_rate_returns_identical_params() {
    let policy = tiny_model(1);
    let reference = policy.snapshot_frozen();
    let tc = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::desk(0)
    };
    let out = tune(policy.clone(), &reference, &pairs(), &cfg(LossKind::Dpo), &tc).unwrap();
    assert_eq!(out.model.params(), policy.params());
    assert_eq!(out.log.len(), tc.num_updates(3));
}

#[test]
fn single_pair_dpo_descends() {
    let policy = tiny_model(2);
    let reference = policy.snapshot_frozen();
    let data = vec![pairs()[0].clone()];
    let c = cfg(LossKind::Dpo);
    let tc = TrainConfig {
        epochs: 50,
        ..TrainConfig::desk(0)
    };
    let out = tune(policy.clone(), &reference, &data, &c, &tc).unwrap();
    assert_eq!(out.log.len(), 50);
    let refs = reference_logprobs(&reference, &data, &c).unwrap();
    let before = loss_value(&policy, &data, &refs, &c).unwrap();
    let after = loss_value(&out.model, &data, &refs, &c).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn tuning_is_seeded_and_counts_updates() {
    let policy = tiny_model(3);
    let reference = policy.snapshot_frozen();
    let data: Vec<TokenPair> = pairs().into_iter().cycle().take(11).collect();
    let tc = TrainConfig {
        batch_size: 2,
        grad_accum: 2,
        epochs: 2,
        ..TrainConfig::desk(5)
    };
    for kind in LossKind::ALL {
        let a = tune(policy.clone(), &reference, &data, &cfg(kind), &tc).unwrap();
        let b = tune(policy.clone(), &reference, &data, &cfg(kind), &tc).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.log.len(), 2 * 3);
        assert!(a.log.iter().all(|r| r.loss_value.is_finite() && r.loss_kind == kind));
    }
}

#[test]
fn tune_rejects_bad_inputs() {
    let policy = tiny_model(4);
    let c = cfg(LossKind::Dpo);
    let tc = TrainConfig::desk(0);
    assert!(matches!(
        tune(policy.clone(), &policy, &pairs(), &c, &tc),
        Err(PrefError::ReferenceNotFrozen)
    ));
    assert!(matches!(
        tune(policy.clone(), &policy.snapshot_frozen(), &[], &c, &tc),
        Err(PrefError::EmptyDataset)
    ));
}

#[test]
fn train_log_csv_has_header() {
    let rows = vec![TrainLogRow {
        step: 0,
        epoch: 0,
        loss_kind: LossKind::Kto,
        loss_value: 0.5,
        grad_norm: 1.25,
    }];
    let mut buf = Vec::new();
    write_train_log(&mut buf, &rows).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert_eq!(s, "step,epoch,loss_kind,loss_value,grad_norm\n0,0,kto,0.5,1.25\n");
}
