use super::*;
use crate::seed::SeedStream;
use crate::tinylm::{init_model, ModelConfig};
use proptest::prelude::*;
use rand::Rng;

fn constant_model(probs: &[f64]) -> PolicyModel {
    let cfg = ModelConfig {
        vocab_size: probs.len(),
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_dim: 8,
        context_len: 8,
        seed: 1,
    };
    let mut m = init_model(cfg).unwrap();
    let (out, bias) = (m.output_range(), m.output_bias_range());
    let p = m.params_mut().unwrap();
    p[out].iter_mut().for_each(|x| *x = 0.0);
    for (b, q) in p[bias].iter_mut().zip(probs) {
        *b = q.ln();
    }
    m
}

fn random_model(vocab: usize, seed: u64) -> PolicyModel {
    let cfg = ModelConfig {
        vocab_size: vocab,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_dim: 16,
        context_len: 48,
        seed,
    };
    let mut m = init_model(cfg).unwrap();
    let mut rng = SeedStream::new(seed).derive("widen").rng();
    for x in m.params_mut().unwrap() {
        *x += rng.gen_range(-0.4..0.4);
    }
    m
}

fn prompts(vocab: usize, n: usize) -> Vec<Vec<TokenId>> {
    (0..n).map(|i| vec![0, 2 + (i % (vocab - 2)) as TokenId, 2 + (i * 7 % (vocab - 2)) as TokenId]).collect()
}

fn no_stop(max_len: usize) -> SampleSpec {
    SampleSpec { stop: None, ..SampleSpec::greedy(max_len) }
}

#[test]
fn toy_rank_example() {
    let base = constant_model(&[0.5, 0.3, 0.2]);
    let aligned = constant_model(&[0.2, 0.5, 0.3]);
    let recs = analyze(&aligned, &base, &[vec![0]], &no_stop(1)).unwrap();
    assert_eq!(recs.len(), 1);
    let r = &recs[0];
    assert_eq!((r.token, r.rank_aligned, r.rank_base, r.delta), (1, 0, 1, 1));
    assert_eq!(histogram(&recs, 10).unwrap().shifted_rate, 1.0);
}

#[test]
fn ties_rank_by_token_id() {
    let d = [0.25, 0.25, 0.25, 0.25];
    assert_eq!((0..4).map(|t| rank_of(&d, t)).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert_eq!(rank_of(&[0.1, 0.3, 0.3, 0.3], 0), 3);
}

#[test]
fn self_comparison_is_null() {
    let m = random_model(20, 5);
    let recs = analyze(&m, &m, &prompts(20, 12), &no_stop(30)).unwrap();
    assert_eq!(recs.len(), 12 * 30);
    assert!(recs.iter().all(|r| r.delta == 0 && r.rank_aligned == 0));
    let h = histogram(&recs, 10).unwrap();
    assert_eq!((h.shifted_rate, h.abs_shifted_rate), (0.0, 0.0));
}

#[test]
fn perturbed_output_layer_shifts_tokens() {
    let base = random_model(30, 8);
    let mut aligned = base.clone();
    let out = aligned.output_range();
    let mut rng = SeedStream::new(1).derive("perturb").rng();
    for x in &mut aligned.params_mut().unwrap()[out] {
        *x += rng.gen_range(-0.5..0.5);
    }
    let recs = analyze(&aligned, &base, &prompts(30, 40), &no_stop(40)).unwrap();
    assert!(recs.len() >= 1000);
    let mean_abs = recs.iter().map(|r| r.delta.unsigned_abs()).sum::<u64>() as f64 / recs.len() as f64;
    assert!(mean_abs > 0.0);
    assert!(histogram(&recs, 10).unwrap().shifted_rate > 0.0);
}

#[test]
fn vocab_mismatch_is_an_error() {
    let a = constant_model(&[0.5, 0.5]);
    let b = constant_model(&[0.3, 0.3, 0.4]);
    assert!(matches!(analyze(&a, &b, &[vec![0]], &no_stop(1)), Err(ShiftError::VocabMismatch { .. })));
}

fn rec(rel: f64, delta: i64) -> ShiftRecord {
    ShiftRecord {
        prompt_id: 0,
        position: 0,
        relative_position: rel,
        token: 0,
        rank_base: delta.max(0) as usize,
        rank_aligned: (-delta).max(0) as usize,
        delta,
    }
}

#[test]
fn histogram_examples() {
    let h = histogram(&[rec(0.05, 0)], 10).unwrap();
    assert_eq!(h.counts[0][DeltaLevel::Zero as usize], 1);
    let h = histogram(&(0..50).map(|i| rec(i as f64 / 50.0, 0)).collect::<Vec<_>>(), 10).unwrap();
    assert!(h.counts.iter().all(|r| r[DeltaLevel::Zero as usize] == 5));
    assert!(matches!(histogram(&[], 10), Err(ShiftError::Empty)));
    let levels: Vec<_> = [-3, 0, 1, 2, 3, 10, 11, 100, 101].iter().map(|&d| DeltaLevel::of(d)).collect();
    use DeltaLevel::*;
    assert_eq!(
        levels,
        vec![Demoted, Zero, OneToTwo, OneToTwo, ThreeToTen, ThreeToTen, ElevenToHundred, ElevenToHundred, OverHundred]
    );
}

#[test]
fn diagnosis_examples() {
    let d = DiagnosisReport::from_rates(0.30, 0.09).unwrap();
    assert!((d.ratio - 0.3).abs() < 1e-12);
    assert_eq!(d.verdict, Verdict::UnderAlignment);
    assert_eq!(DiagnosisReport::from_rates(0.2, 0.2).unwrap().verdict, Verdict::Inconclusive);
    assert_eq!(DiagnosisReport::from_rates(0.2, 0.0).unwrap().verdict, Verdict::UnderAlignment);
    assert!(matches!(DiagnosisReport::from_rates(0.0, 0.1), Err(ShiftError::ZeroIdShift)));
    let id = vec![rec(0.1, 2), rec(0.2, 0), rec(0.3, -1)];
    let ood = vec![rec(0.1, 0), rec(0.5, -4)];
    let d = diagnose(&id, &ood).unwrap();
    assert_eq!((d.shifted_rate_ood, d.abs_shifted_rate_ood), (0.0, 0.5));
    assert!(d.to_string().contains("ratio"));
}

#[test]
fn exports_are_well_formed() {
    let recs: Vec<_> = (0..20).map(|i| rec(i as f64 / 20.0, i % 5 - 1)).collect();
    let mut buf = Vec::new();
    write_records_csv(&recs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("prompt_id,position,relative_position,token,rank_base,rank_aligned,delta\n"));
    assert_eq!(text.lines().count(), 21);
    let h = histogram(&recs, 10).unwrap();
    let mut buf = Vec::new();
    h.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 11);
    let freq: f64 = text
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(3).map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert!((freq - 1.0).abs() < 1e-12);
    let svg = h.to_svg("a < b");
    assert!(svg.starts_with("<svg") && svg.contains("a &lt; b") && svg.trim_end().ends_with("</svg>"));
}

proptest! {
    #[test]
    fn histogram_is_a_partition(
        recs in proptest::collection::vec((0.0..1.0f64, -300i64..300), 1..200),
        buckets in 1usize..20,
    ) {
        let recs: Vec<_> = recs.into_iter().map(|(p, d)| rec(p, d)).collect();
        let h = histogram(&recs, buckets).unwrap();
        let total: usize = h.counts.iter().flat_map(|r| r.iter()).sum();
        prop_assert_eq!(total, recs.len());
        let other = histogram(&recs, buckets + 1).unwrap();
        prop_assert_eq!(other.counts.iter().flat_map(|r| r.iter()).sum::<usize>(), recs.len());
        prop_assert_eq!(h.shifted_rate, other.shifted_rate);
    }

    #[test]
    fn ranks_are_valid(probs in proptest::collection::vec(0.0..1.0f64, 2..30), t in 0usize..30) {
        let t = t % probs.len();
        let r = rank_of(&probs, t as TokenId);
        prop_assert!(r < probs.len());
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(order[r], t);
    }
}
