use super::*;
use crate::world::{gen_kb, world_vocab};
use std::collections::HashMap;

/// Answers every probe with P(`<true>`) looked up by prompt, default `p_true`.
struct StubAnswerer {
    vocab_len: usize,
    true_id: usize,
    false_id: usize,
    other: Option<usize>,
    p_true: f64,
    by_prompt: HashMap<Vec<TokenId>, f64>,
}

impl StubAnswerer {
    fn new(vocab: &Vocab, p_true: f64) -> Self {
        Self {
            vocab_len: vocab.len(),
            true_id: vocab.true_id() as usize,
            false_id: vocab.false_id() as usize,
            other: None,
            p_true,
            by_prompt: HashMap::new(),
        }
    }

    /// P(correct) = `p` for `probe`.
    fn knows(mut self, vocab: &Vocab, probe: &KnowledgeProbe, p: f64) -> Self {
        let key = encode_prompt(vocab, &probe.prompt).unwrap();
        self.by_prompt.insert(key, if probe.gold { p } else { 1.0 - p });
        self
    }
}

impl AnswerModel for StubAnswerer {
    fn answer_dist(&self, prompt: &[TokenId]) -> tinylm::Result<Vec<f64>> {
        let pt = *self.by_prompt.get(prompt).unwrap_or(&self.p_true);
        let mut d = vec![0.0; self.vocab_len];
        match self.other {
            Some(o) => {
                d[self.true_id] = pt / 2.0;
                d[self.false_id] = (1.0 - pt) / 2.0;
                d[o] = 0.5;
            }
            None => {
                d[self.true_id] = pt;
                d[self.false_id] = 1.0 - pt;
            }
        }
        Ok(d)
    }
}

fn setup() -> (KnowledgeBase, Vocab) {
    let kb = gen_kb(4, 10).unwrap();
    let vocab = world_vocab(&kb).unwrap();
    (kb, vocab)
}

fn probe_of(kb: &KnowledgeBase, truthful: bool, i: usize) -> KnowledgeProbe {
    let e = &kb.entities()[i % kb.len()];
    let r = Relation::ALL[i % Relation::ALL.len()];
    let t = if truthful {
        kb.triple(e, r).unwrap()
    } else {
        Triple::new(e.as_str(), r, kb.wrong_objects(e, r)[0])
    };
    KnowledgeProbe::new(AtomicFact::from_triple(t), kb)
}

/// Normal-approximation-free 99% bounds: exact binomial tail sums.
fn binomial_interval(k: usize, p: f64) -> (usize, usize) {
    let mut pmf = vec![0.0f64; k + 1];
    for (c, v) in pmf.iter_mut().enumerate() {
        let ln = ln_choose(k, c) + c as f64 * p.ln() + (k - c) as f64 * (1.0 - p).ln();
        *v = ln.exp();
    }
    let (mut lo, mut acc) = (0, 0.0);
    while acc + pmf[lo] < 0.005 {
        acc += pmf[lo];
        lo += 1;
    }
    let (mut hi, mut acc) = (k, 0.0);
    while acc + pmf[hi] < 0.005 {
        acc += pmf[hi];
        hi -= 1;
    }
    (lo, hi)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

#[test]
fn detection_rate_statistics() {
    let (kb, vocab) = setup();
    let cfg = DetectionConfig { k: 200, constrained: true };
    for (i, p) in [0.0, 0.3, 0.7, 1.0].into_iter().enumerate() {
        for truthful in [true, false] {
            let probe = probe_of(&kb, truthful, i);
            let stub = StubAnswerer::new(&vocab, 0.5).knows(&vocab, &probe, p);
            let res = detect_knowledge(&stub, &vocab, &probe, &cfg, &SampleSpec::multinomial(1.0, 1, 11)).unwrap();
            assert_eq!(res.transcripts.len(), 200);
            if p == 0.0 || p == 1.0 {
                assert_eq!(res.r, p);
            } else {
                let (lo, hi) = binomial_interval(200, p);
                assert!((lo..=hi).contains(&res.correct), "p={p} correct={}", res.correct);
                assert_eq!(res.status, KnowledgeStatus::PotentiallyKnown);
            }
        }
    }
}

#[test]
fn status_boundaries() {
    let k = 200;
    assert_eq!(KnowledgeStatus::of(0, k), KnowledgeStatus::Unknown);
    assert_eq!(KnowledgeStatus::of(1, k), KnowledgeStatus::PotentiallyKnown);
    assert_eq!(KnowledgeStatus::of(k - 1, k), KnowledgeStatus::PotentiallyKnown);
    assert_eq!(KnowledgeStatus::of(k, k), KnowledgeStatus::Known);
}

#[test]
fn detection_is_seeded_and_validated() {
    let (kb, vocab) = setup();
    let probe = probe_of(&kb, true, 0);
    let stub = StubAnswerer::new(&vocab, 0.5);
    let cfg = DetectionConfig::default();
    let spec = SampleSpec::multinomial(1.0, 1, 3);
    let a = detect_knowledge(&stub, &vocab, &probe, &cfg, &spec).unwrap();
    assert_eq!(a, detect_knowledge(&stub, &vocab, &probe, &cfg, &spec).unwrap());
    assert_ne!(a.transcripts, detect_knowledge(&stub, &vocab, &probe, &cfg, &spec.with_seed(4)).unwrap().transcripts);
    let one = DetectionConfig { k: 1, constrained: true };
    assert!(matches!(
        detect_knowledge(&stub, &vocab, &probe, &one, &spec),
        Err(ApeftError::TooFewSamples(1))
    ));
}

#[test]
fn unconstrained_counts_unparseable_as_incorrect() {
    let (kb, vocab) = setup();
    let probe = probe_of(&kb, true, 0);
    let mut stub = StubAnswerer::new(&vocab, 1.0);
    stub.other = Some(vocab.eos() as usize);
    let free = DetectionConfig { k: 200, constrained: false };
    let spec = SampleSpec::multinomial(1.0, 1, 8);
    let res = detect_knowledge(&stub, &vocab, &probe, &free, &spec).unwrap();
    assert!(res.unparseable > 50 && res.unparseable < 150);
    assert_eq!(res.correct + res.unparseable, 200);
    let constrained = DetectionConfig { k: 200, constrained: true };
    let res = detect_knowledge(&stub, &vocab, &probe, &constrained, &spec).unwrap();
    assert_eq!((res.unparseable, res.correct), (0, 200));
}

fn general(kb: &KnowledgeBase, e: usize, facts: &[(Relation, bool)]) -> GeneralPreference {
    let ent = &kb.entities()[e];
    let text = |fs: &[(Relation, bool)]| {
        fs.iter()
            .map(|&(r, ok)| {
                let t = if ok {
                    kb.triple(ent, r).unwrap()
                } else {
                    Triple::new(ent.as_str(), r, kb.wrong_objects(ent, r)[0])
                };
                grammar::canonical(&t)
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    GeneralPreference {
        x: grammar::bio_prompt(ent),
        y_w: text(facts),
        y_l: text(&facts.iter().map(|&(r, ok)| (r, !ok)).collect::<Vec<_>>()),
        f_w: 1.0,
        f_l: 0.0,
        q: 1.0,
        entity: ent.clone(),
    }
}

#[test]
fn pref_facts_cover_both_sides_and_dedup() {
    let (kb, _) = setup();
    let a = general(&kb, 0, &[(Relation::BornCity, true), (Relation::Award, false)]);
    let b = general(&kb, 0, &[(Relation::BornCity, true)]);
    let facts = extract_pref_facts_sourced(&[a, b]);
    // two relations × {true, wrong} from the first pair; the second adds nothing
    assert_eq!(facts.len(), 4);
    assert!(facts.iter().all(|f| f.origin == Some(0)));
    let triples: HashSet<_> = facts.iter().map(|f| f.fact.triple.clone()).collect();
    assert_eq!(triples.len(), 4);
}

#[test]
fn atomic_pairs_only_from_potentially_known() {
    let (kb, vocab) = setup();
    let pref = general(&kb, 1, &[(Relation::BornYear, true), (Relation::Field, true), (Relation::Team, false)]);
    let facts = extract_pref_facts_sourced(&[pref]);
    assert_eq!(facts.len(), 6);
    let probes: Vec<_> = facts.iter().map(|f| KnowledgeProbe::new(f.fact.clone(), &kb)).collect();
    let mut stub = StubAnswerer::new(&vocab, 0.5);
    // known, unknown, and four potentially known
    stub = stub.knows(&vocab, &probes[0], 1.0).knows(&vocab, &probes[1], 0.0);
    let cfg = DetectionConfig::default();
    let spec = SampleSpec::multinomial(1.0, 1, 21);
    let build = build_atomic_prefs(&stub, &vocab, &kb, &facts, &cfg, &spec).unwrap();
    assert_eq!(build.audit.len(), 6);
    let pk = build
        .audit
        .iter()
        .filter(|a| a.result.status == KnowledgeStatus::PotentiallyKnown)
        .count();
    assert_eq!(build.prefs.len(), pk);
    assert!(pk <= 4 && pk >= 3);
    for p in &build.prefs {
        let t = p.fact.as_ref().unwrap();
        let gold = if kb.object(&t.entity, t.relation) == Some(t.object.as_str()) { TRUE } else { FALSE };
        assert_eq!(p.y_w, gold);
        assert_ne!(p.y_l, gold);
        assert!(p.r.unwrap() > 0.0 && p.r.unwrap() < 1.0);
        assert_eq!(p.origin, Some(0));
        let toks = p.to_tokens(&vocab).unwrap();
        assert_eq!(toks.chosen.len(), 2);
    }
    assert_eq!(build, build_atomic_prefs(&stub, &vocab, &kb, &facts, &cfg, &spec).unwrap());
}

#[test]
fn mix_keeps_every_record() {
    let (kb, _) = setup();
    let g: Vec<PreferenceRecord> = (0..5).map(|e| (&general(&kb, e, &[(Relation::Award, true)])).into()).collect();
    let mut a = g.clone();
    a.iter_mut().for_each(|r| r.source = PairSource::Atomic);
    let m = mix(&g, &a, 1);
    assert_eq!((m.general_count, m.atomic_count, m.records.len()), (5, 5, 10));
    assert_eq!(m.records.iter().filter(|r| r.source == PairSource::Atomic).count(), 5);
    assert_eq!(m, mix(&g, &a, 1));
    assert_eq!(mix(&g, &[], 1).records, g);
}

#[test]
fn random_qa_respects_exclusions_and_flags_shortfall() {
    let (kb, vocab) = setup();
    let entities: BTreeSet<String> = kb.entities()[..3].iter().cloned().collect();
    let exclude: HashSet<Triple> = entities
        .iter()
        .map(|e| kb.triple(e, Relation::BornYear).unwrap())
        .collect();
    let stub = StubAnswerer::new(&vocab, 0.5);
    let cfg = DetectionConfig::default();
    let spec = SampleSpec::multinomial(1.0, 1, 2);
    let b = build_random_qa_prefs(&stub, &vocab, &kb, &entities, &exclude, &cfg, &spec, 10).unwrap();
    assert_eq!(b.prefs.len(), 10);
    assert!(!b.shortfall);
    for p in &b.prefs {
        assert_eq!(p.source, PairSource::RandomQa);
        assert!(entities.contains(&p.entity));
        assert!(!exclude.contains(p.fact.as_ref().unwrap()));
    }
    let big = build_random_qa_prefs(&stub, &vocab, &kb, &entities, &exclude, &cfg, &spec, 1000).unwrap();
    assert!(big.shortfall);
    assert!(big.prefs.len() <= 3 * Relation::ALL.len());
    let sure = StubAnswerer::new(&vocab, 1.0);
    let none = build_random_qa_prefs(&sure, &vocab, &kb, &entities, &HashSet::new(), &cfg, &spec, 1).unwrap();
    // a model that always says true never disagrees with itself
    assert!(none.prefs.is_empty() && none.shortfall);
}
