use super::*;
use crate::tinylm::{Generation, Generator, ModelConfig, SampleSpec};
use crate::world::{gen_kb, world_vocab, FalsePremiseQuery, Relation, ShortQaQuery};
use proptest::prelude::*;

/// Answers each prompt with `respond(decoded prompt)`.
struct Scripted<'a, F: Fn(&str) -> String + Sync> {
    vocab: &'a Vocab,
    respond: F,
}

impl<F: Fn(&str) -> String + Sync> Generator for Scripted<'_, F> {
    fn generate(&self, prompt: &[TokenId], _spec: &SampleSpec) -> tinylm::Result<Generation> {
        // drop the leading <bos>
        let text = self.vocab.decode(&prompt[1..]).unwrap();
        Ok(Generation {
            tokens: self.vocab.encode(&(self.respond)(&text)).unwrap(),
            finished: true,
            truncated: false,
        })
    }
}

fn lf(fs: f64) -> LongFormMetrics {
    LongFormMetrics {
        fs,
        nc: 2.0,
        ne: 1.0,
        empty: 0,
    }
}

#[test]
fn avg_is_the_mean_of_four_scores() {
    let r = EvalReport::new(lf(0.8), lf(0.6), 0.5, 0.3);
    assert!((r.avg - 0.55).abs() < 1e-15);
    let r = EvalReport::new(lf(1.0), lf(1.0), 1.0, 1.0);
    assert_eq!(r.avg, 1.0);
}

proptest! {
    #[test]
    fn avg_identity(a in 0.0..1.0f64, b in 0.0..1.0f64, c in 0.0..1.0f64, d in 0.0..1.0f64) {
        let r = EvalReport::new(lf(a), lf(b), c, d);
        prop_assert!((r.avg - (a + b + c + d) / 4.0).abs() < 1e-15);
        prop_assert_eq!(r.values()[8], r.avg);
    }
}

fn world_bits() -> (KnowledgeBase, Vocab) {
    let kb = gen_kb(2, 8).unwrap();
    let vocab = world_vocab(&kb).unwrap();
    (kb, vocab)
}

#[test]
fn long_form_truthful_and_mixed() {
    let (kb, vocab) = world_bits();
    let e0 = kb.entities()[0].clone();
    let e1 = kb.entities()[1].clone();
    let truth = |e: &str, r| grammar::canonical(&kb.triple(e, r).unwrap());
    let lie = |e: &str, r| grammar::canonical(&crate::world::Triple::new(e, r, kb.wrong_objects(e, r)[0]));
    let g = Scripted {
        vocab: &vocab,
        respond: |p: &str| {
            if p.contains(&e0) {
                truth(&e0, Relation::Award)
            } else {
                format!("{} {}", truth(&e1, Relation::Field), lie(&e1, Relation::Team))
            }
        },
    };
    let spec = SampleSpec::greedy(30);
    let only_true = eval_long_form(&g, &vocab, &[grammar::bio_prompt(&e0)], &kb, &spec).unwrap();
    assert_eq!((only_true.fs, only_true.nc, only_true.ne), (1.0, 1.0, 0.0));
    let both = eval_long_form(&g, &vocab, &[grammar::bio_prompt(&e0), grammar::bio_prompt(&e1)], &kb, &spec).unwrap();
    assert!((both.fs - 0.75).abs() < 1e-12);
    let silent = Scripted {
        vocab: &vocab,
        respond: |_: &str| String::new(),
    };
    let r = eval_long_form(&silent, &vocab, &[grammar::bio_prompt(&e0)], &kb, &spec).unwrap();
    assert_eq!((r.fs, r.empty), (0.0, 1));
}

#[test]
fn false_premise_marker() {
    let (kb, vocab) = world_bits();
    let e = kb.entities()[0].clone();
    let r = Relation::BornCity;
    let wrong = kb.wrong_objects(&e, r)[0].to_string();
    let q = FalsePremiseQuery {
        entity: e.clone(),
        relation: r,
        premise_object: wrong.clone(),
        gold_object: kb.object(&e, r).unwrap().to_string(),
        premise_false: true,
        prompt: grammar::premise_question(&crate::world::Triple::new(e.as_str(), r, wrong)),
    };
    let spec = SampleSpec::greedy(30);
    let always = Scripted {
        vocab: &vocab,
        respond: |_: &str| format!("{} .", crate::vocab::PREMISE_FALSE),
    };
    assert_eq!(eval_false_premise(&always, &vocab, &[q.clone(), q.clone()], &spec).unwrap(), 1.0);
    let never = Scripted {
        vocab: &vocab,
        respond: |_: &str| ".".to_string(),
    };
    assert_eq!(eval_false_premise(&never, &vocab, &[q], &spec).unwrap(), 0.0);
}

#[test]
fn short_answer_matching() {
    assert!(short_answer_correct("paris", "paris"));
    assert!(short_answer_correct("Paris.", "paris"));
    assert!(short_answer_correct("  it was   PARIS , of course", "Paris"));
    assert!(!short_answer_correct("lyon .", "paris"));
    assert!(!short_answer_correct("parisian", "paris"));
    assert!(!short_answer_correct("anything", ""));
    assert_eq!(normalize_answer(" A.b  C! "), "a b c");
}

#[test]
fn short_qa_accuracy() {
    let (kb, vocab) = world_bits();
    let qs: Vec<ShortQaQuery> = kb.entities()[..4]
        .iter()
        .map(|e| ShortQaQuery {
            entity: e.clone(),
            relation: Relation::Occupation,
            gold: kb.object(e, Relation::Occupation).unwrap().to_string(),
            prompt: grammar::question(e, Relation::Occupation),
        })
        .collect();
    let first = kb.entities()[0].clone();
    let g = Scripted {
        vocab: &vocab,
        respond: |p: &str| {
            let e = kb.entities().iter().find(|e| p.contains(e.as_str())).unwrap();
            if *e == first {
                format!("{} .", kb.wrong_objects(e, Relation::Occupation)[0])
            } else {
                format!("{} .", kb.object(e, Relation::Occupation).unwrap())
            }
        },
    };
    assert_eq!(eval_short_qa(&g, &vocab, &qs, &SampleSpec::greedy(8)).unwrap(), 0.75);
}

#[test]
fn evaluation_does_not_mutate_the_model() {
    let cfg = tiny_config(3);
    let world = build_world(&cfg).unwrap();
    let m = PolicyModel::init(cfg.model_config(world.vocab.len())).unwrap();
    let before = m.params_digest();
    let r = evaluate(&m, &world.vocab, &world.kb, &world.queries, &cfg.eval_spec()).unwrap();
    assert_eq!(m.params_digest(), before);
    for v in [r.bio.fs, r.fava_like.fs, r.fp_acc, r.kqa_acc, r.avg] {
        assert!((0.0..=1.0).contains(&v));
    }
}

fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_seed(seed);
    cfg.world.num_entities = 10;
    cfg.world.preference_entities = 6;
    cfg.world.sentences_per_entity = 8;
    cfg.queries.open_items = 6;
    cfg.queries.fp_items = 6;
    cfg.queries.kqa_items = 6;
    cfg.model = ModelSection {
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_dim: 8,
        context_len: 40,
    };
    cfg.eval.max_len = 12;
    cfg.prefs.max_len = 12;
    cfg
}

#[test]
fn config_toml_round_trip_and_strictness() {
    let cfg = ExperimentConfig::with_seed(9);
    let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let minimal = ExperimentConfig::from_toml("version = 1\nseed = 4\n").unwrap();
    assert_eq!(minimal, ExperimentConfig::with_seed(4));
    for bad in [
        "version = 1\nseed = 0\nbogus = 3\n",
        "version = 1\nseed = 0\n[train]\nlr = 0.1\n",
        "version = 2\nseed = 0\n",
        "version = 1\nseed = 0\n[world]\npreference_entities = 100\n",
        "version = 1\nseed = 0\n[experiment]\nlosses = [\"ppo\"]\n",
    ] {
        let err = ExperimentConfig::from_toml(bad).unwrap_err();
        assert!(err.is_config(), "{bad}: {err}");
    }
}

#[test]
fn stage_seeds_are_derived_and_distinct() {
    let cfg = ExperimentConfig::with_seed(1);
    let seeds = [
        cfg.corpus_spec().seed,
        cfg.model_config(10).seed,
        cfg.pretrain_config().seed,
        cfg.train_config().seed,
        cfg.prefs_spec().seed,
    ];
    let distinct: BTreeSet<_> = seeds.iter().collect();
    assert_eq!(distinct.len(), seeds.len());
    assert_ne!(ExperimentConfig::with_seed(2).train_config().seed, cfg.train_config().seed);
    assert_eq!(ModelConfig { seed: 0, ..cfg.model_config(10) }, ModelConfig { seed: 0, ..ModelConfig::desk(10, 0) });
}

#[test]
fn report_csv_round_trip_with_deltas() {
    let rows = vec![
        ReportRow::vanilla(EvalReport::new(lf(0.5), lf(0.4), 0.2, 0.3)),
        ReportRow {
            arm: Arm::Atom.name().into(),
            loss: "dpo".into(),
            report: EvalReport::new(lf(0.6), lf(0.4), 0.25, 0.35),
        },
    ];
    let mut buf = Vec::new();
    write_report_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("arm,loss,bio_fs,bio_nc,bio_ne,fava_fs"));
    assert!(header.contains("delta_avg"));
    let atom = text.lines().nth(2).unwrap();
    assert!(atom.contains(",0.100000,"), "{atom}");
    let back = read_report_csv(&buf[..]).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in back.iter().zip(&rows) {
        assert_eq!((&a.arm, &a.loss), (&b.arm, &b.loss));
        assert!((a.report.avg - b.report.avg).abs() < 1e-6);
    }
    let table = render_table(&rows);
    assert!(table.contains("w/atom") && table.contains("(+10.00)"));
}

#[test]
fn arm_datasets_mix_sources() {
    let gen = |i: usize, source| PreferenceRecord {
        source,
        x: format!("x{i}"),
        y_w: "a".into(),
        y_l: "b".into(),
        f_w: 1.0,
        f_l: 0.0,
        q: 1.0,
        entity: "E".into(),
        fact: None,
        r: None,
        origin: None,
    };
    let cfg = ExperimentConfig::default();
    let g: Vec<_> = (0..5).map(|i| gen(i, PairSource::General)).collect();
    let a: Vec<_> = (0..3).map(|i| gen(i, PairSource::Atomic)).collect();
    assert_eq!(arm_dataset(&cfg, Arm::General, &g, &a).records, g);
    let mixed = arm_dataset(&cfg, Arm::Atom, &g, &a);
    assert_eq!(source_counts(&mixed.records), [5, 3, 0]);
}
