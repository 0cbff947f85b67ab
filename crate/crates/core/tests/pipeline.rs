//! End-to-end pipeline on a reduced world through the public API.

use std::collections::BTreeSet;

use faktlab::apeft::{extract_pref_facts, KnowledgeStatus, PairSource};
use faktlab::factuality::factscore;
use faktlab::harness::{
    arm_dataset, build_atomic, build_prefs, build_random, build_world, evaluate, general_records, pretrain_base,
    run_experiment, source_counts, token_shift, tune_arm, Arm, ExperimentConfig, ModelSection, RunDir, RunManifest,
    MANIFEST_FILE,
};
use faktlab::preflosses::LossKind;

fn reduced(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_seed(seed);
    cfg.world.num_entities = 16;
    cfg.world.preference_entities = 10;
    cfg.world.sentences_per_entity = 8;
    cfg.queries.open_items = 8;
    cfg.queries.fp_items = 8;
    cfg.queries.kqa_items = 8;
    cfg.model = ModelSection {
        embed_dim: 24,
        num_layers: 1,
        num_heads: 2,
        mlp_dim: 48,
        context_len: 64,
    };
    cfg.pretrain.epochs = 150;
    cfg.pretrain.learning_rate = 0.01;
    cfg.prefs.max_len = 24;
    cfg.eval.max_len = 24;
    cfg.detection.k = 6;
    cfg.experiment.losses = vec![LossKind::Dpo];
    cfg
}

#[test]
fn stages_compose_and_respect_their_contracts() {
    let cfg = reduced(21);
    let world = build_world(&cfg).unwrap();
    assert_eq!(world.preference_entities.len(), 10);
    assert!(world.held_out_entities().is_disjoint(&world.preference_entities));
    assert!(world.queries.id_bio.iter().all(|q| world.held_out_entities().contains(&q.entity)));

    let (base, log) = pretrain_base(&cfg, &world).unwrap();
    assert!(log.last().unwrap().loss < log.first().unwrap().loss);

    let prefs = build_prefs(&cfg, &world, &base).unwrap();
    assert!(!prefs.pairs.is_empty());
    for p in &prefs.pairs {
        assert!(world.preference_entities.contains(&p.entity));
        assert!(p.f_w > p.f_l);
        assert_eq!(factscore(&p.y_w, &world.kb).fs, p.f_w);
    }
    let general = general_records(&prefs);

    let atomic = build_atomic(&cfg, &world, &base, &prefs).unwrap();
    assert_eq!(atomic.audit.len(), extract_pref_facts(&prefs.pairs).len());
    let pk = atomic
        .audit
        .iter()
        .filter(|a| a.result.status == KnowledgeStatus::PotentiallyKnown)
        .count();
    assert_eq!(atomic.prefs.len(), pk);
    assert!(atomic.prefs.iter().all(|r| r.source == PairSource::Atomic && r.y_w != r.y_l));

    let random = build_random(&cfg, &world, &base, &prefs, atomic.prefs.len()).unwrap();
    assert!(random.prefs.len() <= atomic.prefs.len());
    let stated: BTreeSet<_> = extract_pref_facts(&prefs.pairs).into_iter().map(|f| f.triple).collect();
    assert!(random.prefs.iter().all(|r| !stated.contains(r.fact.as_ref().unwrap())));

    let mixed = arm_dataset(&cfg, Arm::Atom, &general, &atomic.prefs);
    assert_eq!(source_counts(&mixed.records), [general.len(), atomic.prefs.len(), 0]);

    let tuned = tune_arm(&cfg, &world.vocab, &base, &mixed.records, LossKind::Dpo).unwrap();
    assert_ne!(tuned.model.params_digest(), base.params_digest());
    let report = evaluate(&tuned.model, &world.vocab, &world.kb, &world.queries, &cfg.eval_spec()).unwrap();
    assert!((0.0..=1.0).contains(&report.avg));

    let shift = token_shift(&cfg, &world, &base, &tuned.model).unwrap();
    assert!(!shift.id_records.is_empty() && !shift.ood_records.is_empty());
    let same = token_shift(&cfg, &world, &base, &base).unwrap();
    assert_eq!(same.id_histogram.shifted_rate, 0.0);
    assert!(same.diagnosis.is_none());
}

#[test]
fn run_directory_round_trips_every_artifact() {
    let cfg = reduced(22);
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, tmp.path()).unwrap();
    let manifest = RunManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest, out.manifest);
    assert_eq!(manifest.config, cfg);
    // vanilla plus one row per (arm, loss)
    assert_eq!(out.rows.len(), 1 + cfg.experiment.arms.len() * cfg.experiment.losses.len());

    let dir = RunDir::create(tmp.path()).unwrap();
    let world = dir.load_world().unwrap();
    assert_eq!(world, build_world(&cfg).unwrap());
    let base = dir.load_base().unwrap();
    assert_eq!(Some(&base.params_digest()), manifest.model_digests.get("base"));
    assert_eq!(dir.load_atomic().unwrap().len(), manifest.dataset_sizes.atomic);
    assert_eq!(dir.load_prefs().unwrap().pairs.len(), manifest.dataset_sizes.general);
    assert_eq!(dir.digests().unwrap(), manifest.artifacts);
}
