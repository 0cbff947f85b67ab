use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use faktlab::factuality::factscore;
use faktlab::preflosses::{loss_and_grad, reference_logprobs, LossConfig, LossKind, TokenPair};
use faktlab::tinylm::{ModelConfig, PolicyModel, SampleSpec};
use faktlab::tokenshift::analyze;
use faktlab::world::{encode_prompt, gen_kb, grammar, world_vocab, Relation, Triple};

fn setup() -> (faktlab::world::KnowledgeBase, faktlab::vocab::Vocab, PolicyModel) {
    let kb = gen_kb(0, 100).unwrap();
    let vocab = world_vocab(&kb).unwrap();
    let model = PolicyModel::init(ModelConfig::desk(vocab.len(), 0)).unwrap();
    (kb, vocab, model)
}

fn mixed_bio(kb: &faktlab::world::KnowledgeBase, entity: &str) -> String {
    Relation::ALL
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let t = if i % 3 == 0 {
                Triple::new(entity, r, kb.wrong_objects(entity, r)[0])
            } else {
                kb.triple(entity, r).unwrap()
            };
            grammar::canonical(&t)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn bench_factscore(c: &mut Criterion) {
    let (kb, _, _) = setup();
    let text = mixed_bio(&kb, &kb.entities()[0]);
    c.bench_function("factscore_8_sentences", |b| b.iter(|| factscore(black_box(&text), &kb)));
}

fn bench_model(c: &mut Criterion) {
    let (kb, vocab, model) = setup();
    let e = kb.entities()[0].clone();
    let prompt = encode_prompt(&vocab, &grammar::bio_prompt(&e)).unwrap();
    let context: Vec<_> = prompt.iter().chain(&vocab.encode(&mixed_bio(&kb, &e)).unwrap()).copied().take(48).collect();
    c.bench_function("next_token_dist_48", |b| b.iter(|| model.next_token_dist(black_box(&context)).unwrap()));
    c.bench_function("position_dists_48", |b| b.iter(|| model.position_dists(black_box(&context)).unwrap()));

    let pairs: Vec<TokenPair> = kb.entities()[..8]
        .iter()
        .map(|e| TokenPair {
            prompt: encode_prompt(&vocab, &grammar::bio_prompt(e)).unwrap(),
            chosen: vocab.encode(&grammar::canonical(&kb.triple(e, Relation::Award).unwrap())).unwrap(),
            rejected: vocab
                .encode(&grammar::canonical(&Triple::new(e.as_str(), Relation::Award, kb.wrong_objects(e, Relation::Award)[0])))
                .unwrap(),
        })
        .collect();
    let reference = model.snapshot_frozen();
    for kind in [LossKind::Dpo, LossKind::Kto] {
        let cfg = LossConfig::new(kind);
        let refs = reference_logprobs(&reference, &pairs, &cfg).unwrap();
        c.bench_function(&format!("loss_and_grad_batch8_{kind}"), |b| {
            b.iter(|| loss_and_grad(&model, black_box(&pairs), &refs, &cfg).unwrap())
        });
    }

    let prompts: Vec<_> = kb.entities()[..4]
        .iter()
        .map(|e| encode_prompt(&vocab, &grammar::bio_prompt(e)).unwrap())
        .collect();
    c.bench_function("token_shift_4_prompts", |b| {
        b.iter_batched(
            || model.thawed(),
            |tuned| analyze(&tuned, &model, black_box(&prompts), &SampleSpec::greedy(24)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_factscore, bench_model);
criterion_main!(benches);
