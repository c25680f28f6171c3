// End to end on a few dozen toy crystals: synthesize, encode, train a
// couple of epochs, checkpoint, sample and score.

use std::collections::HashSet;

use materium::crystal::{density, fingerprint};
use materium::data::{
    encode_records, generated_record, parse_corpus, parse_generated, corpus_to_string, split_corpus, synth_toy_corpus,
    transform_condition, ToySpec,
};
use materium::elements::ElementTables;
use materium::evaluator::{evaluate_set, EvalItem, HhiWeighting, Targets};
use materium::model::{Checkpoint, Condition, ConditionSet, InferenceModel, ModelConfig, ModelParams};
use materium::sampler::{generate_batch, SampleConfig};
use materium::tokenizer::{LatticeRanges, OrderingStrategy, Tokenizer, Vocabulary};
use materium::trainer::{fit, Example, FitOutput, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SCHEMA: [Condition; 2] = [Condition::Density, Condition::Hhi];

// toy records also carry space group and formula, which this model has no slots for
fn restrict(examples: &mut [Example]) {
    for e in examples {
        e.conditions = e.conditions.restricted_to(&SCHEMA);
    }
}

fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_emb: 32,
        d_ffn_hidden: 64,
        condition_schema: SCHEMA.to_vec(),
        ..ModelConfig::tiny(vocab)
    }
}

#[test]
fn synth_train_sample_evaluate() {
    let tables = ElementTables::bundled();
    let tok = Tokenizer::new(Vocabulary::build(&tables).unwrap(), LatticeRanges::default());

    let records = synth_toy_corpus(&ToySpec::new(48, 3), &tables);
    assert_eq!(records.len(), 48);
    let reparsed = parse_corpus(&corpus_to_string(&records).unwrap(), &tables).unwrap();
    assert_eq!(reparsed, records);

    let (mut examples, stats) = encode_records(&records, &tok, OrderingStrategy::LowFirst, &tables).unwrap();
    restrict(&mut examples);
    assert_eq!(stats.n_records, 48);
    let (train, val) = split_corpus(&examples, 0.75, 3).unwrap();
    assert_eq!((train.len(), val.len()), (36, 12));

    let dir = tempfile::tempdir().unwrap();
    let mcfg = small_config(tok.vocab.len());
    let cfg = TrainConfig { batch_size: 12, epochs: 2, seed: 3, ..TrainConfig::default() };
    let mut state = TrainState::new(ModelParams::init(&mcfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap(), &cfg);
    let hash = tok.vocab.hash();
    let out = FitOutput { dir: dir.path(), vocab_hash: &hash };
    let hist = fit(&mut state, &train, &val, &cfg, Some(out), &mut |_| {}).unwrap();
    assert_eq!(hist.len(), 2);
    assert!(hist.iter().all(|m| m.train_loss.is_finite() && m.val_loss.is_some_and(f64::is_finite)));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = Checkpoint::load(&dir.path().join("last.ckpt"), Some(&hash)).unwrap();
    assert_eq!(ckpt.params, state.params);
    assert!(Checkpoint::load(&dir.path().join("last.ckpt"), Some("not-this-vocab")).is_err());

    let model = InferenceModel::new(&ckpt.params).unwrap();
    let cs = ConditionSet::new().with(Condition::Density, transform_condition(Condition::Density, 4.0).unwrap()).unwrap();
    let scfg = SampleConfig { n_samples: 16, max_atoms: 8, seed: 11, ..SampleConfig::default() };
    let (samples, gstats) = generate_batch(&model, &tok, &cs, &scfg).unwrap();
    assert_eq!(gstats.n_samples, 16);
    // constrained decoding always yields a decodable crystal
    assert_eq!(gstats.n_valid, 16);
    for s in &samples {
        let c = s.crystal.as_ref().unwrap();
        assert!(c.num_sites() <= 8);
        assert!(density(c, &tables).unwrap() > 0.0);
    }

    let targets = Targets { density: Some(4.0), ..Targets::default() };
    let jsonl: String = samples
        .iter()
        .map(|s| format!("{}\n", generated_record(&format!("g{}", s.index), s, &targets, &tables).unwrap()))
        .collect();
    let items: Vec<EvalItem> = parse_generated(&jsonl, &tables).unwrap();
    assert_eq!(items.len(), 16);

    let training: HashSet<String> =
        records.iter().map(|r| fingerprint(&r.to_crystal(&tables).unwrap()).unwrap()).collect();
    let report = evaluate_set(&items, Some(&training), &tables, HhiWeighting::AtomFraction, 10).unwrap();
    assert_eq!(report.n_total, 16);
    assert_eq!(report.n_grammar_valid, 16);
    assert_eq!(report.frac_valid, Some(1.0));
    assert!(report.frac_unique.is_some_and(|u| u > 0.0 && u <= 1.0));
    assert!(report.frac_novel.is_some());
    assert!(report.to_csv().starts_with("metric,value\n"));
}

#[test]
fn resumed_fit_matches_uninterrupted() {
    let tables = ElementTables::bundled();
    let tok = Tokenizer::new(Vocabulary::build(&tables).unwrap(), LatticeRanges::default());
    let records = synth_toy_corpus(&ToySpec::new(24, 5), &tables);
    let (mut examples, _) = encode_records(&records, &tok, OrderingStrategy::parse("random:5").unwrap(), &tables).unwrap();
    restrict(&mut examples);
    let (train, val) = split_corpus(&examples, 0.75, 5).unwrap();
    let mcfg = small_config(tok.vocab.len());
    let init = ModelParams::init(&mcfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let hash = tok.vocab.hash();

    let full_cfg = TrainConfig { batch_size: 8, epochs: 3, seed: 5, ..TrainConfig::default() };
    let mut full = TrainState::new(init.clone(), &full_cfg);
    fit(&mut full, &train, &val, &full_cfg, None, &mut |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first_cfg = TrainConfig { epochs: 1, ..full_cfg.clone() };
    let mut part = TrainState::new(init, &first_cfg);
    let out = FitOutput { dir: dir.path(), vocab_hash: &hash };
    fit(&mut part, &train, &val, &first_cfg, Some(out), &mut |_| {}).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("last.ckpt"), Some(&hash)).unwrap();
    let mut resumed = TrainState::from_checkpoint(ckpt, &full_cfg).unwrap();
    assert_eq!(resumed.epoch, 1);
    fit(&mut resumed, &train, &val, &full_cfg, None, &mut |_| {}).unwrap();

    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.step, full.step);
}
