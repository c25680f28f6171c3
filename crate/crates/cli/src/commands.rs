use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use materium::crystal::{fingerprint, reduced_formula, Formula};
use materium::data::{
    corpus_to_string, encode_records, generated_record, load_corpus, parse_generated, parse_token_corpus,
    split_corpus, synth_toy_corpus, transform_condition, TokenRecord, ToySpec,
};
use materium::elements::ElementTables;
use materium::evaluator::{evaluate_set, HhiWeighting, Targets, TimingStats};
use materium::fsutil::atomic_write;
use materium::model::{prefix_slots, Checkpoint, Condition, ConditionSet, InferenceModel, ModelConfig, ModelParams};
use materium::sampler::{generate_batch, GenerationStats, SampleConfig};
use materium::tokenizer::{LatticeRanges, OrderingStrategy, TokenClass, TokenId, Tokenizer, Vocabulary};
use materium::trainer::{fit, AdamWConfig, Example, FitOutput, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::resolve;
use crate::{Classify, CmdResult, EvaluateFlags, GenerateFlags, InspectFlags, SynthFlags, TokenizeFlags, TrainFlags};

fn echo(command: &str, config: &impl Serialize) {
    println!("{}", json!({ "command": command, "config": config }));
}

fn required<'a, T>(v: &'a Option<T>, name: &str) -> CmdResult<&'a T> {
    v.as_ref().ok_or_else(|| anyhow!("--{name} is required")).usage()
}

fn load_tables(path: &Option<PathBuf>) -> CmdResult<ElementTables> {
    match path {
        Some(p) => ElementTables::load(p).with_context(|| format!("loading element table {}", p.display())).data(),
        None => Ok(ElementTables::bundled()),
    }
}

fn tokenizer(tables: &ElementTables) -> CmdResult<Tokenizer> {
    Ok(Tokenizer::new(Vocabulary::build(tables).data()?, LatticeRanges::default()))
}

fn parse_ordering(s: &str) -> CmdResult<OrderingStrategy> {
    OrderingStrategy::parse(s).ok_or_else(|| anyhow!("unknown ordering {s:?}; use low, high, xyz or random:SEED")).usage()
}

fn write(path: &Path, text: &str) -> CmdResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
    }
    atomic_write(path, text.as_bytes()).with_context(|| format!("writing {}", path.display())).runtime()
}

fn read(path: &Path) -> CmdResult<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).data()
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TokenizeRun {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    stats: Option<PathBuf>,
    ordering: String,
    tables: Option<PathBuf>,
}

impl Default for TokenizeRun {
    fn default() -> Self {
        Self { corpus: None, out: None, stats: None, ordering: "low".into(), tables: None }
    }
}

pub fn tokenize(file: Option<&Path>, flags: TokenizeFlags) -> CmdResult<()> {
    let run: TokenizeRun = resolve("tokenize", file, &flags).usage()?;
    echo("tokenize", &run);
    let corpus = required(&run.corpus, "corpus")?;
    let ordering = parse_ordering(&run.ordering)?;
    let tables = load_tables(&run.tables)?;
    let tok = tokenizer(&tables)?;
    let records = load_corpus(corpus, &tables).with_context(|| corpus.display().to_string()).data()?;
    let (examples, stats) =
        encode_records(&records, &tok, ordering, &tables).with_context(|| corpus.display().to_string()).data()?;
    if let Some(out) = &run.out {
        let mut text = String::new();
        for (r, e) in records.iter().zip(examples) {
            text.push_str(&serde_json::to_string(&TokenRecord { id: r.id.clone(), example: e }).runtime()?);
            text.push('\n');
        }
        write(out, &text)?;
    }
    let stats_json = serde_json::to_string_pretty(&stats).runtime()?;
    if let Some(p) = &run.stats {
        write(p, &stats_json)?;
    }
    println!("{stats_json}");
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRun {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    tables: Option<PathBuf>,
    preset: String,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    d_emb: Option<usize>,
    d_ffn_hidden: Option<usize>,
    dropout_rate: Option<f64>,
    max_seq_len: Option<usize>,
    conditions: Option<Vec<Condition>>,
    batch_size: usize,
    lr: f64,
    lr_factor: f64,
    patience: usize,
    epochs: usize,
    cond_dropout: f64,
    weight_decay: f64,
    grad_clip: f64,
    seed: u64,
    train_frac: f64,
    ordering: String,
    resume: bool,
}

impl Default for TrainRun {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            corpus: None,
            out: None,
            tables: None,
            preset: "tiny".into(),
            n_layers: None,
            n_heads: None,
            d_emb: None,
            d_ffn_hidden: None,
            dropout_rate: None,
            max_seq_len: None,
            conditions: None,
            batch_size: t.batch_size,
            lr: t.lr_init,
            lr_factor: t.lr_factor,
            patience: t.plateau_patience,
            epochs: t.epochs,
            cond_dropout: t.cond_dropout_p,
            weight_decay: t.adamw.weight_decay,
            grad_clip: t.grad_clip_norm,
            seed: t.seed,
            train_frac: 0.9,
            ordering: "low".into(),
            resume: false,
        }
    }
}

impl TrainRun {
    fn model_config(&self, vocab_size: usize) -> CmdResult<ModelConfig> {
        let mut m = match self.preset.as_str() {
            "tiny" => ModelConfig::tiny(vocab_size),
            "paper" => ModelConfig::paper(vocab_size),
            other => return Err(anyhow!("unknown preset {other:?}; use tiny or paper")).usage(),
        };
        m.n_layers = self.n_layers.unwrap_or(m.n_layers);
        m.n_heads = self.n_heads.unwrap_or(m.n_heads);
        m.d_emb = self.d_emb.unwrap_or(m.d_emb);
        m.d_ffn_hidden = self.d_ffn_hidden.unwrap_or(m.d_ffn_hidden);
        m.dropout_rate = self.dropout_rate.unwrap_or(m.dropout_rate);
        m.max_seq_len = self.max_seq_len.unwrap_or(m.max_seq_len);
        if let Some(c) = &self.conditions {
            m.condition_schema = c.clone();
        }
        m.validate().usage()?;
        Ok(m)
    }

    fn train_config(&self) -> CmdResult<TrainConfig> {
        let t = TrainConfig {
            batch_size: self.batch_size,
            lr_init: self.lr,
            lr_factor: self.lr_factor,
            plateau_patience: self.patience,
            adamw: AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() },
            epochs: self.epochs,
            cond_dropout_p: self.cond_dropout,
            seed: self.seed,
            grad_clip_norm: self.grad_clip,
        };
        t.validate().usage()?;
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(anyhow!("train_frac must lie strictly between 0 and 1")).usage();
        }
        Ok(t)
    }
}

/// Reads either a token corpus or a crystal corpus, telling them apart by
/// the `tokens` field of the first record.
fn load_examples(path: &Path, tables: &ElementTables, tok: &Tokenizer, ordering: OrderingStrategy) -> CmdResult<Vec<Example>> {
    let text = read(path)?;
    let first: Option<serde_json::Value> =
        text.lines().find(|l| !l.trim().is_empty()).and_then(|l| serde_json::from_str(l).ok());
    let ctx = || path.display().to_string();
    if first.as_ref().is_some_and(|v| v.get("tokens").is_some()) {
        let recs = parse_token_corpus(&text).with_context(ctx).data()?;
        Ok(recs.into_iter().map(|r| r.example).collect())
    } else {
        let recs = materium::data::parse_corpus(&text, tables).with_context(ctx).data()?;
        Ok(encode_records(&recs, tok, ordering, tables).with_context(ctx).data()?.0)
    }
}

pub fn train(file: Option<&Path>, flags: TrainFlags) -> CmdResult<()> {
    let run: TrainRun = resolve("train", file, &flags).usage()?;
    let tables = load_tables(&run.tables)?;
    let tok = tokenizer(&tables)?;
    let model_cfg = run.model_config(tok.vocab.len())?;
    let train_cfg = run.train_config()?;
    echo("train", &json!({ "run": &run, "model": &model_cfg, "train": &train_cfg }));
    let corpus = required(&run.corpus, "corpus")?;
    let out = required(&run.out, "out")?;
    let ordering = parse_ordering(&run.ordering)?;

    let hash = tok.vocab.hash();
    let mut state = if run.resume {
        let ckpt = Checkpoint::load(&out.join("last.ckpt"), Some(&hash)).data()?;
        TrainState::from_checkpoint(ckpt, &train_cfg).data()?
    } else {
        let params = ModelParams::init(&model_cfg, &mut ChaCha8Rng::seed_from_u64(run.seed)).usage()?;
        TrainState::new(params, &train_cfg)
    };
    let cfg = &state.params.config;
    let schema = cfg.condition_schema.clone();
    let mut examples = load_examples(corpus, &tables, &tok, ordering)?;
    for (i, e) in examples.iter_mut().enumerate() {
        e.conditions = e.conditions.restricted_to(&schema);
        let prefix = prefix_slots(&schema, &e.conditions, cfg.num_elements, cfg.stoich_table_size)
            .with_context(|| format!("record {i}"))
            .data()?
            .len();
        if prefix + e.tokens.len() > cfg.max_seq_len {
            return Err(anyhow!("record {i}: {} tokens exceed max_seq_len {}", prefix + e.tokens.len(), cfg.max_seq_len))
                .data();
        }
        if let Some(&t) = e.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(anyhow!("record {i}: token {t} outside the vocabulary")).data();
        }
    }
    let (train_set, val_set) = split_corpus(&examples, run.train_frac, run.seed).data()?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).runtime()?;
    write(&out.join("vocab.txt"), &tok.vocab.to_text())?;
    write(&out.join("config.json"), &serde_json::to_string_pretty(&json!({ "run": &run, "model": cfg, "train": &train_cfg })).runtime()?)?;
    let history = fit(
        &mut state,
        &train_set,
        &val_set,
        &train_cfg,
        Some(FitOutput { dir: out, vocab_hash: &hash }),
        &mut |m| println!("{}", serde_json::to_string(m).expect("metrics serialize")),
    )
    .runtime()?;
    println!(
        "{}",
        json!({
            "epochs_run": history.len(),
            "epoch": state.epoch,
            "steps": state.step,
            "train_examples": train_set.len(),
            "val_examples": val_set.len(),
            "checkpoint": out.join("last.ckpt"),
        })
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateRun {
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    tables: Option<PathBuf>,
    n: usize,
    temperature: f64,
    class_temperatures: BTreeMap<TokenClass, f64>,
    max_atoms: usize,
    max_new_tokens: usize,
    constrain: bool,
    seed: u64,
    workers: usize,
    band_gap: Option<f64>,
    magnetic_density: Option<f64>,
    density: Option<f64>,
    space_group: Option<u32>,
    hhi: Option<f64>,
    formula: Option<String>,
}

impl Default for GenerateRun {
    fn default() -> Self {
        let s = SampleConfig::default();
        Self {
            checkpoint: None,
            out: None,
            tables: None,
            n: 1,
            temperature: s.temperature,
            class_temperatures: BTreeMap::new(),
            max_atoms: s.max_atoms,
            max_new_tokens: s.max_new_tokens,
            constrain: s.constrain_grammar,
            seed: s.seed,
            workers: s.workers,
            band_gap: None,
            magnetic_density: None,
            density: None,
            space_group: None,
            hhi: None,
            formula: None,
        }
    }
}

pub fn generate(file: Option<&Path>, mut flags: GenerateFlags) -> CmdResult<()> {
    if flags.unconstrained {
        flags.constrain = Some(false);
    }
    let run: GenerateRun = resolve("generate", file, &flags).usage()?;
    echo("generate", &run);
    let ckpt_path = required(&run.checkpoint, "checkpoint")?;
    let out = required(&run.out, "out")?;
    let sample_cfg = SampleConfig {
        temperature: run.temperature,
        class_temperatures: run.class_temperatures.clone(),
        max_new_tokens: run.max_new_tokens,
        max_atoms: run.max_atoms,
        constrain_grammar: run.constrain,
        seed: run.seed,
        n_samples: run.n,
        workers: run.workers,
    };
    sample_cfg.validate().usage()?;
    let tables = load_tables(&run.tables)?;
    let tok = tokenizer(&tables)?;
    let ckpt = Checkpoint::load(ckpt_path, Some(&tok.vocab.hash()))
        .with_context(|| ckpt_path.display().to_string())
        .data()?;
    let cfg = &ckpt.params.config;
    let schema = &cfg.condition_schema;

    let mut cs = ConditionSet::new();
    let scalars = [
        (Condition::BandGap, run.band_gap),
        (Condition::MagneticDensity, run.magnetic_density),
        (Condition::Density, run.density),
        (Condition::SpaceGroup, run.space_group.map(f64::from)),
        (Condition::Hhi, run.hhi),
    ];
    let schema_names = || schema.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ");
    for (c, v) in scalars {
        if let Some(v) = v {
            if !schema.contains(&c) {
                return Err(anyhow!("condition {c} is not in the checkpoint schema [{}]", schema_names())).usage();
            }
            cs.set(c, transform_condition(c, v).usage()?).usage()?;
        }
    }
    if let Some(f) = &run.formula {
        if !schema.contains(&Condition::Formula) {
            return Err(anyhow!("condition formula is not in the checkpoint schema [{}]", schema_names())).usage();
        }
        let formula = Formula::parse(f, &tables).with_context(|| format!("formula {f:?}")).usage()?;
        cs.set_formula(&formula.pairs()).usage()?;
    }
    prefix_slots(schema, &cs, cfg.num_elements, cfg.stoich_table_size).usage()?;

    let model = InferenceModel::new(&ckpt.params).runtime()?;
    let (samples, stats) = generate_batch(&model, &tok, &cs, &sample_cfg).runtime()?;
    let targets = Targets {
        band_gap: run.band_gap,
        magnetic_density: run.magnetic_density,
        density: run.density,
        space_group: run.space_group,
        hhi: run.hhi,
        formula: run.formula.clone(),
    };
    let mut text = String::new();
    for s in &samples {
        let id = format!("gen-{}-{}", run.seed, s.index);
        text.push_str(&generated_record(&id, s, &targets, &tables).runtime()?.to_string());
        text.push('\n');
    }
    write(out, &text)?;
    let stats_json = serde_json::to_string(&stats).runtime()?;
    write(&out.with_extension("stats.json"), &stats_json)?;
    println!("{stats_json}");
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateRun {
    generated: Option<PathBuf>,
    out: Option<PathBuf>,
    tables: Option<PathBuf>,
    training: Option<PathBuf>,
    fingerprints: Option<PathBuf>,
    hhi_weighting: HhiWeighting,
    stats: Option<PathBuf>,
    bins: usize,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        Self {
            generated: None,
            out: None,
            tables: None,
            training: None,
            fingerprints: None,
            hhi_weighting: HhiWeighting::default(),
            stats: None,
            bins: 20,
        }
    }
}

pub fn evaluate(file: Option<&Path>, flags: EvaluateFlags) -> CmdResult<()> {
    let run: EvaluateRun = resolve("evaluate", file, &flags).usage()?;
    echo("evaluate", &run);
    let generated = required(&run.generated, "generated")?;
    let out = required(&run.out, "out")?;
    let tables = load_tables(&run.tables)?;
    let items = parse_generated(&read(generated)?, &tables).with_context(|| generated.display().to_string()).data()?;

    let mut training: Option<HashSet<String>> = None;
    if let Some(p) = &run.training {
        let recs = load_corpus(p, &tables).with_context(|| p.display().to_string()).data()?;
        let mut set = HashSet::new();
        for r in &recs {
            set.insert(fingerprint(&r.to_crystal(&tables).data()?).data()?);
        }
        training = Some(set);
    }
    if let Some(p) = &run.fingerprints {
        let set = training.get_or_insert_with(HashSet::new);
        set.extend(read(p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }

    let mut report = evaluate_set(&items, training.as_ref(), &tables, run.hhi_weighting, run.bins.max(1)).data()?;
    let stats_path = run.stats.clone().unwrap_or_else(|| generated.with_extension("stats.json"));
    if stats_path.exists() {
        let stats: GenerationStats = serde_json::from_str(&read(&stats_path)?)
            .with_context(|| stats_path.display().to_string())
            .data()?;
        report.timing = Some(TimingStats { wall_time_s: stats.wall_time_s, seconds_per_sample: stats.seconds_per_sample });
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).runtime()?;
    let report_json = report.to_json();
    write(&out.join("report.json"), &report_json)?;
    write(&out.join("report.csv"), &report.to_csv())?;
    if let Some(h) = report.histogram_csv() {
        write(&out.join("hhi_histogram.csv"), &h)?;
    }
    println!("{report_json}");
    Ok(())
}

pub fn inspect(_file: Option<&Path>, flags: InspectFlags) -> CmdResult<()> {
    echo("inspect", &flags);
    let tables = load_tables(&flags.tables)?;
    let tok = tokenizer(&tables)?;
    let mut shown = false;
    if let Some(p) = &flags.corpus {
        let recs = load_corpus(p, &tables).with_context(|| p.display().to_string()).data()?;
        let rec = match (&flags.id, flags.index) {
            (Some(id), _) => recs.iter().find(|r| &r.id == id).ok_or_else(|| anyhow!("no record with id {id:?}")).data()?,
            (None, i) => {
                let i = i.unwrap_or(0);
                recs.get(i).ok_or_else(|| anyhow!("index {i} out of range ({} records)", recs.len())).data()?
            }
        };
        let c = rec.to_crystal(&tables).data()?;
        println!("id: {}", rec.id);
        println!("formula: {}", reduced_formula(&c, &tables).data()?);
        let l = c.lattice;
        println!(
            "lattice: a={:.4} b={:.4} c={:.4} alpha={:.3} beta={:.3} gamma={:.3} volume={:.3}",
            l.a,
            l.b,
            l.c,
            l.alpha,
            l.beta,
            l.gamma,
            c.volume()
        );
        for s in &c.sites {
            let sym = tables.symbol(s.element).unwrap_or("?");
            println!("  {sym:<3} {:+}  {:.5} {:.5} {:.5}", s.oxidation_state, s.frac[0], s.frac[1], s.frac[2]);
        }
        if !rec.properties.is_empty() {
            println!("properties: {}", serde_json::to_string(&rec.properties).runtime()?);
        }
        let enc = tok.encode_detailed(&c, OrderingStrategy::LowFirst).data()?;
        println!("tokens ({}):", enc.tokens.ids.len());
        print_tokens(&tok, &enc.tokens.ids);
        shown = true;
    }
    if let Some(s) = &flags.tokens {
        let ids = s
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<TokenId>().with_context(|| format!("bad token id {t:?}")))
            .collect::<Result<Vec<_>, _>>()
            .usage()?;
        print_tokens(&tok, &ids);
        match tok.decode(&ids) {
            Ok(c) => println!("decodes to {} with {} sites", reduced_formula(&c, &tables).data()?, c.num_sites()),
            Err(e) => println!("grammar error: {e}"),
        }
        shown = true;
    }
    if let Some(p) = &flags.checkpoint {
        let ckpt = Checkpoint::load(p, None).with_context(|| p.display().to_string()).data()?;
        println!("model: {}", serde_json::to_string(&ckpt.params.config).runtime()?);
        println!("parameters: {}", ckpt.params.num_params());
        let matches = ckpt.vocab_hash == tok.vocab.hash();
        println!("vocab hash: {} ({})", ckpt.vocab_hash, if matches { "matches tables" } else { "does not match tables" });
        for key in ["epoch", "step"] {
            if let Some(v) = ckpt.meta.get(key) {
                println!("{key}: {v}");
            }
        }
        shown = true;
    }
    if !shown {
        return Err(anyhow!("give --corpus, --tokens or --checkpoint")).usage();
    }
    Ok(())
}

fn print_tokens(tok: &Tokenizer, ids: &[TokenId]) {
    for (i, &id) in ids.iter().enumerate() {
        let name = tok.vocab.name(id).unwrap_or_else(|| "<unknown>".into());
        println!("  {i:>3}  {id:>5}  {name}");
    }
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthRun {
    n: usize,
    seed: u64,
    max_sites: usize,
    out: Option<PathBuf>,
    tables: Option<PathBuf>,
}

impl Default for SynthRun {
    fn default() -> Self {
        let s = ToySpec::new(100, 0);
        Self { n: s.n, seed: s.seed, max_sites: s.max_sites, out: None, tables: None }
    }
}

pub fn synth(file: Option<&Path>, flags: SynthFlags) -> CmdResult<()> {
    let run: SynthRun = resolve("synth", file, &flags).usage()?;
    echo("synth", &run);
    let out = required(&run.out, "out")?;
    if run.n == 0 || !(2..=20).contains(&run.max_sites) {
        return Err(anyhow!("need n >= 1 and max_sites in 2..=20")).usage();
    }
    let tables = load_tables(&run.tables)?;
    let spec = ToySpec { n: run.n, seed: run.seed, max_sites: run.max_sites, ..ToySpec::new(run.n, run.seed) };
    let recs = synth_toy_corpus(&spec, &tables);
    write(out, &corpus_to_string(&recs).runtime()?)?;
    println!("{}", json!({ "records": recs.len(), "out": out }));
    Ok(())
}
