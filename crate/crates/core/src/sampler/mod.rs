//! Autoregressive generation with optional grammar-constrained decoding.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{net_charge, Crystal, LatticeParams};
use crate::model::{ConditionSet, InferenceModel, ModelError, Real};
use crate::tokenizer::{
    sequence_len, GrammarError, GrammarState, LatticeParam, TokenClass, TokenId, Tokenizer, Vocabulary, EOS, SOS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("no token is allowed at this step")]
    NoAllowedToken,
    #[error("invalid sampling config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Below this temperature sampling is greedy.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub temperature: f64,
    /// Optional per-class overrides of `temperature`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub class_temperatures: BTreeMap<TokenClass, f64>,
    pub max_new_tokens: usize,
    pub max_atoms: usize,
    pub constrain_grammar: bool,
    pub seed: u64,
    pub n_samples: usize,
    pub workers: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            class_temperatures: BTreeMap::new(),
            max_new_tokens: sequence_len(20),
            max_atoms: 20,
            constrain_grammar: true,
            seed: 0,
            n_samples: 1,
            workers: 1,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::BadConfig(m.to_string()));
        if !(self.temperature > 0.0) || self.class_temperatures.values().any(|t| !(*t > 0.0)) {
            return bad("temperatures must be positive");
        }
        if self.max_new_tokens < sequence_len(1) {
            return bad("max_new_tokens must allow a one-atom sequence (14 tokens)");
        }
        if self.max_atoms == 0 {
            return bad("max_atoms must be at least 1");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        Ok(())
    }

    fn temperature_for(&self, class: Option<TokenClass>) -> f64 {
        class.and_then(|c| self.class_temperatures.get(&c).copied()).unwrap_or(self.temperature)
    }
}

/// Draws from softmax(logits / T) restricted to `allowed`; greedy (first
/// maximal allowed logit) when `T < 1e-6`.
pub fn sample_next<T: Real>(
    logits: &[T],
    temperature: f64,
    allowed: Option<&[bool]>,
    rng: &mut dyn RngCore,
) -> Result<TokenId, SampleError> {
    sample_scaled(logits, |_| temperature, allowed, rng)
}

fn sample_scaled<T: Real>(
    logits: &[T],
    temp_of: impl Fn(usize) -> f64,
    allowed: Option<&[bool]>,
    rng: &mut dyn RngCore,
) -> Result<TokenId, SampleError> {
    let ok = |i: usize| allowed.is_none_or(|m| m[i]);
    let idx: Vec<usize> = (0..logits.len()).filter(|&i| ok(i)).collect();
    if idx.is_empty() {
        return Err(SampleError::NoAllowedToken);
    }
    let argmax = |vals: &dyn Fn(usize) -> f64| {
        idx.iter().copied().fold((idx[0], f64::NEG_INFINITY), |(bi, bv), i| {
            let v = vals(i);
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
    };
    if idx.iter().all(|&i| temp_of(i) < GREEDY_TEMPERATURE) {
        return Ok(argmax(&|i| logits[i].f64()).0 as TokenId);
    }
    let scaled = |i: usize| logits[i].f64() / temp_of(i).max(GREEDY_TEMPERATURE);
    let (arg, max) = argmax(&scaled);
    if !max.is_finite() {
        return Ok(arg as TokenId);
    }
    let weights: Vec<f64> = (0..logits.len()).map(|i| if ok(i) { (scaled(i) - max).exp() } else { 0.0 }).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return Ok(i as TokenId);
            }
            u -= w;
        }
    }
    Ok(arg as TokenId)
}

/// Token-level mask admitting exactly the classes the grammar allows next.
pub fn grammar_mask(state: &GrammarState, vocab: &Vocabulary) -> Vec<bool> {
    let allowed = state.allowed();
    (0..vocab.len() as TokenId).map(|id| vocab.class(id).is_some_and(|c| allowed.contains(c))).collect()
}

/// Bins of γ that, together with the sampled a, b, c, α, β, give a valid cell.
fn feasible_gamma(tok: &Tokenizer, lattice: &[f64]) -> Vec<bool> {
    (0..crate::tokenizer::NUM_BINS as u16)
        .map(|b| {
            let g = tok.ranges.dequantize(LatticeParam::Gamma, b).expect("bin in range");
            LatticeParams::from_array([lattice[0], lattice[1], lattice[2], lattice[3], lattice[4], g]).is_ok()
        })
        .collect()
}

/// One generated sequence and its decode outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: Vec<TokenId>,
    pub outcome: Result<Crystal, GrammarError>,
}

/// Samples one sequence. Constrained decoding masks every step to the
/// grammar (and to γ bins giving a non-degenerate cell), so its output
/// always decodes.
pub fn generate<T: Real>(
    model: &InferenceModel<T>,
    tok: &Tokenizer,
    cs: &ConditionSet,
    cfg: &SampleConfig,
    rng: &mut dyn RngCore,
) -> Result<Generated, SampleError> {
    cfg.validate()?;
    let vocab = &tok.vocab;
    if model.vocab_size() != vocab.len() {
        return Err(SampleError::BadConfig(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            model.vocab_size(),
            vocab.len()
        )));
    }
    let (mut cache, first) = model.start(cs)?;
    let budget = cfg.max_new_tokens.min(model.params().config.max_seq_len.saturating_sub(cache.prefix_len()));
    if budget < sequence_len(1) {
        return Err(SampleError::BadConfig("model context too short for a one-atom sequence".into()));
    }
    let max_atoms = cfg.max_atoms.min((budget - 10) / 4);
    let mut grammar = GrammarState::with_max_atoms(tok.layout, max_atoms);
    let mut tokens = Vec::with_capacity(budget);
    let mut lattice_vals: Vec<f64> = Vec::with_capacity(6);
    let mut logits = match first {
        Some(l) => l,
        None => {
            // no prefix to predict from: the sequence starts with SOS by definition
            tokens.push(SOS);
            if cfg.constrain_grammar {
                grammar.advance(TokenClass::Sos).expect("SOS first");
            }
            model.step(&mut cache, SOS)?
        }
    };
    let class_temp = |i: usize| cfg.temperature_for(vocab.class(i as TokenId));
    while tokens.len() < budget {
        let next = if cfg.constrain_grammar {
            let mut mask = grammar_mask(&grammar, vocab);
            if grammar.lattice_index() == Some(5) {
                let feas = feasible_gamma(tok, &lattice_vals);
                for (b, ok) in Vocabulary::bin_range().zip(feas) {
                    mask[b as usize] &= ok;
                }
            }
            sample_scaled(&logits, class_temp, Some(&mask), rng)?
        } else {
            sample_scaled(&logits, class_temp, None, rng)?
        };
        if cfg.constrain_grammar {
            let class = vocab.class(next).expect("masked to known ids");
            if let (Some(i), crate::tokenizer::Token::Bin(b)) = (grammar.lattice_index(), vocab.token(next).expect("known")) {
                lattice_vals.push(tok.ranges.dequantize(LatticeParam::ALL[i], b).expect("bin in range"));
            }
            grammar.advance(class).expect("mask admits only legal classes");
        }
        tokens.push(next);
        if next == EOS || tokens.len() == budget {
            break;
        }
        logits = model.step(&mut cache, next)?;
    }
    let outcome = tok.decode(&tokens);
    Ok(Generated { tokens, outcome })
}

/// One entry of a generated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub seed: u64,
    pub conditions: ConditionSet,
    pub tokens: Vec<TokenId>,
    pub crystal: Option<Crystal>,
    pub error: Option<GrammarError>,
    pub charge_neutral: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub n_samples: usize,
    pub n_valid: usize,
    pub n_charge_neutral: usize,
    pub wall_time_s: f64,
    pub tokens_per_sec: f64,
    pub seconds_per_sample: f64,
}

/// Generates `cfg.n_samples` sequences; sample `i` uses its own generator
/// seeded with `cfg.seed + i`, so results do not depend on `cfg.workers`.
pub fn generate_batch<T: Real>(
    model: &InferenceModel<T>,
    tok: &Tokenizer,
    cs: &ConditionSet,
    cfg: &SampleConfig,
) -> Result<(Vec<Sample>, GenerationStats), SampleError> {
    cfg.validate()?;
    let start = Instant::now();
    let one = |i: usize| -> Result<Sample, SampleError> {
        let seed = cfg.seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = generate(model, tok, cs, cfg, &mut rng)?;
        let (crystal, error) = match g.outcome {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e)),
        };
        let charge_neutral = crystal.as_ref().is_some_and(|c| net_charge(c) == 0);
        Ok(Sample { index: i, seed, conditions: cs.clone(), tokens: g.tokens, crystal, error, charge_neutral })
    };
    let workers = cfg.workers.clamp(1, cfg.n_samples);
    let mut samples: Vec<Sample> = if workers == 1 {
        (0..cfg.n_samples).map(one).collect::<Result<_, _>>()?
    } else {
        let parts: Vec<Result<Vec<Sample>, SampleError>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let one = &one;
                    s.spawn(move || (w..cfg.n_samples).step_by(workers).map(one).collect::<Result<Vec<_>, _>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(cfg.n_samples);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    samples.sort_by_key(|s| s.index);
    let wall = start.elapsed().as_secs_f64();
    let n_tokens: usize = samples.iter().map(|s| s.tokens.len()).sum();
    let stats = GenerationStats {
        n_samples: samples.len(),
        n_valid: samples.iter().filter(|s| s.crystal.is_some()).count(),
        n_charge_neutral: samples.iter().filter(|s| s.charge_neutral).count(),
        wall_time_s: wall,
        tokens_per_sec: if wall > 0.0 { n_tokens as f64 / wall } else { 0.0 },
        seconds_per_sample: wall / samples.len() as f64,
    };
    Ok((samples, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::ElementTables;
    use crate::model::{Condition, ModelConfig, ModelParams};
    use crate::tokenizer::LatticeRanges;

    fn tokenizer() -> Tokenizer {
        Tokenizer::new(Vocabulary::build(&ElementTables::bundled()).unwrap(), LatticeRanges::default())
    }

    fn model(tok: &Tokenizer, seed: u64) -> InferenceModel<f32> {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_emb: 16,
            d_ffn_hidden: 16,
            condition_schema: vec![Condition::Density],
            ..ModelConfig::tiny(tok.vocab.len())
        };
        InferenceModel::new(&ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()).unwrap()
    }

    #[test]
    fn sample_next_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.0f32, 5.0, 1.0];
        assert_eq!(sample_next(&logits, 1.0, Some(&[false, false, true]), &mut rng), Ok(2));
        assert_eq!(sample_next(&logits, 1.0, Some(&[false; 3]), &mut rng), Err(SampleError::NoAllowedToken));
        assert_eq!(sample_next(&logits, 1e-9, None, &mut rng), Ok(1));
        assert_eq!(sample_next(&logits, 1e-9, Some(&[true, false, true]), &mut rng), Ok(2));
        let n = 10_000;
        let ones = (0..n)
            .filter(|_| sample_next(&[0.0f64, 0.0, 0.0], 1.0, Some(&[false, true, true]), &mut rng).unwrap() == 1)
            .count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn temperature_equals_scaled_logits() {
        let z = [0.3f64, -0.2, 1.1, 0.0];
        let t = 0.6;
        let zt: Vec<f64> = z.iter().map(|v| v / t).collect();
        let n = 20_000;
        let mut a = [0usize; 4];
        let mut b = [0usize; 4];
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..n {
            a[sample_next(&z, t, None, &mut r1).unwrap() as usize] += 1;
            b[sample_next(&zt, 1.0, None, &mut r2).unwrap() as usize] += 1;
        }
        for i in 0..4 {
            assert!((a[i] as f64 - b[i] as f64).abs() / n as f64 <= 0.02);
        }
    }

    #[test]
    fn masks_follow_grammar() {
        let tok = tokenizer();
        let mut g = GrammarState::new(tok.layout);
        let m = grammar_mask(&g, &tok.vocab);
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[SOS as usize]);
        for c in [TokenClass::Sos, TokenClass::Atoms, TokenClass::Element] {
            g.advance(c).unwrap();
        }
        let m = grammar_mask(&g, &tok.vocab);
        assert!(Vocabulary::bin_range().all(|b| m[b as usize]));
        assert_eq!(m.iter().filter(|&&b| b).count(), 1024);
        for c in [TokenClass::Bin, TokenClass::Bin, TokenClass::Bin, TokenClass::Lattice] {
            g.advance(c).unwrap();
        }
        for _ in 0..6 {
            g.advance(TokenClass::Bin).unwrap();
        }
        let m = grammar_mask(&g, &tok.vocab);
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[EOS as usize]);
    }

    #[test]
    fn constrained_generation_is_valid_and_deterministic() {
        let tok = tokenizer();
        let cs = ConditionSet::new().with(Condition::Density, 3.0).unwrap();
        for seed in 0..5 {
            let m = model(&tok, seed);
            let cfg = SampleConfig { n_samples: 8, seed, ..SampleConfig::default() };
            let (samples, stats) = generate_batch(&m, &tok, &cs, &cfg).unwrap();
            assert_eq!(stats.n_valid, 8);
            let again = generate_batch(&m, &tok, &cs, &SampleConfig { workers: 3, ..cfg.clone() }).unwrap().0;
            assert_eq!(samples, again);
            assert!(samples.iter().all(|s| s.tokens.len() <= cfg.max_new_tokens));
        }
    }

    #[test]
    fn unconstrained_rarely_valid_for_random_model() {
        let tok = tokenizer();
        let m = model(&tok, 3);
        let cfg = SampleConfig { n_samples: 20, constrain_grammar: false, ..SampleConfig::default() };
        let (samples, stats) = generate_batch(&m, &tok, &ConditionSet::new(), &cfg).unwrap();
        assert!(stats.n_valid < 20);
        assert!(samples.iter().any(|s| s.error.is_some()));
    }

    #[test]
    fn empty_schema_starts_with_sos() {
        let tok = tokenizer();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_emb: 16,
            d_ffn_hidden: 16,
            condition_schema: vec![],
            ..ModelConfig::tiny(tok.vocab.len())
        };
        let m = InferenceModel::new(&ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()).unwrap();
        let g = generate(&m, &tok, &ConditionSet::new(), &SampleConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(g.tokens[0], SOS);
        assert!(g.outcome.is_ok());
    }
}
