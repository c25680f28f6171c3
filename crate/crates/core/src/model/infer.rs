//! Incremental decoding with a per-sequence key/value cache.
//!
//! Uses its own row kernels (fixed-order [`dot`]) so a cached step and a
//! from-scratch recomputation perform identical arithmetic.

use super::conditions::ConditionSet;
use super::graph::{embed_slot, prepare, SeqInput};
use super::ops::{silu, RopeTable, RMS_EPS};
use super::real::dot;
use super::{ModelError, ModelParams, Real};
use crate::tokenizer::TokenId;

struct LayerWeights<T> {
    attn_norm: Vec<T>,
    /// Output-major copies: row `o` holds the weights feeding output `o`.
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    wo: Vec<T>,
    ffn_norm: Vec<T>,
    w_gate: Vec<T>,
    w_up: Vec<T>,
    w_down: Vec<T>,
}

/// Read-only weights prepared for row-at-a-time decoding. Shareable across
/// threads.
pub struct InferenceModel<T: Real> {
    params: ModelParams<T>,
    layers: Vec<LayerWeights<T>>,
    final_norm: Vec<T>,
    head: Vec<T>,
    rope: RopeTable<T>,
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    prefix_len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }
}

fn transpose<T: Real>(w: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); w.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = w[i * cols + j];
        }
    }
    t
}

fn matvec<T: Real>(wt: &[T], x: &[T], out: &mut [T]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(wt.chunks_exact(n)) {
        *o = dot(row, x);
    }
}

fn rmsnorm_row<T: Real>(x: &[T], gain: &[T], out: &mut [T]) {
    let ms = dot(x, x) / T::of(x.len() as f64);
    let r = T::one() / (ms + T::of(RMS_EPS)).sqrt();
    for ((y, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *y = v * r * g;
    }
}

impl<T: Real> InferenceModel<T> {
    pub fn new(params: &ModelParams<T>) -> Result<Self, ModelError> {
        let cfg = &params.config;
        cfg.validate()?;
        let (d, f, v) = (cfg.d_emb, cfg.d_ffn_hidden, cfg.vocab_size);
        let layers = params
            .layout
            .layers
            .iter()
            .map(|ls| LayerWeights {
                attn_norm: params.slice(&ls.attn_norm).to_vec(),
                wq: transpose(params.slice(&ls.wq), d, d),
                wk: transpose(params.slice(&ls.wk), d, d),
                wv: transpose(params.slice(&ls.wv), d, d),
                wo: transpose(params.slice(&ls.wo), d, d),
                ffn_norm: params.slice(&ls.ffn_norm).to_vec(),
                w_gate: transpose(params.slice(&ls.w_gate), d, f),
                w_up: transpose(params.slice(&ls.w_up), d, f),
                w_down: transpose(params.slice(&ls.w_down), f, d),
            })
            .collect();
        Ok(Self {
            layers,
            final_norm: params.slice(&params.layout.final_norm).to_vec(),
            head: transpose(params.slice(&params.layout.head), d, v),
            rope: RopeTable::new(cfg.d_head(), cfg.max_seq_len, cfg.rope_base)?,
            params: params.clone(),
        })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    /// Processes the condition prefix. Returns the cache and the logits at
    /// the last prefix position (`None` for an empty prefix).
    pub fn start(&self, cs: &ConditionSet) -> Result<(KvCache<T>, Option<Vec<T>>), ModelError> {
        let cfg = &self.params.config;
        let slots = prepare(&self.params, &SeqInput { tokens: &[], conditions: cs })?;
        let mut cache = self.empty_cache(slots.len());
        let mut last = None;
        for slot in slots {
            let mut x = vec![T::zero(); cfg.d_emb];
            embed_slot(&self.params, slot, &mut x);
            last = Some(self.push_row(&mut cache, x));
        }
        Ok((cache, last))
    }

    /// Appends one material token and returns the logits at its position.
    pub fn step(&self, cache: &mut KvCache<T>, token: TokenId) -> Result<Vec<T>, ModelError> {
        let cfg = &self.params.config;
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::UnknownToken(token));
        }
        if cache.len >= cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: cache.len + 1, max: cfg.max_seq_len });
        }
        let d = cfg.d_emb;
        let emb = self.params.slice(&self.params.layout.tok_emb);
        let x = emb[token as usize * d..(token as usize + 1) * d].to_vec();
        Ok(self.push_row(cache, x))
    }

    /// Logits at the last position computed from scratch (fresh cache).
    pub fn recompute_last(&self, cs: &ConditionSet, tokens: &[TokenId]) -> Result<Vec<T>, ModelError> {
        let (mut cache, mut last) = self.start(cs)?;
        for &t in tokens {
            last = Some(self.step(&mut cache, t)?);
        }
        last.ok_or_else(|| ModelError::BadConfig("empty prefix and no tokens".into()))
    }

    /// All rows' logits, prefix first, computed row by row.
    pub fn logits_all(&self, cs: &ConditionSet, tokens: &[TokenId]) -> Result<Vec<Vec<T>>, ModelError> {
        let slots = prepare(&self.params, &SeqInput { tokens, conditions: cs })?;
        let mut cache = self.empty_cache(slots.len());
        let mut out = Vec::with_capacity(slots.len() + tokens.len());
        for slot in slots {
            let mut x = vec![T::zero(); self.params.config.d_emb];
            embed_slot(&self.params, slot, &mut x);
            out.push(self.push_row(&mut cache, x));
        }
        for &t in tokens {
            out.push(self.step(&mut cache, t)?);
        }
        Ok(out)
    }

    fn empty_cache(&self, prefix_len: usize) -> KvCache<T> {
        let n = self.params.config.n_layers;
        KvCache { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0, prefix_len }
    }

    fn push_row(&self, cache: &mut KvCache<T>, mut x: Vec<T>) -> Vec<T> {
        let cfg = &self.params.config;
        let (d, f, nh, dk) = (cfg.d_emb, cfg.d_ffn_hidden, cfg.n_heads, cfg.d_head());
        let pos = cache.len;
        let scale = T::one() / T::of(dk as f64).sqrt();
        let mut n = vec![T::zero(); d];
        let mut q = vec![T::zero(); d];
        let mut k = vec![T::zero(); d];
        let mut v = vec![T::zero(); d];
        let mut o = vec![T::zero(); d];
        let mut a = vec![T::zero(); d];
        let mut g = vec![T::zero(); f];
        let mut u = vec![T::zero(); f];
        let mut scores = vec![T::zero(); pos + 1];
        for (l, w) in self.layers.iter().enumerate() {
            rmsnorm_row(&x, &w.attn_norm, &mut n);
            matvec(&w.wq, &n, &mut q);
            matvec(&w.wk, &n, &mut k);
            matvec(&w.wv, &n, &mut v);
            for h in 0..nh {
                self.rope.rotate(&mut q[h * dk..(h + 1) * dk], pos);
                self.rope.rotate(&mut k[h * dk..(h + 1) * dk], pos);
            }
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            for h in 0..nh {
                let qh = &q[h * dk..(h + 1) * dk];
                let mut max = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qh, &keys[j * d + h * dk..][..dk]) * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut z = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let oh = &mut o[h * dk..(h + 1) * dk];
                oh.iter_mut().for_each(|x| *x = T::zero());
                for (j, &s) in scores.iter().enumerate() {
                    let p = s / z;
                    for (x, &vv) in oh.iter_mut().zip(&values[j * d + h * dk..][..dk]) {
                        *x += p * vv;
                    }
                }
            }
            matvec(&w.wo, &o, &mut a);
            x.iter_mut().zip(&a).for_each(|(x, &a)| *x += a);
            rmsnorm_row(&x, &w.ffn_norm, &mut n);
            matvec(&w.w_gate, &n, &mut g);
            matvec(&w.w_up, &n, &mut u);
            for (gi, &ui) in g.iter_mut().zip(&u) {
                *gi = silu(*gi) * ui;
            }
            matvec(&w.w_down, &g, &mut a);
            x.iter_mut().zip(&a).for_each(|(x, &a)| *x += a);
        }
        cache.len += 1;
        rmsnorm_row(&x, &self.final_norm, &mut n);
        let mut logits = vec![T::zero(); cfg.vocab_size];
        matvec(&self.head, &n, &mut logits);
        logits
    }
}
