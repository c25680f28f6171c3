//! Batched training graph: forward pass with cached activations and the
//! matching analytic backward pass.
//!
//! Sequences are packed back to back (no padding). Linear layers run as one
//! gemm over all packed rows; attention runs per sequence and head, reading
//! only rows `0..=i` for row `i`.

use rand::{Rng, RngCore};

use super::conditions::{prefix_slots, ConditionSet, PrefixSlot};
use super::ops::{
    attend_head, attend_head_backward, rmsnorm_rows, rmsnorm_rows_backward, silu, silu_grad, tri, RopeTable,
};
use super::real::gemm;
use super::{ModelError, ModelParams, Real};
use crate::tokenizer::TokenId;

/// One sequence with its conditions.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub tokens: &'a [TokenId],
    pub conditions: &'a ConditionSet,
}

/// Rows of one sequence inside the packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqSpan {
    pub start: usize,
    pub prefix_len: usize,
    /// Prefix plus material tokens.
    pub len: usize,
}

struct LayerCache<T> {
    x_in: Vec<T>,
    r1: Vec<T>,
    n1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    mask_a: Option<Vec<T>>,
    x_mid: Vec<T>,
    r2: Vec<T>,
    n2: Vec<T>,
    g: Vec<T>,
    u: Vec<T>,
    s: Vec<T>,
    mask_f: Option<Vec<T>>,
}

/// Output of [`forward`]: logits for every packed row plus what the
/// backward pass needs.
pub struct Graph<T: Real> {
    pub logits: Vec<T>,
    pub spans: Vec<SeqSpan>,
    pub vocab_size: usize,
    rows: usize,
    tokens: Vec<TokenId>,
    slots: Vec<Vec<PrefixSlot>>,
    mask_e: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    rf: Vec<T>,
    nf: Vec<T>,
    prob_offsets: Vec<usize>,
}

impl<T: Real> Graph<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Logit row for packed row `r`.
    pub fn row(&self, r: usize) -> &[T] {
        &self.logits[r * self.vocab_size..(r + 1) * self.vocab_size]
    }
}

fn dropout_mask<T: Real>(n: usize, p: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect()
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(a, &b)| *a *= b);
    }
}

/// Validates a sequence and resolves its prefix slots.
pub fn prepare<T: Real>(params: &ModelParams<T>, input: &SeqInput) -> Result<Vec<PrefixSlot>, ModelError> {
    let cfg = &params.config;
    let slots = prefix_slots(&cfg.condition_schema, input.conditions, cfg.num_elements, cfg.stoich_table_size)?;
    let total = slots.len() + input.tokens.len();
    if total > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: total, max: cfg.max_seq_len });
    }
    if let Some(&bad) = input.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::UnknownToken(bad));
    }
    Ok(slots)
}

/// Writes the embedding of one prefix slot into `out`.
pub fn embed_slot<T: Real>(params: &ModelParams<T>, slot: PrefixSlot, out: &mut [T]) {
    let l = &params.layout;
    let d = params.config.d_emb;
    match slot {
        PrefixSlot::Scalar { slot, value } => {
            let s = &l.scalars[slot];
            let (w, b, lab) = (params.slice(&s.value_w), params.slice(&s.value_b), params.slice(&s.label));
            let v = T::of(value);
            for i in 0..d {
                out[i] = w[i] * v + b[i] + lab[i];
            }
        }
        PrefixSlot::ScalarNan { slot } => {
            let s = &l.scalars[slot];
            let (nan, lab) = (params.slice(&s.nan), params.slice(&s.label));
            for i in 0..d {
                out[i] = nan[i] + lab[i];
            }
        }
        PrefixSlot::FormulaPair { element, count } => {
            let f = l.formula.as_ref().expect("formula slot requires formula tables");
            let e = &params.slice(&f.element)[(element as usize - 1) * d..][..d];
            let c = &params.slice(&f.stoich)[(count as usize - 1) * d..][..d];
            for i in 0..d {
                out[i] = e[i] + c[i];
            }
        }
        PrefixSlot::FormulaNan => {
            let f = l.formula.as_ref().expect("formula slot requires formula tables");
            out.copy_from_slice(params.slice(&f.nan));
        }
    }
}

/// Prefix vectors for one condition set, in schema order.
pub fn embed_conditions<T: Real>(params: &ModelParams<T>, cs: &ConditionSet) -> Result<Vec<Vec<T>>, ModelError> {
    let cfg = &params.config;
    let slots = prefix_slots(&cfg.condition_schema, cs, cfg.num_elements, cfg.stoich_table_size)?;
    Ok(slots
        .into_iter()
        .map(|s| {
            let mut v = vec![T::zero(); cfg.d_emb];
            embed_slot(params, s, &mut v);
            v
        })
        .collect())
}

/// Runs the stack on a packed batch. With `dropout` set, applies inverted
/// dropout at the configured rate using that generator; otherwise the pass
/// is deterministic.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    batch: &[SeqInput],
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<Graph<T>, ModelError> {
    let cfg = &params.config;
    let lay = &params.layout;
    let (d, f, vsz, nh, dk) = (cfg.d_emb, cfg.d_ffn_hidden, cfg.vocab_size, cfg.n_heads, cfg.d_head());
    let p = if cfg.dropout_rate > 0.0 { cfg.dropout_rate } else { 0.0 };
    if p == 0.0 {
        dropout = None;
    }

    let mut spans = Vec::with_capacity(batch.len());
    let mut slots = Vec::with_capacity(batch.len());
    let mut tokens = Vec::new();
    let mut rows = 0;
    let mut prob_offsets = Vec::with_capacity(batch.len() + 1);
    let mut prob_total = 0;
    for input in batch {
        let s = prepare(params, input)?;
        let len = s.len() + input.tokens.len();
        spans.push(SeqSpan { start: rows, prefix_len: s.len(), len });
        prob_offsets.push(prob_total);
        prob_total += nh * tri(len);
        rows += len;
        tokens.extend_from_slice(input.tokens);
        slots.push(s);
    }
    let max_len = spans.iter().map(|s| s.len).max().unwrap_or(0);
    let rope = RopeTable::<T>::new(dk, max_len, cfg.rope_base)?;

    // embeddings
    let mut x = vec![T::zero(); rows * d];
    let emb = params.slice(&lay.tok_emb);
    let mut tok_iter = tokens.iter();
    for (span, s) in spans.iter().zip(&slots) {
        for (i, &slot) in s.iter().enumerate() {
            embed_slot(params, slot, &mut x[(span.start + i) * d..][..d]);
        }
        for r in span.start + span.prefix_len..span.start + span.len {
            let t = *tok_iter.next().expect("token count") as usize;
            x[r * d..(r + 1) * d].copy_from_slice(&emb[t * d..(t + 1) * d]);
        }
    }
    let mask_e = dropout.as_mut().map(|r| dropout_mask(rows * d, p, *r));
    apply_mask(&mut x, &mask_e);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for ls in &lay.layers {
        let x_in = x;
        let mut r1 = vec![T::zero(); rows];
        let mut n1 = vec![T::zero(); rows * d];
        rmsnorm_rows(&x_in, params.slice(&ls.attn_norm), &mut n1, &mut r1);
        let mut q = vec![T::zero(); rows * d];
        let mut k = vec![T::zero(); rows * d];
        let mut v = vec![T::zero(); rows * d];
        gemm(false, false, rows, d, d, &n1, params.slice(&ls.wq), T::zero(), &mut q);
        gemm(false, false, rows, d, d, &n1, params.slice(&ls.wk), T::zero(), &mut k);
        gemm(false, false, rows, d, d, &n1, params.slice(&ls.wv), T::zero(), &mut v);
        for span in &spans {
            for i in 0..span.len {
                let r = span.start + i;
                for h in 0..nh {
                    rope.rotate(&mut q[r * d + h * dk..][..dk], i);
                    rope.rotate(&mut k[r * d + h * dk..][..dk], i);
                }
            }
        }
        let mut probs = vec![T::zero(); prob_total];
        let mut o = vec![T::zero(); rows * d];
        for (si, span) in spans.iter().enumerate() {
            let rr = span.start * d..(span.start + span.len) * d;
            for h in 0..nh {
                let po = prob_offsets[si] + h * tri(span.len);
                attend_head(
                    &q[rr.clone()],
                    &k[rr.clone()],
                    &v[rr.clone()],
                    d,
                    h * dk,
                    dk,
                    span.len,
                    &mut probs[po..po + tri(span.len)],
                    &mut o[rr.clone()],
                );
            }
        }
        let mut a = vec![T::zero(); rows * d];
        gemm(false, false, rows, d, d, &o, params.slice(&ls.wo), T::zero(), &mut a);
        let mask_a = dropout.as_mut().map(|r| dropout_mask(rows * d, p, *r));
        apply_mask(&mut a, &mask_a);
        let x_mid: Vec<T> = x_in.iter().zip(&a).map(|(&p, &q)| p + q).collect();

        let mut r2 = vec![T::zero(); rows];
        let mut n2 = vec![T::zero(); rows * d];
        rmsnorm_rows(&x_mid, params.slice(&ls.ffn_norm), &mut n2, &mut r2);
        let mut g = vec![T::zero(); rows * f];
        let mut u = vec![T::zero(); rows * f];
        gemm(false, false, rows, f, d, &n2, params.slice(&ls.w_gate), T::zero(), &mut g);
        gemm(false, false, rows, f, d, &n2, params.slice(&ls.w_up), T::zero(), &mut u);
        let s: Vec<T> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
        let mut ff = vec![T::zero(); rows * d];
        gemm(false, false, rows, d, f, &s, params.slice(&ls.w_down), T::zero(), &mut ff);
        let mask_f = dropout.as_mut().map(|r| dropout_mask(rows * d, p, *r));
        apply_mask(&mut ff, &mask_f);
        x = x_mid.iter().zip(&ff).map(|(&p, &q)| p + q).collect();
        layers.push(LayerCache { x_in, r1, n1, q, k, v, probs, o, mask_a, x_mid, r2, n2, g, u, s, mask_f });
    }

    let mut rf = vec![T::zero(); rows];
    let mut nf = vec![T::zero(); rows * d];
    rmsnorm_rows(&x, params.slice(&lay.final_norm), &mut nf, &mut rf);
    let mut logits = vec![T::zero(); rows * vsz];
    gemm(false, false, rows, vsz, d, &nf, params.slice(&lay.head), T::zero(), &mut logits);

    Ok(Graph {
        logits,
        spans,
        vocab_size: vsz,
        rows,
        tokens,
        slots,
        mask_e,
        layers,
        x_final: x,
        rf,
        nf,
        prob_offsets,
    })
}

/// Gradients of all parameters given dL/dlogits (`rows × vocab`).
pub fn backward<T: Real>(params: &ModelParams<T>, graph: &Graph<T>, dlogits: &[T]) -> ModelParams<T> {
    let cfg = &params.config;
    let lay = &params.layout;
    let (d, f, vsz, nh, dk) = (cfg.d_emb, cfg.d_ffn_hidden, cfg.vocab_size, cfg.n_heads, cfg.d_head());
    let rows = graph.rows;
    assert_eq!(dlogits.len(), rows * vsz, "dlogits shape");
    let mut grads = params.zeros_like();
    let max_len = graph.spans.iter().map(|s| s.len).max().unwrap_or(0);
    let rope = RopeTable::<T>::new(dk, max_len, cfg.rope_base).expect("validated config");

    // head and final norm
    gemm(true, false, d, vsz, rows, &graph.nf, dlogits, T::one(), &mut grads.data[lay.head.clone()]);
    let mut dnf = vec![T::zero(); rows * d];
    gemm(false, true, rows, d, vsz, dlogits, params.slice(&lay.head), T::zero(), &mut dnf);
    let mut dx = vec![T::zero(); rows * d];
    rmsnorm_rows_backward(
        &graph.x_final,
        params.slice(&lay.final_norm),
        &graph.rf,
        &dnf,
        &mut dx,
        &mut grads.data[lay.final_norm.clone()],
    );

    for (ls, c) in lay.layers.iter().zip(&graph.layers).rev() {
        // FFN
        let mut dff = dx.clone();
        apply_mask(&mut dff, &c.mask_f);
        gemm(true, false, f, d, rows, &c.s, &dff, T::one(), &mut grads.data[ls.w_down.clone()]);
        let mut ds = vec![T::zero(); rows * f];
        gemm(false, true, rows, f, d, &dff, params.slice(&ls.w_down), T::zero(), &mut ds);
        let mut dg = vec![T::zero(); rows * f];
        let mut du = vec![T::zero(); rows * f];
        for i in 0..rows * f {
            dg[i] = ds[i] * c.u[i] * silu_grad(c.g[i]);
            du[i] = ds[i] * silu(c.g[i]);
        }
        gemm(true, false, d, f, rows, &c.n2, &dg, T::one(), &mut grads.data[ls.w_gate.clone()]);
        gemm(true, false, d, f, rows, &c.n2, &du, T::one(), &mut grads.data[ls.w_up.clone()]);
        let mut dn2 = vec![T::zero(); rows * d];
        gemm(false, true, rows, d, f, &dg, params.slice(&ls.w_gate), T::zero(), &mut dn2);
        gemm(false, true, rows, d, f, &du, params.slice(&ls.w_up), T::one(), &mut dn2);
        rmsnorm_rows_backward(
            &c.x_mid,
            params.slice(&ls.ffn_norm),
            &c.r2,
            &dn2,
            &mut dx,
            &mut grads.data[ls.ffn_norm.clone()],
        );

        // attention
        let mut da = dx.clone();
        apply_mask(&mut da, &c.mask_a);
        gemm(true, false, d, d, rows, &c.o, &da, T::one(), &mut grads.data[ls.wo.clone()]);
        let mut dout = vec![T::zero(); rows * d];
        gemm(false, true, rows, d, d, &da, params.slice(&ls.wo), T::zero(), &mut dout);
        let mut dq = vec![T::zero(); rows * d];
        let mut dkk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        for (si, span) in graph.spans.iter().enumerate() {
            let rr = span.start * d..(span.start + span.len) * d;
            for h in 0..nh {
                let po = graph.prob_offsets[si] + h * tri(span.len);
                attend_head_backward(
                    &c.q[rr.clone()],
                    &c.k[rr.clone()],
                    &c.v[rr.clone()],
                    d,
                    h * dk,
                    dk,
                    span.len,
                    &c.probs[po..po + tri(span.len)],
                    &dout[rr.clone()],
                    &mut dq[rr.clone()],
                    &mut dkk[rr.clone()],
                    &mut dv[rr.clone()],
                );
            }
            for i in 0..span.len {
                let r = span.start + i;
                for h in 0..nh {
                    rope.rotate_back(&mut dq[r * d + h * dk..][..dk], i);
                    rope.rotate_back(&mut dkk[r * d + h * dk..][..dk], i);
                }
            }
        }
        gemm(true, false, d, d, rows, &c.n1, &dq, T::one(), &mut grads.data[ls.wq.clone()]);
        gemm(true, false, d, d, rows, &c.n1, &dkk, T::one(), &mut grads.data[ls.wk.clone()]);
        gemm(true, false, d, d, rows, &c.n1, &dv, T::one(), &mut grads.data[ls.wv.clone()]);
        let mut dn1 = vec![T::zero(); rows * d];
        gemm(false, true, rows, d, d, &dq, params.slice(&ls.wq), T::zero(), &mut dn1);
        gemm(false, true, rows, d, d, &dkk, params.slice(&ls.wk), T::one(), &mut dn1);
        gemm(false, true, rows, d, d, &dv, params.slice(&ls.wv), T::one(), &mut dn1);
        rmsnorm_rows_backward(
            &c.x_in,
            params.slice(&ls.attn_norm),
            &c.r1,
            &dn1,
            &mut dx,
            &mut grads.data[ls.attn_norm.clone()],
        );
    }

    // embeddings
    apply_mask(&mut dx, &graph.mask_e);
    let mut tok_iter = graph.tokens.iter();
    for (span, slots) in graph.spans.iter().zip(&graph.slots) {
        for (i, &slot) in slots.iter().enumerate() {
            let g = &dx[(span.start + i) * d..][..d];
            accumulate_slot(&mut grads, slot, g);
        }
        for r in span.start + span.prefix_len..span.start + span.len {
            let t = *tok_iter.next().expect("token count") as usize;
            let dst = &mut grads.data[lay.tok_emb.start + t * d..][..d];
            dst.iter_mut().zip(&dx[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
        }
    }
    grads
}

fn accumulate_slot<T: Real>(grads: &mut ModelParams<T>, slot: PrefixSlot, g: &[T]) {
    let d = g.len();
    let add = |data: &mut [T], start: usize, scale: T| {
        data[start..start + d].iter_mut().zip(g).for_each(|(a, &b)| *a += b * scale);
    };
    let lay = grads.layout.clone();
    let data = &mut grads.data;
    match slot {
        PrefixSlot::Scalar { slot, value } => {
            let s = &lay.scalars[slot];
            add(data, s.value_w.start, T::of(value));
            add(data, s.value_b.start, T::one());
            add(data, s.label.start, T::one());
        }
        PrefixSlot::ScalarNan { slot } => {
            let s = &lay.scalars[slot];
            add(data, s.nan.start, T::one());
            add(data, s.label.start, T::one());
        }
        PrefixSlot::FormulaPair { element, count } => {
            let fs = lay.formula.as_ref().expect("formula tables");
            add(data, fs.element.start + (element as usize - 1) * d, T::one());
            add(data, fs.stoich.start + (count as usize - 1) * d, T::one());
        }
        PrefixSlot::FormulaNan => {
            let fs = lay.formula.as_ref().expect("formula tables");
            add(data, fs.nan.start, T::one());
        }
    }
}

/// Whether the forward pass ran in evaluation mode or with dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Logits (`(prefix + tokens) × vocab`) for one sequence.
pub fn forward_logits<T: Real>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    cs: &ConditionSet,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Vec<T>, ModelError> {
    let input = [SeqInput { tokens, conditions: cs }];
    let g = match mode {
        Mode::Train => forward(params, &input, Some(rng))?,
        Mode::Eval => forward(params, &input, None)?,
    };
    Ok(g.logits)
}
