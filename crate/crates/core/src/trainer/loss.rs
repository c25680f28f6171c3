use crate::model::{Real, SeqSpan};
use crate::tokenizer::TokenId;

use super::TrainError;

/// Loss, gradient and accuracy over the material-token predictions of a batch.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean cross-entropy over all targets.
    pub loss: f64,
    /// dL/dlogits, zero at masked rows.
    pub dlogits: Vec<T>,
    pub n_targets: usize,
    pub n_correct: usize,
}

/// (logit row, target token) pairs for one sequence: the last prefix row
/// predicts the first material token and each material row predicts its
/// successor. Prefix-internal rows are excluded.
pub fn target_rows(prefix_len: usize, tokens: &[TokenId]) -> Vec<(usize, TokenId)> {
    let first = if prefix_len > 0 { 0 } else { 1 };
    (first..tokens.len()).map(|t| (prefix_len + t - 1, tokens[t])).collect()
}

/// Masked next-token cross-entropy for one sequence's logits
/// (`(prefix_len + L) × vocab`).
pub fn masked_ce_loss<T: Real>(
    logits: &[T],
    vocab: usize,
    tokens: &[TokenId],
    prefix_len: usize,
) -> Result<LossOutput<T>, TrainError> {
    let span = SeqSpan { start: 0, prefix_len, len: prefix_len + tokens.len() };
    batch_ce_loss(logits, vocab, &[span], &[tokens])
}

/// Masked cross-entropy over a packed batch, averaged over every target.
pub fn batch_ce_loss<T: Real>(
    logits: &[T],
    vocab: usize,
    spans: &[SeqSpan],
    tokens: &[&[TokenId]],
) -> Result<LossOutput<T>, TrainError> {
    let mut targets = Vec::new();
    for (span, toks) in spans.iter().zip(tokens) {
        if toks.len() < 2 {
            return Err(TrainError::EmptyTargets);
        }
        for (row, t) in target_rows(span.prefix_len, toks) {
            targets.push((span.start + row, t as usize));
        }
    }
    let n = targets.len();
    let inv_n = 1.0 / n as f64;
    let mut dlogits = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    let mut correct = 0;
    for (row, t) in targets {
        let z = &logits[row * vocab..(row + 1) * vocab];
        let (mut arg, mut max) = (0, f64::NEG_INFINITY);
        for (i, v) in z.iter().enumerate() {
            let v = v.f64();
            if v > max {
                max = v;
                arg = i;
            }
        }
        if arg == t {
            correct += 1;
        }
        let sum: f64 = z.iter().map(|v| (v.f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - z[t].f64();
        let d = &mut dlogits[row * vocab..(row + 1) * vocab];
        for (g, v) in d.iter_mut().zip(z) {
            *g = T::of((v.f64() - lse).exp() * inv_n);
        }
        d[t] = d[t] - T::of(inv_n);
    }
    Ok(LossOutput { loss: total * inv_n, dlogits, n_targets: n, n_correct: correct })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_v() {
        let v = 17;
        let out = masked_ce_loss(&vec![0.0f64; 5 * v], v, &[0, 3, 4], 2).unwrap();
        assert!((out.loss - (v as f64).ln()).abs() < 1e-12);
        assert_eq!(out.n_targets, 3);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let v = 5;
        let toks = [0u32, 2, 4];
        let mut logits = vec![0.0f64; 4 * v];
        for (row, t) in target_rows(1, &toks) {
            logits[row * v + t as usize] = 50.0;
        }
        let out = masked_ce_loss(&logits, v, &toks, 1).unwrap();
        assert!(out.loss < 1e-15);
        assert_eq!(out.n_correct, 3);
    }

    #[test]
    fn prefix_rows_are_masked() {
        let v = 4;
        let toks = [1u32, 2];
        let mut logits: Vec<f64> = (0..5 * v).map(|i| (i as f64 * 0.3).sin()).collect();
        let a = masked_ce_loss(&logits, v, &toks, 3).unwrap();
        // rows 0 and 1 are prefix-internal
        for x in &mut logits[..2 * v] {
            *x += 9.0;
        }
        let b = masked_ce_loss(&logits, v, &toks, 3).unwrap();
        assert_eq!(a.loss, b.loss);
        assert!(a.dlogits[..2 * v].iter().all(|&g| g == 0.0));
        assert!(a.dlogits[4 * v..].iter().all(|&g| g == 0.0));
        assert_eq!(target_rows(3, &toks), vec![(2, 1), (3, 2)]);
        assert_eq!(target_rows(0, &toks), vec![(0, 2)]);
        assert!(matches!(masked_ce_loss(&logits, v, &[1], 3), Err(TrainError::EmptyTargets)));
    }

    #[test]
    fn gradient_matches_differences() {
        let v = 6;
        let toks = [0u32, 5, 2, 3];
        let logits: Vec<f64> = (0..6 * v).map(|i| (i as f64 * 0.77).cos()).collect();
        let out = masked_ce_loss(&logits, v, &toks, 2).unwrap();
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p[i] += 1e-6;
            let mut m = logits.clone();
            m[i] -= 1e-6;
            let num = (masked_ce_loss(&p, v, &toks, 2).unwrap().loss - masked_ce_loss(&m, v, &toks, 2).unwrap().loss) / 2e-6;
            assert!((num - out.dlogits[i]).abs() < 1e-8);
        }
    }
}
