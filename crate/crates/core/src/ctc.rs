//! Connectionist temporal classification: forward recursion in log space,
//! the matching gradient via the beta recursion, and greedy decoding.

use crate::error::{Error, Result};

/// log(exp(a) + exp(b)) without overflow; handles -inf cleanly.
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Extended label sequence with blanks interleaved: blank l1 blank l2 ... blank.
fn extended(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Frames needed for labels to be alignable: one per label plus one blank
/// between each adjacent repeat.
pub fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

#[derive(Debug)]
pub struct CtcForward {
    pub loss: f64,
    pub log_p: f64,
    /// t x s alpha table in log space, s = 2 * labels + 1.
    pub alphas: Vec<f64>,
}

/// Forward recursion over `log_probs` (t x v rows, log-softmax normalized).
///
/// Fails with an infeasible-target error when the labels cannot fit in t
/// frames, rather than returning an infinite loss.
pub fn forward_log(
    log_probs: &[f64],
    t: usize,
    v: usize,
    labels: &[usize],
    blank: usize,
) -> Result<CtcForward> {
    if blank >= v {
        return Err(Error::Contract {
            op: "ctc_loss",
            msg: format!("blank id {blank} out of vocabulary {v}"),
        });
    }
    for &l in labels {
        if l >= v {
            return Err(Error::Contract {
                op: "ctc_loss",
                msg: format!("label id {l} out of vocabulary {v}"),
            });
        }
        if l == blank {
            return Err(Error::Contract {
                op: "ctc_loss",
                msg: "labels must not contain the blank id".into(),
            });
        }
    }
    if t == 0 {
        return Err(Error::EmptySequence { op: "ctc_loss" });
    }
    let needed = min_frames(labels);
    if needed > t {
        return Err(Error::InfeasibleTarget {
            target_len: labels.len(),
            min_frames: needed,
            frames: t,
        });
    }

    let ext = extended(labels, blank);
    let s = ext.len();
    let mut alphas = vec![f64::NEG_INFINITY; t * s];

    alphas[0] = log_probs[blank];
    if s > 1 {
        alphas[1] = log_probs[ext[1]];
    }
    for step in 1..t {
        let (prev_rows, cur_rows) = alphas.split_at_mut(step * s);
        let prev = &prev_rows[(step - 1) * s..];
        let cur = &mut cur_rows[..s];
        for j in 0..s {
            let mut acc = prev[j];
            if j >= 1 {
                acc = log_add(acc, prev[j - 1]);
            }
            // Skipping two states is allowed when the current state is a
            // label that differs from the label two states back.
            if j >= 2 && ext[j] != blank && ext[j] != ext[j - 2] {
                acc = log_add(acc, prev[j - 2]);
            }
            cur[j] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + log_probs[step * v + ext[j]]
            };
        }
    }

    let last = &alphas[(t - 1) * s..];
    let mut log_p = last[s - 1];
    if s > 1 {
        log_p = log_add(log_p, last[s - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }
    Ok(CtcForward {
        loss: -log_p,
        log_p,
        alphas,
    })
}

/// Gradient of the loss (-log P) with respect to `log_probs`, using the
/// saved alpha table and a fresh beta recursion.
pub fn backward_log(
    log_probs: &[f64],
    t: usize,
    v: usize,
    labels: &[usize],
    blank: usize,
    alphas: &[f64],
    log_p: f64,
) -> Vec<f64> {
    let ext = extended(labels, blank);
    let s = ext.len();

    let mut betas = vec![f64::NEG_INFINITY; t * s];
    betas[(t - 1) * s + s - 1] = log_probs[(t - 1) * v + ext[s - 1]];
    if s > 1 {
        betas[(t - 1) * s + s - 2] = log_probs[(t - 1) * v + ext[s - 2]];
    }
    for step in (0..t - 1).rev() {
        let (cur_rows, next_rows) = betas.split_at_mut((step + 1) * s);
        let next = &next_rows[..s];
        let cur = &mut cur_rows[step * s..];
        for j in 0..s {
            let mut acc = next[j];
            if j + 1 < s {
                acc = log_add(acc, next[j + 1]);
            }
            if j + 2 < s && ext[j + 2] != blank && ext[j + 2] != ext[j] {
                acc = log_add(acc, next[j + 2]);
            }
            cur[j] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + log_probs[step * v + ext[j]]
            };
        }
    }

    // dloss/dlp[t][c] = -exp(logsumexp_{j: ext[j]=c} (alpha + beta - lp) - log_p),
    // where alpha and beta both include the emission at t, so it is divided
    // back out once.
    let mut grad = vec![0.0; t * v];
    for step in 0..t {
        let mut per_class = vec![f64::NEG_INFINITY; v];
        for j in 0..s {
            let a = alphas[step * s + j];
            let b = betas[step * s + j];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            let c = ext[j];
            let gamma = a + b - log_probs[step * v + c];
            per_class[c] = log_add(per_class[c], gamma);
        }
        for c in 0..v {
            if per_class[c] != f64::NEG_INFINITY {
                grad[step * v + c] = -((per_class[c] - log_p).exp());
            }
        }
    }
    grad
}

/// Greedy CTC decode: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode(log_probs: &[f64], t: usize, v: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for step in 0..t {
        let row = &log_probs[step * v..(step + 1) * v];
        let mut best = 0;
        for c in 1..v {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best != prev && best != blank {
            out.push(best);
        }
        prev = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;

    fn uniform_log_probs(t: usize, v: usize) -> Vec<f64> {
        vec![(1.0 / v as f64).ln(); t * v]
    }

    #[test]
    fn single_frame_single_label() {
        // T=1, V=2, uniform: the only valid path emits the label, p = 0.5.
        let lp = uniform_log_probs(1, 2);
        let fwd = forward_log(&lp, 1, 2, &[1], 0).unwrap();
        assert!((fwd.loss - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let lp = uniform_log_probs(2, 3);
        let err = forward_log(&lp, 2, 3, &[1, 1], 0).unwrap_err();
        match err {
            Error::InfeasibleTarget {
                target_len,
                min_frames,
                frames,
            } => {
                assert_eq!((target_len, min_frames, frames), (2, 3, 2));
            }
            other => panic!("expected infeasible target, got {other}"),
        }
        assert!(forward_log(&uniform_log_probs(3, 3), 3, 3, &[1, 1], 0).is_ok());
    }

    #[test]
    fn rejects_blank_in_labels() {
        let lp = uniform_log_probs(3, 3);
        assert!(forward_log(&lp, 3, 3, &[0], 0).is_err());
    }

    #[test]
    fn matches_enumeration_oracle_on_random_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..60 {
            let t = rng.gen_range(1..=6);
            let v = rng.gen_range(2..=4);
            let max_len = t.min(3);
            let len = rng.gen_range(1..=max_len);
            let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
            if min_frames(&labels) > t {
                continue;
            }
            let mut lp = vec![0.0; t * v];
            for row in 0..t {
                let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
                crate::kernels::log_softmax_row(&logits, &mut lp[row * v..(row + 1) * v]);
            }
            let fwd = forward_log(&lp, t, v, &labels, 0).unwrap();
            let oracle = oracles::ctc_loss_enumeration(&lp, t, v, &labels, 0);
            assert!(
                (fwd.loss - oracle).abs() < 1e-9,
                "recursion {} vs enumeration {}",
                fwd.loss,
                oracle
            );
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..40 {
            let t = rng.gen_range(2..=6);
            let v = rng.gen_range(2..=4);
            let mut lp = vec![0.0; t * v];
            for row in 0..t {
                let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
                crate::kernels::log_softmax_row(&logits, &mut lp[row * v..(row + 1) * v]);
            }
            let fwd = forward_log(&lp, t, v, &[1], 0).unwrap();
            assert!(fwd.loss >= -1e-12);
        }
    }

    #[test]
    fn loss_zero_only_when_mass_is_on_target() {
        // All probability on [a, blank]: every path collapses to [a].
        let mut lp = vec![f64::NEG_INFINITY; 4];
        lp[1] = 0.0; // t=0 emits a with p=1
        lp[2] = 0.0; // t=1 emits blank with p=1
        let fwd = forward_log(&lp, 2, 2, &[1], 0).unwrap();
        assert!(fwd.loss.abs() < 1e-12);
    }

    #[test]
    fn greedy_decode_collapses_and_drops_blanks() {
        // argmax path: a a blank a -> a a
        let path = [1usize, 1, 0, 1];
        let v = 2;
        let mut lp = vec![-10.0; 4 * v];
        for (t, &c) in path.iter().enumerate() {
            lp[t * v + c] = 0.0;
        }
        assert_eq!(greedy_decode(&lp, 4, v, 0), vec![1, 1]);
    }

    #[test]
    fn greedy_decode_all_blank_is_empty() {
        let v = 3;
        let mut lp = vec![-10.0; 5 * v];
        for t in 0..5 {
            lp[t * v] = 0.0;
        }
        assert!(greedy_decode(&lp, 5, v, 0).is_empty());
    }
}
