//! Deliberately naive reference implementations.
//!
//! These exist to check the fast paths and must stay independent of them:
//! no prefix sums, no recursions, no shared code with the implementations
//! they verify. The oracle suites (tests and the `oracle` subcommand) and
//! several unit tests call them.

use crate::mixing::BoundaryMode;

/// O(t * k) double-loop sliding-window mean over rows.
pub fn windowed_mean_naive(
    x: &[f64],
    t: usize,
    d: usize,
    valid: usize,
    k: usize,
    mode: BoundaryMode,
) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for r in 0..valid {
        let lo = r.saturating_sub(k);
        let hi = (r + k).min(valid - 1);
        let mut count = 0usize;
        for j in lo..=hi {
            for c in 0..d {
                out[r * d + c] += x[j * d + c];
            }
            count += 1;
        }
        let norm = match mode {
            BoundaryMode::ZeroPad => (2 * k + 1) as f64,
            BoundaryMode::ValidCount => count as f64,
        };
        for c in 0..d {
            out[r * d + c] /= norm;
        }
    }
    out
}

/// Explicit-loop mean over the first `valid` rows.
pub fn mean_rows_naive(x: &[f64], d: usize, valid: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for r in 0..valid {
        for c in 0..d {
            out[c] += x[r * d + c];
        }
    }
    for o in out.iter_mut() {
        *o /= valid as f64;
    }
    out
}

/// CTC loss by exhaustive enumeration: walk all v^t frame labelings,
/// collapse each (merge repeats, then drop blanks), and sum the path
/// probabilities of those that match the target.
pub fn ctc_loss_enumeration(
    log_probs: &[f64],
    t: usize,
    v: usize,
    labels: &[usize],
    blank: usize,
) -> f64 {
    let mut total = 0.0f64;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &c in &path {
            if c != prev {
                if c != blank {
                    collapsed.push(c);
                }
                prev = c;
            }
        }
        if collapsed == labels {
            let logp: f64 = path
                .iter()
                .enumerate()
                .map(|(step, &c)| log_probs[step * v + c])
                .sum();
            total += logp.exp();
        }
        // odometer increment over the v^t space
        let mut pos = 0;
        loop {
            if pos == t {
                return -total.ln();
            }
            path[pos] += 1;
            if path[pos] < v {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Per-pair multi-head attention reference: explicit score matrix, explicit
/// softmax, explicit weighted sum, one head at a time.
///
/// `q`, `k`, `v` are t x d projections already including bias; the output is
/// the concatenation of per-head contexts (no output projection).
pub fn attention_context_naive(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    n_heads: usize,
    valid: usize,
) -> Vec<f64> {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..valid {
            let mut scores = vec![f64::NEG_INFINITY; valid];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[i * d + off + c] * k[j * d + off + c];
                }
                *s = dot * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut exp_sum = 0.0;
            let mut weights = vec![0.0; valid];
            for (w, &s) in weights.iter_mut().zip(&scores) {
                *w = (s - max).exp();
                exp_sum += *w;
            }
            for j in 0..valid {
                let p = weights[j] / exp_sum;
                for c in 0..dh {
                    out[i * d + off + c] += p * v[j * d + off + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_on_a_known_two_frame_case() {
        // V=2 (blank=0, a=1), T=2, labels=[a]. Paths collapsing to [a]:
        // (a,a), (a,blank), (blank,a). With per-frame p(a)=0.6, p(blank)=0.4:
        // P = 0.36 + 0.24 + 0.24 = 0.84.
        let lp = [
            0.4f64.ln(),
            0.6f64.ln(),
            0.4f64.ln(),
            0.6f64.ln(),
        ];
        let loss = ctc_loss_enumeration(&lp, 2, 2, &[1], 0);
        assert!((loss - (-0.84f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn mean_rows_ignores_padding() {
        let x = [1.0, 2.0, 100.0];
        let m = mean_rows_naive(&x, 1, 2);
        assert_eq!(m, vec![1.5]);
    }
}
