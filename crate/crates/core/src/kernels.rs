//! Pure numeric kernels on flat row-major f64 buffers.
//!
//! Both the recording tape ([`crate::tape`]) and the allocation-light
//! inference paths call into these functions, so the two routes produce
//! bit-identical outputs. Keep the accumulation order of every kernel
//! stable: several tests assert exact equality between the routes.

use crate::mixing::BoundaryMode;

/// C[m x n] += is not supported; out is overwritten. Loop order is i-k-j so
/// the innermost loop runs over contiguous memory of both B and C.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * b_pj;
            }
        }
    }
}

/// out[t x dout] = x[t x din] * w[din x dout] + b[dout] broadcast per row.
pub fn affine(x: &[f64], w: &[f64], b: &[f64], t: usize, din: usize, dout: usize, out: &mut [f64]) {
    debug_assert_eq!(b.len(), dout);
    matmul(x, w, t, din, dout, out);
    for r in 0..t {
        let row = &mut out[r * dout..(r + 1) * dout];
        for (o, &bias) in row.iter_mut().zip(b) {
            *o += bias;
        }
    }
}

pub fn transpose(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

/// C[m x n] = A[m x k] * B[n x k]^T. Backward-pass helper.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// C[m x n] += A[k x m]^T * B[k x n]. Accumulates; backward-pass helper.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut out[i * n..(i + 1) * n];
            for (c, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c += a_pi * b_pj;
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gaussian CDF, exact erf form.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// GeLU: x * Phi(x) with the exact Gaussian CDF (not the tanh approximation).
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu_vec(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = gelu(v);
    }
}

/// Max-subtracted softmax of one row, written in place over `row`.
pub fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise log-softmax: y = x - logsumexp(x), max-subtracted.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Mean over the first `valid` rows of x[t x d]; rows beyond `valid`
/// contribute nothing to sum or count.
pub fn masked_mean_rows(x: &[f64], t: usize, d: usize, valid: usize, out: &mut [f64]) {
    debug_assert!(valid >= 1 && valid <= t);
    debug_assert_eq!(out.len(), d);
    out.fill(0.0);
    for r in 0..valid {
        let row = &x[r * d..(r + 1) * d];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / valid as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Sliding-window mean over rows via prefix sums, O(t * d).
///
/// For each valid row t the window covers rows [t-k, t+k] clipped to the
/// valid range. `ZeroPad` divides by the full 2k+1 (out-of-range rows count
/// as zeros); `ValidCount` divides by the number of in-range valid rows.
/// Rows at or beyond `valid` are zero. When `inv_norms` is given it receives
/// the per-row normalizer actually used (zeros for masked rows).
#[allow(clippy::too_many_arguments)]
pub fn windowed_mean_rows(
    x: &[f64],
    t: usize,
    d: usize,
    valid: usize,
    k: usize,
    mode: BoundaryMode,
    out: &mut [f64],
    mut inv_norms: Option<&mut [f64]>,
) {
    debug_assert!(valid >= 1 && valid <= t);
    debug_assert_eq!(out.len(), t * d);
    out.fill(0.0);
    if let Some(n) = inv_norms.as_deref_mut() {
        n.fill(0.0);
    }
    // prefix[r] = sum of rows 0..r, so a window sum is one subtraction.
    let mut prefix = vec![0.0; (valid + 1) * d];
    for r in 0..valid {
        let (done, rest) = prefix.split_at_mut((r + 1) * d);
        let prev = &done[r * d..];
        let row = &x[r * d..(r + 1) * d];
        for c in 0..d {
            rest[c] = prev[c] + row[c];
        }
    }
    for r in 0..valid {
        let lo = r.saturating_sub(k);
        let hi = (r + k).min(valid - 1);
        let inv = match mode {
            BoundaryMode::ZeroPad => 1.0 / (2 * k + 1) as f64,
            BoundaryMode::ValidCount => 1.0 / (hi - lo + 1) as f64,
        };
        if let Some(n) = inv_norms.as_deref_mut() {
            n[r] = inv;
        }
        let top = &prefix[(hi + 1) * d..(hi + 2) * d];
        let bot = &prefix[lo * d..(lo + 1) * d];
        let row = &mut out[r * d..(r + 1) * d];
        for c in 0..d {
            row[c] = (top[c] - bot[c]) * inv;
        }
    }
}

/// One row of masked scaled-dot-product attention probabilities.
///
/// scores[j] = scale * <q_row, k[j]> for j < valid, then a max-subtracted
/// softmax over those j. `probs_row` must have length t; entries at or
/// beyond `valid` stay zero.
pub fn attention_probs_row(
    q_row: &[f64],
    keys: &[f64],
    dh: usize,
    valid: usize,
    scale: f64,
    probs_row: &mut [f64],
) {
    debug_assert_eq!(q_row.len(), dh);
    probs_row.fill(0.0);
    for j in 0..valid {
        let k_row = &keys[j * dh..(j + 1) * dh];
        let mut dot = 0.0;
        for (a, b) in q_row.iter().zip(k_row) {
            dot += a * b;
        }
        probs_row[j] = dot * scale;
    }
    softmax_row_inplace(&mut probs_row[..valid]);
}

/// Accumulate one context row: ctx += sum_j probs[j] * values[j], ascending j.
/// Matches the per-element order of [`matmul`] so routes stay bit-identical.
pub fn attention_context_row(probs_row: &[f64], values: &[f64], dh: usize, ctx_row: &mut [f64]) {
    ctx_row.fill(0.0);
    for (j, &p) in probs_row.iter().enumerate() {
        let v_row = &values[j * dh..(j + 1) * dh];
        for (c, &v) in ctx_row.iter_mut().zip(v_row) {
            *c += p * v;
        }
    }
}

/// Row-wise layer normalization with learned gain/bias.
/// Returns per-row (mean, inv_std) when `stats` is given.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows(
    x: &[f64],
    t: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
    mut stats: Option<&mut [f64]>,
) {
    debug_assert_eq!(gamma.len(), d);
    debug_assert_eq!(beta.len(), d);
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        if let Some(s) = stats.as_deref_mut() {
            s[2 * r] = mean;
            s[2 * r + 1] = inv_std;
        }
        let o = &mut out[r * d..(r + 1) * d];
        for c in 0..d {
            o[c] = (row[c] - mean) * inv_std * gamma[c] + beta[c];
        }
    }
}

/// Levenshtein distance between two label sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Textbook i-j-k triple loop, deliberately different from the shipped
    /// kernel's loop order.
    fn matmul_triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 4];
        matmul(&eye, &x, 2, 2, 2, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn matmul_projector() {
        let p = vec![1.0, 0.0, 0.0, 0.0];
        let v = vec![5.0, 7.0];
        let mut out = vec![0.0; 2];
        matmul(&p, &v, 2, 2, 1, &mut out);
        assert_eq!(out, vec![5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (m, k, n) = (
                rng.gen_range(1..=16),
                rng.gen_range(1..=16),
                rng.gen_range(1..=16),
            );
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut got = vec![0.0; m * n];
            matmul(&a, &b, m, k, n, &mut got);
            let want = matmul_triple_loop(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        assert!((gelu(1.0) - 0.841345).abs() < 1e-6);
        // gelu(x) - gelu(-x) == x * (Phi(x) + Phi(-x)) == x
        assert!((gelu(0.7) - gelu(-0.7) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut row = vec![0.0, 0.0, 0.0];
        softmax_row_inplace(&mut row);
        for v in &row {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut big = vec![1000.0, 0.0];
        softmax_row_inplace(&mut big);
        assert!(big[0].is_finite());
        assert!((big[0] - 1.0).abs() < 1e-12);
        assert!(big[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..=20);
            let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            softmax_row_inplace(&mut row);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn windowed_mean_zero_pad_hand_case() {
        // H = [1, 2, 3] (d = 1), k = 1, zero-pad: [(0+1+2)/3, (1+2+3)/3, (2+3+0)/3]
        let x = vec![1.0, 2.0, 3.0];
        let mut out = vec![0.0; 3];
        windowed_mean_rows(&x, 3, 1, 3, 1, BoundaryMode::ZeroPad, &mut out, None);
        let want = [1.0, 2.0, 5.0 / 3.0];
        for (o, w) in out.iter().zip(&want) {
            assert!((o - w).abs() < 1e-15);
        }
    }

    #[test]
    fn windowed_mean_valid_count_hand_case() {
        let x = vec![1.0, 2.0, 3.0];
        let mut out = vec![0.0; 3];
        windowed_mean_rows(&x, 3, 1, 3, 1, BoundaryMode::ValidCount, &mut out, None);
        let want = [1.5, 2.0, 2.5];
        for (o, w) in out.iter().zip(&want) {
            assert!((o - w).abs() < 1e-15);
        }
    }

    #[test]
    fn windowed_mean_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..50usize {
            let t = rng.gen_range(1..=200);
            let d = rng.gen_range(1..=8);
            let valid = rng.gen_range(1..=t);
            let k = [3usize, 5, 7, 9][case % 4];
            let mode = if case % 2 == 0 {
                BoundaryMode::ValidCount
            } else {
                BoundaryMode::ZeroPad
            };
            let x: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut got = vec![0.0; t * d];
            windowed_mean_rows(&x, t, d, valid, k, mode, &mut got, None);
            let want = crate::oracles::windowed_mean_naive(&x, t, d, valid, k, mode);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0];
        let gamma = vec![1.0; 4];
        let beta = vec![0.0; 4];
        let mut out = vec![0.0; 8];
        layer_norm_rows(&x, 2, 4, &gamma, &beta, 1e-5, &mut out, None);
        for r in 0..2 {
            let row = &out[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
    }
}
