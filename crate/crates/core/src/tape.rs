//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node holding its output buffer plus any
//! payload its backward rule needs. Nodes only ever reference earlier
//! nodes, so the tape is acyclic by construction and the backward pass is
//! a single reverse sweep that visits each node exactly once.
//!
//! The tape doubles as the activation-memory meter: `activation_bytes`
//! sums every forward buffer and saved payload it allocates, and `macs`
//! counts scalar multiplies of the forward pass. The scaling benchmarks
//! and the memory-accounting cross-checks read both.
//!
//! A tape lives for one forward/backward pass on one thread.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ctc;
use crate::error::{Error, Result};
use crate::kernels;
use crate::mixing::BoundaryMode;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to one tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { x: VarId, factor: f64 },
    Matmul { a: VarId, b: VarId },
    Affine { x: VarId, w: VarId, b: VarId },
    Gelu { x: VarId },
    ConcatCols { parts: Vec<VarId> },
    ConcatRows { parts: Vec<VarId> },
    SliceCols { x: VarId, start: usize },
    SliceRows { x: VarId, start: usize },
    Softmax { x: VarId },
    LogSoftmax { x: VarId },
    RowMask { x: VarId, valid: usize },
    TileRow { x: VarId },
    MaskedMeanRows { x: VarId, valid: usize },
    WindowedMean {
        x: VarId,
        valid: usize,
        k: usize,
        /// Per-row normalizer used in the forward pass; reused by backward.
        inv_norms: Vec<f64>,
    },
    AttnProbs {
        q: VarId,
        k: VarId,
        valid: usize,
        scale: f64,
    },
    WeightedSum { parts: Vec<VarId>, weights: VarId },
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        /// Interleaved per-row (mean, inv_std).
        stats: Vec<f64>,
    },
    Dropout {
        x: VarId,
        /// Entries are 0 or 1/(1-p).
        mask: Vec<f64>,
    },
    SumAll { x: VarId },
    Ctc {
        log_probs: VarId,
        labels: Vec<usize>,
        blank: usize,
        /// Forward-recursion table, reused by the backward beta sweep.
        alphas: Vec<f64>,
        log_p: f64,
    },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, VarId>,
    activation_bytes: usize,
    macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes of forward activations and saved payloads allocated so far.
    pub fn activation_bytes(&self) -> usize {
        self.activation_bytes
    }

    /// Scalar multiplies counted across all forward ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn shape(&self, v: VarId) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: VarId) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: VarId) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.data.clone()).expect("tape node shape")
    }

    pub fn item(&self, v: VarId) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> VarId {
        debug_assert_eq!(rows * cols, data.len());
        self.activation_bytes += 8 * data.len();
        self.activation_bytes += 8 * match &op {
            Op::WindowedMean { inv_norms, .. } => inv_norms.len(),
            Op::LayerNorm { stats, .. } => stats.len(),
            Op::Dropout { mask, .. } => mask.len(),
            Op::Ctc { alphas, .. } => alphas.len(),
            _ => 0,
        };
        self.nodes.push(Node {
            op,
            rows,
            cols,
            data,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn check_finite(&self, v: VarId, op: &'static str) -> Result<VarId> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, t: &Tensor) -> VarId {
        debug_assert_eq!(t.shape().len(), 2);
        self.push(Op::Const, t.rows(), t.cols(), t.data().to_vec(), false)
    }

    /// Leaf bound to a stored parameter. The value is snapshotted; repeated
    /// calls for the same parameter return the same node so shared weights
    /// accumulate their gradient in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        debug_assert_eq!(p.value.shape().len(), 2);
        let v = self.push(
            Op::Param(id),
            p.value.rows(),
            p.value.cols(),
            p.value.data().to_vec(),
            p.trainable,
        );
        self.param_vars.insert(id, v);
        v
    }

    // ── Elementwise and linear algebra ──────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("add", a, b)?;
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(Op::Add { a, b }, r, c, data, needs);
        self.check_finite(v, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("sub", a, b)?;
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(Op::Sub { a, b }, r, c, data, needs);
        self.check_finite(v, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.macs += data.len() as u64;
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(Op::Mul { a, b }, r, c, data, needs);
        self.check_finite(v, "mul")
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> Result<VarId> {
        let (r, c) = self.shape(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        self.macs += data.len() as u64;
        let needs = self.needs(x);
        let v = self.push(Op::Scale { x, factor }, r, c, data, needs);
        self.check_finite(v, "scale")
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        self.macs += (m * ka * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(Op::Matmul { a, b }, m, n, out, needs);
        self.check_finite(v, "matmul")
    }

    /// x[t x din] * w[din x dout] + bias[1 x dout] broadcast over rows.
    pub fn affine(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (t, din) = self.shape(x);
        let (win, dout) = self.shape(w);
        let (br, bc) = self.shape(b);
        if din != win || br != 1 || bc != dout {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: vec![t, din],
                rhs: vec![win, dout],
            });
        }
        let mut out = vec![0.0; t * dout];
        kernels::affine(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            t,
            din,
            dout,
            &mut out,
        );
        self.macs += (t * din * dout) as u64;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let v = self.push(Op::Affine { x, w, b }, t, dout, out, needs);
        self.check_finite(v, "affine")
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        kernels::gelu_vec(&self.nodes[x.0].data, &mut out);
        let needs = self.needs(x);
        let v = self.push(Op::Gelu { x }, r, c, out, needs);
        self.check_finite(v, "gelu")
    }

    // ── Shape ops ───────────────────────────────────────────────────

    /// Concatenate along `axis` (0 = rows, 1 = cols).
    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Contract {
                op: "concat",
                msg: "needs at least one input".into(),
            });
        }
        match axis {
            0 => self.concat_rows(parts),
            1 => self.concat_cols(parts),
            other => Err(Error::Contract {
                op: "concat",
                msg: format!("axis {other} out of range for 2-d tensors"),
            }),
        }
    }

    fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        let (rows, _) = self.shape(parts[0]);
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat(axis=1)",
                    lhs: vec![rows, self.shape(parts[0]).1],
                    rhs: vec![r, c],
                });
            }
            total_cols += c;
        }
        let mut out = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let src = &self.nodes[p.0].data;
            for r in 0..rows {
                out[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            rows,
            total_cols,
            out,
            needs,
        ))
    }

    fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        let (_, cols) = self.shape(parts[0]);
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat(axis=0)",
                    lhs: vec![self.shape(parts[0]).0, cols],
                    rhs: vec![r, c],
                });
            }
            total_rows += r;
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows { parts: parts.to_vec() },
            total_rows,
            cols,
            out,
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::Contract {
                op: "slice_cols",
                msg: format!("range {start}..{} out of {cols} columns", start + len),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start }, rows, len, out, needs))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (rows, cols) = self.shape(x);
        if start + len > rows {
            return Err(Error::Contract {
                op: "slice_rows",
                msg: format!("range {start}..{} out of {rows} rows", start + len),
            });
        }
        let out = self.nodes[x.0].data[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start }, len, cols, out, needs))
    }

    /// Repeat a 1 x d row t times.
    pub fn tile_row(&mut self, x: VarId, t: usize) -> Result<VarId> {
        let (r, d) = self.shape(x);
        if r != 1 {
            return Err(Error::Contract {
                op: "tile_row",
                msg: format!("expected a single row, got {r}"),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(t * d);
        for _ in 0..t {
            out.extend_from_slice(src);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::TileRow { x }, t, d, out, needs))
    }

    /// Zero every row at or beyond `valid`.
    pub fn row_mask(&mut self, x: VarId, valid: usize) -> Result<VarId> {
        let (rows, cols) = self.shape(x);
        if valid == 0 || valid > rows {
            return Err(Error::Contract {
                op: "row_mask",
                msg: format!("valid length {valid} out of 1..={rows}"),
            });
        }
        let mut out = self.nodes[x.0].data.clone();
        out[valid * cols..].fill(0.0);
        let needs = self.needs(x);
        Ok(self.push(Op::RowMask { x, valid }, rows, cols, out, needs))
    }

    // ── Normalizations and reductions ───────────────────────────────

    /// Row-wise max-subtracted softmax.
    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        let (rows, cols) = self.shape(x);
        let mut out = self.nodes[x.0].data.clone();
        for r in 0..rows {
            kernels::softmax_row_inplace(&mut out[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(x);
        let v = self.push(Op::Softmax { x }, rows, cols, out, needs);
        self.check_finite(v, "softmax")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: VarId) -> Result<VarId> {
        let (rows, cols) = self.shape(x);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            kernels::log_softmax_row(&src[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(x);
        let v = self.push(Op::LogSoftmax { x }, rows, cols, out, needs);
        self.check_finite(v, "log_softmax")
    }

    /// Mean over the first `valid` rows; masked rows contribute nothing to
    /// sum or count. Output is 1 x d.
    pub fn masked_mean_rows(&mut self, x: VarId, valid: usize) -> Result<VarId> {
        let (rows, cols) = self.shape(x);
        if valid == 0 {
            return Err(Error::EmptySequence {
                op: "masked_mean_rows",
            });
        }
        if valid > rows {
            return Err(Error::Contract {
                op: "masked_mean_rows",
                msg: format!("valid length {valid} exceeds {rows} rows"),
            });
        }
        let mut out = vec![0.0; cols];
        kernels::masked_mean_rows(&self.nodes[x.0].data, rows, cols, valid, &mut out);
        self.macs += cols as u64;
        let needs = self.needs(x);
        let v = self.push(Op::MaskedMeanRows { x, valid }, 1, cols, out, needs);
        self.check_finite(v, "masked_mean_rows")
    }

    /// Sliding-window mean over rows (prefix sums, O(t * d)).
    pub fn windowed_mean(
        &mut self,
        x: VarId,
        valid: usize,
        k: usize,
        mode: BoundaryMode,
    ) -> Result<VarId> {
        let (rows, cols) = self.shape(x);
        if valid == 0 {
            return Err(Error::EmptySequence { op: "windowed_mean" });
        }
        if valid > rows {
            return Err(Error::Contract {
                op: "windowed_mean",
                msg: format!("valid length {valid} exceeds {rows} rows"),
            });
        }
        let mut out = vec![0.0; rows * cols];
        let mut inv_norms = vec![0.0; rows];
        kernels::windowed_mean_rows(
            &self.nodes[x.0].data,
            rows,
            cols,
            valid,
            k,
            mode,
            &mut out,
            Some(&mut inv_norms),
        );
        self.macs += (valid * cols) as u64;
        let needs = self.needs(x);
        let v = self.push(
            Op::WindowedMean {
                x,
                valid,
                k,
                inv_norms,
            },
            rows,
            cols,
            out,
            needs,
        );
        self.check_finite(v, "windowed_mean")
    }

    /// Fused masked scaled-dot-product attention probabilities for one head:
    /// softmax over scale * q k^T restricted to the first `valid` rows and
    /// columns. Only the T x T probability matrix is retained.
    pub fn attn_probs(&mut self, q: VarId, k: VarId, valid: usize, scale: f64) -> Result<VarId> {
        let (tq, dq) = self.shape(q);
        let (tk, dk) = self.shape(k);
        if dq != dk || tq != tk {
            return Err(Error::ShapeMismatch {
                op: "attn_probs",
                lhs: vec![tq, dq],
                rhs: vec![tk, dk],
            });
        }
        if valid == 0 || valid > tq {
            return Err(Error::EmptySequence { op: "attn_probs" });
        }
        let mut out = vec![0.0; tq * tq];
        {
            let qd = &self.nodes[q.0].data;
            let kd = &self.nodes[k.0].data;
            for i in 0..valid {
                kernels::attention_probs_row(
                    &qd[i * dq..(i + 1) * dq],
                    kd,
                    dq,
                    valid,
                    scale,
                    &mut out[i * tq..(i + 1) * tq],
                );
            }
        }
        self.macs += (valid * valid * dq) as u64;
        let needs = self.needs(q) || self.needs(k);
        let v = self.push(Op::AttnProbs { q, k, valid, scale }, tq, tq, out, needs);
        self.check_finite(v, "attn_probs")
    }

    /// sum_i weights[i] * parts[i]; `weights` is a 1 x n row.
    pub fn weighted_sum(&mut self, parts: &[VarId], weights: VarId) -> Result<VarId> {
        let (wr, wc) = self.shape(weights);
        if wr != 1 || wc != parts.len() {
            return Err(Error::Contract {
                op: "weighted_sum",
                msg: format!("{} inputs but weight shape is {wr}x{wc}", parts.len()),
            });
        }
        if parts.is_empty() {
            return Err(Error::Contract {
                op: "weighted_sum",
                msg: "needs at least one input".into(),
            });
        }
        let (rows, cols) = self.shape(parts[0]);
        for &p in parts {
            let (r, c) = self.shape(p);
            if (r, c) != (rows, cols) {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
        }
        let mut out = vec![0.0; rows * cols];
        for (i, &p) in parts.iter().enumerate() {
            let w = self.nodes[weights.0].data[i];
            for (o, &v) in out.iter_mut().zip(&self.nodes[p.0].data) {
                *o += w * v;
            }
        }
        self.macs += (parts.len() * rows * cols) as u64;
        let needs = parts.iter().any(|&p| self.needs(p)) || self.needs(weights);
        let v = self.push(
            Op::WeightedSum {
                parts: parts.to_vec(),
                weights,
            },
            rows,
            cols,
            out,
            needs,
        );
        self.check_finite(v, "weighted_sum")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let (rows, cols) = self.shape(x);
        let (gr, gc) = self.shape(gamma);
        let (br, bc) = self.shape(beta);
        if gr != 1 || gc != cols || br != 1 || bc != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![rows, cols],
                rhs: vec![gr.max(br), gc.max(bc)],
            });
        }
        let mut out = vec![0.0; rows * cols];
        let mut stats = vec![0.0; 2 * rows];
        kernels::layer_norm_rows(
            &self.nodes[x.0].data,
            rows,
            cols,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            eps,
            &mut out,
            Some(&mut stats),
        );
        self.macs += (2 * rows * cols) as u64;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rows,
            cols,
            out,
            needs,
        );
        self.check_finite(v, "layer_norm")
    }

    /// Inverted-scaling dropout: each element is zeroed with probability
    /// `rate`, survivors are scaled by 1/(1-rate). Deterministic under the
    /// caller's seeded generator.
    pub fn dropout(&mut self, x: VarId, rate: f64, rng: &mut ChaCha8Rng) -> Result<VarId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract {
                op: "dropout",
                msg: format!("rate {rate} out of [0, 1)"),
            });
        }
        let (rows, cols) = self.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        self.macs += data.len() as u64;
        let needs = self.needs(x);
        let v = self.push(Op::Dropout { x, mask }, rows, cols, data, needs);
        self.check_finite(v, "dropout")
    }

    /// Sum of every element, as a 1 x 1 tensor.
    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        let v = self.push(Op::SumAll { x }, 1, 1, vec![total], needs);
        self.check_finite(v, "sum_all")
    }

    /// Connectionist temporal classification loss of one sequence.
    ///
    /// `log_probs` must hold log-softmax-normalized rows for exactly the
    /// valid frames. Returns the negative log-probability of all alignments
    /// collapsing to `labels`.
    pub fn ctc_loss(&mut self, log_probs: VarId, labels: &[usize], blank: usize) -> Result<VarId> {
        let (t, v) = self.shape(log_probs);
        let fwd = ctc::forward_log(&self.nodes[log_probs.0].data, t, v, labels, blank)?;
        let needs = self.needs(log_probs);
        let var = self.push(
            Op::Ctc {
                log_probs,
                labels: labels.to_vec(),
                blank,
                alphas: fwd.alphas,
                log_p: fwd.log_p,
            },
            1,
            1,
            vec![fwd.loss],
            needs,
        );
        self.check_finite(var, "ctc_loss")
    }

    fn same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of trainable parameters
    /// reachable from `loss` are accumulated (+=) into the store; every
    /// other parameter's gradient is left untouched.
    pub fn backward(&mut self, loss: VarId, store: &mut ParamStore) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.rows * n.cols != 1 {
            return Err(Error::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got {}x{}", n.rows, n.cols),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if let Op::Param(pid) = &self.nodes[id].op {
                if self.nodes[id].needs_grad {
                    store.accumulate_grad(*pid, &gout);
                }
                continue;
            }
            self.backprop_node(id, &gout, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: VarId, delta: &[f64]) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn backprop_node(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout);
                self.accumulate(grads, *b, gout);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gout);
                if self.needs(*b) {
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    let dx: Vec<f64> = gout.iter().map(|g| g * factor).collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.needs(*a) {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(gout, &self.nodes[b.0].data, m, n, k, &mut da);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(&self.nodes[a.0].data, gout, k, m, n, &mut db);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Affine { x, w, b } => {
                let (t, din) = self.shape(*x);
                let (_, dout) = self.shape(*w);
                if self.needs(*x) {
                    let mut dx = vec![0.0; t * din];
                    kernels::matmul_nt(gout, &self.nodes[w.0].data, t, dout, din, &mut dx);
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; din * dout];
                    kernels::matmul_tn_acc(&self.nodes[x.0].data, gout, din, t, dout, &mut dw);
                    self.accumulate(grads, *w, &dw);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; dout];
                    for r in 0..t {
                        for c in 0..dout {
                            db[c] += gout[r * dout + c];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .data
                        .iter()
                        .zip(gout)
                        .map(|(v, g)| g * kernels::gelu_grad(*v))
                        .collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::ConcatCols { parts } => {
                let total_cols = node.cols;
                let rows = node.rows;
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.shape(p);
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c].copy_from_slice(
                                &gout[r * total_cols + offset..r * total_cols + offset + c],
                            );
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let cols = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let (r, _) = self.shape(p);
                    if self.needs(p) {
                        self.accumulate(grads, p, &gout[offset * cols..(offset + r) * cols]);
                    }
                    offset += r;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (rows, cols) = self.shape(*x);
                    let len = node.cols;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&gout[r * len..(r + 1) * len]);
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let (rows, cols) = self.shape(*x);
                    let len = node.rows;
                    let mut dx = vec![0.0; rows * cols];
                    dx[start * cols..(start + len) * cols].copy_from_slice(gout);
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let (rows, cols) = (node.rows, node.cols);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let p = &node.data[r * cols..(r + 1) * cols];
                        let g = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = p[c] * (g[c] - dot);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::LogSoftmax { x } => {
                if self.needs(*x) {
                    let (rows, cols) = (node.rows, node.cols);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let y = &node.data[r * cols..(r + 1) * cols];
                        let g = &gout[r * cols..(r + 1) * cols];
                        let gsum: f64 = g.iter().sum();
                        for c in 0..cols {
                            dx[r * cols + c] = g[c] - y[c].exp() * gsum;
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::RowMask { x, valid } => {
                if self.needs(*x) {
                    let cols = node.cols;
                    let mut dx = gout.to_vec();
                    dx[valid * cols..].fill(0.0);
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::TileRow { x } => {
                if self.needs(*x) {
                    let (rows, cols) = (node.rows, node.cols);
                    let mut dx = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[c] += gout[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::MaskedMeanRows { x, valid } => {
                if self.needs(*x) {
                    let (rows, cols) = self.shape(*x);
                    let inv = 1.0 / *valid as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..*valid {
                        for c in 0..cols {
                            dx[r * cols + c] = gout[c] * inv;
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::WindowedMean {
                x,
                valid,
                k,
                inv_norms,
            } => {
                if self.needs(*x) {
                    // The adjoint of a symmetric-window mean is a windowed
                    // sum of the row-scaled upstream gradient.
                    let (rows, cols) = (node.rows, node.cols);
                    let v = *valid;
                    let mut weighted = vec![0.0; v * cols];
                    for r in 0..v {
                        let w = inv_norms[r];
                        for c in 0..cols {
                            weighted[r * cols + c] = gout[r * cols + c] * w;
                        }
                    }
                    let mut prefix = vec![0.0; (v + 1) * cols];
                    for r in 0..v {
                        for c in 0..cols {
                            prefix[(r + 1) * cols + c] = prefix[r * cols + c] + weighted[r * cols + c];
                        }
                    }
                    let mut dx = vec![0.0; rows * cols];
                    for j in 0..v {
                        let lo = j.saturating_sub(*k);
                        let hi = (j + k).min(v - 1);
                        for c in 0..cols {
                            dx[j * cols + c] = prefix[(hi + 1) * cols + c] - prefix[lo * cols + c];
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::AttnProbs { q, k, valid, scale } => {
                let t = node.rows;
                let (_, dh) = self.shape(*q);
                let v = *valid;
                let need_q = self.needs(*q);
                let need_k = self.needs(*k);
                if need_q || need_k {
                    let qd = &self.nodes[q.0].data;
                    let kd = &self.nodes[k.0].data;
                    let mut dq = vec![0.0; t * dh];
                    let mut dk = vec![0.0; t * dh];
                    let mut dscore = vec![0.0; v];
                    for i in 0..v {
                        let p = &node.data[i * t..i * t + v];
                        let g = &gout[i * t..i * t + v];
                        let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
                        for j in 0..v {
                            dscore[j] = p[j] * (g[j] - dot) * scale;
                        }
                        let qi = &qd[i * dh..(i + 1) * dh];
                        for j in 0..v {
                            let ds = dscore[j];
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kd[j * dh..(j + 1) * dh];
                            for c in 0..dh {
                                dq[i * dh + c] += ds * kj[c];
                                dk[j * dh + c] += ds * qi[c];
                            }
                        }
                    }
                    if need_q {
                        self.accumulate(grads, *q, &dq);
                    }
                    if need_k {
                        self.accumulate(grads, *k, &dk);
                    }
                }
            }
            Op::WeightedSum { parts, weights } => {
                let w = &self.nodes[weights.0].data;
                for (i, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        let dp: Vec<f64> = gout.iter().map(|g| g * w[i]).collect();
                        self.accumulate(grads, p, &dp);
                    }
                }
                if self.needs(*weights) {
                    let mut dw = vec![0.0; parts.len()];
                    for (i, &p) in parts.iter().enumerate() {
                        dw[i] = gout
                            .iter()
                            .zip(&self.nodes[p.0].data)
                            .map(|(g, x)| g * x)
                            .sum();
                    }
                    self.accumulate(grads, *weights, &dw);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (rows, cols) = (node.rows, node.cols);
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                let inv_d = 1.0 / cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let mean = stats[2 * r];
                    let inv_std = stats[2 * r + 1];
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let g = &gout[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * inv_std;
                        let dxhat = g[c] * gd[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[c] += g[c] * xhat;
                        dbeta[c] += g[c];
                    }
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * inv_std;
                        let dxhat = g[c] * gd[c];
                        dx[r * cols + c] =
                            inv_std * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &dbeta);
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let dx: Vec<f64> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let (rows, cols) = self.shape(*x);
                    let dx = vec![gout[0]; rows * cols];
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Ctc {
                log_probs,
                labels,
                blank,
                alphas,
                log_p,
            } => {
                if self.needs(*log_probs) {
                    let (t, v) = self.shape(*log_probs);
                    let dlp = ctc::backward_log(
                        &self.nodes[log_probs.0].data,
                        t,
                        v,
                        labels,
                        *blank,
                        alphas,
                        *log_p,
                    );
                    let dx: Vec<f64> = dlp.iter().map(|d| d * gout[0]).collect();
                    self.accumulate(grads, *log_probs, &dx);
                }
            }
        }
    }
}
