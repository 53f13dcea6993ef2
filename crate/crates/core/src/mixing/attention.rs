//! Multi-head scaled dot-product self-attention, the O(T^2) baseline.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels;
use crate::mixing::MixingConfig;
use crate::param::{glorot, zeros_row, ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub cfg: MixingConfig,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl AttentionBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: MixingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let wq = store.add(&format!("{prefix}.wq"), glorot(rng, d, d), true)?;
        let bq = store.add(&format!("{prefix}.bq"), zeros_row(d), true)?;
        let wk = store.add(&format!("{prefix}.wk"), glorot(rng, d, d), true)?;
        let bk = store.add(&format!("{prefix}.bk"), zeros_row(d), true)?;
        let wv = store.add(&format!("{prefix}.wv"), glorot(rng, d, d), true)?;
        let bv = store.add(&format!("{prefix}.bv"), zeros_row(d), true)?;
        let wo = store.add(&format!("{prefix}.wo"), glorot(rng, d, d), true)?;
        let bo = store.add(&format!("{prefix}.bo"), zeros_row(d), true)?;
        Ok(AttentionBlock {
            cfg,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
        ]
    }

    /// Recording forward pass. Each head retains its T x T probability
    /// matrix on the tape, which is what makes the baseline quadratic in
    /// activation memory.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        valid: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<VarId> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let wq = tape.param(store, self.wq);
        let bq = tape.param(store, self.bq);
        let wk = tape.param(store, self.wk);
        let bk = tape.param(store, self.bk);
        let wv = tape.param(store, self.wv);
        let bv = tape.param(store, self.bv);

        let q = tape.affine(x, wq, bq)?;
        let k = tape.affine(x, wk, bk)?;
        let v = tape.affine(x, wv, bv)?;

        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let probs = tape.attn_probs(qh, kh, valid, scale)?;
            contexts.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat(&contexts, 1)?;

        let wo = tape.param(store, self.wo);
        let bo = tape.param(store, self.bo);
        let mut out = tape.affine(cat, wo, bo)?;
        if train && self.cfg.dropout > 0.0 {
            out = tape.dropout(out, self.cfg.dropout, rng)?;
        }
        tape.row_mask(out, valid)
    }

    /// Streaming forward pass: still O(T^2) time, but only one score row is
    /// alive at a time, so memory stays O(T * d). Bit-identical to the
    /// recording path.
    pub fn infer(&self, store: &ParamStore, x: &Tensor, valid: usize) -> Result<Tensor> {
        let t = x.rows();
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        kernels::affine(
            x.data(),
            store.value(self.wq).data(),
            store.value(self.bq).data(),
            t,
            d,
            d,
            &mut q,
        );
        kernels::affine(
            x.data(),
            store.value(self.wk).data(),
            store.value(self.bk).data(),
            t,
            d,
            d,
            &mut k,
        );
        kernels::affine(
            x.data(),
            store.value(self.wv).data(),
            store.value(self.bv).data(),
            t,
            d,
            d,
            &mut v,
        );

        let mut cat = vec![0.0; t * d];
        let mut qh = vec![0.0; t * dh];
        let mut kh = vec![0.0; t * dh];
        let mut vh = vec![0.0; t * dh];
        let mut probs_row = vec![0.0; t];
        let mut ctx_row = vec![0.0; dh];
        for h in 0..heads {
            let off = h * dh;
            for r in 0..t {
                qh[r * dh..(r + 1) * dh].copy_from_slice(&q[r * d + off..r * d + off + dh]);
                kh[r * dh..(r + 1) * dh].copy_from_slice(&k[r * d + off..r * d + off + dh]);
                vh[r * dh..(r + 1) * dh].copy_from_slice(&v[r * d + off..r * d + off + dh]);
            }
            for i in 0..valid {
                kernels::attention_probs_row(
                    &qh[i * dh..(i + 1) * dh],
                    &kh,
                    dh,
                    valid,
                    scale,
                    &mut probs_row,
                );
                kernels::attention_context_row(&probs_row, &vh, dh, &mut ctx_row);
                cat[i * d + off..i * d + off + dh].copy_from_slice(&ctx_row);
            }
        }

        let mut out = vec![0.0; t * d];
        kernels::affine(
            &cat,
            store.value(self.wo).data(),
            store.value(self.bo).data(),
            t,
            d,
            d,
            &mut out,
        );
        out[valid * d..].fill(0.0);
        let y = Tensor::matrix(t, d, out)?;
        y.ensure_finite("attention_infer")?;
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, DEFAULT_EPS};
    use crate::oracles;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(seed: u64, t: usize, d: usize) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(t, d, |_, _| r.gen_range(-1.0..1.0))
    }

    fn build(d: usize, heads: usize, seed: u64) -> (ParamStore, AttentionBlock) {
        let mut store = ParamStore::new();
        let cfg = MixingConfig::new(crate::mixing::MixingVariant::Attention, d)
            .unwrap()
            .with_heads(heads)
            .unwrap();
        let block = AttentionBlock::init(&mut store, "att", cfg, &mut rng(seed)).unwrap();
        (store, block)
    }

    fn tape_forward(
        store: &ParamStore,
        block: &AttentionBlock,
        x: &Tensor,
        valid: usize,
    ) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = block
            .forward(&mut tape, store, xv, valid, false, &mut rng(0))
            .unwrap();
        tape.value(y)
    }

    #[test]
    fn single_frame_is_value_then_output_projection() {
        // Softmax over one element is 1, so y = W_o (W_v h + b_v) + b_o.
        let d = 8;
        let (store, block) = build(d, 2, 51);
        let x = random_input(52, 1, d);
        let got = tape_forward(&store, &block, &x, 1);

        let mut v = vec![0.0; d];
        kernels::affine(
            x.data(),
            store.value(block.wv).data(),
            store.value(block.bv).data(),
            1,
            d,
            d,
            &mut v,
        );
        let mut want = vec![0.0; d];
        kernels::affine(
            &v,
            store.value(block.wo).data(),
            store.value(block.bo).data(),
            1,
            d,
            d,
            &mut want,
        );
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_query_and_key_projections_give_uniform_attention() {
        // All logits are zero, so every valid position attends uniformly and
        // each output row equals the projected masked mean of the values.
        let d = 8;
        let t = 9;
        let valid = 6;
        let (mut store, block) = build(d, 4, 53);
        store.value_mut(block.wq).data_mut().fill(0.0);
        store.value_mut(block.bq).data_mut().fill(0.0);
        store.value_mut(block.wk).data_mut().fill(0.0);
        store.value_mut(block.bk).data_mut().fill(0.0);
        let x = random_input(54, t, d);
        let got = tape_forward(&store, &block, &x, valid);

        let mut v = vec![0.0; t * d];
        kernels::affine(
            x.data(),
            store.value(block.wv).data(),
            store.value(block.bv).data(),
            t,
            d,
            d,
            &mut v,
        );
        let mut v_mean = vec![0.0; d];
        kernels::masked_mean_rows(&v, t, d, valid, &mut v_mean);
        let mut want = vec![0.0; d];
        kernels::affine(
            &v_mean,
            store.value(block.wo).data(),
            store.value(block.bo).data(),
            1,
            d,
            d,
            &mut want,
        );
        for r in 0..valid {
            for c in 0..d {
                assert!((got.at(r, c) - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_pairwise_reference() {
        let d = 12;
        let t = 9;
        let (store, block) = build(d, 3, 55);
        let x = random_input(56, t, d);
        for valid in [t, 5] {
            let got = tape_forward(&store, &block, &x, valid);

            let mut q = vec![0.0; t * d];
            let mut k = vec![0.0; t * d];
            let mut v = vec![0.0; t * d];
            kernels::affine(
                x.data(),
                store.value(block.wq).data(),
                store.value(block.bq).data(),
                t,
                d,
                d,
                &mut q,
            );
            kernels::affine(
                x.data(),
                store.value(block.wk).data(),
                store.value(block.bk).data(),
                t,
                d,
                d,
                &mut k,
            );
            kernels::affine(
                x.data(),
                store.value(block.wv).data(),
                store.value(block.bv).data(),
                t,
                d,
                d,
                &mut v,
            );
            let ctx = oracles::attention_context_naive(&q, &k, &v, t, d, 3, valid);
            let mut want = vec![0.0; t * d];
            kernels::affine(
                &ctx,
                store.value(block.wo).data(),
                store.value(block.bo).data(),
                t,
                d,
                d,
                &mut want,
            );
            want[valid * d..].fill(0.0);

            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn infer_path_matches_tape_path_bit_exactly() {
        let d = 16;
        let t = 23;
        let (store, block) = build(d, 4, 57);
        let x = random_input(58, t, d);
        for valid in [t, 13] {
            let tape_y = tape_forward(&store, &block, &x, valid);
            let infer_y = block.infer(&store, &x, valid).unwrap();
            assert_eq!(tape_y.data(), infer_y.data());
        }
    }

    #[test]
    fn padding_frames_never_leak_into_valid_outputs() {
        let d = 8;
        let t = 10;
        let valid = 7;
        let (store, block) = build(d, 2, 59);
        let x = random_input(60, t, d);
        let mut garbage = x.clone();
        for r in valid..t {
            for c in 0..d {
                garbage.set(r, c, -1e5 * (1.0 + r as f64 + c as f64));
            }
        }
        let y = tape_forward(&store, &block, &x, valid);
        let y_garbage = tape_forward(&store, &block, &garbage, valid);
        assert!(y.max_abs_diff(&y_garbage) < 1e-12);
    }

    #[test]
    fn full_block_gradient_check() {
        let (mut store, block) = build(4, 2, 61);
        let x = random_input(62, 6, 4);
        for id in block.param_ids() {
            let err = finite_diff_check(&mut store, id, DEFAULT_EPS, |s, tape| {
                let xv = tape.constant(&x);
                let y = block.forward(tape, s, xv, 5, false, &mut rng(0))?;
                let g = tape.gelu(y)?;
                tape.sum_all(g)
            })
            .unwrap();
            assert!(err < 1e-4, "attention gradcheck err {err}");
        }
    }
}
