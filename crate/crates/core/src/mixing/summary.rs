//! SummaryMixing and Windowed SummaryMixing blocks.
//!
//! Per frame t the block computes
//!
//! ```text
//! SM:  y_t = FF_out(concat(FF_local(h_t), s_g))
//! WSM: y_t = FF_out(concat(FF_local(h_t), s_g, s_w[t]))
//! ```
//!
//! where s_g is the mean of FF_summary over all valid frames and s_w[t]
//! the mean of FF_summary over the 2k+1 frames around t. The windowed mean
//! runs on prefix sums, so the whole block is O(T) in the sequence length
//! apart from the O(T * d^2) frame-local transforms.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels;
use crate::mixing::{MixingConfig, MixingVariant};
use crate::param::{glorot, zeros_row, ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SummaryBlock {
    pub cfg: MixingConfig,
    ff_local_w: ParamId,
    ff_local_b: ParamId,
    ff_summary_w: ParamId,
    ff_summary_b: ParamId,
    /// Present only with `separate_global_transform`: a distinct frame
    /// transform feeding the global summary.
    ff_global: Option<(ParamId, ParamId)>,
    ff_out_w: ParamId,
    ff_out_b: ParamId,
}

impl SummaryBlock {
    /// Number of summaries concatenated after the local transform.
    fn concat_arity(cfg: &MixingConfig) -> usize {
        match cfg.variant {
            MixingVariant::Sm => 2,
            MixingVariant::Wsm => 3,
            MixingVariant::Attention => unreachable!("attention is not a summary block"),
        }
    }

    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: MixingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let ds = cfg.d_summary;
        let arity = Self::concat_arity(&cfg);
        let ff_local_w = store.add(&format!("{prefix}.ff_local.w"), glorot(rng, d, ds), true)?;
        let ff_local_b = store.add(&format!("{prefix}.ff_local.b"), zeros_row(ds), true)?;
        let ff_summary_w = store.add(&format!("{prefix}.ff_summary.w"), glorot(rng, d, ds), true)?;
        let ff_summary_b = store.add(&format!("{prefix}.ff_summary.b"), zeros_row(ds), true)?;
        let ff_global = if cfg.separate_global_transform && cfg.variant == MixingVariant::Wsm {
            let w = store.add(&format!("{prefix}.ff_global.w"), glorot(rng, d, ds), true)?;
            let b = store.add(&format!("{prefix}.ff_global.b"), zeros_row(ds), true)?;
            Some((w, b))
        } else {
            None
        };
        let ff_out_w = store.add(
            &format!("{prefix}.ff_out.w"),
            glorot(rng, arity * ds, d),
            true,
        )?;
        let ff_out_b = store.add(&format!("{prefix}.ff_out.b"), zeros_row(d), true)?;
        Ok(SummaryBlock {
            cfg,
            ff_local_w,
            ff_local_b,
            ff_summary_w,
            ff_summary_b,
            ff_global,
            ff_out_w,
            ff_out_b,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.ff_local_w,
            self.ff_local_b,
            self.ff_summary_w,
            self.ff_summary_b,
        ];
        if let Some((w, b)) = self.ff_global {
            ids.push(w);
            ids.push(b);
        }
        ids.push(self.ff_out_w);
        ids.push(self.ff_out_b);
        ids
    }

    /// Recording forward pass. Masked frames contribute nothing to either
    /// summary and come out as zero rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        valid: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<VarId> {
        let (t, _) = tape.shape(x);
        let wl = tape.param(store, self.ff_local_w);
        let bl = tape.param(store, self.ff_local_b);
        let ws = tape.param(store, self.ff_summary_w);
        let bs = tape.param(store, self.ff_summary_b);

        let local_aff = tape.affine(x, wl, bl)?;
        let local = tape.gelu(local_aff)?;
        let summary_aff = tape.affine(x, ws, bs)?;
        let summary = tape.gelu(summary_aff)?;

        let global_src = match self.ff_global {
            Some((wg, bg)) => {
                let wg = tape.param(store, wg);
                let bg = tape.param(store, bg);
                let aff = tape.affine(x, wg, bg)?;
                tape.gelu(aff)?
            }
            None => summary,
        };
        let s_global = tape.masked_mean_rows(global_src, valid)?;
        let s_global_rows = tape.tile_row(s_global, t)?;

        let cat = match self.cfg.variant {
            MixingVariant::Sm => tape.concat(&[local, s_global_rows], 1)?,
            MixingVariant::Wsm => {
                let s_window = tape.windowed_mean(
                    summary,
                    valid,
                    self.cfg.window_k,
                    self.cfg.boundary_mode,
                )?;
                tape.concat(&[local, s_global_rows, s_window], 1)?
            }
            MixingVariant::Attention => unreachable!(),
        };

        let wo = tape.param(store, self.ff_out_w);
        let bo = tape.param(store, self.ff_out_b);
        let out_aff = tape.affine(cat, wo, bo)?;
        let mut out = tape.gelu(out_aff)?;
        if train && self.cfg.dropout > 0.0 {
            out = tape.dropout(out, self.cfg.dropout, rng)?;
        }
        tape.row_mask(out, valid)
    }

    /// Allocation-light forward pass for inference and benchmarking.
    /// Bit-identical to the recording path: both call the same kernels in
    /// the same order.
    pub fn infer(&self, store: &ParamStore, x: &Tensor, valid: usize) -> Result<Tensor> {
        let t = x.rows();
        let d = self.cfg.d_model;
        let ds = self.cfg.d_summary;
        let arity = Self::concat_arity(&self.cfg);

        let wl = store.value(self.ff_local_w);
        let bl = store.value(self.ff_local_b);
        let ws = store.value(self.ff_summary_w);
        let bs = store.value(self.ff_summary_b);

        let mut local = vec![0.0; t * ds];
        kernels::affine(x.data(), wl.data(), bl.data(), t, d, ds, &mut local);
        for v in local.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let mut summary = vec![0.0; t * ds];
        kernels::affine(x.data(), ws.data(), bs.data(), t, d, ds, &mut summary);
        for v in summary.iter_mut() {
            *v = kernels::gelu(*v);
        }

        let mut s_global = vec![0.0; ds];
        match self.ff_global {
            Some((wg, bg)) => {
                let mut global_src = vec![0.0; t * ds];
                kernels::affine(
                    x.data(),
                    store.value(wg).data(),
                    store.value(bg).data(),
                    t,
                    d,
                    ds,
                    &mut global_src,
                );
                for v in global_src.iter_mut() {
                    *v = kernels::gelu(*v);
                }
                kernels::masked_mean_rows(&global_src, t, ds, valid, &mut s_global);
            }
            None => kernels::masked_mean_rows(&summary, t, ds, valid, &mut s_global),
        }

        // concat(local, s_global, [s_window]) assembled in place
        let width = arity * ds;
        let mut cat = vec![0.0; t * width];
        for r in 0..t {
            cat[r * width..r * width + ds].copy_from_slice(&local[r * ds..(r + 1) * ds]);
            cat[r * width + ds..r * width + 2 * ds].copy_from_slice(&s_global);
        }
        if self.cfg.variant == MixingVariant::Wsm {
            let mut s_window = vec![0.0; t * ds];
            kernels::windowed_mean_rows(
                &summary,
                t,
                ds,
                valid,
                self.cfg.window_k,
                self.cfg.boundary_mode,
                &mut s_window,
                None,
            );
            for r in 0..t {
                cat[r * width + 2 * ds..r * width + 3 * ds]
                    .copy_from_slice(&s_window[r * ds..(r + 1) * ds]);
            }
        }

        let wo = store.value(self.ff_out_w);
        let bo = store.value(self.ff_out_b);
        let mut out = vec![0.0; t * d];
        kernels::affine(&cat, wo.data(), bo.data(), t, width, d, &mut out);
        for v in out.iter_mut() {
            *v = kernels::gelu(*v);
        }
        out[valid * d..].fill(0.0);
        let y = Tensor::matrix(t, d, out)?;
        y.ensure_finite("summary_block_infer")?;
        Ok(y)
    }
}
