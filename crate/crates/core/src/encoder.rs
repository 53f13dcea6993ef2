//! A small pre-norm transformer encoder with selective layer replacement.
//!
//! The stack stands in for a pretrained self-supervised encoder: it is
//! built with attention layers, optionally seasoned by a masked-frame
//! reconstruction warm-up, and then fine-tuned by replacing the last N
//! layers with a chosen mixing variant while everything else stays frozen.
//! All L+1 intermediate outputs (embedding plus each layer) feed a
//! learnable softmax-weighted sum, which a two-layer prediction head maps
//! to per-frame vocabulary logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::kernels;
use crate::mixing::{AttentionBlock, MixingConfig, MixingVariant, SummaryBlock};
use crate::param::{glorot, ones_row, zeros_row, ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Fixed hyperparameters of the encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub d_input: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Characters plus the blank.
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            d_input: 16,
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 29,
            dropout: 0.1,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Config("need at least one layer".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs a blank and a label".into()));
        }
        Ok(())
    }

    fn attention_cfg(&self) -> Result<MixingConfig> {
        let mut cfg = MixingConfig::new(MixingVariant::Attention, self.d_model)?;
        cfg.n_heads = self.n_heads;
        cfg.dropout = self.dropout;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Mixing block dispatch ───────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum MixingBlock {
    Summary(SummaryBlock),
    Attention(AttentionBlock),
}

impl MixingBlock {
    fn init(
        store: &mut ParamStore,
        layer_prefix: &str,
        cfg: MixingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        match cfg.variant {
            MixingVariant::Attention => Ok(MixingBlock::Attention(AttentionBlock::init(
                store,
                &format!("{layer_prefix}.att"),
                cfg,
                rng,
            )?)),
            _ => Ok(MixingBlock::Summary(SummaryBlock::init(
                store,
                &format!("{layer_prefix}.mix"),
                cfg,
                rng,
            )?)),
        }
    }

    pub fn variant(&self) -> MixingVariant {
        match self {
            MixingBlock::Summary(b) => b.cfg.variant,
            MixingBlock::Attention(_) => MixingVariant::Attention,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            MixingBlock::Summary(b) => b.param_ids(),
            MixingBlock::Attention(b) => b.param_ids(),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        valid: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<VarId> {
        match self {
            MixingBlock::Summary(b) => b.forward(tape, store, x, valid, train, rng),
            MixingBlock::Attention(b) => b.forward(tape, store, x, valid, train, rng),
        }
    }

    fn infer(&self, store: &ParamStore, x: &Tensor, valid: usize) -> Result<Tensor> {
        match self {
            MixingBlock::Summary(b) => b.infer(store, x, valid),
            MixingBlock::Attention(b) => b.infer(store, x, valid),
        }
    }
}

// ── Encoder layer ───────────────────────────────────────────────────

/// Pre-norm residual layer: x + mix(ln(x)), then the same around the
/// position-wise feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub mixing: MixingBlock,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    dropout: f64,
}

impl EncoderLayer {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        mixing_cfg: MixingConfig,
        d_ff: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = mixing_cfg.d_model;
        let ln1_g = store.add(&format!("{prefix}.ln1.g"), ones_row(d), true)?;
        let ln1_b = store.add(&format!("{prefix}.ln1.b"), zeros_row(d), true)?;
        let mixing = MixingBlock::init(store, prefix, mixing_cfg, rng)?;
        let ln2_g = store.add(&format!("{prefix}.ln2.g"), ones_row(d), true)?;
        let ln2_b = store.add(&format!("{prefix}.ln2.b"), zeros_row(d), true)?;
        let ff1_w = store.add(&format!("{prefix}.ffn.fc1.w"), glorot(rng, d, d_ff), true)?;
        let ff1_b = store.add(&format!("{prefix}.ffn.fc1.b"), zeros_row(d_ff), true)?;
        let ff2_w = store.add(&format!("{prefix}.ffn.fc2.w"), glorot(rng, d_ff, d), true)?;
        let ff2_b = store.add(&format!("{prefix}.ffn.fc2.b"), zeros_row(d), true)?;
        Ok(EncoderLayer {
            mixing,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            dropout,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1_g, self.ln1_b];
        ids.extend(self.mixing.param_ids());
        ids.extend([
            self.ln2_g, self.ln2_b, self.ff1_w, self.ff1_b, self.ff2_w, self.ff2_b,
        ]);
        ids
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        valid: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<VarId> {
        let g1 = tape.param(store, self.ln1_g);
        let b1 = tape.param(store, self.ln1_b);
        let normed = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let mixed = self.mixing.forward(tape, store, normed, valid, train, rng)?;
        let h = tape.add(x, mixed)?;

        let g2 = tape.param(store, self.ln2_g);
        let b2 = tape.param(store, self.ln2_b);
        let normed2 = tape.layer_norm(h, g2, b2, LN_EPS)?;
        let w1 = tape.param(store, self.ff1_w);
        let bb1 = tape.param(store, self.ff1_b);
        let hidden_aff = tape.affine(normed2, w1, bb1)?;
        let mut hidden = tape.gelu(hidden_aff)?;
        if train && self.dropout > 0.0 {
            hidden = tape.dropout(hidden, self.dropout, rng)?;
        }
        let w2 = tape.param(store, self.ff2_w);
        let bb2 = tape.param(store, self.ff2_b);
        let ffn = tape.affine(hidden, w2, bb2)?;
        tape.add(h, ffn)
    }

    fn infer(&self, store: &ParamStore, x: &Tensor, valid: usize) -> Result<Tensor> {
        let t = x.rows();
        let d = x.cols();
        let mut normed = vec![0.0; t * d];
        kernels::layer_norm_rows(
            x.data(),
            t,
            d,
            store.value(self.ln1_g).data(),
            store.value(self.ln1_b).data(),
            LN_EPS,
            &mut normed,
            None,
        );
        let normed = Tensor::matrix(t, d, normed)?;
        let mixed = self.mixing.infer(store, &normed, valid)?;
        let mut h = vec![0.0; t * d];
        for (o, (a, b)) in h.iter_mut().zip(x.data().iter().zip(mixed.data())) {
            *o = a + b;
        }

        let mut normed2 = vec![0.0; t * d];
        kernels::layer_norm_rows(
            &h,
            t,
            d,
            store.value(self.ln2_g).data(),
            store.value(self.ln2_b).data(),
            LN_EPS,
            &mut normed2,
            None,
        );
        let d_ff = store.value(self.ff1_b).cols();
        let mut hidden = vec![0.0; t * d_ff];
        kernels::affine(
            &normed2,
            store.value(self.ff1_w).data(),
            store.value(self.ff1_b).data(),
            t,
            d,
            d_ff,
            &mut hidden,
        );
        hidden.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let mut ffn = vec![0.0; t * d];
        kernels::affine(
            &hidden,
            store.value(self.ff2_w).data(),
            store.value(self.ff2_b).data(),
            t,
            d_ff,
            d,
            &mut ffn,
        );
        for (o, f) in h.iter_mut().zip(&ffn) {
            *o += f;
        }
        let y = Tensor::matrix(t, d, h)?;
        y.ensure_finite("encoder_layer_infer")?;
        Ok(y)
    }
}

// ── Encoder core ────────────────────────────────────────────────────

/// Embedding projection plus L layers. Forward exposes L+1 outputs.
#[derive(Debug, Clone)]
pub struct EncoderCore {
    pub cfg: StackConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl EncoderCore {
    /// Builds the stack with one mixing config per layer.
    fn init(
        store: &mut ParamStore,
        cfg: StackConfig,
        layer_mixing: &[MixingConfig],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        debug_assert_eq!(layer_mixing.len(), cfg.n_layers);
        let embed_w = store.add("embed.w", glorot(rng, cfg.d_input, cfg.d_model), true)?;
        let embed_b = store.add("embed.b", zeros_row(cfg.d_model), true)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (i, mix_cfg) in layer_mixing.iter().enumerate() {
            layers.push(EncoderLayer::init(
                store,
                &format!("enc.l{i}"),
                *mix_cfg,
                cfg.d_ff,
                cfg.dropout,
                rng,
            )?);
        }
        Ok(EncoderCore {
            cfg,
            embed_w,
            embed_b,
            layers,
        })
    }

    pub fn embed_param_ids(&self) -> Vec<ParamId> {
        vec![self.embed_w, self.embed_b]
    }

    /// Recording forward over the layers above `prefix_outputs` (whose last
    /// entry is the output of layer prefix_len-1, or the embedding when the
    /// prefix holds a single entry). Returns all L+1 outputs.
    pub fn forward_features_from(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix_outputs: &[VarId],
        valid: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<VarId>> {
        let from = prefix_outputs.len() - 1;
        let mut outputs = prefix_outputs.to_vec();
        let mut x = *prefix_outputs.last().expect("prefix has the embedding output");
        for layer in &self.layers[from..] {
            x = layer.forward(tape, store, x, valid, train, rng)?;
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Recording forward from raw frames. Returns L+1 outputs.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &Tensor,
        valid: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<VarId>> {
        if frames.cols() != self.cfg.d_input {
            return Err(Error::ShapeMismatch {
                op: "forward_features",
                lhs: frames.shape().to_vec(),
                rhs: vec![frames.rows(), self.cfg.d_input],
            });
        }
        let x = tape.constant(frames);
        let w = tape.param(store, self.embed_w);
        let b = tape.param(store, self.embed_b);
        let embedded = tape.affine(x, w, b)?;
        self.forward_features_from(tape, store, &[embedded], valid, train, rng)
    }

    /// Inference forward over the embedding and the first `upto` layers,
    /// no tape, no dropout. Returns upto+1 outputs.
    pub fn infer_features_upto(
        &self,
        store: &ParamStore,
        frames: &Tensor,
        valid: usize,
        upto: usize,
    ) -> Result<Vec<Tensor>> {
        if frames.cols() != self.cfg.d_input {
            return Err(Error::ShapeMismatch {
                op: "infer_features",
                lhs: frames.shape().to_vec(),
                rhs: vec![frames.rows(), self.cfg.d_input],
            });
        }
        let t = frames.rows();
        let mut embedded = vec![0.0; t * self.cfg.d_model];
        kernels::affine(
            frames.data(),
            store.value(self.embed_w).data(),
            store.value(self.embed_b).data(),
            t,
            self.cfg.d_input,
            self.cfg.d_model,
            &mut embedded,
        );
        let mut outputs = vec![Tensor::matrix(t, self.cfg.d_model, embedded)?];
        for layer in &self.layers[..upto] {
            let next = layer.infer(store, outputs.last().unwrap(), valid)?;
            outputs.push(next);
        }
        Ok(outputs)
    }

    /// Inference forward through the whole stack: L+1 outputs.
    pub fn infer_features(
        &self,
        store: &ParamStore,
        frames: &Tensor,
        valid: usize,
    ) -> Result<Vec<Tensor>> {
        self.infer_features_upto(store, frames, valid, self.layers.len())
    }
}

// ── Pretrained stack and warm-up ────────────────────────────────────

/// Attention stack standing in for a downloaded pretrained checkpoint.
#[derive(Debug, Clone)]
pub struct PretrainedStack {
    pub store: ParamStore,
    pub core: EncoderCore,
    pub seed: u64,
}

/// Deterministic seeded attention stack.
pub fn build_pretrained_stack(cfg: StackConfig, seed: u64) -> Result<PretrainedStack> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let att = cfg.attention_cfg()?;
    let layer_mixing = vec![att; cfg.n_layers];
    let core = EncoderCore::init(&mut store, cfg, &layer_mixing, &mut rng)?;
    Ok(PretrainedStack { store, core, seed })
}

#[derive(Debug, Clone, Copy)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            steps: 60,
            batch_size: 8,
            mask_rate: 0.3,
            lr: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WarmupStats {
    pub held_out_before: f64,
    pub held_out_after: f64,
}

impl WarmupStats {
    pub fn relative_improvement(&self) -> f64 {
        (self.held_out_before - self.held_out_after) / self.held_out_before
    }
}

/// Masked-frame reconstruction warm-up, so "pretrained" weights are
/// distinguishable from fresh ones.
///
/// Random frames are zeroed on the way in and a linear decoder on the last
/// layer output must reproduce them; only masked positions contribute to
/// the loss. The last eighth of `sequences` is held out and scored before
/// and after. The decoder parameters stay in the store under `warmup.*`
/// and never reach fine-tuning models.
pub fn warm_up(
    stack: &mut PretrainedStack,
    sequences: &[Tensor],
    cfg: WarmupConfig,
) -> Result<WarmupStats> {
    if sequences.len() < 4 {
        return Err(Error::Contract {
            op: "warm_up",
            msg: "need at least 4 sequences".into(),
        });
    }
    let held_out = (sequences.len() / 8).max(1);
    let (train, eval) = sequences.split_at(sequences.len() - held_out);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let recon_w = match stack.store.lookup("warmup.recon.w") {
        Ok(id) => id,
        Err(_) => stack.store.add(
            "warmup.recon.w",
            glorot(&mut init_rng, stack.core.cfg.d_model, stack.core.cfg.d_input),
            true,
        )?,
    };
    let recon_b = match stack.store.lookup("warmup.recon.b") {
        Ok(id) => id,
        Err(_) => stack
            .store
            .add("warmup.recon.b", zeros_row(stack.core.cfg.d_input), true)?,
    };

    stack.store.set_all_trainable(true);
    let trainable = stack.store.trainable_ids();
    let mut adam = Adam::new(
        &stack.store,
        AdamConfig::default(),
        vec![(trainable, cfg.lr)],
    )?;

    let mask_for = |seq_idx: usize, t: usize, round: u64| -> Vec<bool> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ ((seq_idx as u64) << 20) ^ round);
        let mut mask: Vec<bool> = (0..t).map(|_| rng.gen::<f64>() < cfg.mask_rate).collect();
        if !mask.iter().any(|&m| m) {
            mask[rng.gen_range(0..t)] = true;
        }
        mask
    };

    let recon_loss = |store: &ParamStore,
                      tape: &mut Tape,
                      frames: &Tensor,
                      mask: &[bool],
                      core: &EncoderCore,
                      rng: &mut ChaCha8Rng|
     -> Result<VarId> {
        let t = frames.rows();
        let d_in = frames.cols();
        let mut masked = frames.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..d_in {
                    masked.set(r, c, 0.0);
                }
            }
        }
        let feats = core.forward_features(tape, store, &masked, t, false, rng)?;
        let last = *feats.last().unwrap();
        let rw = tape.param(store, recon_w);
        let rb = tape.param(store, recon_b);
        let recon = tape.affine(last, rw, rb)?;
        let target = tape.constant(frames);
        let diff = tape.sub(recon, target)?;
        let mask_mat = Tensor::from_fn(t, d_in, |r, _| if mask[r] { 1.0 } else { 0.0 });
        let mask_var = tape.constant(&mask_mat);
        let masked_diff = tape.mul(diff, mask_var)?;
        let sq = tape.mul(masked_diff, masked_diff)?;
        let total = tape.sum_all(sq)?;
        let n_masked = mask.iter().filter(|&&m| m).count();
        tape.scale(total, 1.0 / (n_masked * d_in) as f64)
    };

    let eval_loss = |store: &ParamStore, core: &EncoderCore| -> Result<f64> {
        let mut total = 0.0;
        for (i, frames) in eval.iter().enumerate() {
            let mask = mask_for(i, frames.rows(), u64::MAX);
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let loss = recon_loss(store, &mut tape, frames, &mask, core, &mut rng)?;
            total += tape.item(loss);
        }
        Ok(total / eval.len() as f64)
    };

    let held_out_before = eval_loss(&stack.store, &stack.core)?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0bde);
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf0f0);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let mut batch_losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = order_rng.gen_range(0..train.len());
            let frames = &train[idx];
            let mask = mask_for(idx, frames.rows(), step as u64);
            batch_losses.push(recon_loss(
                &stack.store,
                &mut tape,
                frames,
                &mask,
                &stack.core,
                &mut fwd_rng,
            )?);
        }
        let mut acc = batch_losses[0];
        for &l in &batch_losses[1..] {
            acc = tape.add(acc, l)?;
        }
        let loss = tape.scale(acc, 1.0 / cfg.batch_size as f64)?;
        tape.backward(loss, &mut stack.store)?;
        adam.step(&mut stack.store)?;
        stack.store.zero_grads();
    }

    let held_out_after = eval_loss(&stack.store, &stack.core)?;
    Ok(WarmupStats {
        held_out_before,
        held_out_after,
    })
}

// ── Replacement plans ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplacementVariant {
    Sm,
    Wsm,
    /// Keep the pretrained attention weights and fine-tune them.
    AttPt,
    /// Reinitialize the attention weights from the plan seed.
    AttScratch,
}

impl ReplacementVariant {
    pub fn label(&self) -> &'static str {
        match self {
            ReplacementVariant::Sm => "SM",
            ReplacementVariant::Wsm => "WSM",
            ReplacementVariant::AttPt => "Att-PT",
            ReplacementVariant::AttScratch => "Att-scratch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sm" => Ok(ReplacementVariant::Sm),
            "wsm" => Ok(ReplacementVariant::Wsm),
            "att-pt" | "attpt" | "att_pt" => Ok(ReplacementVariant::AttPt),
            "att-scratch" | "attscratch" | "att_scratch" => Ok(ReplacementVariant::AttScratch),
            other => Err(Error::Config(format!("unknown variant: {other}"))),
        }
    }
}

/// Which trailing layers get swapped, for what, and from which seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplacementPlan {
    pub replace_last_n: usize,
    pub variant: ReplacementVariant,
    pub seed: u64,
}

impl ReplacementPlan {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.replace_last_n > n_layers {
            return Err(Error::Plan(format!(
                "replace_last_n {} exceeds {} layers",
                self.replace_last_n, n_layers
            )));
        }
        Ok(())
    }
}

// ── Fine-tuning model ───────────────────────────────────────────────

/// Softmax-reparameterized weights over the L+1 layer outputs.
#[derive(Debug, Clone)]
pub struct WeightedLayerSum {
    pub logits: ParamId,
}

impl WeightedLayerSum {
    pub fn effective_weights(&self, store: &ParamStore) -> Vec<f64> {
        let mut w = store.value(self.logits).data().to_vec();
        kernels::softmax_row_inplace(&mut w);
        w
    }
}

/// Two affine layers with a GeLU between; output width is the vocabulary.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl PredictionHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        vocab: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(PredictionHead {
            fc1_w: store.add(&format!("{prefix}.fc1.w"), glorot(rng, d_model, d_model), true)?,
            fc1_b: store.add(&format!("{prefix}.fc1.b"), zeros_row(d_model), true)?,
            fc2_w: store.add(&format!("{prefix}.fc2.w"), glorot(rng, d_model, vocab), true)?,
            fc2_b: store.add(&format!("{prefix}.fc2.b"), zeros_row(vocab), true)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let w1 = tape.param(store, self.fc1_w);
        let b1 = tape.param(store, self.fc1_b);
        let h_aff = tape.affine(x, w1, b1)?;
        let h = tape.gelu(h_aff)?;
        let w2 = tape.param(store, self.fc2_w);
        let b2 = tape.param(store, self.fc2_b);
        tape.affine(h, w2, b2)
    }

    fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let t = x.rows();
        let d = x.cols();
        let d_h = store.value(self.fc1_b).cols();
        let vocab = store.value(self.fc2_b).cols();
        let mut hidden = vec![0.0; t * d_h];
        kernels::affine(
            x.data(),
            store.value(self.fc1_w).data(),
            store.value(self.fc1_b).data(),
            t,
            d,
            d_h,
            &mut hidden,
        );
        hidden.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let mut logits = vec![0.0; t * vocab];
        kernels::affine(
            &hidden,
            store.value(self.fc2_w).data(),
            store.value(self.fc2_b).data(),
            t,
            d_h,
            vocab,
            &mut logits,
        );
        Tensor::matrix(t, vocab, logits)
    }
}

/// A replaced-and-frozen encoder with the trainable probing machinery.
#[derive(Debug, Clone)]
pub struct FinetuneModel {
    pub store: ParamStore,
    pub core: EncoderCore,
    pub wls: WeightedLayerSum,
    pub head: PredictionHead,
    pub plan: ReplacementPlan,
    pub mixing_cfg: MixingConfig,
    pub stack_seed: u64,
}

impl FinetuneModel {
    /// Builds the post-replacement structure with fresh plan-seeded
    /// parameters everywhere; `apply_replacement` copies pretrained values
    /// over the non-replaced part afterwards.
    pub fn with_structure(
        stack_cfg: StackConfig,
        mixing_cfg: MixingConfig,
        plan: ReplacementPlan,
        stack_seed: u64,
    ) -> Result<Self> {
        stack_cfg.validate()?;
        plan.validate(stack_cfg.n_layers)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

        let replaced_from = stack_cfg.n_layers - plan.replace_last_n;
        let att = stack_cfg.attention_cfg()?;
        let mut block_cfg = mixing_cfg;
        block_cfg.d_model = stack_cfg.d_model;
        block_cfg.dropout = stack_cfg.dropout;
        block_cfg.variant = match plan.variant {
            ReplacementVariant::Sm => MixingVariant::Sm,
            ReplacementVariant::Wsm => MixingVariant::Wsm,
            ReplacementVariant::AttPt | ReplacementVariant::AttScratch => MixingVariant::Attention,
        };
        if block_cfg.variant == MixingVariant::Attention {
            block_cfg.n_heads = stack_cfg.n_heads;
        }
        block_cfg.validate()?;
        let mut layer_mixing = vec![att; stack_cfg.n_layers];
        for slot in layer_mixing.iter_mut().skip(replaced_from) {
            *slot = block_cfg;
        }
        let core = EncoderCore::init(&mut store, stack_cfg, &layer_mixing, &mut rng)?;
        let wls = WeightedLayerSum {
            logits: store.add("wls.logits", zeros_row(stack_cfg.n_layers + 1), true)?,
        };
        let head = PredictionHead::init(
            &mut store,
            "head",
            stack_cfg.d_model,
            stack_cfg.vocab_size,
            &mut rng,
        )?;
        let mut model = FinetuneModel {
            store,
            core,
            wls,
            head,
            plan,
            mixing_cfg: block_cfg,
            stack_seed,
        };
        model.apply_trainability();
        Ok(model)
    }

    /// Index of the first replaced layer.
    pub fn replaced_from(&self) -> usize {
        self.core.cfg.n_layers - self.plan.replace_last_n
    }

    /// Replaced layers trainable, weighted sum and head trainable,
    /// everything else frozen.
    fn apply_trainability(&mut self) {
        self.store.set_all_trainable(false);
        let from = self.replaced_from();
        for layer in &self.core.layers[from..] {
            for id in layer.param_ids() {
                self.store.set_trainable(id, true);
            }
        }
        self.store.set_trainable(self.wls.logits, true);
        for id in self.head.param_ids() {
            self.store.set_trainable(id, true);
        }
    }

    /// Parameter ids of the replaced encoder layers.
    pub fn replaced_layer_param_ids(&self) -> Vec<ParamId> {
        let from = self.replaced_from();
        self.core.layers[from..]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }

    /// Weighted-sum logits plus head parameters.
    pub fn probe_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wls.logits];
        ids.extend(self.head.param_ids());
        ids
    }

    /// Ids of every frozen parameter.
    pub fn frozen_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Frozen prefix outputs (embedding plus layers below the first
    /// replaced one) at the sequence's natural length, via the inference
    /// path. These are constant during fine-tuning and safe to cache.
    pub fn frozen_features(&self, frames: &Tensor, valid: usize) -> Result<Vec<Tensor>> {
        self.core
            .infer_features_upto(&self.store, frames, valid, self.replaced_from())
    }

    /// Recording forward from cached frozen features to per-frame
    /// log-probabilities over the vocabulary (valid rows only).
    pub fn log_probs_from_frozen(
        &self,
        tape: &mut Tape,
        frozen: &[Tensor],
        valid: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<VarId> {
        let prefix: Vec<VarId> = frozen.iter().map(|t| tape.constant(t)).collect();
        let feats =
            self.core
                .forward_features_from(tape, &self.store, &prefix, valid, train, rng)?;
        self.probe(tape, &feats, valid)
    }

    /// Full recording forward from raw frames (no caching).
    pub fn log_probs(
        &self,
        tape: &mut Tape,
        frames: &Tensor,
        valid: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<VarId> {
        let feats = self
            .core
            .forward_features(tape, &self.store, frames, valid, train, rng)?;
        self.probe(tape, &feats, valid)
    }

    fn probe(&self, tape: &mut Tape, feats: &[VarId], valid: usize) -> Result<VarId> {
        let logits_var = tape.param(&self.store, self.wls.logits);
        let weights = tape.softmax(logits_var)?;
        let agg = tape.weighted_sum(feats, weights)?;
        let logits = self.head.forward(tape, &self.store, agg)?;
        let valid_logits = tape.slice_rows(logits, 0, valid)?;
        tape.log_softmax(valid_logits)
    }

    /// Inference path from cached frozen features to log-probabilities
    /// (valid rows only).
    pub fn infer_log_probs_from_frozen(&self, frozen: &[Tensor], valid: usize) -> Result<Tensor> {
        let from = self.replaced_from();
        let mut feats = frozen.to_vec();
        let mut x = feats.last().unwrap().clone();
        for layer in &self.core.layers[from..] {
            x = layer.infer(&self.store, &x, valid)?;
            feats.push(x.clone());
        }
        self.infer_probe(&feats, valid)
    }

    /// Inference path from raw frames to log-probabilities.
    pub fn infer_log_probs(&self, frames: &Tensor, valid: usize) -> Result<Tensor> {
        let feats = self.core.infer_features(&self.store, frames, valid)?;
        self.infer_probe(&feats, valid)
    }

    fn infer_probe(&self, feats: &[Tensor], valid: usize) -> Result<Tensor> {
        let expected = self.core.cfg.n_layers + 1;
        if feats.len() != expected {
            return Err(Error::Contract {
                op: "aggregate",
                msg: format!("expected {expected} layer outputs, got {}", feats.len()),
            });
        }
        let weights = self.wls.effective_weights(&self.store);
        let t = feats[0].rows();
        let d = feats[0].cols();
        let mut agg = vec![0.0; t * d];
        for (w, feat) in weights.iter().zip(feats) {
            for (o, &v) in agg.iter_mut().zip(feat.data()) {
                *o += w * v;
            }
        }
        let agg = Tensor::matrix(t, d, agg)?;
        let logits = self.head.infer(&self.store, &agg)?;
        let vocab = logits.cols();
        let mut lp = vec![0.0; valid * vocab];
        for r in 0..valid {
            kernels::log_softmax_row(logits.row_slice(r), &mut lp[r * vocab..(r + 1) * vocab]);
        }
        Tensor::matrix(valid, vocab, lp)
    }
}

/// Swap the last `plan.replace_last_n` layers of a pretrained stack for the
/// plan's variant and freeze everything else.
///
/// SM/WSM get freshly initialized summary blocks; Att-PT keeps the original
/// attention weights verbatim; Att-scratch reinitializes them from the plan
/// seed. Replaced layers (including their layer norms and position-wise
/// feed-forwards) are trainable, as are the weighted-sum logits and head.
pub fn apply_replacement(
    stack: &PretrainedStack,
    plan: ReplacementPlan,
    mixing_cfg: MixingConfig,
) -> Result<FinetuneModel> {
    plan.validate(stack.core.cfg.n_layers)?;
    let mut model = FinetuneModel::with_structure(stack.core.cfg, mixing_cfg, plan, stack.seed)?;

    // Copy pretrained values for every name both stores share, except the
    // mixing blocks of replaced layers when the plan reinitializes them.
    let replaced_from = model.replaced_from();
    let mut skip_names: Vec<String> = Vec::new();
    if plan.variant == ReplacementVariant::AttScratch {
        for i in replaced_from..stack.core.cfg.n_layers {
            for id in stack.core.layers[i].mixing.param_ids() {
                skip_names.push(stack.store.get(id).name.clone());
            }
        }
    }
    for (_, p) in stack.store.iter() {
        if skip_names.iter().any(|n| n == &p.name) {
            continue;
        }
        if let Ok(dst) = model.store.lookup(&p.name) {
            *model.store.value_mut(dst) = p.value.clone();
        }
    }
    model.apply_trainability();
    Ok(model)
}
