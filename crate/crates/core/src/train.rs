//! The fine-tuning loop and the variant-by-depth grid.
//!
//! One run replaces the chosen layers, freezes the rest, and trains the
//! replaced layers, the layer-weighting logits, and the head with CTC loss
//! under two learning-rate groups. Frozen-layer outputs per sample are
//! computed once and cached: frozen parameters cannot move, frozen layers
//! run without dropout, and the masked kernels make padded and unpadded
//! forwards bit-identical at valid positions, so the cache is exact.
//! Batches are padded to the longest member and losses averaged over
//! sequences. Runs are single-threaded and bit-reproducible from the seed.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamConfig};
use crate::ctc;
use crate::data::{token_error_rate, LabeledSequence, BLANK_ID};
use crate::encoder::{
    apply_replacement, FinetuneModel, PretrainedStack, ReplacementPlan, ReplacementVariant,
};
use crate::error::{Error, Result};
use crate::mixing::MixingConfig;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_head: f64,
    pub lr_replaced: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 25,
            lr_head: 1e-3,
            lr_replaced: 3e-3,
            seed: 77,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be > 0".into()));
        }
        if self.lr_head <= 0.0 || self.lr_replaced <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sequence training loss over the epoch's steps.
    pub train_loss: f64,
    /// Corpus token error rate on the held-out split.
    pub valid_ter: f64,
    pub wall_ms: u128,
    /// High-water tape bytes over the epoch's steps.
    pub peak_tape_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub variant: String,
    pub depth: usize,
    /// Mean train loss before any update, dropout off.
    pub initial_loss: f64,
    /// Mean train loss after the last epoch, dropout off.
    pub final_loss: f64,
    pub final_ter: f64,
    pub epochs: Vec<EpochRecord>,
    pub total_wall_ms: u128,
    pub peak_tape_bytes: usize,
}

impl RunMetrics {
    pub fn csv_header() -> &'static str {
        "variant,depth,epoch,loss,ter,wall_ms,peak_bytes"
    }

    pub fn to_csv_rows(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.variant,
                self.depth,
                e.epoch,
                e.train_loss,
                e.valid_ter,
                e.wall_ms,
                e.peak_tape_bytes
            ));
        }
        out
    }
}

/// Cached frozen-prefix outputs for one sample.
struct CachedSample {
    frozen: Vec<Tensor>,
    labels: Vec<usize>,
    valid: usize,
}

fn cache_frozen(model: &FinetuneModel, samples: &[LabeledSequence]) -> Result<Vec<CachedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(CachedSample {
                frozen: model.frozen_features(&s.features, s.valid_length)?,
                labels: s.labels.clone(),
                valid: s.valid_length,
            })
        })
        .collect()
}

/// Zero-pad every cached frozen tensor of `sample` to `t_max` rows.
fn padded_frozen(sample: &CachedSample, t_max: usize) -> Vec<Tensor> {
    sample
        .frozen
        .iter()
        .map(|f| {
            if f.rows() == t_max {
                f.clone()
            } else {
                let mut data = f.data().to_vec();
                data.resize(t_max * f.cols(), 0.0);
                Tensor::matrix(t_max, f.cols(), data).expect("padded shape")
            }
        })
        .collect()
}

/// Mean CTC loss over samples, dropout off, no gradients.
fn eval_mean_loss(model: &FinetuneModel, cache: &[CachedSample]) -> Result<f64> {
    let vocab = model.core.cfg.vocab_size;
    let mut total = 0.0;
    for s in cache {
        let lp = model.infer_log_probs_from_frozen(&s.frozen, s.valid)?;
        let fwd = ctc::forward_log(lp.data(), s.valid, vocab, &s.labels, BLANK_ID)?;
        total += fwd.loss;
    }
    Ok(total / cache.len() as f64)
}

fn eval_ter(model: &FinetuneModel, cache: &[CachedSample]) -> Result<f64> {
    let vocab = model.core.cfg.vocab_size;
    let mut pairs = Vec::with_capacity(cache.len());
    for s in cache {
        let lp = model.infer_log_probs_from_frozen(&s.frozen, s.valid)?;
        let hyp = ctc::greedy_decode(lp.data(), s.valid, vocab, BLANK_ID);
        pairs.push((hyp, s.labels.clone()));
    }
    Ok(token_error_rate(&pairs))
}

/// Fine-tune one replacement plan. Returns the trained model and metrics.
pub fn finetune(
    stack: &PretrainedStack,
    plan: ReplacementPlan,
    mixing_cfg: MixingConfig,
    tc: &TrainConfig,
    train: &[LabeledSequence],
    valid: &[LabeledSequence],
) -> Result<(FinetuneModel, RunMetrics)> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Contract {
            op: "finetune",
            msg: "training split is empty".into(),
        });
    }
    let start = Instant::now();
    let mut model = apply_replacement(stack, plan, mixing_cfg)?;

    let train_cache = cache_frozen(&model, train)?;
    let valid_cache = cache_frozen(&model, valid)?;

    let mut probe_group = model.probe_param_ids();
    probe_group.retain(|id| model.store.get(*id).trainable);
    let mut replaced_group = model.replaced_layer_param_ids();
    replaced_group.retain(|id| model.store.get(*id).trainable);
    let mut adam = Adam::new(
        &model.store,
        AdamConfig::default(),
        vec![(probe_group, tc.lr_head), (replaced_group, tc.lr_replaced)],
    )?;

    let initial_loss = eval_mean_loss(&model, &train_cache)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0bad);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xd0d0);

    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut peak_bytes = 0usize;
    let mut step_index = 0usize;
    for epoch in 0..tc.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_sequences = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let t_max = batch
                .iter()
                .map(|&i| train_cache[i].valid)
                .max()
                .expect("non-empty batch");
            let mut tape = Tape::new();
            let mut acc = None;
            let step = (|| -> Result<f64> {
                for &i in batch {
                    let sample = &train_cache[i];
                    let frozen = padded_frozen(sample, t_max);
                    let lp = model.log_probs_from_frozen(
                        &mut tape,
                        &frozen,
                        sample.valid,
                        true,
                        &mut dropout_rng,
                    )?;
                    let loss = tape.ctc_loss(lp, &sample.labels, BLANK_ID)?;
                    acc = Some(match acc {
                        None => loss,
                        Some(prev) => tape.add(prev, loss)?,
                    });
                }
                let total = acc.expect("non-empty batch");
                let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
                tape.backward(mean, &mut model.store)?;
                adam.step(&mut model.store)?;
                model.store.zero_grads();
                Ok(tape.item(mean))
            })();
            let mean_loss = step.map_err(|e| Error::Diverged {
                step: step_index,
                source: Box::new(e),
            })?;
            peak_bytes = peak_bytes.max(tape.activation_bytes());
            epoch_loss += mean_loss * batch.len() as f64;
            epoch_sequences += batch.len();
            step_index += 1;
        }
        let valid_ter = eval_ter(&model, &valid_cache)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / epoch_sequences as f64,
            valid_ter,
            wall_ms: epoch_start.elapsed().as_millis(),
            peak_tape_bytes: peak_bytes,
        });
    }

    let final_loss = eval_mean_loss(&model, &train_cache)?;
    let final_ter = epochs.last().map(|e| e.valid_ter).unwrap_or(f64::NAN);
    let metrics = RunMetrics {
        variant: plan.variant.label().to_string(),
        depth: plan.replace_last_n,
        initial_loss,
        final_loss,
        final_ter,
        epochs,
        total_wall_ms: start.elapsed().as_millis(),
        peak_tape_bytes: peak_bytes,
    };
    Ok((model, metrics))
}

// ── The grid ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GridCell {
    pub variant: ReplacementVariant,
    pub depth: usize,
    /// Why the cell was skipped, when it was.
    pub skipped: Option<String>,
    pub metrics: Option<RunMetrics>,
}

impl GridCell {
    pub fn depth_label(&self, n_layers: usize) -> String {
        if self.depth == n_layers {
            "All".to_string()
        } else {
            self.depth.to_string()
        }
    }
}

/// One fine-tuning run per (variant, depth) cell. Depths must come from
/// {1, 2, 3, 4, L}; the full-depth column is only valid for the pretrained
/// attention variant, and invalid cells are reported as skipped rather
/// than failing the grid.
pub fn run_grid(
    stack: &PretrainedStack,
    variants: &[ReplacementVariant],
    depths: &[usize],
    mixing_cfg: MixingConfig,
    tc: &TrainConfig,
    train: &[LabeledSequence],
    valid: &[LabeledSequence],
) -> Result<Vec<GridCell>> {
    let n_layers = stack.core.cfg.n_layers;
    for &d in depths {
        if !(d == n_layers || (1..=4).contains(&d)) {
            return Err(Error::Plan(format!(
                "grid depth {d} not in {{1, 2, 3, 4, {n_layers}}}"
            )));
        }
    }
    let mut cells = Vec::new();
    for &variant in variants {
        for &depth in depths {
            if depth == n_layers && variant != ReplacementVariant::AttPt {
                cells.push(GridCell {
                    variant,
                    depth,
                    skipped: Some(format!(
                        "replacing all layers re-initializes {}; only Att-PT keeps \
                         pretrained knowledge at full depth",
                        variant.label()
                    )),
                    metrics: None,
                });
                continue;
            }
            let plan = ReplacementPlan {
                replace_last_n: depth,
                variant,
                seed: tc.seed,
            };
            let (_, metrics) = finetune(stack, plan, mixing_cfg, tc, train, valid)?;
            cells.push(GridCell {
                variant,
                depth,
                skipped: None,
                metrics: Some(metrics),
            });
        }
    }
    Ok(cells)
}

pub fn grid_csv_header() -> &'static str {
    "variant,depth,final_ter,final_loss,wall_ms,peak_bytes"
}

pub fn grid_to_csv(cells: &[GridCell], n_layers: usize) -> String {
    let mut out = String::from(grid_csv_header());
    out.push('\n');
    for cell in cells {
        match (&cell.skipped, &cell.metrics) {
            (Some(reason), _) => {
                out.push_str(&format!(
                    "{},{},skipped,skipped,skipped,skipped # {}\n",
                    cell.variant.label(),
                    cell.depth_label(n_layers),
                    reason
                ));
            }
            (None, Some(m)) => {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    cell.variant.label(),
                    cell.depth_label(n_layers),
                    m.final_ter,
                    m.final_loss,
                    m.total_wall_ms,
                    m.peak_tape_bytes
                ));
            }
            (None, None) => unreachable!("cell must be skipped or measured"),
        }
    }
    out
}
