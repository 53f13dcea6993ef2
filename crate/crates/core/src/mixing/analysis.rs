//! Closed-form accounting of what one block forward costs.
//!
//! `block_activation_bytes` lists, term by term, every buffer a recording
//! (tape) forward pass of the block allocates: the input frames, parameter
//! snapshots, each op's output, and saved payloads. `block_macs` does the
//! same for scalar multiplies. Unit tests pin both against the tape's own
//! meters, so if the forward graph changes these formulas must change with
//! it.
//!
//! Both assume a fully valid sequence and evaluation mode (no dropout),
//! matching how the scaling benchmarks run.

use crate::mixing::{MixingConfig, MixingVariant};

/// Bytes of tape memory one block forward retains at sequence length `t`.
pub fn block_activation_bytes(cfg: &MixingConfig, t: usize) -> usize {
    let d = cfg.d_model;
    let ds = cfg.d_summary;
    let mut doubles = t * d; // input frames
    match cfg.variant {
        MixingVariant::Sm | MixingVariant::Wsm => {
            let arity = if cfg.variant == MixingVariant::Sm { 2 } else { 3 };
            doubles += 2 * (d * ds + ds); // ff_local, ff_summary weights+biases
            doubles += 2 * t * ds; // local: affine, gelu
            doubles += 2 * t * ds; // summary: affine, gelu
            if cfg.separate_global_transform && cfg.variant == MixingVariant::Wsm {
                doubles += d * ds + ds; // ff_global weight+bias
                doubles += 2 * t * ds; // global source: affine, gelu
            }
            doubles += ds; // global summary row
            doubles += t * ds; // global summary tiled over frames
            if cfg.variant == MixingVariant::Wsm {
                doubles += t * ds + t; // windowed summary + saved normalizers
            }
            doubles += t * arity * ds; // concat
            doubles += arity * ds * d + d; // ff_out weight+bias
            doubles += 2 * t * d; // output: affine, gelu
            doubles += t * d; // row mask
        }
        MixingVariant::Attention => {
            let heads = cfg.n_heads;
            let dh = d / heads;
            doubles += 4 * (d * d + d); // q/k/v/out projections
            doubles += 3 * t * d; // q, k, v
            doubles += heads * (3 * t * dh); // per-head slices
            doubles += heads * t * t; // per-head probability matrices
            doubles += heads * t * dh; // per-head contexts
            doubles += t * d; // concat
            doubles += t * d; // output projection
            doubles += t * d; // row mask
        }
    }
    8 * doubles
}

/// Scalar multiplies of one block forward at sequence length `t`.
pub fn block_macs(cfg: &MixingConfig, t: usize) -> u64 {
    let d = cfg.d_model as u64;
    let ds = cfg.d_summary as u64;
    let t = t as u64;
    match cfg.variant {
        MixingVariant::Sm | MixingVariant::Wsm => {
            let arity = if cfg.variant == MixingVariant::Sm { 2 } else { 3 };
            let mut macs = 2 * t * d * ds; // local + summary transforms
            if cfg.separate_global_transform && cfg.variant == MixingVariant::Wsm {
                macs += t * d * ds;
            }
            macs += ds; // global mean normalization
            if cfg.variant == MixingVariant::Wsm {
                macs += t * ds; // windowed mean normalization
            }
            macs += t * arity * ds * d; // output transform
            macs
        }
        MixingVariant::Attention => {
            let heads = cfg.n_heads as u64;
            let dh = d / heads;
            let mut macs = 3 * t * d * d; // q, k, v projections
            macs += heads * t * t * dh; // scores
            macs += heads * t * t * dh; // contexts
            macs += t * d * d; // output projection
            macs
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::{AttentionBlock, BoundaryMode, SummaryBlock};
    use crate::param::ParamStore;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn tape_cost(cfg: &MixingConfig, t: usize) -> (usize, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut store = ParamStore::new();
        let x = random_input(&mut rng, t, cfg.d_model);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        match cfg.variant {
            MixingVariant::Attention => {
                let block = AttentionBlock::init(&mut store, "blk", *cfg, &mut rng).unwrap();
                block
                    .forward(&mut tape, &store, xv, t, false, &mut rng)
                    .unwrap();
            }
            _ => {
                let block = SummaryBlock::init(&mut store, "blk", *cfg, &mut rng).unwrap();
                block
                    .forward(&mut tape, &store, xv, t, false, &mut rng)
                    .unwrap();
            }
        }
        (tape.activation_bytes(), tape.macs())
    }

    #[test]
    fn formulas_match_tape_meters_exactly() {
        for t in [16usize, 64, 130] {
            for variant in [
                MixingVariant::Sm,
                MixingVariant::Wsm,
                MixingVariant::Attention,
            ] {
                let cfg = MixingConfig::new(variant, 16)
                    .unwrap()
                    .with_window(3)
                    .unwrap();
                let (bytes, macs) = tape_cost(&cfg, t);
                assert_eq!(
                    block_activation_bytes(&cfg, t),
                    bytes,
                    "{variant:?} bytes at T={t}"
                );
                assert_eq!(block_macs(&cfg, t), macs, "{variant:?} macs at T={t}");
            }
        }
    }

    #[test]
    fn formulas_match_with_separate_global_transform() {
        let mut cfg = MixingConfig::new(MixingVariant::Wsm, 12).unwrap();
        cfg.separate_global_transform = true;
        cfg.boundary_mode = BoundaryMode::ZeroPad;
        let (bytes, macs) = tape_cost(&cfg, 40);
        assert_eq!(block_activation_bytes(&cfg, 40), bytes);
        assert_eq!(block_macs(&cfg, 40), macs);
    }

    #[test]
    fn wsm_macs_scale_linearly_and_attention_quadratically() {
        // Doubling T doubles WSM multiply-accumulates (ratio within [1.9, 2.1])
        // while the attention ratio is dominated by the T^2 term.
        let d = 32;
        for t in [256usize, 512] {
            let wsm = MixingConfig::new(MixingVariant::Wsm, d).unwrap();
            let (_, m1) = tape_cost(&wsm, t);
            let (_, m2) = tape_cost(&wsm, 2 * t);
            let ratio = m2 as f64 / m1 as f64;
            assert!((1.9..=2.1).contains(&ratio), "WSM ratio {ratio} at T={t}");

            let att = MixingConfig::new(MixingVariant::Attention, d).unwrap();
            let (_, a1) = tape_cost(&att, t);
            let (_, a2) = tape_cost(&att, 2 * t);
            let ratio = a2 as f64 / a1 as f64;
            assert!(ratio >= 3.4, "attention ratio {ratio} at T={t}");
        }
    }
}
