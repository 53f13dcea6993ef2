//! Shared setup for the criterion benchmarks: seeded blocks and inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use summix::mixing::{AttentionBlock, MixingConfig, MixingVariant, SummaryBlock};
use summix::{ParamStore, Tensor};

pub enum AnyBlock {
    Summary(SummaryBlock),
    Attention(AttentionBlock),
}

impl AnyBlock {
    pub fn infer(&self, store: &ParamStore, x: &Tensor, valid: usize) -> Tensor {
        match self {
            AnyBlock::Summary(b) => b.infer(store, x, valid).expect("forward"),
            AnyBlock::Attention(b) => b.infer(store, x, valid).expect("forward"),
        }
    }
}

pub fn block_under_test(variant: MixingVariant, d_model: usize, seed: u64) -> (ParamStore, AnyBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MixingConfig::new(variant, d_model).expect("config");
    let block = match variant {
        MixingVariant::Attention => {
            AnyBlock::Attention(AttentionBlock::init(&mut store, "bench", cfg, &mut rng).expect("init"))
        }
        _ => AnyBlock::Summary(SummaryBlock::init(&mut store, "bench", cfg, &mut rng).expect("init")),
    };
    (store, block)
}

pub fn random_frames(t: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))
}
