//! Reusable verification suites: oracle-equivalence sweeps and the
//! finite-difference battery. The `oracle` and `gradcheck` subcommands run
//! these, and the acceptance tests assert their outcomes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::BLANK_ID;
use crate::encoder::{build_pretrained_stack, PredictionHead, StackConfig, WeightedLayerSum};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, DEFAULT_EPS};
use crate::kernels;
use crate::mixing::{AttentionBlock, BoundaryMode, MixingConfig, MixingVariant, SummaryBlock};
use crate::oracles;
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::{ctc, Tape};

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub name: String,
    pub cases: usize,
    pub max_err: f64,
    pub tolerance: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tolerance
    }
}

/// Prefix-sum windowed mean vs the naive double-loop, across random
/// lengths, widths, masks, window sizes and both boundary modes.
pub fn oracle_windowed_suite(cases: usize, seed: u64) -> SuiteRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks = [3usize, 5, 7, 9];
    let mut max_err = 0.0f64;
    for case in 0..cases {
        let t = rng.gen_range(1..=512);
        let d = rng.gen_range(1..=16);
        let valid = rng.gen_range(1..=t);
        let k = ks[case % ks.len()];
        let mode = if case % 2 == 0 {
            BoundaryMode::ValidCount
        } else {
            BoundaryMode::ZeroPad
        };
        let x: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut fast = vec![0.0; t * d];
        kernels::windowed_mean_rows(&x, t, d, valid, k, mode, &mut fast, None);
        let naive = oracles::windowed_mean_naive(&x, t, d, valid, k, mode);
        for (f, n) in fast.iter().zip(&naive) {
            max_err = max_err.max((f - n).abs());
        }
    }
    SuiteRow {
        name: "windowed_summary_vs_double_loop".to_string(),
        cases,
        max_err,
        tolerance: 1e-9,
    }
}

/// CTC forward recursion vs exhaustive alignment enumeration on every
/// random case with T <= 6, V <= 4, label length <= 3.
pub fn oracle_ctc_suite(cases: usize, seed: u64) -> SuiteRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut done = 0usize;
    while done < cases {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=4);
        let len = rng.gen_range(1..=3.min(t));
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
        if ctc::min_frames(&labels) > t {
            continue;
        }
        let mut lp = vec![0.0; t * v];
        for row in 0..t {
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
            kernels::log_softmax_row(&logits, &mut lp[row * v..(row + 1) * v]);
        }
        let fwd = ctc::forward_log(&lp, t, v, &labels, BLANK_ID).expect("feasible case");
        let oracle = oracles::ctc_loss_enumeration(&lp, t, v, &labels, BLANK_ID);
        max_err = max_err.max((fwd.loss - oracle).abs());
        done += 1;
    }
    SuiteRow {
        name: "ctc_vs_exhaustive_enumeration".to_string(),
        cases,
        max_err,
        tolerance: 1e-9,
    }
}

fn random_frames(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
    Tensor::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))
}

fn check_block_params(
    store: &mut ParamStore,
    ids: &[crate::param::ParamId],
    mut loss: impl FnMut(&ParamStore, &mut Tape) -> Result<crate::tape::VarId>,
) -> f64 {
    let mut worst = 0.0f64;
    for &id in ids {
        let err = finite_diff_check(store, id, DEFAULT_EPS, &mut loss).expect("gradcheck run");
        worst = worst.max(err);
    }
    worst
}

/// Central-difference battery over every block the training path uses:
/// SM, WSM in both boundary modes, attention, the weighted-sum-plus-head
/// probe, and CTC through log-softmax. Small dims, dropout off.
pub fn gradcheck_suite(seed: u64) -> Vec<SuiteRow> {
    let tol = 1e-4;
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let block_cases = [
        ("sm_block", MixingVariant::Sm, BoundaryMode::ValidCount),
        ("wsm_block_valid_count", MixingVariant::Wsm, BoundaryMode::ValidCount),
        ("wsm_block_zero_pad", MixingVariant::Wsm, BoundaryMode::ZeroPad),
    ];
    for (name, variant, mode) in block_cases {
        let d = 8;
        let t = 12;
        let mut store = ParamStore::new();
        let cfg = MixingConfig::new(variant, d)
            .unwrap()
            .with_window(3)
            .unwrap()
            .with_boundary(mode);
        let block = SummaryBlock::init(&mut store, "g", cfg, &mut rng).unwrap();
        let x = random_frames(&mut rng, t, d);
        let ids = block.param_ids();
        let err = check_block_params(&mut store, &ids, |s, tape| {
            let xv = tape.constant(&x);
            let y = block.forward(tape, s, xv, t - 2, false, &mut ChaCha8Rng::seed_from_u64(0))?;
            let g = tape.gelu(y)?;
            tape.sum_all(g)
        });
        rows.push(SuiteRow {
            name: name.to_string(),
            cases: ids.len(),
            max_err: err,
            tolerance: tol,
        });
    }

    {
        let d = 8;
        let t = 10;
        let mut store = ParamStore::new();
        let cfg = MixingConfig::new(MixingVariant::Attention, d)
            .unwrap()
            .with_heads(2)
            .unwrap();
        let block = AttentionBlock::init(&mut store, "g", cfg, &mut rng).unwrap();
        let x = random_frames(&mut rng, t, d);
        let ids = block.param_ids();
        let err = check_block_params(&mut store, &ids, |s, tape| {
            let xv = tape.constant(&x);
            let y = block.forward(tape, s, xv, t - 1, false, &mut ChaCha8Rng::seed_from_u64(0))?;
            let g = tape.gelu(y)?;
            tape.sum_all(g)
        });
        rows.push(SuiteRow {
            name: "attention_block".to_string(),
            cases: ids.len(),
            max_err: err,
            tolerance: tol,
        });
    }

    {
        // weighted layer sum + prediction head over a tiny frozen stack
        let cfg = StackConfig {
            d_input: 4,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 5,
            dropout: 0.0,
        };
        let stack = build_pretrained_stack(cfg, seed ^ 0xabc).unwrap();
        let mut store = stack.store.clone();
        let core = stack.core.clone();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef);
        let wls = WeightedLayerSum {
            logits: store
                .add("g.wls.logits", crate::param::zeros_row(cfg.n_layers + 1), true)
                .unwrap(),
        };
        let head = PredictionHead::init(
            &mut store,
            "g.head",
            cfg.d_model,
            cfg.vocab_size,
            &mut init_rng,
        )
        .unwrap();
        let t = 7;
        let x = random_frames(&mut rng, t, cfg.d_input);
        let mut ids = vec![wls.logits];
        ids.extend(head.param_ids());
        let err = check_block_params(&mut store, &ids, |s, tape| {
            let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
            let feats = core.forward_features(tape, s, &x, t, false, &mut fwd_rng)?;
            let logits_var = tape.param(s, wls.logits);
            let weights = tape.softmax(logits_var)?;
            let agg = tape.weighted_sum(&feats, weights)?;
            let logits = head.forward(tape, s, agg)?;
            let lp = tape.log_softmax(logits)?;
            tape.ctc_loss(lp, &[1, 2, 1], BLANK_ID)
        });
        rows.push(SuiteRow {
            name: "weighted_sum_head".to_string(),
            cases: ids.len(),
            max_err: err,
            tolerance: tol,
        });
    }

    {
        // CTC through log-softmax on a free logit matrix
        let t = 5;
        let v = 4;
        let mut store = ParamStore::new();
        let logits = store
            .add("g.logits", random_frames(&mut rng, t, v), true)
            .unwrap();
        let err = finite_diff_check(&mut store, logits, DEFAULT_EPS, |s, tape| {
            let lv = tape.param(s, logits);
            let lp = tape.log_softmax(lv)?;
            tape.ctc_loss(lp, &[1, 2, 1], BLANK_ID)
        })
        .expect("ctc gradcheck");
        rows.push(SuiteRow {
            name: "ctc_loss".to_string(),
            cases: t * v,
            max_err: err,
            tolerance: tol,
        });
    }

    rows
}

pub fn suite_csv(rows: &[SuiteRow]) -> String {
    let mut out = String::from("check,cases,max_err,tolerance,pass\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name,
            r.cases,
            r.max_err,
            r.tolerance,
            r.passed()
        ));
    }
    out
}
