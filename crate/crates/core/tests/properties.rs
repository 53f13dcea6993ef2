//! Property tests over randomized inputs: structural round trips, oracle
//! agreement, and decode/metric invariants.

use proptest::prelude::*;

use summix::ctc;
use summix::data::BLANK_ID;
use summix::kernels;
use summix::oracles;
use summix::{BoundaryMode, Tape, Tensor};

fn matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-5.0f64..5.0, r * c).prop_map(move |data| (r, c, data))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windowed_mean_agrees_with_the_naive_oracle(
        (t, d, data) in matrix_strategy(96, 6),
        k in 1usize..=9,
        valid_frac in 0.1f64..=1.0,
        zero_pad in any::<bool>(),
    ) {
        let valid = ((t as f64 * valid_frac).ceil() as usize).clamp(1, t);
        let mode = if zero_pad { BoundaryMode::ZeroPad } else { BoundaryMode::ValidCount };
        let mut fast = vec![0.0; t * d];
        kernels::windowed_mean_rows(&data, t, d, valid, k, mode, &mut fast, None);
        let naive = oracles::windowed_mean_naive(&data, t, d, valid, k, mode);
        for (f, n) in fast.iter().zip(&naive) {
            prop_assert!((f - n).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_are_probability_vectors((r, c, data) in matrix_strategy(12, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::matrix(r, c, data).unwrap());
        let sm = tape.softmax(x).unwrap();
        let out = tape.value(sm);
        for row in 0..r {
            let row_slice = out.row_slice(row);
            prop_assert!(row_slice.iter().all(|&v| v >= 0.0));
            let sum: f64 = row_slice.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_recovers_the_parts(
        (r, c1, data1) in matrix_strategy(8, 6),
        c2 in 1usize..=6,
    ) {
        let data2: Vec<f64> = (0..r * c2).map(|i| i as f64 * 0.25 - 3.0).collect();
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::matrix(r, c1, data1.clone()).unwrap());
        let b = tape.constant(&Tensor::matrix(r, c2, data2.clone()).unwrap());
        let cat = tape.concat(&[a, b], 1).unwrap();
        let a_back = tape.slice_cols(cat, 0, c1).unwrap();
        let b_back = tape.slice_cols(cat, c1, c2).unwrap();
        prop_assert_eq!(tape.data(a_back), &data1[..]);
        prop_assert_eq!(tape.data(b_back), &data2[..]);
    }

    #[test]
    fn ctc_loss_is_nonnegative_and_matches_enumeration(
        t in 1usize..=6,
        v in 2usize..=4,
        label_seed in 0u64..1000,
        logits in proptest::collection::vec(-4.0f64..4.0, 24),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(label_seed);
        let len = rng.gen_range(1..=3usize.min(t));
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
        prop_assume!(ctc::min_frames(&labels) <= t);
        let mut lp = vec![0.0; t * v];
        for row in 0..t {
            kernels::log_softmax_row(&logits[row * v..(row + 1) * v], &mut lp[row * v..(row + 1) * v]);
        }
        let fwd = ctc::forward_log(&lp, t, v, &labels, BLANK_ID).unwrap();
        prop_assert!(fwd.loss >= -1e-12);
        let oracle = oracles::ctc_loss_enumeration(&lp, t, v, &labels, BLANK_ID);
        prop_assert!((fwd.loss - oracle).abs() < 1e-9);
    }

    #[test]
    fn greedy_decode_collapses_the_argmax_path(
        (t, v, data) in matrix_strategy(24, 6),
    ) {
        prop_assume!(v >= 2);
        let decoded = ctc::greedy_decode(&data, t, v, BLANK_ID);
        prop_assert!(decoded.iter().all(|&c| c != BLANK_ID && c < v));

        // reference: take per-frame argmax, merge consecutive repeats,
        // then drop blanks (repeats across a blank survive)
        let mut reference = Vec::new();
        let mut prev = usize::MAX;
        for row in 0..t {
            let frame = &data[row * v..(row + 1) * v];
            // first maximum wins on ties, matching the decoder
            let mut argmax = 0;
            for (c, &val) in frame.iter().enumerate() {
                if val > frame[argmax] {
                    argmax = c;
                }
            }
            if argmax != prev {
                if argmax != BLANK_ID {
                    reference.push(argmax);
                }
                prev = argmax;
            }
        }
        prop_assert_eq!(decoded, reference);
    }

    #[test]
    fn edit_distance_is_a_metric_on_examples(
        a in proptest::collection::vec(0usize..5, 0..10),
        b in proptest::collection::vec(0usize..5, 0..10),
    ) {
        let d_ab = kernels::edit_distance(&a, &b);
        let d_ba = kernels::edit_distance(&b, &a);
        prop_assert_eq!(d_ab, d_ba);
        prop_assert_eq!(kernels::edit_distance(&a, &a), 0);
        let len_gap = a.len().abs_diff(b.len());
        prop_assert!(d_ab >= len_gap && d_ab <= a.len().max(b.len()));
    }
}
