//! Sequence-length scaling harness.
//!
//! Wall time comes from the blocks' streaming inference paths: the same
//! kernels as the recording path, but with only O(T * d) live memory, so
//! the attention baseline can be timed at lengths where retaining its
//! T x T probability matrices would not fit. Multiply-accumulates and peak
//! activation bytes are the tape-accounting figures from
//! [`crate::mixing::block_macs`] and [`crate::mixing::block_activation_bytes`],
//! which unit tests pin to the tape's own meters and
//! [`measured_tape_bytes`] cross-checks with real recorded forwards.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mixing::{
    block_activation_bytes, block_macs, AttentionBlock, BoundaryMode, MixingConfig, MixingVariant,
    SummaryBlock,
};
use crate::param::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub variants: Vec<MixingVariant>,
    /// Strictly increasing sequence lengths.
    pub lengths: Vec<usize>,
    /// Timed repetitions per point after one discarded warm-up; the median
    /// is reported.
    pub repeats: usize,
    pub d_model: usize,
    pub window_k: usize,
    pub n_heads: usize,
    pub boundary_mode: BoundaryMode,
    /// A point whose working-set estimate exceeds this is recorded as
    /// skipped instead of running.
    pub mem_budget_bytes: Option<usize>,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            variants: vec![
                MixingVariant::Sm,
                MixingVariant::Wsm,
                MixingVariant::Attention,
            ],
            lengths: vec![256, 512, 1024, 2048, 4096, 8192, 16384],
            repeats: 5,
            d_model: 64,
            window_k: 5,
            n_heads: 4,
            boundary_mode: BoundaryMode::ValidCount,
            mem_budget_bytes: None,
            seed: 99,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("no variants selected".into()));
        }
        if self.lengths.is_empty() {
            return Err(Error::Config("no sequence lengths given".into()));
        }
        if !self.lengths.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "sequence lengths must be strictly increasing".into(),
            ));
        }
        if self.repeats < 3 {
            return Err(Error::Config("need at least 3 repeats".into()));
        }
        Ok(())
    }

    pub fn mixing_config(&self, variant: MixingVariant) -> Result<MixingConfig> {
        let mut cfg = MixingConfig::new(variant, self.d_model)?;
        cfg.window_k = self.window_k;
        cfg.n_heads = self.n_heads;
        cfg.boundary_mode = self.boundary_mode;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub variant: String,
    pub t: usize,
    pub median_ns: u128,
    pub macs: u64,
    /// Tape-accounting activation bytes a recording forward would retain.
    pub peak_bytes: usize,
    pub skipped: bool,
}

/// Rough live-buffer bound for one streaming inference pass, used for the
/// out-of-memory guard.
pub fn infer_working_bytes(cfg: &MixingConfig, t: usize) -> usize {
    let d = cfg.d_model;
    let ds = cfg.d_summary;
    let doubles = match cfg.variant {
        // input + local + summary + concat + windowed mean (incl. prefix) + out
        MixingVariant::Sm | MixingVariant::Wsm => t * d + 2 * t * ds + 3 * t * ds + 2 * t * ds + t * d,
        // input + q/k/v + per-head slices + concat + out + score row
        MixingVariant::Attention => t * d + 3 * t * d + 3 * t * d + 2 * t * d + t,
    };
    8 * doubles
}

enum Block {
    Summary(SummaryBlock),
    Attention(AttentionBlock),
}

impl Block {
    fn build(spec: &BenchSpec, variant: MixingVariant) -> Result<(ParamStore, Block)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let cfg = spec.mixing_config(variant)?;
        let block = match variant {
            MixingVariant::Attention => {
                Block::Attention(AttentionBlock::init(&mut store, "bench", cfg, &mut rng)?)
            }
            _ => Block::Summary(SummaryBlock::init(&mut store, "bench", cfg, &mut rng)?),
        };
        Ok((store, block))
    }

    fn infer(&self, store: &ParamStore, x: &Tensor, valid: usize) -> Result<Tensor> {
        match self {
            Block::Summary(b) => b.infer(store, x, valid),
            Block::Attention(b) => b.infer(store, x, valid),
        }
    }
}

/// Forward-only scaling measurements: one warm-up pass, then the median of
/// `repeats` timed passes per (variant, length). Execution is strictly
/// serialized. Points over the memory budget are marked skipped and the
/// run continues.
pub fn run_scaling_bench(spec: &BenchSpec) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for &variant in &spec.variants {
        let (store, block) = Block::build(spec, variant)?;
        let cfg = spec.mixing_config(variant)?;
        for &t in &spec.lengths {
            let macs = block_macs(&cfg, t);
            let peak_bytes = block_activation_bytes(&cfg, t);
            if let Some(budget) = spec.mem_budget_bytes {
                if infer_working_bytes(&cfg, t) > budget {
                    records.push(BenchRecord {
                        variant: variant.label().to_string(),
                        t,
                        median_ns: 0,
                        macs,
                        peak_bytes,
                        skipped: true,
                    });
                    continue;
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ t as u64);
            let x = Tensor::from_fn(t, spec.d_model, |_, _| rng.gen_range(-1.0..1.0));
            block.infer(&store, &x, t)?; // warm-up, discarded
            let mut times = Vec::with_capacity(spec.repeats);
            for _ in 0..spec.repeats {
                let start = Instant::now();
                let y = block.infer(&store, &x, t)?;
                times.push(start.elapsed().as_nanos());
                std::hint::black_box(y);
            }
            times.sort_unstable();
            let mid = times.len() / 2;
            let median_ns = if times.len() % 2 == 1 {
                times[mid]
            } else {
                (times[mid - 1] + times[mid]) / 2
            };
            records.push(BenchRecord {
                variant: variant.label().to_string(),
                t,
                median_ns,
                macs,
                peak_bytes,
                skipped: false,
            });
        }
    }
    Ok(records)
}

/// Least-squares slope of log(time) vs log(T) over the variant's largest
/// four usable lengths.
pub fn fit_loglog_slope(records: &[BenchRecord], variant: &str) -> Result<f64> {
    let mut usable: Vec<&BenchRecord> = records
        .iter()
        .filter(|r| r.variant == variant && !r.skipped && r.median_ns > 0)
        .collect();
    usable.sort_by_key(|r| r.t);
    if usable.len() < 4 {
        return Err(Error::Fit {
            needed: 4,
            got: usable.len(),
        });
    }
    let tail = &usable[usable.len() - 4..];
    let points: Vec<(f64, f64)> = tail
        .iter()
        .map(|r| ((r.t as f64).ln(), (r.median_ns as f64).ln()))
        .collect();
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in &points {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    Ok(num / den)
}

/// Tape-accounting model of peak activation bytes for one block forward.
pub fn peak_activation_memory(cfg: &MixingConfig, t: usize) -> usize {
    block_activation_bytes(cfg, t)
}

/// Actually record one block forward and return the tape's high-water
/// byte count. Cross-checks [`peak_activation_memory`] at feasible lengths.
pub fn measured_tape_bytes(cfg: &MixingConfig, t: usize, seed: u64) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(t, cfg.d_model, |_, _| rng.gen_range(-1.0..1.0));
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    match cfg.variant {
        MixingVariant::Attention => {
            let block = AttentionBlock::init(&mut store, "meter", *cfg, &mut rng)?;
            block.forward(&mut tape, &store, xv, t, false, &mut rng)?;
        }
        _ => {
            let block = SummaryBlock::init(&mut store, "meter", *cfg, &mut rng)?;
            block.forward(&mut tape, &store, xv, t, false, &mut rng)?;
        }
    }
    Ok(tape.activation_bytes())
}

/// CSV with `# key=value` metadata lines, then one row per record.
pub fn bench_to_csv(spec: &BenchSpec, records: &[BenchRecord]) -> String {
    let mut out = String::new();
    out.push_str("# summix scaling bench\n");
    out.push_str("# frames_per_second_nominal=50\n");
    out.push_str("# batch_size=1\n");
    out.push_str(&format!(
        "# d_model={} heads={} window_k={} boundary={:?} repeats={}\n",
        spec.d_model, spec.n_heads, spec.window_k, spec.boundary_mode, spec.repeats
    ));
    out.push_str(&format!(
        "# hardware os={} arch={} cpus={} cpu_model={}\n",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(0),
        cpu_model().replace(',', ";"),
    ));
    out.push_str("variant,T,median_ns,macs,peak_bytes,skipped\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.t, r.median_ns, r.macs, r.peak_bytes, r.skipped
        ));
    }
    out
}

fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_records(exponent: f64) -> Vec<BenchRecord> {
        [256usize, 512, 1024, 2048, 4096]
            .iter()
            .map(|&t| BenchRecord {
                variant: "X".to_string(),
                t,
                median_ns: (3.0 * (t as f64).powf(exponent)) as u128,
                macs: 1,
                peak_bytes: 1,
                skipped: false,
            })
            .collect()
    }

    #[test]
    fn slope_recovers_exact_power_laws() {
        let lin = fit_loglog_slope(&synthetic_records(1.0), "X").unwrap();
        assert!((lin - 1.0).abs() < 1e-9, "linear slope {lin}");
        let quad = fit_loglog_slope(&synthetic_records(2.0), "X").unwrap();
        assert!((quad - 2.0).abs() < 1e-9, "quadratic slope {quad}");
    }

    #[test]
    fn slope_needs_four_points() {
        let mut records = synthetic_records(1.0);
        records.truncate(3);
        assert!(matches!(
            fit_loglog_slope(&records, "X"),
            Err(Error::Fit { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn spec_validation_catches_bad_inputs() {
        let spec = BenchSpec {
            lengths: vec![256, 256],
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let spec = BenchSpec {
            repeats: 2,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tiny_budget_skips_every_point_and_run_continues() {
        let spec = BenchSpec {
            lengths: vec![64, 128],
            repeats: 3,
            d_model: 16,
            mem_budget_bytes: Some(1),
            ..Default::default()
        };
        let records = run_scaling_bench(&spec).unwrap();
        assert_eq!(records.len(), 6);
        assert!(records.iter().all(|r| r.skipped));
        // skipped points still carry the analytic figures
        assert!(records.iter().all(|r| r.peak_bytes > 0 && r.macs > 0));
    }

    #[test]
    fn memory_model_ratios_have_the_right_shapes() {
        let spec = BenchSpec::default();
        let att = spec.mixing_config(MixingVariant::Attention).unwrap();
        let wsm = spec.mixing_config(MixingVariant::Wsm).unwrap();
        for t in [2048usize, 4096, 8192] {
            let att_ratio = peak_activation_memory(&att, 2 * t) as f64
                / peak_activation_memory(&att, t) as f64;
            assert!(att_ratio >= 3.4, "attention ratio {att_ratio} at T={t}");
            let wsm_ratio = peak_activation_memory(&wsm, 2 * t) as f64
                / peak_activation_memory(&wsm, t) as f64;
            assert!(wsm_ratio <= 2.2, "windowed ratio {wsm_ratio} at T={t}");
        }
        for t in [512usize, 1024, 4096, 16384] {
            assert!(peak_activation_memory(&wsm, t) < peak_activation_memory(&att, t));
        }
    }

    #[test]
    fn bench_runs_end_to_end_at_small_scale() {
        let spec = BenchSpec {
            lengths: vec![32, 64, 96, 128],
            repeats: 3,
            d_model: 16,
            window_k: 3,
            n_heads: 2,
            ..Default::default()
        };
        let records = run_scaling_bench(&spec).unwrap();
        assert_eq!(records.len(), 12);
        assert!(records.iter().all(|r| !r.skipped && r.median_ns > 0));
        // peak bytes monotone non-decreasing in T per variant
        for variant in ["SM", "WSM", "Attention"] {
            let by_t: Vec<usize> = records
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| r.peak_bytes)
                .collect();
            assert!(by_t.windows(2).all(|w| w[0] <= w[1]));
        }
        let csv = bench_to_csv(&spec, &records);
        assert!(csv.contains("frames_per_second_nominal=50"));
        assert!(csv.contains("variant,T,median_ns,macs,peak_bytes,skipped"));
    }
}
