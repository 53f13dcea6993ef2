//! Synthetic labeled sequences for CTC training.
//!
//! Each character id owns a fixed random prototype vector; a sample renders
//! its label string as runs of 2-5 noisy prototype frames. Labels never
//! repeat adjacently, so with zero noise a frame-wise nearest-prototype
//! classifier followed by run collapsing recovers the labels exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub const BLANK_ID: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n_sequences: usize,
    pub label_len: (usize, usize),
    pub frames_per_label: (usize, usize),
    pub noise: f64,
    pub d_input: usize,
    /// Distinct characters; the blank is extra, so the vocabulary size is
    /// n_chars + 1.
    pub n_chars: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            n_sequences: 512,
            label_len: (3, 12),
            frames_per_label: (2, 5),
            noise: 0.3,
            d_input: 16,
            n_chars: 28,
            seed: 1234,
        }
    }
}

impl DataSpec {
    pub fn vocab_size(&self) -> usize {
        self.n_chars + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sequences == 0 {
            return Err(Error::Config("need at least one sequence".into()));
        }
        if self.label_len.0 < 1 || self.label_len.0 > self.label_len.1 {
            return Err(Error::Config("bad label length range".into()));
        }
        if self.frames_per_label.0 < 1 || self.frames_per_label.0 > self.frames_per_label.1 {
            return Err(Error::Config("bad frames-per-label range".into()));
        }
        if self.n_chars < 2 {
            return Err(Error::Config("need at least two characters".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Feature frames plus character-level targets (blank excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub valid_length: usize,
}

impl LabeledSequence {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Contract {
                op: "labeled_sequence",
                msg: "labels must be non-empty".into(),
            });
        }
        for &l in &self.labels {
            if l == BLANK_ID || l >= vocab_size {
                return Err(Error::Contract {
                    op: "labeled_sequence",
                    msg: format!("label id {l} out of range"),
                });
            }
        }
        if self.valid_length != self.features.rows() {
            return Err(Error::Contract {
                op: "labeled_sequence",
                msg: "valid_length must match feature rows".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DataSpec,
    /// n_chars x d_input prototype vectors, row c-1 for char id c.
    pub prototypes: Tensor,
    pub samples: Vec<LabeledSequence>,
}

impl Dataset {
    /// Train/held-out split: the last eighth (at least one sample) is held
    /// out.
    pub fn train_valid_split(&self) -> (&[LabeledSequence], &[LabeledSequence]) {
        let held_out = (self.samples.len() / 8).max(1);
        self.samples.split_at(self.samples.len() - held_out)
    }

    /// Classify each frame by nearest prototype and collapse runs.
    pub fn nearest_prototype_decode(&self, features: &Tensor) -> Vec<usize> {
        let d = self.spec.d_input;
        let mut out = Vec::new();
        let mut prev = usize::MAX;
        for r in 0..features.rows() {
            let frame = features.row_slice(r);
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for c in 0..self.spec.n_chars {
                let proto = &self.prototypes.data()[c * d..(c + 1) * d];
                let dist: f64 = frame
                    .iter()
                    .zip(proto)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = c + 1;
                }
            }
            if best != prev {
                out.push(best);
                prev = best;
            }
        }
        out
    }
}

/// Deterministic synthetic dataset from a spec.
pub fn make_synthetic_dataset(spec: DataSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    proto_rng.set_stream(1);
    let prototypes = Tensor::from_fn(spec.n_chars, spec.d_input, |_, _| {
        proto_rng.sample(StandardNormal)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let mut samples = Vec::with_capacity(spec.n_sequences);
    for _ in 0..spec.n_sequences {
        let len = rng.gen_range(spec.label_len.0..=spec.label_len.1);
        let mut labels = Vec::with_capacity(len);
        for _ in 0..len {
            // no adjacent repeats
            loop {
                let c = rng.gen_range(1..=spec.n_chars);
                if labels.last() != Some(&c) {
                    labels.push(c);
                    break;
                }
            }
        }
        let mut rows: Vec<f64> = Vec::new();
        let mut t = 0usize;
        for &c in &labels {
            let run = rng.gen_range(spec.frames_per_label.0..=spec.frames_per_label.1);
            let proto = &prototypes.data()[(c - 1) * spec.d_input..c * spec.d_input];
            for _ in 0..run {
                for &p in proto {
                    let n: f64 = rng.sample(StandardNormal);
                    rows.push(p + spec.noise * n);
                }
                t += 1;
            }
        }
        let features = Tensor::matrix(t, spec.d_input, rows)?;
        let sample = LabeledSequence {
            features,
            labels,
            valid_length: t,
        };
        sample.validate(spec.vocab_size())?;
        samples.push(sample);
    }
    Ok(Dataset {
        spec,
        prototypes,
        samples,
    })
}

/// Corpus-level token error rate: total edit distance over total reference
/// length.
pub fn token_error_rate(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let mut edits = 0usize;
    let mut total = 0usize;
    for (hyp, reference) in pairs {
        edits += kernels::edit_distance(hyp, reference);
        total += reference.len();
    }
    if total == 0 {
        0.0
    } else {
        edits as f64 / total as f64
    }
}

// ── Snapshot format ─────────────────────────────────────────────────
//
// One file per split: a single-line JSON header, then the prototype matrix
// as little-endian f64, then per sample: u64 frame count, u64 label count,
// the frames as little-endian f64, and the label ids as u64.

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    spec: DataSpec,
    n_samples: usize,
}

const SNAPSHOT_FORMAT: &str = "summix.dataset.v1";

pub fn save_split(path: &Path, dataset: &Dataset, samples: &[LabeledSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = SnapshotHeader {
        format: SNAPSHOT_FORMAT.to_string(),
        spec: dataset.spec,
        n_samples: samples.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in dataset.prototypes.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        w.write_all(&(s.features.rows() as u64).to_le_bytes())?;
        w.write_all(&(s.labels.len() as u64).to_le_bytes())?;
        for v in s.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &l in &s.labels {
            w.write_all(&(l as u64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_line = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
    }
    let header: SnapshotHeader = serde_json::from_slice(&header_line)?;
    if header.format != SNAPSHOT_FORMAT {
        return Err(Error::Format(format!(
            "unexpected snapshot format {}",
            header.format
        )));
    }
    let spec = header.spec;

    let read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    };
    let read_f64s = |r: &mut BufReader<File>, n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let proto_data = read_f64s(&mut r, spec.n_chars * spec.d_input)?;
    let prototypes = Tensor::matrix(spec.n_chars, spec.d_input, proto_data)?;
    let mut samples = Vec::with_capacity(header.n_samples);
    for _ in 0..header.n_samples {
        let t = read_u64(&mut r)? as usize;
        let n_labels = read_u64(&mut r)? as usize;
        let features = Tensor::matrix(t, spec.d_input, read_f64s(&mut r, t * spec.d_input)?)?;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            labels.push(read_u64(&mut r)? as usize);
        }
        let sample = LabeledSequence {
            features,
            labels,
            valid_length: t,
        };
        sample.validate(spec.vocab_size())?;
        samples.push(sample);
    }
    Ok(Dataset {
        spec,
        prototypes,
        samples,
    })
}
