//! Flat checkpoint archive: a JSON header line with every config needed to
//! rebuild the model, then each parameter as name, shape, and raw
//! little-endian f64 data. Loading reproduces forward outputs bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{FinetuneModel, ReplacementPlan, StackConfig};
use crate::error::{Error, Result};
use crate::mixing::MixingConfig;
use crate::tensor::Tensor;

const CHECKPOINT_FORMAT: &str = "summix.checkpoint.v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    stack: StackConfig,
    mixing: MixingConfig,
    plan: ReplacementPlan,
    stack_seed: u64,
    param_count: usize,
}

pub fn save_checkpoint(path: &Path, model: &FinetuneModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        stack: model.core.cfg,
        mixing: model.mixing_cfg,
        plan: model.plan,
        stack_seed: model.stack_seed,
        param_count: model.store.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, p) in model.store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &dim in p.value.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FinetuneModel> {
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
    let header: CheckpointHeader = serde_json::from_slice(&header_line)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unexpected checkpoint format {}",
            header.format
        )));
    }

    let mut model = FinetuneModel::with_structure(
        header.stack,
        header.mixing,
        header.plan,
        header.stack_seed,
    )?;
    if model.store.len() != header.param_count {
        return Err(Error::Format(format!(
            "checkpoint lists {} parameters, model has {}",
            header.param_count,
            model.store.len()
        )));
    }

    let mut seen = vec![false; model.store.len()];
    for _ in 0..header.param_count {
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        r.read_exact(&mut len4)?;
        let ndim = u32::from_le_bytes(len4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut d8 = [0u8; 8];
            r.read_exact(&mut d8)?;
            shape.push(u64::from_le_bytes(d8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0u8; 8 * numel];
        r.read_exact(&mut data)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let id = model.store.lookup(&name)?;
        if model.store.value(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                shape,
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = Tensor::new(shape, values)?;
        seen[id.0] = true;
    }
    if let Some((id, _)) = seen.iter().enumerate().find(|(_, &s)| !s) {
        return Err(Error::Format(format!(
            "checkpoint is missing parameter {}",
            model.store.get(crate::param::ParamId(id)).name
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{apply_replacement, build_pretrained_stack, ReplacementVariant};
    use crate::mixing::MixingVariant;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build_model(variant: ReplacementVariant) -> FinetuneModel {
        let cfg = StackConfig {
            d_input: 5,
            d_model: 12,
            n_layers: 3,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 7,
            dropout: 0.1,
        };
        let stack = build_pretrained_stack(cfg, 81).unwrap();
        let plan = ReplacementPlan {
            replace_last_n: 2,
            variant,
            seed: 82,
        };
        let mut mix = MixingConfig::new(MixingVariant::Wsm, 12).unwrap();
        mix.window_k = 2;
        mix.n_heads = 2;
        apply_replacement(&stack, plan, mix).unwrap()
    }

    #[test]
    fn round_trip_reproduces_forward_outputs_bit_exactly() {
        for variant in [
            ReplacementVariant::Sm,
            ReplacementVariant::Wsm,
            ReplacementVariant::AttPt,
            ReplacementVariant::AttScratch,
        ] {
            let model = build_model(variant);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save_checkpoint(&path, &model).unwrap();
            let loaded = load_checkpoint(&path).unwrap();

            assert_eq!(loaded.plan, model.plan);
            assert_eq!(loaded.core.cfg, model.core.cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(83);
            for _ in 0..10 {
                let t = rng.gen_range(3..18);
                let frames = Tensor::from_fn(t, 5, |_, _| rng.gen_range(-1.0..1.0));
                let a = model.infer_log_probs(&frames, t).unwrap();
                let b = loaded.infer_log_probs(&frames, t).unwrap();
                assert_eq!(a.data(), b.data(), "{variant:?}");
            }
        }
    }

    #[test]
    fn trainability_flags_survive_the_round_trip() {
        let model = build_model(ReplacementVariant::Wsm);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable, "{}", a.name);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = build_model(ReplacementVariant::Sm);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
