//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"PGCKPT01"
//! u64     JSON header length
//! bytes   JSON header (CheckpointHeader)
//! f64[]   for each param in header order: value, adam_m, adam_v
//! f64[]   for each buffer in header order: value
//! ```
//!
//! The header carries every piece of non-tensor state needed for a
//! bit-identical resume: configs, epoch/step counters, optimizer step
//! counts, best validation score, and the transform epsilon. RNG streams
//! are derived from counters (seed, epoch, step), so no raw RNG state needs
//! to be stored; the counters are the state. Files are written atomically
//! (temp file + rename).

use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Discriminator, DiscriminatorConfig, Generator, ModelConfig};
use crate::nn::{Adam, ParamStore};
use crate::train::{derived_rng, TrainConfig, TrainMode, Trainer};

const MAGIC: &[u8; 8] = b"PGCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BufferInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    mode: TrainMode,
    model_config: ModelConfig,
    disc_config: DiscriminatorConfig,
    train_config: TrainConfig,
    tp_eps: f64,
    epoch_next: usize,
    global_step: u64,
    best_val: Option<f64>,
    adam_g_t: u64,
    adam_d_t: u64,
    params: Vec<TensorInfo>,
    buffers: Vec<BufferInfo>,
}

fn write_f64s<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Serializes the trainer state atomically.
pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        mode: trainer.train_config.mode,
        model_config: trainer.model_config.clone(),
        disc_config: trainer.disc_config.clone(),
        train_config: trainer.train_config.clone(),
        tp_eps: trainer.tp_eps,
        epoch_next: trainer.epoch,
        global_step: trainer.global_step,
        best_val: trainer.best_val,
        adam_g_t: trainer.adam_g.t,
        adam_d_t: trainer.adam_d.t,
        params: trainer
            .store
            .params()
            .iter()
            .map(|p| TensorInfo {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        buffers: trainer
            .store
            .buffers()
            .iter()
            .map(|b| BufferInfo {
                name: b.name.clone(),
                len: b.value.len(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("pgck.tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        for p in trainer.store.params() {
            write_f64s(&mut w, p.value.iter().cloned())?;
            write_f64s(&mut w, p.adam_m.iter().cloned())?;
            write_f64s(&mut w, p.adam_v.iter().cloned())?;
        }
        for b in trainer.store.buffers() {
            write_f64s(&mut w, b.value.iter().cloned())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Restores a trainer (model structures rebuilt from the stored configs,
/// tensors loaded by name).
pub fn load(path: &Path) -> Result<Trainer> {
    let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }

    // Rebuild the model skeleton; parameter names and shapes must line up
    // with the stored tensors.
    let mut store = ParamStore::new();
    let mut init_rng = derived_rng(header.train_config.seed, "init", 0, 0);
    let generator = Generator::new(&mut store, &mut init_rng, &header.model_config)?;
    let discriminator = match header.mode {
        TrainMode::AdversarialL1 => Some(Discriminator::new(
            &mut store,
            &mut init_rng,
            &header.disc_config,
            1,
            header.model_config.input_channels,
            header.model_config.leaky_slope,
        )?),
        TrainMode::L1Only => None,
    };

    if store.num_params() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint lists {} parameters, model has {}",
            header.params.len(),
            store.num_params()
        )));
    }
    for (i, info) in header.params.iter().enumerate() {
        let entry = store.entry_mut(i);
        if entry.name != info.name || entry.value.shape() != info.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch at index {i}: file has `{}` {:?}, model has `{}` {:?}",
                info.name,
                info.shape,
                entry.name,
                entry.value.shape()
            )));
        }
        let numel: usize = info.shape.iter().product();
        for target in [&mut entry.value, &mut entry.adam_m, &mut entry.adam_v] {
            let data = read_f64s(&mut r, numel)?;
            target
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&data);
        }
    }
    for (i, info) in header.buffers.iter().enumerate() {
        let current = store.buffers()[i].name.clone();
        if current != info.name || store.buffer(i).len() != info.len {
            return Err(Error::Checkpoint(format!(
                "buffer mismatch at index {i}: file has `{}` ({}), model has `{}` ({})",
                info.name,
                info.len,
                current,
                store.buffer(i).len()
            )));
        }
        let data = read_f64s(&mut r, info.len)?;
        store.set_buffer(i, data);
    }

    let mut adam_g = Adam::new(header.train_config.beta1, header.train_config.beta2);
    adam_g.t = header.adam_g_t;
    let mut adam_d = Adam::new(header.train_config.beta1, header.train_config.beta2);
    adam_d.t = header.adam_d_t;

    let mut trainer = Trainer {
        store,
        generator,
        discriminator,
        model_config: header.model_config,
        disc_config: header.disc_config,
        train_config: header.train_config,
        tp_eps: header.tp_eps,
        adam_g,
        adam_d,
        epoch: header.epoch_next,
        global_step: header.global_step,
        best_val: header.best_val,
        gen_ids: Vec::new(),
        disc_ids: Vec::new(),
    };
    trainer.rebuild_param_groups();
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SampleSource, Splits, SyntheticDataset, SyntheticDescriptor};
    use crate::synth::SynthParams;
    use tempfile::TempDir;

    fn micro_setup() -> (SyntheticDataset, Splits, Trainer) {
        let params = SynthParams {
            blur_sigmas: vec![1.0, 2.0],
            distractor_channels: 1,
            ..SynthParams::default()
        };
        let source = SyntheticDataset::new(SyntheticDescriptor::new(8, 16, 16, params)).unwrap();
        let splits = Splits {
            train: 0..12,
            val: 12..14,
            test: 14..16,
        };
        let model = ModelConfig {
            num_levels: 2,
            base_channels: 4,
            max_channels: 8,
            input_channels: 4,
            ..ModelConfig::default()
        };
        let disc = DiscriminatorConfig {
            num_scales: 2,
            num_layers: 3,
            base_channels: 4,
            max_channels: 8,
        };
        let cfg = TrainConfig {
            global_batch: 4,
            epochs_constant: 4,
            epochs_decay: 0,
            lr0: 1e-3,
            seed: 3,
            ..TrainConfig::defaults_for(TrainMode::AdversarialL1)
        };
        let trainer = Trainer::new(model, disc, cfg, 1e-4).unwrap();
        (source, splits, trainer)
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let dir = TempDir::new().unwrap();
        let (mut source, splits, mut trainer) = micro_setup();
        // Run two epochs so optimizer state and buffers are non-trivial.
        trainer.train_config.epochs_constant = 2;
        trainer.train(&mut source, &splits, dir.path()).unwrap();

        let path = dir.path().join("ckpt.pgck");
        save(&path, &trainer).unwrap();
        let restored = load(&path).unwrap();

        assert_eq!(restored.epoch, trainer.epoch);
        assert_eq!(restored.global_step, trainer.global_step);
        assert_eq!(restored.adam_g.t, trainer.adam_g.t);
        assert_eq!(restored.best_val, trainer.best_val);
        for (a, b) in restored.store.params().iter().zip(trainer.store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.adam_m, b.adam_m);
            assert_eq!(a.adam_v, b.adam_v);
        }
        for (a, b) in restored.store.buffers().iter().zip(trainer.store.buffers()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn resume_continues_bit_identically() {
        // Train 4 epochs in one go vs 2 + checkpoint + resume 2: the loss
        // sequences must agree exactly.
        let (mut source, splits, mut full) = micro_setup();
        let dir_a = TempDir::new().unwrap();
        let full_summary = full.train(&mut source, &splits, dir_a.path()).unwrap();

        let (mut source2, splits2, mut part) = micro_setup();
        part.train_config.epochs_constant = 2;
        let dir_b = TempDir::new().unwrap();
        let first = part.train(&mut source2, &splits2, dir_b.path()).unwrap();
        let mut resumed = load(&first.last_checkpoint).unwrap();
        // Restore the full-length schedule (the resumed run continues to
        // epoch 4 with identical per-epoch learning rates).
        resumed.train_config.epochs_constant = 4;
        let second = resumed.train(&mut source2, &splits2, dir_b.path()).unwrap();

        let stitched: Vec<f64> = first
            .steps
            .iter()
            .chain(second.steps.iter())
            .map(|s| s.g_total)
            .collect();
        let reference: Vec<f64> = full_summary.steps.iter().map(|s| s.g_total).collect();
        assert_eq!(stitched, reference);
    }

    #[test]
    fn rejects_garbage_files() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("junk.pgck");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load(&path).is_err());
    }
}
