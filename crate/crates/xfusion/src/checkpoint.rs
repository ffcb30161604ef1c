//! Single-file checkpoint container.
//!
//! Layout: one compact JSON header line (config snapshot, seed, step counter,
//! block table, integrity hashes) terminated by `\n`, followed by the raw
//! little-endian `f64` parameter blocks in exactly the header-declared order.
//! Save → load → save reproduces identical bytes.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: RunConfig,
    compat_hash: String,
    rng_seed: u64,
    train_steps: usize,
    blocks: Vec<BlockInfo>,
    frozen_hash: String,
    params_hash: String,
}

/// Everything needed to resume sampling: parameters, schedule (rebuilt from
/// the config snapshot), seed and step counter.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub rng_seed: u64,
    pub train_steps: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            compat_hash: self.config.compat_hash(),
            rng_seed: self.rng_seed,
            train_steps: self.train_steps,
            blocks: self
                .store
                .entries()
                .iter()
                .map(|e| BlockInfo {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    frozen: e.frozen,
                })
                .collect(),
            frozen_hash: self.store.frozen_hash(),
            params_hash: self.store.full_hash(),
        };
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let header_json = serde_json::to_string(&header).map_err(|e| Error::Json {
            context: "checkpoint header".into(),
            message: e.to_string(),
        })?;
        writeln!(file, "{header_json}").map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut writer = std::io::BufWriter::new(file);
        for entry in self.store.entries() {
            for v in entry.value.iter() {
                writer
                    .write_all(&v.to_le_bytes())
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
        writer
            .flush()
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Load and verify a checkpoint. The model architecture is rebuilt from
    /// the stored config; block names, order and shapes must match it, and
    /// the content hash must agree with the header.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut reader = BufReader::new(file);
        let mut header_line = String::new();
        reader
            .read_line(&mut header_line)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let header: Header = serde_json::from_str(header_line.trim_end()).map_err(|e| {
            Error::Json {
                context: "checkpoint header".into(),
                message: e.to_string(),
            }
        })?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "checkpoint format {} unsupported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        header.config.validate()?;
        if header.compat_hash != header.config.compat_hash() {
            return Err(Error::data(
                "checkpoint compat hash does not match its own config snapshot",
            ));
        }

        let (_, mut store) = Model::new(&header.config)?;
        let declared: Vec<(String, Vec<usize>)> = header
            .blocks
            .iter()
            .map(|b| (b.name.clone(), b.shape.clone()))
            .collect();
        let registered: Vec<(String, Vec<usize>)> = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec()))
            .collect();
        if declared != registered {
            return Err(Error::data(
                "checkpoint block table does not match the architecture for its config",
            ));
        }

        for block in &header.blocks {
            let len: usize = block.shape.iter().product();
            let mut bytes = vec![0u8; len * 8];
            reader
                .read_exact(&mut bytes)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let array = ndarray::ArrayD::from_shape_vec(block.shape.clone(), values)
                .map_err(|e| Error::data(format!("block `{}`: {e}", block.name)))?;
            store.set(&block.name, array);
        }
        let mut trailing = Vec::new();
        reader
            .read_to_end(&mut trailing)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if !trailing.is_empty() {
            return Err(Error::data(format!(
                "checkpoint has {} trailing bytes",
                trailing.len()
            )));
        }
        if store.full_hash() != header.params_hash {
            return Err(Error::data("checkpoint parameter hash mismatch"));
        }
        if store.frozen_hash() != header.frozen_hash {
            return Err(Error::data("checkpoint frozen-block hash mismatch"));
        }
        Ok(Checkpoint {
            config: header.config,
            store,
            rng_seed: header.rng_seed,
            train_steps: header.train_steps,
        })
    }

    /// Rebuild the model for this checkpoint's architecture.
    pub fn model(&self) -> Result<Model> {
        let (model, _) = Model::new(&self.config)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_checkpoint() -> Checkpoint {
        let mut config = RunConfig::default();
        config.image.height = 16;
        config.image.width = 16;
        config.schedule.t_max = 8;
        let (_, store) = Model::new(&config).unwrap();
        Checkpoint {
            config,
            store,
            rng_seed: 42,
            train_steps: 0,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = small_checkpoint();
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded.store.full_hash(), ckpt.store.full_hash());
        assert_eq!(loaded.rng_seed, 42);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        small_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 4] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("hash"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        small_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
