//! Checkpoint directories: `manifest.txt` records the model config, vocab
//! digest and one line per tensor (`tensor <name> f64 <rows>x<cols> <offset>`);
//! `tensors.bin` holds the little-endian data.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::config::ModelConfig;
use super::model::Model;
use super::params::ParamSet;

const HEADER: &str = "semtrace-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("checkpoint was trained with vocab {found}, current vocab is {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("tensor {0} runs past the end of tensors.bin")]
    Truncated(String),
    #[error("checkpoint does not match its config: {0}")]
    Shape(String),
}

pub struct Checkpoint {
    pub model: Model,
    pub vocab_digest: String,
}

pub fn save_checkpoint(dir: &Path, model: &Model, vocab_digest: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "{HEADER}\nconfig {}\nvocab_size {}\nvocab_sha256 {vocab_digest}\n",
        serde_json::to_string(&model.config).expect("config serializes"),
        model.vocab_size
    );
    let mut data = Vec::new();
    for (name, t) in model.params.names.iter().zip(&model.params.values) {
        manifest.push_str(&format!("tensor {name} f64 {}x{} {}\n", t.nrows(), t.ncols(), data.len()));
        for x in t.iter() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(dir.join("tensors.bin"), data)?;
    fs::write(dir.join("manifest.txt"), manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let data = fs::read(dir.join("tensors.bin"))?;
    let bad = |line: usize, reason: &str| CheckpointError::Manifest {
        line: line + 1,
        reason: reason.to_string(),
    };
    let mut config: Option<ModelConfig> = None;
    let mut vocab_size: Option<usize> = None;
    let mut digest: Option<String> = None;
    let mut params = ParamSet::default();
    for (i, line) in manifest.lines().enumerate() {
        if i == 0 {
            if line != HEADER {
                return Err(bad(i, "missing header"));
            }
            continue;
        }
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(i, "expected `key value`"))?;
        match key {
            "config" => config = Some(serde_json::from_str(rest).map_err(|e| bad(i, &e.to_string()))?),
            "vocab_size" => vocab_size = Some(rest.parse().map_err(|_| bad(i, "bad vocab size"))?),
            "vocab_sha256" => digest = Some(rest.to_string()),
            "tensor" => {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, dtype, shape, offset] = parts[..] else {
                    return Err(bad(i, "expected `tensor name dtype RxC offset`"));
                };
                if dtype != "f64" {
                    return Err(bad(i, "unsupported dtype"));
                }
                let (r, c) = shape.split_once('x').ok_or_else(|| bad(i, "bad shape"))?;
                let r: usize = r.parse().map_err(|_| bad(i, "bad shape"))?;
                let c: usize = c.parse().map_err(|_| bad(i, "bad shape"))?;
                let off: usize = offset.parse().map_err(|_| bad(i, "bad offset"))?;
                let end = off + 8 * r * c;
                if end > data.len() {
                    return Err(CheckpointError::Truncated(name.to_string()));
                }
                let vals = data[off..end]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                params.push(name, Array2::from_shape_vec((r, c), vals).expect("sized above"));
            }
            _ => return Err(bad(i, "unknown key")),
        }
    }
    let config = config.ok_or_else(|| bad(0, "missing config"))?;
    let vocab_size = vocab_size.ok_or_else(|| bad(0, "missing vocab_size"))?;
    let vocab_digest = digest.ok_or_else(|| bad(0, "missing vocab_sha256"))?;
    config.validate().map_err(|e| CheckpointError::Shape(e.to_string()))?;
    let template = Model::new(config.clone(), vocab_size, 0);
    if template.params.names != params.names {
        return Err(CheckpointError::Shape("tensor names differ".into()));
    }
    for (n, (a, b)) in params.names.iter().zip(template.params.values.iter().zip(&params.values)) {
        if a.dim() != b.dim() {
            return Err(CheckpointError::Shape(format!("{n} has shape {:?}, expected {:?}", b.dim(), a.dim())));
        }
    }
    Ok(Checkpoint {
        model: Model {
            config,
            vocab_size,
            params,
        },
        vocab_digest,
    })
}

/// Loads a checkpoint and checks it was trained with the given vocab.
pub fn load_checkpoint_for(dir: &Path, vocab_digest: &str) -> Result<Model, CheckpointError> {
    let c = load_checkpoint(dir)?;
    if c.vocab_digest != vocab_digest {
        return Err(CheckpointError::VocabMismatch {
            expected: vocab_digest.to_string(),
            found: c.vocab_digest,
        });
    }
    Ok(c.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_vocab_check() {
        let m = Model::new(ModelConfig::tiny(), 11, 4);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &m, "abc").unwrap();
        let back = load_checkpoint_for(dir.path(), "abc").unwrap();
        assert_eq!(back, m);
        assert!(matches!(
            load_checkpoint_for(dir.path(), "def"),
            Err(CheckpointError::VocabMismatch { .. })
        ));
        let man = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(man.contains("tensor emb.code f64 11x8 0\n"));
        fs::write(dir.path().join("tensors.bin"), [0u8; 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Truncated(_))));
    }
}
