//! Checkpoint container: magic `APST`, u32 format version, u64-prefixed
//! config text, u32 tensor count, then tensor records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CorpusConfig, MicroLm, ModelConfig};
use crate::config::{qualified_keys, render_section, RawConfig};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, read_u32, read_u64, write_tensor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"APST";
pub const VERSION: u32 = 1;

pub fn encode_container(config: &str, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        write_tensor(&mut w, name, t)?;
    }
    Ok(w)
}

pub fn decode_container<R: Read>(r: &mut R) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("format version {version}, expected {VERSION}")));
    }
    let len = read_u64(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("config block of {len} bytes is implausible")));
    }
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)
        .map_err(|_| Error::Format("truncated config block".into()))?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        tensors.push(read_tensor(r)?);
    }
    Ok((text, tensors))
}

pub fn write_container(path: &Path, config: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_container(config, tensors)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut f = BufReader::new(File::open(path)?);
    decode_container(&mut f)
}

/// Canonical config text stored with a model.
pub fn model_config_text(model: &ModelConfig, corpus: &CorpusConfig) -> String {
    format!("{}{}", render_section(model), render_section(corpus))
}

pub fn model_bytes(model: &MicroLm, corpus: &CorpusConfig) -> Result<Vec<u8>> {
    let tensors: Vec<(String, Tensor)> = model.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    encode_container(&model_config_text(&model.cfg, corpus), &tensors)
}

pub fn save_model(path: &Path, model: &MicroLm, corpus: &CorpusConfig) -> Result<()> {
    let bytes = model_bytes(model, corpus)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Loads a model and the corpus settings it was trained with.
pub fn load_model(path: &Path) -> Result<(MicroLm, CorpusConfig)> {
    let (text, tensors) = read_container(path)?;
    let mut raw = RawConfig::parse(&text)?;
    let cfg: ModelConfig = raw.take()?;
    let corpus: CorpusConfig = raw.take()?;
    let mut known = qualified_keys::<ModelConfig>();
    known.extend(qualified_keys::<CorpusConfig>());
    raw.finish(&known)?;
    let mut model = MicroLm::new(cfg)?;
    let mut map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut err = None;
    model.params = model.params.map(|name, t| match map.remove(name) {
        Some(found) if found.shape() == t.shape() => found,
        Some(found) => {
            err.get_or_insert(Error::Format(format!(
                "tensor {name}: expected shape {:?}, found {:?}",
                t.shape(),
                found.shape()
            )));
            t.clone()
        }
        None => {
            err.get_or_insert(Error::Format(format!("missing tensor {name}")));
            t.clone()
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra} in model file")));
    }
    Ok((model, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            max_seq: 6,
            seed: 4,
        };
        let m = MicroLm::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.apst");
        save_model(&p, &m, &CorpusConfig::default()).unwrap();
        let (back, corpus) = load_model(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(corpus, CorpusConfig::default());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_model(&p), Err(Error::Format(_))));
    }
}
