//! Checkpoint files: a text manifest (one line per tensor with name, dtype
//! and shape, preceded by a JSON metadata line) followed by the tensors'
//! little-endian payload in manifest order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerTapSet, ModelConfig, Transformer};
use crate::numcore::{DType, ParamStore, Scalar, Tensor};
use crate::verbalizer::{Verbalizer, VerbalizerArch};

const MAGIC: &str = "vdistill-checkpoint 1";

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position, stored as decimal text because it is 128 bits wide.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Teacher,
    Student,
    Verbalizers,
}

/// Metadata stored alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ArtifactKind,
    pub stage: String,
    pub step: usize,
    /// Backbone config (for verbalizers: the backbone they read from).
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalizer_arch: Option<VerbalizerArch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taps: Option<Vec<usize>>,
    /// Digest of the backbone the verbalizers were trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngState>,
    /// Echo of the configuration that produced the artifact.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(kind: ArtifactKind, stage: &str, step: usize, model: &ModelConfig) -> Self {
        CheckpointMeta {
            kind,
            stage: stage.to_string(),
            step,
            model: model.clone(),
            verbalizer_arch: None,
            taps: None,
            backbone_digest: None,
            rng: None,
            config: serde_json::Value::Null,
        }
    }
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = format!("{MAGIC}\nmeta {meta_json}\n");
    let mut payload = Vec::new();
    for (name, t) in store.iter() {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("tensor name {name:?} must be non-empty without whitespace")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("tensor {name} {} {}\n", T::DTYPE.name(), dims.join("x")));
        for &x in t.data() {
            x.write_le(&mut payload);
        }
    }
    out.push_str(&format!("payload {}\n", payload.len()));
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&payload);
    Ok(bytes)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, CheckpointMeta)> {
    let mut pos = 0;
    let mut next_line = |what: &str| -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint(format!("truncated header while reading {what}")))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    if next_line("magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let meta_line = next_line("metadata")?;
    let meta: CheckpointMeta = serde_json::from_str(
        meta_line.strip_prefix("meta ").ok_or_else(|| Error::Checkpoint("missing metadata line".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut manifest = Vec::new();
    let payload_len = loop {
        let line = next_line("manifest")?;
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["tensor", name, dtype, dims] => {
                let dtype = DType::parse(dtype).ok_or_else(|| Error::Checkpoint(format!("unknown dtype {dtype}")))?;
                if dtype != T::DTYPE {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} is {}, requested {}",
                        dtype.name(),
                        T::DTYPE.name()
                    )));
                }
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape {dims} for {name}")))?;
                manifest.push((name.to_string(), shape));
            }
            ["payload", n] => break n.parse::<usize>().map_err(|_| Error::Checkpoint("bad payload length".into()))?,
            _ => return Err(Error::Checkpoint(format!("unexpected manifest line {line:?}"))),
        }
    };
    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(Error::Checkpoint(format!("payload has {} bytes, manifest says {payload_len}", payload.len())));
    }
    let size = T::DTYPE.size();
    let mut store = ParamStore::new();
    let mut off = 0;
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let end = off + n * size;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("payload too short for {name}")));
        }
        let data = payload[off..end].chunks_exact(size).map(T::read_le).collect();
        store.push(name, Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        off = end;
    }
    if off != payload.len() {
        return Err(Error::Checkpoint("trailing payload bytes".into()));
    }
    Ok((store, meta))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode_checkpoint(store, meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

pub fn save_model<T: Scalar>(path: &Path, model: &Transformer<T>, meta: &CheckpointMeta) -> Result<()> {
    save_checkpoint(path, &model.params, meta)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(Transformer<T>, CheckpointMeta)> {
    let (store, meta) = load_checkpoint(path)?;
    if meta.kind == ArtifactKind::Verbalizers {
        return Err(Error::Checkpoint(format!("{} holds verbalizers, not a backbone", path.display())));
    }
    Ok((Transformer::from_params(meta.model.clone(), store)?, meta))
}

/// Packs a verbalizer set into one store, prefixing each tensor with `v{k}.`.
pub fn pack_verbalizers<T: Scalar>(verbs: &[Verbalizer<T>]) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (k, v) in verbs.iter().enumerate() {
        for (name, t) in v.params.iter() {
            store.push(format!("v{k}.{name}"), t.clone());
        }
    }
    store
}

pub fn save_verbalizers<T: Scalar>(path: &Path, verbs: &[Verbalizer<T>], meta: &CheckpointMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.kind = ArtifactKind::Verbalizers;
    meta.taps = Some(verbs.iter().map(|v| v.layer).collect());
    meta.verbalizer_arch = verbs.first().map(|v| v.arch);
    save_checkpoint(path, &pack_verbalizers(verbs), &meta)
}

pub fn load_verbalizers<T: Scalar>(path: &Path) -> Result<(Vec<Verbalizer<T>>, CheckpointMeta)> {
    let (store, meta) = load_checkpoint::<T>(path)?;
    let (Some(arch), Some(taps)) = (meta.verbalizer_arch, meta.taps.clone()) else {
        return Err(Error::Checkpoint(format!("{} holds no verbalizers", path.display())));
    };
    LayerTapSet::new(taps.clone(), meta.model.n_layers)?;
    let mut verbs = Vec::with_capacity(taps.len());
    let mut rest = store.iter().peekable();
    for (k, &layer) in taps.iter().enumerate() {
        let mut v = Verbalizer::<T>::new(arch, layer, &meta.model, 0)?;
        let prefix = format!("v{k}.");
        for (i, name) in v.params.names().to_vec().into_iter().enumerate() {
            let (stored, t) = rest.next().ok_or_else(|| Error::Checkpoint(format!("missing tensors for verbalizer {k}")))?;
            if stored != format!("{prefix}{name}") || t.shape() != v.params.tensors()[i].shape() {
                return Err(Error::Checkpoint(format!("unexpected tensor {stored} for verbalizer {k}")));
            }
            v.params.tensors_mut()[i] = t.clone();
        }
        verbs.push(v);
    }
    if let Some((extra, _)) = rest.peek() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((verbs, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            vocab_size: 12,
            max_seq_len: 16,
            tie_lm_head: false,
            ffn_mult: 2,
            rope_base: 10000.0,
        }
    }

    fn round_trip<T: Scalar>() {
        let m = Transformer::<T>::new(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u64();
        let mut meta = CheckpointMeta::new(ArtifactKind::Teacher, "teacher", 17, &m.cfg);
        meta.rng = Some(RngState::capture(&rng));
        let bytes = encode_checkpoint(&m.params, &meta).unwrap();
        let (store, back) = decode_checkpoint::<T>(&bytes).unwrap();
        assert_eq!(back, meta);
        assert_eq!(store.digest(), m.params.digest());
        for (a, b) in store.tensors().iter().zip(m.params.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits()));
        }
        assert_eq!(encode_checkpoint(&store, &back).unwrap(), bytes);
        let mut restored = back.rng.unwrap().restore().unwrap();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn round_trip_f32_and_f64() {
        round_trip::<f32>();
        round_trip::<f64>();
    }

    #[test]
    fn dtype_and_corruption_errors() {
        let m = Transformer::<f32>::new(tiny(), 5).unwrap();
        let meta = CheckpointMeta::new(ArtifactKind::Student, "reinforce", 0, &m.cfg);
        let bytes = encode_checkpoint(&m.params, &meta).unwrap();
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint::<f32>(b"hello\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra).is_err());
    }

    #[test]
    fn verbalizer_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Transformer::<f32>::new(tiny(), 5).unwrap();
        let taps = LayerTapSet::new(vec![0, 1], 3).unwrap();
        let verbs = crate::verbalizer::build_verbalizers(&m, &taps, VerbalizerArch::VerbFfn, 9).unwrap();
        let path = dir.path().join("v.ckpt");
        let meta = CheckpointMeta::new(ArtifactKind::Verbalizers, "verbalize", 3, &m.cfg);
        save_verbalizers(&path, &verbs, &meta).unwrap();
        let (back, meta) = load_verbalizers::<f32>(&path).unwrap();
        assert_eq!(back, verbs);
        assert_eq!(meta.taps, Some(vec![0, 1]));
        assert!(load_model::<f32>(&path).is_err());

        let mpath = dir.path().join("m.ckpt");
        save_model(&mpath, &m, &CheckpointMeta::new(ArtifactKind::Teacher, "teacher", 0, &m.cfg)).unwrap();
        assert_eq!(load_model::<f32>(&mpath).unwrap().0, m);
        assert!(load_verbalizers::<f32>(&mpath).is_err());
    }
}
