//! Versioned checkpoint container.
//!
//! Layout: the 8 bytes `BVAECKPT`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the JSON manifest, then the tensor
//! payload. Every tensor is stored contiguously in little-endian order at the
//! offset (relative to the payload start) recorded in the manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelKind, Vae};
use crate::rng::RngSnapshot;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::AdamW;

pub const MAGIC: &[u8; 8] = b"BVAECKPT";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Training progress stored next to the tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub rng: Option<RngSnapshot>,
    /// Caller-defined data (configuration, metric history).
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelKind,
    pub arch: Architecture,
    pub dtype: DType,
    pub adam_t: Option<u64>,
    pub state: TrainState,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
pub struct Checkpoint<T: Scalar> {
    pub model: Vae<T>,
    pub optimizer: Option<AdamW<T>>,
    pub state: TrainState,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes a model, optional optimizer moments and training state.
pub fn encode_checkpoint<T: Scalar>(
    model: &Vae<T>,
    optimizer: Option<&AdamW<T>>,
    state: &TrainState,
) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
    let named = model.named_ids();
    for (name, id) in &named {
        tensors.push((format!("{PARAM}{name}"), model.value(*id)));
    }
    if let Some(opt) = optimizer {
        for (name, id) in &named {
            if let Some((m, v)) = opt.moments(*id) {
                tensors.push((format!("{ADAM_M}{name}"), m));
                tensors.push((format!("{ADAM_V}{name}"), v));
            }
        }
    }
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        entries.push(TensorEntry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        model: model.kind(),
        arch: model.arch().clone(),
        dtype: T::DTYPE,
        adam_t: optimizer.map(|o| o.t),
        state: state.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ckpt_err(format!("manifest: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Reads the header and manifest, returning it with the payload slice.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ckpt_err(format!(
            "unsupported checkpoint version {version} (this build reads version {VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(20))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ckpt_err("manifest length exceeds file size"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| ckpt_err(format!("corrupt manifest: {e}")))?;
    Ok((manifest, &bytes[end..]))
}

fn read_tensor<T: Scalar>(entry: &TensorEntry, payload: &[u8]) -> Result<Tensor<T>> {
    if entry.dtype != T::DTYPE {
        return Err(ckpt_err(format!(
            "tensor {} is {}, expected {}",
            entry.name,
            entry.dtype,
            T::DTYPE
        )));
    }
    let count: usize = entry.shape.iter().product();
    if count as u64 * T::DTYPE.size_of() as u64 != entry.nbytes {
        return Err(ckpt_err(format!("tensor {} has inconsistent byte length", entry.name)));
    }
    let start = entry.offset as usize;
    let bytes = start
        .checked_add(entry.nbytes as usize)
        .and_then(|end| payload.get(start..end))
        .ok_or_else(|| ckpt_err(format!("payload truncated: tensor {} is missing", entry.name)))?;
    let data = bytes.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
    Tensor::new(entry.shape.clone(), data)
}

/// Deserializes a checkpoint written with element type `T`.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (manifest, payload) = decode_manifest(bytes)?;
    if manifest.dtype != T::DTYPE {
        return Err(ckpt_err(format!(
            "dtype mismatch: checkpoint holds {}, requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let mut spans: Vec<(u64, u64)> = manifest
        .tensors
        .iter()
        .map(|e| (e.offset, e.offset + e.nbytes))
        .collect();
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(ckpt_err("manifest tensors overlap"));
    }

    let mut model = Vae::<T>::new(manifest.model, manifest.arch.clone(), 0)?;
    let mut optimizer = manifest.adam_t.map(|t| {
        let mut o = AdamW::new(Default::default());
        o.t = t;
        o
    });
    let mut loaded = std::collections::HashSet::new();
    let mut pending_m = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let t = read_tensor::<T>(entry, payload)?;
        if let Some(name) = entry.name.strip_prefix(PARAM) {
            let id = model
                .id_of(name)
                .ok_or_else(|| ckpt_err(format!("unknown parameter {name}")))?;
            model
                .set_value(id, t)
                .map_err(|_| ckpt_err(format!("parameter {name} has the wrong shape")))?;
            loaded.insert(name.to_string());
        } else if let Some(name) = entry.name.strip_prefix(ADAM_M) {
            pending_m.insert(name.to_string(), t);
        } else if let Some(name) = entry.name.strip_prefix(ADAM_V) {
            let (opt, m) = optimizer
                .as_mut()
                .zip(pending_m.remove(name))
                .ok_or_else(|| ckpt_err(format!("stray optimizer moment for {name}")))?;
            let id = model
                .id_of(name)
                .ok_or_else(|| ckpt_err(format!("unknown parameter {name}")))?;
            opt.set_moments(id, m, t)?;
        } else {
            return Err(ckpt_err(format!("unrecognized tensor {}", entry.name)));
        }
    }
    if let Some((name, _)) = model.named_ids().into_iter().find(|(n, _)| !loaded.contains(n)) {
        return Err(ckpt_err(format!("parameter {name} is missing")));
    }
    if let Some(name) = pending_m.keys().next() {
        return Err(ckpt_err(format!("optimizer moment for {name} is incomplete")));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        state: manifest.state,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Vae<T>,
    optimizer: Option<&AdamW<T>>,
    state: &TrainState,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, optimizer, state)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Element type stored in a checkpoint file.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    Ok(decode_manifest(&std::fs::read(path)?)?.0.dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::rng::RngState;

    fn model<T: Scalar>(kind: ModelKind) -> Vae<T> {
        let arch = Architecture::new([1, 8, 8], "conv2k4s2p1,dense8", 3, Default::default()).unwrap();
        Vae::new(kind, arch, 4).unwrap()
    }

    fn with_moments<T: Scalar>(m: &Vae<T>) -> AdamW<T> {
        let mut opt = AdamW::new(Default::default());
        let mut rng = RngState::new(1);
        for (_, id) in m.named_ids() {
            let shape = m.value(id).shape().to_vec();
            opt.set_moments(id, rng.standard_normal(shape.clone()), rng.standard_normal(shape))
                .unwrap();
        }
        opt.t = 17;
        opt
    }

    fn state() -> TrainState {
        TrainState {
            step: 17,
            epoch: 2,
            rng: Some(RngState::new(3).snapshot()),
            extra: serde_json::json!({"note": "x"}),
        }
    }

    fn roundtrip<T: Scalar>(kind: ModelKind) {
        let m = model::<T>(kind);
        let opt = with_moments(&m);
        let bytes = encode_checkpoint(&m, Some(&opt), &state()).unwrap();
        let ck = decode_checkpoint::<T>(&bytes).unwrap();
        for ((na, ia), (nb, ib)) in m.named_ids().into_iter().zip(ck.model.named_ids()) {
            assert_eq!(na, nb);
            assert_eq!(m.value(ia).data(), ck.model.value(ib).data());
        }
        assert_eq!(ck.state, state());
        let again = encode_checkpoint(&ck.model, ck.optimizer.as_ref(), &ck.state).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn roundtrip_is_exact_in_both_precisions() {
        roundtrip::<f32>(ModelKind::Bvae);
        roundtrip::<f64>(ModelKind::Twin);
    }

    #[test]
    fn rejects_version_dtype_and_manifest_damage() {
        let m = model::<f32>(ModelKind::Bvae);
        let bytes = encode_checkpoint(&m, None, &state()).unwrap();
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode_checkpoint::<f32>(&v2), Err(Error::Checkpoint(s)) if s.contains("version 2")));
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Checkpoint(s)) if s.contains("dtype")));
        let mut bad = bytes.clone();
        bad[21] = b'!';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Checkpoint(s)) if s.contains("manifest")));
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let m = model::<f32>(ModelKind::Bvae);
        let bytes = encode_checkpoint(&m, None, &state()).unwrap();
        let (manifest, _) = decode_manifest(&bytes).unwrap();
        let last = manifest.tensors.last().unwrap().name.clone();
        let err = decode_checkpoint::<f32>(&bytes[..bytes.len() - 2]).err().unwrap();
        assert!(err.to_string().contains(&last), "{err}");
    }
}
