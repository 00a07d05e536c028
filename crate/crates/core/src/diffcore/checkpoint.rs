//! Checkpoint container: `MMCK` magic, u16 version, u32 manifest length,
//! a JSON manifest, then raw little-endian float payloads in manifest order.

use super::adam::AdamState;
use super::params::{ParamId, ParamStore};
use super::scalar::{Precision, Scalar};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamManifest {
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub precision: Precision,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub adam: Vec<AdamManifest>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub payloads: Vec<Vec<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Packs parameters and any number of Adam states. Adam moments are
    /// stored as tensors named `adam{i}.m.<param>` / `adam{i}.v.<param>`.
    pub fn pack(
        params: &ParamStore<T>,
        adams: &[&AdamState<T>],
        step: u64,
        extra: serde_json::Value,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut payloads = Vec::new();
        for (_, p) in params.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.shape.to_vec(),
            });
            payloads.push(p.values.clone());
        }
        let mut adam = Vec::new();
        for (i, st) in adams.iter().enumerate() {
            let names: Vec<String> = st
                .params
                .iter()
                .map(|&id| params.get(id).name.clone())
                .collect();
            for (slot, &id) in st.params.iter().enumerate() {
                let shape = params.get(id).shape.to_vec();
                tensors.push(TensorEntry {
                    name: format!("adam{i}.m.{}", names[slot]),
                    shape: shape.clone(),
                });
                payloads.push(st.first_moment[slot].clone());
                tensors.push(TensorEntry {
                    name: format!("adam{i}.v.{}", names[slot]),
                    shape,
                });
                payloads.push(st.second_moment[slot].clone());
            }
            adam.push(AdamManifest {
                step_count: st.step_count,
                beta1: st.beta1,
                beta2: st.beta2,
                epsilon: st.epsilon,
                params: names,
            });
        }
        Checkpoint {
            manifest: Manifest {
                precision: T::PRECISION,
                step,
                tensors,
                adam,
                extra,
            },
            payloads,
        }
    }

    fn tensor(&self, name: &str) -> Result<&Vec<T>> {
        self.manifest
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| &self.payloads[i])
            .ok_or_else(|| Error::Corrupt(format!("checkpoint has no tensor {name}")))
    }

    /// Overwrites every parameter of `params` from the checkpoint by name.
    pub fn restore_params(&self, params: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let name = params.get(id).name.clone();
            let src = self.tensor(&name)?;
            let dst = params.get_mut(id);
            if src.len() != dst.values.len() {
                return Err(Error::shape("restore_params", name));
            }
            dst.values.clone_from(src);
        }
        Ok(())
    }

    /// Rebuilds Adam state `index` against the parameter ids of `params`.
    pub fn restore_adam(&self, params: &ParamStore<T>, index: usize) -> Result<AdamState<T>> {
        let am = self
            .manifest
            .adam
            .get(index)
            .ok_or_else(|| Error::Corrupt(format!("no adam state {index}")))?;
        let mut ids = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in &am.params {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Corrupt(format!("unknown parameter {name}")))?;
            ids.push(id);
            m.push(self.tensor(&format!("adam{index}.m.{name}"))?.clone());
            v.push(self.tensor(&format!("adam{index}.v.{name}"))?.clone());
        }
        Ok(AdamState {
            step_count: am.step_count,
            beta1: am.beta1,
            beta2: am.beta2,
            epsilon: am.epsilon,
            params: ids,
            first_moment: m,
            second_moment: v,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(manifest.len() + 10);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for p in &self.payloads {
            for &v in p {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = bytes
            .get(10..10 + mlen)
            .ok_or_else(|| Error::Corrupt("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.precision != T::PRECISION {
            return Err(Error::Corrupt(format!(
                "checkpoint precision {:?} does not match requested {:?}",
                manifest.precision,
                T::PRECISION
            )));
        }
        let w = T::PRECISION.byte_width();
        let mut pos = 10 + mlen;
        let mut payloads = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            let end = pos + n * w;
            let raw = bytes
                .get(pos..end)
                .ok_or_else(|| Error::Corrupt(format!("payload of {} truncated", t.name)))?;
            payloads.push(raw.chunks_exact(w).map(T::read_le).collect());
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after payloads".into()));
        }
        Ok(Checkpoint { manifest, payloads })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::params::Grads;
    use crate::diffcore::adam::adam_step;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", [2, 3], vec![1.0, -2.0, 3.5, 0.25, 1e-7, -0.0]);
        s.add("b", [1, 3], vec![0.1, 0.2, 0.3]);
        s
    }

    #[test]
    fn round_trip_with_adam() {
        let mut s = store();
        let mut g = Grads::zeros_like(&s);
        g.buffers[0].iter_mut().for_each(|v| *v = 0.5);
        let mut st = AdamState::new(&s, s.ids().collect());
        adam_step(&mut s, &g, &mut st, 0.01).unwrap();
        let ck = Checkpoint::pack(&s, &[&st], 7, serde_json::json!({"note": "x"}));
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store();
        back.restore_params(&mut fresh).unwrap();
        assert_eq!(fresh, s);
        let st2 = back.restore_adam(&fresh, 0).unwrap();
        assert_eq!(st2, st);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let ck = Checkpoint::pack(&store(), &[], 0, serde_json::Value::Null);
        let bytes = ck.to_bytes().unwrap();
        let err = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
    }

    #[test]
    fn precision_mismatch_rejected() {
        let ck = Checkpoint::pack(&store(), &[], 0, serde_json::Value::Null);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mmck");
        let ck = Checkpoint::pack(&store(), &[], 3, serde_json::Value::Null);
        ck.write(&path).unwrap();
        assert_eq!(Checkpoint::<f32>::read(&path).unwrap(), ck);
        assert!(!dir.path().join("model.mmck.tmp").exists());
    }
}
