//! The "ULDA1" model container.
//!
//! ```text
//! magic      8 bytes   "ULDA1\0\0\0"
//! length     u64 LE    byte length of the manifest
//! manifest   JSON      {version, role, tensors: [{name, shape}], delta, seed}
//! payload              one CTF1 real-f64 array per tensor, in manifest order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamBundle, Tensor};
use crate::error::{Error, Result};
use crate::tensor::ctf::{Array, ArrayData};

pub const MAGIC: &[u8; 8] = b"ULDA1\0\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Extractor,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub role: Role,
    pub tensors: Vec<TensorEntry>,
    pub delta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub role: Role,
    pub delta: f64,
    pub seed: u64,
    pub params: ParamBundle,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: VERSION,
            role: self.role,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                })
                .collect(),
            delta: self.delta,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            let arr = Array::new(t.shape.clone(), ArrayData::RealF64(t.data.clone()))?;
            arr.write_to(&mut out)
                .expect("writing to a Vec cannot fail");
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a ULDA1 model file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(bad("truncated manifest".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.version != VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        let mut cursor = &body[len..];
        let mut params = ParamBundle::new();
        for entry in &manifest.tensors {
            let arr =
                Array::read_from(&mut cursor).map_err(|e| bad(format!("{}: {e}", entry.name)))?;
            let data = match arr.data {
                ArrayData::RealF64(v) => v,
                _ => return Err(bad(format!("{}: expected real f64 payload", entry.name))),
            };
            if arr.dims != entry.shape {
                return Err(bad(format!(
                    "{}: manifest shape {:?} but payload {:?}",
                    entry.name, entry.shape, arr.dims
                )));
            }
            params.insert(entry.name.clone(), Tensor::new(arr.dims, data)?);
        }
        if !cursor.is_empty() {
            return Err(bad(format!("{} trailing bytes", cursor.len())));
        }
        if !params.is_finite() {
            return Err(bad("non-finite parameter values".into()));
        }
        Ok(ModelFile {
            role: manifest.role,
            delta: manifest.delta,
            seed: manifest.seed,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ExtractorParams, InitScheme};

    #[test]
    fn round_trip_is_bit_identical() {
        let mut params = ExtractorParams::init(3, InitScheme::GlorotLike).to_bundle();
        params.insert(
            "steps.log_alpha",
            Tensor::new(vec![2], vec![-2.3, 0.1]).unwrap(),
        );
        let file = ModelFile {
            role: Role::Extractor,
            delta: 1e-3,
            seed: 3,
            params,
        };
        let bytes = file.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = ModelFile::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.params.digest(), file.params.digest());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let file = ModelFile {
            role: Role::Adapter,
            delta: 1e-3,
            seed: 0,
            params: crate::network::AdapterParams::identity().to_bundle(),
        };
        let bytes = file.to_bytes().unwrap();
        let p = Path::new("mem");
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelFile::from_bytes(&extra, p).is_err());
        assert!(ModelFile::from_bytes(b"ULDA2\0\0\0\0\0\0\0\0\0\0\0", p).is_err());
    }
}
