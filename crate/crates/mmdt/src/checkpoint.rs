//! Named-tensor checkpoint archive.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic "MMDTCKPT" (8 bytes)
//! version: u32 (= 1)
//! entry count: u32
//! entries: name_len u32, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!          rank u8, dims u32 x rank, payload (row-major, LE)
//! metadata: len u32, UTF-8 "key=value" lines
//! ```
//!
//! Loading is safe on untrusted input: every length is bounds-checked
//! against the remaining bytes before any allocation, and errors carry the
//! byte offset of the problem.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{collect_tensors, load_tensors, TensorTree};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MMDTCKPT";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl ArchiveTensor {
    pub fn dtype(&self) -> DType {
        match self {
            ArchiveTensor::F32(_) => DType::F32,
            ArchiveTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArchiveTensor::F32(t) => t.shape(),
            ArchiveTensor::F64(t) => t.shape(),
        }
    }
}

/// Ordered named tensors plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, ArchiveTensor)>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.dtype() as u8);
            let shape = tensor.shape().to_vec();
            out.push(shape.len() as u8);
            for &d in &shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match tensor {
                ArchiveTensor::F32(t) => {
                    for &v in t.data() {
                        v.write_le(&mut out);
                    }
                }
                ArchiveTensor::F64(t) => {
                    for &v in t.data() {
                        v.write_le(&mut out);
                    }
                }
            }
        }
        let meta: String = self
            .metadata
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
        let mut pos = 0usize;
        let corrupt = |pos: usize, reason: &str| Error::CorruptArchive {
            offset: pos as u64,
            reason: reason.to_string(),
        };
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - *pos < n {
                return Err(corrupt(*pos, &format!("truncated while reading {what}")));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let take_u32 = |pos: &mut usize, what: &str| -> Result<u32> {
            let s = take(pos, 4, what)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };

        let magic = take(&mut pos, 8, "magic")?;
        if magic != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = take_u32(&mut pos, "version")?;
        if version != VERSION {
            return Err(corrupt(8, &format!("unsupported version {version}")));
        }
        let count = take_u32(&mut pos, "entry count")? as usize;

        let mut entries = Vec::new();
        let mut seen: HashMap<String, ()> = HashMap::new();
        for _ in 0..count {
            let name_pos = pos;
            let name_len = take_u32(&mut pos, "name length")? as usize;
            if name_len == 0 || name_len > MAX_NAME_LEN {
                return Err(corrupt(name_pos, &format!("bad name length {name_len}")));
            }
            let name_bytes = take(&mut pos, name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| corrupt(name_pos + 4, "name is not UTF-8"))?
                .to_string();
            if seen.insert(name.clone(), ()).is_some() {
                return Err(corrupt(name_pos, &format!("duplicate tensor name {name:?}")));
            }
            let dtype_pos = pos;
            let dtype_code = take(&mut pos, 1, "dtype")?[0];
            let dtype = DType::from_code(dtype_code)
                .ok_or_else(|| corrupt(dtype_pos, &format!("unknown dtype code {dtype_code}")))?;
            let rank_pos = pos;
            let rank = take(&mut pos, 1, "rank")?[0] as usize;
            if rank > MAX_RANK {
                return Err(corrupt(rank_pos, &format!("rank {rank} exceeds {MAX_RANK}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut elems: usize = 1;
            for _ in 0..rank {
                let dim_pos = pos;
                let d = take_u32(&mut pos, "dim")? as usize;
                elems = elems
                    .checked_mul(d)
                    .ok_or_else(|| corrupt(dim_pos, "dimension product overflows"))?;
                dims.push(d);
            }
            let payload_len = elems
                .checked_mul(dtype.size())
                .ok_or_else(|| corrupt(pos, "payload size overflows"))?;
            let payload = take(&mut pos, payload_len, "tensor payload")?;
            let tensor = match dtype {
                DType::F32 => {
                    let data = payload
                        .chunks_exact(4)
                        .map(f32::from_le_slice)
                        .collect::<Vec<_>>();
                    ArchiveTensor::F32(Tensor::from_vec(&dims, data))
                }
                DType::F64 => {
                    let data = payload
                        .chunks_exact(8)
                        .map(f64::from_le_slice)
                        .collect::<Vec<_>>();
                    ArchiveTensor::F64(Tensor::from_vec(&dims, data))
                }
            };
            entries.push((name, tensor));
        }

        let meta_pos = pos;
        let meta_len = take_u32(&mut pos, "metadata length")? as usize;
        let meta_bytes = take(&mut pos, meta_len, "metadata")?;
        let meta_str = std::str::from_utf8(meta_bytes)
            .map_err(|_| corrupt(meta_pos + 4, "metadata is not UTF-8"))?;
        let mut metadata = BTreeMap::new();
        for line in meta_str.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(meta_pos + 4, "metadata line missing '='"))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        if pos != bytes.len() {
            return Err(corrupt(pos, "trailing bytes after archive end"));
        }
        Ok(Archive { entries, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

fn wrap_tensor<S: Scalar>(t: Tensor<S>) -> ArchiveTensor {
    match S::DTYPE {
        DType::F32 => ArchiveTensor::F32(t.cast()),
        DType::F64 => ArchiveTensor::F64(t.cast()),
    }
}

fn unwrap_tensor<S: Scalar>(name: &str, t: &ArchiveTensor) -> Result<Tensor<S>> {
    match (t, S::DTYPE) {
        (ArchiveTensor::F32(t), DType::F32) => Ok(t.cast()),
        (ArchiveTensor::F64(t), DType::F64) => Ok(t.cast()),
        // Widening f32 -> f64 is exact.
        (ArchiveTensor::F32(t), DType::F64) => Ok(t.cast()),
        (ArchiveTensor::F64(_), DType::F32) => Err(Error::State(format!(
            "tensor {name} is f64; refusing lossy narrow to f32"
        ))),
    }
}

/// Save every tensor of a network (weights and buffers) plus metadata.
pub fn save_net<S: Scalar>(
    net: &mut dyn TensorTree<S>,
    metadata: BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let entries = collect_tensors(net)
        .into_iter()
        .map(|(name, t)| (name, wrap_tensor(t)))
        .collect();
    Archive { entries, metadata }.save(path)
}

/// Load tensors into an existing network; every network tensor must be
/// present in the archive.
pub fn load_net<S: Scalar>(net: &mut dyn TensorTree<S>, path: &Path) -> Result<Archive> {
    let archive = Archive::load(path)?;
    load_net_from(net, &archive)?;
    Ok(archive)
}

pub fn load_net_from<S: Scalar>(net: &mut dyn TensorTree<S>, archive: &Archive) -> Result<()> {
    let mut map = HashMap::new();
    for (name, t) in &archive.entries {
        map.insert(name.clone(), unwrap_tensor::<S>(name, t)?);
    }
    let missing = load_tensors(net, &map);
    if !missing.is_empty() {
        return Err(Error::State(format!(
            "checkpoint is missing tensors: {missing:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test".to_string());
        meta.insert("iteration".to_string(), "17".to_string());
        Archive {
            entries: vec![
                (
                    "a.w".to_string(),
                    ArchiveTensor::F32(Tensor::from_vec(
                        &[2, 3],
                        vec![1.0, -2.5, 0.0, 3.25, 1e-7, -0.0],
                    )),
                ),
                (
                    "a.b".to_string(),
                    ArchiveTensor::F64(Tensor::from_vec(&[2], vec![0.1, -0.2])),
                ),
                ("z".to_string(), ArchiveTensor::F32(Tensor::zeros(&[1, 1, 1]))),
            ],
            metadata: meta,
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let a = sample();
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a.entries.len(), b.entries.len());
        for ((na, ta), (nb, tb)) in a.entries.iter().zip(b.entries.iter()) {
            assert_eq!(na, nb);
            match (ta, tb) {
                (ArchiveTensor::F32(x), ArchiveTensor::F32(y)) => assert!(x.bits_eq(y)),
                (ArchiveTensor::F64(x), ArchiveTensor::F64(y)) => assert!(x.bits_eq(y)),
                _ => panic!("dtype changed in round trip"),
            }
        }
        assert_eq!(a.metadata, b.metadata);
        // Byte-level determinism too.
        assert_eq!(bytes, b.to_bytes());
    }

    #[test]
    fn empty_archive_is_valid() {
        let a = Archive::default();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert!(b.entries.is_empty());
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let bytes = sample().to_bytes();
        for cut in [0, 4, 8, 11, 15, 20, bytes.len() - 1] {
            let err = Archive::from_bytes(&bytes[..cut]).unwrap_err();
            match err {
                Error::CorruptArchive { offset, .. } => assert!(offset <= cut as u64),
                other => panic!("expected CorruptArchive, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::CorruptArchive { .. })
        ));
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::CorruptArchive { .. })
        ));
    }

    #[test]
    fn oversized_dims_rejected_before_allocation() {
        // Hand-craft an entry claiming a huge tensor with a tiny payload.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.push(0); // f32
        bytes.push(2); // rank 2
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = Archive::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::CorruptArchive { .. }), "{err:?}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = sample();
        a.entries
            .push(("a.w".to_string(), ArchiveTensor::F32(Tensor::zeros(&[1]))));
        let bytes = a.to_bytes();
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::CorruptArchive { .. })
        ));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::CorruptArchive { .. })
        ));
    }

    #[test]
    fn net_save_load_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut net: crate::nn::Linear<f32> = crate::nn::Linear::new(4, 2, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lin.ckpt");
        save_net(&mut net, BTreeMap::new(), &path).unwrap();
        let mut other: crate::nn::Linear<f32> = crate::nn::Linear::zeros(4, 2);
        load_net(&mut other, &path).unwrap();
        assert!(net.w.bits_eq(&other.w) && net.b.bits_eq(&other.b));
    }
}
