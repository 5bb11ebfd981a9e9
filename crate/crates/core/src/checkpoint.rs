//! Self-describing binary container of named tensors.
//!
//! Layout: magic `TGAN`, u32 version (= 1), u32 entry count; per entry a
//! u16 name length + UTF-8 name, u8 dtype code (0 = f32, 1 = f64), u8 rank,
//! rank u32 dims, then the raw little-endian values; a trailing u32 CRC-32
//! (IEEE) of all preceding bytes. Everything is endian-pinned so the format
//! is trivially parseable from any language.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"TGAN";
pub const VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFFFFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFFFFFF
}

/// Ordered list of named tensors; order is preserved through serialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(name, Tensor::scalar(value));
    }

    /// Store a u64 bit-exactly in an f64 slot.
    pub fn push_u64(&mut self, name: impl Into<String>, value: u64) {
        self.push(name, Tensor::scalar(f64::from_bits(value)));
    }

    /// Store a byte string, packed 8 bytes per f64 plus a length entry.
    pub fn push_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.push_u64(format!("{name}/len"), bytes.len() as u64);
        let mut packed = Vec::with_capacity(bytes.len().div_ceil(8));
        for chunk in bytes.chunks(8) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            packed.push(f64::from_bits(u64::from_le_bytes(word)));
        }
        if packed.is_empty() {
            packed.push(0.0);
        }
        let len = packed.len();
        self.push(format!("{name}/data"), Tensor::new(vec![len], packed).unwrap());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn require_scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if !t.is_scalar() {
            return Err(Error::Checkpoint(format!("entry `{name}` is not a scalar")));
        }
        Ok(t.item())
    }

    pub fn require_u64(&self, name: &str) -> Result<u64> {
        Ok(self.require_scalar(name)?.to_bits())
    }

    pub fn require_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let len = self.require_u64(&format!("{name}/len"))? as usize;
        let data = self.require(&format!("{name}/data"))?;
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for &v in data.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        if len > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "entry `{name}` claims {len} bytes but holds {}",
                bytes.len()
            )));
        }
        bytes.truncate(len);
        Ok(bytes)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("entry name too long: `{name}`")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(tensor.dtype().code());
            let shape = tensor.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint("tensor rank exceeds 255".into()));
            }
            out.push(shape.len() as u8);
            for &d in shape {
                if d > u32::MAX as usize {
                    return Err(Error::Checkpoint("dimension exceeds u32".into()));
                }
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match tensor.dtype() {
                DType::F32 => {
                    for &v in tensor.data() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in tensor.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        let fail = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 4 + 4 + 4 + 4 {
            return Err(fail("container too short"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "crc mismatch: stored {stored:#010x}, computed {computed:#010x}"
            )));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(fail("truncated container"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| fail("entry name is not utf-8"))?;
            let dtype = DType::from_code(take(&mut pos, 1)?[0])?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let data = match dtype {
                DType::F32 => {
                    let raw = take(&mut pos, count * 4)?;
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect::<Vec<f64>>()
                }
                DType::F64 => {
                    let raw = take(&mut pos, count * 8)?;
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect::<Vec<f64>>()
                }
            };
            let tensor = Tensor::new(shape, data)?.with_dtype(dtype);
            entries.push((name, tensor));
        }
        if pos != body.len() {
            return Err(fail("trailing bytes after the last entry"));
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Container> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Container::from_bytes(&bytes)
    }
}
