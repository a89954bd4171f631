//! Named-tensor container for all learned parameters, plus its on-disk
//! format.
//!
//! File layout (little-endian throughout):
//!
//! ```text
//! magic   b"SSWB"
//! version u32 (currently 1)
//! count   u32
//! entries, sorted by name:
//!   name_len u32, name bytes (utf-8)
//!   rank     u32, dims u64 x rank
//!   dtype    u8  (0 = f32)
//!   offset   u64 (bytes from the start of the data section)
//! data section: f32 values, contiguous per entry
//! ```
//!
//! Offsets must be ascending, non-overlapping and in-bounds; names must be
//! unique. `load` validates the header before reading any data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const WEIGHT_MAGIC: [u8; 4] = *b"SSWB";
pub const WEIGHT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One stored parameter: a small dense array of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Entry {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Entry { dims, data }
    }

    pub fn from_tensor(t: &Tensor) -> Entry {
        let s = t.shape();
        Entry::new(vec![s.batch, s.channels, s.height, s.width], t.data().to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims_string(&self) -> String {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        format!("[{}]", parts.join(","))
    }

    /// Reinterprets a rank-4 entry as a tensor.
    pub fn as_tensor(&self, name: &str) -> Result<Tensor> {
        if self.dims.len() != 4 {
            return Err(Error::ParamShape {
                name: name.into(),
                expected: "rank-4".into(),
                got: self.dims_string(),
            });
        }
        Tensor::from_vec(
            Shape::new(self.dims[0], self.dims[1], self.dims[2], self.dims[3]),
            self.data.clone(),
        )
    }
}

/// All learned parameters, keyed by canonical layer path
/// (e.g. `lbn.block4.unit0.expand.conv.weight`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, Entry>,
}

impl WeightStore {
    pub fn new() -> WeightStore {
        WeightStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam { name });
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam { name: name.into() })
    }

    /// Fetches an entry and checks its dims.
    pub fn get_checked(&self, name: &str, dims: &[usize]) -> Result<&Entry> {
        let e = self.get(name)?;
        if e.dims != dims {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            return Err(Error::ParamShape {
                name: name.into(),
                expected: format!("[{}]", parts.join(",")),
                got: e.dims_string(),
            });
        }
        Ok(e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Human-readable `name  shape  elements` listing.
    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        let mut total = 0usize;
        for (name, e) in &self.entries {
            out.push_str(&format!("{name}  {}  {}\n", e.dims_string(), e.len()));
            total += e.len();
        }
        out.push_str(&format!("total entries {}  total values {total}\n", self.entries.len()));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&WEIGHT_MAGIC)?;
        file.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        file.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, e) in &self.entries {
            file.write_all(&(name.len() as u32).to_le_bytes())?;
            file.write_all(name.as_bytes())?;
            file.write_all(&(e.dims.len() as u32).to_le_bytes())?;
            for &d in &e.dims {
                file.write_all(&(d as u64).to_le_bytes())?;
            }
            file.write_all(&[DTYPE_F32])?;
            file.write_all(&offset.to_le_bytes())?;
            offset += (e.len() * 4) as u64;
        }
        for e in self.entries.values() {
            for v in &e.data {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<WeightStore> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<WeightStore> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(4)?;
        if magic != WEIGHT_MAGIC {
            return Err(Error::WeightFile(format!(
                "bad magic {:02x?}, want {:02x?}",
                magic, WEIGHT_MAGIC
            )));
        }
        let version = cursor.u32()?;
        if version != WEIGHT_VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let count = cursor.u32()? as usize;
        let mut headers: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cursor.u32()? as usize;
            let name_bytes = cursor.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::WeightFile("entry name is not utf-8".into()))?
                .to_string();
            let rank = cursor.u32()? as usize;
            if rank > 8 {
                return Err(Error::WeightFile(format!("entry `{name}` rank {rank} too large")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = cursor.u64()?;
                if d == 0 || d > u32::MAX as u64 {
                    return Err(Error::WeightFile(format!("entry `{name}` has invalid dim {d}")));
                }
                dims.push(d as usize);
            }
            let dtype = cursor.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::WeightFile(format!("entry `{name}` has unknown dtype {dtype}")));
            }
            let offset = cursor.u64()?;
            headers.push((name, dims, offset));
        }

        let data_start = cursor.pos;
        let data_len = (bytes.len() - data_start) as u64;
        let mut expected_offset = 0u64;
        let mut store = WeightStore::new();
        for (name, dims, offset) in headers {
            let len: usize = dims.iter().product();
            let nbytes = (len * 4) as u64;
            // Ascending, densely packed offsets imply no overlap.
            if offset != expected_offset {
                return Err(Error::WeightFile(format!(
                    "entry `{name}` offset {offset} overlaps or leaves a gap (expected {expected_offset})"
                )));
            }
            expected_offset += nbytes;
            if offset + nbytes > data_len {
                return Err(Error::Truncated);
            }
            let start = data_start + offset as usize;
            let data: Vec<f32> = bytes[start..start + len * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(name, Entry::new(dims, data))?;
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}
