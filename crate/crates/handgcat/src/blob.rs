//! Named little-endian arrays in one binary file, indexed by JSON entries.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U64,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::U64 | Dtype::F64 => 8,
        }
    }
}

/// Location of one array inside the buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset.
    pub offset: usize,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * self.dtype.size()
    }
}

/// Values that can be stored in a buffer.
pub trait Element: Copy {
    const DTYPE: Dtype;
    fn write(self, out: &mut Vec<u8>);
    fn read(bytes: &[u8]) -> Self;
}

macro_rules! element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: Dtype = $d;
            fn write(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().unwrap())
            }
        }
    };
}

element!(u8, Dtype::U8);
element!(u64, Dtype::U64);
element!(f32, Dtype::F32);
element!(f64, Dtype::F64);

#[derive(Default)]
pub struct BlobWriter {
    data: Vec<u8>,
    entries: Vec<Entry>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Element>(&mut self, name: &str, shape: &[usize], values: &[T]) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            bail!("array {name}: shape {shape:?} holds {n} values, got {}", values.len());
        }
        if self.entries.iter().any(|e| e.name == name) {
            bail!("duplicate array name {name}");
        }
        self.entries.push(Entry { name: name.to_string(), dtype: T::DTYPE, shape: shape.to_vec(), offset: self.data.len() });
        self.data.reserve(n * T::DTYPE.size());
        for &v in values {
            v.write(&mut self.data);
        }
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Writes the buffer and returns its index.
    pub fn finish(self, path: &Path) -> Result<Vec<Entry>> {
        std::fs::write(path, &self.data).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.entries)
    }
}

pub struct BlobReader {
    data: Vec<u8>,
    entries: Vec<Entry>,
}

impl BlobReader {
    pub fn open(path: &Path, entries: Vec<Entry>) -> Result<Self> {
        let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(data, entries)
    }

    pub fn from_bytes(data: Vec<u8>, entries: Vec<Entry>) -> Result<Self> {
        for e in &entries {
            if e.offset.checked_add(e.bytes()).is_none_or(|end| end > data.len()) {
                bail!("array {} ({:?} {:?} at {}) runs past the {}-byte buffer", e.name, e.dtype, e.shape, e.offset, data.len());
            }
        }
        Ok(Self { data, entries })
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries.iter().find(|e| e.name == name).with_context(|| format!("missing array {name}"))
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn read<T: Element>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let e = self.entry(name)?;
        if e.dtype != T::DTYPE {
            bail!("array {name} is {:?}, requested {:?}", e.dtype, T::DTYPE);
        }
        let size = T::DTYPE.size();
        let raw = &self.data[e.offset..e.offset + e.bytes()];
        Ok((e.shape.clone(), raw.chunks_exact(size).map(T::read).collect()))
    }

    /// Reads an array and checks its shape.
    pub fn read_shaped<T: Element>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let (s, v) = self.read(name)?;
        if s != shape {
            bail!("array {name} has shape {s:?}, expected {shape:?}");
        }
        Ok(v)
    }
}
