//! Persistent single-channel feature store.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "PGFS" | version u32 | name_len u32 | name bytes | dim u32 | count u64
//! count x record: image_id u64 | region_id u32 | dim x f32
//! count x index:  image_id u64 | region_id u32 | record u64   (sorted by key)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::featstore::FeatureChannel;

pub const MAGIC: &[u8; 4] = b"PGFS";
pub const FORMAT_VERSION: u32 = 1;

/// `(image_id, region_id)`.
pub type FeatureKey = (u64, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    channel: FeatureChannel,
    entries: BTreeMap<FeatureKey, Vec<f32>>,
}

impl FeatureStore {
    pub fn new(channel: FeatureChannel) -> Self {
        Self {
            channel,
            entries: BTreeMap::new(),
        }
    }

    pub fn channel(&self) -> &FeatureChannel {
        &self.channel
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn put(&mut self, image_id: u64, region_id: u32, values: Vec<f32>) -> Result<()> {
        if values.len() != self.channel.dim {
            return Err(Error::DimMismatch {
                expected: self.channel.dim,
                actual: values.len(),
            });
        }
        if self.entries.contains_key(&(image_id, region_id)) {
            return Err(Error::DuplicateKey {
                image_id,
                region_id,
            });
        }
        self.entries.insert((image_id, region_id), values);
        Ok(())
    }

    pub fn get(&self, image_id: u64, region_id: u32) -> Result<&[f32]> {
        self.entries
            .get(&(image_id, region_id))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingFeature {
                image_id,
                region_id,
                channel: self.channel.name.clone(),
            })
    }

    pub fn contains(&self, image_id: u64, region_id: u32) -> bool {
        self.entries.contains_key(&(image_id, region_id))
    }

    pub fn keys(&self) -> impl Iterator<Item = FeatureKey> + '_ {
        self.entries.keys().copied()
    }

    /// Moves every entry of `other` into `self`.
    pub fn merge(&mut self, other: FeatureStore) -> Result<()> {
        if other.channel != self.channel {
            return Err(Error::ChannelMismatch {
                expected: self.channel.name.clone(),
                actual: other.channel.name,
            });
        }
        for ((i, r), v) in other.entries {
            self.put(i, r, v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let name = self.channel.name.as_bytes();
        let dim = self.channel.dim;
        let n = self.entries.len();
        let mut out = Vec::with_capacity(24 + name.len() + n * (12 + 4 * dim) + n * 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for (&(image_id, region_id), values) in &self.entries {
            out.extend_from_slice(&image_id.to_le_bytes());
            out.extend_from_slice(&region_id.to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        // records are written in key order, so the index is the identity
        for (ordinal, &(image_id, region_id)) in self.entries.keys().enumerate() {
            out.extend_from_slice(&image_id.to_le_bytes());
            out.extend_from_slice(&region_id.to_le_bytes());
            out.extend_from_slice(&(ordinal as u64).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadStore("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::BadStore(format!("unsupported version {version}")));
        }
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::BadStore("channel name is not utf-8".into()))?
            .to_owned();
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::BadStore("zero dimension".into()));
        }
        let count = r.u64()? as usize;
        let record_len = 12 + 4 * dim;
        if bytes.len().saturating_sub(r.pos) < count.saturating_mul(record_len + 20) {
            return Err(Error::BadStore("truncated".into()));
        }

        let mut records: Vec<(FeatureKey, Vec<f32>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let key = (r.u64()?, r.u32()?);
            let raw = r.take(4 * dim)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push((key, values));
        }
        let mut entries = BTreeMap::new();
        let mut prev: Option<FeatureKey> = None;
        for _ in 0..count {
            let key = (r.u64()?, r.u32()?);
            let ordinal = r.u64()? as usize;
            if prev.is_some_and(|p| p >= key) {
                return Err(Error::BadStore("index not strictly sorted".into()));
            }
            prev = Some(key);
            let rec = records
                .get_mut(ordinal)
                .ok_or_else(|| Error::BadStore(format!("index points past record {ordinal}")))?;
            if rec.0 != key {
                return Err(Error::BadStore("index key disagrees with record".into()));
            }
            entries.insert(key, std::mem::take(&mut rec.1));
        }
        if r.pos != bytes.len() {
            return Err(Error::BadStore("trailing bytes".into()));
        }
        if entries.len() != count {
            return Err(Error::BadStore("duplicate keys".into()));
        }
        Ok(Self {
            channel: FeatureChannel { name, dim },
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::BadStore("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}
