//! Binary checkpoint container.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! "DSN1" | version u32 | config hash u64 | record count u32
//! record: name_len u32 | name utf8 | dtype u8 | ndim u32 | dims u64 × ndim
//!         | payload_len u64 | payload
//! ```
//!
//! dtype 0 is f64, 1 is u64 (both shaped by `dims`), 2 is UTF-8 text
//! (`ndim` 0).

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DSN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64(Vec<u64>),
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub records: IndexMap<String, Payload>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Corrupt(format!("{what} overflows usize")))
    }
}

impl Checkpoint {
    pub fn new(config_hash: u64) -> Self {
        Self { config_hash, records: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, payload: Payload) {
        self.records.insert(name.into(), payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(self.config_hash.to_le_bytes());
        out.extend((self.records.len() as u32).to_le_bytes());
        for (name, payload) in &self.records {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, dims, body): (u8, Vec<usize>, Vec<u8>) = match payload {
                Payload::F64 { shape, data } => (0, shape.clone(), data.iter().flat_map(|v| v.to_le_bytes()).collect()),
                Payload::U64(data) => (1, vec![data.len()], data.iter().flat_map(|v| v.to_le_bytes()).collect()),
                Payload::Text(s) => (2, Vec::new(), s.as_bytes().to_vec()),
            };
            out.push(dtype);
            out.extend((dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend((d as u64).to_le_bytes());
            }
            out.extend((body.len() as u64).to_le_bytes());
            out.extend(body);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Corrupt("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let config_hash = r.u64("config hash")?;
        let count = r.u32("record count")?;
        let mut records = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u32("record name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "record name")?)
                .map_err(|_| Error::Corrupt("record name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let ndim = r.u32("ndim")? as usize;
            let dims = (0..ndim).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
            let payload_len = r.len("payload length")?;
            let body = r.take(payload_len, &format!("payload of {name}"))?;
            let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let expect = |width: usize| -> Result<()> {
                if count.and_then(|c| c.checked_mul(width)) == Some(payload_len) {
                    Ok(())
                } else {
                    Err(Error::Corrupt(format!("record {name}: payload of {payload_len} bytes does not match dims {dims:?}")))
                }
            };
            let payload = match dtype {
                0 => {
                    expect(8)?;
                    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Payload::F64 { shape: dims, data }
                }
                1 => {
                    expect(8)?;
                    if ndim != 1 {
                        return Err(Error::Corrupt(format!("record {name}: u64 records are 1-d")));
                    }
                    Payload::U64(body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
                }
                2 => {
                    if ndim != 0 {
                        return Err(Error::Corrupt(format!("record {name}: text records have no dims")));
                    }
                    let text = std::str::from_utf8(body).map_err(|_| Error::Corrupt(format!("record {name} is not UTF-8")))?;
                    Payload::Text(text.to_string())
                }
                other => return Err(Error::Corrupt(format!("record {name}: unknown dtype {other}"))),
            };
            if records.insert(name.clone(), payload).is_some() {
                return Err(Error::Corrupt(format!("duplicate record {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_hash, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Writes to a sibling temporary file, syncs, then renames over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Errors with [`Error::ConfigMismatch`] unless the hashes agree or
    /// `force` is set.
    pub fn check_hash(&self, expected: u64, force: bool) -> Result<()> {
        if self.config_hash != expected && !force {
            return Err(Error::ConfigMismatch { found: self.config_hash, expected });
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Payload> {
        self.records.get(name).ok_or_else(|| Error::Corrupt(format!("missing record {name}")))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Payload::F64 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Corrupt(format!("record {name} is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Payload::U64(v) => Ok(v),
            _ => Err(Error::Corrupt(format!("record {name} is not u64"))),
        }
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            _ => Err(Error::Corrupt(format!("record {name} is not a scalar"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Payload::Text(s) => Ok(s),
            _ => Err(Error::Corrupt(format!("record {name} is not text"))),
        }
    }
}
