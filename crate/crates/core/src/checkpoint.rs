//! Binary checkpoints: named little-endian tensor records plus metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NIFF" u32:version
//! u32:n_meta { u32:len key  u32:len value }*
//! u32:n_records { u16:len name  u8:dtype  u8:ndim  u64:dim*  payload }*
//! "FFIN"
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{NiffError, Result};
use crate::model::Model;
use crate::param::Parameterized;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"NIFF";
const TRAILER: &[u8; 4] = b"FFIN";
pub const VERSION: u32 = 1;

pub const MOMENTUM_PREFIX: &str = "momentum/";
pub const BUFFER_PREFIX: &str = "buffer/";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Row-major little-endian values.
    pub payload: Vec<u8>,
}

impl Record {
    pub fn from_values<T: Scalar>(name: impl Into<String>, shape: Vec<usize>, values: &[T]) -> Self {
        let mut payload = Vec::with_capacity(values.len() * T::DTYPE.size());
        for v in values {
            v.write_le(&mut payload);
        }
        Record {
            name: name.into(),
            dtype: T::DTYPE,
            shape,
            payload,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn values<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(NiffError::Checkpoint(format!(
                "record `{}` holds {} values, expected {}",
                self.name,
                self.dtype.name(),
                T::DTYPE.name()
            )));
        }
        Ok(self.payload.chunks(T::DTYPE.size()).map(T::read_le).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(NiffError::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, {} left",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| NiffError::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype.tag());
            out.push(r.shape.len() as u8);
            for d in &r.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&r.payload);
        }
        out.extend_from_slice(TRAILER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(NiffError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(NiffError::Checkpoint(format!(
                "version {version} not supported (expected {VERSION})"
            )));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32("metadata count")? {
            let kl = r.u32("metadata key length")? as usize;
            let k = r.string(kl, "metadata key")?;
            let vl = r.u32("metadata value length")? as usize;
            let v = r.string(vl, "metadata value")?;
            meta.insert(k, v);
        }
        let n = r.u32("record count")? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let nl = r.u16("record name length")? as usize;
            let name = r.string(nl, "record name")?;
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| NiffError::Checkpoint(format!("record `{name}` has unknown dtype tag {tag}")))?;
            let ndim = r.u8("rank")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(dtype.size(), |a, d| a.checked_mul(*d))
                .ok_or_else(|| NiffError::Checkpoint(format!("record `{name}` is impossibly large")))?;
            let payload = r.take(len, &format!("payload of `{name}`"))?.to_vec();
            records.push(Record {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if r.take(4, "trailer")? != TRAILER {
            return Err(NiffError::Checkpoint("corrupt trailer".into()));
        }
        if r.at != bytes.len() {
            return Err(NiffError::Checkpoint(format!(
                "{} unexpected bytes after trailer",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint { meta, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| NiffError::Format {
            path: path.display().to_string(),
            reason: format!("cannot read checkpoint: {e}"),
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| NiffError::Checkpoint(format!("missing metadata `{key}`")))
    }

    /// Records every parameter, BN buffer and momentum buffer.
    pub fn capture<T: Scalar>(
        model: &mut Model<T>,
        momentum: &BTreeMap<String, Vec<T>>,
        meta: BTreeMap<String, String>,
    ) -> Self {
        let mut records = Vec::new();
        model.visit_params("", &mut |name, p| {
            records.push(Record::from_values(name, p.shape.clone(), &p.value));
        });
        model.visit_buffers("", &mut |name, b| {
            records.push(Record::from_values(format!("{BUFFER_PREFIX}{name}"), vec![b.len()], b));
        });
        for (name, v) in momentum {
            records.push(Record::from_values(format!("{MOMENTUM_PREFIX}{name}"), vec![v.len()], v));
        }
        Checkpoint { meta, records }
    }

    /// Loads parameters and buffers into `model` and returns the momentum
    /// buffers. Every record is checked before anything is written, so a
    /// failed load leaves the model untouched.
    pub fn restore<T: Scalar>(&self, model: &mut Model<T>) -> Result<BTreeMap<String, Vec<T>>> {
        let mut expected: HashMap<String, Vec<usize>> = HashMap::new();
        model.visit_params("", &mut |name, p| {
            expected.insert(name, p.shape.clone());
        });
        model.visit_buffers("", &mut |name, b| {
            expected.insert(format!("{BUFFER_PREFIX}{name}"), vec![b.len()]);
        });

        let mut values: HashMap<&str, Vec<T>> = HashMap::new();
        let mut momentum = BTreeMap::new();
        for r in &self.records {
            if let Some(p) = r.name.strip_prefix(MOMENTUM_PREFIX) {
                match expected.get(p) {
                    Some(shape) if shape.iter().product::<usize>() == r.numel() => {
                        momentum.insert(p.to_string(), r.values()?);
                    }
                    _ => {
                        return Err(NiffError::Checkpoint(format!(
                            "momentum record `{}` does not match any parameter",
                            r.name
                        )))
                    }
                }
                continue;
            }
            let shape = expected.get(&r.name).ok_or_else(|| {
                NiffError::Checkpoint(format!("unknown record `{}` for this model", r.name))
            })?;
            if *shape != r.shape {
                return Err(NiffError::Checkpoint(format!(
                    "record `{}` has shape {:?}, model expects {:?}",
                    r.name, r.shape, shape
                )));
            }
            if values.insert(&r.name, r.values()?).is_some() {
                return Err(NiffError::Checkpoint(format!("record `{}` appears twice", r.name)));
            }
        }
        if let Some(missing) = expected.keys().find(|k| !values.contains_key(k.as_str())) {
            return Err(NiffError::Checkpoint(format!("checkpoint lacks record `{missing}`")));
        }

        model.visit_params("", &mut |name, p| {
            p.value.clone_from(&values[name.as_str()]);
        });
        model.visit_buffers("", &mut |name, b| {
            b.clone_from(&values[format!("{BUFFER_PREFIX}{name}").as_str()]);
        });
        model.invalidate();
        Ok(momentum)
    }
}
