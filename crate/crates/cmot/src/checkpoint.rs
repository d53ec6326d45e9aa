//! Binary parameter checkpoints: a keyed map from canonical dotted parameter
//! names to little-endian float32 arrays with a shape header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CMCK"
//! u32     format version (1)
//! u32     number of entries
//! entry*  u16 name length, name bytes (UTF-8),
//!         u8 rank, u32 dim per axis,
//!         f32 data (row-major, prod(dims) values)
//! ```
//!
//! Entries are sorted by name on write. In-memory values are f64 and are
//! rounded to f32 on disk; loading therefore reproduces parameters to f32
//! precision, which is the documented interchange contract.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMCK";
const VERSION: u32 = 1;

/// An in-memory checkpoint: canonical name -> array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    /// Collect from anything exposing a state visitor.
    pub fn from_state(visit: impl FnOnce(&mut dyn FnMut(&str, &mut ArrayD<f64>))) -> Self {
        let mut ck = Checkpoint::new();
        visit(&mut |name: &str, value: &mut ArrayD<f64>| {
            ck.insert(name, value.clone());
        });
        ck
    }

    /// Write every entry back into a state visitor. Every visited name must
    /// exist in the checkpoint with a matching shape, and every checkpoint
    /// entry must be consumed.
    pub fn apply_to_state(
        &self,
        visit: impl FnOnce(&mut dyn FnMut(&str, &mut ArrayD<f64>)),
    ) -> Result<()> {
        let mut missing = Vec::new();
        let mut used = 0usize;
        let mut shape_err = None;
        visit(&mut |name: &str, value: &mut ArrayD<f64>| {
            match self.entries.get(name) {
                Some(stored) => {
                    if stored.shape() != value.shape() {
                        shape_err.get_or_insert(format!(
                            "{name}: checkpoint shape {:?} vs model shape {:?}",
                            stored.shape(),
                            value.shape()
                        ));
                    } else {
                        value.assign(stored);
                        used += 1;
                    }
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(msg) = shape_err {
            return Err(Error::Shape(msg));
        }
        if !missing.is_empty() {
            return Err(Error::Shape(format!(
                "checkpoint is missing parameters: {}",
                missing.join(", ")
            )));
        }
        if used != self.entries.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} entries but the model consumed {used}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, value) in &self.entries {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(value.ndim() as u8);
            for d in value.shape() {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in value.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;

        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Structure(format!(
                    "truncated checkpoint {} at byte {}",
                    path.display(),
                    *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Structure(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Structure(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Structure("non-UTF8 parameter name".into()))?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
                data.push(v as f64);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Structure(format!("bad entry shape for {name}: {e}")))?;
            ck.insert(name, arr);
        }
        Ok(ck)
    }
}
