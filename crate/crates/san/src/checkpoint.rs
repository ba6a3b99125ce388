//! Versioned binary checkpoint container for model parameters, normalization
//! buffers, and optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "SANCKPT\x01"
//! meta_len   u32       byte length of the JSON metadata blob
//! meta       bytes     JSON: version, epoch, step, config echo, optimizer steps
//! n_entries  u32
//! entry ×N   name_len  u32
//!            name      UTF-8 bytes
//!            ndim      u32
//!            dims      u32 × ndim
//!            data      f32 × prod(dims), little-endian
//! ```
//!
//! Entries are sorted by name, so packing the same state twice yields
//! byte-identical files. Values are stored as 32-bit floats; `f32` models
//! round-trip bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Moments, Params, Scalar};

pub const MAGIC: [u8; 8] = *b"SANCKPT\x01";
pub const VERSION: u32 = 1;

/// JSON metadata blob at the head of every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub epoch: usize,
    pub step: usize,
    /// Resolved run-config echo (TOML text) the checkpoint was produced under.
    pub config: String,
    /// Adam step counters keyed by the prefix used in [`Checkpoint::pack_adam`].
    #[serde(default)]
    pub optimizer_steps: BTreeMap<String, u64>,
}

impl CheckpointMeta {
    pub fn new(epoch: usize, step: usize, config: impl Into<String>) -> Self {
        CheckpointMeta {
            version: VERSION,
            epoch,
            step,
            config: config.into(),
            optimizer_steps: BTreeMap::new(),
        }
    }
}

/// One named tensor: dimensions plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory checkpoint: metadata plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            entries: BTreeMap::new(),
        }
    }

    /// Adds a tensor. Panics on duplicate names or dim/data disagreement —
    /// both are bugs in the packing code, not runtime conditions.
    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "entry {name}: dims {dims:?} disagree with data length {}",
            data.len()
        );
        let prev = self.entries.insert(name.clone(), Entry { dims, data });
        assert!(prev.is_none(), "duplicate checkpoint entry {name}");
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores every parameter and state buffer of `model` under `prefix.`.
    pub fn pack_model<S: Scalar, M: Params<S>>(&mut self, prefix: &str, model: &mut M) {
        assert!(!prefix.is_empty(), "model prefix must be non-empty");
        let entries = &mut self.entries;
        let mut store = |name: String, dims: Vec<usize>, values: &[S]| {
            let data: Vec<f32> = values.iter().map(|&v| v.to_f64() as f32).collect();
            assert_eq!(dims.iter().product::<usize>(), data.len());
            let prev = entries.insert(name.clone(), Entry { dims, data });
            assert!(prev.is_none(), "duplicate checkpoint entry {name}");
        };
        model.visit_params(prefix, &mut |slot| {
            store(slot.name, slot.dims, slot.value);
        });
        model.visit_buffers(prefix, &mut |slot| {
            store(slot.name, slot.dims, slot.value);
        });
    }

    /// Loads every parameter and buffer of `model` from entries under
    /// `prefix.`. Fails if an entry is missing, has the wrong shape, or if
    /// the checkpoint holds entries under this prefix the model doesn't own.
    pub fn unpack_model<S: Scalar, M: Params<S>>(
        &self,
        prefix: &str,
        model: &mut M,
    ) -> Result<()> {
        assert!(!prefix.is_empty(), "model prefix must be non-empty");
        let mut seen = BTreeSet::new();
        let mut failure: Option<Error> = None;
        {
            let entries = &self.entries;
            let mut fill = |name: String, dims: Vec<usize>, values: &mut [S]| {
                if failure.is_some() {
                    return;
                }
                let entry = match entries.get(&name) {
                    Some(e) => e,
                    None => {
                        failure = Some(Error::Data(format!("checkpoint missing entry {name}")));
                        return;
                    }
                };
                if entry.dims != dims {
                    failure = Some(Error::Data(format!(
                        "checkpoint entry {name}: stored dims {:?}, model expects {dims:?}",
                        entry.dims
                    )));
                    return;
                }
                for (dst, src) in values.iter_mut().zip(&entry.data) {
                    *dst = S::from_f64(*src as f64);
                }
                seen.insert(name);
            };
            model.visit_params(prefix, &mut |slot| {
                fill(slot.name, slot.dims, slot.value);
            });
            model.visit_buffers(prefix, &mut |slot| {
                fill(slot.name, slot.dims, slot.value);
            });
        }
        if let Some(e) = failure {
            return Err(e);
        }
        let scoped = format!("{prefix}.");
        for name in self.entries.keys() {
            if name.starts_with(&scoped) && !seen.contains(name) {
                return Err(Error::Data(format!(
                    "checkpoint entry {name} not used by the model"
                )));
            }
        }
        Ok(())
    }

    /// Stores optimizer moments under `prefix.` and the step counter in the
    /// metadata.
    pub fn pack_adam<S: Scalar>(&mut self, prefix: &str, opt: &Adam<S>) {
        assert!(!prefix.is_empty(), "optimizer prefix must be non-empty");
        let (t, state) = opt.export();
        self.meta.optimizer_steps.insert(prefix.to_string(), t);
        for (param, mom) in state {
            let cast = |v: &[S]| v.iter().map(|&x| x.to_f64() as f32).collect::<Vec<f32>>();
            self.insert(format!("{prefix}.{param}.m"), vec![mom.m.len()], cast(&mom.m));
            self.insert(format!("{prefix}.{param}.v"), vec![mom.v.len()], cast(&mom.v));
        }
    }

    /// Restores optimizer moments and step counter saved by [`Self::pack_adam`].
    pub fn unpack_adam<S: Scalar>(&self, prefix: &str, opt: &mut Adam<S>) -> Result<()> {
        let t = *self.meta.optimizer_steps.get(prefix).ok_or_else(|| {
            Error::Data(format!("checkpoint has no optimizer state for {prefix}"))
        })?;
        let scoped = format!("{prefix}.");
        let mut state = BTreeMap::new();
        for (name, entry) in &self.entries {
            if !name.starts_with(&scoped) {
                continue;
            }
            let Some(base) = name.strip_suffix(".m") else {
                if name.ends_with(".v") {
                    continue; // handled together with its .m partner
                }
                return Err(Error::Data(format!(
                    "optimizer entry {name} is neither a .m nor a .v moment"
                )));
            };
            let partner = format!("{base}.v");
            let ventry = self.entries.get(&partner).ok_or_else(|| {
                Error::Data(format!("optimizer entry {name} has no matching {partner}"))
            })?;
            if ventry.data.len() != entry.data.len() {
                return Err(Error::Data(format!(
                    "optimizer moments {name}/{partner} differ in length"
                )));
            }
            let from = |v: &[f32]| v.iter().map(|&x| S::from_f64(x as f64)).collect::<Vec<S>>();
            state.insert(
                base[scoped.len()..].to_string(),
                Moments {
                    m: from(&entry.data),
                    v: from(&ventry.data),
                },
            );
        }
        opt.restore(t, state);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Data(format!("checkpoint metadata serialization: {e}")))?;
        push_u32(&mut buf, meta.len(), "metadata length")?;
        buf.extend_from_slice(&meta);
        push_u32(&mut buf, self.entries.len(), "entry count")?;
        for (name, entry) in &self.entries {
            push_u32(&mut buf, name.len(), "name length")?;
            buf.extend_from_slice(name.as_bytes());
            push_u32(&mut buf, entry.dims.len(), "rank")?;
            for &d in &entry.dims {
                push_u32(&mut buf, d, "dimension")?;
            }
            for &v in &entry.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile { path: path.into() })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut r = Reader {
            buf: &buf,
            pos: 0,
            path,
        };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Data(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Data(format!("{}: bad checkpoint metadata: {e}", path.display())))?;
        if meta.version != VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint version {} unsupported (expected {VERSION})",
                path.display(),
                meta.version
            )));
        }
        let n_entries = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n_entries {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Data(format!("{}: entry name is not UTF-8", path.display())))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                numel = numel.checked_mul(d).ok_or_else(|| {
                    Error::Data(format!("{}: entry {name} size overflows", path.display()))
                })?;
                dims.push(d);
            }
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if entries.insert(name.clone(), Entry { dims, data }).is_some() {
                return Err(Error::Data(format!(
                    "{}: duplicate entry {name}",
                    path.display()
                )));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Data(format!(
                "{}: {} trailing bytes after last entry",
                path.display(),
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint { meta, entries })
    }
}

fn push_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Data(format!("checkpoint {what} {v} exceeds u32 range")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Data(format!(
                "{}: checkpoint truncated at byte {}",
                self.path.display(),
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
