//! `RPRM1` named-tensor checkpoints shared by the encoder, retriever and reader.
//!
//! Layout (little-endian): the magic `RPRM1`, then tensors until end of file, each as
//! u32 name length, UTF-8 name, u32 rank, u64 per dimension, f64 data in row-major order.
//! Names are namespaced (`encoder.*`, `retriever.*`, `reader.*`).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::corpus::{read_f64, read_u64};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f64>) -> Self {
        let dims: Vec<u64> = dims.iter().map(|&d| d as u64).collect();
        debug_assert_eq!(dims.iter().product::<u64>() as usize, data.len());
        NamedTensor {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        NamedTensor {
            name: name.into(),
            dims: Vec::new(),
            data: vec![value],
        }
    }
}

/// An ordered set of tensors; order is preserved on write so files are reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<NamedTensor>,
}

const MAGIC: &[u8; 5] = b"RPRM1";

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = NamedTensor>) {
        self.tensors.extend(ts);
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(prefix))
    }

    /// Tensors whose names start with `prefix`, keyed by the remainder of the name.
    pub fn section(&self, prefix: &str) -> BTreeMap<&str, &NamedTensor> {
        self.tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix(prefix).map(|rest| (rest, t)))
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for &x in &t.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mut tensors = Vec::new();
        loop {
            let mut len = [0u8; 4];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            let mut rank = [0u8; 4];
            r.read_exact(&mut rank)?;
            let rank = u32::from_le_bytes(rank);
            let dims: Vec<u64> = (0..rank).map(|_| read_u64(&mut r)).collect::<Result<_>>()?;
            let count = dims.iter().product::<u64>() as usize;
            let data: Vec<f64> = (0..count).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name} is not finite"),
                ));
            }
            tensors.push(NamedTensor { name, dims, data });
        }
        Ok(Checkpoint { tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Looks up a tensor in a section and checks its shape.
pub(crate) fn take<'a>(
    section: &BTreeMap<&str, &'a NamedTensor>,
    name: &str,
    dims: &[usize],
) -> Result<&'a [f64]> {
    let t = section
        .get(name)
        .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
    let want: Vec<u64> = dims.iter().map(|&d| d as u64).collect();
    if t.dims != want {
        return Err(Error::format(
            "checkpoint",
            format!("tensor {name} has shape {:?}, expected {want:?}", t.dims),
        ));
    }
    Ok(&t.data)
}

pub(crate) fn take_scalar(section: &BTreeMap<&str, &NamedTensor>, name: &str) -> Result<f64> {
    Ok(take(section, name, &[])?[0])
}
