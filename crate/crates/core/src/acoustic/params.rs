//! Named, grouped parameter storage with snapshot/restore and the binary
//! checkpoint format.
//!
//! Checkpoint layout: the magic `SGEMC1`, then one record per array:
//! length-prefixed group name, length-prefixed array name, rank, dims (all
//! little-endian u32) and the row-major little-endian f32 payload. Values
//! are quantized to f32 at save time, so save -> load -> save reproduces
//! the file byte for byte.

use super::ModelError;
use std::io::{Read, Write};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamArray {
    pub fn zeros(name: &str, dims: &[usize]) -> Self {
        let len = dims.iter().product();
        ParamArray {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub arrays: Vec<ParamArray>,
}

/// All trainable parameters of a model, ordered deterministically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub groups: Vec<ParamGroup>,
}

/// Gradients share the parameter layout.
pub type Gradients = ParamSet;

/// Deep copy of every parameter array; restoring one is bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot(ParamSet);

impl ParamSet {
    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    pub fn array(&self, group: &str, name: &str) -> Option<&ParamArray> {
        self.group(group)?.arrays.iter().find(|a| a.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.groups
            .iter()
            .flat_map(|g| g.arrays.iter())
            .map(ParamArray::len)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.groups
            .iter()
            .flat_map(|g| g.arrays.iter())
            .all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes, all values zero. The layout for gradients and
    /// optimizer moments.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    arrays: g
                        .arrays
                        .iter()
                        .map(|a| ParamArray::zeros(&a.name, &a.dims))
                        .collect(),
                })
                .collect(),
        }
    }

    /// self += scale * other, array by array.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (g, og) in self.groups.iter_mut().zip(&other.groups) {
            for (a, oa) in g.arrays.iter_mut().zip(&og.arrays) {
                for (v, ov) in a.data.iter_mut().zip(&oa.data) {
                    *v += scale * ov;
                }
            }
        }
    }

    pub fn scale(&mut self, scale: f64) {
        for g in &mut self.groups {
            for a in &mut g.arrays {
                for v in &mut a.data {
                    *v *= scale;
                }
            }
        }
    }

    /// Euclidean norm over the named groups (all groups when `None`).
    pub fn l2_norm(&self, groups: Option<&std::collections::BTreeSet<String>>) -> f64 {
        let mut acc = 0.0;
        for g in &self.groups {
            if groups.is_none_or(|set| set.contains(&g.name)) {
                for a in &g.arrays {
                    for v in &a.data {
                        acc += v * v;
                    }
                }
            }
        }
        acc.sqrt()
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.name == b.name
                    && a.arrays.len() == b.arrays.len()
                    && a.arrays
                        .iter()
                        .zip(&b.arrays)
                        .all(|(x, y)| x.name == y.name && x.dims == y.dims)
            })
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot(self.clone())
    }

    pub fn restore(&mut self, snapshot: &ModelSnapshot) -> Result<(), ModelError> {
        if !self.same_shape(&snapshot.0) {
            return Err(ModelError::SnapshotShapeMismatch);
        }
        for (g, sg) in self.groups.iter_mut().zip(&snapshot.0.groups) {
            for (a, sa) in g.arrays.iter_mut().zip(&sg.arrays) {
                a.data.copy_from_slice(&sa.data);
            }
        }
        Ok(())
    }

    /// Bit-level equality of all values, the snapshot contract.
    pub fn bits_equal(&self, other: &ParamSet) -> bool {
        self.same_shape(other)
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.arrays.iter().zip(&b.arrays).all(|(x, y)| {
                    x.data
                        .iter()
                        .zip(&y.data)
                        .all(|(p, q)| p.to_bits() == q.to_bits())
                })
            })
    }

    /// Flat view over every coordinate, used by finite-difference probes.
    pub fn flat_len(&self) -> usize {
        self.num_params()
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for g in &self.groups {
            for a in &g.arrays {
                if index < a.data.len() {
                    return a.data[index];
                }
                index -= a.data.len();
            }
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for g in &mut self.groups {
            for a in &mut g.arrays {
                if index < a.data.len() {
                    a.data[index] = value;
                    return;
                }
                index -= a.data.len();
            }
        }
        panic!("flat index out of range");
    }

    /// Which group a flat coordinate belongs to.
    pub fn group_of_flat(&self, mut index: usize) -> &str {
        for g in &self.groups {
            for a in &g.arrays {
                if index < a.data.len() {
                    return &g.name;
                }
                index -= a.data.len();
            }
        }
        panic!("flat index out of range");
    }
}

impl ModelSnapshot {
    pub fn params(&self) -> &ParamSet {
        &self.0
    }
}

const MAGIC: &[u8; 6] = b"SGEMC1";

fn write_str(w: &mut dyn Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact_vec(r: &mut dyn Read, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut dyn Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut dyn Read) -> Result<String, ModelError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(ModelError::Checkpoint("unreasonable string length".into()));
    }
    let bytes = read_exact_vec(r, len)?;
    String::from_utf8(bytes).map_err(|_| ModelError::Checkpoint("non-utf8 name".into()))
}

pub fn write_checkpoint(w: &mut dyn Write, params: &ParamSet) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    for g in &params.groups {
        for a in &g.arrays {
            write_str(w, &g.name)?;
            write_str(w, &a.name)?;
            w.write_all(&(a.dims.len() as u32).to_le_bytes())?;
            for &d in &a.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &a.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut dyn Read) -> Result<ParamSet, ModelError> {
    let magic = read_exact_vec(r, 6)?;
    if magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut set = ParamSet::default();
    loop {
        // Records run to end-of-file; a clean EOF at a record boundary stops.
        let mut first = [0u8; 4];
        match r.read_exact(&mut first) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let glen = u32::from_le_bytes(first) as usize;
        if glen > 1 << 20 {
            return Err(ModelError::Checkpoint("unreasonable string length".into()));
        }
        let gname = String::from_utf8(read_exact_vec(r, glen)?)
            .map_err(|_| ModelError::Checkpoint("non-utf8 group name".into()))?;
        let aname = read_str(r)?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(ModelError::Checkpoint("unreasonable rank".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r)? as usize);
        }
        let len: usize = dims.iter().product();
        if len > 1 << 28 {
            return Err(ModelError::Checkpoint("unreasonable array size".into()));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        let array = ParamArray {
            name: aname,
            dims,
            data,
        };
        match set.groups.iter_mut().find(|g| g.name == gname) {
            Some(g) => g.arrays.push(array),
            None => set.groups.push(ParamGroup {
                name: gname,
                arrays: vec![array],
            }),
        }
    }
    Ok(set)
}

pub fn save_checkpoint(path: &std::path::Path, params: &ParamSet) -> Result<(), ModelError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, params)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ParamSet, ModelError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
