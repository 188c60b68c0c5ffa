//! Named parameter storage and binding onto a tape.

use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Index;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters recorded on one tape, indexable by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;
    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.var(t.clone())).collect(),
        }
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Concatenated tensor blobs in id order.
    pub fn write_blobs<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tensors {
            t.write_to(&mut w)?;
        }
        Ok(())
    }

    /// Replaces every value from blobs written by [`write_blobs`](Self::write_blobs);
    /// shapes must match.
    pub fn read_blobs<R: Read>(&mut self, r: R) -> Result<()> {
        let mut r = BufReader::new(r);
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let loaded = Tensor::read_from(&mut r)?;
            if loaded.shape() != t.shape() {
                return Err(arg_err(
                    "ParamStore::read_blobs",
                    format!("{name}: stored {:?}, expected {:?}", loaded.shape(), t.shape()),
                ));
            }
            *t = loaded;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = BufWriter::new(f);
        self.write_blobs(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.read_blobs(std::fs::File::open(path)?)
    }
}

/// Centered uniform initialization with variance `1 / fan_in`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(rng, shape, -bound, bound)
}
