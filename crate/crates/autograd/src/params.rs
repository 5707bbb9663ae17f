use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat, ordered collection of named parameters owned by a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Debug, thiserror::Error)]
pub enum BlobError {
    #[error("weights blob i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("weights blob header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("weights blob is not a parameter blob (bad magic)")]
    Magic,
    #[error("weights blob layout mismatch: {0}")]
    Layout(String),
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

const MAGIC: &[u8; 8] = b"VBXW\x00\x01\x00\x00";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Mark every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Binary layout: magic, u64 header length, JSON header, little-endian f64 payload.
    pub fn write_blob(&self, mut w: impl Write) -> Result<(), BlobError> {
        let header: Vec<BlobEntry> = self
            .params
            .iter()
            .map(|p| BlobEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect();
        let header = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for p in &self.params {
            let mut buf = Vec::with_capacity(p.value.numel() * 8);
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_blob(mut r: impl Read) -> Result<Self, BlobError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(BlobError::Magic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let entries: Vec<BlobEntry> = serde_json::from_slice(&header)?;
        let mut params = Vec::with_capacity(entries.len());
        for e in entries {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Param { name: e.name, value: Tensor::new(&e.shape, data), trainable: e.trainable });
        }
        Ok(Self { params })
    }

    /// Copy values from `other`, which must have the same names and shapes in the same order.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), BlobError> {
        if self.params.len() != other.params.len() {
            return Err(BlobError::Layout(format!(
                "expected {} parameters, blob has {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(BlobError::Layout(format!(
                    "parameter {} {:?} vs blob {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
            mine.trainable = theirs.trainable;
        }
        Ok(())
    }
}

/// Binds a [`ParamStore`] to a [`Graph`] for one forward pass.
///
/// Each parameter becomes a single leaf no matter how often it is used. Frozen parameters
/// (or all parameters, when `track` is off) become constants.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    pub store: &'g ParamStore,
    pub train: bool,
    track: bool,
    bound: RefCell<HashMap<ParamId, Var<'g>>>,
}

impl<'g> Ctx<'g> {
    /// Training-mode binding that records parameter gradients.
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self { graph, store, train: true, track: true, bound: RefCell::default() }
    }

    /// Evaluation-mode binding; parameters are constants.
    pub fn eval(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self { graph, store, train: false, track: false, bound: RefCell::default() }
    }

    pub fn param(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = self.store.get(id);
        let v = if self.track && p.trainable {
            self.graph.variable(p.value.clone())
        } else {
            self.graph.constant(p.value.clone())
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn input(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// Gradients of every bound trainable parameter, in parameter order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(id, v)| (*id, grads.get_or_zeros(*v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
