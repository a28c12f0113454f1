use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))`.
    FanInUniform { fan_in: usize },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamSpec {
            name: name.into(),
            rows,
            cols,
            init: Init::FanInUniform { fan_in: rows },
        }
    }

    pub fn bias(name: impl Into<String>, cols: usize) -> Self {
        ParamSpec {
            name: name.into(),
            rows: 1,
            cols,
            init: Init::Zeros,
        }
    }
}

/// Named parameters with same-shape gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
    grads: Vec<Tensor2>,
    index: HashMap<String, usize>,
    pub seed: u64,
}

pub fn init_params(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::empty(seed);
    for spec in specs {
        let mut t = Tensor2::zeros(spec.rows, spec.cols);
        if let Init::FanInUniform { fan_in } = spec.init {
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.random_range(-bound..=bound);
            }
        }
        store.insert(spec.name.clone(), t);
    }
    store
}

impl ParamStore {
    pub fn empty(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn insert(&mut self, name: String, value: Tensor2) -> ParamId {
        if let Some(&i) = self.index.get(&name) {
            self.grads[i] = Tensor2::zeros(value.rows, value.cols);
            self.values[i] = value;
            return ParamId(i);
        }
        let i = self.values.len();
        self.grads.push(Tensor2::zeros(value.rows, value.cols));
        self.values.push(value);
        self.index.insert(name.clone(), i);
        self.names.push(name);
        ParamId(i)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.fill(0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor2::is_finite)
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            seed: self.seed,
            metadata,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| NamedArray {
                    name: n.clone(),
                    rows: v.rows,
                    cols: v.cols,
                    data: v.data.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("unknown checkpoint format `{}`", ck.format)));
        }
        let mut store = ParamStore::empty(ck.seed);
        for p in &ck.params {
            let t = Tensor2::from_vec(p.rows, p.cols, p.data.clone())
                .map_err(|_| Error::Schema(format!("parameter `{}` data does not match its shape", p.name)))?;
            store.insert(p.name.clone(), t);
        }
        Ok(store)
    }
}

pub const CHECKPOINT_FORMAT: &str = "hmcgeo-params-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// JSON checkpoint of shape-tagged arrays plus seed and free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub seed: u64,
    pub metadata: serde_json::Value,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
