//! Named trainable tensors and conversions between `ndarray` matrices and
//! autodiff tensors.

use std::collections::BTreeMap;

use ndarray::Array2;
use netresil_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn to_tensor(m: &Array2<f64>) -> Tensor {
    Tensor::new(vec![m.nrows(), m.ncols()], m.iter().copied().collect())
        .expect("non-empty matrix has a valid tensor shape")
}

pub fn to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let s = t.shape();
    let (r, c) = match s {
        [r, c] => (*r, *c),
        [n] => (*n, 1),
        _ => {
            return Err(Error::Shape {
                op: "to_array2",
                left: s.to_vec(),
                right: vec![0, 0],
            })
        }
    };
    Ok(Array2::from_shape_vec((r, c), t.data().to_vec()).expect("shape checked"))
}

/// Shape plus row-major data, the checkpoint encoding of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Xavier-uniform matrix, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data).expect("positive dims"));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, 1.0));
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    pub fn to_stored(&self) -> BTreeMap<String, StoredTensor> {
        self.tensors
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    StoredTensor {
                        shape: v.shape().to_vec(),
                        data: v.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    pub fn from_stored(stored: BTreeMap<String, StoredTensor>) -> Result<Self> {
        let mut out = Self::new();
        for (name, s) in stored {
            let t = Tensor::new(s.shape, s.data)
                .map_err(|e| Error::Config(format!("parameter `{name}`: {e}")))?;
            out.insert(name, t);
        }
        Ok(out)
    }
}

/// Parameter name to tape variable for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
