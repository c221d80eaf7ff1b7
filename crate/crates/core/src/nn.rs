//! Named parameter storage and shared per-row MLPs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted names such as `gen.enc.h1.0.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.map.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Total scalar count of parameters under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter under `prefix` on the tape.
    pub fn bind(&self, tape: &mut Tape, prefix: &str, requires_grad: bool) -> Bound {
        let vars = self
            .with_prefix(prefix)
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }
}

/// Parameter names mapped to their tape variables.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} is not bound")))
    }

    /// Binds `name` to an existing variable, replacing any earlier binding.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn merge(mut self, other: Bound) -> Bound {
        self.vars.extend(other.vars);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients for every bound parameter, by name.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.get(v))).collect()
    }
}

/// Per-row fully connected stack; hidden layers use ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub name: String,
    pub dims: Vec<usize>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, final_relu: bool) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self {
            name: name.into(),
            dims,
            final_relu,
        }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.w", self.name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.b", self.name)
    }

    /// He-scaled uniform weights for ReLU layers, Glorot-scaled for the
    /// linear output layer; zero biases.
    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for l in 0..self.layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let relu = l + 1 < self.layers() || self.final_relu;
            let bound = if relu {
                (6.0 / i as f64).sqrt()
            } else {
                (6.0 / (i + o) as f64).sqrt()
            };
            let w = (0..i * o).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(self.weight_name(l), Tensor::new([i, o], w).expect("nonzero dims"));
            params.insert(self.bias_name(l), Tensor::zeros([1, o]));
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.layers() {
            h = linear(tape, bound, &self.weight_name(l), &self.bias_name(l), h)?;
            if l + 1 < self.layers() || self.final_relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// `x W + b` with the `[1, out]` bias tiled over rows.
pub fn linear(tape: &mut Tape, bound: &Bound, w: &str, b: &str, x: Var) -> Result<Var> {
    let xw = tape.matmul(x, bound.var(w)?)?;
    let rows = tape.shape(xw)[0];
    let bias = bound.var(b)?;
    let tiled = if rows == 1 { bias } else { tape.tile_rows(bias, rows)? };
    tape.add(xw, tiled)
}

pub fn seeded_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
