//! The encoder and the persistent instance-embedding table.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Guard for row normalization; only prevents division by zero.
pub const NORM_EPS: f64 = 1e-12;

pub const HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape");
        let bias = Tensor::vector(draw(fan_out));
        Self { weight, bias }
    }
}

/// Three linear layers `in → 64 → 64 → out` with rectifiers in between; the
/// output is projected onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub layers: [Linear; 3],
}

impl MlpEncoder {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        let mut rng = rng::stream(seed, "init_encoder");
        let layers = [
            Linear::init(in_dim, HIDDEN_WIDTH, &mut rng),
            Linear::init(HIDDEN_WIDTH, HIDDEN_WIDTH, &mut rng),
            Linear::init(HIDDEN_WIDTH, out_dim, &mut rng),
        ];
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.layers[2].weight.shape()[1]
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Records the parameters on `tape` as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            layers: self.layers.each_ref().map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone()))),
        }
    }

    /// Unit-norm embeddings for `x: [b × in]` without recording gradients.
    pub fn encode_values(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let layers = self.layers.each_ref().map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())));
        let bound = BoundEncoder { layers };
        Ok(bound.encode(tape.constant(x.clone()))?.value())
    }
}

/// Encoder parameters recorded on a tape.
pub struct BoundEncoder<'t> {
    layers: [(Var<'t>, Var<'t>); 3],
}

impl<'t> BoundEncoder<'t> {
    /// `x: [b × in]` to unit-norm `[b × out]`.
    pub fn encode(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let in_dim = self.layers[0].0.shape()[0];
        if shape.len() != 2 || shape[1] != in_dim {
            return Err(Error::shape(format!("encoder expects [b × {in_dim}], got {shape:?}")));
        }
        let mut h = x;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(*w)?.add_row(*b)?;
            if k < 2 {
                h = h.relu();
            }
        }
        Ok(h.l2_normalize_rows(NORM_EPS))
    }

    pub fn params(&self) -> impl Iterator<Item = Var<'t>> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}

/// Learnable `rows × dim` anchor matrix, one row per instance (or class).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub values: Tensor,
}

impl EmbeddingTable {
    /// Entries i.i.d. `N(0, sigma²)`.
    pub fn init(rows: usize, dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::config("embedding table needs at least one row and column"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("init sigma must be positive, got {sigma}")));
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = rng::stream(seed, "init_table");
        let data = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { values: Tensor::new(vec![rows, dim], data)? })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.param(self.values.clone())
    }

    /// Row-normalized copy of the whole table.
    pub fn normalized(&self) -> Tensor {
        let tape = Tape::new();
        tape.constant(self.values.clone()).l2_normalize_rows(NORM_EPS).value()
    }

    /// Normalized Gram matrix `ẼẼᵀ`, row-major `rows × rows`.
    pub fn gram(&self) -> Vec<f64> {
        let e = self.normalized();
        let n = self.rows();
        let mut g = vec![0.0; n * n];
        crate::linalg::gemm(n, self.dim(), n, e.data(), false, e.data(), true, &mut g, 0.0);
        g
    }
}

/// Normalized anchors for `ids`; gradients reach the unnormalized table rows.
pub fn lookup_normalized<'t>(table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    table.l2_normalize_rows(NORM_EPS).gather_rows(ids)
}

/// Encoder plus table: everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: MlpEncoder,
    pub table: EmbeddingTable,
}

/// Mutable view of one named parameter array.
pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// A model's parameters recorded on a tape, in [`Model::parameters`] order.
pub struct BoundModel<'t> {
    pub encoder: BoundEncoder<'t>,
    pub table: Var<'t>,
}

impl<'t> BoundModel<'t> {
    pub fn params(&self) -> Vec<Var<'t>> {
        self.encoder.params().chain([self.table]).collect()
    }
}

impl Model {
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel { encoder: self.encoder.bind(tape), table: self.table.bind(tape) }
    }

    /// Named parameter arrays: encoder layers first, then the table.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(7);
        for (k, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{k}.weight"), &l.weight));
            out.push((format!("encoder.{k}.bias"), &l.bias));
        }
        out.push(("table".to_string(), &self.table.values));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::with_capacity(7);
        for (k, l) in self.encoder.layers.iter_mut().enumerate() {
            out.push(ParamMut { name: format!("encoder.{k}.weight"), value: &mut l.weight, decay: true });
            out.push(ParamMut { name: format!("encoder.{k}.bias"), value: &mut l.bias, decay: true });
        }
        out.push(ParamMut { name: "table".to_string(), value: &mut self.table.values, decay: false });
        out
    }

    /// Writes `name,index,value` rows for every parameter entry.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "name,index,value")?;
        for (name, t) in self.parameters() {
            for (i, v) in t.data().iter().enumerate() {
                writeln!(w, "{name},{i},{v}")?;
            }
        }
        Ok(())
    }

    /// Loads values written by [`write_csv`](Self::write_csv) into a model of
    /// matching architecture.
    pub fn read_csv_into<R: BufRead>(&mut self, r: R) -> Result<()> {
        let mut params = self.parameters_mut();
        let mut seen = vec![0usize; params.len()];
        for (lineno, line) in r.lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("line {}: {line:?}", lineno + 1));
            let mut parts = line.split(',');
            let (Some(name), Some(idx), Some(val)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            let k = params.iter().position(|p| p.name == name).ok_or_else(bad)?;
            let idx: usize = idx.parse().map_err(|_| bad())?;
            let val: f64 = val.parse().map_err(|_| bad())?;
            let slot = params[k].value.data_mut().get_mut(idx).ok_or_else(bad)?;
            *slot = val;
            seen[k] += 1;
        }
        for (p, &n) in params.iter().zip(&seen) {
            if n != p.value.numel() {
                return Err(Error::Parse(format!("{}: {n} of {} values present", p.name, p.value.numel())));
            }
        }
        Ok(())
    }
}
