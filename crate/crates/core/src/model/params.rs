use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{linear, Dropout, ProjectionVars};
use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, as gradient-carrying leaves when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(trainable);
                tape.leaf(t)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape variables of every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a tape, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every parameter after a backward pass, zeros where none flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
            .collect()
    }
}

/// Deterministic initializer drawing from one random stream.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Glorot-uniform matrix.
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-a..a));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearIds {
        LinearIds { w: self.matrix(&format!("{name}.w"), d_in, d_out), b: self.constant(&format!("{name}.b"), &[d_out], 0.0) }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds { gain: self.constant(&format!("{name}.gain"), &[d], 1.0), bias: self.constant(&format!("{name}.bias"), &[d], 0.0) }
    }

    pub fn attention(&mut self, name: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            norm: self.norm(&format!("{name}.norm"), d),
        }
    }

    pub fn ffn(&mut self, name: &str, d: usize, d_ff: usize) -> FfnIds {
        FfnIds {
            hidden: self.linear(&format!("{name}.hidden"), d, d_ff),
            out: self.linear(&format!("{name}.out"), d_ff, d),
            norm: self.norm(&format!("{name}.norm"), d),
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn apply(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        linear(tape, x, b.var(self.w), b.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormIds {
    pub fn apply(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, b.var(self.gain), b.var(self.bias), LN_EPS)?)
    }

    /// Post-norm residual: `norm(x + sub)`.
    pub fn residual(&self, tape: &mut Tape, b: &Bound, x: Var, sub: Var) -> Result<Var> {
        let s = tape.add(x, sub)?;
        self.apply(tape, b, s)
    }
}

/// Multi-head attention projections plus the norm of its residual block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub norm: NormIds,
}

impl AttnIds {
    pub fn vars(&self, b: &Bound) -> ProjectionVars {
        ProjectionVars {
            wq: b.var(self.q.w),
            bq: b.var(self.q.b),
            wk: b.var(self.k.w),
            bk: b.var(self.k.b),
            wv: b.var(self.v.w),
            bv: b.var(self.v.b),
            wo: b.var(self.o.w),
            bo: b.var(self.o.b),
        }
    }
}

/// Position-wise feed-forward block with its residual norm.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    pub hidden: LinearIds,
    pub out: LinearIds,
    pub norm: NormIds,
}

impl FfnIds {
    /// `norm(x + W2 relu(W1 x + b1) + b2)`
    pub fn block(&self, tape: &mut Tape, b: &Bound, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
        let h = self.hidden.apply(tape, b, x)?;
        let mut h = tape.relu(h)?;
        if let Some(d) = dropout {
            h = d.apply(tape, h)?;
        }
        let y = self.out.apply(tape, b, h)?;
        self.norm.residual(tape, b, x, y)
    }
}
