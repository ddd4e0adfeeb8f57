//! Relation-aware attention: absolute encodings added to queries and keys,
//! a log relative-geometry bias on the scores, and an optional neighborhood
//! mask whose excluded entries receive exactly zero weight.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{AlignmentGraph, GeometryBias};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// Additive score offset for excluded entries, applied before the
/// max-subtracted softmax.
pub const MASK_NEG: f64 = -1e9;

/// Boolean `[rows, cols]` visibility pattern for attention scores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::Config(format!("mask of {} entries cannot be {rows}x{cols}", allowed.len())));
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allowed: vec![true; rows * cols] }
    }

    /// Lower triangle including the diagonal.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|i| i % n <= i / n).collect();
        Self { rows: n, cols: n, allowed }
    }

    /// Region queries over grid keys.
    pub fn region_to_grid(graph: &AlignmentGraph) -> Result<Self> {
        Self::new(graph.n_regions(), graph.n_grids(), graph.region_to_grid())
    }

    /// Grid queries over region keys.
    pub fn grid_to_region(graph: &AlignmentGraph) -> Result<Self> {
        Self::new(graph.n_grids(), graph.n_regions(), graph.grid_to_region())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&r| !self.allowed[r * self.cols..(r + 1) * self.cols].iter().any(|&a| a)).collect()
    }

    fn bias(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { MASK_NEG }).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("sized")
    }

    fn keep(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("sized")
    }
}

/// Inverted dropout with its own random stream.
#[derive(Debug)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        Self { p, rng }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(tape.shape(x), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
        let m = tape.constant(mask);
        Ok(tape.mul(x, m)?)
    }
}

/// Projection parameters of one multi-head block, as bound tape variables.
/// Weights are `[d_in, d_out]`, biases `[d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionInputs<'m> {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub pos_q: Option<Var>,
    pub pos_k: Option<Var>,
    pub omega: Option<GeometryBias>,
    pub mask: Option<&'m AttentionMask>,
}

impl<'m> AttentionInputs<'m> {
    pub fn new(q: Var, k: Var, v: Var) -> Self {
        Self { q, k, v, pos_q: None, pos_k: None, omega: None, mask: None }
    }

    pub fn with_positions(mut self, pos_q: Option<Var>, pos_k: Option<Var>) -> Self {
        self.pos_q = pos_q;
        self.pos_k = pos_k;
        self
    }

    pub fn with_omega(mut self, omega: Option<GeometryBias>) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_mask(mut self, mask: &'m AttentionMask) -> Self {
        self.mask = Some(mask);
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[.., n_q, d]`
    pub values: Var,
    /// `[.., heads, n_q, n_k]` (no head axis for single-head [`cra`])
    pub weights: Var,
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

fn add_position(tape: &mut Tape, x: Var, pos: Option<Var>) -> Result<Var> {
    match pos {
        None => Ok(x),
        Some(p) => {
            if tape.shape(p) != tape.shape(x) {
                return Err(NumericsError::Shape(format!(
                    "position shape {:?} differs from feature shape {:?}",
                    tape.shape(p),
                    tape.shape(x)
                ))
                .into());
            }
            Ok(tape.add(x, p)?)
        }
    }
}

/// Softmax over the last axis restricted to `mask`; excluded entries and rows
/// without any allowed entry come out exactly zero.
fn masked_softmax(tape: &mut Tape, scores: Var, mask: &AttentionMask) -> Result<Var> {
    let shape = tape.shape(scores);
    let r = shape.len();
    if r < 2 || shape[r - 2] != mask.rows || shape[r - 1] != mask.cols {
        return Err(NumericsError::Shape(format!("mask {}x{} does not fit scores {shape:?}", mask.rows, mask.cols)).into());
    }
    let bias = tape.constant(mask.bias());
    let shifted = tape.add(scores, bias)?;
    let soft = tape.softmax_last(shifted)?;
    let keep = tape.constant(mask.keep());
    Ok(tape.mul(soft, keep)?)
}

/// Softmax normalized over each row's neighbor set. Every row must have at
/// least one neighbor.
pub fn graph_softmax(tape: &mut Tape, scores: Var, mask: &AttentionMask) -> Result<Var> {
    if let Some(&row) = mask.empty_rows().first() {
        return Err(Error::EmptyNeighborhood(row));
    }
    masked_softmax(tape, scores, mask)
}

/// Scaled dot-product core shared by every attention variant.
pub(crate) fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    omega: Option<GeometryBias>,
    mask: Option<&AttentionMask>,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOutput> {
    let dk = *tape.shape(q).last().expect("rank checked by matmul");
    let raw = tape.matmul_t(q, k)?;
    let mut scores = tape.scale(raw, 1.0 / (dk as f64).sqrt())?;
    if let Some(o) = omega {
        let log_omega = tape.log(o.omega)?;
        scores = tape.add(scores, log_omega)?;
    }
    let weights = match mask {
        Some(m) => masked_softmax(tape, scores, m)?,
        None => tape.softmax_last(scores)?,
    };
    let used = match dropout {
        Some(d) => d.apply(tape, weights)?,
        None => weights,
    };
    let values = tape.matmul(used, v)?;
    Ok(AttentionOutput { values, weights })
}

/// Single-head comprehensive relation attention:
/// `softmax((Q + pos_q)(K + pos_k)ᵀ / √d_k + log Ω) V`.
pub fn cra(tape: &mut Tape, inputs: &AttentionInputs) -> Result<AttentionOutput> {
    if let Some(m) = inputs.mask {
        if let Some(&row) = m.empty_rows().first() {
            return Err(Error::EmptyNeighborhood(row));
        }
    }
    let q = add_position(tape, inputs.q, inputs.pos_q)?;
    let k = add_position(tape, inputs.k, inputs.pos_k)?;
    attend(tape, q, k, inputs.v, inputs.omega, inputs.mask, None)
}

pub(crate) fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    let d = shape[r - 1];
    let mut split = shape[..r - 1].to_vec();
    split.extend([heads, d / heads]);
    let y = tape.reshape(x, &split)?;
    let mut axes: Vec<usize> = (0..r - 2).collect();
    axes.extend([r - 1, r - 2, r]);
    Ok(tape.permute(y, &axes)?)
}

pub(crate) fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 3, r - 2);
    let y = tape.permute(x, &axes)?;
    let mut merged = shape[..r - 3].to_vec();
    merged.extend([shape[r - 2], shape[r - 3] * shape[r - 1]]);
    Ok(tape.reshape(y, &merged)?)
}

/// Multi-head relation attention. Absolute encodings are added to the query
/// and key features before the per-head projections, so one `d_model`-wide
/// encoding serves every head; Ω carries one scalar per head.
pub fn mhcra(
    tape: &mut Tape,
    inputs: &AttentionInputs,
    params: &ProjectionVars,
    heads: usize,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOutput> {
    let d = *tape.shape(inputs.q).last().unwrap_or(&0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
    }
    if let Some(o) = inputs.omega {
        let s = tape.shape(o.omega);
        if s.first() != Some(&heads) {
            return Err(NumericsError::Shape(format!("geometry bias {s:?} does not have {heads} heads")).into());
        }
    }
    let q_in = add_position(tape, inputs.q, inputs.pos_q)?;
    let k_in = add_position(tape, inputs.k, inputs.pos_k)?;
    let q = linear(tape, q_in, params.wq, params.bq)?;
    let k = linear(tape, k_in, params.wk, params.bk)?;
    let v = linear(tape, inputs.v, params.wv, params.bv)?;
    let (q, k, v) = (split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?);
    let att = attend(tape, q, k, v, inputs.omega, inputs.mask, dropout)?;
    let merged = merge_heads(tape, att.values)?;
    let values = linear(tape, merged, params.wo, params.bo)?;
    Ok(AttentionOutput { values, weights: att.weights })
}

/// Multi-head locality-constrained cross attention: `mhcra` with scores
/// restricted to alignment-graph neighbors. Queries whose neighbor set is
/// empty produce an exactly-zero row, leaving only the caller's residual.
pub fn mhlcca(
    tape: &mut Tape,
    inputs: &AttentionInputs,
    params: &ProjectionVars,
    heads: usize,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOutput> {
    let mask = inputs.mask.ok_or_else(|| Error::Config("locality-constrained attention needs a graph mask".into()))?;
    let out = mhcra(tape, inputs, params, heads, dropout)?;
    let empty = mask.empty_rows();
    if empty.is_empty() {
        return Ok(out);
    }
    log::trace!("{} queries without neighbors fall back to the residual path", empty.len());
    let keep = Tensor::from_fn(&[mask.rows(), 1], |r| if empty.binary_search(&r).is_ok() { 0.0 } else { 1.0 });
    let keep = tape.constant(keep);
    let values = tape.mul(out.values, keep)?;
    Ok(AttentionOutput { values, weights: out.weights })
}
