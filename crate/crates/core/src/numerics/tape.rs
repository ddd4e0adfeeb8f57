use super::kernels::{self, BroadcastMap};
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Log,
    Exp,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    MatMul { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum(Var),
    Pick { x: Var, index: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order; [`Tape::backward`] walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are kept iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var, NumericsError> {
        if cfg!(debug_assertions) {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { op: name, index: i });
            }
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, needs_grad))
    }

    fn scalar_shape_ok(shape: &[usize]) -> bool {
        shape.iter().product::<usize>() == 1
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        match (kind, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Sub, Some(b)) => self.sub(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, None) => self.relu(a),
            (Elementwise::Log, None) => self.log(a),
            (Elementwise::Exp, None) => self.exp(a),
            (Elementwise::Scale(c), None) => self.scale(a, c),
            (kind, _) => Err(NumericsError::Arity(format!("{kind:?}"))),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = kernels::broadcast_shape(&sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == out && out.ends_with(&sb) {
            let m = db.len();
            da.iter().enumerate().map(|(i, &x)| f(x, db[i % m])).collect()
        } else {
            let oa = BroadcastMap::new(&sa, &out).offsets();
            let ob = BroadcastMap::new(&sb, &out).offsets();
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        self.record(name, out, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.record(name, shape, data, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        if let Some(i) = self.value(x).data().iter().position(|&v| !(v > 0.0)) {
            return Err(NumericsError::Domain { op: "log", index: i, value: self.value(x).data()[i] });
        }
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var, NumericsError> {
        self.unary("clamp_min", x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    /// Batched matrix product over the last two axes with broadcast leading axes.
    /// With `trans_b`, `b` is read as `[..., n, k]` and transposed on the fly.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(NumericsError::Shape(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(NumericsError::Shape(format!(
                "matmul inner extents differ: {sa:?} x {sb:?}{}",
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let plan = BatchPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let mut out_shape = plan.batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; plan.count * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..plan.count {
            let (ia, ib) = (plan.a[bi], plan.b[bi]);
            let asl = &da[ia * m * k..(ia + 1) * m * k];
            let bsl = &db[ib * k * n..(ib + 1) * k * n];
            let csl = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(asl, bsl, csl, m, k, n);
            } else {
                kernels::gemm_nn(asl, bsl, csl, m, k, n);
            }
        }
        self.record("matmul", out_shape, out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ex(a, b, true)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(NumericsError::Shape(format!("invalid permutation {axes:?} for {shape:?}")));
        }
        let (out_shape, src) = kernels::permute_offsets(&shape, axes);
        let d = self.value(x).data();
        let data = src.iter().map(|&i| d[i]).collect();
        self.record("permute", out_shape, data, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(NumericsError::Shape("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x).reshape(shape)?;
        let data = t.into_data();
        self.record("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let y = kernels::softmax_forward(self.value(x).data(), &shape, axis);
        self.record("softmax", shape, y, Op::Softmax { x, axis }, &[x])
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var, NumericsError> {
        let r = self.shape(x).len();
        self.softmax(x, r - 1)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| NumericsError::Shape("log_softmax of scalar".into()))?;
        let y = kernels::log_softmax_rows(self.value(x).data(), len);
        self.record("log_softmax", shape, y, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| NumericsError::Shape("layer_norm of scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(NumericsError::Shape(format!(
                "layer_norm gain/bias must be [{d}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.record("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| NumericsError::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(NumericsError::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(NumericsError::Shape(format!("concat shape mismatch {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        self.record("concat", out_shape, data, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().sum();
        self.record("sum", Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// Selects one entry of the last axis per row: `out[r] = x[r, index[r]]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let v = *shape.last().ok_or_else(|| NumericsError::Shape("pick from scalar".into()))?;
        let rows = self.value(x).numel() / v;
        if index.len() != rows {
            return Err(NumericsError::Shape(format!("pick needs {rows} indices, got {}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v) {
            return Err(NumericsError::Index { op: "pick", index: bad, bound: v });
        }
        let d = self.value(x).data();
        let data = index.iter().enumerate().map(|(r, &i)| d[r * v + i]).collect();
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        self.record("pick", out_shape, data, Op::Pick { x, index: index.to_vec() }, &[x])
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(NumericsError::Shape(format!("embedding table must be rank 2, got {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::Index { op: "embedding", index: bad, bound: vocab });
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.record("embedding", vec![ids.len(), d], data, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if !Self::scalar_shape_ok(self.shape(loss)) {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.reduce_into(*a, out_shape, g, grads, |v, _| v);
                self.reduce_into(*b, out_shape, g, grads, |v, _| v);
            }
            Op::Sub(a, b) => {
                self.reduce_into(*a, out_shape, g, grads, |v, _| v);
                self.reduce_into(*b, out_shape, g, grads, |v, _| -v);
            }
            Op::Mul(a, b) => {
                let bv = self.broadcast_values(*b, out_shape);
                self.reduce_into(*a, out_shape, g, grads, |v, i| v * bv[i]);
                let av = self.broadcast_values(*a, out_shape);
                self.reduce_into(*b, out_shape, g, grads, |v, i| v * av[i]);
            }
            Op::Scale(x, c) => {
                self.accumulate(*x, grads, g.iter().map(|v| v * c));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(*x, grads, g.iter().zip(xv).map(|(v, &x)| if x > 0.0 { *v } else { 0.0 }));
            }
            Op::ClampMin(x, floor) => {
                let xv = self.value(*x).data();
                self.accumulate(*x, grads, g.iter().zip(xv).map(|(v, &x)| if x > *floor { *v } else { 0.0 }));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(*x, grads, g.iter().zip(xv).map(|(v, x)| v / x));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.accumulate(*x, grads, g.iter().zip(y).map(|(v, y)| v * y));
            }
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, g, grads),
            Op::Permute { x, axes } => {
                let in_shape = self.shape(*x);
                let (_, src) = kernels::permute_offsets(in_shape, axes);
                let mut dx = vec![0.0; g.len()];
                for (o, &s) in src.iter().enumerate() {
                    dx[s] = g[o];
                }
                self.accumulate(*x, grads, dx.into_iter());
            }
            Op::Reshape(x) => self.accumulate(*x, grads, g.iter().copied()),
            Op::Softmax { x, axis } => {
                let dx = kernels::softmax_backward(node.value.data(), g, out_shape, *axis);
                self.accumulate(*x, grads, dx.into_iter());
            }
            Op::LogSoftmax(x) => {
                let len = *out_shape.last().unwrap();
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..g.len() / len {
                    let s: f64 = g[r * len..(r + 1) * len].iter().sum();
                    for j in r * len..(r + 1) * len {
                        dx[j] = g[j] - y[j].exp() * s;
                    }
                }
                self.accumulate(*x, grads, dx.into_iter());
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *out_shape.last().unwrap();
                let gv = self.value(*gain).data();
                let rows = g.len() / d;
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        mean_gh += gh;
                        mean_ghx += gh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghx /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (gr[j] * gv[j] - mean_gh - hr[j] * mean_ghx);
                    }
                }
                self.accumulate(*x, grads, dx.into_iter());
                self.accumulate(*gain, grads, dgain.into_iter());
                self.accumulate(*bias, grads, dbias.into_iter());
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::axis_split(out_shape, *axis);
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        dx.extend_from_slice(&g[base..base + len * inner]);
                    }
                    self.accumulate(v, grads, dx.into_iter());
                    start += len;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, grads, std::iter::repeat(g[0]).take(n));
            }
            Op::Pick { x, index } => {
                let n = self.value(*x).numel();
                let v = n / index.len();
                let mut dx = vec![0.0; n];
                for (r, &i) in index.iter().enumerate() {
                    dx[r * v + i] = g[r];
                }
                self.accumulate(*x, grads, dx.into_iter());
            }
            Op::Embedding { table, ids } => {
                let n = self.value(*table).numel();
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; n];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                self.accumulate(*table, grads, dt.into_iter());
            }
        }
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Vec<f64>>], g: impl Iterator<Item = f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g.collect()),
        }
    }

    /// Sums `f(g[i], i)` over broadcast positions back into `v`'s shape.
    fn reduce_into(&self, v: Var, out_shape: &[usize], g: &[f64], grads: &mut [Option<Vec<f64>>], f: impl Fn(f64, usize) -> f64) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.shape(v);
        if shape == out_shape {
            self.accumulate(v, grads, g.iter().enumerate().map(|(i, &x)| f(x, i)));
            return;
        }
        let n = self.value(v).numel();
        let mut acc = vec![0.0; n];
        if out_shape.ends_with(shape) {
            for (i, &x) in g.iter().enumerate() {
                acc[i % n] += f(x, i);
            }
        } else {
            let offs = BroadcastMap::new(shape, out_shape).offsets();
            for (i, (&x, &o)) in g.iter().zip(&offs).enumerate() {
                acc[o] += f(x, i);
            }
        }
        self.accumulate(v, grads, acc.into_iter());
    }

    fn broadcast_values(&self, v: Var, out_shape: &[usize]) -> Vec<f64> {
        let t = self.value(v);
        if t.shape() == out_shape {
            return t.data().to_vec();
        }
        let offs = BroadcastMap::new(t.shape(), out_shape).offsets();
        offs.iter().map(|&o| t.data()[o]).collect()
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        let plan = BatchPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).expect("validated in forward");
        let (da_v, db_v) = (self.value(a).data(), self.value(b).data());
        if self.nodes[a.0].needs_grad {
            let mut da = vec![0.0; da_v.len()];
            for bi in 0..plan.count {
                let (ia, ib) = (plan.a[bi], plan.b[bi]);
                let gsl = &g[bi * m * n..(bi + 1) * m * n];
                let bsl = &db_v[ib * k * n..(ib + 1) * k * n];
                let dsl = &mut da[ia * m * k..(ia + 1) * m * k];
                if trans_b {
                    kernels::gemm_nn(gsl, bsl, dsl, m, n, k);
                } else {
                    kernels::gemm_nt(gsl, bsl, dsl, m, n, k);
                }
            }
            self.accumulate(a, grads, da.into_iter());
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![0.0; db_v.len()];
            for bi in 0..plan.count {
                let (ia, ib) = (plan.a[bi], plan.b[bi]);
                let gsl = &g[bi * m * n..(bi + 1) * m * n];
                let asl = &da_v[ia * m * k..(ia + 1) * m * k];
                let dsl = &mut db[ib * k * n..(ib + 1) * k * n];
                if trans_b {
                    // dB[n×k] += gᵀ[n×m] · A[m×k]
                    kernels::gemm_tn(gsl, asl, dsl, n, m, k);
                } else {
                    // dB[k×n] += Aᵀ[k×m] · g[m×n]
                    kernels::gemm_tn(asl, gsl, dsl, k, m, n);
                }
            }
            self.accumulate(b, grads, db.into_iter());
        }
    }
}

/// Matrix-slice offsets for a batched product with broadcast leading axes.
struct BatchPlan {
    batch: Vec<usize>,
    count: usize,
    a: Vec<usize>,
    b: Vec<usize>,
}

impl BatchPlan {
    fn new(ba: &[usize], bb: &[usize]) -> Result<Self, NumericsError> {
        let batch = kernels::broadcast_shape(ba, bb)?;
        let count = batch.iter().product();
        let a = if ba.iter().product::<usize>() == count && ba.len() == batch.len() {
            (0..count).collect()
        } else {
            BroadcastMap::new(ba, &batch).offsets()
        };
        let b = if bb.iter().product::<usize>() == count && bb.len() == batch.len() {
            (0..count).collect()
        } else {
            BroadcastMap::new(bb, &batch).offsets()
        };
        Ok(Self { batch, count, a, b })
    }
}
