//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Tape`] records every primitive applied during a forward pass; calling
//! [`Tape::backward`] on a scalar root replays the record in reverse and
//! accumulates gradients additively into every node. Discrete choices made
//! during the forward pass (neighbor indices, argmax rows, gather sources)
//! are captured as constants, so gradients never flow through a search.
//!
//! A record can be consumed by `backward` exactly once; reusing it is an
//! error rather than a silent double accumulation.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in one tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Guard added to interpolation distances so coincident points stay finite.
const IDW_EPS: f64 = 1e-8;
/// Guard under the radical for `sqrt_eps`.
const SQRT_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// Row-broadcast add of a rank-1 bias to every row of a rank-2 input.
    AddBias(Var, Var),
    ConcatLast(Vec<Var>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    GatherRows(Var, Vec<usize>),
    /// Columnwise max over consecutive row groups.
    /// `argmax[i*d+c]` is the input row that produced output element (i, c).
    MaxPool { input: Var, argmax: Vec<usize> },
    MeanPool { input: Var, group: usize },
    Sum(Var),
    Mean(Var),
    Square(Var),
    SqrtEps(Var),
    /// Inverse-distance interpolation of `feats` from `sources` onto
    /// `targets` through fixed 3-nearest indices.
    Idw {
        targets: Var,
        sources: Var,
        feats: Var,
        indices: Vec<[usize; 3]>,
        weights: Vec<[f64; 3]>,
        inv_guarded: Vec<[f64; 3]>,
        totals: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Leaves keep their gradients after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push(value, Op::Leaf))
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated into `v` by the reverse pass. Zero if the root
    /// did not depend on `v`.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    fn finite(&mut self, v: Var, op: &'static str) -> Result<Var> {
        self.nodes[v.0].value.ensure_finite(op)?;
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let v = self.push(value, Op::MatMul(a, b));
        self.finite(v, "matmul")
    }

    fn zip_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(sa.to_vec());
        }
        // The only permitted broadcast is scalar-with-tensor.
        if self.value(a).is_scalar() {
            return Ok(sb.to_vec());
        }
        if self.value(b).is_scalar() {
            return Ok(sa.to_vec());
        }
        Err(Error::shape(op, format!("operands {:?} vs {:?}", sa, sb)))
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let shape = self.zip_shapes(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let x = if ta.is_scalar() { ta.item() } else { ta.data()[i] };
            let y = if tb.is_scalar() { tb.item() } else { tb.data()[i] };
            data.push(f(x, y));
        }
        Tensor::from_vec(&shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        let v = self.push(value, Op::Add(a, b));
        self.finite(v, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("subtract", a, b, |x, y| x - y)?;
        let v = self.push(value, Op::Sub(a, b));
        self.finite(v, "subtract")
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("hadamard", a, b, |x, y| x * y)?;
        let v = self.push(value, Op::Hadamard(a, b));
        self.finite(v, "hadamard")
    }

    /// `a` is n×d, `bias` is a rank-1 vector of length d added to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.rank() != 2 || tb.rank() != 1 || ta.cols() != tb.len() {
            return Err(Error::shape(
                "add_bias",
                format!("operands {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let d = ta.cols();
        let mut data = ta.data().to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            *x += tb.data()[i % d];
        }
        let value = Tensor::from_vec(ta.shape(), data)?;
        let v = self.push(value, Op::AddBias(a, bias));
        self.finite(v, "add_bias")
    }

    /// Concatenate along the last axis. All leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_last needs at least one input"));
        }
        let rank = self.value(parts[0]).rank();
        let lead: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..rank - 1].to_vec()
        };
        let mut total_last = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != rank || s[..rank - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_last",
                    format!("incompatible part {:?} with leading {:?}", s, lead),
                ));
            }
            total_last += s[rank - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total_last);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let d = t.cols();
                data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(total_last);
        let value = Tensor::from_vec(&shape, data)?;
        let v = self.push(value, Op::ConcatLast(parts.to_vec()));
        self.finite(v, "concat_last")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let v = self.push(value, Op::Sigmoid(a));
        self.finite(v, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let v = self.push(value, Op::Tanh(a));
        self.finite(v, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let v = self.push(value, Op::Relu(a));
        self.finite(v, "relu")
    }

    /// Select rows of a rank-2 input; repeats are allowed. The reverse pass
    /// scatters additively back to the gathered sources.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("expected rank 2, got {:?}", t.shape())));
        }
        let rows = t.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows index {} out of range for {} rows",
                bad, rows
            )));
        }
        let d = t.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_vec(&[indices.len(), d], data)?;
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec())))
    }

    /// Columnwise max over consecutive groups of `group` rows. Ties route
    /// the gradient to the lowest-index maximal row.
    pub fn neighbor_max_pool(&mut self, a: Var, group: usize) -> Result<Var> {
        let (value, argmax) = {
            let t = self.value(a);
            let (rows, d) = pool_dims(t, group)?;
            let n = rows / group;
            let mut out = vec![f64::NEG_INFINITY; n * d];
            let mut argmax = vec![0usize; n * d];
            for i in 0..n {
                for j in 0..group {
                    let r = i * group + j;
                    let row = t.row(r);
                    for c in 0..d {
                        if row[c] > out[i * d + c] {
                            out[i * d + c] = row[c];
                            argmax[i * d + c] = r;
                        }
                    }
                }
            }
            (Tensor::from_vec(&[n, d], out)?, argmax)
        };
        let v = self.push(value, Op::MaxPool { input: a, argmax });
        self.finite(v, "neighbor_max_pool")
    }

    pub fn neighbor_mean_pool(&mut self, a: Var, group: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let (rows, d) = pool_dims(t, group)?;
            let n = rows / group;
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..group {
                    let row = t.row(i * group + j);
                    for c in 0..d {
                        out[i * d + c] += row[c];
                    }
                }
            }
            let inv = 1.0 / group as f64;
            out.iter_mut().for_each(|x| *x *= inv);
            Tensor::from_vec(&[n, d], out)?
        };
        let v = self.push(value, Op::MeanPool { input: a, group });
        self.finite(v, "neighbor_mean_pool")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let v = self.push(value, Op::Sum(a));
        self.finite(v, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let v = self.push(value, Op::Mean(a));
        self.finite(v, "mean")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        let v = self.push(value, Op::Square(a));
        self.finite(v, "square")
    }

    /// Elementwise `sqrt(x + 1e-12)`; the guard keeps the derivative finite
    /// when a differentiated distance hits zero.
    pub fn sqrt_eps(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| (x + SQRT_EPS).sqrt());
        let v = self.push(value, Op::SqrtEps(a));
        self.finite(v, "sqrt_eps")
    }

    /// Inverse-distance interpolation: for each target row, blend the
    /// features of its three source rows in `indices` with weights
    /// `1/(dist + 1e-8)` normalized to sum one. Indices stay constant in the
    /// reverse pass; distances remain differentiable w.r.t. coordinates.
    pub fn interpolate_idw(
        &mut self,
        targets: Var,
        sources: Var,
        feats: Var,
        indices: &[[usize; 3]],
    ) -> Result<Var> {
        let (value, weights, inv_guarded, totals) = {
            let tt = self.value(targets);
            let ts = self.value(sources);
            let tf = self.value(feats);
            if tt.rank() != 2 || tt.cols() != 3 || ts.rank() != 2 || ts.cols() != 3 {
                return Err(Error::shape(
                    "interpolate_idw",
                    format!("coordinate shapes {:?} / {:?}", tt.shape(), ts.shape()),
                ));
            }
            if tf.rank() != 2 || tf.rows() != ts.rows() {
                return Err(Error::shape(
                    "interpolate_idw",
                    format!("features {:?} vs {} sources", tf.shape(), ts.rows()),
                ));
            }
            if indices.len() != tt.rows() {
                return Err(Error::contract(format!(
                    "interpolate_idw: {} index triples for {} targets",
                    indices.len(),
                    tt.rows()
                )));
            }
            let d = tf.cols();
            let mut out = vec![0.0; tt.rows() * d];
            let mut weights = Vec::with_capacity(indices.len());
            let mut inv_guarded = Vec::with_capacity(indices.len());
            let mut totals = Vec::with_capacity(indices.len());
            for (i, trip) in indices.iter().enumerate() {
                let q = tt.row(i);
                let mut u = [0.0f64; 3];
                for (j, &s) in trip.iter().enumerate() {
                    if s >= ts.rows() {
                        return Err(Error::contract(format!(
                            "interpolate_idw index {} out of range for {} sources",
                            s,
                            ts.rows()
                        )));
                    }
                    let p = ts.row(s);
                    let dist = ((q[0] - p[0]).powi(2)
                        + (q[1] - p[1]).powi(2)
                        + (q[2] - p[2]).powi(2))
                    .sqrt();
                    u[j] = 1.0 / (dist + IDW_EPS);
                }
                let total: f64 = u.iter().sum();
                let w = [u[0] / total, u[1] / total, u[2] / total];
                for (j, &s) in trip.iter().enumerate() {
                    let frow = tf.row(s);
                    for c in 0..d {
                        out[i * d + c] += w[j] * frow[c];
                    }
                }
                weights.push(w);
                inv_guarded.push(u);
                totals.push(total);
            }
            (Tensor::from_vec(&[tt.rows(), d], out)?, weights, inv_guarded, totals)
        };
        let v = self.push(
            value,
            Op::Idw { targets, sources, feats, indices: indices.to_vec(), weights, inv_guarded, totals },
        );
        self.finite(v, "interpolate_idw")
    }

    fn accumulate(&mut self, v: Var, delta: &Tensor) {
        let node = &mut self.nodes[v.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        if delta.is_scalar() && !grad.is_scalar() {
            // Scalar operand consumed a broadcast: fold the whole delta in.
            unreachable!("scalar accumulation must be pre-reduced");
        }
        for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    /// Accumulate `delta` into `v`, reducing to a scalar first when `v` was
    /// broadcast against a larger operand.
    fn accumulate_bcast(&mut self, v: Var, delta: &Tensor) {
        if self.nodes[v.0].value.is_scalar() && !delta.is_scalar() {
            let total: f64 = delta.data().iter().sum();
            self.accumulate(v, &Tensor::scalar(total));
        } else {
            self.accumulate(v, delta);
        }
    }

    /// Reverse pass from a scalar root. Consumes the record: a second call
    /// on the same tape fails with [`Error::RecordConsumed`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar-shaped, got {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(grad) = self.nodes[id].grad.clone() else { continue };
            // Ops with no inputs need no propagation.
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            match &op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = tensor::matmul(&grad, &self.value(*b).transpose())?;
                    let db = tensor::matmul(&self.value(*a).transpose(), &grad)?;
                    self.accumulate(*a, &da);
                    self.accumulate(*b, &db);
                }
                Op::Add(a, b) => {
                    self.accumulate_bcast(*a, &grad);
                    self.accumulate_bcast(*b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate_bcast(*a, &grad);
                    let neg = grad.map(|x| -x);
                    self.accumulate_bcast(*b, &neg);
                }
                Op::Hadamard(a, b) => {
                    let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                    let da = mul_broadcast(&grad, &tb);
                    let db = mul_broadcast(&grad, &ta);
                    self.accumulate_bcast(*a, &da);
                    self.accumulate_bcast(*b, &db);
                }
                Op::AddBias(a, bias) => {
                    self.accumulate(*a, &grad);
                    let d = self.nodes[bias.0].value.len();
                    let mut db = vec![0.0; d];
                    for (i, g) in grad.data().iter().enumerate() {
                        db[i % d] += g;
                    }
                    self.accumulate(*bias, &Tensor::from_vec(&[d], db)?);
                }
                Op::ConcatLast(parts) => {
                    let rank = grad.rank();
                    let rows: usize = grad.shape()[..rank - 1].iter().product();
                    let total = grad.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let d = self.value(p).cols();
                        let mut part = Vec::with_capacity(rows * d);
                        for r in 0..rows {
                            let row = &grad.data()[r * total..(r + 1) * total];
                            part.extend_from_slice(&row[offset..offset + d]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        self.accumulate(p, &Tensor::from_vec(&shape, part)?);
                        offset += d;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let da = Tensor::from_vec(
                        grad.shape(),
                        grad.data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, y)| g * y * (1.0 - y))
                            .collect(),
                    )?;
                    self.accumulate(*a, &da);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let da = Tensor::from_vec(
                        grad.shape(),
                        grad.data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect(),
                    )?;
                    self.accumulate(*a, &da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a).clone();
                    let da = Tensor::from_vec(
                        grad.shape(),
                        grad.data()
                            .iter()
                            .zip(x.data())
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    )?;
                    self.accumulate(*a, &da);
                }
                Op::GatherRows(a, indices) => {
                    let shape = self.value(*a).shape().to_vec();
                    let d = shape[1];
                    let mut da = vec![0.0; shape[0] * d];
                    for (r, &src) in indices.iter().enumerate() {
                        let g = &grad.data()[r * d..(r + 1) * d];
                        for c in 0..d {
                            da[src * d + c] += g[c];
                        }
                    }
                    self.accumulate(*a, &Tensor::from_vec(&shape, da)?);
                }
                Op::MaxPool { input, argmax } => {
                    let shape = self.value(*input).shape().to_vec();
                    let d = shape[1];
                    let mut da = vec![0.0; shape[0] * d];
                    for (e, &src_row) in argmax.iter().enumerate() {
                        let c = e % d;
                        da[src_row * d + c] += grad.data()[e];
                    }
                    self.accumulate(*input, &Tensor::from_vec(&shape, da)?);
                }
                Op::MeanPool { input, group } => {
                    let shape = self.value(*input).shape().to_vec();
                    let d = shape[1];
                    let inv = 1.0 / *group as f64;
                    let mut da = vec![0.0; shape[0] * d];
                    for r in 0..shape[0] {
                        let out_row = r / group;
                        let g = &grad.data()[out_row * d..(out_row + 1) * d];
                        for (dst, gv) in da[r * d..(r + 1) * d].iter_mut().zip(g) {
                            *dst = gv * inv;
                        }
                    }
                    self.accumulate(*input, &Tensor::from_vec(&shape, da)?);
                }
                Op::Sum(a) => {
                    let g = grad.item();
                    let t = self.value(*a).map(|_| g);
                    self.accumulate(*a, &t);
                }
                Op::Mean(a) => {
                    let g = grad.item() / self.value(*a).len() as f64;
                    let t = self.value(*a).map(|_| g);
                    self.accumulate(*a, &t);
                }
                Op::Square(a) => {
                    let x = self.value(*a).clone();
                    let da = Tensor::from_vec(
                        grad.shape(),
                        grad.data().iter().zip(x.data()).map(|(g, x)| g * 2.0 * x).collect(),
                    )?;
                    self.accumulate(*a, &da);
                }
                Op::SqrtEps(a) => {
                    let y = &self.nodes[id].value;
                    let da = Tensor::from_vec(
                        grad.shape(),
                        grad.data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, y)| g * 0.5 / y)
                            .collect(),
                    )?;
                    self.accumulate(*a, &da);
                }
                Op::Idw { targets, sources, feats, indices, weights, inv_guarded, totals } => {
                    let tt = self.value(*targets).clone();
                    let ts = self.value(*sources).clone();
                    let tf = self.value(*feats).clone();
                    let d = tf.cols();
                    let mut d_t = Tensor::zeros(tt.shape());
                    let mut d_s = Tensor::zeros(ts.shape());
                    let mut d_f = Tensor::zeros(tf.shape());
                    for (i, trip) in indices.iter().enumerate() {
                        let g = &grad.data()[i * d..(i + 1) * d];
                        let w = weights[i];
                        let u = inv_guarded[i];
                        let total = totals[i];
                        // d(loss)/d(weight_j) = g · feats[s_j]
                        let mut dw = [0.0f64; 3];
                        for (j, &s) in trip.iter().enumerate() {
                            let frow = tf.row(s);
                            dw[j] = g.iter().zip(frow).map(|(a, b)| a * b).sum();
                            for (dst, gv) in d_f.row_mut(s).iter_mut().zip(g) {
                                *dst += w[j] * gv;
                            }
                        }
                        let dot: f64 = (0..3).map(|j| dw[j] * w[j]).sum();
                        for (j, &s) in trip.iter().enumerate() {
                            // Through the normalization, then u = 1/(dist+eps).
                            let du = (dw[j] - dot) / total;
                            let dd = -du * u[j] * u[j];
                            let q = tt.row(i);
                            let p = ts.row(s);
                            let dist = 1.0 / u[j] - IDW_EPS;
                            let scale = dd / (dist + IDW_EPS);
                            for c in 0..3 {
                                let diff = q[c] - p[c];
                                d_t.row_mut(i)[c] += scale * diff;
                                d_s.row_mut(s)[c] -= scale * diff;
                            }
                        }
                    }
                    self.accumulate(*targets, &d_t);
                    self.accumulate(*sources, &d_s);
                    self.accumulate(*feats, &d_f);
                }
            }
            self.nodes[id].op = op;
            if !matches!(self.nodes[id].op, Op::Leaf) && id != root.0 {
                // Interior gradients are fully consumed once visited.
                self.nodes[id].grad = None;
            }
        }
        Ok(())
    }
}

fn pool_dims(t: &Tensor, group: usize) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape("neighbor_pool", format!("expected rank 2, got {:?}", t.shape())));
    }
    if group == 0 || !t.rows().is_multiple_of(group) {
        return Err(Error::shape(
            "neighbor_pool",
            format!("{} rows not divisible by group {}", t.rows(), group),
        ));
    }
    Ok((t.rows(), t.cols()))
}

fn mul_broadcast(grad: &Tensor, other: &Tensor) -> Tensor {
    if other.is_scalar() {
        grad.map(|g| g * other.item())
    } else if grad.is_scalar() {
        other.map(|o| o * grad.item())
    } else {
        Tensor::from_vec(
            grad.shape(),
            grad.data().iter().zip(other.data()).map(|(g, o)| g * o).collect(),
        )
        .expect("shapes checked at forward")
    }
}

/// Max over coordinates of the relative disagreement between the recorded
/// reverse-pass gradient and a central finite difference with step `h`.
///
/// `f` must be deterministic: it is re-evaluated under perturbed parameters,
/// so any randomness inside must be reseeded identically per call.
pub fn finite_difference_check<F>(f: &F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<_>>()?;
        let root = f(&mut tape, &vars)?;
        let out = tape.value(root);
        if !out.is_scalar() {
            return Err(Error::contract("finite_difference_check expects a scalar function"));
        }
        let y = out.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("finite_difference_check"));
        }
        Ok(y)
    };

    // Analytic gradients from one recorded pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<_>>()?;
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let x = p.data()[ci];
            probe[pi].data_mut()[ci] = x + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ci] = x - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ci] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / f64::max(1e-8, numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
