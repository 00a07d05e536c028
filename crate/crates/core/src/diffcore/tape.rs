//! Tape-based reverse-mode differentiation over dense row-major 2-D arrays.
//!
//! Every operation appends a node to the [`Tape`]; node order is a valid
//! topological order, so [`Tape::backward`] is a single reverse sweep that
//! visits each node exactly once.

use super::params::{Grads, ParamId, ParamStore};
use super::scalar::{gemm_into, Scalar};
use crate::error::{Error, Result};
use std::sync::Arc;

/// Dense 2-D array stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray<T> {
    pub shape: [usize; 2],
    pub values: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> DiffArray<T> {
    pub fn new(shape: [usize; 2], values: Vec<T>) -> Result<Self> {
        if values.len() != shape[0] * shape[1] {
            return Err(Error::shape(
                "DiffArray::new",
                format!("{} values for shape {:?}", values.len(), shape),
            ));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: [usize; 2]) -> Self {
        Self {
            shape,
            values: vec![T::zero(); shape[0] * shape[1]],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Arc<[T]>),
    Relu(Var),
    /// Keeps `tanh` of the inner argument for the backward pass.
    Gelu(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    MseRows {
        pred: Var,
        target: Vec<T>,
        rows: Option<Arc<[usize]>>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    array: DiffArray<T>,
    op: Op<T>,
}

/// Recording of one forward computation.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu_tanh<T: Scalar>(x: T) -> T {
    (T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x)).fast_tanh()
}

#[inline]
fn gelu_from_tanh<T: Scalar>(x: T, t: T) -> T {
    T::lit(0.5) * x * (T::one() + t)
}

#[inline]
fn gelu_grad_from_tanh<T: Scalar>(x: T, t: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

#[inline]
fn gelu_fwd<T: Scalar>(x: T) -> T {
    gelu_from_tanh(x, gelu_tanh(x))
}

/// Scalar tanh-approximated GeLU, exposed for tests and tooling.
pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_fwd(x)
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
        }
    }

    /// A tape that can pull leaves from `params` via [`Tape::param`].
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, array: DiffArray<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { array, op });
        Var(self.nodes.len() - 1)
    }

    fn arr(&self, v: Var) -> &DiffArray<T> {
        &self.nodes[v.0].array
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].array.requires_grad
    }

    pub fn value(&self, v: Var) -> &DiffArray<T> {
        self.arr(v)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.arr(v).shape
    }

    pub fn leaf(&mut self, array: DiffArray<T>) -> Var {
        self.push(array, Op::Leaf)
    }

    pub fn constant(&mut self, shape: [usize; 2], values: Vec<T>) -> Result<Var> {
        Ok(self.leaf(DiffArray::new(shape, values)?))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("tape was created without a parameter store");
        let p = store.get(id);
        let arr = DiffArray {
            shape: p.shape,
            values: p.values.clone(),
            requires_grad: true,
        };
        let v = self.push(arr, Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m},{k}] x [{k2},{n}]"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(&self.arr(a).values, m, k, false, &self.arr(b).values, k, n, false, &mut out, false);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            DiffArray {
                shape: [m, n],
                values: out,
                requires_grad: rg,
            },
            Op::MatMul(a, b),
        ))
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        }
        let values = self
            .arr(a)
            .values
            .iter()
            .zip(&self.arr(b).values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            DiffArray {
                shape: sa,
                values,
                requires_grad: rg,
            },
            op,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[n,p] + row[1,p]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [n, p] = self.shape(a);
        let sr = self.shape(row);
        if sr != [1, p] {
            return Err(Error::shape("add_row", format!("[{n},{p}] + {sr:?}")));
        }
        let r = &self.arr(row).values;
        let mut values = self.arr(a).values.clone();
        for chunk in values.chunks_exact_mut(p.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(r.iter()) {
                *v = *v + b;
            }
        }
        let rg = self.needs(a) || self.needs(row);
        Ok(self.push(
            DiffArray {
                shape: [n, p],
                values,
                requires_grad: rg,
            },
            Op::AddRow(a, row),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let arr = self.arr(a);
        let out = DiffArray {
            shape: arr.shape,
            values: arr.values.iter().map(|&x| x * s).collect(),
            requires_grad: arr.requires_grad,
        };
        self.push(out, Op::Scale(a, s))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Arc<[T]>) -> Result<Var> {
        let [n, p] = self.shape(a);
        if factors.len() != n {
            return Err(Error::shape(
                "scale_rows",
                format!("{} factors for {n} rows", factors.len()),
            ));
        }
        let mut values = self.arr(a).values.clone();
        if p > 0 {
            for (chunk, &f) in values.chunks_exact_mut(p).zip(factors.iter()) {
                chunk.iter_mut().for_each(|v| *v = *v * f);
            }
        }
        let rg = self.needs(a);
        Ok(self.push(
            DiffArray {
                shape: [n, p],
                values,
                requires_grad: rg,
            },
            Op::ScaleRows(a, factors),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let arr = self.arr(a);
        let out = DiffArray {
            shape: arr.shape,
            values: arr
                .values
                .iter()
                .map(|&x| if x > T::zero() { x } else { T::zero() })
                .collect(),
            requires_grad: arr.requires_grad,
        };
        self.push(out, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let arr = self.arr(a);
        let t: Vec<T> = arr.values.iter().map(|&x| gelu_tanh(x)).collect();
        let out = DiffArray {
            shape: arr.shape,
            values: arr.values.iter().zip(&t).map(|(&x, &t)| gelu_from_tanh(x, t)).collect(),
            requires_grad: arr.requires_grad,
        };
        let t = if out.requires_grad { t } else { Vec::new() };
        self.push(out, Op::Gelu(a, t))
    }

    /// Per-row standardization (biased variance) followed by `gain * xhat + bias`.
    /// Zero-variance rows with `eps == 0` map to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps < T::zero() {
            return Err(Error::InvalidArgument("layer_norm eps must be >= 0".into()));
        }
        let [n, p] = self.shape(x);
        if self.shape(gain) != [1, p] || self.shape(bias) != [1, p] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x [{n},{p}], gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xs = &self.arr(x).values;
        let g = &self.arr(gain).values;
        let b = &self.arr(bias).values;
        let mut xhat = vec![T::zero(); n * p];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * p];
        let pf = T::from_usize(p.max(1)).unwrap();
        for r in 0..n {
            let row = &xs[r * p..(r + 1) * p];
            let mean = row.iter().copied().sum::<T>() / pf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / pf;
            let denom = (var + eps).sqrt();
            let rs = if denom > T::zero() { T::one() / denom } else { T::zero() };
            rstd[r] = rs;
            for c in 0..p {
                let h = (row[c] - mean) * rs;
                xhat[r * p + c] = h;
                out[r * p + c] = h * g[c] + b[c];
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            DiffArray {
                shape: [n, p],
                values: out,
                requires_grad: rg,
            },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let [n, p] = self.shape(x);
        let src = &self.arr(x).values;
        let mut values = Vec::with_capacity(index.len() * p);
        for &i in index.iter() {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            values.extend_from_slice(&src[i * p..(i + 1) * p]);
        }
        let rg = self.needs(x);
        Ok(self.push(
            DiffArray {
                shape: [index.len(), p],
                values,
                requires_grad: rg,
            },
            Op::Gather(x, index),
        ))
    }

    /// Row `r` of the output is the sum of input rows `k` with `targets[k] == r`.
    pub fn scatter_add(&mut self, x: Var, targets: Arc<[usize]>, n_out: usize) -> Result<Var> {
        let [e, p] = self.shape(x);
        if targets.len() != e {
            return Err(Error::shape(
                "scatter_add",
                format!("{} targets for {e} rows", targets.len()),
            ));
        }
        let src = &self.arr(x).values;
        let mut values = vec![T::zero(); n_out * p];
        for (k, &t) in targets.iter().enumerate() {
            if t >= n_out {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_add",
                    index: t,
                    bound: n_out,
                });
            }
            let dst = &mut values[t * p..(t + 1) * p];
            for (d, &s) in dst.iter_mut().zip(&src[k * p..(k + 1) * p]) {
                *d = *d + s;
            }
        }
        let rg = self.needs(x);
        Ok(self.push(
            DiffArray {
                shape: [n_out, p],
                values,
                requires_grad: rg,
            },
            Op::ScatterAdd(x, targets),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&v) => self.shape(v)[0],
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        let widths: Vec<usize> = parts.iter().map(|&v| self.shape(v)[1]).collect();
        if parts.iter().any(|&v| self.shape(v)[0] != n) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&v, &w) in parts.iter().zip(&widths) {
                values.extend_from_slice(&self.arr(v).values[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(
            DiffArray {
                shape: [n, total],
                values,
                requires_grad: rg,
            },
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Rows `[start, end)` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [n, p] = self.shape(x);
        if start > end || end > n {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start},{end}) of {n} rows"),
            ));
        }
        let values = self.arr(x).values[start * p..end * p].to_vec();
        let rg = self.needs(x);
        Ok(self.push(
            DiffArray {
                shape: [end - start, p],
                values,
                requires_grad: rg,
            },
            Op::SliceRows(x, start),
        ))
    }

    /// Mean squared error over the selected rows (all rows when `rows` is None)
    /// and every column. Returns a `[1,1]` node.
    pub fn mse_rows(
        &mut self,
        pred: Var,
        target: Vec<T>,
        rows: Option<Arc<[usize]>>,
    ) -> Result<Var> {
        let [n, p] = self.shape(pred);
        if target.len() != n * p {
            return Err(Error::shape(
                "mse_rows",
                format!("target has {} values, pred is [{n},{p}]", target.len()),
            ));
        }
        let pv = &self.arr(pred).values;
        let mut acc = T::zero();
        let count = match &rows {
            Some(rs) => {
                for &r in rs.iter() {
                    if r >= n {
                        return Err(Error::IndexOutOfRange {
                            op: "mse_rows",
                            index: r,
                            bound: n,
                        });
                    }
                    for c in 0..p {
                        let d = pv[r * p + c] - target[r * p + c];
                        acc = acc + d * d;
                    }
                }
                rs.len() * p
            }
            None => {
                for (a, b) in pv.iter().zip(&target) {
                    let d = *a - *b;
                    acc = acc + d * d;
                }
                n * p
            }
        };
        if count == 0 {
            return Err(Error::DegenerateMask);
        }
        let value = acc / T::from_usize(count).unwrap();
        let rg = self.needs(pred);
        Ok(self.push(
            DiffArray {
                shape: [1, 1],
                values: vec![value],
                requires_grad: rg,
            },
            Op::MseRows { pred, target, rows },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let arr = self.arr(x);
        let s = arr.values.iter().copied().sum::<T>();
        let rg = arr.requires_grad;
        self.push(
            DiffArray {
                shape: [1, 1],
                values: vec![s],
                requires_grad: rg,
            },
            Op::Sum(x),
        )
    }

    pub fn scalar(&self, v: Var) -> T {
        self.arr(v).values[0]
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape("backward", "loss must be [1,1]"));
        }
        if !self.arr(loss).all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        // Only leaf gradients are kept; interior buffers are handed down.
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            } else {
                self.backprop_node(i, g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, owned: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let g: &[T] = &owned;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bv = &self.arr(*b).values;
                    let da = self.buf(grads, *a);
                    gemm_into(g, m, n, false, bv, k, n, true, da, true);
                }
                if self.needs(*b) {
                    let av = &self.arr(*a).values;
                    let db = self.buf(grads, *b);
                    gemm_into(av, m, k, true, g, m, n, false, db, true);
                }
            }
            Op::Add(a, b) => match (self.needs(*a), self.needs(*b)) {
                (true, true) => {
                    self.acc_scaled(grads, *a, g, T::one());
                    self.acc_owned(grads, *b, owned, T::one());
                }
                (true, false) => self.acc_owned(grads, *a, owned, T::one()),
                (false, true) => self.acc_owned(grads, *b, owned, T::one()),
                (false, false) => {}
            },
            Op::Sub(a, b) => match (self.needs(*a), self.needs(*b)) {
                (true, true) => {
                    self.acc_scaled(grads, *a, g, T::one());
                    self.acc_owned(grads, *b, owned, -T::one());
                }
                (true, false) => self.acc_owned(grads, *a, owned, T::one()),
                (false, true) => self.acc_owned(grads, *b, owned, -T::one()),
                (false, false) => {}
            },
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = &self.arr(*b).values;
                    self.acc_map(grads, *a, |i| g[i] * bv[i]);
                }
                if self.needs(*b) {
                    let av = &self.arr(*a).values;
                    self.acc_map(grads, *b, |i| g[i] * av[i]);
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*row) {
                    let p = self.shape(*row)[1];
                    let dr = self.buf(grads, *row);
                    if p > 0 {
                        for chunk in g.chunks_exact(p) {
                            axpy(dr, chunk, T::one());
                        }
                    }
                }
                if self.needs(*a) {
                    self.acc_owned(grads, *a, owned, T::one());
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    self.acc_owned(grads, *a, owned, *s);
                }
            }
            Op::ScaleRows(a, f) => {
                if self.needs(*a) {
                    let p = self.shape(*a)[1];
                    let da = self.buf(grads, *a);
                    if p > 0 {
                        for ((d, gg), &s) in da.chunks_exact_mut(p).zip(g.chunks_exact(p)).zip(f.iter()) {
                            axpy(d, gg, s);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let av = &self.arr(*a).values;
                    self.acc_map(grads, *a, |i| if av[i] > T::zero() { g[i] } else { T::zero() });
                }
            }
            Op::Gelu(a, t) => {
                if self.needs(*a) {
                    let av = &self.arr(*a).values;
                    self.acc_map(grads, *a, |i| g[i] * gelu_grad_from_tanh(av[i], t[i]));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let [n, p] = self.shape(*x);
                if self.needs(*gain) {
                    let dg = self.buf(grads, *gain);
                    for r in 0..n {
                        for c in 0..p {
                            dg[c] = dg[c] + g[r * p + c] * xhat[r * p + c];
                        }
                    }
                }
                if self.needs(*bias) {
                    let db = self.buf(grads, *bias);
                    if p > 0 {
                        for chunk in g.chunks_exact(p) {
                            axpy(db, chunk, T::one());
                        }
                    }
                }
                if self.needs(*x) {
                    let gv = &self.arr(*gain).values;
                    let pf = T::from_usize(p.max(1)).unwrap();
                    let dx = self.buf(grads, *x);
                    let mut dxhat = vec![T::zero(); p];
                    for r in 0..n {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..p {
                            let d = g[r * p + c] * gv[c];
                            dxhat[c] = d;
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[r * p + c];
                        }
                        mean_d = mean_d / pf;
                        mean_dx = mean_dx / pf;
                        let rs = rstd[r];
                        for c in 0..p {
                            dx[r * p + c] = dx[r * p + c]
                                + rs * (dxhat[c] - mean_d - xhat[r * p + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather(x, idx) => {
                if self.needs(*x) {
                    let p = self.shape(*x)[1];
                    let dx = self.buf(grads, *x);
                    for (k, &src) in idx.iter().enumerate() {
                        axpy(&mut dx[src * p..(src + 1) * p], &g[k * p..(k + 1) * p], T::one());
                    }
                }
            }
            Op::ScatterAdd(x, targets) => {
                if self.needs(*x) {
                    let p = self.shape(*x)[1];
                    let dx = self.buf(grads, *x);
                    for (k, &t) in targets.iter().enumerate() {
                        axpy(&mut dx[k * p..(k + 1) * p], &g[t * p..(t + 1) * p], T::one());
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let [n, total] = node.array.shape;
                let mut offset = 0;
                for &v in parts {
                    let w = self.shape(v)[1];
                    if self.needs(v) {
                        let dv = self.buf(grads, v);
                        for r in 0..n {
                            axpy(
                                &mut dv[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                                T::one(),
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                if self.needs(*x) {
                    let p = self.shape(*x)[1];
                    let dx = self.buf(grads, *x);
                    axpy(&mut dx[start * p..start * p + g.len()], g, T::one());
                }
            }
            Op::MseRows { pred, target, rows } => {
                if self.needs(*pred) {
                    let [n, p] = self.shape(*pred);
                    let pv = &self.arr(*pred).values;
                    let count = rows.as_ref().map_or(n, |r| r.len()) * p;
                    let s = g[0] * T::lit(2.0) / T::from_usize(count).unwrap();
                    let dp = self.buf(grads, *pred);
                    let mut apply = |r: usize| {
                        for c in 0..p {
                            let k = r * p + c;
                            dp[k] = dp[k] + s * (pv[k] - target[k]);
                        }
                    };
                    match rows {
                        Some(rs) => rs.iter().for_each(|&r| apply(r)),
                        None => (0..n).for_each(apply),
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let dx = self.buf(grads, *x);
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
        }
    }

    /// `grad(v) += a * src`; the first contribution is moved in without a zero fill.
    fn acc_scaled(&self, grads: &mut [Option<Vec<T>>], v: Var, src: &[T], a: T) {
        match &mut grads[v.0] {
            Some(d) => axpy(d, src, a),
            slot @ None => {
                *slot = Some(if a == T::one() {
                    src.to_vec()
                } else {
                    src.iter().map(|&x| a * x).collect()
                })
            }
        }
    }

    /// Like [`Self::acc_scaled`] but reuses `src` as the buffer when possible.
    fn acc_owned(&self, grads: &mut [Option<Vec<T>>], v: Var, mut src: Vec<T>, a: T) {
        match &mut grads[v.0] {
            Some(d) => axpy(d, &src, a),
            slot @ None => {
                if a != T::one() {
                    src.iter_mut().for_each(|x| *x = a * *x);
                }
                *slot = Some(src);
            }
        }
    }

    /// `grad(v)[i] += f(i)` elementwise.
    fn acc_map(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        let len = self.nodes[v.0].array.values.len();
        match &mut grads[v.0] {
            Some(d) => d.iter_mut().enumerate().for_each(|(i, x)| *x = *x + f(i)),
            slot @ None => *slot = Some((0..len).map(f).collect()),
        }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.nodes[v.0].array.values.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Adds the gradient of every parameter leaf into `out`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, out: &mut Grads<T>) {
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads.of(*v) {
                    axpy(&mut out.buffers[pid], g, T::one());
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
