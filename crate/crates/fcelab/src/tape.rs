//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every primitive records one node; `backward` walks the tape once in
//! reverse. The primitive set is closed: adding a new op means adding its
//! paired backward rule and a gradient-check test.

use crate::error::{FceError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = x · wᵀ + b, x: N×I, w: O×I, b: O
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    LeakyRelu(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis1(Var),
    LogSumExpAxis1(Var),
    ConcatCols(Var, Var),
    NarrowCols { x: Var, start: usize },
    AddRowVec { x: Var, v: Var },
    MulRowVec { x: Var, v: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    // Row-major matmul c (m×n) = a·b (+ beta·c); a_t/b_t transpose the stored layout.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root w.r.t. `v`, if it was computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(FceError::NonFinite(name.into()));
        }
        Ok(self.push(value, requires_grad, op))
    }

    fn shape_err(name: &str, detail: String) -> FceError {
        FceError::ShapeMismatch { primitive: name.into(), detail }
    }

    // ── primitives ───────────────────────────────────────────────────

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.value(x).dims2();
        let (o, i2) = self.value(w).dims2();
        let bl = self.value(b).len();
        if i != i2 || bl != o || self.value(x).shape().len() != 2 {
            return Err(Self::shape_err(
                "affine",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.value(x).shape(),
                    self.value(w).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(self.value(b).data());
        }
        // out += x · wᵀ
        dgemm_rm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.record("affine", Tensor::new(vec![n, o], out)?, rg, Op::Affine { x, w, b })
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.record(name, Tensor::new(shape, data)?, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.record(name, Tensor::new(shape, data)?, rg, op)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + k, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary("mul_scalar", x, |v| v * k, Op::MulScalar(x, k))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary("leaky_relu", x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    /// log σ(x) = −softplus(−x), numerically stable for large |x|.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let nx = self.neg(x)?;
        let sp = self.softplus(nx)?;
        self.neg(sp)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.record("sum", Tensor::scalar(s), rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(Self::shape_err("mean", "empty tensor".into()));
        }
        let s: f64 = self.value(x).data().iter().sum::<f64>() / self.value(x).len() as f64;
        let rg = self.rg(x);
        self.record("mean", Tensor::scalar(s), rg, Op::MeanAll(x))
    }

    /// Row sums of an N×K tensor, result shape [N].
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.rank2(x, "sum_axis1")?;
        let d = self.value(x).data();
        let out: Vec<f64> = (0..n).map(|r| d[r * k..(r + 1) * k].iter().sum()).collect();
        let rg = self.rg(x);
        self.record("sum_axis1", Tensor::new(vec![n], out)?, rg, Op::SumAxis1(x))
    }

    /// Row-wise logsumexp of an N×K tensor, result shape [N]. Overflow-safe.
    pub fn logsumexp_axis1(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.rank2(x, "logsumexp_axis1")?;
        let d = self.value(x).data();
        let out: Vec<f64> = (0..n)
            .map(|r| logsumexp(&d[r * k..(r + 1) * k]))
            .collect();
        let rg = self.rg(x);
        self.record("logsumexp_axis1", Tensor::new(vec![n], out)?, rg, Op::LogSumExpAxis1(x))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ka) = self.rank2(a, "concat_cols")?;
        let (n2, kb) = self.rank2(b, "concat_cols")?;
        if n != n2 {
            return Err(Self::shape_err("concat_cols", format!("{} rows vs {} rows", n, n2)));
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(n * (ka + kb));
        for r in 0..n {
            out.extend_from_slice(&da[r * ka..(r + 1) * ka]);
            out.extend_from_slice(&db[r * kb..(r + 1) * kb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.record("concat_cols", Tensor::new(vec![n, ka + kb], out)?, rg, Op::ConcatCols(a, b))
    }

    /// Column slice [start, start+len) of an N×K tensor (the split primitive).
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, k) = self.rank2(x, "narrow_cols")?;
        if len == 0 || start + len > k {
            return Err(Self::shape_err(
                "narrow_cols",
                format!("slice [{start}, {}) of {k} columns", start + len),
            ));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&d[r * k + start..r * k + start + len]);
        }
        let rg = self.rg(x);
        self.record("narrow_cols", Tensor::new(vec![n, len], out)?, rg, Op::NarrowCols { x, start })
    }

    /// x (N×K) + v ([K]) broadcast over rows.
    pub fn add_rowvec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, k) = self.rank2(x, "add_rowvec")?;
        if self.value(v).len() != k {
            return Err(Self::shape_err(
                "add_rowvec",
                format!("x has {k} columns, v has length {}", self.value(v).len()),
            ));
        }
        let dx = self.value(x).data();
        let dv = self.value(v).data();
        let out: Vec<f64> = (0..n * k).map(|i| dx[i] + dv[i % k]).collect();
        let rg = self.rg(x) || self.rg(v);
        self.record("add_rowvec", Tensor::new(vec![n, k], out)?, rg, Op::AddRowVec { x, v })
    }

    /// x (N×K) ∘ v ([K]) broadcast over rows.
    pub fn mul_rowvec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, k) = self.rank2(x, "mul_rowvec")?;
        if self.value(v).len() != k {
            return Err(Self::shape_err(
                "mul_rowvec",
                format!("x has {k} columns, v has length {}", self.value(v).len()),
            ));
        }
        let dx = self.value(x).data();
        let dv = self.value(v).data();
        let out: Vec<f64> = (0..n * k).map(|i| dx[i] * dv[i % k]).collect();
        let rg = self.rg(x) || self.rg(v);
        self.record("mul_rowvec", Tensor::new(vec![n, k], out)?, rg, Op::MulRowVec { x, v })
    }

    /// out[i] = x[i, idx[i]] for an N×K tensor.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, k) = self.rank2(x, "gather_rows")?;
        if idx.len() != n {
            return Err(Self::shape_err("gather_rows", format!("{} rows, {} indices", n, idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= k) {
            return Err(Self::shape_err("gather_rows", format!("index {bad} out of {k} columns")));
        }
        let d = self.value(x).data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &j)| d[r * k + j]).collect();
        let rg = self.rg(x);
        self.record("gather_rows", Tensor::new(vec![n], out)?, rg, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.value(x).shape(), shape),
            ));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.rg(x);
        self.record("reshape", Tensor::new(shape, data)?, rg, Op::Reshape(x))
    }

    fn rank2(&self, x: Var, name: &'static str) -> Result<(usize, usize)> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Self::shape_err(name, format!("expected rank-2 tensor, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    // ── backward ─────────────────────────────────────────────────────

    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(FceError::TapeConsumed);
        }
        self.consumed = true;
        if !self.value(root).is_scalar() {
            return Err(FceError::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            self.propagate(i)?;
        }
        Ok(())
    }

    fn accum(&mut self, parent: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[parent.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn propagate(&mut self, i: usize) -> Result<()> {
        let g = self.nodes[i].grad.clone().unwrap();
        // Take the op out so we can call &mut self helpers freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, o) = self.value(Var(i)).dims2();
                let (_, inp) = self.value(*w).dims2();
                if self.rg(*x) {
                    // dx = g · w  (N×O · O×I)
                    let mut dx = vec![0.0; n * inp];
                    dgemm_rm(n, o, inp, &g, false, self.value(*w).data(), false, 0.0, &mut dx);
                    self.accum(*x, dx);
                }
                if self.rg(*w) {
                    // dw = gᵀ · x  (O×N · N×I)
                    let mut dw = vec![0.0; o * inp];
                    dgemm_rm(o, n, inp, &g, true, self.value(*x).data(), false, 0.0, &mut dw);
                    self.accum(*w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; o];
                    for r in 0..n {
                        for c in 0..o {
                            db[c] += g[r * o + c];
                        }
                    }
                    self.accum(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accum(*a, g.clone());
                }
                if self.rg(*b) {
                    self.accum(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    self.accum(*a, g.clone());
                }
                if self.rg(*b) {
                    self.accum(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let db = self.value(*b).data();
                    self.accum(*a, g.iter().zip(db).map(|(gi, bi)| gi * bi).collect());
                }
                if self.rg(*b) {
                    let da = self.value(*a).data();
                    self.accum(*b, g.iter().zip(da).map(|(gi, ai)| gi * ai).collect());
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.rg(*x) {
                    self.accum(*x, g.clone());
                }
            }
            Op::MulScalar(x, k) => {
                if self.rg(*x) {
                    self.accum(*x, g.iter().map(|v| v * k).collect());
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.rg(*x) {
                    let dx = self.value(*x).data();
                    self.accum(
                        *x,
                        g.iter()
                            .zip(dx)
                            .map(|(gi, &xi)| if xi > 0.0 { *gi } else { gi * slope })
                            .collect(),
                    );
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let dx = self.value(*x).data();
                    self.accum(
                        *x,
                        g.iter().zip(dx).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect(),
                    );
                }
            }
            Op::Tanh(x) => {
                if self.rg(*x) {
                    let y = self.value(Var(i)).data();
                    self.accum(*x, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect());
                }
            }
            Op::Exp(x) => {
                if self.rg(*x) {
                    let y = self.value(Var(i)).data();
                    self.accum(*x, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
                }
            }
            Op::Log(x) => {
                if self.rg(*x) {
                    let dx = self.value(*x).data();
                    self.accum(*x, g.iter().zip(dx).map(|(gi, xi)| gi / xi).collect());
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let y = self.value(Var(i)).data();
                    self.accum(*x, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect());
                }
            }
            Op::Softplus(x) => {
                if self.rg(*x) {
                    let dx = self.value(*x).data();
                    self.accum(*x, g.iter().zip(dx).map(|(gi, &xi)| gi * sigmoid(xi)).collect());
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    self.accum(*x, vec![g[0]; n]);
                }
            }
            Op::MeanAll(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    self.accum(*x, vec![g[0] / n as f64; n]);
                }
            }
            Op::SumAxis1(x) => {
                if self.rg(*x) {
                    let (n, k) = self.value(*x).dims2();
                    let mut dx = vec![0.0; n * k];
                    for r in 0..n {
                        for c in 0..k {
                            dx[r * k + c] = g[r];
                        }
                    }
                    self.accum(*x, dx);
                }
            }
            Op::LogSumExpAxis1(x) => {
                if self.rg(*x) {
                    let (n, k) = self.value(*x).dims2();
                    let y = self.value(Var(i)).data();
                    let dxv = self.value(*x).data();
                    let mut dx = vec![0.0; n * k];
                    for r in 0..n {
                        for c in 0..k {
                            dx[r * k + c] = g[r] * (dxv[r * k + c] - y[r]).exp();
                        }
                    }
                    self.accum(*x, dx);
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, ka) = self.value(*a).dims2();
                let (_, kb) = self.value(*b).dims2();
                let k = ka + kb;
                if self.rg(*a) {
                    let mut da = vec![0.0; n * ka];
                    for r in 0..n {
                        da[r * ka..(r + 1) * ka].copy_from_slice(&g[r * k..r * k + ka]);
                    }
                    self.accum(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * kb];
                    for r in 0..n {
                        db[r * kb..(r + 1) * kb].copy_from_slice(&g[r * k + ka..(r + 1) * k]);
                    }
                    self.accum(*b, db);
                }
            }
            Op::NarrowCols { x, start } => {
                if self.rg(*x) {
                    let (n, k) = self.value(*x).dims2();
                    let (_, len) = self.value(Var(i)).dims2();
                    let mut dx = vec![0.0; n * k];
                    for r in 0..n {
                        dx[r * k + start..r * k + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accum(*x, dx);
                }
            }
            Op::AddRowVec { x, v } => {
                let (n, k) = self.value(*x).dims2();
                if self.rg(*x) {
                    self.accum(*x, g.clone());
                }
                if self.rg(*v) {
                    let mut dv = vec![0.0; k];
                    for r in 0..n {
                        for c in 0..k {
                            dv[c] += g[r * k + c];
                        }
                    }
                    self.accum(*v, dv);
                }
            }
            Op::MulRowVec { x, v } => {
                let (n, k) = self.value(*x).dims2();
                if self.rg(*x) {
                    let dv = self.value(*v).data();
                    self.accum(*x, g.iter().enumerate().map(|(idx, gi)| gi * dv[idx % k]).collect());
                }
                if self.rg(*v) {
                    let dx = self.value(*x).data();
                    let mut acc = vec![0.0; k];
                    for r in 0..n {
                        for c in 0..k {
                            acc[c] += g[r * k + c] * dx[r * k + c];
                        }
                    }
                    self.accum(*v, acc);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.rg(*x) {
                    let (n, k) = self.value(*x).dims2();
                    let mut dx = vec![0.0; n * k];
                    for (r, &j) in idx.iter().enumerate() {
                        dx[r * k + j] = g[r];
                    }
                    self.accum(*x, dx);
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Max relative gradient error of a scalar function against central differences.
///
/// Relative error uses max(1, |analytic|, |numeric|) as denominator.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let root = f(&mut tape, x)?;
    tape.backward(root)?;
    let analytic: Vec<f64> = tape.grad(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p.clone(), false);
        let r = f(&mut t, x)?;
        let v = t.value(r).item();
        if !v.is_finite() {
            return Err(FceError::NonFinite("grad_check".into()));
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    for j in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[j] += step;
        let mut minus = point.clone();
        minus.data_mut()[j] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic[j];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Gradient check over several parameter tensors at once, optionally
/// subsampling coordinates of large tensors (finite differences over a
/// 100k-parameter model would be prohibitively slow otherwise).
pub fn grad_check_params<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    max_coords_per_tensor: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |ps: &[Tensor], trainable: bool| -> Result<(Vec<Option<Vec<f64>>>, f64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), trainable)).collect();
        let root = f(&mut tape, &vars)?;
        let val = tape.value(root).item();
        if !val.is_finite() {
            return Err(FceError::NonFinite("grad_check_params".into()));
        }
        let grads = if trainable {
            tape.backward(root)?;
            vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect()
        } else {
            vec![None; vars.len()]
        };
        Ok((grads, val))
    };

    let (grads, _) = run(params, true)?;
    let mut max_err = 0.0f64;
    for (ti, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= max_coords_per_tensor {
            (0..p.len()).collect()
        } else {
            (0..max_coords_per_tensor).map(|_| rng.gen_range(0..p.len())).collect()
        };
        for j in coords {
            let mut plus = params.to_vec();
            plus[ti].data_mut()[j] += step;
            let mut minus = params.to_vec();
            minus[ti].data_mut()[j] -= step;
            let (_, fp) = run(&plus, false)?;
            let (_, fm) = run(&minus, false)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = grads[ti].as_ref().map(|g| g[j]).unwrap_or(0.0);
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
