//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Node ids are
//! handed out in creation order, which is already a topological order, so the
//! backward sweep simply walks ids downwards from the loss. Build a fresh tape
//! for every training step.
//!
//! ```
//! use amcmc::autodiff::Tape;
//! use amcmc::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).values(), &[2.0, -4.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{AmcError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias(usize, usize),
    MulRow(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Softplus(usize),
    Log(usize),
    Exp(usize),
    AbsPow(usize, f64),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Slice { input: usize, start: usize },
    Reshape(usize),
    RowFunction { input: usize, row_grads: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Parameter leaves created by [`Tape::bind`].
#[derive(Clone, Debug)]
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AmcError::Contract(format!("parameter `{name}` not bound on tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if `var` is not on the loss path.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.adjoints.get(var.id).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf node: an input, a constant or a parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    /// Creates one leaf per parameter tensor.
    pub fn bind(&self, params: &ParamSet) -> BoundParams<'_> {
        BoundParams {
            vars: params
                .iter()
                .map(|(name, t)| (name.to_string(), self.leaf(t.clone())))
                .collect(),
        }
    }

    /// Applies a user-supplied scalar function with known gradient to every row of `x`.
    ///
    /// `f` maps a row to `(value, gradient)`. The output has shape `[rows, 1]`.
    pub fn row_function<'s, F>(&'s self, x: Var<'s>, f: F) -> Result<Var<'s>>
    where
        F: Fn(&[f64]) -> (f64, Vec<f64>),
    {
        let input = x.value();
        let (r, c) = input.dims2();
        let mut out = Vec::with_capacity(r);
        let mut grads = Vec::with_capacity(r * c);
        for i in 0..r {
            let (v, g) = f(input.row(i));
            if g.len() != c {
                return Err(AmcError::dimension("row_function gradient", &[c], &[g.len()]));
            }
            if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(AmcError::NonFinite(format!("row function at row {i}")));
            }
            out.push(v);
            grads.extend(g);
        }
        let row_grads = Tensor::matrix(r, c, grads)?;
        Ok(self.push(
            Tensor::matrix(r, 1, out)?,
            Op::RowFunction {
                input: x.id,
                row_grads,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(AmcError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut adj);
            adj[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    /// Gradient of `loss` with respect to every bound parameter.
    pub fn grad(&self, loss: Var<'_>, params: &BoundParams<'_>) -> Result<ParamSet> {
        let grads = self.backward(loss)?;
        let mut out = ParamSet::new();
        for (name, var) in params.iter() {
            out.insert(name, grads.get(var))?;
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut adj[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let (r, c) = g.dims2();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let value_of = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let ga = g.zip_map(value_of(*b), |g, y| g * y);
            let gb = g.zip_map(value_of(*a), |g, x| g * x);
            accumulate(adj, *a, ga);
            accumulate(adj, *b, gb);
        }
        Op::Neg(a) => accumulate(adj, *a, g.map(|v| -v)),
        Op::Scale(a, c) => accumulate(adj, *a, g.map(|v| v * c)),
        Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
        Op::AddBias(x, b) => {
            accumulate(adj, *x, g.clone());
            let sums = col_sums(g);
            let gb = Tensor::new(value_of(*b).shape().to_vec(), sums).expect("bias shape");
            accumulate(adj, *b, gb);
        }
        Op::MulRow(x, v) => {
            let row = value_of(*v).values();
            let xv = value_of(*x);
            let (r, c) = g.dims2();
            let mut gx = g.clone();
            let mut gv = vec![0.0; c];
            for i in 0..r {
                let xr = xv.row(i);
                let gr = gx.row_mut(i);
                for j in 0..c {
                    gv[j] += gr[j] * xr[j];
                    gr[j] *= row[j];
                }
            }
            accumulate(adj, *x, gx);
            let gv = Tensor::new(value_of(*v).shape().to_vec(), gv).expect("row shape");
            accumulate(adj, *v, gv);
        }
        Op::MatMul(a, b) => {
            let av = value_of(*a);
            let bv = value_of(*b);
            let ga = g.matmul(&bv.transpose()).expect("matmul adjoint");
            let gb = av.transpose().matmul(g).expect("matmul adjoint");
            accumulate(adj, *a, ga.reshaped(av.shape()).expect("shape"));
            accumulate(adj, *b, gb.reshaped(bv.shape()).expect("shape"));
        }
        Op::Relu(a) => {
            let ga = g.zip_map(value_of(*a), |g, x| if x > 0.0 { g } else { 0.0 });
            accumulate(adj, *a, ga);
        }
        Op::LeakyRelu(a, slope) => {
            let ga = g.zip_map(value_of(*a), |g, x| if x > 0.0 { g } else { g * slope });
            accumulate(adj, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g.zip_map(&node.value, |g, y| g * y * (1.0 - y));
            accumulate(adj, *a, ga);
        }
        Op::Softplus(a) => {
            let ga = g.zip_map(value_of(*a), |g, x| g * sigmoid(x));
            accumulate(adj, *a, ga);
        }
        Op::Log(a) => {
            let ga = g.zip_map(value_of(*a), |g, x| g / x);
            accumulate(adj, *a, ga);
        }
        Op::Exp(a) => {
            let ga = g.zip_map(&node.value, |g, y| g * y);
            accumulate(adj, *a, ga);
        }
        Op::AbsPow(a, p) => {
            let p = *p;
            let ga = g.zip_map(value_of(*a), |g, x| {
                if x == 0.0 {
                    0.0
                } else {
                    g * p * x.abs().powf(p - 1.0) * x.signum()
                }
            });
            accumulate(adj, *a, ga);
        }
        Op::Sum(a) => {
            let s = g.values()[0];
            accumulate(adj, *a, Tensor::filled(value_of(*a).shape(), s));
        }
        Op::Mean(a) => {
            let shape = value_of(*a).shape();
            let n = value_of(*a).numel().max(1) as f64;
            accumulate(adj, *a, Tensor::filled(shape, g.values()[0] / n));
        }
        Op::RowSum(a) => {
            let av = value_of(*a);
            let (r, c) = av.dims2();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                out.extend(std::iter::repeat_n(g.values()[i], c));
            }
            accumulate(adj, *a, Tensor::new(av.shape().to_vec(), out).expect("shape"));
        }
        Op::Slice { input, start } => {
            let mut full = Tensor::zeros(value_of(*input).shape());
            full.values_mut()[*start..*start + g.numel()].copy_from_slice(g.values());
            accumulate(adj, *input, full);
        }
        Op::Reshape(a) => {
            accumulate(adj, *a, g.reshaped(value_of(*a).shape()).expect("shape"));
        }
        Op::RowFunction { input, row_grads } => {
            let (r, c) = row_grads.dims2();
            let mut out = row_grads.clone();
            for i in 0..r {
                let gi = g.values()[i];
                for v in &mut out.values_mut()[i * c..(i + 1) * c] {
                    *v *= gi;
                }
            }
            let out = out.reshaped(value_of(*input).shape()).expect("shape");
            accumulate(adj, *input, out);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// A constant copy of this node; gradients do not flow back through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.value())
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.id].value.map(f);
        self.tape.push(v, op)
    }

    fn same_shape(&self, other: Var<'t>, context: &str) -> Result<(Tensor, Tensor)> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        if a.shape() != b.shape() {
            return Err(AmcError::dimension(context, a.shape(), b.shape()));
        }
        Ok((a.clone(), b.clone()))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        Ok(self.tape.push(a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        Ok(self.tape.push(a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        Ok(self.tape.push(a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    /// `x[r, c] + b[c]`, broadcasting `b` over rows.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = self.row_broadcast_operands(bias, "add_bias")?;
        let c = b.numel();
        let mut out = x.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            *v += b.values()[i % c];
        }
        Ok(self.tape.push(out, Op::AddBias(self.id, bias.id)))
    }

    /// `x[r, c] * v[c]`, scaling every row elementwise by `v`.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (x, v) = self.row_broadcast_operands(row, "mul_row")?;
        let c = v.numel();
        let mut out = x.clone();
        for (i, e) in out.values_mut().iter_mut().enumerate() {
            *e *= v.values()[i % c];
        }
        Ok(self.tape.push(out, Op::MulRow(self.id, row.id)))
    }

    fn row_broadcast_operands(&self, row: Var<'t>, context: &str) -> Result<(Tensor, Tensor)> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id].value;
        let v = &nodes[row.id].value;
        if x.cols() != v.numel() {
            return Err(AmcError::dimension(context, &[x.cols()], &[v.numel()]));
        }
        Ok((x.clone(), v.clone()))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    /// `log(sigmoid(x)) = -softplus(-x)`.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.neg().softplus().neg()
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    /// `|x|^p`. The derivative at zero is taken as zero.
    pub fn abs_pow(self, p: f64) -> Var<'t> {
        self.unary(move |x| x.abs().powf(p), Op::AbsPow(self.id, p))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.nodes.borrow()[self.id].value.sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (s, n) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            (v.sum(), v.numel().max(1))
        };
        self.tape.push(Tensor::scalar(s / n as f64), Op::Mean(self.id))
    }

    /// Sums each row: `[r, c] -> [r, 1]`.
    pub fn row_sum(self) -> Var<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let r = v.rows();
            let sums = (0..r).map(|i| v.row(i).iter().sum()).collect();
            Tensor::matrix(r, 1, sums).expect("row sums")
        };
        self.tape.push(out, Op::RowSum(self.id))
    }

    /// Contiguous slice of the flattened values, reshaped to `shape`.
    pub fn slice(self, start: usize, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let len: usize = shape.iter().product();
            if start + len > v.numel() {
                return Err(AmcError::dimension(
                    "slice bounds",
                    &[v.numel()],
                    &[start + len],
                ));
            }
            Tensor::new(shape.to_vec(), v.values()[start..start + len].to_vec())?
        };
        Ok(self.tape.push(
            out,
            Op::Slice {
                input: self.id,
                start,
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.tape.nodes.borrow()[self.id].value.reshaped(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }
}
