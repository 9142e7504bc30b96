//! Dense tensors and a reverse-mode tape.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Keeps only the listed rows of a 2-D tensor, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `[n, m] + [m]` broadcast over rows.
    AddBias(Var, Var),
    Mul(Var, Var),
    /// Elementwise product with a one-element tensor.
    Scale(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Relu(Var),
    Sum(Var),
    /// Concatenation along the last axis.
    Concat(Vec<Var>),
    Softmax(Var),
    Index(Var, usize),
    /// Row `i` of the output is the mean of the input rows listed in `lists[i]`.
    RowMean(Var, Arc<Vec<Vec<usize>>>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; all zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "add")?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape.clone(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.shape.len() != 1 || x.cols() != b.len() {
            return Err(Error::ShapeMismatch(format!("add_bias: {:?} + {:?}", x.shape, b.shape)));
        }
        let c = b.len();
        let data = x.data.iter().enumerate().map(|(i, v)| v + b.data[i % c]).collect();
        let t = Tensor::new(x.shape.clone(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    /// Elementwise product; either side may be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y.len() == 1 && x.len() != 1 {
            return self.scale(a, b);
        }
        if x.len() == 1 && y.len() != 1 {
            return self.scale(b, a);
        }
        x.same_shape(y, "mul")?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape.clone(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.value(s).item();
        let x = self.value(a);
        let t = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v * k).collect())?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::Scale(a, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[0] {
            return Err(Error::ShapeMismatch(format!("matmul: {:?} x {:?}", x.shape, y.shape)));
        }
        let t = matmul_raw(x, y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| f(*v)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let nd = first.shape.len();
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows || t.shape.len() != nd {
                return Err(Error::ShapeMismatch(format!(
                    "concat: {:?} vs {:?}",
                    first.shape, t.shape
                )));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let shape = if nd == 2 { vec![rows, cols] } else { vec![cols] };
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Softmax over all elements of a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = &self.value(a).data;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let t = Tensor::vector(e.iter().map(|v| v / s).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).data[i];
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Index(a, i), rg)
    }

    /// Per-row mean over neighbor rows. An empty list yields the row itself.
    pub fn row_mean(&mut self, a: Var, lists: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let x = self.value(a);
        if lists.len() != x.rows() {
            return Err(Error::ShapeMismatch(format!(
                "row_mean: {} lists for {} rows",
                lists.len(),
                x.rows()
            )));
        }
        let c = x.cols();
        let mut data = vec![0.0; lists.len() * c];
        for (r, list) in lists.iter().enumerate() {
            let out = &mut data[r * c..(r + 1) * c];
            if list.is_empty() {
                out.copy_from_slice(x.row(r));
                continue;
            }
            for &n in list {
                for (o, v) in out.iter_mut().zip(x.row(n)) {
                    *o += v;
                }
            }
            let inv = 1.0 / list.len() as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(x.shape.clone(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::RowMean(a, lists), rg))
    }

    /// Reverse sweep from a scalar loss. Nodes are visited in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let l = self.value(loss);
        if l.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                l.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor {
            shape: l.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("node {i} ({:?})", op_name(&self.nodes[i].op))));
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, data: Vec<f64>, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data.iter_mut().zip(&data) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor {
                        shape: self.nodes[v.0].value.shape.clone(),
                        data,
                    })
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.data.clone(), grads);
                acc(*b, g.data.clone(), grads);
            }
            Op::AddBias(a, b) => {
                acc(*a, g.data.clone(), grads);
                let c = val(*b).len();
                let mut gb = vec![0.0; c];
                for (k, v) in g.data.iter().enumerate() {
                    gb[k % c] += v;
                }
                acc(*b, gb, grads);
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(), grads);
                acc(*b, g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect(), grads);
            }
            Op::Scale(a, s) => {
                let k = val(*s).item();
                let x = val(*a);
                acc(*a, g.data.iter().map(|v| v * k).collect(), grads);
                let ds: f64 = g.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                acc(*s, vec![ds], grads);
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, matmul_nt(g, y), grads);
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, matmul_tn(x, g), grads);
                }
            }
            Op::Exp(a) => {
                let out = &node.value;
                acc(*a, g.data.iter().zip(&out.data).map(|(p, q)| p * q).collect(), grads);
            }
            Op::Sin(a) => {
                let x = val(*a);
                acc(
                    *a,
                    g.data.iter().zip(&x.data).map(|(p, q)| p * q.cos()).collect(),
                    grads,
                );
            }
            Op::Cos(a) => {
                let x = val(*a);
                acc(
                    *a,
                    g.data.iter().zip(&x.data).map(|(p, q)| -p * q.sin()).collect(),
                    grads,
                );
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(
                    *a,
                    g.data
                        .iter()
                        .zip(&x.data)
                        .map(|(p, q)| if *q > 0.0 { *p } else { 0.0 })
                        .collect(),
                    grads,
                );
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                acc(*a, vec![g.item(); n], grads);
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let c = val(*p).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data[r * total + off..r * total + off + c]);
                    }
                    acc(*p, d, grads);
                    off += c;
                }
            }
            Op::Softmax(a) => {
                let y = &node.value.data;
                let dot: f64 = g.data.iter().zip(y).map(|(p, q)| p * q).sum();
                acc(
                    *a,
                    y.iter().zip(&g.data).map(|(yi, gi)| yi * (gi - dot)).collect(),
                    grads,
                );
            }
            Op::Index(a, k) => {
                let mut d = vec![0.0; val(*a).len()];
                d[*k] = g.item();
                acc(*a, d, grads);
            }
            Op::RowMean(a, lists) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (r, list) in lists.iter().enumerate() {
                    let gr = &g.data[r * c..(r + 1) * c];
                    if list.is_empty() {
                        for (k, v) in gr.iter().enumerate() {
                            d[r * c + k] += v;
                        }
                        continue;
                    }
                    let inv = 1.0 / list.len() as f64;
                    for &n in list {
                        for (k, v) in gr.iter().enumerate() {
                            d[n * c + k] += v * inv;
                        }
                    }
                }
                acc(*a, d, grads);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::Exp(..) => "exp",
        Op::Sin(..) => "sin",
        Op::Cos(..) => "cos",
        Op::Relu(..) => "relu",
        Op::Sum(..) => "sum",
        Op::Concat(..) => "concat",
        Op::Softmax(..) => "softmax",
        Op::Index(..) => "index",
        Op::RowMean(..) => "row_mean",
    }
}

pub(crate) fn matmul_raw(x: &Tensor, y: &Tensor) -> Tensor {
    let (n, k, m) = (x.shape[0], x.shape[1], y.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a = x.data[i * k + p];
            if a == 0.0 {
                continue;
            }
            let yrow = &y.data[p * m..(p + 1) * m];
            for (o, b) in orow.iter_mut().zip(yrow) {
                *o += a * b;
            }
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// `g · yᵀ`
fn matmul_nt(g: &Tensor, y: &Tensor) -> Vec<f64> {
    let (n, m) = (g.shape[0], g.shape[1]);
    let k = y.shape[0];
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g.data[i * m..(i + 1) * m];
        for p in 0..k {
            let yrow = &y.data[p * m..(p + 1) * m];
            out[i * k + p] = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `xᵀ · g`
fn matmul_tn(x: &Tensor, g: &Tensor) -> Vec<f64> {
    let (n, k) = (x.shape[0], x.shape[1]);
    let m = g.shape[1];
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g.data[i * m..(i + 1) * m];
        for p in 0..k {
            let a = x.data[i * k + p];
            if a == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, b) in orow.iter_mut().zip(grow) {
                *o += a * b;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks reverse-mode gradients of `build` against central differences for each input.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let o = build(&mut g, &vars);
            g.value(o).item()
        };
        let h = 1e-4;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]);
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].data_mut()[e] += h;
                minus[k].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(
                    rel < 1e-4 || (fd - a).abs() < 1e-9,
                    "input {k} elem {e}: fd {fd} vs {a}"
                );
            }
        }
    }

    #[test]
    fn gradcheck_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[4, 2], &mut rng);
        let bias = rand_tensor(&[4], &mut rng);
        let v = rand_tensor(&[5], &mut rng);
        let s = rand_tensor(&[], &mut rng);

        check(vec![a.clone(), b.clone()], |g, x| {
            let y = g.add(x[0], x[1]).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
        check(vec![a.clone(), b.clone()], |g, x| {
            let y = g.mul(x[0], x[1]).unwrap();
            g.sum(y)
        });
        check(vec![a.clone(), s], |g, x| {
            let y = g.mul(x[0], x[1]).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
        check(vec![a.clone(), w], |g, x| {
            let y = g.matmul(x[0], x[1]).unwrap();
            let y = g.sin(y);
            g.sum(y)
        });
        check(vec![a.clone(), bias], |g, x| {
            let y = g.add_bias(x[0], x[1]).unwrap();
            let y = g.exp(y);
            g.sum(y)
        });
        check(vec![a.clone()], |g, x| {
            let y = g.cos(x[0]);
            let y = g.mul(y, x[0]).unwrap();
            g.sum(y)
        });
        check(vec![a.clone()], |g, x| {
            // relu away from the kink: inputs are O(1) random, h = 1e-4
            let y = g.relu(x[0]);
            let y = g.mul(y, x[0]).unwrap();
            g.sum(y)
        });
        check(vec![a.clone(), b.clone()], |g, x| {
            let y = g.concat(&[x[0], x[1]]).unwrap();
            let y = g.exp(y);
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
        check(vec![v.clone()], |g, x| {
            let y = g.softmax(x[0]);
            let y2 = g.exp(x[0]);
            let p = g.mul(y, y2).unwrap();
            g.sum(p)
        });
        check(vec![v, a.clone()], |g, x| {
            let sm = g.softmax(x[0]);
            let w1 = g.index(sm, 1);
            let y = g.mul(x[1], w1).unwrap();
            let y = g.sin(y);
            g.sum(y)
        });
        let lists = Arc::new(vec![vec![1, 2], vec![0], vec![]]);
        check(vec![a], move |g, x| {
            let y = g.row_mean(x[0], lists.clone()).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        // loss = sum(x · W) over a single row: dL/dW[i][j] = x[i]
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.param(Tensor::matrix(3, 2, vec![0.3; 6]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let l = g.sum(y);
        let gw = g.backward(l).unwrap().get(w);
        assert_eq!(gw.data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn disconnected_param_gets_zero_and_non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        let b = g.param(Tensor::vector(vec![3.0, 4.0]));
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
        assert!(matches!(g.backward(a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![800.0]));
        let e = g.exp(a);
        let e2 = g.exp(e);
        let l = g.sum(e2);
        assert!(matches!(g.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&[6, 5], &mut rng);
        let w = rand_tensor(&[5, 5], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let x = g.param(a.clone());
            let wv = g.param(w.clone());
            let y = g.matmul(x, wv).unwrap();
            let y = g.relu(y);
            let y = g.matmul(y, wv).unwrap();
            let l = g.sum(y);
            let gr = g.backward(l).unwrap();
            (gr.get(x), gr.get(wv))
        };
        assert_eq!(run(), run());
    }
}
