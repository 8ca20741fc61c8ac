//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; vectors are `1 × n` rows and
//! scalars are `1 × 1`. Operations record their inputs, and [`Graph::backward`]
//! walks the tape in reverse accumulating adjoints.
//!
//! Parameters are registered through [`Graph::param`], which keys leaves by the
//! address of the parameter tensor. Using the same tensor twice yields the same
//! leaf, so gradients for shared weights accumulate automatically, and
//! [`Gradients::of`] can look them up again from the tensor itself.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

pub type Tensor = Array2<f64>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for a custom operation: `(grad_out, inputs, output) -> grads`.
///
/// Must return one gradient per input, each shaped like that input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm(Var, f64),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    RowNorms(Var),
    MeanRows(Var),
    MaxRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// `out.flat[i] = in.flat[src[i]]`
    Rearrange(Var, Vec<usize>),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter tensor previously registered with
    /// [`Graph::param`]. Parameters that did not influence the root (or were
    /// never registered) get a zero gradient of the right shape.
    pub fn of(&self, param: &Tensor) -> Tensor {
        self.params
            .get(&key(param))
            .and_then(|v| self.get(*v))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.raw_dim()))
    }
}

fn key(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// GELU with the tanh approximation, applied elementwise.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

fn layer_norm_forward(x: &Tensor, eps: f64) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    /// Records a constant (no gradient is tracked back to any parameter).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a trainable tensor, reusing the leaf if it was seen before.
    pub fn param(&mut self, p: &Tensor) -> Var {
        if let Some(v) = self.params.get(&key(p)) {
            return *v;
        }
        let v = self.push(p.clone(), Op::Leaf);
        self.params.insert(key(p), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `[m × n] + [1 × n]`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `[m × n] * [1 × n]` elementwise, broadcasting the row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = layer_norm_forward(self.value(a), eps);
        self.push(v, Op::LayerNorm(a, eps))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Divides every row by its Euclidean norm. Zero rows are left at zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|x| x / n);
            }
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Euclidean norm of each row, as an `m × 1` column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_shape_fn((x.nrows(), 1), |(i, _)| {
            let r = x.row(i);
            r.dot(&r).sqrt()
        });
        self.push(v, Op::RowNorms(a))
    }

    /// Column means, as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.mean_axis(Axis(0)).expect("mean of empty matrix").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Column maxima, as a `1 × n` row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_shape_fn((1, x.ncols()), |(_, j)| {
            x.column(j).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        self.push(v, Op::MaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Builds an `rows × cols` matrix whose flat entry `i` is the input's flat
    /// entry `src[i]` (row-major). Covers slicing, gathering and im2col.
    pub fn rearrange(&mut self, a: Var, rows: usize, cols: usize, src: Vec<usize>) -> Var {
        assert_eq!(src.len(), rows * cols, "rearrange: index count mismatch");
        let x = self.value(a);
        let flat = x.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| x.iter().cloned().collect());
        let data: Vec<f64> = src.iter().map(|&i| flat[i]).collect();
        let v = Tensor::from_shape_vec((rows, cols), data).expect("shape");
        self.push(v, Op::Rearrange(a, src))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dim();
        assert!(start + len <= n);
        let src = (0..m).flat_map(|i| (start..start + len).map(move |j| i * n + j)).collect();
        self.rearrange(a, m, len, src)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (m, n) = self.value(a).dim();
        assert!(rows.iter().all(|&r| r < m), "gather_rows: index out of range");
        let src = rows.iter().flat_map(|&r| (0..n).map(move |j| r * n + j)).collect();
        self.rearrange(a, rows.len(), n, src)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dim();
        let src = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.rearrange(a, n, m, src)
    }

    /// Records an operation with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), backward))
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones((1, 1)));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            // leaf adjoints are the result; interior ones are released once used
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, -&gout);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &gout * self.value(*b));
                    acc(&mut grads, *b, &gout * self.value(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *r, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRow(a, r) => {
                    acc(&mut grads, *a, &gout * self.value(*r));
                    let gr = (&gout * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &gout * *k),
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, gout.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&gout));
                }
                Op::MatMulBt(a, b) => {
                    acc(&mut grads, *a, gout.dot(self.value(*b)));
                    acc(&mut grads, *b, gout.t().dot(self.value(*a)));
                }
                Op::Gelu(a) => {
                    let mut g = self.value(*a).mapv(gelu_grad);
                    g *= &gout;
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut g = gout.clone();
                    Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut g = Tensor::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let xr = x.row(r);
                        let n = xr.len() as f64;
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let dy = gout.row(r);
                        let yr = y.row(r);
                        let mean_dy = dy.sum() / n;
                        let mean_dy_y = dy.dot(&yr) / n;
                        for j in 0..xr.len() {
                            g[[r, j]] = inv * (dy[j] - mean_dy - yr[j] * mean_dy_y);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = Tensor::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot = gout.row(r).dot(&y.row(r));
                        for j in 0..y.ncols() {
                            g[[r, j]] = y[[r, j]] * (gout[[r, j]] - dot);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut g = Tensor::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let n = x.row(r).dot(&x.row(r)).sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let dot = gout.row(r).dot(&y.row(r));
                        for j in 0..x.ncols() {
                            g[[r, j]] = (gout[[r, j]] - y[[r, j]] * dot) / n;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::RowNorms(a) => {
                    let x = self.value(*a);
                    let norms = &node.value;
                    let mut g = x.clone();
                    for (r, mut row) in g.rows_mut().into_iter().enumerate() {
                        let n = norms[[r, 0]];
                        let k = if n > 0.0 { gout[[r, 0]] / n } else { 0.0 };
                        row.mapv_inplace(|v| v * k);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let m = x.nrows() as f64;
                    let g = Tensor::from_shape_fn(x.raw_dim(), |(_, j)| gout[[0, j]] / m);
                    acc(&mut grads, *a, g);
                }
                Op::MaxRows(a) => {
                    let x = self.value(*a);
                    let mut g = Tensor::zeros(x.raw_dim());
                    for j in 0..x.ncols() {
                        let mut best = 0;
                        for i in 1..x.nrows() {
                            if x[[i, j]] > x[[best, j]] {
                                best = i;
                            }
                        }
                        g[[best, j]] = gout[[0, j]];
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SumAll(a) => {
                    let g = Tensor::from_elem(self.value(*a).raw_dim(), gout[[0, 0]]);
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, gout.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, gout.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::Rearrange(a, src) => {
                    let x = self.value(*a);
                    let mut flat = vec![0.0; x.len()];
                    for (o, &i) in gout.iter().zip(src.iter()) {
                        flat[i] += o;
                    }
                    acc(&mut grads, *a, Tensor::from_shape_vec(x.raw_dim(), flat).expect("shape"));
                }
                Op::Custom(inputs, backward) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = backward(&gout, &vals, &node.value);
                    assert_eq!(gs.len(), inputs.len(), "custom op returned wrong gradient count");
                    for (v, g) in inputs.iter().zip(gs) {
                        acc(&mut grads, *v, g);
                    }
                }
            }
            // keep the root's own adjoint visible to callers
            if i == root.0 {
                grads[i] = Some(gout);
            }
        }

        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(f: impl Fn(&Tensor) -> f64, grad: &Tensor, x: &Tensor) {
        let h = 1e-5;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let ana = grad.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "entry {idx}: {ana} vs {num}");
        }
    }

    #[test]
    fn matmul_layer_norm_softmax_chain() {
        let x0 = array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.7]];
        let w = array![[0.2, -0.4], [0.9, 0.1], [-0.3, 0.6]];
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let ln = g.layer_norm(xv, 1e-5);
            let wv = g.constant(w.clone());
            let y = g.matmul(ln, wv);
            let y = g.gelu(y);
            let sm = g.softmax_rows(y);
            let sq = g.mul(sm, y);
            let s = g.sum_all(sq);
            (g.scalar(s), g, xv, s)
        };
        let (_, g, xv, s) = f(&x0);
        let grads = g.backward(s);
        fd_check(|x| f(x).0, grads.get(xv).unwrap(), &x0);
    }

    #[test]
    fn rearrange_gather_and_norms() {
        let x0 = array![[0.3, -1.2], [1.1, 0.2], [0.4, 0.9]];
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let sel = g.gather_rows(xv, &[2, 0, 2]);
            let t = g.transpose(sel);
            let n = g.row_norms(t);
            let u = g.normalize_rows(sel);
            let m = g.max_rows(u);
            let a = g.sum_all(n);
            let b = g.sum_all(m);
            let s = g.add(a, b);
            (g.scalar(s), g, xv, s)
        };
        let (_, g, xv, s) = f(&x0);
        let grads = g.backward(s);
        fd_check(|x| f(x).0, grads.get(xv).unwrap(), &x0);
    }

    #[test]
    fn shared_param_accumulates() {
        let w = array![[2.0]];
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.of(&w)[[0, 0]], 4.0);
    }
}
