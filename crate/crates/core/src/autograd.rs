//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! Every operation appends a node; `backward` walks the tape in reverse.
//! Nodes whose inputs are all untracked are themselves untracked and receive
//! no gradient, which is how frozen parameters stay out of the update.

use crate::tensor::Mat;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropySum {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax; with `causal`, entries right of the diagonal are zero.
pub fn softmax_rows(x: &Mat, causal: bool) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let limit = if causal { (r + 1).min(x.cols()) } else { x.cols() };
        let row = &x.row(r)[..limit];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in &mut orow[..limit] {
            *o /= total;
        }
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Input leaf. `tracked` leaves receive gradients.
    pub fn leaf(&mut self, value: Mat, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), r.cols());
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::max);
        self.push(v, Op::Maximum(a, b), &[a, b])
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::min);
        self.push(v, Op::Minimum(a, b), &[a, b])
    }

    /// Per-row layer normalization with `1 x C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut xhat = Mat::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let v = softmax_rows(self.value(x), causal);
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows(), width);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let out = Mat::from_vec(count, c, xv.data()[start * c..(start + count) * c].to_vec());
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows);
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols);
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// Sum over `(row, class)` pairs of `-log softmax(logits[row])[class]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let probs = softmax_rows(self.value(logits), false);
        let lv = self.value(logits);
        let total: f64 = targets
            .iter()
            .map(|&(r, c)| {
                let row = lv.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[c]
            })
            .sum();
        self.push(
            Mat::scalar(total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Mat::full(rv.rows(), rv.cols(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, d: Mat| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(self.value(*b)));
                    acc(*b, self.value(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.matmul(self.value(*b)));
                    acc(*b, g.t_matmul(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    let mut col_sum = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in col_sum.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*row, col_sum);
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    acc(*a, g.zip_map(bv, |x, y| x / y));
                    let ratio = self.value(*a).zip_map(bv, |x, y| x / (y * y));
                    acc(*b, g.zip_map(&ratio, |x, r| -x * r));
                }
                Op::Scale(a, k) => acc(*a, g.scale(*k)),
                Op::AddScalar(a) => acc(*a, g),
                Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
                Op::Abs(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d * x.signum() * (x != 0.0) as u8 as f64)),
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let is_max = matches!(node.op, Op::Maximum(..));
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let pick_a = av.zip_map(bv, |x, y| {
                        let chosen = if is_max { x >= y } else { x <= y };
                        chosen as u8 as f64
                    });
                    acc(*a, g.zip_map(&pick_a, |d, m| d * m));
                    acc(*b, g.zip_map(&pick_a, |d, m| d * (1.0 - m)));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let (n, c) = g.shape();
                    let mut dgamma = Mat::zeros(1, c);
                    let mut dbeta = Mat::zeros(1, c);
                    let mut dx = Mat::zeros(n, c);
                    for r in 0..n {
                        let grow = g.row(r);
                        let xh = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            dgamma.row_mut(0)[j] += grow[j] * xh[j];
                            dbeta.row_mut(0)[j] += grow[j];
                            let d = grow[j] * gv.row(0)[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let k = inv_std[r] / c as f64;
                        for j in 0..c {
                            let d = grow[j] * gv.row(0)[j];
                            dx.row_mut(r)[j] = k * (c as f64 * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                    acc(*x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gd), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gd - dot);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*table, dt);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*x, dx);
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    dx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    acc(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut d = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(*p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).rows();
                        let d = Mat::from_vec(n, c, g.data()[off * c..(off + n) * c].to_vec());
                        off += n;
                        acc(*p, d);
                    }
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    acc(*x, Mat::full(xv.rows(), xv.cols(), g.to_scalar()));
                }
                Op::CrossEntropySum {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.to_scalar();
                    let mut d = Mat::zeros(probs.rows(), probs.cols());
                    for &(r, c) in targets {
                        for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o += scale * p;
                        }
                        d.row_mut(r)[c] -= scale;
                    }
                    acc(*logits, d);
                }
            }
        }
        Gradients { grads }
    }
}
