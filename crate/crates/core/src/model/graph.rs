//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameter nodes remember which stored
//! tensor they came from so [`Graph::backward`] can scatter gradients into a [`Gradients`]
//! buffer; a parameter used twice (the tied token embedding) simply accumulates twice.

use super::params::{ParamId, ParamStore};
use super::tensor::{axpy, dot, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    WeightedCe {
        logits: Var,
        targets: Vec<usize>,
        coeffs: Vec<f64>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Per-parameter gradient buffers, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .tensors()
                .iter()
                .map(|t| Matrix::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Matrix::norm_sq).sum::<f64>().sqrt()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shape");
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut value = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((1, value.cols), r.shape(), "add_row shape");
        for i in 0..value.rows {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for x in value.data.iter_mut() {
            let u = *x;
            *x = 0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh());
        }
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            let xh = xhat.row_mut(i);
            for j in 0..cols {
                xh[j] = (r[j] - mean) * s;
            }
            let o = out.row_mut(i);
            for j in 0..cols {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention on already-projected `q`, `k`, `v`.
    ///
    /// With `causal`, query row `i` sees key rows `j <= i + (Lk − Lq)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qm.shape();
        let lk = km.rows;
        assert_eq!(km.cols, d, "attention key width");
        assert_eq!(vm.shape(), (lk, d), "attention value shape");
        assert_eq!(d % heads, 0, "attention heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let offset = lk as isize - lq as isize;
        let mut out = Matrix::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(lq, lk);
            for i in 0..lq {
                let visible = if causal {
                    ((i as isize + offset + 1).max(0) as usize).min(lk)
                } else {
                    lk
                };
                let qi = &qm.row(i)[cols.clone()];
                let pr = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for (j, x) in pr[..visible].iter_mut().enumerate() {
                    *x = dot(qi, &km.row(j)[cols.clone()]) * scale;
                    max = max.max(*x);
                }
                let mut sum = 0.0;
                for x in pr[..visible].iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                if sum > 0.0 {
                    for x in pr[..visible].iter_mut() {
                        *x /= sum;
                    }
                }
                let o = &mut out.row_mut(i)[cols.clone()];
                for (j, &w) in pr[..visible].iter().enumerate() {
                    axpy(w, &vm.row(j)[cols.clone()], o);
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// `Σᵢ coeffᵢ · CE(logitsᵢ, targetᵢ)` as a `1×1` node.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        coeffs: &[f64],
    ) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len(), "one target per logit row");
        assert_eq!(coeffs.len(), targets.len());
        let mut probs = Matrix::zeros(lm.rows, lm.cols);
        let mut total = 0.0;
        for i in 0..lm.rows {
            let r = lm.row(i);
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pr = probs.row_mut(i);
            let mut sum = 0.0;
            for (p, &x) in pr.iter_mut().zip(r) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in pr.iter_mut() {
                *p /= sum;
            }
            if coeffs[i] != 0.0 {
                let nll = max + sum.ln() - r[targets[i]];
                total += coeffs[i] * nll;
            }
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                coeffs: coeffs.to_vec(),
                probs,
            },
        )
    }

    /// Backpropagates from a `1×1` root, accumulating into `grads`.
    pub fn backward(&self, root: Var, grads: &mut Gradients) {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward needs a scalar root"
        );
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.tensors[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_tn(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (s, x) in gr.data.iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    acc(&mut adj, *row, gr);
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale(*s);
                    acc(&mut adj, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &u) in ga.data.iter_mut().zip(&x.data) {
                        let inner = GELU_C * (u + GELU_A * u * u * u);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u);
                        *gv *= d;
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gm = &self.value(*gamma).data;
                    let (rows, cols) = xhat.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gb = Matrix::zeros(1, cols);
                    let mut dxh = vec![0.0; cols];
                    for (i, &rs) in rstd.iter().enumerate().take(rows) {
                        let gy = g.row(i);
                        let xh = xhat.row(i);
                        for j in 0..cols {
                            gg.data[j] += gy[j] * xh[j];
                            gb.data[j] += gy[j];
                            dxh[j] = gy[j] * gm[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxh, xh) / cols as f64;
                        let out = gx.row_mut(i);
                        for j in 0..cols {
                            out[j] = rs * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(&mut adj, *x, gx);
                    acc(&mut adj, *gamma, gg);
                    acc(&mut adj, *beta, gb);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let (lq, d) = qm.shape();
                    let lk = km.rows;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Matrix::zeros(lq, d);
                    let mut gk = Matrix::zeros(lk, d);
                    let mut gv = Matrix::zeros(lk, d);
                    let mut dp = vec![0.0; lk];
                    for (h, p) in probs.iter().enumerate() {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..lq {
                            let go = &g.row(i)[cols.clone()];
                            let pr = p.row(i);
                            let mut inner = 0.0;
                            for j in 0..lk {
                                if pr[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                dp[j] = dot(go, &vm.row(j)[cols.clone()]);
                                inner += dp[j] * pr[j];
                                axpy(pr[j], go, &mut gv.row_mut(j)[cols.clone()]);
                            }
                            let qi = &qm.row(i)[cols.clone()];
                            for j in 0..lk {
                                if pr[j] == 0.0 {
                                    continue;
                                }
                                let ds = pr[j] * (dp[j] - inner) * scale;
                                axpy(
                                    ds,
                                    &km.row(j)[cols.clone()],
                                    &mut gq.row_mut(i)[cols.clone()],
                                );
                                axpy(ds, qi, &mut gk.row_mut(j)[cols.clone()]);
                            }
                        }
                    }
                    acc(&mut adj, *q, gq);
                    acc(&mut adj, *k, gk);
                    acc(&mut adj, *v, gv);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows, t.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    acc(&mut adj, *table, gt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let slice = g.data[start * c..(start + r) * c].to_vec();
                        acc(&mut adj, p, Matrix::from_vec(r, c, slice));
                        start += r;
                    }
                }
                Op::WeightedCe {
                    logits,
                    targets,
                    coeffs,
                    probs,
                } => {
                    let up = g.data[0];
                    let mut gl = Matrix::zeros(probs.rows, probs.cols);
                    for i in 0..probs.rows {
                        let c = coeffs[i] * up;
                        if c == 0.0 {
                            continue;
                        }
                        let out = gl.row_mut(i);
                        for (o, p) in out.iter_mut().zip(probs.row(i)) {
                            *o = c * p;
                        }
                        out[targets[i]] -= c;
                    }
                    acc(&mut adj, *logits, gl);
                }
            }
        }
    }
}
