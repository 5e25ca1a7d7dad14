//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! trainable (`param`) or constant (`constant`); gradients are only
//! propagated into subgraphs that reach a trainable leaf, so the frozen
//! backbone costs a forward matmul plus an input-gradient matmul and never a
//! weight-gradient matmul.
//!
//! Token tensors of shape `(batch, tokens, dim)` are stored flattened as
//! `(batch * tokens, dim)`; ops that need the grouping take it explicitly.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        heads: usize,
        probs: Vec<Vec<Array2<f64>>>,
    },
    EmbedTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    RowDots {
        q: Var,
        keys: Vec<Var>,
    },
    SoftmaxRows(Var),
    MixGroups {
        alpha: Var,
        parts: Vec<Var>,
        group: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    NormalizeCols {
        x: Var,
        norms: Vec<f64>,
    },
    StandardizeCols {
        x: Var,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
    BarlowObjective {
        c: Var,
        beta: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or zeros shaped like `like` when no
    /// path from `v` reached the loss.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).t().dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulTn(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Adds a `(1, n)` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise LayerNorm with `(1, n)` affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            Zip::from(xhat.row_mut(r))
                .and(row)
                .for_each(|o, &v| *o = (v - mean) * inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product self-attention core. `qkv` has shape
    /// `(batch * tokens, 3 * dim)` laid out as `[q | k | v]`; returns the
    /// concatenated head outputs `(batch * tokens, dim)`.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Var {
        let input = self.value(qkv);
        let (rows, three_dim) = input.dim();
        let dim = three_dim / 3;
        let tokens = rows / batch;
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let per_image: Vec<(Array2<f64>, Vec<Array2<f64>>)> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let block = input.slice(s![b * tokens..(b + 1) * tokens, ..]);
                let mut out = Array2::zeros((tokens, dim));
                let mut probs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let c = h * head_dim;
                    let q = block.slice(s![.., c..c + head_dim]);
                    let k = block.slice(s![.., dim + c..dim + c + head_dim]);
                    let v = block.slice(s![.., 2 * dim + c..2 * dim + c + head_dim]);
                    let mut p = q.dot(&k.t()) * scale;
                    softmax_rows_inplace(&mut p);
                    out.slice_mut(s![.., c..c + head_dim]).assign(&p.dot(&v));
                    probs.push(p);
                }
                (out, probs)
            })
            .collect();
        let mut out = Array2::zeros((rows, dim));
        let mut probs = Vec::with_capacity(batch);
        for (b, (o, p)) in per_image.into_iter().enumerate() {
            out.slice_mut(s![b * tokens..(b + 1) * tokens, ..]).assign(&o);
            probs.push(p);
        }
        let rg = self.rg(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Prepends the class token to every image's projected patches and adds
    /// position embeddings. `patches` is `(batch * T, dim)`, `cls` is
    /// `(1, dim)`, `pos` is `(T + 1, dim)`.
    pub fn embed_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Var {
        let pv = self.value(patches);
        let cv = self.value(cls);
        let posv = self.value(pos);
        let (rows, dim) = pv.dim();
        let t = rows / batch;
        let mut out = Array2::zeros((batch * (t + 1), dim));
        for b in 0..batch {
            let base = b * (t + 1);
            out.row_mut(base).assign(&(&cv.row(0) + &posv.row(0)));
            let mut body = out.slice_mut(s![base + 1..base + 1 + t, ..]);
            body.assign(&pv.slice(s![b * t..(b + 1) * t, ..]));
            body += &posv.slice(s![1.., ..]);
        }
        let rg = self.rg(patches) || self.rg(cls) || self.rg(pos);
        self.push(
            out,
            Op::EmbedTokens {
                patches,
                cls,
                pos,
                batch,
            },
            rg,
        )
    }

    /// Mean over consecutive groups of `group` rows: `(B * group, d) -> (B, d)`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (rows, dim) = xv.dim();
        let b = rows / group;
        let mut out = Array2::zeros((b, dim));
        for i in 0..b {
            let m = xv
                .slice(s![i * group..(i + 1) * group, ..])
                .mean_axis(Axis(0))
                .expect("non-empty group");
            out.row_mut(i).assign(&m);
        }
        let rg = self.rg(x);
        self.push(out, Op::GroupMean { x, group }, rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let out = self.value(x).select(Axis(0), &rows);
        let rg = self.rg(x);
        self.push(out, Op::SelectRows { x, rows }, rg)
    }

    /// `out[b, i] = <q[b], keys[i][b]>`.
    pub fn row_dots(&mut self, q: Var, keys: &[Var]) -> Var {
        let qv = self.value(q);
        let (b, _) = qv.dim();
        let mut out = Array2::zeros((b, keys.len()));
        for (i, &k) in keys.iter().enumerate() {
            let kv = self.value(k);
            for r in 0..b {
                out[[r, i]] = qv.row(r).dot(&kv.row(r));
            }
        }
        let rg = self.rg(q) || keys.iter().any(|&k| self.rg(k));
        self.push(
            out,
            Op::RowDots {
                q,
                keys: keys.to_vec(),
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        softmax_rows_inplace(&mut out);
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Convex mixing of token tensors: `out[r] = Σ_i alpha[r / group, i] * parts[i][r]`.
    pub fn mix_groups(&mut self, alpha: Var, parts: &[Var], group: usize) -> Var {
        let av = self.value(alpha);
        let (rows, dim) = self.value(parts[0]).dim();
        let mut out = Array2::zeros((rows, dim));
        for (i, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            for r in 0..rows {
                let w = av[[r / group, i]];
                out.row_mut(r).scaled_add(w, &pv.row(r));
            }
        }
        let rg = self.rg(alpha) || parts.iter().any(|&p| self.rg(p));
        self.push(
            out,
            Op::MixGroups {
                alpha,
                parts: parts.to_vec(),
                group,
            },
            rg,
        )
    }

    /// L2-normalizes each row. Callers must reject zero rows beforehand.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut out = xv.clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(x);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    /// Divides each column by `sqrt(Σ x² + eps)`.
    pub fn normalize_cols(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .columns()
            .into_iter()
            .map(|c| (c.dot(&c) + eps).sqrt())
            .collect();
        let mut out = xv.clone();
        for (mut col, &n) in out.columns_mut().into_iter().zip(&norms) {
            col.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(x);
        self.push(out, Op::NormalizeCols { x, norms }, rg)
    }

    /// Per-column standardization over the batch (biased variance), i.e.
    /// batch-norm without affine parameters.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, _) = xv.dim();
        let mut out = xv.clone();
        let mut inv_std = Vec::new();
        for mut col in out.columns_mut() {
            let mean = col.sum() / rows as f64;
            col.mapv_inplace(|v| v - mean);
            let var = col.dot(&col) / rows as f64;
            let inv = 1.0 / (var + eps).sqrt();
            col.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(out, Op::StandardizeCols { x, inv_std }, rg)
    }

    /// Mean softmax cross-entropy of `logits` (B, K) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let mut probs = self.value(logits).clone();
        softmax_rows_inplace(&mut probs);
        let b = labels.len() as f64;
        let lv = self.value(logits);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let out = Array2::from_elem((1, 1), loss / b);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `Σ_n (1 - C_nn)² + beta Σ_{n≠m} C_nm²` for a square matrix `C`.
    pub fn barlow_objective(&mut self, c: Var, beta: f64) -> Var {
        let cv = self.value(c);
        let mut loss = 0.0;
        for ((i, j), &v) in cv.indexed_iter() {
            if i == j {
                loss += (1.0 - v) * (1.0 - v);
            } else {
                loss += beta * v * v;
            }
        }
        let rg = self.rg(c);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::BarlowObjective { c, beta },
            rg,
        )
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulTn(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, self.value(*b).dot(&g.t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).dot(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = self.value(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, dg);
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = g * self.value(*gamma);
                    self.accumulate(grads, *x, normalize_backward(&dxhat, xhat, inv_std, Axis(1)));
                }
            }
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            } => {
                let input = self.value(*qkv);
                let (rows, three_dim) = input.dim();
                let dim = three_dim / 3;
                let tokens = rows / batch;
                let head_dim = dim / heads;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let blocks: Vec<Array2<f64>> = (0..*batch)
                    .into_par_iter()
                    .map(|b| {
                        let block = input.slice(s![b * tokens..(b + 1) * tokens, ..]);
                        let gblock = g.slice(s![b * tokens..(b + 1) * tokens, ..]);
                        let mut d = Array2::zeros((tokens, three_dim));
                        for h in 0..*heads {
                            let c = h * head_dim;
                            let q = block.slice(s![.., c..c + head_dim]);
                            let k = block.slice(s![.., dim + c..dim + c + head_dim]);
                            let v = block.slice(s![.., 2 * dim + c..2 * dim + c + head_dim]);
                            let go = gblock.slice(s![.., c..c + head_dim]);
                            let p = &probs[b][h];
                            let dp = go.dot(&v.t());
                            let dv = p.t().dot(&go);
                            let mut ds = dp;
                            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = drow.dot(&prow);
                                Zip::from(&mut drow)
                                    .and(&prow)
                                    .for_each(|d, &pv| *d = pv * (*d - dot) * scale);
                            }
                            d.slice_mut(s![.., c..c + head_dim]).assign(&ds.dot(&k));
                            d.slice_mut(s![.., dim + c..dim + c + head_dim])
                                .assign(&ds.t().dot(&q));
                            d.slice_mut(s![.., 2 * dim + c..2 * dim + c + head_dim])
                                .assign(&dv);
                        }
                        d
                    })
                    .collect();
                let mut d = Array2::zeros((rows, three_dim));
                for (b, blk) in blocks.into_iter().enumerate() {
                    d.slice_mut(s![b * tokens..(b + 1) * tokens, ..]).assign(&blk);
                }
                self.accumulate(grads, *qkv, d);
            }
            Op::EmbedTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let t1 = g.nrows() / batch;
                let dim = g.ncols();
                if self.rg(*patches) {
                    let mut d = Array2::zeros((batch * (t1 - 1), dim));
                    for b in 0..*batch {
                        d.slice_mut(s![b * (t1 - 1)..(b + 1) * (t1 - 1), ..])
                            .assign(&g.slice(s![b * t1 + 1..(b + 1) * t1, ..]));
                    }
                    self.accumulate(grads, *patches, d);
                }
                if self.rg(*cls) || self.rg(*pos) {
                    let mut dpos = Array2::zeros((t1, dim));
                    for b in 0..*batch {
                        dpos += &g.slice(s![b * t1..(b + 1) * t1, ..]);
                    }
                    if self.rg(*cls) {
                        self.accumulate(grads, *cls, dpos.slice(s![0..1, ..]).to_owned());
                    }
                    self.accumulate(grads, *pos, dpos);
                }
            }
            Op::GroupMean { x, group } => {
                let mut d = Array2::zeros((g.nrows() * group, g.ncols()));
                let inv = 1.0 / *group as f64;
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    row.scaled_add(inv, &g.row(r / group));
                }
                self.accumulate(grads, *x, d);
            }
            Op::SelectRows { x, rows } => {
                let mut d = Array2::zeros(self.shape(*x));
                for (i, &r) in rows.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row += &g.row(i);
                }
                self.accumulate(grads, *x, d);
            }
            Op::RowDots { q, keys } => {
                let qv = self.value(*q);
                if self.rg(*q) {
                    let mut dq = Array2::zeros(qv.dim());
                    for (i, &k) in keys.iter().enumerate() {
                        let kv = self.value(k);
                        for r in 0..qv.nrows() {
                            dq.row_mut(r).scaled_add(g[[r, i]], &kv.row(r));
                        }
                    }
                    self.accumulate(grads, *q, dq);
                }
                for (i, &k) in keys.iter().enumerate() {
                    if self.rg(k) {
                        let mut dk = Array2::zeros(qv.dim());
                        for r in 0..qv.nrows() {
                            dk.row_mut(r).scaled_add(g[[r, i]], &qv.row(r));
                        }
                        self.accumulate(grads, k, dk);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &yv| *d -= yv * s);
                }
                self.accumulate(grads, *x, d);
            }
            Op::MixGroups {
                alpha,
                parts,
                group,
            } => {
                let av = self.value(*alpha);
                if self.rg(*alpha) {
                    let mut da = Array2::zeros(av.dim());
                    for (i, &p) in parts.iter().enumerate() {
                        let pv = self.value(p);
                        for r in 0..pv.nrows() {
                            da[[r / group, i]] += g.row(r).dot(&pv.row(r));
                        }
                    }
                    self.accumulate(grads, *alpha, da);
                }
                for (i, &p) in parts.iter().enumerate() {
                    if self.rg(p) {
                        let mut dp = g.clone();
                        for (r, mut row) in dp.rows_mut().into_iter().enumerate() {
                            row *= av[[r / group, i]];
                        }
                        self.accumulate(grads, p, dp);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let dot = drow.dot(&y.row(r));
                    drow.scaled_add(-dot, &y.row(r));
                    drow.mapv_inplace(|v| v / norms[r]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::NormalizeCols { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for (c, mut dcol) in d.columns_mut().into_iter().enumerate() {
                    let dot = dcol.dot(&y.column(c));
                    dcol.scaled_add(-dot, &y.column(c));
                    dcol.mapv_inplace(|v| v / norms[c]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::StandardizeCols { x, inv_std } => {
                let d = normalize_backward(g, &node.value, inv_std, Axis(0));
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g[[0, 0]] / labels.len() as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[[r, y]] -= 1.0;
                }
                d *= scale;
                self.accumulate(grads, *logits, d);
            }
            Op::BarlowObjective { c, beta } => {
                let gs = g[[0, 0]];
                let cv = self.value(*c);
                let mut d = Array2::zeros(cv.dim());
                for ((i, j), &v) in cv.indexed_iter() {
                    d[[i, j]] = gs * if i == j { -2.0 * (1.0 - v) } else { 2.0 * beta * v };
                }
                self.accumulate(grads, *c, d);
            }
        }
    }
}

/// Backward of `y = (x - mean) * inv_std` where statistics run along
/// `axis` (rows for LayerNorm, columns for batch standardization):
/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))`.
fn normalize_backward(
    dy: &Array2<f64>,
    y: &Array2<f64>,
    inv_std: &[f64],
    axis: Axis,
) -> Array2<f64> {
    let mut dx = dy.clone();
    let lanes = |m: &Array2<f64>| -> usize {
        if axis == Axis(1) {
            m.nrows()
        } else {
            m.ncols()
        }
    };
    for i in 0..lanes(dy) {
        let (dyl, yl): (ArrayView2<f64>, ArrayView2<f64>) = if axis == Axis(1) {
            (dy.slice(s![i..i + 1, ..]), y.slice(s![i..i + 1, ..]))
        } else {
            (dy.slice(s![.., i..i + 1]), y.slice(s![.., i..i + 1]))
        };
        let n = dyl.len() as f64;
        let mean_dy = dyl.sum() / n;
        let mean_dyy = (&dyl * &yl).sum() / n;
        let inv = inv_std[i];
        let mut out = if axis == Axis(1) {
            dx.slice_mut(s![i..i + 1, ..])
        } else {
            dx.slice_mut(s![.., i..i + 1])
        };
        Zip::from(&mut out)
            .and(&yl)
            .for_each(|d, &yv| *d = inv * (*d - mean_dy - yv * mean_dyy));
    }
    dx
}
