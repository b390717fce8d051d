//! A small reverse-mode tape over dense row-major matrices.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Only the operations the operator network needs
//! are provided; multi-head attention and layer normalization are fused
//! nodes with hand-written adjoints.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    ConcatRows(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// Adds a `1 x n` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + &self.value(bias).row(0);
        self.push(value, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `x * sigmoid(x)`, smooth everywhere.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a))
    }

    /// Row-wise layer normalization with affine `1 x n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut normed = Array2::zeros(xv.dim());
        let mut inv_std = Array1::zeros(xv.nrows());
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            Zip::from(normed.row_mut(i)).and(row).for_each(|o, &v| *o = (v - mean) * is);
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let value = &normed * &g + &b;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `n x h`, `k` and `v` are `m x h`; columns are split into `heads`
    /// contiguous groups. Every query row attends to all key rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let h = qv.ncols();
        assert!(heads > 0 && h % heads == 0, "embedding width must divide into heads");
        assert_eq!(kv.ncols(), h);
        assert_eq!(vv.dim(), kv.dim());
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), h));
        let mut probs = Vec::with_capacity(heads);
        for head in 0..heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t());
            scores *= scale;
            softmax_rows(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("matching column counts");
        self.push(value, Op::ConcatRows(a, b))
    }

    /// Propagate `seed = d(loss)/d(out)` back through the tape.
    pub fn backward(&self, out: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.value(out).dim(), "seed shape must match output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Silu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let sg = sigmoid(x);
                        *gv *= sg * (1.0 + x * (1.0 - sg));
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).row(0).to_owned();
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gn = &g * &gam;
                    let n = normed.ncols() as f64;
                    let mut gx = Array2::zeros(normed.dim());
                    for i in 0..normed.nrows() {
                        let gr = gn.row(i);
                        let nr = normed.row(i);
                        let mean_g = gr.sum() / n;
                        let mean_gn = gr.dot(&nr) / n;
                        Zip::from(gx.row_mut(i))
                            .and(gr)
                            .and(nr)
                            .for_each(|o, &gi, &ni| *o = inv_std[i] * (gi - mean_g - ni * mean_gn));
                    }
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let h = qv.ncols();
                    let dh = h / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    for (head, p) in probs.iter().enumerate() {
                        let cols = s![.., head * dh..(head + 1) * dh];
                        let go = g.slice(cols);
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        let gp = go.dot(&vv.slice(cols).t());
                        let mut gs = gp;
                        for (mut grow, prow) in gs.outer_iter_mut().zip(p.outer_iter()) {
                            let inner = grow.dot(&prow);
                            Zip::from(&mut grow)
                                .and(prow)
                                .for_each(|gval, &pv| *gval = pv * (*gval - inner) * scale);
                        }
                        gq.slice_mut(cols).assign(&gs.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&gs.t().dot(&qv.slice(cols)));
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    accumulate(&mut grads, *a, g.slice(s![..na, ..]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![na.., ..]).to_owned());
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.outer_iter_mut() {
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        row.mapv_inplace(|s| {
            let e = (s - top).exp();
            total += e;
            e
        });
        row /= total;
    }
}

/// Gradients of every tape node reachable from the seeded output.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` if the leaf did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

/// Straight-line scaled dot-product attention, used as an independent check.
pub fn reference_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    heads: usize,
) -> Array2<f64> {
    let (n, h) = q.dim();
    let m = k.nrows();
    let dh = h / heads;
    let mut out = Array2::zeros((n, h));
    for head in 0..heads {
        let off = head * dh;
        for i in 0..n {
            let mut w = vec![0.0; m];
            for (j, wj) in w.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[[i, off + c]] * k[[j, off + c]];
                }
                *wj = dot / (dh as f64).sqrt();
            }
            let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = w.iter().map(|s| (s - top).exp()).sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += (w[j] - top).exp() / z * v[[j, off + c]];
                }
                out[[i, off + c]] = acc;
            }
        }
    }
    out
}
