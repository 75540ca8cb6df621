//! Reverse-mode autodiff over 2-D arrays.
//!
//! A [`Graph`] is a define-by-run tape: every op computes its value eagerly
//! and records enough to replay the chain rule backwards. All tensors are
//! `Array2` — vectors are 1×w or w×1 rows/columns — which keeps the op set
//! small. Shape mismatches inside the graph are programmer errors and panic;
//! the public model operations validate shapes and return typed errors
//! before touching the tape.
//!
//! Every op's backward pass is checked against central finite differences in
//! the tests at the bottom of this module.

use crate::{FeatureMatrix, Real};
use ndarray::{s, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<F: Real> {
    /// Leaf tensor. `trainable` only controls which gradients callers harvest.
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Matrix plus a 1×w row broadcast over every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, F),
    RowSoftmax(NodeId),
    Gelu(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
    /// Row-wise RMS normalization with a learnable 1×w gain.
    RmsNorm { x: NodeId, gain: NodeId, eps: F },
    /// Sum of squared entries, a 1×1 scalar.
    SumSq(NodeId),
    /// Mean squared error between two same-shape matrices, 1×1.
    Mse(NodeId, NodeId),
    /// Mean next-token cross entropy: row i of logits scored against targets[i].
    CrossEntropyMean(NodeId, Vec<usize>),
}

struct Node<F: Real> {
    value: FeatureMatrix<F>,
    op: Op<F>,
}

/// Define-by-run tape.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: FeatureMatrix<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &FeatureMatrix<F> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf tensor; gradients flow into it like any other leaf.
    pub fn leaf(&mut self, value: FeatureMatrix<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        assert_eq!(ac, br, "matmul inner dims {ac} vs {br}");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        debug_assert_eq!(value.dim(), (ar, bc));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dims(a), self.dims(b), "add shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (_, mc) = self.dims(m);
        let (rr, rc) = self.dims(row);
        assert_eq!(rr, 1, "bias must be a single row");
        assert_eq!(mc, rc, "bias width mismatch");
        let value = &self.nodes[m.0].value + &self.nodes[row.0].value.row(0);
        self.push(value, Op::AddRow(m, row))
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.iter().cloned().sum::<F>();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::RowSoftmax(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(value, Op::Gelu(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let (rows, cols) = self.dims(a);
        let mut value = Array2::zeros((indices.len(), cols));
        for (out_i, &src_i) in indices.iter().enumerate() {
            assert!(src_i < rows, "gather index {src_i} out of {rows} rows");
            value
                .row_mut(out_i)
                .assign(&self.nodes[a.0].value.row(src_i));
        }
        self.push(value, Op::GatherRows(a, indices))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "concat needs at least one part");
        let cols = self.dims(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut value = Array2::zeros((total, cols));
        let mut at = 0;
        for &p in &parts {
            let (pr, pc) = self.dims(p);
            assert_eq!(pc, cols, "concat_rows width mismatch");
            value
                .slice_mut(s![at..at + pr, ..])
                .assign(&self.nodes[p.0].value);
            at += pr;
        }
        self.push(value, Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "concat needs at least one part");
        let rows = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut value = Array2::zeros((rows, total));
        let mut at = 0;
        for &p in &parts {
            let (pr, pc) = self.dims(p);
            assert_eq!(pr, rows, "concat_cols height mismatch");
            value
                .slice_mut(s![.., at..at + pc])
                .assign(&self.nodes[p.0].value);
            at += pc;
        }
        self.push(value, Op::ConcatCols(parts))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (rows, _) = self.dims(a);
        assert!(start <= end && end <= rows, "row slice out of range");
        let value = self.nodes[a.0].value.slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (_, cols) = self.dims(a);
        assert!(start <= end && end <= cols, "col slice out of range");
        let value = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    /// Row-major reshape preserving element count.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let (ar, ac) = self.dims(a);
        assert_eq!(ar * ac, rows * cols, "reshape element count mismatch");
        let flat: Vec<F> = self.nodes[a.0].value.iter().cloned().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).unwrap();
        self.push(value, Op::Reshape(a))
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: F) -> NodeId {
        let (_, cols) = self.dims(x);
        let (gr, gc) = self.dims(gain);
        assert_eq!((gr, gc), (1, cols), "gain must be 1×width");
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let mut value = xv.clone();
        let w = F::from_f64(cols as f64);
        for mut row in value.rows_mut() {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / w;
            let r = (ms + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = gv[[0, j]] * *v / r;
            }
        }
        self.push(value, Op::RmsNorm { x, gain, eps })
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a.0].value.iter().map(|&v| v * v).sum::<F>();
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::SumSq(a))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dims(a), self.dims(b), "mse shape mismatch");
        let (r, c) = self.dims(a);
        let n = F::from_f64((r * c) as f64);
        let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let total = diff.iter().map(|&v| v * v).sum::<F>() / n;
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::Mse(a, b))
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let (rows, cols) = self.dims(logits);
        assert_eq!(rows, targets.len(), "one target per logits row");
        let lv = &self.nodes[logits.0].value;
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < cols, "target {t} out of {cols} classes");
            let row = lv.row(i);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            total = total + (lse - row[t]);
        }
        let value = Array2::from_elem((1, 1), total / F::from_f64(rows as f64));
        self.push(value, Op::CrossEntropyMean(logits, targets))
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Run the chain rule backwards from `loss` (which must be 1×1) and
    /// return per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients<F> {
        assert_eq!(self.dims(loss), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<FeatureMatrix<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.unwrap_or_else(|| Array2::zeros(self.nodes[i].value.dim())))
                .collect(),
        }
    }

    fn accumulate(&self, i: usize, g: &FeatureMatrix<F>, grads: &mut [Option<FeatureMatrix<F>>]) {
        let add_to = |grads: &mut [Option<FeatureMatrix<F>>], id: NodeId, delta: FeatureMatrix<F>| {
            match &mut grads[id.0] {
                Some(existing) => *existing = &*existing + &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                add_to(grads, *a, g.dot(&bv.t()));
                add_to(grads, *b, av.t().dot(g));
            }
            Op::Transpose(a) => add_to(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddRow(m, row) => {
                add_to(grads, *m, g.clone());
                let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *row, col_sum);
            }
            Op::Scale(a, s) => add_to(grads, *a, g.mapv(|v| v * *s)),
            Op::RowSoftmax(a) => {
                // dx = y ⊙ (g − rowsum(g ⊙ y))
                let y = &self.nodes[i].value;
                let mut dx = g * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.iter().cloned().sum::<F>();
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d = *d - dot * yv;
                    }
                }
                add_to(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let xv = &self.nodes[a.0].value;
                let dx = ndarray::Zip::from(g)
                    .and(xv)
                    .map_collect(|&gv, &x| gv * gelu_grad_scalar(x));
                add_to(grads, *a, dx);
            }
            Op::GatherRows(a, indices) => {
                let mut dx: FeatureMatrix<F> = Array2::zeros(self.nodes[a.0].value.dim());
                for (out_i, &src_i) in indices.iter().enumerate() {
                    let mut target = dx.row_mut(src_i);
                    target += &g.row(out_i);
                }
                add_to(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let pr = self.nodes[p.0].value.nrows();
                    add_to(grads, p, g.slice(s![at..at + pr, ..]).to_owned());
                    at += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.ncols();
                    add_to(grads, p, g.slice(s![.., at..at + pc]).to_owned());
                    at += pc;
                }
            }
            Op::SliceRows(a, start, end) => {
                let mut dx: FeatureMatrix<F> = Array2::zeros(self.nodes[a.0].value.dim());
                dx.slice_mut(s![*start..*end, ..]).assign(g);
                add_to(grads, *a, dx);
            }
            Op::SliceCols(a, start, end) => {
                let mut dx: FeatureMatrix<F> = Array2::zeros(self.nodes[a.0].value.dim());
                dx.slice_mut(s![.., *start..*end]).assign(g);
                add_to(grads, *a, dx);
            }
            Op::Reshape(a) => {
                let dim = self.nodes[a.0].value.dim();
                let flat: Vec<F> = g.iter().cloned().collect();
                add_to(grads, *a, Array2::from_shape_vec(dim, flat).unwrap());
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (rows, cols) = xv.dim();
                let w = F::from_f64(cols as f64);
                let mut dx: FeatureMatrix<F> = Array2::zeros((rows, cols));
                let mut dgain: FeatureMatrix<F> = Array2::zeros((1, cols));
                for r_i in 0..rows {
                    let xrow = xv.row(r_i);
                    let grow = g.row(r_i);
                    let ms = xrow.iter().map(|&v| v * v).sum::<F>() / w;
                    let r = (ms + *eps).sqrt();
                    // S = Σ_j g_j · gain_j · x_j
                    let mut s_acc = F::zero();
                    for j in 0..cols {
                        s_acc = s_acc + grow[j] * gv[[0, j]] * xrow[j];
                    }
                    let r3 = r * r * r;
                    for j in 0..cols {
                        dx[[r_i, j]] =
                            grow[j] * gv[[0, j]] / r - xrow[j] * s_acc / (w * r3);
                        dgain[[0, j]] = dgain[[0, j]] + grow[j] * xrow[j] / r;
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gain, dgain);
            }
            Op::SumSq(a) => {
                let s = g[[0, 0]];
                let two = F::from_f64(2.0);
                add_to(grads, *a, self.nodes[a.0].value.mapv(|v| two * v * s));
            }
            Op::Mse(a, b) => {
                let s = g[[0, 0]];
                let (r, c) = self.nodes[a.0].value.dim();
                let scale = F::from_f64(2.0 / (r * c) as f64) * s;
                let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
                add_to(grads, *a, diff.mapv(|v| v * scale));
                add_to(grads, *b, diff.mapv(|v| -v * scale));
            }
            Op::CrossEntropyMean(logits, targets) => {
                let s = g[[0, 0]];
                let lv = &self.nodes[logits.0].value;
                let (rows, cols) = lv.dim();
                let inv_rows = F::from_f64(1.0 / rows as f64);
                let mut dl: FeatureMatrix<F> = Array2::zeros((rows, cols));
                for (r_i, &t) in targets.iter().enumerate() {
                    let row = lv.row(r_i);
                    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
                    let sum = exps.iter().cloned().sum::<F>();
                    for j in 0..cols {
                        let p = exps[j] / sum;
                        let onehot = if j == t { F::one() } else { F::zero() };
                        dl[[r_i, j]] = (p - onehot) * inv_rows * s;
                    }
                }
                add_to(grads, *logits, dl);
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<FeatureMatrix<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, id: NodeId) -> &FeatureMatrix<F> {
        &self.grads[id.0]
    }
}

/// Smooth GELU (tanh approximation).
fn gelu_scalar<F: Real>(x: F) -> F {
    let a = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/π)
    let b = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = a * (x + b * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let a = F::from_f64(0.797_884_560_802_865_4);
    let b = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * a * (F::one() + three * b * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{normal_matrix, rng_from_seed};

    /// Central finite difference of `loss_fn` at `point`, perturbing one leaf.
    /// `loss_fn` rebuilds the whole graph from leaf values.
    fn finite_diff_check<B>(leaves: Vec<Array2<f64>>, build: B)
    where
        B: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let h = 1e-6;
        let eval = |vals: &[Array2<f64>]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| g.leaf(v.clone())).collect();
            let loss = build(&mut g, &ids);
            g.value(loss)[[0, 0]]
        };

        // Analytic gradients.
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|v| g.leaf(v.clone())).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss);

        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.wrt(ids[li]);
            for r in 0..leaf.nrows() {
                for c in 0..leaf.ncols() {
                    let mut plus = leaves.clone();
                    plus[li][[r, c]] += h;
                    let mut minus = leaves.clone();
                    minus[li][[r, c]] -= h;
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let denom = numeric.abs().max(a.abs()).max(1e-8);
                    assert!(
                        (numeric - a).abs() / denom < 1e-5,
                        "leaf {li} [{r},{c}]: numeric={numeric:.10} analytic={a:.10}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = rng_from_seed(1);
        let a = normal_matrix(&mut rng, 3, 4, 0.5);
        let b = normal_matrix(&mut rng, 4, 2, 0.5);
        finite_diff_check(vec![a, b], |g, ids| {
            let p = g.matmul(ids[0], ids[1]);
            g.sum_sq(p)
        });
    }

    #[test]
    fn grad_transpose_add_scale() {
        let mut rng = rng_from_seed(2);
        let a = normal_matrix(&mut rng, 2, 3, 0.5);
        let b = normal_matrix(&mut rng, 3, 2, 0.5);
        finite_diff_check(vec![a, b], |g, ids| {
            let at = g.transpose(ids[0]);
            let sum = g.add(at, ids[1]);
            let scaled = g.scale(sum, 1.7);
            g.sum_sq(scaled)
        });
    }

    #[test]
    fn grad_add_row_bias() {
        let mut rng = rng_from_seed(3);
        let m = normal_matrix(&mut rng, 4, 3, 0.5);
        let bias = normal_matrix(&mut rng, 1, 3, 0.5);
        finite_diff_check(vec![m, bias], |g, ids| {
            let out = g.add_row(ids[0], ids[1]);
            g.sum_sq(out)
        });
    }

    #[test]
    fn grad_row_softmax() {
        let mut rng = rng_from_seed(4);
        let a = normal_matrix(&mut rng, 3, 5, 1.0);
        let w = normal_matrix(&mut rng, 5, 2, 0.5);
        finite_diff_check(vec![a, w], |g, ids| {
            let sm = g.row_softmax(ids[0]);
            let out = g.matmul(sm, ids[1]);
            g.sum_sq(out)
        });
    }

    #[test]
    fn row_softmax_rows_sum_to_one() {
        let mut rng = rng_from_seed(5);
        let a: Array2<f64> = normal_matrix(&mut rng, 6, 9, 3.0);
        let mut g = Graph::new();
        let id = g.leaf(a);
        let sm = g.row_softmax(id);
        for row in g.value(sm).rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn grad_gelu() {
        let mut rng = rng_from_seed(6);
        let a = normal_matrix(&mut rng, 3, 3, 1.5);
        finite_diff_check(vec![a], |g, ids| {
            let y = g.gelu(ids[0]);
            g.sum_sq(y)
        });
    }

    #[test]
    fn grad_gather_concat_slice() {
        let mut rng = rng_from_seed(7);
        let a = normal_matrix(&mut rng, 4, 3, 0.5);
        let b = normal_matrix(&mut rng, 2, 3, 0.5);
        finite_diff_check(vec![a, b], |g, ids| {
            // Gather with a repeated index exercises scatter-add.
            let gathered = g.gather_rows(ids[0], vec![0, 2, 2, 3]);
            let cat = g.concat_rows(vec![gathered, ids[1]]);
            let sliced = g.slice_rows(cat, 1, 5);
            g.sum_sq(sliced)
        });
    }

    #[test]
    fn grad_cols_ops_and_reshape() {
        let mut rng = rng_from_seed(8);
        let a = normal_matrix(&mut rng, 3, 4, 0.5);
        let b = normal_matrix(&mut rng, 3, 2, 0.5);
        finite_diff_check(vec![a, b], |g, ids| {
            let left = g.slice_cols(ids[0], 0, 2);
            let cat = g.concat_cols(vec![left, ids[1]]);
            let reshaped = g.reshape(cat, 4, 3);
            g.sum_sq(reshaped)
        });
    }

    #[test]
    fn grad_rms_norm() {
        let mut rng = rng_from_seed(9);
        let x = normal_matrix(&mut rng, 3, 4, 1.0);
        let gain = normal_matrix(&mut rng, 1, 4, 0.5);
        finite_diff_check(vec![x, gain], |g, ids| {
            let y = g.rms_norm(ids[0], ids[1], 1e-6);
            g.sum_sq(y)
        });
    }

    #[test]
    fn grad_mse() {
        let mut rng = rng_from_seed(10);
        let a = normal_matrix(&mut rng, 2, 3, 0.5);
        let b = normal_matrix(&mut rng, 2, 3, 0.5);
        finite_diff_check(vec![a, b], |g, ids| g.mse(ids[0], ids[1]));
    }

    #[test]
    fn grad_cross_entropy() {
        let mut rng = rng_from_seed(11);
        let logits = normal_matrix(&mut rng, 3, 6, 1.0);
        finite_diff_check(vec![logits], |g, ids| {
            g.cross_entropy_mean(ids[0], vec![1, 5, 0])
        });
    }

    #[test]
    fn grad_fanout_accumulates() {
        // One leaf feeding two branches must receive the sum of both grads.
        let mut rng = rng_from_seed(12);
        let a = normal_matrix(&mut rng, 2, 2, 0.5);
        finite_diff_check(vec![a], |g, ids| {
            let t = g.transpose(ids[0]);
            let sum = g.add(ids[0], t);
            let sq = g.matmul(sum, ids[0]);
            g.sum_sq(sq)
        });
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let logits =
            Array2::from_shape_vec((1, 3), vec![1.0f64, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let id = g.leaf(logits);
        let loss = g.cross_entropy_mean(id, vec![2]);
        let lse = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((g.value(loss)[[0, 0]] - (lse - 3.0)).abs() < 1e-12);
    }
}
