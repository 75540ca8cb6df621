//! Shared transformer building blocks, expressed as graph constructions.
//!
//! Parameter structs own plain matrices; the `*_graph` functions take staged
//! node ids so the same code serves frozen weights (staged as constants) and
//! trainable weights (staged as leaves whose gradients the trainer harvests).

use crate::autodiff::{Graph, NodeId};
use crate::util::normal_matrix;
use crate::Real;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

pub(crate) const RMS_EPS: f64 = 1e-6;
/// Additive mask value; large enough that softmax weights vanish in f32.
pub(crate) const MASK_NEG: f64 = -1e9;

/// Query/key/value/output projection matrices, all width×width.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<F: Real> {
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
}

impl<F: Real> AttentionWeights<F> {
    pub fn init(rng: &mut ChaCha8Rng, width: usize) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        Self {
            wq: normal_matrix(rng, width, width, std),
            wk: normal_matrix(rng, width, width, std),
            wv: normal_matrix(rng, width, width, std),
            wo: normal_matrix(rng, width, width, std),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Array2<F>); 4] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array2<F>); 4] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
    }
}

/// Two-layer feed-forward weights (width → hidden → width).
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<F: Real> {
    pub w1: Array2<F>,
    pub b1: Array2<F>,
    pub w2: Array2<F>,
    pub b2: Array2<F>,
}

impl<F: Real> FfnWeights<F> {
    pub fn init(rng: &mut ChaCha8Rng, width: usize, hidden: usize) -> Self {
        let std1 = 1.0 / (width as f64).sqrt();
        let std2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: normal_matrix(rng, width, hidden, std1),
            b1: Array2::zeros((1, hidden)),
            w2: normal_matrix(rng, hidden, width, std2),
            b2: Array2::zeros((1, width)),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Array2<F>); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array2<F>); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Staged node ids for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

impl AttnNodes {
    pub fn stage<F: Real>(g: &mut Graph<F>, w: &AttentionWeights<F>) -> Self {
        Self {
            wq: g.leaf(w.wq.clone()),
            wk: g.leaf(w.wk.clone()),
            wv: g.leaf(w.wv.clone()),
            wo: g.leaf(w.wo.clone()),
        }
    }
}

/// Staged node ids for one feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FfnNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl FfnNodes {
    pub fn stage<F: Real>(g: &mut Graph<F>, w: &FfnWeights<F>) -> Self {
        Self {
            w1: g.leaf(w.w1.clone()),
            b1: g.leaf(w.b1.clone()),
            w2: g.leaf(w.w2.clone()),
            b2: g.leaf(w.b2.clone()),
        }
    }
}

/// Multi-head scaled-dot-product attention. `q_in` attends over `kv_in`;
/// with `causal` set, query row i only sees key rows ≤ i (requires equal
/// row counts).
pub fn attention_graph<F: Real>(
    g: &mut Graph<F>,
    q_in: NodeId,
    kv_in: NodeId,
    w: AttnNodes,
    heads: usize,
    causal: bool,
) -> NodeId {
    let width = g.value(q_in).ncols();
    assert_eq!(width % heads, 0, "width must divide into heads");
    let head_dim = width / heads;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());

    let q = g.matmul(q_in, w.wq);
    let k = g.matmul(kv_in, w.wk);
    let v = g.matmul(kv_in, w.wv);

    let mask = causal.then(|| {
        let n = g.value(q_in).nrows();
        assert_eq!(
            n,
            g.value(kv_in).nrows(),
            "causal attention requires self-attention shapes"
        );
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                m[[i, j]] = F::from_f64(MASK_NEG);
            }
        }
        g.leaf(m)
    });

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let raw = g.matmul(qh, kt);
        let mut logits = g.scale(raw, scale);
        if let Some(m) = mask {
            logits = g.add(logits, m);
        }
        let probs = g.row_softmax(logits);
        head_outs.push(g.matmul(probs, vh));
    }
    let merged = g.concat_cols(head_outs);
    g.matmul(merged, w.wo)
}

/// GELU feed-forward: gelu(x·w1 + b1)·w2 + b2.
pub fn ffn_graph<F: Real>(g: &mut Graph<F>, x: NodeId, w: FfnNodes) -> NodeId {
    let h = g.matmul(x, w.w1);
    let h = g.add_row(h, w.b1);
    let h = g.gelu(h);
    let y = g.matmul(h, w.w2);
    g.add_row(y, w.b2)
}

/// RMS-normalize rows with a staged 1×width gain.
pub fn rms_norm_graph<F: Real>(g: &mut Graph<F>, x: NodeId, gain: NodeId) -> NodeId {
    g.rms_norm(x, gain, F::from_f64(RMS_EPS))
}
