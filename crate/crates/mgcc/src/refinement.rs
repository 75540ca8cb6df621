//! Cross-modal refinement: explicit cross-attention between the image-token
//! hidden states f_I and the full multimodal hidden states f_mm.
//!
//! One layer computes joint attention logits A = (f_I·P_qI)(f_mm·P_qmm)ᵀ/√p,
//! refines both streams through row-softmaxed attention and a feed-forward,
//! then adds the image-token rows of the refined sequence stream back onto
//! the refined image stream. Layers stack by threading the image stream
//! through while f_mm stays fixed at the backbone output.

use crate::autodiff::{Graph, NodeId};
use crate::error::{MgccError, Result};
use crate::util::{normal_matrix, rng_from_seed};
use crate::{FeatureMatrix, ImageTokenMask, Real};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Feed-forward used inside a refinement layer. The default is a single
/// linear map; the two-layer variant inserts a smooth nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub enum RefinementFfn<F: Real> {
    Linear {
        w: Array2<F>,
    },
    TwoLayer {
        w1: Array2<F>,
        b1: Array2<F>,
        w2: Array2<F>,
        b2: Array2<F>,
    },
}

impl<F: Real> RefinementFfn<F> {
    pub fn init(rng: &mut ChaCha8Rng, e: usize, depth: usize) -> Self {
        let std = 1.0 / (e as f64).sqrt();
        match depth {
            1 => Self::Linear {
                w: normal_matrix(rng, e, e, std),
            },
            2 => {
                let hidden = 2 * e;
                Self::TwoLayer {
                    w1: normal_matrix(rng, e, hidden, std),
                    b1: Array2::zeros((1, hidden)),
                    w2: normal_matrix(rng, hidden, e, 1.0 / (hidden as f64).sqrt()),
                    b2: Array2::zeros((1, e)),
                }
            }
            other => panic!("ffn depth must be 1 or 2, got {other}"),
        }
    }

    pub fn identity(e: usize) -> Self {
        Self::Linear { w: Array2::eye(e) }
    }

    /// Named tensors, in checkpoint order. The linear variant is a single
    /// unsuffixed tensor.
    pub fn tensors(&self) -> Vec<(String, &Array2<F>)> {
        match self {
            Self::Linear { w } => vec![(String::new(), w)],
            Self::TwoLayer { w1, b1, w2, b2 } => vec![
                (".w1".to_string(), w1),
                (".b1".to_string(), b1),
                (".w2".to_string(), w2),
                (".b2".to_string(), b2),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        match self {
            Self::Linear { w } => vec![(String::new(), w)],
            Self::TwoLayer { w1, b1, w2, b2 } => vec![
                (".w1".to_string(), w1),
                (".b1".to_string(), b1),
                (".w2".to_string(), w2),
                (".b2".to_string(), b2),
            ],
        }
    }
}

/// Trainable tensors for one refinement layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementLayerParams<F: Real> {
    /// e×p query projection for the image-token stream.
    pub proj_q_i: Array2<F>,
    /// e×p query projection for the full sequence stream.
    pub proj_q_mm: Array2<F>,
    /// e×e value projection feeding the image-stream update.
    pub proj_t: Array2<F>,
    /// e×e value projection feeding the sequence-stream update.
    pub proj_i: Array2<F>,
    pub ffn_i: RefinementFfn<F>,
    pub ffn_mm: RefinementFfn<F>,
}

impl<F: Real> RefinementLayerParams<F> {
    pub fn init(rng: &mut ChaCha8Rng, e: usize, p: usize, ffn_depth: usize) -> Self {
        let std = 1.0 / (e as f64).sqrt();
        Self {
            proj_q_i: normal_matrix(rng, e, p, std),
            proj_q_mm: normal_matrix(rng, e, p, std),
            proj_t: normal_matrix(rng, e, e, std),
            proj_i: normal_matrix(rng, e, e, std),
            ffn_i: RefinementFfn::init(rng, e, ffn_depth),
            ffn_mm: RefinementFfn::init(rng, e, ffn_depth),
        }
    }

    /// Identity projections and identity feed-forwards, for tests and
    /// degenerate configurations.
    pub fn identity(e: usize) -> Self {
        Self {
            proj_q_i: Array2::eye(e),
            proj_q_mm: Array2::eye(e),
            proj_t: Array2::eye(e),
            proj_i: Array2::eye(e),
            ffn_i: RefinementFfn::identity(e),
            ffn_mm: RefinementFfn::identity(e),
        }
    }

    /// Query projection width p.
    pub fn proj_width(&self) -> usize {
        self.proj_q_i.ncols()
    }

    pub fn e(&self) -> usize {
        self.proj_q_i.nrows()
    }
}

/// N stacked refinement layers, applied sequentially.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStack<F: Real> {
    pub layers: Vec<RefinementLayerParams<F>>,
}

impl<F: Real> RefinementStack<F> {
    pub fn init(seed: u64, layers: usize, e: usize, p: usize, ffn_depth: usize) -> Self {
        let mut rng = rng_from_seed(seed);
        Self {
            layers: (0..layers)
                .map(|_| RefinementLayerParams::init(&mut rng, e, p, ffn_depth))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Named tensors in a fixed order; names are relative to the stack
    /// (the parameter set prefixes them with `cmrm.`).
    pub fn tensors(&self) -> Vec<(String, &Array2<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.proj_q_I"), &layer.proj_q_i));
            out.push((format!("layer{i}.proj_q_mm"), &layer.proj_q_mm));
            out.push((format!("layer{i}.proj_t"), &layer.proj_t));
            out.push((format!("layer{i}.proj_I"), &layer.proj_i));
            for (suffix, t) in layer.ffn_i.tensors() {
                out.push((format!("layer{i}.ffn_I{suffix}"), t));
            }
            for (suffix, t) in layer.ffn_mm.tensors() {
                out.push((format!("layer{i}.ffn_mm{suffix}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.proj_q_I"), &mut layer.proj_q_i));
            out.push((format!("layer{i}.proj_q_mm"), &mut layer.proj_q_mm));
            out.push((format!("layer{i}.proj_t"), &mut layer.proj_t));
            out.push((format!("layer{i}.proj_I"), &mut layer.proj_i));
            for (suffix, t) in layer.ffn_i.tensors_mut() {
                out.push((format!("layer{i}.ffn_I{suffix}"), t));
            }
            for (suffix, t) in layer.ffn_mm.tensors_mut() {
                out.push((format!("layer{i}.ffn_mm{suffix}"), t));
            }
        }
        out
    }
}

// ── Staging ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum StagedFfn {
    Linear {
        w: NodeId,
    },
    TwoLayer {
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    },
}

impl StagedFfn {
    pub fn stage<F: Real>(g: &mut Graph<F>, ffn: &RefinementFfn<F>) -> Self {
        match ffn {
            RefinementFfn::Linear { w } => Self::Linear { w: g.leaf(w.clone()) },
            RefinementFfn::TwoLayer { w1, b1, w2, b2 } => Self::TwoLayer {
                w1: g.leaf(w1.clone()),
                b1: g.leaf(b1.clone()),
                w2: g.leaf(w2.clone()),
                b2: g.leaf(b2.clone()),
            },
        }
    }

    fn apply<F: Real>(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        match self {
            Self::Linear { w } => g.matmul(x, *w),
            Self::TwoLayer { w1, b1, w2, b2 } => {
                let h = g.matmul(x, *w1);
                let h = g.add_row(h, *b1);
                let h = g.gelu(h);
                let y = g.matmul(h, *w2);
                g.add_row(y, *b2)
            }
        }
    }
}

/// Node ids for one staged refinement layer.
#[derive(Debug, Clone)]
pub struct StagedRefinementLayer {
    pub proj_q_i: NodeId,
    pub proj_q_mm: NodeId,
    pub proj_t: NodeId,
    pub proj_i: NodeId,
    pub ffn_i: StagedFfn,
    pub ffn_mm: StagedFfn,
}

impl StagedRefinementLayer {
    pub fn stage<F: Real>(g: &mut Graph<F>, params: &RefinementLayerParams<F>) -> Self {
        Self {
            proj_q_i: g.leaf(params.proj_q_i.clone()),
            proj_q_mm: g.leaf(params.proj_q_mm.clone()),
            proj_t: g.leaf(params.proj_t.clone()),
            proj_i: g.leaf(params.proj_i.clone()),
            ffn_i: StagedFfn::stage(g, &params.ffn_i),
            ffn_mm: StagedFfn::stage(g, &params.ffn_mm),
        }
    }
}

// ── Operations ─────────────────────────────────────────────────────────

fn check_widths<F: Real>(
    f_i: &FeatureMatrix<F>,
    f_mm: &FeatureMatrix<F>,
    params: &RefinementLayerParams<F>,
) -> Result<()> {
    let e = params.e();
    if f_i.ncols() != e || f_mm.ncols() != e {
        return Err(MgccError::Dimension(format!(
            "refinement inputs must have width {e}, got {} and {}",
            f_i.ncols(),
            f_mm.ncols()
        )));
    }
    if f_i.nrows() > f_mm.nrows() {
        return Err(MgccError::Contract(format!(
            "image stream has {} rows but full sequence only {}",
            f_i.nrows(),
            f_mm.nrows()
        )));
    }
    Ok(())
}

/// Joint attention logits: (f_I·P_qI)(f_mm·P_qmm)ᵀ / √p, no softmax.
pub fn joint_attention<F: Real>(
    f_i: &FeatureMatrix<F>,
    f_mm: &FeatureMatrix<F>,
    params: &RefinementLayerParams<F>,
) -> Result<FeatureMatrix<F>> {
    check_widths(f_i, f_mm, params)?;
    let mut g = Graph::new();
    let fi = g.leaf(f_i.clone());
    let fmm = g.leaf(f_mm.clone());
    let staged = StagedRefinementLayer::stage(&mut g, params);
    let out = joint_attention_graph(&mut g, fi, fmm, &staged);
    Ok(g.value(out).clone())
}

pub fn joint_attention_graph<F: Real>(
    g: &mut Graph<F>,
    f_i: NodeId,
    f_mm: NodeId,
    layer: &StagedRefinementLayer,
) -> NodeId {
    let p = g.value(layer.proj_q_i).ncols();
    let q = g.matmul(f_i, layer.proj_q_i);
    let k = g.matmul(f_mm, layer.proj_q_mm);
    let kt = g.transpose(k);
    let raw = g.matmul(q, kt);
    g.scale(raw, F::from_f64(1.0 / (p as f64).sqrt()))
}

/// One refinement step: F_I = ffn_I(softmax(A)·(f_mm·P_t)) and
/// F_mm = ffn_mm(softmax(Aᵀ)·(f_I·P_I)).
pub fn refine_features<F: Real>(
    f_i: &FeatureMatrix<F>,
    f_mm: &FeatureMatrix<F>,
    params: &RefinementLayerParams<F>,
) -> Result<(FeatureMatrix<F>, FeatureMatrix<F>)> {
    check_widths(f_i, f_mm, params)?;
    let mut g = Graph::new();
    let fi = g.leaf(f_i.clone());
    let fmm = g.leaf(f_mm.clone());
    let staged = StagedRefinementLayer::stage(&mut g, params);
    let (ri, rmm) = refine_features_graph(&mut g, fi, fmm, &staged);
    Ok((g.value(ri).clone(), g.value(rmm).clone()))
}

pub fn refine_features_graph<F: Real>(
    g: &mut Graph<F>,
    f_i: NodeId,
    f_mm: NodeId,
    layer: &StagedRefinementLayer,
) -> (NodeId, NodeId) {
    let logits = joint_attention_graph(g, f_i, f_mm, layer);

    let probs_i = g.row_softmax(logits);
    let values_t = g.matmul(f_mm, layer.proj_t);
    let mixed_i = g.matmul(probs_i, values_t);
    let refined_i = layer.ffn_i.apply(g, mixed_i);

    let logits_t = g.transpose(logits);
    let probs_mm = g.row_softmax(logits_t);
    let values_i = g.matmul(f_i, layer.proj_i);
    let mixed_mm = g.matmul(probs_mm, values_i);
    let refined_mm = layer.ffn_mm.apply(g, mixed_mm);

    (refined_i, refined_mm)
}

/// Gather the image-token rows of F_mm (mask order preserved) and add them
/// onto F_I.
pub fn combine_refined<F: Real>(
    refined_i: &FeatureMatrix<F>,
    refined_mm: &FeatureMatrix<F>,
    mask: &ImageTokenMask,
) -> Result<FeatureMatrix<F>> {
    if mask.len() != refined_mm.nrows() {
        return Err(MgccError::Contract(format!(
            "mask length {} does not match sequence rows {}",
            mask.len(),
            refined_mm.nrows()
        )));
    }
    if mask.count() != refined_i.nrows() {
        return Err(MgccError::Contract(format!(
            "mask marks {} positions but image stream has {} rows",
            mask.count(),
            refined_i.nrows()
        )));
    }
    let mut g = Graph::new();
    let ri = g.leaf(refined_i.clone());
    let rmm = g.leaf(refined_mm.clone());
    let out = combine_refined_graph(&mut g, ri, rmm, mask);
    Ok(g.value(out).clone())
}

pub fn combine_refined_graph<F: Real>(
    g: &mut Graph<F>,
    refined_i: NodeId,
    refined_mm: NodeId,
    mask: &ImageTokenMask,
) -> NodeId {
    let gathered = g.gather_rows(refined_mm, mask.indices());
    g.add(gathered, refined_i)
}

/// Full stack: extract f_I from f_mm at the mask positions, then apply each
/// layer to (previous image stream, original f_mm).
pub fn refine_stack<F: Real>(
    f_mm: &FeatureMatrix<F>,
    mask: &ImageTokenMask,
    stack: &RefinementStack<F>,
) -> Result<FeatureMatrix<F>> {
    if mask.len() != f_mm.nrows() {
        return Err(MgccError::Contract(format!(
            "mask length {} does not match sequence rows {}",
            mask.len(),
            f_mm.nrows()
        )));
    }
    if mask.count() == 0 {
        return Err(MgccError::Contract(
            "mask marks no image-token positions".into(),
        ));
    }
    for layer in &stack.layers {
        if layer.e() != f_mm.ncols() {
            return Err(MgccError::Dimension(format!(
                "layer width {} does not match sequence width {}",
                layer.e(),
                f_mm.ncols()
            )));
        }
    }
    let mut g = Graph::new();
    let fmm = g.leaf(f_mm.clone());
    let staged: Vec<StagedRefinementLayer> = stack
        .layers
        .iter()
        .map(|l| StagedRefinementLayer::stage(&mut g, l))
        .collect();
    let out = refine_stack_graph(&mut g, fmm, mask, &staged);
    Ok(g.value(out).clone())
}

pub fn refine_stack_graph<F: Real>(
    g: &mut Graph<F>,
    f_mm: NodeId,
    mask: &ImageTokenMask,
    staged: &[StagedRefinementLayer],
) -> NodeId {
    let mut image_stream = g.gather_rows(f_mm, mask.indices());
    for layer in staged {
        let (refined_i, refined_mm) = refine_features_graph(g, image_stream, f_mm, layer);
        image_stream = combine_refined_graph(g, refined_i, refined_mm, mask);
    }
    image_stream
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;

    // Literal loop transcription of the three refinement equations; no
    // shared code with the graph implementation.
    fn oracle_layer(
        f_i: &Array2<f64>,
        f_mm: &Array2<f64>,
        params: &RefinementLayerParams<f64>,
        mask: &ImageTokenMask,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (n_i, e) = f_i.dim();
        let n_s = f_mm.nrows();
        let p = params.proj_width();

        let project = |m: &Array2<f64>, w: &Array2<f64>| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; w.ncols()]; m.nrows()];
            for r in 0..m.nrows() {
                for c in 0..w.ncols() {
                    for a in 0..m.ncols() {
                        out[r][c] += m[[r, a]] * w[[a, c]];
                    }
                }
            }
            out
        };
        let apply_ffn = |ffn: &RefinementFfn<f64>, rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            match ffn {
                RefinementFfn::Linear { w } => {
                    let m = Array2::from_shape_vec(
                        (rows.len(), e),
                        rows.iter().flatten().cloned().collect(),
                    )
                    .unwrap();
                    project(&m, w)
                }
                RefinementFfn::TwoLayer { .. } => unimplemented!("oracle covers depth 1"),
            }
        };

        let q = project(f_i, &params.proj_q_i);
        let k = project(f_mm, &params.proj_q_mm);
        let mut logits = vec![vec![0.0; n_s]; n_i];
        for i in 0..n_i {
            for j in 0..n_s {
                let mut dot = 0.0;
                for a in 0..p {
                    dot += q[i][a] * k[j][a];
                }
                logits[i][j] = dot / (p as f64).sqrt();
            }
        }

        let softmax = |row: &[f64]| -> Vec<f64> {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|v| v / sum).collect()
        };

        let values_t = project(f_mm, &params.proj_t);
        let mut mixed_i = vec![vec![0.0; e]; n_i];
        for i in 0..n_i {
            let w = softmax(&logits[i]);
            for j in 0..n_s {
                for c in 0..e {
                    mixed_i[i][c] += w[j] * values_t[j][c];
                }
            }
        }
        let refined_i = apply_ffn(&params.ffn_i, &mixed_i);

        let values_i = project(f_i, &params.proj_i);
        let mut mixed_mm = vec![vec![0.0; e]; n_s];
        for j in 0..n_s {
            let col: Vec<f64> = (0..n_i).map(|i| logits[i][j]).collect();
            let w = softmax(&col);
            for i in 0..n_i {
                for c in 0..e {
                    mixed_mm[j][c] += w[i] * values_i[i][c];
                }
            }
        }
        let refined_mm = apply_ffn(&params.ffn_mm, &mixed_mm);

        let mut combined = refined_i.clone();
        for (out_row, &src) in mask.indices().iter().enumerate() {
            for c in 0..e {
                combined[out_row][c] += refined_mm[src][c];
            }
        }

        let to_arr = |rows: Vec<Vec<f64>>, nr: usize| {
            Array2::from_shape_vec((nr, e), rows.into_iter().flatten().collect()).unwrap()
        };
        let logits_arr =
            Array2::from_shape_vec((n_i, n_s), logits.into_iter().flatten().collect()).unwrap();
        (logits_arr, to_arr(refined_mm, n_s), to_arr(combined, n_i))
    }

    fn seeded_layer(seed: u64, e: usize, p: usize) -> RefinementLayerParams<f64> {
        RefinementLayerParams::init(&mut rng_from_seed(seed), e, p, 1)
    }

    #[test]
    fn zero_queries_give_zero_logits() {
        let params = seeded_layer(1, 3, 3);
        let f_i = Array2::zeros((2, 3));
        let f_mm = normal_matrix(&mut rng_from_seed(2), 4, 3, 1.0);
        let logits = joint_attention(&f_i, &f_mm, &params).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_logits_are_scaled_dot_products() {
        let params = RefinementLayerParams::identity(2);
        let f_i = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let f_mm = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let logits = joint_attention(&f_i, &f_mm, &params).unwrap();
        assert!((logits[[0, 0]] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((logits[[0, 0]] - 0.70711).abs() < 1e-5);
        assert_eq!(logits[[0, 1]], 0.0);
    }

    #[test]
    fn logits_match_loop_oracle() {
        let params = seeded_layer(3, 3, 3);
        let f_i = normal_matrix(&mut rng_from_seed(4), 2, 3, 1.0);
        let f_mm = normal_matrix(&mut rng_from_seed(5), 4, 3, 1.0);
        let got = joint_attention(&f_i, &f_mm, &params).unwrap();
        let mask = ImageTokenMask::trailing(4, 2);
        let (expect, _, _) = oracle_layer(&f_i, &f_mm, &params, &mask);
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-6);
        }
    }

    #[test]
    fn logits_scale_linearly_with_image_stream() {
        let params = seeded_layer(6, 4, 2);
        let f_i = normal_matrix(&mut rng_from_seed(7), 2, 4, 1.0);
        let f_mm = normal_matrix(&mut rng_from_seed(8), 3, 4, 1.0);
        let once = joint_attention(&f_i, &f_mm, &params).unwrap();
        let doubled = joint_attention(&f_i.mapv(|v| 2.0 * v), &f_mm, &params).unwrap();
        assert_eq!(doubled, once.mapv(|v| 2.0 * v));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let params = seeded_layer(9, 4, 2);
        let f_i = Array2::<f64>::zeros((2, 3));
        let f_mm = Array2::<f64>::zeros((3, 4));
        assert!(matches!(
            joint_attention(&f_i, &f_mm, &params),
            Err(MgccError::Dimension(_))
        ));
    }

    #[test]
    fn single_key_attention_is_exact_passthrough() {
        // n_S = 1: the softmax weight is exactly 1, so the image stream is
        // ffn_I(f_mm·proj_t) for the single row.
        let params = seeded_layer(10, 3, 3);
        let f_i = normal_matrix(&mut rng_from_seed(11), 1, 3, 1.0);
        let f_mm = normal_matrix(&mut rng_from_seed(12), 1, 3, 1.0);
        let (refined_i, _) = refine_features(&f_i, &f_mm, &params).unwrap();
        let values = f_mm.dot(&params.proj_t);
        let expect = match &params.ffn_i {
            RefinementFfn::Linear { w } => values.dot(w),
            _ => unreachable!(),
        };
        for (g, e) in refined_i.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_average_the_sequence() {
        // Zero image stream with identity maps: uniform softmax, so every
        // refined image row is the mean row of f_mm.
        let params = RefinementLayerParams::identity(2);
        let f_i = Array2::<f64>::zeros((2, 2));
        let f_mm = Array2::from_shape_vec((4, 2), vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let (refined_i, _) = refine_features(&f_i, &f_mm, &params).unwrap();
        for r in 0..2 {
            assert!((refined_i[[r, 0]] - 4.0).abs() < 1e-12);
            assert!((refined_i[[r, 1]] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_features_matches_loop_oracle() {
        let params = seeded_layer(13, 4, 4);
        let f_i = normal_matrix(&mut rng_from_seed(14), 2, 4, 1.0);
        let f_mm = normal_matrix(&mut rng_from_seed(15), 3, 4, 1.0);
        let (got_i, got_mm) = refine_features(&f_i, &f_mm, &params).unwrap();
        let mask = ImageTokenMask::trailing(3, 2);
        let (_, expect_mm, _) = oracle_layer(&f_i, &f_mm, &params, &mask);
        assert_eq!(got_mm.dim(), expect_mm.dim());
        for (g, e) in got_mm.iter().zip(expect_mm.iter()) {
            assert!((g - e).abs() < 1e-6);
        }
        assert_eq!(got_i.dim(), (2, 4));
    }

    #[test]
    fn softmax_rows_are_stochastic_inside_refinement() {
        let params = seeded_layer(16, 4, 4);
        let f_i = normal_matrix(&mut rng_from_seed(17), 3, 4, 2.0);
        let f_mm = normal_matrix(&mut rng_from_seed(18), 5, 4, 2.0);
        let logits = joint_attention(&f_i, &f_mm, &params).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let l = g.leaf(logits);
        let probs = g.row_softmax(l);
        for row in g.value(probs).rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn combine_with_zero_sequence_stream_is_identity() {
        let f_i = normal_matrix::<f64>(&mut rng_from_seed(19), 2, 3, 1.0);
        let f_mm = Array2::zeros((5, 3));
        let mask = ImageTokenMask::trailing(5, 2);
        let out = combine_refined(&f_i, &f_mm, &mask).unwrap();
        assert_eq!(out, f_i);
    }

    #[test]
    fn combine_with_full_mask_adds_everything() {
        let f_i = normal_matrix::<f64>(&mut rng_from_seed(20), 3, 2, 1.0);
        let f_mm = normal_matrix(&mut rng_from_seed(21), 3, 2, 1.0);
        let mask = ImageTokenMask::new(vec![true; 3]);
        let out = combine_refined(&f_i, &f_mm, &mask).unwrap();
        assert_eq!(out, &f_i + &f_mm);
    }

    #[test]
    fn combine_gathers_mixed_mask_rows_in_order() {
        let f_i = normal_matrix::<f64>(&mut rng_from_seed(22), 2, 3, 1.0);
        let f_mm = normal_matrix(&mut rng_from_seed(23), 4, 3, 1.0);
        let mask = ImageTokenMask::new(vec![false, true, false, true]);
        let out = combine_refined(&f_i, &f_mm, &mask).unwrap();
        // Index-loop oracle: rows 1 and 3 of f_mm added to rows 0 and 1.
        for c in 0..3 {
            assert_eq!(out[[0, c]], f_i[[0, c]] + f_mm[[1, c]]);
            assert_eq!(out[[1, c]], f_i[[1, c]] + f_mm[[3, c]]);
        }
    }

    #[test]
    fn combine_rejects_mask_mismatch() {
        let f_i = Array2::<f64>::zeros((2, 3));
        let f_mm = Array2::<f64>::zeros((4, 3));
        let mask = ImageTokenMask::trailing(4, 3);
        assert!(matches!(
            combine_refined(&f_i, &f_mm, &mask),
            Err(MgccError::Contract(_))
        ));
    }

    #[test]
    fn empty_stack_returns_extracted_stream() {
        let stack = RefinementStack::<f64> { layers: vec![] };
        let f_mm = normal_matrix(&mut rng_from_seed(24), 5, 3, 1.0);
        let mask = ImageTokenMask::trailing(5, 2);
        let out = refine_stack(&f_mm, &mask, &stack).unwrap();
        assert_eq!(out.nrows(), 2);
        for (r, &src) in mask.indices().iter().enumerate() {
            assert_eq!(out.row(r), f_mm.row(src));
        }
    }

    #[test]
    fn two_layer_stack_equals_manual_composition() {
        let stack = RefinementStack::<f64>::init(25, 2, 3, 3, 1);
        let f_mm = normal_matrix(&mut rng_from_seed(26), 4, 3, 1.0);
        let mask = ImageTokenMask::trailing(4, 2);
        let got = refine_stack(&f_mm, &mask, &stack).unwrap();

        let f_i0: Array2<f64> = Array2::from_shape_vec(
            (2, 3),
            mask.indices()
                .iter()
                .flat_map(|&i| f_mm.row(i).to_vec())
                .collect(),
        )
        .unwrap();
        let (r_i, r_mm) = refine_features(&f_i0, &f_mm, &stack.layers[0]).unwrap();
        let f_i1 = combine_refined(&r_i, &r_mm, &mask).unwrap();
        let (r_i, r_mm) = refine_features(&f_i1, &f_mm, &stack.layers[1]).unwrap();
        let expect = combine_refined(&r_i, &r_mm, &mask).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn default_stack_depth_is_four() {
        let cfg = crate::config::ModelConfig::default();
        assert_eq!(cfg.cmrm_layers, 4);
        let stack = RefinementStack::<f64>::init(1, cfg.cmrm_layers, 4, 4, cfg.cmrm_ffn_depth);
        assert_eq!(stack.len(), 4);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let stack = RefinementStack::<f64>::init(27, 1, 3, 3, 1);
        let f_mm = Array2::<f64>::zeros((4, 3));
        let mask = ImageTokenMask::new(vec![false; 4]);
        assert!(matches!(
            refine_stack(&f_mm, &mask, &stack),
            Err(MgccError::Contract(_))
        ));
    }

    #[test]
    fn full_stack_matches_oracle_composition() {
        // The graph stack against the loop oracle applied layer by layer.
        for seed in 0..5u64 {
            let stack = RefinementStack::<f64>::init(100 + seed, 2, 4, 4, 1);
            let n_s = 3 + (seed as usize % 3);
            let n_i = 1 + (seed as usize % 2);
            let f_mm = normal_matrix(&mut rng_from_seed(200 + seed), n_s, 4, 1.0);
            let mask = ImageTokenMask::trailing(n_s, n_i);
            let got = refine_stack(&f_mm, &mask, &stack).unwrap();

            let mut stream = Array2::from_shape_vec(
                (n_i, 4),
                mask.indices()
                    .iter()
                    .flat_map(|&i| f_mm.row(i).to_vec())
                    .collect(),
            )
            .unwrap();
            for layer in &stack.layers {
                let (_, _, combined) = oracle_layer(&stream, &f_mm, layer, &mask);
                stream = combined;
            }
            for (g, e) in got.iter().zip(stream.iter()) {
                assert!((g - e).abs() < 1e-6, "seed {seed}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn shape_contract_holds() {
        let stack = RefinementStack::<f64>::init(30, 3, 5, 2, 2);
        let f_mm = normal_matrix(&mut rng_from_seed(31), 7, 5, 1.0);
        let mask = ImageTokenMask::trailing(7, 3);
        let out = refine_stack(&f_mm, &mask, &stack).unwrap();
        assert_eq!(out.dim(), (3, 5));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        // Loss = Σ F̂_I² on a seeded 2-token, 3-row instance with e = 4;
        // every projection tensor in the layer is perturbed.
        let e = 4;
        let params = seeded_layer(32, e, e);
        let f_mm0 = normal_matrix::<f64>(&mut rng_from_seed(33), 3, e, 1.0);
        let mask = ImageTokenMask::trailing(3, 2);

        let eval = |params: &RefinementLayerParams<f64>| -> f64 {
            let mut g = Graph::new();
            let fmm = g.leaf(f_mm0.clone());
            let staged = StagedRefinementLayer::stage(&mut g, params);
            let out = refine_stack_graph(&mut g, fmm, &mask, &[staged]);
            let loss = g.sum_sq(out);
            g.value(loss)[[0, 0]]
        };

        let mut g = Graph::new();
        let fmm = g.leaf(f_mm0.clone());
        let staged = StagedRefinementLayer::stage(&mut g, &params);
        let out = refine_stack_graph(&mut g, fmm, &mask, &[staged.clone()]);
        let loss = g.sum_sq(out);
        let grads = g.backward(loss);

        let h = 1e-5;
        let checks: Vec<(&str, NodeId)> = vec![
            ("proj_q_i", staged.proj_q_i),
            ("proj_q_mm", staged.proj_q_mm),
            ("proj_t", staged.proj_t),
            ("proj_i", staged.proj_i),
        ];
        for (name, node) in checks {
            let analytic = grads.wrt(node).clone();
            let base = match name {
                "proj_q_i" => &params.proj_q_i,
                "proj_q_mm" => &params.proj_q_mm,
                "proj_t" => &params.proj_t,
                _ => &params.proj_i,
            };
            for r in 0..base.nrows() {
                for c in 0..base.ncols() {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    let (pt, mt) = match name {
                        "proj_q_i" => (&mut plus.proj_q_i, &mut minus.proj_q_i),
                        "proj_q_mm" => (&mut plus.proj_q_mm, &mut minus.proj_q_mm),
                        "proj_t" => (&mut plus.proj_t, &mut minus.proj_t),
                        _ => (&mut plus.proj_i, &mut minus.proj_i),
                    };
                    pt[[r, c]] += h;
                    mt[[r, c]] -= h;
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let denom = numeric.abs().max(a.abs()).max(1e-8);
                    assert!(
                        (numeric - a).abs() / denom < 1e-4,
                        "{name}[{r},{c}] numeric {numeric} analytic {a}"
                    );
                }
            }
        }
    }
}
