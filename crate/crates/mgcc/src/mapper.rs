//! Transformer mapper: projects refined image tokens into the conditioning
//! space of the image generator, aligned against a target text encoder.
//!
//! A fixed 4-layer encoder reads the image-token stream (with sinusoidal
//! positions); a fixed 4-layer decoder attends a bank of learnable queries
//! over the encoder output. The decoder emits exactly L rows regardless of
//! how many image tokens came in, so the generator's conditioning shape is
//! static.

use crate::autodiff::{Graph, NodeId};
use crate::error::{MgccError, Result};
use crate::nn::{
    attention_graph, ffn_graph, rms_norm_graph, AttentionWeights, AttnNodes, FfnNodes, FfnWeights,
};
use crate::util::{derive_seed, normal_matrix, rng_from_seed, sinusoidal_positions};
use crate::{FeatureMatrix, Real};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Encoder and decoder depth; fixed by the architecture.
pub const MAPPER_LAYERS: usize = 4;

/// L learnable query rows of width m.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank<F: Real> {
    pub queries: Array2<F>,
}

impl<F: Real> QueryBank<F> {
    pub fn init(seed: u64, l: usize, m: usize) -> Self {
        let mut rng = rng_from_seed(seed);
        Self {
            queries: normal_matrix(&mut rng, l, m, 0.5),
        }
    }

    pub fn len(&self) -> usize {
        self.queries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.queries.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearAdapter<F: Real> {
    pub w: Array2<F>,
    pub b: Array2<F>,
}

impl<F: Real> LinearAdapter<F> {
    fn init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        Self {
            w: normal_matrix(rng, rows, cols, 1.0 / (rows as f64).sqrt()),
            b: Array2::zeros((1, cols)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperEncoderLayer<F: Real> {
    pub attn: AttentionWeights<F>,
    pub norm1: Array2<F>,
    pub ffn: FfnWeights<F>,
    pub norm2: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperDecoderLayer<F: Real> {
    pub self_attn: AttentionWeights<F>,
    pub norm1: Array2<F>,
    pub cross_attn: AttentionWeights<F>,
    pub norm2: Array2<F>,
    pub ffn: FfnWeights<F>,
    pub norm3: Array2<F>,
}

/// All trainable mapper tensors: input adapter e→m, 4 encoder layers,
/// 4 decoder layers, output adapter m→c.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperParams<F: Real> {
    pub input: LinearAdapter<F>,
    pub encoder: Vec<MapperEncoderLayer<F>>,
    pub decoder: Vec<MapperDecoderLayer<F>>,
    pub output: LinearAdapter<F>,
    heads: usize,
}

impl<F: Real> MapperParams<F> {
    pub fn init(seed: u64, e: usize, m: usize, c: usize, heads: usize) -> Self {
        assert_eq!(m % heads, 0, "mapper width must divide into heads");
        let mut rng = rng_from_seed(seed);
        let input = LinearAdapter::init(&mut rng, e, m);
        let encoder = (0..MAPPER_LAYERS)
            .map(|_| MapperEncoderLayer {
                attn: AttentionWeights::init(&mut rng, m),
                norm1: Array2::ones((1, m)),
                ffn: FfnWeights::init(&mut rng, m, 2 * m),
                norm2: Array2::ones((1, m)),
            })
            .collect();
        let decoder = (0..MAPPER_LAYERS)
            .map(|_| MapperDecoderLayer {
                self_attn: AttentionWeights::init(&mut rng, m),
                norm1: Array2::ones((1, m)),
                cross_attn: AttentionWeights::init(&mut rng, m),
                norm2: Array2::ones((1, m)),
                ffn: FfnWeights::init(&mut rng, m, 2 * m),
                norm3: Array2::ones((1, m)),
            })
            .collect();
        let output = LinearAdapter::init(&mut rng, m, c);
        Self {
            input,
            encoder,
            decoder,
            output,
            heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn e(&self) -> usize {
        self.input.w.nrows()
    }

    pub fn m(&self) -> usize {
        self.input.w.ncols()
    }

    pub fn c(&self) -> usize {
        self.output.w.ncols()
    }

    /// Named tensors in a fixed order; names are relative to the mapper
    /// (the parameter set prefixes them with `mapper.`).
    pub fn tensors(&self) -> Vec<(String, &Array2<F>)> {
        let mut out: Vec<(String, &Array2<F>)> = vec![
            ("in_adapter.w".into(), &self.input.w),
            ("in_adapter.b".into(), &self.input.b),
        ];
        for (i, layer) in self.encoder.iter().enumerate() {
            for (n, t) in layer.attn.tensors() {
                out.push((format!("enc{i}.attn.{n}"), t));
            }
            out.push((format!("enc{i}.norm1"), &layer.norm1));
            for (n, t) in layer.ffn.tensors() {
                out.push((format!("enc{i}.ffn.{n}"), t));
            }
            out.push((format!("enc{i}.norm2"), &layer.norm2));
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            for (n, t) in layer.self_attn.tensors() {
                out.push((format!("dec{i}.self_attn.{n}"), t));
            }
            out.push((format!("dec{i}.norm1"), &layer.norm1));
            for (n, t) in layer.cross_attn.tensors() {
                out.push((format!("dec{i}.cross_attn.{n}"), t));
            }
            out.push((format!("dec{i}.norm2"), &layer.norm2));
            for (n, t) in layer.ffn.tensors() {
                out.push((format!("dec{i}.ffn.{n}"), t));
            }
            out.push((format!("dec{i}.norm3"), &layer.norm3));
        }
        out.push(("out_adapter.w".into(), &self.output.w));
        out.push(("out_adapter.b".into(), &self.output.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out: Vec<(String, &mut Array2<F>)> = vec![
            ("in_adapter.w".into(), &mut self.input.w),
            ("in_adapter.b".into(), &mut self.input.b),
        ];
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            for (n, t) in layer.attn.tensors_mut() {
                out.push((format!("enc{i}.attn.{n}"), t));
            }
            out.push((format!("enc{i}.norm1"), &mut layer.norm1));
            for (n, t) in layer.ffn.tensors_mut() {
                out.push((format!("enc{i}.ffn.{n}"), t));
            }
            out.push((format!("enc{i}.norm2"), &mut layer.norm2));
        }
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            for (n, t) in layer.self_attn.tensors_mut() {
                out.push((format!("dec{i}.self_attn.{n}"), t));
            }
            out.push((format!("dec{i}.norm1"), &mut layer.norm1));
            for (n, t) in layer.cross_attn.tensors_mut() {
                out.push((format!("dec{i}.cross_attn.{n}"), t));
            }
            out.push((format!("dec{i}.norm2"), &mut layer.norm2));
            for (n, t) in layer.ffn.tensors_mut() {
                out.push((format!("dec{i}.ffn.{n}"), t));
            }
            out.push((format!("dec{i}.norm3"), &mut layer.norm3));
        }
        out.push(("out_adapter.w".into(), &mut self.output.w));
        out.push(("out_adapter.b".into(), &mut self.output.b));
        out
    }
}

// ── Staging ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StagedAdapter {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone)]
pub struct StagedEncoderLayer {
    pub attn: AttnNodes,
    pub norm1: NodeId,
    pub ffn: FfnNodes,
    pub norm2: NodeId,
}

#[derive(Debug, Clone)]
pub struct StagedDecoderLayer {
    pub self_attn: AttnNodes,
    pub norm1: NodeId,
    pub cross_attn: AttnNodes,
    pub norm2: NodeId,
    pub ffn: FfnNodes,
    pub norm3: NodeId,
}

#[derive(Debug, Clone)]
pub struct StagedMapper {
    pub input: StagedAdapter,
    pub encoder: Vec<StagedEncoderLayer>,
    pub decoder: Vec<StagedDecoderLayer>,
    pub output: StagedAdapter,
    pub queries: NodeId,
    heads: usize,
}

impl StagedMapper {
    pub fn stage<F: Real>(
        g: &mut Graph<F>,
        params: &MapperParams<F>,
        bank: &QueryBank<F>,
    ) -> Self {
        let input = StagedAdapter {
            w: g.leaf(params.input.w.clone()),
            b: g.leaf(params.input.b.clone()),
        };
        let encoder = params
            .encoder
            .iter()
            .map(|l| StagedEncoderLayer {
                attn: AttnNodes::stage(g, &l.attn),
                norm1: g.leaf(l.norm1.clone()),
                ffn: FfnNodes::stage(g, &l.ffn),
                norm2: g.leaf(l.norm2.clone()),
            })
            .collect();
        let decoder = params
            .decoder
            .iter()
            .map(|l| StagedDecoderLayer {
                self_attn: AttnNodes::stage(g, &l.self_attn),
                norm1: g.leaf(l.norm1.clone()),
                cross_attn: AttnNodes::stage(g, &l.cross_attn),
                norm2: g.leaf(l.norm2.clone()),
                ffn: FfnNodes::stage(g, &l.ffn),
                norm3: g.leaf(l.norm3.clone()),
            })
            .collect();
        let output = StagedAdapter {
            w: g.leaf(params.output.w.clone()),
            b: g.leaf(params.output.b.clone()),
        };
        let queries = g.leaf(bank.queries.clone());
        Self {
            input,
            encoder,
            decoder,
            output,
            queries,
            heads: params.heads,
        }
    }
}

// ── Forward ────────────────────────────────────────────────────────────

/// Map refined image tokens into an L×c conditioning matrix.
pub fn map_to_conditioning<F: Real>(
    fi_hat: &FeatureMatrix<F>,
    bank: &QueryBank<F>,
    params: &MapperParams<F>,
) -> Result<FeatureMatrix<F>> {
    if fi_hat.ncols() != params.e() {
        return Err(MgccError::Dimension(format!(
            "refined tokens have width {}, mapper expects {}",
            fi_hat.ncols(),
            params.e()
        )));
    }
    if bank.width() != params.m() {
        return Err(MgccError::Dimension(format!(
            "query width {} does not match mapper width {}",
            bank.width(),
            params.m()
        )));
    }
    if fi_hat.nrows() == 0 {
        return Err(MgccError::Input("no image tokens to map".into()));
    }
    let mut g = Graph::new();
    let fi = g.leaf(fi_hat.clone());
    let staged = StagedMapper::stage(&mut g, params, bank);
    let out = map_to_conditioning_graph(&mut g, fi, &staged);
    Ok(g.value(out).clone())
}

pub fn map_to_conditioning_graph<F: Real>(
    g: &mut Graph<F>,
    fi_hat: NodeId,
    staged: &StagedMapper,
) -> NodeId {
    let heads = staged.heads;
    let n = g.value(fi_hat).nrows();
    let m = g.value(staged.input.w).ncols();

    // Encoder over the image-token stream, positions on the memory side.
    let projected = g.matmul(fi_hat, staged.input.w);
    let mut x = g.add_row(projected, staged.input.b);
    let positions = g.leaf(sinusoidal_positions(n, m));
    x = g.add(x, positions);
    for layer in &staged.encoder {
        let normed = rms_norm_graph(g, x, layer.norm1);
        let attn = attention_graph(g, normed, normed, layer.attn, heads, false);
        x = g.add(x, attn);
        let normed2 = rms_norm_graph(g, x, layer.norm2);
        let ffn = ffn_graph(g, normed2, layer.ffn);
        x = g.add(x, ffn);
    }
    let memory = x;

    // Decoder: queries self-attend (no positions), then cross-attend memory.
    let mut y = staged.queries;
    for layer in &staged.decoder {
        let normed = rms_norm_graph(g, y, layer.norm1);
        let self_attn = attention_graph(g, normed, normed, layer.self_attn, heads, false);
        y = g.add(y, self_attn);
        let normed2 = rms_norm_graph(g, y, layer.norm2);
        let cross = attention_graph(g, normed2, memory, layer.cross_attn, heads, false);
        y = g.add(y, cross);
        let normed3 = rms_norm_graph(g, y, layer.norm3);
        let ffn = ffn_graph(g, normed3, layer.ffn);
        y = g.add(y, ffn);
    }

    let out = g.matmul(y, staged.output.w);
    g.add_row(out, staged.output.b)
}

// ── Target text encoders ───────────────────────────────────────────────

/// Plugin interface: caption text in, L×c alignment target out.
pub trait TargetEncoder<F: Real>: Send + Sync {
    fn encode(&self, caption: &str) -> Result<FeatureMatrix<F>>;
}

/// Deterministic stand-in for a pretrained text encoder: the caption's
/// SHA-256 digest, centered to [-0.5, 0.5], through a fixed seeded
/// projection onto L×c.
#[derive(Debug, Clone)]
pub struct ToyTargetEncoder<F: Real> {
    rows: usize,
    cols: usize,
    projection: Array2<F>,
}

impl<F: Real> ToyTargetEncoder<F> {
    pub fn init(seed: u64, l: usize, c: usize) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, "toy-target-encoder"));
        Self {
            rows: l,
            cols: c,
            projection: normal_matrix(&mut rng, 32, l * c, 1.0 / 32f64.sqrt()),
        }
    }

    pub fn weight_hash(&self) -> String {
        crate::util::sha256_hex(&crate::util::matrix_le_bytes(&self.projection))
    }
}

impl<F: Real> TargetEncoder<F> for ToyTargetEncoder<F> {
    fn encode(&self, caption: &str) -> Result<FeatureMatrix<F>> {
        if caption.is_empty() {
            return Err(MgccError::Input("caption must be nonempty".into()));
        }
        let digest = Sha256::digest(caption.as_bytes());
        let features: Vec<F> = digest
            .iter()
            .map(|&b| F::from_f64(b as f64 / 255.0 - 0.5))
            .collect();
        let row = Array2::from_shape_vec((1, 32), features).unwrap();
        let flat = row.dot(&self.projection);
        let data: Vec<F> = flat.into_iter().collect();
        Ok(Array2::from_shape_vec((self.rows, self.cols), data).unwrap())
    }
}

/// Alignment target for the MSE loss: the (toy or plugged-in) text encoder's
/// L×c embedding of the caption.
pub fn alignment_target<F: Real>(
    caption: &str,
    encoder: &dyn TargetEncoder<F>,
) -> Result<FeatureMatrix<F>> {
    encoder.encode(caption)
}
