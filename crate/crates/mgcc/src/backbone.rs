//! Frozen visual encoder, frozen causal language backbone, the image-token
//! vocabulary extension, and the visual-to-token alignment map.
//!
//! The backbone produces the multimodal hidden-state sequence `f_mm` that the
//! refinement module consumes. All weights here are frozen: gradients flow
//! through the forward pass into the trainable alignment map and image-token
//! embeddings, but nothing in this module is ever updated.

use crate::autodiff::{Graph, NodeId};
use crate::error::{MgccError, Result};
use crate::nn::{
    attention_graph, ffn_graph, rms_norm_graph, AttentionWeights, AttnNodes, FfnNodes, FfnWeights,
};
use crate::pixels::PixelImage;
use crate::util::{
    derive_seed, matrix_le_bytes, normal_matrix, rng_from_seed, sha256_hex, sinusoidal_positions,
};
use crate::{FeatureMatrix, ImageTokenMask, Real};
use ndarray::Array2;

// ── Domain types ────────────────────────────────────────────────────────

/// Image embedding of width d produced by a visual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding<F: Real>(pub Vec<F>);

impl<F: Real> VisualEmbedding<F> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Token ids over the extended vocabulary (base vocab + image tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionTokens {
    pub ids: Vec<usize>,
}

impl CaptionTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Trainable linear map from visual embeddings into k tokens of the
/// backbone's embedding space: a d × (k·e) matrix, reshaped row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap<F: Real> {
    pub matrix: Array2<F>,
    k: usize,
    e: usize,
}

impl<F: Real> AlignmentMap<F> {
    pub fn new(matrix: Array2<F>, k: usize, e: usize) -> Result<Self> {
        if matrix.ncols() != k * e {
            return Err(MgccError::Dimension(format!(
                "alignment map has {} columns, expected k·e = {}",
                matrix.ncols(),
                k * e
            )));
        }
        Ok(Self { matrix, k, e })
    }

    pub fn init(seed: u64, d: usize, k: usize, e: usize) -> Self {
        let mut rng = rng_from_seed(seed);
        let std = 1.0 / (d as f64).sqrt();
        Self {
            matrix: normal_matrix(&mut rng, d, k * e, std),
            k,
            e,
        }
    }

    pub fn d(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn e(&self) -> usize {
        self.e
    }
}

/// Trainable embeddings for the n image tokens, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokenEmbeddings<F: Real> {
    pub matrix: Array2<F>,
}

impl<F: Real> ImageTokenEmbeddings<F> {
    pub fn new(matrix: Array2<F>) -> Self {
        Self { matrix }
    }

    pub fn init(seed: u64, n: usize, e: usize) -> Self {
        let mut rng = rng_from_seed(seed);
        Self {
            matrix: normal_matrix(&mut rng, n, e, 0.5),
        }
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn e(&self) -> usize {
        self.matrix.ncols()
    }
}

// ── Story ──────────────────────────────────────────────────────────────

/// One element of an interleaved story.
#[derive(Debug, Clone, PartialEq)]
pub enum StoryItem {
    Caption(String),
    Image(PixelImage),
}

/// An interleaved sequence of captions and images; the image generated
/// after the final caption is the target.
#[derive(Debug, Clone, PartialEq)]
pub struct StoryExample {
    items: Vec<StoryItem>,
}

impl StoryExample {
    /// Requires at least one caption, and every image to precede the final
    /// caption.
    pub fn new(items: Vec<StoryItem>) -> Result<Self> {
        let last_caption = items
            .iter()
            .rposition(|i| matches!(i, StoryItem::Caption(_)))
            .ok_or_else(|| MgccError::Input("story must contain at least one caption".into()))?;
        if items[last_caption..]
            .iter()
            .any(|i| matches!(i, StoryItem::Image(_)))
        {
            return Err(MgccError::Input(
                "story images must precede the final caption".into(),
            ));
        }
        Ok(Self { items })
    }

    pub fn from_captions(captions: Vec<String>) -> Result<Self> {
        Self::new(captions.into_iter().map(StoryItem::Caption).collect())
    }

    /// Interleave captions with images: image j follows caption j.
    pub fn interleaved(captions: Vec<String>, images: Vec<PixelImage>) -> Result<Self> {
        if !captions.is_empty() && images.len() > captions.len() - 1 {
            return Err(MgccError::Input(format!(
                "{} images cannot interleave with {} captions",
                images.len(),
                captions.len()
            )));
        }
        let mut items = Vec::new();
        let mut images = images.into_iter();
        let count = captions.len();
        for (i, caption) in captions.into_iter().enumerate() {
            items.push(StoryItem::Caption(caption));
            if i + 1 < count {
                if let Some(img) = images.next() {
                    items.push(StoryItem::Image(img));
                }
            }
        }
        Self::new(items)
    }

    pub fn items(&self) -> &[StoryItem] {
        &self.items
    }

    pub fn captions(&self) -> Vec<&str> {
        self.items
            .iter()
            .filter_map(|i| match i {
                StoryItem::Caption(c) => Some(c.as_str()),
                StoryItem::Image(_) => None,
            })
            .collect()
    }

    pub fn final_caption(&self) -> &str {
        self.captions().last().expect("validated at construction")
    }
}

// ── Tokenizer ──────────────────────────────────────────────────────────

/// Byte-level tokenizer: each UTF-8 byte is one id in [0, base_vocab).
pub fn tokenize(text: &str, base_vocab: usize) -> Result<CaptionTokens> {
    if text.is_empty() {
        return Err(MgccError::Input("cannot tokenize an empty caption".into()));
    }
    let ids: Vec<usize> = text.bytes().map(|b| b as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&id| id >= base_vocab) {
        return Err(MgccError::Index(format!(
            "byte {bad} exceeds base vocabulary {base_vocab}"
        )));
    }
    Ok(CaptionTokens { ids })
}

// ── Visual encoders ────────────────────────────────────────────────────

/// Plugin interface: pixel grid in, d-vector out.
pub trait VisualEncoder<F: Real>: Send + Sync {
    fn output_dim(&self) -> usize;
    fn encode(&self, image: &PixelImage) -> Result<VisualEmbedding<F>>;
}

/// Seeded random linear projection of flattened, [0,1]-normalized pixels.
/// A deterministic stand-in for a pretrained visual encoder.
#[derive(Debug, Clone)]
pub struct ToyVisualEncoder<F: Real> {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    projection: Array2<F>,
    bias: Vec<F>,
}

impl<F: Real> ToyVisualEncoder<F> {
    pub fn init(seed: u64, width: u32, height: u32, channels: u32, d: usize) -> Self {
        let inputs = (width * height * channels) as usize;
        let mut rng = rng_from_seed(derive_seed(seed, "toy-visual-encoder"));
        let std = 1.0 / (inputs as f64).sqrt();
        Self {
            width,
            height,
            channels,
            projection: normal_matrix(&mut rng, d, inputs, std),
            bias: vec![F::zero(); d],
        }
    }

    pub fn projection(&self) -> &Array2<F> {
        &self.projection
    }

    pub fn weight_hash(&self) -> String {
        sha256_hex(&matrix_le_bytes(&self.projection))
    }
}

impl<F: Real> VisualEncoder<F> for ToyVisualEncoder<F> {
    fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    fn encode(&self, image: &PixelImage) -> Result<VisualEmbedding<F>> {
        if (image.width, image.height, image.channels) != (self.width, self.height, self.channels)
        {
            return Err(MgccError::Config(format!(
                "encoder expects {}x{}x{} images, got {}x{}x{}",
                self.width, self.height, self.channels, image.width, image.height, image.channels
            )));
        }
        let scale = F::from_f64(1.0 / 255.0);
        let values = (0..self.projection.nrows())
            .map(|r| {
                let mut acc = self.bias[r];
                for (c, &px) in image.data.iter().enumerate() {
                    acc = acc + self.projection[[r, c]] * F::from_f64(px as f64) * scale;
                }
                acc
            })
            .collect();
        Ok(VisualEmbedding(values))
    }
}

/// Encode an image through whichever encoder the configuration selected.
pub fn encode_image<F: Real>(
    image: &PixelImage,
    encoder: &dyn VisualEncoder<F>,
) -> Result<VisualEmbedding<F>> {
    encoder.encode(image)
}

// ── Frozen backbone ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub base_vocab: usize,
    pub e: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct BackboneLayer<F: Real> {
    attn: AttentionWeights<F>,
    norm1_gain: Array2<F>,
    ffn: FfnWeights<F>,
    norm2_gain: Array2<F>,
}

/// The frozen causal language model. Weights are seeded at construction and
/// never change; forward passes are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone<F: Real> {
    pub config: BackboneConfig,
    token_embeddings: Array2<F>,
    layers: Vec<BackboneLayer<F>>,
}

impl<F: Real> FrozenBackbone<F> {
    pub fn init(config: BackboneConfig) -> Self {
        let mut rng = rng_from_seed(derive_seed(config.seed, "frozen-backbone"));
        let token_embeddings = normal_matrix(&mut rng, config.base_vocab, config.e, 0.5);
        let layers = (0..config.layers)
            .map(|_| BackboneLayer {
                attn: AttentionWeights::init(&mut rng, config.e),
                norm1_gain: Array2::ones((1, config.e)),
                ffn: FfnWeights::init(&mut rng, config.e, 2 * config.e),
                norm2_gain: Array2::ones((1, config.e)),
            })
            .collect();
        Self {
            config,
            token_embeddings,
            layers,
        }
    }

    pub fn e(&self) -> usize {
        self.config.e
    }

    pub fn base_vocab(&self) -> usize {
        self.config.base_vocab
    }

    pub fn token_embeddings(&self) -> &Array2<F> {
        &self.token_embeddings
    }

    /// SHA-256 over every weight tensor in a fixed order. The frozen
    /// contract asserts this is identical before and after training.
    pub fn weight_hash(&self) -> String {
        let mut bytes = matrix_le_bytes(&self.token_embeddings);
        for layer in &self.layers {
            for (_, t) in layer.attn.tensors() {
                bytes.extend_from_slice(&matrix_le_bytes(t));
            }
            bytes.extend_from_slice(&matrix_le_bytes(&layer.norm1_gain));
            for (_, t) in layer.ffn.tensors() {
                bytes.extend_from_slice(&matrix_le_bytes(t));
            }
            bytes.extend_from_slice(&matrix_le_bytes(&layer.norm2_gain));
        }
        sha256_hex(&bytes)
    }
}

// ── Operations ─────────────────────────────────────────────────────────

/// g · H_cap reshaped row-major into k rows of width e.
pub fn map_visual_embedding<F: Real>(
    g: &VisualEmbedding<F>,
    h: &AlignmentMap<F>,
) -> Result<FeatureMatrix<F>> {
    if g.len() != h.d() {
        return Err(MgccError::Dimension(format!(
            "visual embedding width {} does not match alignment map rows {}",
            g.len(),
            h.d()
        )));
    }
    let mut graph = Graph::new();
    let g_node = graph.leaf(Array2::from_shape_vec((1, g.len()), g.0.clone()).unwrap());
    let h_node = graph.leaf(h.matrix.clone());
    let out = map_visual_embedding_graph(&mut graph, g_node, h_node, h.k(), h.e());
    Ok(graph.value(out).clone())
}

pub fn map_visual_embedding_graph<F: Real>(
    graph: &mut Graph<F>,
    g_row: NodeId,
    h_cap: NodeId,
    k: usize,
    e: usize,
) -> NodeId {
    let product = graph.matmul(g_row, h_cap);
    graph.reshape(product, k, e)
}

/// Gather rows of Emd for the given image-token indices (0-based within the
/// image-token block).
pub fn lookup_image_token_embeddings<F: Real>(
    ids: &[usize],
    emd: &ImageTokenEmbeddings<F>,
) -> Result<FeatureMatrix<F>> {
    let n = emd.n();
    if let Some(&bad) = ids.iter().find(|&&id| id >= n) {
        return Err(MgccError::Index(format!(
            "image token id {bad} out of range for n = {n}"
        )));
    }
    let mut graph = Graph::new();
    let emd_node = graph.leaf(emd.matrix.clone());
    let out = graph.gather_rows(emd_node, ids.to_vec());
    Ok(graph.value(out).clone())
}

/// Per-position embedding sequence for a story: caption tokens through the
/// frozen base table, each image as k alignment-mapped rows, and the n image
/// tokens appended at the end. The mask marks exactly those trailing rows.
pub fn build_interleaved_sequence<F: Real>(
    story: &StoryExample,
    backbone: &FrozenBackbone<F>,
    h: &AlignmentMap<F>,
    emd: &ImageTokenEmbeddings<F>,
    encoder: &dyn VisualEncoder<F>,
) -> Result<(FeatureMatrix<F>, ImageTokenMask)> {
    let mut graph = Graph::new();
    let staged = StagedAdapters {
        h_cap: graph.leaf(h.matrix.clone()),
        emd: graph.leaf(emd.matrix.clone()),
    };
    let (seq, mask) = build_interleaved_graph(&mut graph, story, backbone, h, emd, encoder, staged)?;
    Ok((graph.value(seq).clone(), mask))
}

/// Node ids of the trainable adapters once staged on a graph.
#[derive(Debug, Clone, Copy)]
pub struct StagedAdapters {
    pub h_cap: NodeId,
    pub emd: NodeId,
}

/// Graph-building variant of [`build_interleaved_sequence`]; the trainer
/// stages H_cap and Emd as leaves and harvests their gradients.
pub fn build_interleaved_graph<F: Real>(
    graph: &mut Graph<F>,
    story: &StoryExample,
    backbone: &FrozenBackbone<F>,
    h: &AlignmentMap<F>,
    emd: &ImageTokenEmbeddings<F>,
    encoder: &dyn VisualEncoder<F>,
    staged: StagedAdapters,
) -> Result<(NodeId, ImageTokenMask)> {
    let e = backbone.e();
    if h.e() != e || emd.e() != e {
        return Err(MgccError::Dimension(format!(
            "adapter width ({} / {}) does not match backbone width {e}",
            h.e(),
            emd.e()
        )));
    }
    let base = graph.leaf(backbone.token_embeddings().clone());

    let mut parts = Vec::new();
    for item in story.items() {
        match item {
            StoryItem::Caption(text) => {
                let tokens = tokenize(text, backbone.base_vocab())?;
                parts.push(graph.gather_rows(base, tokens.ids));
            }
            StoryItem::Image(img) => {
                let embedding = encoder.encode(img)?;
                if embedding.len() != h.d() {
                    return Err(MgccError::Dimension(format!(
                        "encoder width {} does not match alignment map rows {}",
                        embedding.len(),
                        h.d()
                    )));
                }
                let row =
                    graph.leaf(Array2::from_shape_vec((1, embedding.len()), embedding.0).unwrap());
                parts.push(map_visual_embedding_graph(graph, row, staged.h_cap, h.k(), e));
            }
        }
    }
    let n = emd.n();
    parts.push(graph.gather_rows(staged.emd, (0..n).collect()));

    let seq = graph.concat_rows(parts);
    let len = graph.value(seq).nrows();
    Ok((seq, ImageTokenMask::trailing(len, n)))
}

/// Run the frozen backbone over an embedded sequence, producing the
/// multimodal hidden states f_mm.
pub fn forward_hidden_states<F: Real>(
    seq: &FeatureMatrix<F>,
    backbone: &FrozenBackbone<F>,
) -> Result<FeatureMatrix<F>> {
    if seq.ncols() != backbone.e() {
        return Err(MgccError::Dimension(format!(
            "sequence width {} does not match backbone width {}",
            seq.ncols(),
            backbone.e()
        )));
    }
    let mut graph = Graph::new();
    let seq_node = graph.leaf(seq.clone());
    let out = forward_hidden_graph(&mut graph, seq_node, backbone);
    Ok(graph.value(out).clone())
}

/// Graph-building variant of [`forward_hidden_states`]. A 0-layer backbone
/// is the identity (no positional term is added).
pub fn forward_hidden_graph<F: Real>(
    graph: &mut Graph<F>,
    seq: NodeId,
    backbone: &FrozenBackbone<F>,
) -> NodeId {
    if backbone.layers.is_empty() {
        return seq;
    }
    let len = graph.value(seq).nrows();
    let positions = graph.leaf(sinusoidal_positions(len, backbone.e()));
    let mut x = graph.add(seq, positions);
    for layer in &backbone.layers {
        let g1 = graph.leaf(layer.norm1_gain.clone());
        let attn_nodes = AttnNodes::stage(graph, &layer.attn);
        let normed = rms_norm_graph(graph, x, g1);
        let attn = attention_graph(graph, normed, normed, attn_nodes, backbone.config.heads, true);
        x = graph.add(x, attn);

        let g2 = graph.leaf(layer.norm2_gain.clone());
        let ffn_nodes = FfnNodes::stage(graph, &layer.ffn);
        let normed2 = rms_norm_graph(graph, x, g2);
        let ffn = ffn_graph(graph, normed2, ffn_nodes);
        x = graph.add(x, ffn);
    }
    x
}
