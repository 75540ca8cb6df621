//! Training: per-example loss graphs (CE over the image-token ids appended
//! after the caption, MSE between the mapped conditioning and the text-
//! encoder target), batch gradient accumulation, and the Adam step.
//!
//! Per-example gradients are independent, so the batch fans out through
//! `exec::map`; accumulation happens afterwards in fixed batch order, which
//! keeps training bit-deterministic regardless of thread count.

use super::adam::OptimizerState;
use super::params::{StagedParams, TrainableParams};
use crate::autodiff::{Graph, NodeId};
use crate::backbone::{
    build_interleaved_graph, forward_hidden_graph, FrozenBackbone, StoryExample, StoryItem,
    ToyVisualEncoder, VisualEncoder,
};
use crate::config::MgccConfig;
use crate::error::{MgccError, Result};
use crate::exec;
use crate::mapper::{map_to_conditioning_graph, TargetEncoder, ToyTargetEncoder};
use crate::pixels::PixelImage;
use crate::refinement::refine_stack_graph;
use crate::util::{derive_seed, sha256_hex};
use crate::Real;
use ndarray::Array2;

/// One training pair from the synthetic (or any) dataset.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: PixelImage,
    pub caption: String,
}

/// Loss values for one example or one batch (means over the batch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
}

/// The frozen half of the model: backbone plus both toy/plugin encoders.
pub struct FrozenStack<F: Real> {
    pub backbone: FrozenBackbone<F>,
    pub visual_encoder: Box<dyn VisualEncoder<F>>,
    pub target_encoder: Box<dyn TargetEncoder<F>>,
    visual_fingerprint: String,
    target_fingerprint: String,
}

impl<F: Real> FrozenStack<F> {
    pub fn from_config(cfg: &MgccConfig) -> Result<Self> {
        Self::with_plugins(cfg, None, None)
    }

    /// Build with optional user plugins; required when the config selects
    /// `"external"` encoders.
    pub fn with_plugins(
        cfg: &MgccConfig,
        visual: Option<Box<dyn VisualEncoder<F>>>,
        target: Option<Box<dyn TargetEncoder<F>>>,
    ) -> Result<Self> {
        let m = &cfg.model;
        let backbone = FrozenBackbone::init(crate::backbone::BackboneConfig {
            base_vocab: m.base_vocab,
            e: m.e,
            layers: m.backbone_layers,
            heads: m.backbone_heads,
            seed: derive_seed(cfg.seed, "backbone"),
        });
        let (visual_encoder, visual_fingerprint): (Box<dyn VisualEncoder<F>>, String) =
            match cfg.visual_encoder.as_str() {
                "toy" => {
                    let enc = ToyVisualEncoder::init(
                        derive_seed(cfg.seed, "visual"),
                        m.image_size as u32,
                        m.image_size as u32,
                        m.image_channels as u32,
                        m.d,
                    );
                    let hash = enc.weight_hash();
                    (Box::new(enc), hash)
                }
                "external" => {
                    let enc = visual.ok_or_else(|| {
                        MgccError::Config(
                            "visual_encoder = \"external\" requires a registered plugin".into(),
                        )
                    })?;
                    (enc, "external".to_string())
                }
                other => {
                    return Err(MgccError::Config(format!(
                        "unknown visual encoder {other:?}"
                    )))
                }
            };
        let (target_encoder, target_fingerprint): (Box<dyn TargetEncoder<F>>, String) =
            match cfg.target_encoder.as_str() {
                "toy" => {
                    let enc: ToyTargetEncoder<F> = ToyTargetEncoder::init(
                        derive_seed(cfg.seed, "target"),
                        m.queries,
                        m.conditioning_width,
                    );
                    let hash = enc.weight_hash();
                    (Box::new(enc), hash)
                }
                "external" => {
                    let enc = target.ok_or_else(|| {
                        MgccError::Config(
                            "target_encoder = \"external\" requires a registered plugin".into(),
                        )
                    })?;
                    (enc, "external".to_string())
                }
                other => {
                    return Err(MgccError::Config(format!(
                        "unknown target encoder {other:?}"
                    )))
                }
            };
        Ok(Self {
            backbone,
            visual_encoder,
            target_encoder,
            visual_fingerprint,
            target_fingerprint,
        })
    }

    /// Combined byte hash over every frozen weight; the frozen contract
    /// asserts it never changes across training.
    pub fn weight_hash(&self) -> String {
        let combined = format!(
            "{}|{}|{}",
            self.backbone.weight_hash(),
            self.visual_fingerprint,
            self.target_fingerprint
        );
        sha256_hex(combined.as_bytes())
    }
}

/// Loss graph for one (image, caption) pair. Returns (total, ce, mse).
///
/// The teacher-forced sequence is [image tokens, caption tokens, n image
/// tokens]; CE scores the n positions that predict the image-token ids, and
/// MSE aligns the mapped conditioning with the target encoder's embedding
/// of the caption.
pub fn example_loss_graph<F: Real>(
    g: &mut Graph<F>,
    example: &TrainExample,
    frozen: &FrozenStack<F>,
    params: &TrainableParams<F>,
    staged: &StagedParams,
    lambda_ce: f64,
    lambda_mse: f64,
) -> Result<(NodeId, NodeId, NodeId)> {
    let story = StoryExample::new(vec![
        StoryItem::Image(example.image.clone()),
        StoryItem::Caption(example.caption.clone()),
    ])?;
    let (seq, mask) = build_interleaved_graph(
        g,
        &story,
        &frozen.backbone,
        &params.h_cap,
        &params.emd,
        frozen.visual_encoder.as_ref(),
        staged.adapters,
    )?;
    let f_mm = forward_hidden_graph(g, seq, &frozen.backbone);

    // Next-token CE over the trailing image tokens, with the output head
    // tied to [base embeddings; Emd].
    let len = g.value(f_mm).nrows();
    let n = params.emd.n();
    let base_vocab = frozen.backbone.base_vocab();
    let hidden = g.slice_rows(f_mm, len - n - 1, len - 1);
    let base_table = g.leaf(frozen.backbone.token_embeddings().clone());
    let extended = g.concat_rows(vec![base_table, staged.adapters.emd]);
    let head = g.transpose(extended);
    let logits = g.matmul(hidden, head);
    let targets: Vec<usize> = (0..n).map(|j| base_vocab + j).collect();
    let ce = g.cross_entropy_mean(logits, targets);

    // MSE between the mapped conditioning and the caption's target.
    let refined = refine_stack_graph(g, f_mm, &mask, &staged.cmrm);
    let conditioning = map_to_conditioning_graph(g, refined, &staged.mapper);
    let target = frozen.target_encoder.encode(&example.caption)?;
    let target_node = g.leaf(target);
    let mse = g.mse(conditioning, target_node);

    let ce_scaled = g.scale(ce, F::from_f64(lambda_ce));
    let mse_scaled = g.scale(mse, F::from_f64(lambda_mse));
    let total = g.add(ce_scaled, mse_scaled);
    Ok((total, ce, mse))
}

/// Loss and per-tensor gradients for one example; gradients align with
/// [`TrainableParams::tensors`] order.
pub fn example_loss_and_grads<F: Real>(
    example: &TrainExample,
    frozen: &FrozenStack<F>,
    params: &TrainableParams<F>,
    lambda_ce: f64,
    lambda_mse: f64,
) -> Result<(LossReport, Vec<Array2<F>>)> {
    let mut g = Graph::new();
    let staged = StagedParams::stage(&mut g, params);
    let (total, ce, mse) =
        example_loss_graph(&mut g, example, frozen, params, &staged, lambda_ce, lambda_mse)?;
    let report = LossReport {
        ce: g.value(ce)[[0, 0]].to_f64(),
        mse: g.value(mse)[[0, 0]].to_f64(),
        total: g.value(total)[[0, 0]].to_f64(),
    };
    let grads = g.backward(total);
    let harvested = staged
        .named_nodes()
        .iter()
        .map(|(_, id)| grads.wrt(*id).clone())
        .collect();
    Ok((report, harvested))
}

/// One training step over a batch: mean loss, mean gradients, one Adam
/// update applied to the trainable parameters only.
pub fn training_step<F: Real>(
    batch: &[TrainExample],
    params: &mut TrainableParams<F>,
    opt: &mut OptimizerState<F>,
    frozen: &FrozenStack<F>,
    loss_weights: (f64, f64),
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(MgccError::Training("batch must be nonempty".into()));
    }
    if let Some(bad) = batch.iter().position(|ex| ex.caption.is_empty()) {
        return Err(MgccError::Training(format!(
            "batch example {bad} has an empty caption"
        )));
    }
    let (lambda_ce, lambda_mse) = loss_weights;

    let shared: &TrainableParams<F> = params;
    let results = exec::map(batch, |example| {
        example_loss_and_grads(example, frozen, shared, lambda_ce, lambda_mse)
    });

    let mut mean_grads: Option<Vec<Array2<F>>> = None;
    let mut sums = (0.0f64, 0.0f64, 0.0f64);
    for (index, result) in results.into_iter().enumerate() {
        let (report, grads) = result?;
        if !report.total.is_finite() {
            return Err(MgccError::Training(format!(
                "non-finite loss at batch index {index}: {report:?}"
            )));
        }
        sums.0 += report.ce;
        sums.1 += report.mse;
        sums.2 += report.total;
        match &mut mean_grads {
            None => mean_grads = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    *a = &*a + &g;
                }
            }
        }
    }
    let scale = F::from_f64(1.0 / batch.len() as f64);
    let mut grads = mean_grads.expect("batch is nonempty");
    for g in &mut grads {
        g.mapv_inplace(|v| v * scale);
    }
    opt.apply(params, &grads)?;

    let b = batch.len() as f64;
    Ok(LossReport {
        ce: sums.0 / b,
        mse: sums.1 / b,
        total: sums.2 / b,
    })
}
