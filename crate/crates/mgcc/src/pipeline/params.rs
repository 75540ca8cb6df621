//! The five trainable parameter groups and their staging onto a graph.
//!
//! Exactly these tensors are updated by training: the alignment map H_cap,
//! the image-token embeddings, the refinement stack, the mapper, and the
//! query bank. Tensor names here are the checkpoint names.

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{AlignmentMap, ImageTokenEmbeddings, StagedAdapters};
use crate::config::ModelConfig;
use crate::mapper::{MapperParams, QueryBank, StagedMapper};
use crate::refinement::{RefinementStack, StagedRefinementLayer};
use crate::util::derive_seed;
use crate::Real;
use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams<F: Real> {
    pub h_cap: AlignmentMap<F>,
    pub emd: ImageTokenEmbeddings<F>,
    pub cmrm: RefinementStack<F>,
    pub mapper: MapperParams<F>,
    pub queries: QueryBank<F>,
}

impl<F: Real> TrainableParams<F> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            h_cap: AlignmentMap::init(derive_seed(seed, "h_cap"), cfg.d, cfg.k, cfg.e),
            emd: ImageTokenEmbeddings::init(derive_seed(seed, "emd"), cfg.n, cfg.e),
            cmrm: RefinementStack::init(
                derive_seed(seed, "cmrm"),
                cfg.cmrm_layers,
                cfg.e,
                cfg.cmrm_proj_width,
                cfg.cmrm_ffn_depth,
            ),
            mapper: MapperParams::init(
                derive_seed(seed, "mapper"),
                cfg.e,
                cfg.mapper_width,
                cfg.conditioning_width,
                cfg.mapper_heads,
            ),
            queries: QueryBank::init(derive_seed(seed, "queries"), cfg.queries, cfg.mapper_width),
        }
    }

    /// Every trainable tensor with its checkpoint name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<F>)> {
        let mut out: Vec<(String, &Array2<F>)> = vec![
            ("h_cap".into(), &self.h_cap.matrix),
            ("emd".into(), &self.emd.matrix),
        ];
        for (name, t) in self.cmrm.tensors() {
            out.push((format!("cmrm.{name}"), t));
        }
        for (name, t) in self.mapper.tensors() {
            out.push((format!("mapper.{name}"), t));
        }
        out.push(("queries".into(), &self.queries.queries));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out: Vec<(String, &mut Array2<F>)> = vec![
            ("h_cap".into(), &mut self.h_cap.matrix),
            ("emd".into(), &mut self.emd.matrix),
        ];
        for (name, t) in self.cmrm.tensors_mut() {
            out.push((format!("cmrm.{name}"), t));
        }
        for (name, t) in self.mapper.tensors_mut() {
            out.push((format!("mapper.{name}"), t));
        }
        out.push(("queries".into(), &mut self.queries.queries));
        out
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors().len()
    }

    pub fn element_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Cast every tensor to another precision (training checkpoints store
    /// 32-bit, gradient checks run 64-bit).
    pub fn cast<G: Real>(&self) -> TrainableParams<G> {
        let convert = |a: &Array2<F>| a.mapv(|v| G::from_f64(v.to_f64()));
        let mut out = TrainableParams::<G> {
            h_cap: AlignmentMap::new(
                convert(&self.h_cap.matrix),
                self.h_cap.k(),
                self.h_cap.e(),
            )
            .expect("shape preserved by cast"),
            emd: ImageTokenEmbeddings::new(convert(&self.emd.matrix)),
            cmrm: RefinementStack {
                layers: Vec::new(),
            },
            mapper: MapperParams::init(0, self.mapper.e(), self.mapper.m(), self.mapper.c(), self.mapper.heads()),
            queries: QueryBank {
                queries: convert(&self.queries.queries),
            },
        };
        // Rebuild the structured groups tensor-by-tensor so shapes and
        // variants (ffn depth) carry over exactly.
        out.cmrm = cast_stack(&self.cmrm);
        let src = self.mapper.tensors();
        for ((_, dst), (_, s)) in out.mapper.tensors_mut().into_iter().zip(src) {
            *dst = convert(s);
        }
        out
    }
}

fn cast_stack<F: Real, G: Real>(stack: &RefinementStack<F>) -> RefinementStack<G> {
    use crate::refinement::{RefinementFfn, RefinementLayerParams};
    let convert = |a: &Array2<F>| a.mapv(|v| G::from_f64(v.to_f64()));
    let cast_ffn = |ffn: &RefinementFfn<F>| match ffn {
        RefinementFfn::Linear { w } => RefinementFfn::Linear { w: convert(w) },
        RefinementFfn::TwoLayer { w1, b1, w2, b2 } => RefinementFfn::TwoLayer {
            w1: convert(w1),
            b1: convert(b1),
            w2: convert(w2),
            b2: convert(b2),
        },
    };
    RefinementStack {
        layers: stack
            .layers
            .iter()
            .map(|l| RefinementLayerParams {
                proj_q_i: convert(&l.proj_q_i),
                proj_q_mm: convert(&l.proj_q_mm),
                proj_t: convert(&l.proj_t),
                proj_i: convert(&l.proj_i),
                ffn_i: cast_ffn(&l.ffn_i),
                ffn_mm: cast_ffn(&l.ffn_mm),
            })
            .collect(),
    }
}

/// All trainable tensors staged as graph leaves, with node ids in the same
/// order as [`TrainableParams::tensors`].
pub struct StagedParams {
    pub adapters: StagedAdapters,
    pub cmrm: Vec<StagedRefinementLayer>,
    pub mapper: StagedMapper,
    named: Vec<(String, NodeId)>,
}

impl StagedParams {
    pub fn stage<F: Real>(g: &mut Graph<F>, params: &TrainableParams<F>) -> Self {
        let adapters = StagedAdapters {
            h_cap: g.leaf(params.h_cap.matrix.clone()),
            emd: g.leaf(params.emd.matrix.clone()),
        };
        let cmrm: Vec<StagedRefinementLayer> = params
            .cmrm
            .layers
            .iter()
            .map(|l| StagedRefinementLayer::stage(g, l))
            .collect();
        let mapper = StagedMapper::stage(g, &params.mapper, &params.queries);

        let mut named = vec![
            ("h_cap".to_string(), adapters.h_cap),
            ("emd".to_string(), adapters.emd),
        ];
        for (i, layer) in cmrm.iter().enumerate() {
            named.push((format!("cmrm.layer{i}.proj_q_I"), layer.proj_q_i));
            named.push((format!("cmrm.layer{i}.proj_q_mm"), layer.proj_q_mm));
            named.push((format!("cmrm.layer{i}.proj_t"), layer.proj_t));
            named.push((format!("cmrm.layer{i}.proj_I"), layer.proj_i));
            for (ffn, tag) in [(&layer.ffn_i, "ffn_I"), (&layer.ffn_mm, "ffn_mm")] {
                match ffn {
                    crate::refinement::StagedFfn::Linear { w } => {
                        named.push((format!("cmrm.layer{i}.{tag}"), *w));
                    }
                    crate::refinement::StagedFfn::TwoLayer { w1, b1, w2, b2 } => {
                        named.push((format!("cmrm.layer{i}.{tag}.w1"), *w1));
                        named.push((format!("cmrm.layer{i}.{tag}.b1"), *b1));
                        named.push((format!("cmrm.layer{i}.{tag}.w2"), *w2));
                        named.push((format!("cmrm.layer{i}.{tag}.b2"), *b2));
                    }
                }
            }
        }
        named.push((
            "mapper.in_adapter.w".to_string(),
            mapper.input.w,
        ));
        named.push(("mapper.in_adapter.b".to_string(), mapper.input.b));
        for (i, layer) in mapper.encoder.iter().enumerate() {
            for (n, id) in [
                ("wq", layer.attn.wq),
                ("wk", layer.attn.wk),
                ("wv", layer.attn.wv),
                ("wo", layer.attn.wo),
            ] {
                named.push((format!("mapper.enc{i}.attn.{n}"), id));
            }
            named.push((format!("mapper.enc{i}.norm1"), layer.norm1));
            for (n, id) in [
                ("w1", layer.ffn.w1),
                ("b1", layer.ffn.b1),
                ("w2", layer.ffn.w2),
                ("b2", layer.ffn.b2),
            ] {
                named.push((format!("mapper.enc{i}.ffn.{n}"), id));
            }
            named.push((format!("mapper.enc{i}.norm2"), layer.norm2));
        }
        for (i, layer) in mapper.decoder.iter().enumerate() {
            for (n, id) in [
                ("wq", layer.self_attn.wq),
                ("wk", layer.self_attn.wk),
                ("wv", layer.self_attn.wv),
                ("wo", layer.self_attn.wo),
            ] {
                named.push((format!("mapper.dec{i}.self_attn.{n}"), id));
            }
            named.push((format!("mapper.dec{i}.norm1"), layer.norm1));
            for (n, id) in [
                ("wq", layer.cross_attn.wq),
                ("wk", layer.cross_attn.wk),
                ("wv", layer.cross_attn.wv),
                ("wo", layer.cross_attn.wo),
            ] {
                named.push((format!("mapper.dec{i}.cross_attn.{n}"), id));
            }
            named.push((format!("mapper.dec{i}.norm2"), layer.norm2));
            for (n, id) in [
                ("w1", layer.ffn.w1),
                ("b1", layer.ffn.b1),
                ("w2", layer.ffn.w2),
                ("b2", layer.ffn.b2),
            ] {
                named.push((format!("mapper.dec{i}.ffn.{n}"), id));
            }
            named.push((format!("mapper.dec{i}.norm3"), layer.norm3));
        }
        named.push(("mapper.out_adapter.w".to_string(), mapper.output.w));
        named.push(("mapper.out_adapter.b".to_string(), mapper.output.b));
        named.push(("queries".to_string(), mapper.queries));

        Self {
            adapters,
            cmrm,
            mapper,
            named,
        }
    }

    /// (name, node id) pairs aligned with [`TrainableParams::tensors`].
    pub fn named_nodes(&self) -> &[(String, NodeId)] {
        &self.named
    }
}
