//! Full model assembly: expression encoding, multimodal fusion, L stacked
//! collection-distribution layers, shared prediction heads, and the deep
//! supervision loss. Ablation variants reroute the forward pass; the
//! parameter set is identical across variants so checkpoints stay
//! interchangeable.

use crate::blocks::Mlp3Params;
use crate::config::{Ablation, Config};
use crate::decoder::{self, SelectionKind, TempCdLayerParams};
use crate::episodes::{self, Episode, FusionParams};
use crate::heads::{self, HeadParams, LayerPreds, LossTerms};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Precision, Tape, TensorId};
use rand_chacha::ChaCha8Rng;

pub const PATCH: usize = 2;

struct ModelParams {
    expr_proj: TensorId,
    slots: TensorId,
    fusion: FusionParams,
    layers: Vec<TempCdLayerParams>,
    heads: HeadParams,
}

fn bind_model(b: &mut Binder, cfg: &Config) -> ModelParams {
    let c = cfg.model.c;
    let expr_proj = b.param("expr.proj", &[episodes::EXPR_DIM, c], Init::XavierUniform);
    let slots = b.param("slots", &[cfg.model.n, c], Init::Normal(1.0));
    let fusion = FusionParams::bind(b, "fusion", PATCH, c);
    let layers = (0..cfg.model.l)
        .map(|l| {
            TempCdLayerParams::bind(b, &format!("layer.{l}"), c, cfg.model.heads, cfg.model.h_mlp, cfg.data.t)
        })
        .collect();
    let heads = HeadParams::bind(b, "heads", c, cfg.model.h_mlp);
    ModelParams { expr_proj, slots, fusion, layers, heads }
}

pub struct Model {
    pub config: Config,
    pub store: ParamStore,
}

/// Tape handles produced by one forward pass.
pub struct ForwardResult {
    pub layer_preds: Vec<LayerPreds>,
    /// Final layer's mask logits `[T,H',W']` and boxes `[T,4]`.
    pub final_logits: TensorId,
    pub final_boxes: TensorId,
    /// Per-layer referent slot chosen by the heads, per frame.
    pub head_indices: Vec<Vec<usize>>,
    /// (store entry index, tape id) pairs for gradient collection.
    pub bound: Vec<(usize, TensorId)>,
    pub loss: Option<LossTerms>,
}

/// Scalar loss values for logging.
#[derive(Clone, Debug, Default)]
pub struct LossBreakdown {
    pub dice: f64,
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
    pub total: f64,
    pub per_layer: Vec<[f64; 4]>,
}

impl Model {
    /// Creates every parameter eagerly so later binds can share the store
    /// immutably across threads.
    pub fn new(config: Config) -> Model {
        config.validate().expect("invalid configuration");
        let mut store = ParamStore::new(config.data.seed);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &mut store);
        bind_model(&mut binder, &config);
        Model { config, store }
    }

    pub fn from_store(config: Config, store: ParamStore) -> Model {
        Model { config, store }
    }

    /// One forward pass over an episode. `noise` enables Gumbel sampling in
    /// the referent selection (training only); `with_loss` adds the deep
    /// supervision loss against the episode's ground truth.
    pub fn forward(
        &self,
        t: &mut Tape,
        ep: &Episode,
        mut noise: Option<&mut ChaCha8Rng>,
        with_loss: bool,
    ) -> ForwardResult {
        let cfg = &self.config;
        assert_eq!(ep.height, cfg.data.h, "episode height {} vs config {}", ep.height, cfg.data.h);
        assert_eq!(ep.width, cfg.data.w, "episode width {} vs config {}", ep.width, cfg.data.w);
        assert_eq!(ep.frames_len, cfg.data.t, "episode frames {} vs config {}", ep.frames_len, cfg.data.t);
        let (fh, fw) = cfg.feat_hw();
        let frames_len = ep.frames_len;

        let mut binder = Binder::read_only(t, &self.store);
        let p = bind_model(&mut binder, cfg);
        let bound = binder.bound().to_vec();

        let fs = episodes::encode_expression(t, &ep.expression, p.expr_proj);
        let fused =
            episodes::fuse_features(t, &ep.frames, frames_len, ep.height, ep.width, PATCH, fs, &p.fusion);

        let selection_kind = match cfg.ablation {
            Ablation::NoGumbelTopk => SelectionKind::DetachedTopk,
            _ => SelectionKind::StraightThrough,
        };

        let mut layer_preds = Vec::with_capacity(cfg.model.l);
        let mut head_indices = Vec::with_capacity(cfg.model.l);

        match cfg.ablation {
            Ablation::GlobalQuery => {
                // One shared query set attends to every frame's features.
                let c = cfg.model.c;
                let n = cfg.model.n;
                let fs_row = t.reshape(fs, &[1, c]);
                let mut queries = t.add(fs_row, p.slots);
                let all_positions = t.reshape(fused, &[1, frames_len * fh * fw, c]);
                for lp in &p.layers {
                    let qb = t.reshape(queries, &[1, n, c]);
                    let decoded = crate::blocks::detr_decode_batched(t, qb, all_positions, &lp.detr);
                    queries = t.reshape(decoded, &[n, c]);
                    let (best, rhat) = heads::final_referent_global(t, queries, fs, frames_len, &p.heads);
                    head_indices.push(vec![best; frames_len]);
                    let logits = heads::segmentation_head(t, rhat, fused, fh, fw, &p.heads);
                    let boxes = heads::box_head(t, rhat, &p.heads.box_mlp);
                    layer_preds.push(LayerPreds { mask_logits: logits, boxes });
                }
            }
            _ => {
                let local = cfg.ablation == Ablation::LocalQuery;
                let mut state = decoder::init_state(t, fs, p.slots, frames_len);
                for lp in &p.layers {
                    let layer_noise = match &mut noise {
                        Some(rng) => Some(&mut **rng),
                        None => None,
                    };
                    let (next, _, dist) =
                        decoder::run_layer(t, &state, fused, lp, fs, cfg.model.tau, layer_noise, selection_kind, local);
                    let (indices, rhat) = if local {
                        heads::final_referent_local(t, next.queries, fs, &p.heads)
                    } else {
                        heads::final_referent(t, dist.as_ref().unwrap(), fs, &p.heads)
                    };
                    head_indices.push(indices);
                    let logits = heads::segmentation_head(t, rhat, fused, fh, fw, &p.heads);
                    let boxes = heads::box_head(t, rhat, &p.heads.box_mlp);
                    layer_preds.push(LayerPreds { mask_logits: logits, boxes });
                    state = next;
                }
            }
        }

        let final_logits = layer_preds.last().unwrap().mask_logits;
        let final_boxes = layer_preds.last().unwrap().boxes;

        let loss = if with_loss {
            let gt_small = downsampled_gt(ep, fh, fw);
            let gt_mask = t.constant(gt_small, &[frames_len, fh, fw]);
            let gt_boxes = t.constant(ep.gt_boxes.clone(), &[frames_len, 4]);
            Some(heads::total_loss(t, &layer_preds, gt_mask, gt_boxes, &cfg.loss))
        } else {
            None
        };

        ForwardResult { layer_preds, final_logits, final_boxes, head_indices, bound, loss }
    }

    /// Deterministic evaluation: binarized full-resolution masks per frame,
    /// from bilinearly upsampled final-layer logits.
    pub fn predict_masks(&self, ep: &Episode) -> Vec<Vec<bool>> {
        let mut tape = Tape::with_precision(Precision::from_env());
        let out = self.forward(&mut tape, ep, None, false);
        let (fh, fw) = self.config.feat_hw();
        let logits = tape.data(out.final_logits);
        let mut masks = Vec::with_capacity(ep.frames_len);
        for ti in 0..ep.frames_len {
            let frame = &logits[ti * fh * fw..(ti + 1) * fh * fw];
            let up = heads::bilinear_upsample(frame, fh, fw, ep.height, ep.width);
            masks.push(crate::metrics::binarize(&up, self.config.eval.threshold));
        }
        masks
    }

    /// Convenience accessor for the box MLP (shared by heads).
    pub fn box_mlp<'a>(&self, p: &'a HeadParams) -> &'a Mlp3Params {
        &p.box_mlp
    }
}

/// Ground-truth masks area-downsampled to feature resolution.
pub fn downsampled_gt(ep: &Episode, fh: usize, fw: usize) -> Vec<f64> {
    let factor = ep.height / fh;
    assert_eq!(ep.width / fw, factor);
    let hw = ep.height * ep.width;
    let mut out = Vec::with_capacity(ep.frames_len * fh * fw);
    for ti in 0..ep.frames_len {
        let frame = &ep.gt_masks[ti * hw..(ti + 1) * hw];
        out.extend(heads::downsample_mask_area(frame, ep.height, ep.width, factor));
    }
    out
}

pub fn breakdown_from_terms(t: &Tape, terms: &LossTerms) -> LossBreakdown {
    LossBreakdown {
        dice: t.data(terms.dice)[0],
        focal: t.data(terms.focal)[0],
        giou: t.data(terms.giou)[0],
        l1: t.data(terms.l1)[0],
        total: t.data(terms.total)[0],
        per_layer: terms.per_layer.clone(),
    }
}
