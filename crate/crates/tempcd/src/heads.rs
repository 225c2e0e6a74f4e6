//! Prediction heads (final referent assembly, segmentation, boxes) and the
//! four training losses (dice, focal, GIoU, L1).
//!
//! Supervision targets the referent directly in every frame; there is no
//! assignment or matching step anywhere in this module.

use crate::blocks::{self, LnParams, Mlp3Params, COSINE_EPS};
use crate::decoder::DistributionOutput;
use crate::params::{Binder, Init};
use crate::tensor::{Tape, TensorId};

#[derive(Clone, Copy)]
pub struct HeadParams {
    /// `[C,1]` temporal gate over cross-object sequences (score path only;
    /// the argmax selection passes no gradient back into it).
    pub gate_w: TensorId,
    pub final_mlp: Mlp3Params,
    pub final_ln: LnParams,
    pub seg_q_w: TensorId,
    pub seg_q_b: TensorId,
    pub seg_v_w: TensorId,
    pub seg_v_b: TensorId,
    pub box_mlp: Mlp3Params,
}

impl HeadParams {
    pub fn bind(b: &mut Binder, prefix: &str, c: usize, mlp_hidden: usize) -> HeadParams {
        HeadParams {
            gate_w: b.param(&format!("{prefix}.gate_w"), &[c, 1], Init::XavierUniform),
            final_mlp: Mlp3Params::bind(b, &format!("{prefix}.final_mlp"), c, mlp_hidden),
            final_ln: LnParams::bind(b, &format!("{prefix}.final_ln"), c),
            seg_q_w: b.param(&format!("{prefix}.seg_q_w"), &[c, c], Init::XavierUniform),
            seg_q_b: b.param(&format!("{prefix}.seg_q_b"), &[c], Init::Zeros),
            seg_v_w: b.param(&format!("{prefix}.seg_v_w"), &[c, c], Init::XavierUniform),
            seg_v_b: b.param(&format!("{prefix}.seg_v_b"), &[c], Init::Zeros),
            box_mlp: Mlp3Params::bind_with_out(b, &format!("{prefix}.box_mlp"), c, mlp_hidden, 4),
        }
    }
}

fn cosine_value(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt() + COSINE_EPS;
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt() + COSINE_EPS;
    dot / (na * nb)
}

/// Final referent sequence for prediction: every cross-object sequence is
/// gated over time into a video-level feature, scored against the sentence
/// feature by cosine, and the winning object per frame joins the referent
/// sequence through MLP(LayerNorm(r_i + q^r_i)).
///
/// Returns the per-frame winning slot indices and `[T,C]`.
pub fn final_referent(
    t: &mut Tape,
    dist: &DistributionOutput,
    sentence_feature: TensorId,
    p: &HeadParams,
) -> (Vec<usize>, TensorId) {
    let sh = t.shape(dist.updated_queries).to_vec();
    let (frames, n, c) = (sh[0], sh[1], sh[2]);

    // Eq. 2-form gate over each sequence's T positions.
    let logits = t.matmul(dist.cross_outputs, p.gate_w);
    let gates = t.softmax(logits, 1);
    let weighted = t.mul(gates, dist.cross_outputs);
    let video_level = t.sum_axis(weighted, 1);

    let fs = t.data(sentence_feature).to_vec();
    let mut indices = Vec::with_capacity(frames);
    for i in 0..frames {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..n {
            let u = &t.data(video_level)[(i * n + j) * c..(i * n + j + 1) * c];
            let s = cosine_value(u, &fs);
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        indices.push(best);
    }

    let flat = t.reshape(dist.updated_queries, &[frames * n, c]);
    let rows: Vec<usize> = indices.iter().enumerate().map(|(i, &j)| i * n + j).collect();
    let winners = t.gather(flat, 0, &rows);
    let summed = t.add(dist.referent_sequence, winners);
    let normed = t.layer_norm(summed, p.final_ln.gain, p.final_ln.bias, blocks::LAYER_NORM_EPS);
    let out = blocks::mlp3(t, normed, &p.final_mlp);
    (indices, out)
}

/// Local-query variant: no referent sequence exists, so each frame scores its
/// decoded queries against the sentence feature directly and the winner alone
/// feeds the heads.
pub fn final_referent_local(
    t: &mut Tape,
    decoded: TensorId,
    sentence_feature: TensorId,
    p: &HeadParams,
) -> (Vec<usize>, TensorId) {
    let sh = t.shape(decoded).to_vec();
    let (frames, n, c) = (sh[0], sh[1], sh[2]);
    let fs = t.data(sentence_feature).to_vec();
    let mut indices = Vec::with_capacity(frames);
    for i in 0..frames {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..n {
            let q = &t.data(decoded)[(i * n + j) * c..(i * n + j + 1) * c];
            let s = cosine_value(q, &fs);
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        indices.push(best);
    }
    let flat = t.reshape(decoded, &[frames * n, c]);
    let rows: Vec<usize> = indices.iter().enumerate().map(|(i, &j)| i * n + j).collect();
    let winners = t.gather(flat, 0, &rows);
    let normed = t.layer_norm(winners, p.final_ln.gain, p.final_ln.bias, blocks::LAYER_NORM_EPS);
    let out = blocks::mlp3(t, normed, &p.final_mlp);
    (indices, out)
}

/// Global-query variant: one shared query set for the whole video; the
/// highest-scoring query against the sentence feature is broadcast to every
/// frame.
pub fn final_referent_global(
    t: &mut Tape,
    queries: TensorId,
    sentence_feature: TensorId,
    frames: usize,
    p: &HeadParams,
) -> (usize, TensorId) {
    let sh = t.shape(queries).to_vec();
    let (n, c) = (sh[0], sh[1]);
    let fs = t.data(sentence_feature).to_vec();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..n {
        let q = &t.data(queries)[j * c..(j + 1) * c];
        let s = cosine_value(q, &fs);
        if s > best_score {
            best_score = s;
            best = j;
        }
    }
    let winner = t.gather(queries, 0, &[best]);
    let normed = t.layer_norm(winner, p.final_ln.gain, p.final_ln.bias, blocks::LAYER_NORM_EPS);
    let vec = blocks::mlp3(t, normed, &p.final_mlp);
    let expand = t.constant(vec![0.0; frames], &[frames, 1]);
    let out = t.add(expand, vec);
    (best, out)
}

/// Inner-product segmentation head at feature resolution:
/// `logit(t,p) = <proj_q(referent_t), proj_v(v_t[p])> / sqrt(C)`.
pub fn segmentation_head(
    t: &mut Tape,
    final_ref: TensorId,
    fused: TensorId,
    feat_h: usize,
    feat_w: usize,
    p: &HeadParams,
) -> TensorId {
    let fr = t.shape(final_ref).to_vec();
    let fu = t.shape(fused).to_vec();
    let (frames, c) = (fr[0], fr[1]);
    assert_eq!(
        fu[1],
        feat_h * feat_w,
        "fused feature positions {} do not match {}x{}",
        fu[1],
        feat_h,
        feat_w
    );
    let pq = blocks::linear(t, final_ref, p.seg_q_w, p.seg_q_b);
    let pv = blocks::linear(t, fused, p.seg_v_w, p.seg_v_b);
    let pq_col = t.reshape(pq, &[frames, c, 1]);
    let prod = t.matmul(pv, pq_col);
    let scaled = t.scale(prod, 1.0 / (c as f64).sqrt());
    t.reshape(scaled, &[frames, feat_h, feat_w])
}

/// Box regression: sigmoid(MLP3(referent_t)) as (cx, cy, w, h) in [0,1].
pub fn box_head(t: &mut Tape, final_ref: TensorId, mlp: &Mlp3Params) -> TensorId {
    let raw = blocks::mlp3(t, final_ref, mlp);
    t.sigmoid(raw)
}

// ── Losses ──────────────────────────────────────────────────────────────

/// Dice loss over all pixels and frames jointly, with additive smoothing.
pub fn dice_loss(t: &mut Tape, pred_prob: TensorId, gt: TensorId, smooth: f64) -> TensorId {
    assert_eq!(
        t.shape(pred_prob),
        t.shape(gt),
        "dice shapes disagree: {:?} vs {:?}",
        t.shape(pred_prob),
        t.shape(gt)
    );
    let inter = t.mul(pred_prob, gt);
    let inter_sum = t.sum_all(inter);
    let two_inter = t.scale(inter_sum, 2.0);
    let p_sum = t.sum_all(pred_prob);
    let g_sum = t.sum_all(gt);
    let smooth_t = t.scalar(smooth);
    let num = t.add(two_inter, smooth_t);
    let denom_pg = t.add(p_sum, g_sum);
    let denom = t.add(denom_pg, smooth_t);
    let frac = t.div(num, denom);
    let one = t.scalar(1.0);
    t.sub(one, frac)
}

/// Binary focal loss on sigmoid probabilities, mean over pixels.
/// `-alpha (1-p)^gamma log p` for positives, `-(1-alpha) p^gamma log(1-p)`
/// for negatives, computed from logits in overflow-safe form.
pub fn focal_loss(t: &mut Tape, logits: TensorId, gt: TensorId, alpha: f64, gamma: f64) -> TensorId {
    assert_eq!(
        t.shape(logits),
        t.shape(gt),
        "focal shapes disagree: {:?} vs {:?}",
        t.shape(logits),
        t.shape(gt)
    );
    let p = t.sigmoid(logits);
    let one = t.scalar(1.0);
    let one_minus_p = t.sub(one, p);
    // log p = -softplus(-x); log(1-p) = -softplus(x)
    let neg_logits = t.scale(logits, -1.0);
    let nlog_p = t.softplus(neg_logits);
    let nlog_1mp = t.softplus(logits);
    let pos_w = t.pow_const(one_minus_p, gamma);
    let pos_term0 = t.mul(pos_w, nlog_p);
    let pos_term = t.scale(pos_term0, alpha);
    let neg_w = t.pow_const(p, gamma);
    let neg_term0 = t.mul(neg_w, nlog_1mp);
    let neg_term = t.scale(neg_term0, 1.0 - alpha);
    let gt_pos = t.mul(gt, pos_term);
    let one_minus_gt = t.sub(one, gt);
    let gt_neg = t.mul(one_minus_gt, neg_term);
    let per_pixel = t.add(gt_pos, gt_neg);
    t.mean_all(per_pixel)
}

fn split_boxes(t: &mut Tape, boxes: TensorId) -> [TensorId; 4] {
    // (cx,cy,w,h) columns -> corner tensors [T,1]
    let cx = t.gather(boxes, 1, &[0]);
    let cy = t.gather(boxes, 1, &[1]);
    let w = t.gather(boxes, 1, &[2]);
    let h = t.gather(boxes, 1, &[3]);
    let half_w = t.scale(w, 0.5);
    let half_h = t.scale(h, 0.5);
    let x1 = t.sub(cx, half_w);
    let x2 = t.add(cx, half_w);
    let y1 = t.sub(cy, half_h);
    let y2 = t.add(cy, half_h);
    [x1, y1, x2, y2]
}

/// Mean over frames of `1 - GIoU`. Ground-truth boxes must have positive
/// width and height.
pub fn giou_loss(t: &mut Tape, pred: TensorId, gt: TensorId) -> TensorId {
    assert_eq!(t.shape(pred), t.shape(gt), "box shapes disagree");
    let gd = t.data(gt);
    let frames = t.shape(gt)[0];
    for i in 0..frames {
        assert!(
            gd[i * 4 + 2] > 0.0 && gd[i * 4 + 3] > 0.0,
            "ground-truth box {} has nonpositive size ({}, {})",
            i,
            gd[i * 4 + 2],
            gd[i * 4 + 3]
        );
    }
    let [px1, py1, px2, py2] = split_boxes(t, pred);
    let [gx1, gy1, gx2, gy2] = split_boxes(t, gt);

    let ix1 = t.maximum(px1, gx1);
    let iy1 = t.maximum(py1, gy1);
    let ix2 = t.minimum(px2, gx2);
    let iy2 = t.minimum(py2, gy2);
    let iw_raw = t.sub(ix2, ix1);
    let ih_raw = t.sub(iy2, iy1);
    let iw = t.relu(iw_raw);
    let ih = t.relu(ih_raw);
    let inter = t.mul(iw, ih);

    let pw = t.sub(px2, px1);
    let ph = t.sub(py2, py1);
    let pa = t.mul(pw, ph);
    let gw = t.sub(gx2, gx1);
    let gh = t.sub(gy2, gy1);
    let ga = t.mul(gw, gh);
    let pa_ga = t.add(pa, ga);
    let union = t.sub(pa_ga, inter);
    let iou = t.div(inter, union);

    let hx1 = t.minimum(px1, gx1);
    let hy1 = t.minimum(py1, gy1);
    let hx2 = t.maximum(px2, gx2);
    let hy2 = t.maximum(py2, gy2);
    let hw = t.sub(hx2, hx1);
    let hh = t.sub(hy2, hy1);
    let hull = t.mul(hw, hh);
    let hull_minus_union = t.sub(hull, union);
    let penalty = t.div(hull_minus_union, hull);
    let giou = t.sub(iou, penalty);
    let one = t.scalar(1.0);
    let loss = t.sub(one, giou);
    t.mean_all(loss)
}

/// Mean absolute difference over all four coordinates and frames.
pub fn l1_loss(t: &mut Tape, pred: TensorId, gt: TensorId) -> TensorId {
    assert_eq!(t.shape(pred), t.shape(gt), "box shapes disagree");
    let diff = t.sub(pred, gt);
    let ad = t.abs(diff);
    t.mean_all(ad)
}

#[derive(Copy, Clone, Debug)]
pub struct LossWeights {
    pub dice: f64,
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 5.0, focal: 2.0, giou: 2.0, l1: 5.0 }
    }
}

/// One decoder layer's predictions, already on the tape.
pub struct LayerPreds {
    pub mask_logits: TensorId,
    pub boxes: TensorId,
}

/// Tape ids of the aggregated loss terms.
pub struct LossTerms {
    pub dice: TensorId,
    pub focal: TensorId,
    pub giou: TensorId,
    pub l1: TensorId,
    pub total: TensorId,
    pub per_layer: Vec<[f64; 4]>,
}

/// Deep supervision: unweighted terms summed over layers with equal weight,
/// then combined with the configured coefficients.
pub fn total_loss(
    t: &mut Tape,
    preds: &[LayerPreds],
    gt_mask: TensorId,
    gt_boxes: TensorId,
    weights: &LossWeights,
) -> LossTerms {
    assert!(!preds.is_empty(), "need predictions from at least one layer");
    let mut dice_terms = Vec::new();
    let mut focal_terms = Vec::new();
    let mut giou_terms = Vec::new();
    let mut l1_terms = Vec::new();
    let mut per_layer = Vec::new();
    for lp in preds {
        let prob = t.sigmoid(lp.mask_logits);
        let d = dice_loss(t, prob, gt_mask, 1.0);
        let f = focal_loss(t, lp.mask_logits, gt_mask, 0.25, 2.0);
        let g = giou_loss(t, lp.boxes, gt_boxes);
        let l = l1_loss(t, lp.boxes, gt_boxes);
        per_layer.push([t.data(d)[0], t.data(f)[0], t.data(g)[0], t.data(l)[0]]);
        dice_terms.push(d);
        focal_terms.push(f);
        giou_terms.push(g);
        l1_terms.push(l);
    }
    let sum_terms = |t: &mut Tape, terms: &[TensorId]| {
        let mut acc = terms[0];
        for &term in &terms[1..] {
            acc = t.add(acc, term);
        }
        acc
    };
    let dice = sum_terms(t, &dice_terms);
    let focal = sum_terms(t, &focal_terms);
    let giou = sum_terms(t, &giou_terms);
    let l1 = sum_terms(t, &l1_terms);
    let wd = t.scale(dice, weights.dice);
    let wf = t.scale(focal, weights.focal);
    let wg = t.scale(giou, weights.giou);
    let wl = t.scale(l1, weights.l1);
    let s0 = t.add(wd, wf);
    let s1 = t.add(s0, wg);
    let total = t.add(s1, wl);
    LossTerms { dice, focal, giou, l1, total, per_layer }
}

// ── Resolution plumbing ─────────────────────────────────────────────────

/// Downsample a binary mask by an integer factor: a cell is foreground when
/// at least half of its source pixels are.
pub fn downsample_mask_area(mask: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    assert_eq!(h % factor, 0, "height {} not divisible by {}", h, factor);
    assert_eq!(w % factor, 0, "width {} not divisible by {}", w, factor);
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow];
    let half = (factor * factor) as f64 / 2.0;
    for y in 0..oh {
        for x in 0..ow {
            let mut count = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    count += mask[(y * factor + dy) * w + (x * factor + dx)];
                }
            }
            out[y * ow + x] = if count >= half { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Bilinear upsample with half-pixel centers (forward-only; evaluation and
/// export never backpropagate through the resize).
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        for x in 0..ow {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
            out[y * ow + x] = src[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
                + src[y0 * w + x1] * (1.0 - dy) * dx
                + src[y1 * w + x0] * dy * (1.0 - dx)
                + src[y1 * w + x1] * dy * dx;
        }
    }
    out
}
