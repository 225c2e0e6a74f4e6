//! DAVIS-style evaluation: region similarity J (Jaccard), boundary accuracy
//! F (contour precision/recall at a pixel tolerance), their mean J&F, and the
//! pooled/averaged IoU variants oIoU and mIoU.

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub oiou: f64,
    pub miou: f64,
    pub per_frame_j: Vec<f64>,
    pub per_frame_f: Vec<f64>,
}

impl MetricsReport {
    /// Flat key=value block, one metric per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("J = {:.6}\n", self.j));
        out.push_str(&format!("F = {:.6}\n", self.f));
        out.push_str(&format!("J&F = {:.6}\n", self.jf));
        out.push_str(&format!("oIoU = {:.6}\n", self.oiou));
        out.push_str(&format!("mIoU = {:.6}\n", self.miou));
        for (i, (j, f)) in self.per_frame_j.iter().zip(&self.per_frame_f).enumerate() {
            out.push_str(&format!("frame[{i}].J = {j:.6}\nframe[{i}].F = {f:.6}\n"));
        }
        out
    }
}

/// Sigmoid-threshold binarization; probability exactly at the threshold is
/// classified foreground.
pub fn binarize(logits: &[f64], threshold: f64) -> Vec<bool> {
    logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp()) >= threshold).collect()
}

/// Jaccard index; two empty masks count as a perfect match.
pub fn region_j(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask lengths disagree: {} vs {}", pred.len(), gt.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground pixels with at least one 4-connected background neighbor;
/// the frame edge counts as background.
pub fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            out[y * w + x] = edge;
        }
    }
    out
}

/// Dilation of a pixel set by a Euclidean disc of radius `tolerance`.
fn dilate(mask: &[bool], h: usize, w: usize, tolerance: usize) -> Vec<bool> {
    let tol2 = (tolerance * tolerance) as i64;
    let r = tolerance as i64;
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask[(y * w as i64 + x) as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > tol2 {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                        out[(ny * w as i64 + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Boundary F-measure: precision and recall of boundary pixels within a
/// Euclidean pixel tolerance, combined harmonically. Two boundary-free masks
/// score 1.0; exactly one empty scores 0.0.
pub fn boundary_f(pred: &[bool], gt: &[bool], h: usize, w: usize, tolerance: usize) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask lengths disagree: {} vs {}", pred.len(), gt.len());
    let pb = boundary_pixels(pred, h, w);
    let gb = boundary_pixels(gt, h, w);
    let np = pb.iter().filter(|&&b| b).count();
    let ng = gb.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let gd = dilate(&gb, h, w, tolerance);
    let pd = dilate(&pb, h, w, tolerance);
    let hit_p = pb.iter().zip(&gd).filter(|&(&p, &d)| p && d).count();
    let hit_g = gb.iter().zip(&pd).filter(|&(&g, &d)| g && d).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-frame J and F aggregated over a sequence, with pooled overall IoU.
pub fn sequence_metrics(
    preds: &[Vec<bool>],
    gts: &[Vec<bool>],
    h: usize,
    w: usize,
    tolerance: usize,
) -> MetricsReport {
    assert_eq!(preds.len(), gts.len(), "sequence lengths disagree: {} vs {}", preds.len(), gts.len());
    let mut per_frame_j = Vec::with_capacity(preds.len());
    let mut per_frame_f = Vec::with_capacity(preds.len());
    let mut inter_total = 0usize;
    let mut union_total = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        per_frame_j.push(region_j(p, g));
        per_frame_f.push(boundary_f(p, g, h, w, tolerance));
        for (&pp, &gg) in p.iter().zip(g) {
            if pp && gg {
                inter_total += 1;
            }
            if pp || gg {
                union_total += 1;
            }
        }
    }
    let n = preds.len() as f64;
    let j = per_frame_j.iter().sum::<f64>() / n;
    let f = per_frame_f.iter().sum::<f64>() / n;
    let oiou = if union_total == 0 { 1.0 } else { inter_total as f64 / union_total as f64 };
    MetricsReport { j, f, jf: (j + f) / 2.0, oiou, miou: j, per_frame_j, per_frame_f }
}

/// Mean of per-episode reports (dataset-level aggregation; oIoU pools over
/// everything it saw).
pub fn aggregate(reports: &[MetricsReport]) -> MetricsReport {
    assert!(!reports.is_empty(), "nothing to aggregate");
    let n = reports.len() as f64;
    let mut agg = MetricsReport {
        j: reports.iter().map(|r| r.j).sum::<f64>() / n,
        f: reports.iter().map(|r| r.f).sum::<f64>() / n,
        jf: 0.0,
        oiou: reports.iter().map(|r| r.oiou).sum::<f64>() / n,
        miou: reports.iter().map(|r| r.miou).sum::<f64>() / n,
        per_frame_j: Vec::new(),
        per_frame_f: Vec::new(),
    };
    agg.jf = (agg.j + agg.f) / 2.0;
    agg
}
