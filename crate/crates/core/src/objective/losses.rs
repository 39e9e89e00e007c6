//! Text, localization and composite losses.

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::TrainError;
use crate::geometry::{giou_loss, l1_corner_loss, BoundingBox, ENCLOSING_AREA_FLOOR};
use crate::sample::LossWeights;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_txt: f64,
    pub l_loc: f64,
    pub l_total: f64,
    pub n_text_positions: usize,
    pub n_box_samples: usize,
}

impl LossBreakdown {
    pub fn new(l_txt: f64, l_loc: f64, weights: &LossWeights, n_text_positions: usize, n_box_samples: usize) -> Self {
        Self {
            l_txt,
            l_loc,
            l_total: weights.lambda_txt * l_txt + weights.lambda_loc * l_loc,
            n_text_positions,
            n_box_samples,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_txt.is_finite() && self.l_loc.is_finite() && self.l_total.is_finite()
    }
}

/// Mean over masked rows of `-log softmax(logits[row])[target[row]]`.
pub fn text_loss(logits: &Mat, target_ids: &[u32], mask: &[bool]) -> Result<f64, TrainError> {
    if logits.rows() != target_ids.len() || mask.len() != target_ids.len() {
        return Err(TrainError::Inconsistent(format!(
            "logits have {} rows, targets {}, mask {}",
            logits.rows(),
            target_ids.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, (&t, &m)) in target_ids.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
        count += 1;
    }
    if count == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(total / count as f64)
}

/// Mean absolute corner error plus GIoU loss, unweighted.
pub fn loc_loss(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    l1_corner_loss(pred, gt) + giou_loss(pred, gt)
}

/// Mean of `loc_loss` over pairs; zero for an empty batch.
pub fn loc_loss_batch(pairs: &[(BoundingBox, BoundingBox)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(p, g)| loc_loss(p, g)).sum::<f64>() / pairs.len() as f64
}

/// Per-sample outputs needed by `composite_loss`.
#[derive(Debug, Clone)]
pub struct SampleOutputs {
    pub target_logits: Mat,
    pub target_ids: Vec<u32>,
    pub box_supervised: bool,
    pub pred_box: Option<BoundingBox>,
    pub gt_box: Option<BoundingBox>,
}

/// `λ_txt · L_txt + λ_loc · L_loc`, with the text loss averaged over every
/// target position in the batch and the box loss over local samples only.
pub fn composite_loss(batch: &[SampleOutputs], weights: &LossWeights) -> Result<LossBreakdown, TrainError> {
    let mut nll = 0.0;
    let mut n_text = 0;
    let mut pairs = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        let n = s.target_ids.len();
        if n > 0 {
            nll += text_loss(&s.target_logits, &s.target_ids, &vec![true; n])? * n as f64;
            n_text += n;
        }
        match (s.box_supervised, s.pred_box, s.gt_box) {
            (true, Some(p), Some(g)) => pairs.push((p, g)),
            (true, _, None) => {
                return Err(TrainError::Inconsistent(format!("sample {i} is box-supervised but has no ground-truth box")))
            }
            (true, None, _) => {
                return Err(TrainError::Inconsistent(format!("sample {i} is box-supervised but has no EDIT prediction")))
            }
            (false, _, Some(_)) => {
                return Err(TrainError::Inconsistent(format!("sample {i} carries a box but is not box-supervised")))
            }
            (false, _, None) => {}
        }
    }
    if n_text == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(LossBreakdown::new(
        nll / n_text as f64,
        loc_loss_batch(&pairs),
        weights,
        n_text,
        pairs.len(),
    ))
}

/// Graph form of `loc_loss` for predicted corners `(1, 4)`.
pub fn loc_loss_graph(g: &mut Graph, pred: Var, gt: &BoundingBox) -> Var {
    let gt_c = gt.corners();
    let col = |g: &mut Graph, i: usize| g.slice_cols(pred, i, 1);
    let konst = |g: &mut Graph, v: f64| g.constant(Mat::scalar(v));
    let (px1, py1, px2, py2) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let (gx1, gy1, gx2, gy2) = (
        konst(g, gt_c[0]),
        konst(g, gt_c[1]),
        konst(g, gt_c[2]),
        konst(g, gt_c[3]),
    );

    let gt_row = g.constant(Mat::row_vector(gt_c.to_vec()));
    let diff = g.sub(pred, gt_row);
    let abs = g.abs(diff);
    let l1 = g.sum(abs);
    let l1 = g.scale(l1, 0.25);

    let zero = konst(g, 0.0);
    let extent = |g: &mut Graph, lo_a: Var, lo_b: Var, hi_a: Var, hi_b: Var, inner: bool| {
        let (lo, hi) = if inner {
            (g.maximum(lo_a, lo_b), g.minimum(hi_a, hi_b))
        } else {
            (g.minimum(lo_a, lo_b), g.maximum(hi_a, hi_b))
        };
        let d = g.sub(hi, lo);
        g.maximum(d, zero)
    };
    let iw = extent(g, px1, gx1, px2, gx2, true);
    let ih = extent(g, py1, gy1, py2, gy2, true);
    let inter = g.mul(iw, ih);
    let pw = g.sub(px2, px1);
    let ph = g.sub(py2, py1);
    let pred_area = g.mul(pw, ph);
    let gt_area = konst(g, gt.area());
    let union = g.add(pred_area, gt_area);
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);

    let cw = extent(g, px1, gx1, px2, gx2, false);
    let ch = extent(g, py1, gy1, py2, gy2, false);
    let enclosing = g.mul(cw, ch);
    let floor = konst(g, ENCLOSING_AREA_FLOOR);
    let enclosing = g.maximum(enclosing, floor);
    let gap = g.sub(enclosing, union);
    let penalty = g.div(gap, enclosing);
    let giou = g.sub(iou, penalty);
    let one_minus = g.scale(giou, -1.0);
    let giou_l = g.add_scalar(one_minus, 1.0);
    g.add(l1, giou_l)
}
