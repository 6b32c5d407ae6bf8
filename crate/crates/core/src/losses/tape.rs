//! Differentiable loss graphs. Targets and masks enter as constants, so
//! masked rows receive exactly zero gradient.

use super::{IouSign, LossWeights};
use crate::error::{Error, Result};
use crate::linalg::{Graph, Tensor, Var};

/// Lower bound on the normalized target score inside the selection log.
pub const SELECT_FLOOR: f64 = 1e-12;

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn mask_var(g: &mut Graph, mask: &[f64], rows: usize, op: &'static str) -> Result<(Var, f64)> {
    if mask.len() != rows {
        return Err(Error::shape(op, &[rows], &[mask.len()]));
    }
    let count = mask.iter().sum::<f64>();
    Ok((g.constant(Tensor::new(&[rows], mask.to_vec())?), count))
}

pub fn smooth_l1(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let e = g.smooth_l1_elem(d);
    Ok(g.sum(e))
}

/// Row-wise IoU of `[K×4]` boxes → `[K]`. Negative widths clamp to zero.
pub fn box_iou(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let k = g.shape(a)[0];
    if g.shape(a) != [k, 4] || g.shape(b) != [k, 4] {
        return Err(Error::shape("box_iou", g.shape(a), g.shape(b)));
    }
    let mut cols = |v: Var| -> Result<Vec<Var>> { (0..4).map(|i| g.slice(v, 1, i, 1)).collect() };
    let (ca, cb) = (cols(a)?, cols(b)?);
    let extent = |g: &mut Graph, lo: Var, hi: Var| -> Result<Var> {
        let d = g.sub(hi, lo)?;
        Ok(g.relu(d))
    };
    let ix0 = g.maximum(ca[0], cb[0])?;
    let iy0 = g.maximum(ca[1], cb[1])?;
    let ix1 = g.minimum(ca[2], cb[2])?;
    let iy1 = g.minimum(ca[3], cb[3])?;
    let iw = extent(g, ix0, ix1)?;
    let ih = extent(g, iy0, iy1)?;
    let inter = g.mul(iw, ih)?;
    let aw = extent(g, ca[0], ca[2])?;
    let ah = extent(g, ca[1], ca[3])?;
    let bw = extent(g, cb[0], cb[2])?;
    let bh = extent(g, cb[1], cb[3])?;
    let area_a = g.mul(aw, ah)?;
    let area_b = g.mul(bw, bh)?;
    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    // zero-area unions have zero intersection; a unit denominator makes them 0
    let fix = g.value(union).map(|u| if u <= 0.0 { 1.0 } else { 0.0 });
    let fix = g.constant(fix);
    let denom = g.add(union, fix)?;
    let iou = g.div(inter, denom)?;
    g.reshape(iou, &[k])
}

/// Presence-masked mean of `λ₁·SL1(box) + λ₂·SL1(depth) + λ₃·IoU-term`.
pub fn loc_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &[f64], w: &LossWeights, sign: IouSign) -> Result<Var> {
    let k = g.shape(pred)[0];
    if g.shape(pred) != [k, 5] || target.shape() != [k, 5] {
        return Err(Error::shape("loc_loss", g.shape(pred), target.shape()));
    }
    let (m, count) = mask_var(g, mask, k, "loc_loss mask")?;
    if count == 0.0 {
        return Ok(zero(g));
    }
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let e = g.smooth_l1_elem(d);
    let eb = g.slice(e, 1, 0, 4)?;
    let box_term = g.sum_axis(eb, 1)?;
    let ed = g.slice(e, 1, 4, 1)?;
    let depth_term = g.reshape(ed, &[k])?;
    let pb = g.slice(pred, 1, 0, 4)?;
    let tb = g.slice(t, 1, 0, 4)?;
    let iou = box_iou(g, pb, tb)?;
    let iou_term = match sign {
        IouSign::AsWritten => g.scale(iou, w.iou),
        IouSign::Negated => g.scale(iou, -w.iou),
        IouSign::OneMinus => {
            let s = g.scale(iou, -w.iou);
            g.offset(s, w.iou)
        }
    };
    let b = g.scale(box_term, w.box_l1);
    let dd = g.scale(depth_term, w.depth_l1);
    let per = g.add(b, dd)?;
    let per = g.add(per, iou_term)?;
    let masked = g.mul(per, m)?;
    let s = g.sum(masked);
    Ok(g.scale(s, 1.0 / count))
}

/// `λ₄/K · Σ [p*·softplus(−l) + (1−p*)·softplus(l)]`, the negated log-likelihood.
pub fn presence_loss(g: &mut Graph, logits: Var, target: &Tensor, w: &LossWeights) -> Result<Var> {
    if g.shape(logits) != target.shape() {
        return Err(Error::shape("presence_loss", g.shape(logits), target.shape()));
    }
    let k = target.len() as f64;
    let p = g.constant(target.clone());
    let q = g.constant(target.map(|v| 1.0 - v));
    let nl = g.neg(logits);
    let pos = g.softplus(nl);
    let neg = g.softplus(logits);
    let a = g.mul(p, pos)?;
    let b = g.mul(q, neg)?;
    let t = g.add(a, b)?;
    let s = g.sum(t);
    Ok(g.scale(s, w.presence / k))
}

/// `λ₅ ·` mean squared error over the elements of present rows.
pub fn appearance_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &[f64], w: &LossWeights) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::shape("appearance_loss", &shape, target.shape()));
    }
    let k = shape[0];
    let per_row: usize = shape[1..].iter().product();
    let (m, count) = mask_var(g, mask, k, "appearance_loss mask")?;
    if count == 0.0 {
        return Ok(zero(g));
    }
    let mut mshape = vec![1; shape.len()];
    mshape[0] = k;
    let m = g.reshape(m, &mshape)?;
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.square(d);
    let masked = g.mul(sq, m)?;
    let s = g.sum(masked);
    Ok(g.scale(s, w.appearance / (count * per_row as f64)))
}

/// `λ₆ ·` masked mean of row-wise SmoothL1 between `[K×4]` velocities.
pub fn velocity_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &[f64], w: &LossWeights) -> Result<Var> {
    let k = g.shape(pred)[0];
    if g.shape(pred) != [k, 4] || target.shape() != [k, 4] {
        return Err(Error::shape("velocity_loss", g.shape(pred), target.shape()));
    }
    let (m, count) = mask_var(g, mask, k, "velocity_loss mask")?;
    if count == 0.0 {
        return Ok(zero(g));
    }
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let e = g.smooth_l1_elem(d);
    let row = g.sum_axis(e, 1)?;
    let masked = g.mul(row, m)?;
    let s = g.sum(masked);
    Ok(g.scale(s, w.velocity / count))
}

fn one_hot(rows: usize, cols: usize, labels: &[usize], op: &'static str) -> Result<Tensor> {
    if labels.len() != rows || labels.iter().any(|&l| l >= cols) {
        return Err(Error::shape(op, &[rows, cols], &[labels.len()]));
    }
    let mut t = Tensor::zeros(&[rows, cols]);
    for (r, &l) in labels.iter().enumerate() {
        t.set2(r, l, 1.0);
    }
    Ok(t)
}

/// Mean over masked pixels of `−ln prob[p, label[p]]`; `prob` is `[P×C]`.
pub fn bg_refine_loss(g: &mut Graph, prob: Var, labels: &[usize], bg_mask: &[f64]) -> Result<Var> {
    let s = g.shape(prob).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("bg_refine_loss", &s, &[]));
    }
    let (m, count) = mask_var(g, bg_mask, s[0], "bg_refine_loss mask")?;
    if count == 0.0 {
        return Ok(zero(g));
    }
    let labels: Vec<usize> = labels
        .iter()
        .zip(bg_mask)
        .map(|(&l, &m)| if m == 0.0 { 0 } else { l })
        .collect();
    let oh = g.constant(one_hot(s[0], s[1], &labels, "bg_refine_loss labels")?);
    let picked = g.mul(prob, oh)?;
    let picked = g.sum_axis(picked, 1)?;
    // unmasked pixels are replaced by 1 so their log is exactly 0
    let keep = g.mul(picked, m)?;
    let inv = g.constant(Tensor::new(&[s[0]], bg_mask.iter().map(|v| 1.0 - v).collect())?);
    let safe = g.add(keep, inv)?;
    let l = g.ln(safe);
    let tot = g.sum(l);
    Ok(g.scale(tot, -1.0 / count))
}

/// `(select, bias)` refinement losses; `scores` is `[P×(N+1)]`, `bias` `[P]` or `[H×W]`.
pub fn refinement_loss(g: &mut Graph, scores: Var, target: &[usize], bias: Var) -> Result<(Var, Var)> {
    let s = g.shape(scores).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("refinement_loss", &s, &[]));
    }
    let oh = g.constant(one_hot(s[0], s[1], target, "refinement_loss target")?);
    let total = g.sum_axis(scores, 1)?;
    let picked = g.mul(scores, oh)?;
    let picked = g.sum_axis(picked, 1)?;
    let ratio = g.div(picked, total)?;
    // a saturated softmax can give the target channel exactly zero mass
    let floor = g.constant(Tensor::scalar(SELECT_FLOOR));
    let ratio = g.maximum(ratio, floor)?;
    let l = g.ln(ratio);
    let sum = g.sum(l);
    let select = g.scale(sum, -1.0 / s[0] as f64);
    let sq = g.square(bias);
    let bias_term = g.mean(sq);
    Ok((select, bias_term))
}
