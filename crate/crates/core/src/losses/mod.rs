//! Foreground forecasting losses, the background-refiner cross-entropy and
//! the prediction-refinement losses.
//!
//! The presence and background objectives are written in likelihood form in
//! the literature; here they are negated so that every value is a loss to be
//! minimized and is `≥ 0`. Every loss over an empty mask is `0`.
//!
//! [`tape`] holds the differentiable forms used in training; the free
//! functions in this module evaluate the same code on plain tensors.

pub mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Graph, Tensor, Var};

/// Coefficients `λ₁ … λ₆`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub box_l1: f64,
    pub depth_l1: f64,
    pub iou: f64,
    pub presence: f64,
    pub appearance: f64,
    pub velocity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_l1: 1.0,
            depth_l1: 10.0,
            iou: 100.0,
            presence: 10.0,
            appearance: 10.0,
            velocity: 1.0,
        }
    }
}

/// How the `λ₃·IoU` term enters the location loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouSign {
    /// `+λ₃·IoU`, literally as published. This rewards *less* overlap.
    #[default]
    AsWritten,
    /// `−λ₃·IoU`.
    Negated,
    /// `λ₃·(1 − IoU)`.
    OneMinus,
}

impl IouSign {
    pub fn name(self) -> &'static str {
        match self {
            IouSign::AsWritten => "as_written",
            IouSign::Negated => "negated",
            IouSign::OneMinus => "one_minus",
        }
    }
}

impl std::str::FromStr for IouSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(IouSign::AsWritten),
            "negated" => Ok(IouSign::Negated),
            "one_minus" => Ok(IouSign::OneMinus),
            other => Err(Error::Config(format!("unknown iou_sign {other:?}"))),
        }
    }
}

/// Per-step values of every objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub presence: f64,
    pub appearance: f64,
    pub velocity: f64,
    pub total_fg: f64,
    pub bg_refine: f64,
    pub refine_select: f64,
    pub refine_bias: f64,
}

impl LossBreakdown {
    /// Fills the foreground terms; `total_fg` is summed left to right, the
    /// same order the training graph uses.
    pub fn foreground(loc: f64, presence: f64, appearance: f64, velocity: f64) -> Self {
        Self {
            loc,
            presence,
            appearance,
            velocity,
            total_fg: loc + presence + appearance + velocity,
            ..Self::default()
        }
    }

    pub const CSV_FIELDS: [&'static str; 8] = [
        "loc",
        "presence",
        "appearance",
        "velocity",
        "total_fg",
        "bg_refine",
        "refine_select",
        "refine_bias",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.loc,
            self.presence,
            self.appearance,
            self.velocity,
            self.total_fg,
            self.bg_refine,
            self.refine_select,
            self.refine_bias,
        ]
    }
}

fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `Σ SmoothL1Fn(aⱼ, bⱼ)`: `½d²` for `|d| < 1`, `|d| − ½` otherwise.
pub fn smooth_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("smooth_l1", a, b)?;
    eval(|g| {
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        tape::smooth_l1(g, a, b)
    })
}

/// IoU of two `[x0, y0, x1, y1]` boxes; `0` when the union has zero area.
pub fn box_iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != [4] || b.shape() != [4] {
        return Err(Error::shape("box_iou", a.shape(), b.shape()));
    }
    eval(|g| {
        let a = g.constant(a.reshape(&[1, 4])?);
        let b = g.constant(b.reshape(&[1, 4])?);
        let iou = tape::box_iou(g, a, b)?;
        Ok(g.sum(iou))
    })
}

/// Location loss over `K` rows of `[x0, y0, x1, y1, d]` with presence `[K]`.
pub fn loc_loss(pred: &Tensor, target: &Tensor, presence: &Tensor, w: &LossWeights, sign: IouSign) -> Result<f64> {
    same_shape("loc_loss", pred, target)?;
    eval(|g| {
        let p = g.constant(pred.clone());
        tape::loc_loss(g, p, target, presence.data(), w, sign)
    })
}

/// `λ₄/K · Σ BCE(σ(logit), p*)` over all `K = N·F` entries.
pub fn presence_loss(logits: &Tensor, presence: &Tensor, w: &LossWeights) -> Result<f64> {
    same_shape("presence_loss", logits, presence)?;
    eval(|g| {
        let l = g.constant(logits.clone());
        tape::presence_loss(g, l, presence, w)
    })
}

/// `λ₅ ·` presence-masked mean squared error; rows are the leading axis.
pub fn appearance_loss(r_hat: &Tensor, r_star: &Tensor, presence: &Tensor, w: &LossWeights) -> Result<f64> {
    same_shape("appearance_loss", r_hat, r_star)?;
    eval(|g| {
        let r = g.constant(r_hat.clone());
        tape::appearance_loss(g, r, r_star, presence.data(), w)
    })
}

/// Encoder velocity loss.
///
/// `v_hat` is `[N×T×4]`, `x_star` is `[N×T'×5]` and `presence` `[N×T']`
/// with `T' > T`; the target for `(i, t)` is `x*_{t+1} − x*_t` (box part),
/// counted only when both frames are present.
pub fn velocity_loss(v_hat: &Tensor, x_star: &Tensor, presence: &Tensor, w: &LossWeights) -> Result<f64> {
    let (targets, mask) = velocity_targets(v_hat.shape(), x_star, presence)?;
    eval(|g| {
        let v = g.constant(v_hat.reshape(&[mask.len(), 4])?);
        tape::velocity_loss(g, v, &targets, &mask, w)
    })
}

/// Flattened `[N·T×4]` velocity targets and consecutive-presence mask.
pub fn velocity_targets(v_shape: &[usize], x_star: &Tensor, presence: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if v_shape.len() != 3 || v_shape[2] != 4 || x_star.rank() != 3 || x_star.shape()[2] != 5 {
        return Err(Error::shape("velocity_loss", v_shape, x_star.shape()));
    }
    let (n, t) = (v_shape[0], v_shape[1]);
    let tt = x_star.shape()[1];
    if x_star.shape()[0] != n || tt <= t || presence.shape() != [n, tt] {
        return Err(Error::shape("velocity_loss targets", x_star.shape(), presence.shape()));
    }
    let mut targets = Vec::with_capacity(n * t * 4);
    let mut mask = Vec::with_capacity(n * t);
    let xs = x_star.data();
    for i in 0..n {
        for s in 0..t {
            let a = &xs[(i * tt + s) * 5..(i * tt + s) * 5 + 4];
            let b = &xs[(i * tt + s + 1) * 5..(i * tt + s + 1) * 5 + 4];
            targets.extend(b.iter().zip(a).map(|(b, a)| b - a));
            mask.push(presence.at2(i, s) * presence.at2(i, s + 1));
        }
    }
    Ok((Tensor::new(&[n * t, 4], targets)?, mask))
}

/// Mean over background pixels of `−ln p(correct class)`.
///
/// `prob` is `[P×C]`, `labels` and `bg_mask` have length `P`.
pub fn bg_refine_loss(prob: &Tensor, labels: &[usize], bg_mask: &[f64]) -> Result<f64> {
    eval(|g| {
        let p = g.constant(prob.clone());
        tape::bg_refine_loss(g, p, labels, bg_mask)
    })
}

/// `(select, bias)`: per-pixel cross-entropy of the channel-normalized
/// selection scores `[P×(N+1)]` against `target`, and the mean squared bias.
pub fn refinement_loss(scores: &Tensor, target: &[usize], bias: &Tensor) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let b = g.constant(bias.clone());
    let (sel, bi) = tape::refinement_loss(&mut g, s, target, b)?;
    Ok((g.value(sel).item(), g.value(bi).item()))
}

#[cfg(test)]
mod tests;
