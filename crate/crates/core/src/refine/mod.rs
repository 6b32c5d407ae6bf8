//! Background depth completion, object selection and the final panoptic merge.

mod panoptic;

use serde::{Deserialize, Serialize};

pub use panoptic::PanopticMap;

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::linalg::{align_corners_taps, sigmoid, Conv, Graph, ParamStore, SeededRng, Tensor, Var};
use crate::losses::tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Depth given to pixels an instance mask does not cover.
    pub d_fgmax: f64,
    /// Divides depths inside `softmax(−D)`.
    pub temperature: f64,
    /// Channel width of the depth-completion convolutions.
    pub hidden: usize,
    /// Instances with `σ(p̂)` below this are discarded.
    pub presence_threshold: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            d_fgmax: 1e4,
            temperature: 1.0,
            hidden: 8,
            presence_threshold: 0.5,
        }
    }
}

/// One forecast instance as seen by the refinement head.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Pasted soft mask `[H×W]` in `[0, 1]`.
    pub mask: Tensor,
    pub depth: f64,
    pub presence_logit: f64,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct RefineInputs {
    /// Reprojected background depth; `valid` is the mask `Q`.
    pub d_tilde: DepthMap,
    /// Background class logits `[C_BG×H×W]`.
    pub bg_logits: Tensor,
    pub instances: Vec<Instance>,
}

impl RefineInputs {
    pub fn height(&self) -> usize {
        self.d_tilde.height()
    }

    pub fn width(&self) -> usize {
        self.d_tilde.width()
    }

    pub fn num_bg_classes(&self) -> usize {
        self.bg_logits.shape()[0]
    }

    fn check(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.d_tilde.valid.shape() != [h, w] {
            return Err(Error::shape("refine Q", &[h, w], self.d_tilde.valid.shape()));
        }
        let s = self.bg_logits.shape();
        if s.len() != 3 || s[1..] != [h, w] || s[0] == 0 {
            return Err(Error::shape("refine background logits", &[h, w], s));
        }
        for inst in &self.instances {
            if inst.mask.shape() != [h, w] {
                return Err(Error::shape("refine instance mask", &[h, w], inst.mask.shape()));
            }
            if inst.mask.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
                return Err(Error::Contract("instance mask outside [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Per-pixel softmax of the background logits over classes.
    pub fn bg_probabilities(&self) -> Tensor {
        let s = self.bg_logits.shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let d = self.bg_logits.data();
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let m = (0..c).map(|k| d[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (d[k * hw + p] - m).exp()).sum();
            for k in 0..c {
                out[k * hw + p] = (d[k * hw + p] - m).exp() / z;
            }
        }
        Tensor::new(s, out).expect("same shape")
    }

    /// Whether each instance survives presence filtering.
    pub fn kept(&self, threshold: f64) -> Vec<bool> {
        self.instances.iter().map(|i| sigmoid(i.presence_logit) >= threshold).collect()
    }
}

/// Sigmoid of `mask_logits` resized (align-corners) onto the box extent and
/// pasted into an `H×W` frame. `bbox` is `(x1, y1, x2, y2)` in pixels; the
/// extent covers columns `[⌊x1+½⌋, ⌊x2+½⌋)` after clamping to the frame.
pub fn mask_out(bbox: &[f64; 4], mask_logits: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = mask_logits.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::shape("mask_out logits", s, &[]));
    }
    if bbox.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("mask_out box is not finite".into()));
    }
    let edge = |x: f64, hi: usize| ((x + 0.5).floor().max(0.0) as usize).min(hi);
    let (c0, c1) = (edge(bbox[0], width), edge(bbox[2], width));
    let (r0, r1) = (edge(bbox[1], height), edge(bbox[3], height));
    let mut out = Tensor::zeros(&[height, width]);
    if c1 <= c0 || r1 <= r0 {
        return Ok(out);
    }
    let probs = mask_logits.map(sigmoid);
    let ty = align_corners_taps(s[0], r1 - r0);
    let tx = align_corners_taps(s[1], c1 - c0);
    for (dy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (dx, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = probs.at2(y0, x0) * (1.0 - fx) + probs.at2(y0, x1) * fx;
            let bottom = probs.at2(y1, x0) * (1.0 - fx) + probs.at2(y1, x1) * fx;
            out.set2(r0 + dy, c0 + dx, top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// Two-layer conv head: `k×k` conv, ReLU, `1×1` conv to one channel.
#[derive(Debug, Clone)]
pub struct ConvHead {
    pub first: Conv,
    pub second: Conv,
}

impl ConvHead {
    fn new(store: &mut ParamStore, name: &str, cin: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            first: Conv::new(store, &format!("{name}.0"), cin, hidden, 3, rng)?,
            second: Conv::new(store, &format!("{name}.1"), hidden, 1, 1, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.relu(h);
        self.second.forward(g, store, h)
    }
}

#[derive(Debug, Clone)]
pub struct DepthCompletion {
    pub dc1: Conv,
    pub dc2: [Conv; 2],
    pub fill: ConvHead,
    pub bias: ConvHead,
}

/// Graph outputs of [`DepthCompletion::forward`], all `[H×W]`.
#[derive(Debug, Clone, Copy)]
pub struct CompletedDepth {
    pub depth: Var,
    pub fill: Var,
    pub bias: Var,
}

impl DepthCompletion {
    pub fn new(store: &mut ParamStore, name: &str, c_bg: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            dc1: Conv::new(store, &format!("{name}.dc1"), c_bg + 2, hidden, 3, rng)?,
            dc2: [
                Conv::new(store, &format!("{name}.dc2.0"), hidden, hidden, 3, rng)?,
                Conv::new(store, &format!("{name}.dc2.1"), hidden, hidden, 3, rng)?,
            ],
            fill: ConvHead::new(store, &format!("{name}.fill"), hidden, hidden, rng)?,
            bias: ConvHead::new(store, &format!("{name}.bias"), hidden, hidden, rng)?,
        })
    }

    /// Zeroes the last bias-head layer so the bias output is exactly 0.
    pub fn zero_bias_head(&self, store: &mut ParamStore) {
        self.bias.second.zero(store);
    }

    /// `d̂ = Q·d̃ + (1−Q)·fill + bias`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &RefineInputs) -> Result<CompletedDepth> {
        inputs.check()?;
        let (h, w) = (inputs.height(), inputs.width());
        let d_tilde = inputs.d_tilde.depth.map(|d| if d.is_finite() { d } else { 0.0 });
        let q = &inputs.d_tilde.valid;
        let stacked: Vec<f64> = d_tilde
            .data()
            .iter()
            .chain(q.data())
            .chain(inputs.bg_probabilities().data())
            .copied()
            .collect();
        let x = g.constant(Tensor::new(&[inputs.num_bg_classes() + 2, h, w], stacked)?);
        let d1 = self.dc1.forward(g, store, x)?;
        let small = g.resize_bilinear(d1, h.div_ceil(2), w.div_ceil(2))?;
        let s = self.dc2[0].forward(g, store, small)?;
        let s = g.relu(s);
        let s = self.dc2[1].forward(g, store, s)?;
        let up = g.resize_bilinear(s, h, w)?;
        let d2 = g.add(d1, up)?;
        let fill = self.fill.forward(g, store, d2)?;
        let fill = g.reshape(fill, &[h, w])?;
        let bias = self.bias.forward(g, store, d2)?;
        let bias = g.reshape(bias, &[h, w])?;

        let qv = g.constant(q.clone());
        let dv = g.constant(d_tilde);
        let inv_q = g.constant(q.map(|v| 1.0 - v));
        let kept = g.mul(qv, dv)?;
        let filled = g.mul(inv_q, fill)?;
        let depth = g.add(kept, filled)?;
        let depth = g.add(depth, bias)?;
        Ok(CompletedDepth { depth, fill, bias })
    }
}

/// Value tensor net: one `3×3` conv over background logits for channel 0 and
/// one shared `3×3` conv over `[m̂^i, background logits]` for every instance
/// channel, each followed by softplus so values stay positive.
#[derive(Debug, Clone)]
pub struct ValueNet {
    pub background: Conv,
    pub instance: Conv,
}

impl ValueNet {
    pub fn new(store: &mut ParamStore, name: &str, c_bg: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            background: Conv::new(store, &format!("{name}.bg"), c_bg, 1, 3, rng)?,
            instance: Conv::new(store, &format!("{name}.fg"), c_bg + 1, 1, 3, rng)?,
        })
    }

    /// `V` as `[H×W×(N+1)]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &RefineInputs) -> Result<Var> {
        let (h, w, n) = (inputs.height(), inputs.width(), inputs.instances.len());
        let logits = g.constant(inputs.bg_logits.clone());
        let v0 = self.background.forward(g, store, logits)?;
        let mut channels = v0;
        if n > 0 {
            let mut batch = Vec::with_capacity(n * (inputs.num_bg_classes() + 1) * h * w);
            for inst in &inputs.instances {
                batch.extend_from_slice(inst.mask.data());
                batch.extend_from_slice(inputs.bg_logits.data());
            }
            let x = g.constant(Tensor::new(&[n, inputs.num_bg_classes() + 1, h, w], batch)?);
            let vi = self.instance.forward(g, store, x)?;
            let vi = g.reshape(vi, &[n, h, w])?;
            channels = g.concat(&[v0, vi], 0)?;
        }
        let v = g.softplus(channels);
        g.permute(v, &[1, 2, 0])
    }
}

/// Channel 0 is `d̂^B`; channel `i` is `d̂^i` where `m̂^i ≥ 0.5` and `d_fgmax`
/// elsewhere. Discarded instances are `d_fgmax` everywhere. Output `[H×W×(N+1)]`.
pub fn build_aggregate_depth(
    g: &mut Graph,
    d_hat: Var,
    inputs: &RefineInputs,
    kept: &[bool],
    d_fgmax: f64,
) -> Result<Var> {
    let (h, w) = (inputs.height(), inputs.width());
    if g.shape(d_hat) != [h, w] || kept.len() != inputs.instances.len() {
        return Err(Error::shape("aggregate depth", &[h, w], g.shape(d_hat)));
    }
    let bg = g.reshape(d_hat, &[1, h, w])?;
    let mut parts = vec![bg];
    if !inputs.instances.is_empty() {
        let mut fg = Vec::with_capacity(inputs.instances.len() * h * w);
        for (inst, &k) in inputs.instances.iter().zip(kept) {
            fg.extend(inst.mask.data().iter().map(|&m| if k && m >= 0.5 { inst.depth } else { d_fgmax }));
        }
        parts.push(g.constant(Tensor::new(&[inputs.instances.len(), h, w], fg)?));
    }
    let d = g.concat(&parts, 0)?;
    g.permute(d, &[1, 2, 0])
}

/// `P̃ = softmax(−D / temperature) ∘ V` over the last axis.
pub fn object_select(g: &mut Graph, d: Var, v: Var, temperature: f64) -> Result<Var> {
    if g.shape(d) != g.shape(v) {
        return Err(Error::shape("object_select", g.shape(d), g.shape(v)));
    }
    let z = g.scale(d, -1.0 / temperature);
    let s = g.softmax_last(z);
    g.mul(s, v)
}

/// Selection scores and their per-pixel argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMap {
    /// `[H×W×(N+1)]`.
    pub scores: Tensor,
    /// Row-major `[H×W]`, values in `0..=N`.
    pub argmax: Vec<usize>,
}

impl SelectionMap {
    /// Ties go to the lowest channel, so background wins ties.
    pub fn from_scores(scores: Tensor) -> Self {
        let c = scores.last_dim();
        let argmax = scores
            .data()
            .chunks(c)
            .map(|px| {
                let mut best = 0;
                for (i, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        Self { scores, argmax }
    }

    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }
}

/// Background pixels (`P̂ = 0`) take the argmax background class with
/// instance 0; pixels selecting instance `i` take its class and id `C_BG + i`.
/// A selected instance that was discarded falls back to background.
pub fn merge_panoptic(sel: &SelectionMap, bg_logits: &Tensor, instances: &[Instance], kept: &[bool], c_bg: usize) -> Result<PanopticMap> {
    let (h, w) = (sel.height(), sel.width());
    let s = bg_logits.shape();
    if s.len() != 3 || s[1..] != [h, w] || s[0] != c_bg {
        return Err(Error::shape("merge_panoptic logits", &[c_bg, h, w], s));
    }
    if instances.len() != kept.len() || sel.scores.last_dim() != instances.len() + 1 {
        return Err(Error::shape("merge_panoptic instances", &[instances.len() + 1], &[sel.scores.last_dim()]));
    }
    let hw = h * w;
    let d = bg_logits.data();
    let mut map = PanopticMap::filled(h, w, 0);
    for p in 0..hw {
        let i = sel.argmax[p];
        if i > 0 && kept[i - 1] {
            map.class_id[p] = instances[i - 1].class;
            map.instance_id[p] = c_bg + i;
        } else {
            let mut best = 0;
            for k in 1..c_bg {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            map.class_id[p] = best;
        }
    }
    Ok(map)
}

/// Graph outputs of one refinement pass.
#[derive(Debug, Clone, Copy)]
pub struct RefineGraph {
    pub completed: CompletedDepth,
    pub aggregate: Var,
    pub value: Var,
    /// `P̃`, `[H×W×(N+1)]`.
    pub scores: Var,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub selection: SelectionMap,
    pub panoptic: PanopticMap,
    pub depth: DepthMap,
    pub kept: Vec<bool>,
}

/// Depth completion plus value net.
#[derive(Debug, Clone)]
pub struct RefineHead {
    pub config: RefineConfig,
    pub c_bg: usize,
    pub depth: DepthCompletion,
    pub value: ValueNet,
}

impl RefineHead {
    pub const PREFIX: &'static str = "refine";

    pub fn new(store: &mut ParamStore, c_bg: usize, config: RefineConfig, rng: &mut SeededRng) -> Result<Self> {
        if c_bg == 0 || config.hidden == 0 || config.temperature <= 0.0 || config.d_fgmax <= 0.0 {
            return Err(Error::Config("refine head needs c_bg, hidden, temperature and d_fgmax positive".into()));
        }
        Ok(Self {
            depth: DepthCompletion::new(store, &format!("{}.depth", Self::PREFIX), c_bg, config.hidden, rng)?,
            value: ValueNet::new(store, &format!("{}.value", Self::PREFIX), c_bg, rng)?,
            config,
            c_bg,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &RefineInputs) -> Result<RefineGraph> {
        if inputs.num_bg_classes() != self.c_bg {
            return Err(Error::shape("refine classes", &[self.c_bg], &[inputs.num_bg_classes()]));
        }
        let completed = self.depth.forward(g, store, inputs)?;
        let kept = inputs.kept(self.config.presence_threshold);
        let aggregate = build_aggregate_depth(g, completed.depth, inputs, &kept, self.config.d_fgmax)?;
        let value = self.value.forward(g, store, inputs)?;
        let scores = object_select(g, aggregate, value, self.config.temperature)?;
        Ok(RefineGraph {
            completed,
            aggregate,
            value,
            scores,
        })
    }

    /// `(select, bias)` losses against the target selection map `P*`.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, inputs: &RefineInputs, target: &[usize]) -> Result<(Var, Var)> {
        let out = self.forward(g, store, inputs)?;
        let (h, w, c) = (inputs.height(), inputs.width(), inputs.instances.len() + 1);
        if target.len() != h * w {
            return Err(Error::shape("refine target", &[h * w], &[target.len()]));
        }
        let flat = g.reshape(out.scores, &[h * w, c])?;
        tape::refinement_loss(g, flat, target, out.completed.bias)
    }

    pub fn predict(&self, store: &ParamStore, inputs: &RefineInputs) -> Result<RefineOutput> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, inputs)?;
        let selection = SelectionMap::from_scores(g.value(out.scores).clone());
        let kept = inputs.kept(self.config.presence_threshold);
        let panoptic = merge_panoptic(&selection, &inputs.bg_logits, &inputs.instances, &kept, self.c_bg)?;
        let depth = DepthMap::dense(g.value(out.completed.depth).clone());
        Ok(RefineOutput {
            selection,
            panoptic,
            depth,
            kept,
        })
    }
}

#[cfg(test)]
mod tests;
