//! Scaled dot-product, difference, agent-aware and agent-aware difference
//! attention over row tokens or convolutional feature maps.
//!
//! Every variant produces `Y = softmax(Z/√d_h + mask) · V_O − V_S`, where the
//! `V_S` term is absent for the dot-product forms and `d_h` is the per-head
//! width. Scores:
//!
//! * dot: `Z = Q Kᵀ`
//! * difference: `Z = Q K_Rᵀ − 1·diag(K_B K_Rᵀ)ᵀ`
//! * agent-aware: `Z = M ⊙ Z_agent + (1 − M) ⊙ Z_context` with either of the above.

mod masks;

pub use masks::{build_masks, AgentMask, AttendMask, MaskMode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Conv, Graph, Linear, ParamStore, SeededRng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dot,
    Difference,
    AgentAware,
    AgentAwareDifference,
}

impl Variant {
    pub fn is_difference(self) -> bool {
        matches!(self, Variant::Difference | Variant::AgentAwareDifference)
    }

    pub fn is_agent_aware(self) -> bool {
        matches!(self, Variant::AgentAware | Variant::AgentAwareDifference)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dot => "dot",
            Variant::Difference => "difference",
            Variant::AgentAware => "agent_aware",
            Variant::AgentAwareDifference => "agent_aware_difference",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dot" => Variant::Dot,
            "difference" => Variant::Difference,
            "agent_aware" => Variant::AgentAware,
            "agent_aware_difference" => Variant::AgentAwareDifference,
            other => return Err(Error::Config(format!("unknown attention variant {other:?}"))),
        })
    }
}

/// How tokens are stored outside the attention core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenLayout {
    /// `[M×d]`.
    Rows,
    /// `[M×C×H×W]`; attention runs independently per spatial location.
    Maps { height: usize, width: usize },
}

/// A projection `f_*`: affine over rows, or a same-padded conv over maps.
#[derive(Debug, Clone)]
pub enum Proj {
    Linear(Linear),
    Conv(Conv),
}

impl Proj {
    fn new(store: &mut ParamStore, name: &str, layout: TokenLayout, width: usize, kernel: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(match layout {
            TokenLayout::Rows => Proj::Linear(Linear::new(store, name, width, width, rng)?),
            TokenLayout::Maps { .. } => Proj::Conv(Conv::new(store, name, width, width, kernel, rng)?),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Proj::Linear(l) => l.forward(g, store, x),
            Proj::Conv(c) => c.forward(g, store, x),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        match self {
            Proj::Linear(l) => l.zero(store),
            Proj::Conv(c) => c.zero(store),
        }
    }

    pub fn weight_bias(&self) -> (crate::linalg::ParamId, crate::linalg::ParamId) {
        match self {
            Proj::Linear(l) => (l.weight, l.bias),
            Proj::Conv(c) => (c.weight, c.bias),
        }
    }
}

/// Token space → `[B×M×d]` with `B = 1` for rows and `B = H·W` for maps.
fn to_core(g: &mut Graph, layout: TokenLayout, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    match layout {
        TokenLayout::Rows => g.reshape(x, &[1, s[0], s[1]]),
        TokenLayout::Maps { height, width } => {
            let r = g.reshape(x, &[s[0], s[1], height * width])?;
            g.permute(r, &[2, 0, 1])
        }
    }
}

fn from_core(g: &mut Graph, layout: TokenLayout, y: Var) -> Result<Var> {
    let s = g.shape(y).to_vec();
    match layout {
        TokenLayout::Rows => g.reshape(y, &[s[1], s[2]]),
        TokenLayout::Maps { height, width } => {
            let p = g.permute(y, &[1, 2, 0])?;
            g.reshape(p, &[s[1], s[2], height, width])
        }
    }
}

/// `Q Kᵀ` or, with `k_b`, `Q K_Rᵀ − 1·diag(K_B K_Rᵀ)ᵀ`, all in `[B×M×d]`.
fn scores(g: &mut Graph, q: Var, k_r: Var, k_b: Option<Var>) -> Result<Var> {
    let kt = g.transpose(k_r)?;
    let z = g.matmul(q, kt)?;
    let Some(k_b) = k_b else { return Ok(z) };
    let prod = g.mul(k_b, k_r)?;
    let diag = g.sum_axis(prod, 2)?;
    let s = g.shape(diag).to_vec();
    let diag = g.reshape(diag, &[s[0], 1, s[1]])?;
    g.sub(z, diag)
}

/// Per-head projected inputs in core layout.
struct HeadInputs {
    q: Var,
    k_r: Var,
    k_b: Option<Var>,
    q_ctx: Option<Var>,
    k_r_ctx: Option<Var>,
    k_b_ctx: Option<Var>,
    v_o: Var,
    v_s: Option<Var>,
}

/// `M ⊙ Za + (1 − M) ⊙ Zc`, evaluated as `Zc + M ⊙ (Za − Zc)`.
fn blend(g: &mut Graph, za: Var, h: &HeadInputs, m: Var) -> Result<Var> {
    let q_ctx = h.q_ctx.expect("context query present for agent-aware variants");
    let k_ctx = h.k_r_ctx.expect("context key present for agent-aware variants");
    let zc = scores(g, q_ctx, k_ctx, h.k_b_ctx)?;
    let d = g.sub(za, zc)?;
    let md = g.mul(d, m)?;
    g.add(zc, md)
}

fn head_forward(g: &mut Graph, h: &HeadInputs, agent: Option<Var>, bias: Var, scale: f64) -> Result<Var> {
    let mut z = scores(g, h.q, h.k_r, h.k_b)?;
    if let Some(m) = agent {
        z = blend(g, z, h, m)?;
    }
    let z = g.scale(z, scale);
    let z = g.add(z, bias)?;
    let a = g.softmax_last(z);
    let y = g.matmul(a, h.v_o)?;
    match h.v_s {
        Some(vs) => g.sub(y, vs),
        None => Ok(y),
    }
}

/// One attention layer: projections for the chosen variant, `heads` slices,
/// and an optional output projection.
#[derive(Debug, Clone)]
pub struct Attention {
    pub variant: Variant,
    pub layout: TokenLayout,
    pub width: usize,
    pub heads: usize,
    pub q: Proj,
    pub k_r: Proj,
    pub k_b: Option<Proj>,
    pub q_ctx: Option<Proj>,
    pub k_r_ctx: Option<Proj>,
    pub k_b_ctx: Option<Proj>,
    pub v_o: Proj,
    pub v_s: Option<Proj>,
    pub out: Option<Proj>,
}

/// Construction options for [`Attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionSpec {
    pub variant: Variant,
    pub layout: TokenLayout,
    pub width: usize,
    pub heads: usize,
    /// Conv kernel for map layouts.
    pub kernel: usize,
    pub output_projection: bool,
}

impl AttentionSpec {
    pub fn rows(variant: Variant, width: usize, heads: usize) -> Self {
        Self {
            variant,
            layout: TokenLayout::Rows,
            width,
            heads,
            kernel: 3,
            output_projection: heads > 1,
        }
    }
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, spec: AttentionSpec, rng: &mut SeededRng) -> Result<Self> {
        if spec.heads == 0 || spec.width % spec.heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {} is not divisible by {} heads",
                spec.width, spec.heads
            )));
        }
        let v = spec.variant;
        let mut mk = |suffix: &str| Proj::new(store, &format!("{name}.{suffix}"), spec.layout, spec.width, spec.kernel, rng);
        let q = mk("q")?;
        let k_r = mk("k_r")?;
        let k_b = if v.is_difference() { Some(mk("k_b")?) } else { None };
        let (q_ctx, k_r_ctx) = if v.is_agent_aware() {
            (Some(mk("q_ctx")?), Some(mk("k_r_ctx")?))
        } else {
            (None, None)
        };
        let k_b_ctx = if v == Variant::AgentAwareDifference { Some(mk("k_b_ctx")?) } else { None };
        let v_o = mk("v_o")?;
        let v_s = if v.is_difference() { Some(mk("v_s")?) } else { None };
        let out = if spec.output_projection { Some(mk("out")?) } else { None };
        Ok(Self {
            variant: v,
            layout: spec.layout,
            width: spec.width,
            heads: spec.heads,
            q,
            k_r,
            k_b,
            q_ctx,
            k_r_ctx,
            k_b_ctx,
            v_o,
            v_s,
            out,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    fn project(&self, g: &mut Graph, store: &ParamStore, x_self: Var, x_other: Var) -> Result<HeadInputs> {
        let layout = self.layout;
        let proj = |g: &mut Graph, p: &Proj, x: Var| -> Result<Var> {
            let y = p.forward(g, store, x)?;
            to_core(g, layout, y)
        };
        let opt = |g: &mut Graph, p: &Option<Proj>, x: Var| p.as_ref().map(|p| proj(g, p, x)).transpose();
        Ok(HeadInputs {
            q: proj(g, &self.q, x_self)?,
            k_r: proj(g, &self.k_r, x_other)?,
            k_b: opt(g, &self.k_b, x_other)?,
            q_ctx: opt(g, &self.q_ctx, x_self)?,
            k_r_ctx: opt(g, &self.k_r_ctx, x_other)?,
            k_b_ctx: opt(g, &self.k_b_ctx, x_other)?,
            v_o: proj(g, &self.v_o, x_other)?,
            v_s: opt(g, &self.v_s, x_self)?,
        })
    }

    /// Unscaled, unmasked scores `Z` of a single-head row-layout layer, `[M1×M2]`.
    pub fn entity_scores(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_self: Var,
        x_other: Var,
        agent: Option<&AgentMask>,
    ) -> Result<Var> {
        if self.heads != 1 || self.layout != TokenLayout::Rows {
            return Err(Error::Config("entity scores are defined for single-head row attention".into()));
        }
        let h = self.project(g, store, x_self, x_other)?;
        let mut z = scores(g, h.q, h.k_r, h.k_b)?;
        if self.variant.is_agent_aware() {
            let m = agent.ok_or_else(|| Error::Contract("agent mask required".into()))?;
            let m = g.constant(m.tensor().reshape(&[1, m.tensor().shape()[0], m.tensor().shape()[1]])?);
            z = blend(g, z, &h, m)?;
        }
        from_core(g, TokenLayout::Rows, z)
    }

    /// Attends `x_self` (`M1` tokens) over `x_other` (`M2` tokens).
    ///
    /// `agent` is required for agent-aware variants and ignored otherwise.
    /// A query row with no allowed key is an error.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_self: Var,
        x_other: Var,
        agent: Option<&AgentMask>,
        attend: &AttendMask,
    ) -> Result<Var> {
        let (m1, m2) = (g.shape(x_self)[0], g.shape(x_other)[0]);
        if attend.tensor().shape() != [m1, m2] {
            return Err(Error::shape("attend mask", attend.tensor().shape(), &[m1, m2]));
        }
        if let Some(row) = attend.first_empty_row() {
            return Err(Error::MaskedRow { row });
        }
        let agent_var = if self.variant.is_agent_aware() {
            let m = agent.ok_or_else(|| Error::Contract(format!("{} attention needs an agent mask", self.variant.name())))?;
            if m.tensor().shape() != [m1, m2] {
                return Err(Error::shape("agent mask", m.tensor().shape(), &[m1, m2]));
            }
            Some(g.constant(m.tensor().reshape(&[1, m1, m2])?))
        } else {
            None
        };
        let bias = g.constant(attend.additive_bias().reshape(&[1, m1, m2])?);

        let HeadInputs {
            q,
            k_r,
            k_b,
            q_ctx,
            k_r_ctx,
            k_b_ctx,
            v_o,
            v_s,
        } = self.project(g, store, x_self, x_other)?;

        let dh = self.head_width();
        let scale = 1.0 / (dh as f64).sqrt();
        let y = if self.heads == 1 {
            let h = HeadInputs {
                q,
                k_r,
                k_b,
                q_ctx,
                k_r_ctx,
                k_b_ctx,
                v_o,
                v_s,
            };
            head_forward(g, &h, agent_var, bias, scale)?
        } else {
            let mut outs = Vec::with_capacity(self.heads);
            for head in 0..self.heads {
                let sl = |g: &mut Graph, v: Var| g.slice(v, 2, head * dh, dh);
                let sl_opt = |g: &mut Graph, v: Option<Var>| v.map(|v| g.slice(v, 2, head * dh, dh)).transpose();
                let h = HeadInputs {
                    q: sl(g, q)?,
                    k_r: sl(g, k_r)?,
                    k_b: sl_opt(g, k_b)?,
                    q_ctx: sl_opt(g, q_ctx)?,
                    k_r_ctx: sl_opt(g, k_r_ctx)?,
                    k_b_ctx: sl_opt(g, k_b_ctx)?,
                    v_o: sl(g, v_o)?,
                    v_s: sl_opt(g, v_s)?,
                };
                outs.push(head_forward(g, &h, agent_var, bias, scale)?);
            }
            g.concat(&outs, 2)?
        };
        let y = from_core(g, self.layout, y)?;
        match &self.out {
            Some(p) => p.forward(g, store, y),
            None => Ok(y),
        }
    }
}

/// Row-token inputs to a single attention call.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub x_self: Tensor,
    pub x_other: Tensor,
}

impl AttentionInputs {
    pub fn new(x_self: Tensor, x_other: Tensor) -> Result<Self> {
        if x_self.rank() != 2 || x_other.rank() != 2 || x_self.last_dim() != x_other.last_dim() {
            return Err(Error::shape("attention inputs", x_self.shape(), x_other.shape()));
        }
        Ok(Self { x_self, x_other })
    }

    pub fn width(&self) -> usize {
        self.x_self.last_dim()
    }
}

fn run(
    expect: Variant,
    inputs: &AttentionInputs,
    attn: &Attention,
    store: &ParamStore,
    agent: Option<&AgentMask>,
    attend: &AttendMask,
) -> Result<Tensor> {
    if attn.variant != expect {
        return Err(Error::Config(format!(
            "expected {} parameters, got {}",
            expect.name(),
            attn.variant.name()
        )));
    }
    if inputs.width() != attn.width {
        return Err(Error::shape("attention width", inputs.x_self.shape(), &[attn.width]));
    }
    let mut g = Graph::new();
    let xs = g.constant(inputs.x_self.clone());
    let xo = g.constant(inputs.x_other.clone());
    let y = attn.forward(&mut g, store, xs, xo, agent, attend)?;
    Ok(g.value(y).clone())
}

pub fn dot_attention(inputs: &AttentionInputs, attn: &Attention, store: &ParamStore, attend: &AttendMask) -> Result<Tensor> {
    run(Variant::Dot, inputs, attn, store, None, attend)
}

pub fn difference_attention(inputs: &AttentionInputs, attn: &Attention, store: &ParamStore, attend: &AttendMask) -> Result<Tensor> {
    run(Variant::Difference, inputs, attn, store, None, attend)
}

pub fn agent_aware_attention(
    inputs: &AttentionInputs,
    attn: &Attention,
    store: &ParamStore,
    agent: &AgentMask,
    attend: &AttendMask,
) -> Result<Tensor> {
    run(Variant::AgentAware, inputs, attn, store, Some(agent), attend)
}

pub fn agent_aware_difference_attention(
    inputs: &AttentionInputs,
    attn: &Attention,
    store: &ParamStore,
    agent: &AgentMask,
    attend: &AttendMask,
) -> Result<Tensor> {
    run(Variant::AgentAwareDifference, inputs, attn, store, Some(agent), attend)
}

/// Any variant with any head count; `agent` is ignored by non-agent-aware variants.
pub fn multi_head(
    inputs: &AttentionInputs,
    attn: &Attention,
    store: &ParamStore,
    agent: Option<&AgentMask>,
    attend: &AttendMask,
) -> Result<Tensor> {
    run(attn.variant, inputs, attn, store, agent, attend)
}
