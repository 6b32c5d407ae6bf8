use crate::attention::{AgentMask, AttendMask, Attention, AttentionSpec, TokenLayout, Variant};
use crate::error::Result;
use crate::linalg::{Conv, Graph, LayerNorm, Linear, ParamStore, SeededRng, Tensor, Var};

/// Token shape of a branch: `[M×d]` rows or `[M×C×H×W]` maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Rows { width: usize },
    Maps { channels: usize, height: usize, width: usize },
}

impl Stream {
    fn channels(self) -> usize {
        match self {
            Stream::Rows { width } => width,
            Stream::Maps { channels, .. } => channels,
        }
    }

    /// Features normalized together by layer norm.
    fn norm_width(self) -> usize {
        match self {
            Stream::Rows { width } => width,
            Stream::Maps { channels, height, width } => channels * height * width,
        }
    }

    fn layout(self) -> TokenLayout {
        match self {
            Stream::Rows { .. } => TokenLayout::Rows,
            Stream::Maps { height, width, .. } => TokenLayout::Maps { height, width },
        }
    }
}

/// Inverted dropout driven by a seeded generator; inactive without one.
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut SeededRng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn new(p: f64, rng: &'a mut SeededRng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n).map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect();
        let m = g.constant(Tensor::new(&shape, mask)?);
        g.mul(x, m)
    }
}

#[derive(Debug, Clone)]
enum FfnLayer {
    Linear(Linear),
    Conv(Conv),
}

impl FfnLayer {
    fn new(store: &mut ParamStore, name: &str, stream: Stream, cin: usize, cout: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(match stream {
            Stream::Rows { .. } => FfnLayer::Linear(Linear::new(store, name, cin, cout, rng)?),
            Stream::Maps { .. } => FfnLayer::Conv(Conv::new(store, name, cin, cout, 3, rng)?),
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            FfnLayer::Linear(l) => l.forward(g, store, x),
            FfnLayer::Conv(c) => c.forward(g, store, x),
        }
    }
}

fn norm(g: &mut Graph, store: &ParamStore, ln: &LayerNorm, stream: Stream, x: Var) -> Result<Var> {
    match stream {
        Stream::Rows { .. } => ln.forward(g, store, x),
        Stream::Maps { .. } => {
            let shape = g.shape(x).to_vec();
            let flat = g.reshape(x, &[shape[0], stream.norm_width()])?;
            let y = ln.forward(g, store, flat)?;
            g.reshape(y, &shape)
        }
    }
}

/// Masks and memory for one attention call.
pub struct AttendTo<'m> {
    pub agent: &'m AgentMask,
    pub attend: &'m AttendMask,
}

/// Pre-LN transformer block: self-attention, optional cross-attention, and a
/// two-layer feed-forward net, each behind layer norm with a residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub stream: Stream,
    ln_self: LayerNorm,
    pub self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln_ffn: LayerNorm,
    ffn: [FfnLayer; 2],
}

#[derive(Debug, Clone, Copy)]
pub struct BlockSpec {
    pub stream: Stream,
    pub variant: Variant,
    pub heads: usize,
    pub ffn: usize,
    pub cross: bool,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, spec: BlockSpec, rng: &mut SeededRng) -> Result<Self> {
        let c = spec.stream.channels();
        let attn_spec = AttentionSpec {
            variant: spec.variant,
            layout: spec.stream.layout(),
            width: c,
            heads: spec.heads,
            kernel: 3,
            output_projection: true,
        };
        let nw = spec.stream.norm_width();
        let cross = if spec.cross {
            Some((
                LayerNorm::new(store, &format!("{name}.ln_cross"), nw)?,
                Attention::new(store, &format!("{name}.cross"), attn_spec, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            stream: spec.stream,
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), nw)?,
            self_attn: Attention::new(store, &format!("{name}.self"), attn_spec, rng)?,
            cross,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), nw)?,
            ffn: [
                FfnLayer::new(store, &format!("{name}.ffn.0"), spec.stream, c, spec.ffn, rng)?,
                FfnLayer::new(store, &format!("{name}.ffn.1"), spec.stream, spec.ffn, c, rng)?,
            ],
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        own: &AttendTo,
        memory: Option<(Var, &AttendTo)>,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let h = norm(g, store, &self.ln_self, self.stream, x)?;
        let a = self.self_attn.forward(g, store, h, h, Some(own.agent), own.attend)?;
        let a = drop.apply(g, a)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, attn)), Some((mem, to))) = (&self.cross, memory) {
            let h = norm(g, store, ln, self.stream, x)?;
            let a = attn.forward(g, store, h, mem, Some(to.agent), to.attend)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
        }
        let h = norm(g, store, &self.ln_ffn, self.stream, x)?;
        let f = self.ffn[0].forward(g, store, h)?;
        let f = g.relu(f);
        let f = self.ffn[1].forward(g, store, f)?;
        let f = drop.apply(g, f)?;
        g.add(x, f)
    }
}

/// Blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<Block>,
    final_ln: LayerNorm,
    stream: Stream,
}

impl Stack {
    pub fn new(store: &mut ParamStore, name: &str, depth: usize, spec: BlockSpec, rng: &mut SeededRng) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.{i}"), spec, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            final_ln: LayerNorm::new(store, &format!("{name}.ln_out"), spec.stream.norm_width())?,
            stream: spec.stream,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        own: &AttendTo,
        memory: Option<(Var, &AttendTo)>,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h, own, memory, drop)?;
        }
        norm(g, store, &self.final_ln, self.stream, h)
    }
}
