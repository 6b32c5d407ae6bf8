//! Forecasting transformer: feature models, Pre-LN encoder and decoder stacks
//! for the location and appearance branches, and the output heads.

mod blocks;
mod model;

use serde::{Deserialize, Serialize};

pub use blocks::{AttendTo, Block, BlockSpec, Dropout, Stack, Stream};
pub use model::{AgentForecast, DecodeMode, Decoded, Encoded, ForecastOutput, Forecaster, ForegroundLoss};

use crate::attention::Variant;
use crate::error::{Error, Result};
use crate::linalg::Tensor;

/// Sinusoidal encoding of frame `t` with base 1000:
/// `τ(k) = sin(t / 1000^{k/d})` for even `k`, `cos(t / 1000^{(k−1)/d})` for odd `k`.
pub fn temporal_encoding(t: usize, d_tau: usize) -> Result<Tensor> {
    if d_tau == 0 || d_tau % 2 != 0 {
        return Err(Error::Config(format!("temporal encoding width {d_tau} must be even and positive")));
    }
    let data = (0..d_tau)
        .map(|k| {
            let e = (k - k % 2) as f64 / d_tau as f64;
            let arg = t as f64 / 1000f64.powf(e);
            if k % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect();
    Tensor::new(&[d_tau], data)
}

pub fn one_hot(class: usize, n: usize) -> Result<Tensor> {
    if class >= n {
        return Err(Error::Contract(format!("class {class} outside 0..{n}")));
    }
    let mut t = Tensor::zeros(&[n]);
    t.data_mut()[class] = 1.0;
    Ok(t)
}

/// Width of box-plus-depth rows.
pub const LOC_DIM: usize = 5;
/// Width of odometry rows.
pub const ODO_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncDecConfig {
    pub d_e: usize,
    pub d_tau: usize,
    pub heads: usize,
    pub ffn: usize,
    pub depth: usize,
    pub app_channels: usize,
    pub app_height: usize,
    pub app_width: usize,
    /// Channel width of the appearance embeddings.
    pub app_embed: usize,
    pub app_ffn: usize,
    pub app_heads: usize,
    /// Hidden widths of the location, presence and velocity MLPs.
    pub head_hidden: [usize; 2],
    pub n_things: usize,
    /// Self- and cross-attention variant of the location branch.
    pub loc_attention: Variant,
    pub dropout: f64,
}

impl Default for EncDecConfig {
    fn default() -> Self {
        Self {
            d_e: 16,
            d_tau: 16,
            heads: 2,
            ffn: 32,
            depth: 2,
            app_channels: 8,
            app_height: 4,
            app_width: 4,
            app_embed: 8,
            app_ffn: 16,
            app_heads: 2,
            head_hidden: [32, 16],
            n_things: 2,
            loc_attention: Variant::AgentAwareDifference,
            dropout: 0.0,
        }
    }
}

impl EncDecConfig {
    /// Full-size widths (embedding 256, 8 heads, 256×14×14 appearance).
    pub fn paper_scale(n_things: usize) -> Self {
        Self {
            d_e: 256,
            d_tau: 256,
            heads: 8,
            ffn: 512,
            depth: 2,
            app_channels: 256,
            app_height: 14,
            app_width: 14,
            app_embed: 256,
            app_ffn: 512,
            app_heads: 8,
            head_hidden: [512, 256],
            n_things,
            loc_attention: Variant::AgentAwareDifference,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_e", self.d_e),
            ("d_tau", self.d_tau),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("depth", self.depth),
            ("app_channels", self.app_channels),
            ("app_height", self.app_height),
            ("app_width", self.app_width),
            ("app_embed", self.app_embed),
            ("app_ffn", self.app_ffn),
            ("app_heads", self.app_heads),
            ("head_hidden[0]", self.head_hidden[0]),
            ("head_hidden[1]", self.head_hidden[1]),
            ("n_things", self.n_things),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_tau % 2 != 0 {
            return Err(Error::Config("d_tau must be even".into()));
        }
        if self.d_e % self.heads != 0 || self.app_embed % self.app_heads != 0 {
            return Err(Error::Config("embedding widths must divide evenly into heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn app_shape(&self) -> [usize; 3] {
        [self.app_channels, self.app_height, self.app_width]
    }
}

/// Boxes, depth and presence of one agent over all frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrack {
    /// `[T_total×5]` rows `(x0, y0, x1, y1, d)`.
    pub x: Tensor,
    /// `[T_total]`, binary.
    pub presence: Tensor,
    pub class_id: usize,
}

impl InstanceTrack {
    pub fn frames(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn present(&self, t: usize) -> bool {
        self.presence.data()[t] != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames();
        if self.x.shape() != [n, LOC_DIM] || self.presence.shape() != [n] {
            return Err(Error::shape("instance track", self.x.shape(), self.presence.shape()));
        }
        for t in 0..n {
            let p = self.presence.data()[t];
            if p != 0.0 && p != 1.0 {
                return Err(Error::Contract(format!("presence at frame {t} is not binary")));
            }
            let r = self.x.row(t);
            if p == 1.0 && (r[2] < r[0] || r[3] < r[1]) {
                return Err(Error::Contract(format!("degenerate box at frame {t}")));
            }
        }
        Ok(())
    }
}

/// One agent's track, appearance features and identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInput {
    pub id: usize,
    pub track: InstanceTrack,
    /// `[T_total×C×h×w]`.
    pub appearance: Tensor,
}

/// Model inputs: `t_in` observed frames followed by `horizon` future frames.
/// Future rows of tracks and appearance are targets; future odometry is used
/// as decoder input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastInputs {
    pub agents: Vec<AgentInput>,
    /// `[T_total×5]`, already standardized.
    pub odometry: Tensor,
    pub t_in: usize,
    pub horizon: usize,
}

impl ForecastInputs {
    pub fn total_frames(&self) -> usize {
        self.t_in + self.horizon
    }

    pub fn validate(&self, cfg: &EncDecConfig) -> Result<()> {
        if self.t_in == 0 || self.horizon == 0 {
            return Err(Error::Contract("need at least one input and one future frame".into()));
        }
        let tt = self.total_frames();
        if self.odometry.shape() != [tt, ODO_DIM] {
            return Err(Error::shape("odometry", self.odometry.shape(), &[tt, ODO_DIM]));
        }
        let [c, h, w] = cfg.app_shape();
        for a in &self.agents {
            a.track.validate()?;
            if a.track.frames() != tt {
                return Err(Error::shape("track frames", &[a.track.frames()], &[tt]));
            }
            if a.appearance.shape() != [tt, c, h, w] {
                return Err(Error::shape("appearance", a.appearance.shape(), &[tt, c, h, w]));
            }
            if a.track.class_id >= cfg.n_things {
                return Err(Error::Contract(format!("class {} outside 0..{}", a.track.class_id, cfg.n_things)));
            }
        }
        Ok(())
    }

    /// Reorders agents; `perm[k]` is the old index of new agent `k`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            agents: perm.iter().map(|&i| self.agents[i].clone()).collect(),
            ..self.clone()
        }
    }
}
