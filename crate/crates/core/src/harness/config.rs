//! Run configuration and its `key = value` file format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Every key of [`RunConfig::KEYS`] may appear at most once, and unknown
//! keys are errors. [`RunConfig::to_text`] writes every key, and parsing its
//! output gives back an identical config.

use serde::{Deserialize, Serialize};

use super::scene::{Motion, SceneOptions};
use crate::attention::Variant;
use crate::encdec::EncDecConfig;
use crate::error::{Error, Result};
use crate::losses::{IouSign, LossWeights};
use crate::metrics::ThresholdMode;
use crate::refine::RefineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub val_scenes: usize,
    pub agents: usize,
    pub t_in: usize,
    pub horizon: usize,
    pub motion: Motion,
    pub occlusion: f64,
    pub speed: f64,
    pub height: usize,
    pub width: usize,
    pub n_things: usize,
    pub app_channels: usize,
    pub app_size: usize,

    pub d_e: usize,
    pub d_tau: usize,
    pub heads: usize,
    pub ffn: usize,
    pub depth: usize,
    pub app_embed: usize,
    pub app_ffn: usize,
    pub app_heads: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub attention: Variant,
    pub dropout: f64,
    pub augment_shift: f64,
    pub augment_drift: f64,

    pub weights: LossWeights,
    pub iou_sign: IouSign,

    pub steps: usize,
    pub lr: f64,
    pub drop_step: usize,
    pub drop_factor: f64,
    pub refine_steps: usize,
    pub refine_lr: f64,
    pub refine_drop_step: usize,

    pub temperature: f64,
    pub d_fgmax: f64,
    pub refine_hidden: usize,
    pub presence_threshold: f64,

    pub pq_threshold: f64,
    pub pq_mode: ThresholdMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = EncDecConfig::default();
        Self {
            seed: 1,
            scenes: 4,
            val_scenes: 4,
            agents: 4,
            t_in: 4,
            horizon: 3,
            motion: Motion::LeaderFollower,
            occlusion: 0.0,
            speed: 1.0,
            height: 24,
            width: 32,
            n_things: m.n_things,
            app_channels: m.app_channels,
            app_size: m.app_height,
            d_e: m.d_e,
            d_tau: m.d_tau,
            heads: m.heads,
            ffn: m.ffn,
            depth: m.depth,
            app_embed: m.app_embed,
            app_ffn: m.app_ffn,
            app_heads: m.app_heads,
            hidden1: m.head_hidden[0],
            hidden2: m.head_hidden[1],
            attention: m.loc_attention,
            dropout: m.dropout,
            augment_shift: 0.0,
            augment_drift: 0.0,
            weights: LossWeights::default(),
            iou_sign: IouSign::AsWritten,
            // Full scale: 48000 steps, drop at 36000, initial rate 1e-4.
            steps: 500,
            lr: 1e-3,
            drop_step: 375,
            drop_factor: 0.1,
            // Full scale: 24000 steps, drop at 18000.
            refine_steps: 100,
            refine_lr: 1e-3,
            refine_drop_step: 75,
            temperature: 1.0,
            d_fgmax: 1e4,
            refine_hidden: 8,
            presence_threshold: 0.5,
            pq_threshold: 0.5,
            pq_mode: ThresholdMode::AtLeast,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $kind:ident, $doc:literal;)*) => {
        impl RunConfig {
            /// Every accepted key with a one-line description.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[$(($key, $doc)),*];

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(keys!(@show $kind, self.$($field).+)),)*
                    _ => None,
                }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => self.$($field).+ = keys!(@parse $kind, key, value),)*
                    _ => return Err(Error::Config(unknown_key(key))),
                }
                Ok(())
            }
        }
    };
    (@show num, $v:expr) => { $v.to_string() };
    (@show named, $v:expr) => { $v.name().to_string() };
    (@parse num, $k:expr, $v:expr) => { parse($k, $v)? };
    (@parse named, $k:expr, $v:expr) => { $v.parse()? };
}

keys! {
    "seed" => seed: num, "master seed for scenes, initialization and dropout";
    "scenes" => scenes: num, "training scenes generated by `train` when none are given";
    "val_scenes" => val_scenes: num, "held-out scenes for validation losses";
    "agents" => agents: num, "agents per generated scene";
    "t_in" => t_in: num, "observed frames T";
    "horizon" => horizon: num, "forecast frames F";
    "motion" => motion: named, "constant_velocity | accelerating | leader_follower";
    "occlusion" => occlusion: num, "per-frame probability that an agent is hidden";
    "speed" => speed: num, "velocity scale of generated scenes";
    "height" => height: num, "image rows";
    "width" => width: num, "image columns";
    "n_things" => n_things: num, "foreground classes";
    "app_channels" => app_channels: num, "appearance feature channels";
    "app_size" => app_size: num, "appearance feature map side";
    "d_e" => d_e: num, "embedding width";
    "d_tau" => d_tau: num, "temporal encoding width (even)";
    "heads" => heads: num, "location attention heads";
    "ffn" => ffn: num, "location feed-forward width";
    "depth" => depth: num, "blocks per encoder and decoder stack";
    "app_embed" => app_embed: num, "appearance embedding channels";
    "app_ffn" => app_ffn: num, "appearance feed-forward channels";
    "app_heads" => app_heads: num, "appearance attention heads";
    "hidden1" => hidden1: num, "first hidden width of the output MLPs";
    "hidden2" => hidden2: num, "second hidden width of the output MLPs";
    "attention" => attention: named, "dot | difference | agent_aware | agent_aware_difference";
    "dropout" => dropout: num, "dropout probability in the stacks";
    "augment_shift" => augment_shift: num, "largest random shift of a training scene's boxes per step, normalized units; 0 disables";
    "augment_drift" => augment_drift: num, "largest random per-track velocity added to training tracks, normalized units per frame; 0 disables";
    "lambda_box" => weights.box_l1: num, "box SmoothL1 weight";
    "lambda_depth" => weights.depth_l1: num, "depth SmoothL1 weight";
    "lambda_iou" => weights.iou: num, "IoU term weight";
    "lambda_presence" => weights.presence: num, "presence weight";
    "lambda_appearance" => weights.appearance: num, "appearance weight";
    "lambda_velocity" => weights.velocity: num, "velocity weight";
    "iou_sign" => iou_sign: named, "as_written | negated | one_minus";
    "steps" => steps: num, "foreground training steps";
    "lr" => lr: num, "foreground learning rate";
    "drop_step" => drop_step: num, "step at which the foreground rate drops";
    "drop_factor" => drop_factor: num, "multiplier applied at each drop step";
    "refine_steps" => refine_steps: num, "refinement training steps";
    "refine_lr" => refine_lr: num, "refinement learning rate";
    "refine_drop_step" => refine_drop_step: num, "step at which the refinement rate drops";
    "temperature" => temperature: num, "depth scale inside the selection softmax";
    "d_fgmax" => d_fgmax: num, "depth assigned outside instance masks";
    "refine_hidden" => refine_hidden: num, "depth completion channels";
    "presence_threshold" => presence_threshold: num, "sigmoid(presence) needed to keep an instance";
    "pq_threshold" => pq_threshold: num, "IoU needed for a segment match";
    "pq_mode" => pq_mode: named, "at_least | strict";
}

fn unknown_key(key: &str) -> String {
    let best = RunConfig::KEYS
        .iter()
        .map(|(k, _)| (edit_distance(key, k), *k))
        .min()
        .filter(|(d, _)| *d <= 3);
    match best {
        Some((_, k)) => format!("unknown key {key:?}; did you mean {k:?}?"),
        None => format!("unknown key {key:?}"),
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            cur.push((prev[j] + usize::from(ca != cb)).min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, doc) in Self::KEYS {
            s.push_str(&format!("# {doc}\n{k} = {}\n", self.get(k).expect("listed key")));
        }
        s
    }

    pub fn model(&self) -> EncDecConfig {
        EncDecConfig {
            d_e: self.d_e,
            d_tau: self.d_tau,
            heads: self.heads,
            ffn: self.ffn,
            depth: self.depth,
            app_channels: self.app_channels,
            app_height: self.app_size,
            app_width: self.app_size,
            app_embed: self.app_embed,
            app_ffn: self.app_ffn,
            app_heads: self.app_heads,
            head_hidden: [self.hidden1, self.hidden2],
            n_things: self.n_things,
            loc_attention: self.attention,
            dropout: self.dropout,
        }
    }

    pub fn refine(&self) -> RefineConfig {
        RefineConfig {
            d_fgmax: self.d_fgmax,
            temperature: self.temperature,
            hidden: self.refine_hidden,
            presence_threshold: self.presence_threshold,
        }
    }

    pub fn scene_options(&self) -> SceneOptions {
        SceneOptions {
            n_agents: self.agents,
            t_in: self.t_in,
            horizon: self.horizon,
            motion: self.motion,
            height: self.height,
            width: self.width,
            n_things: self.n_things,
            app: [self.app_channels, self.app_size, self.app_size],
            occlusion: self.occlusion,
            speed: self.speed,
        }
    }

    /// Learning rate at `step` for a schedule that drops once.
    pub fn rate(initial: f64, drop_step: usize, factor: f64, step: usize) -> f64 {
        if step >= drop_step {
            initial * factor
        } else {
            initial
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let positive = [
            ("agents", self.agents),
            ("t_in", self.t_in),
            ("horizon", self.horizon),
            ("height", self.height),
            ("width", self.width),
            ("refine_hidden", self.refine_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let rates = [("lr", self.lr), ("refine_lr", self.refine_lr), ("drop_factor", self.drop_factor), ("temperature", self.temperature)];
        if let Some((k, _)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let w = &self.weights;
        let lambdas = [w.box_l1, w.depth_l1, w.iou, w.presence, w.appearance, w.velocity];
        if lambdas.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if ![self.augment_shift, self.augment_drift].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config("augment_shift and augment_drift must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.occlusion) || !(self.speed >= 0.0) {
            return Err(Error::Config("occlusion must lie in [0, 1) and speed be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.pq_threshold) || !(0.0..=1.0).contains(&self.presence_threshold) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
