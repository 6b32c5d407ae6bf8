//! Parameterised building blocks shared by the forecasting and refinement models.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::SeededRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine map over rows: `[M×in] → [M×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[fan_out], fan_in, rng)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        let b = g.reshape(b, &[1, self.fan_out])?;
        g.add(y, b)
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).value.data_mut().fill(0.0);
        store.get_mut(self.bias).value.data_mut().fill(0.0);
    }
}

/// Same-padded convolution over `[C×H×W]` or `[B×C×H×W]`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut SeededRng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel size must be odd")));
        }
        let fan_in = cin * kernel * kernel;
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng)?;
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).value.data_mut().fill(0.0);
        store.get_mut(self.bias).value.data_mut().fill(0.0);
    }
}

/// Layer norm over the last axis with learned gain/bias (init 1/0).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[width]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[width]))?;
        Ok(Self {
            gain,
            bias,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("{name}: MLP needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty MLP")
    }
}
