//! Parameterised layers. Each layer owns only [`ParamId`]s; values live in
//! a [`ParamStore`] and are placed on a [`Graph`] per forward pass.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{uniform, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

pub const LN_EPS: Float = 1e-6;

/// Affine map `x·W + b` on rows, `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (d_in as Float).sqrt();
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), uniform(rng, &[d_in, d_out], bound), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d_out]), false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([d], 1.0), false)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d]), false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Strided convolution with kernel equal to stride, producing a sequence
/// of `(H/S·W/S)×C_out` rows in raster order.
#[derive(Clone, Debug)]
pub struct PatchConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl PatchConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = c_in * stride * stride;
        let bound = 1.0 / (fan_in as Float).sqrt();
        Ok(PatchConv {
            kernel: store.add(
                format!("{name}.weight"),
                uniform(rng, &[c_in, stride, stride, c_out], bound),
                true,
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([c_out]), false)?,
            stride,
        })
    }

    /// `C_in×H×W` in, `(H/S·W/S)×C_out` out.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        let y = g.conv2d(x, k, self.stride)?;
        let c_out = g.shape(y)[0];
        let positions = g.shape(y)[1] * g.shape(y)[2];
        let flat = g.reshape(y, &[c_out, positions])?;
        let seq = g.transpose(flat)?;
        g.add_bias(seq, b)
    }
}

/// `positions×D` sequence to a `D×h×w` grid.
pub fn seq_to_grid(g: &mut Graph<'_>, seq: Var, h: usize, w: usize) -> Result<Var> {
    let d = g.shape(seq)[1];
    let t = g.transpose(seq)?;
    g.reshape(t, &[d, h, w])
}

/// `D×h×w` grid to a `positions×D` sequence.
pub fn grid_to_seq(g: &mut Graph<'_>, grid: Var) -> Result<Var> {
    let s = g.shape(grid).to_vec();
    let flat = g.reshape(grid, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}
