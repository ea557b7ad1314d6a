//! Parameterised layers: thin handles over [`ParamId`]s registered in a store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{ConvSpec, Graph, Var};
use super::params::{BufferId, Init, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    /// `same`-padded convolution (`pad = k / 2`).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            &[k, k, cin, cout],
            Init::HeNormal(k * k * cin),
            rng,
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng));
        Conv2d {
            w,
            b,
            spec: ConvSpec { k, stride, pad: k / 2 },
            cin,
            cout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.conv2d(x, self.w, self.b, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub w: ParamId,
    pub spec: ConvSpec,
}

impl DepthwiseConv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), &[k, k, c], Init::HeNormal(k * k), rng);
        DepthwiseConv2d {
            w,
            spec: ConvSpec { k, stride, pad: k / 2 },
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.depthwise(x, self.w, None, self.spec)
    }
}

/// Learned 2x up-sampling (transposed convolution, kernel 2, stride 2).
#[derive(Debug, Clone)]
pub struct UpConv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl UpConv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), &[cin, 2, 2, cout], Init::HeNormal(cin), rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng));
        UpConv2d { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.up_conv(x, self.w, self.b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
}

impl BatchNorm2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), &[c], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), &[c], Init::Zeros, rng),
            mean: store.add_buffer(format!("{name}.running_mean"), vec![0.0; c]),
            var: store.add_buffer(format!("{name}.running_var"), vec![1.0; c]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.batch_norm(x, self.gamma, self.beta, self.mean, self.var)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Linear {
            w: store.add(format!("{name}.weight"), &[din, dout], Init::HeNormal(din), rng),
            b: store.add(format!("{name}.bias"), &[dout], Init::Zeros, rng),
        }
    }

    /// Glorot-initialised variant for output heads followed by a squashing activation.
    pub fn new_head<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Linear {
            w: store.add(
                format!("{name}.weight"),
                &[din, dout],
                Init::GlorotUniform(din, dout),
                rng,
            ),
            b: store.add(format!("{name}.bias"), &[dout], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.w, Some(self.b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
        }
    }
}
