//! Parameterised building blocks shared by the attention blocks and the model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Deterministic parameter initialiser: truncated-normal weights, zero biases,
/// unit LayerNorm gains.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn weight<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::trunc_normal(shape, INIT_STD, &mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init.weight(&[in_dim, out_dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?,
            in_dim,
            out_dim,
        })
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// LayerNorm over the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer GELU MLP, `D → E·D → D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        expansion: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::Config("FFN expansion must be positive".into()));
        }
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * expansion, init)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * expansion, dim, init)?,
        })
    }

    pub fn num_params(dim: usize, expansion: usize) -> usize {
        Linear::num_params(dim, dim * expansion) + Linear::num_params(dim * expansion, dim)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// 2-D convolution over a `[C, H, W]` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "groups {groups} must divide {in_channels} and {out_channels}"
            )));
        }
        let shape = [out_channels, in_channels / groups, kernel, kernel];
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init.weight(&shape))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    pub fn num_params(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> usize {
        out_channels * (in_channels / groups) * kernel * kernel + out_channels
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding, self.groups)
    }
}
