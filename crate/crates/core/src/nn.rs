//! Parameterised layers built on [`Graph`](crate::autograd::Graph).

use alloc::format;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, ParamId, ParamKind, ParamStore, Var};
use crate::error::Result;
use crate::math;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights (`U(±√(6 / fan_in))`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let in_per_group = in_channels / spec.groups;
        let fan_in = in_per_group * kernel * kernel;
        let bound = math::sqrt(6.0 / fan_in as f64);
        let shape = [out_channels, in_per_group, kernel, kernel];
        let mut w = Tensor::zeros(shape);
        for v in w.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        let weight = store.add(format!("{name}.weight"), ParamKind::Trainable, w);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Trainable,
                Tensor::zeros([out_channels, 1, 1, 1]),
            )
        });
        Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn param_count(&self) -> usize {
        let per_group = self.in_channels / self.spec.groups;
        self.out_channels * per_group * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = [channels, 1, 1, 1];
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(shape, 1.0)),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(shape)),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(shape)),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(shape, 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            (self.running_mean, self.running_var),
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

/// Convolution → batchnorm → ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.relu(y))
    }
}
