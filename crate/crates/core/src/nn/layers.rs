//! Parameterised primitives: convolutions, normalisation, dense layers.

use alloc::format;

use rand::Rng;

use super::Ctx;
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore, StatsId};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Zero-mean normal initialisation with variance `2 / fan_in`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, libm::sqrt(2.0 / fan_in.max(1) as f64), rng)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let w = he_normal(&[c_out, c_in, k, k], c_in * k * k, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamGroup::Base);
        Conv { weight, stride, padding, depthwise: false }
    }

    pub fn depthwise<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, k: usize, rng: &mut R) -> Self {
        let w = he_normal(&[channels, 1, k, k], k * k, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamGroup::Base);
        Conv { weight, stride: 1, padding: k / 2, depthwise: true }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        if self.depthwise {
            ctx.tape.depthwise_conv2d(x, w, self.padding)
        } else {
            ctx.tape.conv2d(x, w, self.stride, self.padding)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), group),
            stats: store.add_stats(format!("{name}.running"), channels),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        let stats = ctx.store.stats_mut(self.stats);
        ctx.tape.batch_norm(x, g, b, stats, ctx.mode)
    }

    /// Normalises an `N × C` matrix by viewing it as `N, C, 1, 1`.
    pub fn forward_flat(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let x4 = ctx.tape.reshape(x, &[shape[0], shape[1], 1, 1])?;
        let y = self.forward(ctx, x4)?;
        ctx.tape.reshape(y, &shape)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamGroup::Base),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamGroup::Base),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        ctx.tape.instance_norm(x, g, b)
    }
}

/// Convolution followed by batch normalisation and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), c_in, c_out, k, stride, padding, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), c_out, ParamGroup::Base);
        ConvBn { conv, bn, relu }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        if self.relu {
            ctx.tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(&[d_out, d_in], d_in, rng), group);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), group));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }
}
