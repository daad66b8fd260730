//! The Lite 3x3 layer: a 1x1 pointwise convolution followed by a 3x3
//! depthwise convolution, batch normalisation and ReLU.

use alloc::format;

use rand::Rng;

use super::layers::{BatchNorm, Conv};
use super::Ctx;
use crate::error::{shape_err, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tape::Var;

const K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lite3x3Spec {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Lite3x3Spec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Lite3x3Spec { in_channels, out_channels }
    }

    /// Convolution weights, `(k² + c)·c'`.
    pub fn conv_params(&self) -> usize {
        (K * K + self.in_channels) * self.out_channels
    }

    /// Convolution weights plus the batch-norm affine pair.
    pub fn params(&self) -> usize {
        self.conv_params() + 2 * self.out_channels
    }

    /// Weights of a dense 3x3 convolution with the same widths, `k²·c·c'`.
    pub fn standard_conv_params(&self) -> usize {
        K * K * self.in_channels * self.out_channels
    }

    /// Multiply-adds on an `h × w` map, `h·w·(k² + c)·c'`.
    pub fn mult_adds(&self, h: usize, w: usize) -> usize {
        h * w * self.conv_params()
    }

    pub fn standard_mult_adds(&self, h: usize, w: usize) -> usize {
        h * w * self.standard_conv_params()
    }
}

#[derive(Clone, Debug)]
pub struct Lite3x3 {
    pub spec: Lite3x3Spec,
    pub pointwise: Conv,
    pub depthwise: Conv,
    pub bn: BatchNorm,
}

impl Lite3x3 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: Lite3x3Spec, rng: &mut R) -> Self {
        let (c, co) = (spec.in_channels, spec.out_channels);
        Lite3x3 {
            spec,
            pointwise: Conv::new(store, &format!("{name}.pw"), c, co, 1, 1, 0, rng),
            depthwise: Conv::depthwise(store, &format!("{name}.dw"), co, K, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), co, ParamGroup::Base),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.spec.in_channels {
            return Err(shape_err!("Lite 3x3 expects {} channels, got {c}", self.spec.in_channels));
        }
        let y = self.pointwise.forward(ctx, x)?;
        let y = self.depthwise.forward(ctx, y)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.tape.relu(y)
    }
}
