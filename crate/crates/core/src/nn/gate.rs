//! The aggregation gate: global average pooling, a bottleneck MLP with one
//! ReLU hidden layer, and a sigmoid producing one weight per channel.

use alloc::format;

use rand::Rng;

use super::layers::Linear;
use super::Ctx;
use crate::error::Result;
use crate::params::{ParamGroup, ParamStore};
use crate::tape::Var;

#[derive(Clone, Debug)]
pub struct AggregationGate {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Width of the hidden layer for `channels` inputs and reduction `r`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

impl AggregationGate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = hidden_width(channels, reduction);
        AggregationGate {
            channels,
            hidden,
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, ParamGroup::Base, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, ParamGroup::Base, rng),
        }
    }

    pub fn params(&self) -> usize {
        2 * self.channels * self.hidden + self.channels + self.hidden
    }

    /// Gate vector of shape `N, C, 1, 1` with entries in `(0, 1)`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let n = ctx.tape.shape(x)[0];
        let pooled = ctx.tape.global_avg_pool(x)?;
        let flat = ctx.tape.reshape(pooled, &[n, self.channels])?;
        let h = self.fc1.forward(ctx, flat)?;
        let h = ctx.tape.relu(h)?;
        let z = self.fc2.forward(ctx, h)?;
        let g = ctx.tape.sigmoid(z)?;
        ctx.tape.reshape(g, &[n, self.channels, 1, 1])
    }
}
