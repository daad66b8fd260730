//! Full-network assembly.
//!
//! Stage layout for an `H × W` input (widths at `β = 1`):
//!
//! | stage      | layers                                       | width |
//! |------------|----------------------------------------------|-------|
//! | conv1      | 7x7 conv stride 2 + BN + ReLU                | 64    |
//! | pool       | 3x3 max pool stride 2                        | 64    |
//! | conv2      | 2 OS blocks                                  | 256   |
//! | transition | 1x1 conv + BN + ReLU, 2x2 avg pool stride 2  | 256   |
//! | conv3      | 2 OS blocks                                  | 384   |
//! | transition | 1x1 conv + BN + ReLU, 2x2 avg pool stride 2  | 384   |
//! | conv4      | 2 OS blocks                                  | 512   |
//! | conv5      | 1x1 conv + BN + ReLU                         | 512   |
//! | gap, fc    | global average pool, fc + BN + ReLU          | 512   |
//!
//! The width multiplier scales every width except the fc output.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::block::{CandidateKind, OsBlock, OsBlockSpec, Selection};
use super::layers::{BatchNorm, ConvBn, Linear};
use super::Ctx;
use crate::error::{config_err, shape_err, Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::seeded;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Number of omni-scale blocks in the network.
pub const NUM_BLOCKS: usize = 6;
/// Smallest input the stage stack accepts after resolution scaling.
pub const MIN_HEIGHT: usize = 32;
pub const MIN_WIDTH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelSpec {
    /// `β` in `(0, 1]`.
    pub width_multiplier: f64,
    /// `γ` in `(0, 1]`.
    pub resolution_multiplier: f64,
    /// Variant of each of the six OS blocks.
    pub variants: Vec<CandidateKind>,
    /// Identity classes of the classifier head; 0 omits the classifier.
    pub num_classes: usize,
    pub streams: usize,
    pub gate_reduction: usize,
    pub feature_dim: usize,
    pub base_height: usize,
    pub base_width: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            width_multiplier: 1.0,
            resolution_multiplier: 1.0,
            variants: vec![CandidateKind::Os; NUM_BLOCKS],
            num_classes: 0,
            streams: 4,
            gate_reduction: 16,
            feature_dim: 512,
            base_height: 256,
            base_width: 128,
        }
    }
}

/// Channel widths of every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    pub conv1: usize,
    pub stages: [usize; 3],
    pub conv5: usize,
    pub fc: usize,
}

impl ChannelPlan {
    /// `conv1`, the six block outputs, `conv5`.
    pub fn as_list(&self) -> [usize; 8] {
        let [a, b, c] = self.stages;
        [self.conv1, a, a, b, b, c, c, self.conv5]
    }
}

fn round_even(v: f64) -> usize {
    (2.0 * libm::round(v / 2.0)) as usize
}

impl ModelSpec {
    pub fn with_multipliers(width: f64, resolution: f64) -> Self {
        ModelSpec { width_multiplier: width, resolution_multiplier: resolution, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0 && v.is_finite();
        if !in_unit(self.width_multiplier) {
            return Err(config_err!("width multiplier {} outside (0, 1]", self.width_multiplier));
        }
        if !in_unit(self.resolution_multiplier) {
            return Err(config_err!("resolution multiplier {} outside (0, 1]", self.resolution_multiplier));
        }
        if self.variants.len() != NUM_BLOCKS {
            return Err(config_err!("expected {NUM_BLOCKS} block variants, got {}", self.variants.len()));
        }
        if self.streams == 0 || self.gate_reduction == 0 || self.feature_dim == 0 {
            return Err(config_err!("streams, gate_reduction and feature_dim must be positive"));
        }
        if self.num_classes == 1 {
            return Err(config_err!("a classifier needs at least 2 classes"));
        }
        Ok(())
    }

    pub fn scale(&self, width: usize) -> usize {
        (libm::round(width as f64 * self.width_multiplier) as usize).max(1)
    }

    pub fn channels(&self) -> ChannelPlan {
        ChannelPlan {
            conv1: self.scale(64),
            stages: [self.scale(256), self.scale(384), self.scale(512)],
            conv5: self.scale(512),
            fc: self.feature_dim,
        }
    }

    /// Input `(H, W)`: base size times `γ`, rounded to the nearest even
    /// integer and clamped to the smallest workable size.
    pub fn input_size(&self) -> (usize, usize) {
        let h = round_even(self.base_height as f64 * self.resolution_multiplier).max(MIN_HEIGHT);
        let w = round_even(self.base_width as f64 * self.resolution_multiplier).max(MIN_WIDTH);
        (h, w)
    }

    /// Specs of the six blocks in order.
    pub fn block_specs(&self) -> Vec<OsBlockSpec> {
        let plan = self.channels();
        let mut specs = Vec::with_capacity(NUM_BLOCKS);
        let mut c_in = plan.conv1;
        for (i, &variant) in self.variants.iter().enumerate() {
            let c_out = plan.stages[i / 2];
            specs.push(OsBlockSpec {
                streams: self.streams,
                gate_reduction: self.gate_reduction,
                variant,
                ..OsBlockSpec::new(c_in, c_out)
            });
            c_in = c_out;
        }
        specs
    }
}

#[derive(Clone, Debug)]
pub struct Osnet {
    pub conv1: ConvBn,
    pub blocks: Vec<OsBlock>,
    pub transitions: Vec<ConvBn>,
    pub conv5: ConvBn,
    pub fc: Linear,
    pub fc_bn: BatchNorm,
    pub classifier: Option<Linear>,
    /// Architecture logits, one per block, for a search network.
    pub arch_logits: Vec<ParamId>,
}

/// Result of a network forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// Output of `conv5`, before global pooling.
    pub feature_map: Var,
    /// The `N × 512` embedding.
    pub features: Var,
    pub logits: Option<Var>,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub net: Osnet,
}

/// Builds a fixed-architecture network. Initialisation depends only on `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    build(spec, seed, false)
}

/// Builds a search network: every block holds all four candidates on shared
/// residual weights, plus a zero-initialised logit vector.
pub fn build_supernet(spec: &ModelSpec, seed: u64) -> Result<Model> {
    build(spec, seed, true)
}

fn build(spec: &ModelSpec, seed: u64, search: bool) -> Result<Model> {
    spec.validate()?;
    let rng = &mut seeded(seed);
    let mut store = ParamStore::new();
    let plan = spec.channels();
    let conv1 = ConvBn::new(&mut store, "conv1", 3, plan.conv1, 7, 2, 3, true, rng);
    let mut blocks = Vec::with_capacity(NUM_BLOCKS);
    let mut transitions = Vec::new();
    for (i, bs) in spec.block_specs().into_iter().enumerate() {
        let name = format!("blocks.{i}");
        let c_out = bs.out_channels;
        blocks.push(if search {
            OsBlock::new_search(&mut store, &name, bs, rng)?
        } else {
            OsBlock::new(&mut store, &name, bs, rng)?
        });
        if i == 1 || i == 3 {
            let t = transitions.len();
            transitions.push(ConvBn::new(&mut store, &format!("transition{t}"), c_out, c_out, 1, 1, 0, true, rng));
        }
    }
    let conv5 = ConvBn::new(&mut store, "conv5", plan.stages[2], plan.conv5, 1, 1, 0, true, rng);
    let fc = Linear::new(&mut store, "fc", plan.conv5, plan.fc, ParamGroup::Base, rng);
    let fc_bn = BatchNorm::new(&mut store, "fc.bn", plan.fc, ParamGroup::Base);
    let classifier = (spec.num_classes > 0)
        .then(|| Linear::new(&mut store, "classifier", plan.fc, spec.num_classes, ParamGroup::Classifier, rng));
    let arch_logits = if search {
        (0..NUM_BLOCKS)
            .map(|i| store.add(format!("arch.{i}.logits"), Tensor::zeros(&[CandidateKind::ALL.len()]), ParamGroup::Arch))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Model {
        spec: spec.clone(),
        store,
        net: Osnet { conv1, blocks, transitions, conv5, fc, fc_bn, classifier, arch_logits },
    })
}

impl Osnet {
    pub fn is_search(&self) -> bool {
        !self.arch_logits.is_empty()
    }

    /// Runs the network. Search networks need one relaxed selection vector
    /// per block in `mixture`; fixed networks ignore it.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, mixture: Option<&[Var]>) -> Result<NetOutput> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(shape_err!("network expects N,3,H,W input, got {:?}", shape));
        }
        if self.is_search() {
            match mixture {
                Some(m) if m.len() == self.blocks.len() => {}
                Some(m) => {
                    return Err(Error::Contract(format!("{} selection vectors for {} blocks", m.len(), self.blocks.len())))
                }
                None => return Err(Error::Contract("search network forward needs selection samples".into())),
            }
        }
        let mut h = self.conv1.forward(ctx, x)?;
        h = ctx.tape.max_pool(h, 3, 2, 1)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let sel = match mixture {
                Some(m) if self.is_search() => Selection::Mixture(m[i]),
                _ => Selection::Fixed,
            };
            h = block.forward(ctx, h, sel)?;
            if i == 1 || i == 3 {
                h = self.transitions[i / 2].forward(ctx, h)?;
                h = ctx.tape.avg_pool(h, 2, 2)?;
            }
        }
        let feature_map = self.conv5.forward(ctx, h)?;
        let n = ctx.tape.shape(feature_map)[0];
        let pooled = ctx.tape.global_avg_pool(feature_map)?;
        let flat = ctx.tape.reshape(pooled, &[n, self.fc.d_in])?;
        let f = self.fc.forward(ctx, flat)?;
        let f = self.fc_bn.forward_flat(ctx, f)?;
        let features = ctx.tape.relu(f)?;
        let logits = match &self.classifier {
            Some(c) => Some(c.forward(ctx, features)?),
            None => None,
        };
        Ok(NetOutput { feature_map, features, logits })
    }
}

impl Model {
    /// Learnable scalars excluding the classifier and architecture logits.
    pub fn feature_params(&self) -> usize {
        self.store.count_group(ParamGroup::Base)
    }

    /// Forward pass on a fresh tape; the caller keeps the tape for backward.
    pub fn forward(&mut self, tape: &mut Tape, images: &Tensor, mode: Mode, mixture: Option<&[Tensor]>) -> Result<NetOutput> {
        let x = tape.constant(images.clone());
        let mix: Option<Vec<Var>> = mixture.map(|m| m.iter().map(|a| tape.constant(a.clone())).collect());
        let mut ctx = Ctx::new(tape, &mut self.store, mode);
        self.net.forward(&mut ctx, x, mix.as_deref())
    }

    /// Eval-mode embeddings, `N × 512`, computed `batch` images at a time.
    pub fn extract_features(&mut self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let [n, ..] = images.dims4()?;
        let mut rows = Vec::new();
        let mut dim = 0;
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(n);
            let items: Vec<Tensor> = (start..end).map(|i| images.sample(i)).collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = items.iter().collect();
            let chunk = Tensor::stack(&refs)?;
            let mut tape = Tape::new();
            let mix = self.eval_mixture();
            let out = self.forward(&mut tape, &chunk, Mode::Eval, mix.as_deref())?;
            let f = tape.value(out.features);
            dim = f.shape()[1];
            rows.extend_from_slice(f.data());
        }
        Tensor::new(&[n, dim], rows)
    }

    /// For a search network, the noise-free selection `softmax(π)` per
    /// block; `None` for fixed networks.
    pub fn eval_mixture(&self) -> Option<Vec<Tensor>> {
        if !self.net.is_search() {
            return None;
        }
        Some(
            self.net
                .arch_logits
                .iter()
                .map(|&id| {
                    let mut p = self.store.get(id).value.clone();
                    crate::tape::softmax_in_place(p.data_mut());
                    p
                })
                .collect(),
        )
    }
}
