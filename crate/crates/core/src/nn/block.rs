//! The omni-scale residual block and its instance-normalisation variants.
//!
//! Stream `t` (1-based) stacks `t` Lite 3x3 layers, giving a receptive field
//! of `(2t + 1) × (2t + 1)`. The stream outputs `x^t` are fused as
//! `x̃ = Σ_t G(x^t) ⊙ x^t` with one gate `G` shared by all streams, restored to
//! the output width and added to the (possibly projected) input.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::gate::{hidden_width, AggregationGate};
use super::layers::{ConvBn, InstanceNorm};
use super::lite::{Lite3x3, Lite3x3Spec};
use super::Ctx;
use crate::error::{config_err, shape_err, Error, Result};
use crate::gradcheck::{check_params, relative_error, GradCheckReport};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Placement of instance normalisation in an omni-scale block.
///
/// The ordering of the variants is the tie-break order used when deriving an
/// architecture from search logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum CandidateKind {
    /// Plain block, no instance normalisation.
    #[cfg_attr(feature = "serde", serde(rename = "OS"))]
    Os,
    /// IN on the residual branch output, before the skip addition.
    #[cfg_attr(feature = "serde", serde(rename = "OS_IN_in"))]
    OsInIn,
    /// IN on the block output, after the skip addition.
    #[cfg_attr(feature = "serde", serde(rename = "OS_IN_out"))]
    OsInOut,
    /// Both of the above.
    #[cfg_attr(feature = "serde", serde(rename = "OS_IN_in_out"))]
    OsInInOut,
}

impl CandidateKind {
    pub const ALL: [CandidateKind; 4] =
        [CandidateKind::Os, CandidateKind::OsInIn, CandidateKind::OsInOut, CandidateKind::OsInInOut];

    pub fn name(self) -> &'static str {
        match self {
            CandidateKind::Os => "OS",
            CandidateKind::OsInIn => "OS_IN_in",
            CandidateKind::OsInOut => "OS_IN_out",
            CandidateKind::OsInInOut => "OS_IN_in_out",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn inner_in(self) -> bool {
        matches!(self, CandidateKind::OsInIn | CandidateKind::OsInInOut)
    }

    pub fn outer_in(self) -> bool {
        matches!(self, CandidateKind::OsInOut | CandidateKind::OsInInOut)
    }

    /// Instance-norm affine parameters the variant adds to a block of
    /// `out_channels` width.
    pub fn extra_params(self, out_channels: usize) -> usize {
        2 * out_channels * (self.inner_in() as usize + self.outer_in() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OsBlockSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    /// Stream cardinality `T`.
    pub streams: usize,
    pub gate_reduction: usize,
    pub variant: CandidateKind,
    /// One gate for all streams; `false` gives each stream its own gate.
    pub unified_gate: bool,
    /// Use a 1x1 conv + BN on the skip path instead of the identity.
    pub projection: bool,
}

/// Bottleneck ratio between block output and stream width.
pub const BOTTLENECK_REDUCTION: usize = 4;

impl OsBlockSpec {
    /// Defaults: `T = 4`, gate reduction 16, a 4x bottleneck and a projection
    /// skip whenever the widths differ.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        OsBlockSpec {
            in_channels,
            mid_channels: (out_channels / BOTTLENECK_REDUCTION).max(1),
            out_channels,
            streams: 4,
            gate_reduction: 16,
            variant: CandidateKind::Os,
            unified_gate: true,
            projection: in_channels != out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams == 0 {
            return Err(config_err!("stream count must be at least 1"));
        }
        if self.in_channels == 0 || self.mid_channels == 0 || self.out_channels == 0 {
            return Err(config_err!("block widths must be positive: {self:?}"));
        }
        if self.in_channels != self.out_channels && !self.projection {
            return Err(config_err!(
                "identity skip cannot map {} to {} channels",
                self.in_channels,
                self.out_channels
            ));
        }
        Ok(())
    }

    pub fn lite(&self) -> Lite3x3Spec {
        Lite3x3Spec::new(self.mid_channels, self.mid_channels)
    }

    /// Learnable parameters of the block in its fixed variant.
    pub fn params(&self) -> usize {
        let (ci, m, co) = (self.in_channels, self.mid_channels, self.out_channels);
        let lite_layers = self.streams * (self.streams + 1) / 2;
        let hidden = hidden_width(m, self.gate_reduction);
        let gate = 2 * m * hidden + m + hidden;
        let gates = if self.unified_gate { 1 } else { self.streams };
        let proj = if self.projection { ci * co + 2 * co } else { 0 };
        (ci * m + 2 * m) + lite_layers * self.lite().params() + gates * gate + (m * co + 2 * co) + proj
            + self.variant.extra_params(co)
    }

    /// Multiply-adds on an `h × w` map: convolutions and the gate MLP.
    pub fn mult_adds(&self, h: usize, w: usize) -> usize {
        let (ci, m, co) = (self.in_channels, self.mid_channels, self.out_channels);
        let lite_layers = self.streams * (self.streams + 1) / 2;
        let hidden = hidden_width(m, self.gate_reduction);
        let proj = if self.projection { h * w * ci * co } else { 0 };
        h * w * ci * m + lite_layers * self.lite().mult_adds(h, w) + self.streams * 2 * m * hidden + h * w * m * co + proj
    }
}

#[derive(Clone, Debug)]
struct CandidateNorms {
    kind: CandidateKind,
    inner: Option<InstanceNorm>,
    outer: Option<InstanceNorm>,
}

/// How the gate values are produced in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    Learned,
    /// Every gate entry fixed to the given value.
    Constant(f64),
}

/// Diagnostic hooks for a block forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockProbe {
    pub gate: GateMode,
    /// Replace this stream's output (0-based) with zeros.
    pub zero_stream: Option<usize>,
}

impl Default for BlockProbe {
    fn default() -> Self {
        BlockProbe { gate: GateMode::Learned, zero_stream: None }
    }
}

/// Which candidate output a block returns.
#[derive(Clone, Copy, Debug)]
pub enum Selection {
    /// The block's own variant (the first candidate it holds).
    Fixed,
    /// One specific candidate of a search block.
    Candidate(CandidateKind),
    /// `Σ_ω α_ω ω(x)` over all held candidates, with `α` a rank-1 tape value.
    Mixture(Var),
}

/// Intermediate values of one block forward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub output: Var,
    /// The gated multi-scale residual `x̃` before the restoring 1x1 layer.
    pub residual: Var,
    /// Stream outputs `x^t`.
    pub streams: Vec<Var>,
    /// Gate outputs `G(x^t)`, shape `N, C, 1, 1`.
    pub gates: Vec<Var>,
    /// Outputs of every held candidate, in [`CandidateKind`] order.
    pub candidates: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct OsBlock {
    pub spec: OsBlockSpec,
    pub reduce: ConvBn,
    pub streams: Vec<Vec<Lite3x3>>,
    pub gates: Vec<AggregationGate>,
    pub restore: ConvBn,
    pub projection: Option<ConvBn>,
    candidates: Vec<CandidateNorms>,
}

impl OsBlock {
    /// A fixed block of variant `spec.variant`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: OsBlockSpec, rng: &mut R) -> Result<Self> {
        let variants = [spec.variant];
        Self::with_candidates(store, name, spec, &variants, rng)
    }

    /// A search block holding every candidate variant on shared weights.
    pub fn new_search<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: OsBlockSpec, rng: &mut R) -> Result<Self> {
        Self::with_candidates(store, name, spec, &CandidateKind::ALL, rng)
    }

    fn with_candidates<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: OsBlockSpec,
        kinds: &[CandidateKind],
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (ci, m, co) = (spec.in_channels, spec.mid_channels, spec.out_channels);
        let reduce = ConvBn::new(store, &format!("{name}.reduce"), ci, m, 1, 1, 0, true, rng);
        let streams = (1..=spec.streams)
            .map(|t| {
                (0..t)
                    .map(|l| Lite3x3::new(store, &format!("{name}.stream{t}.lite{l}"), spec.lite(), rng))
                    .collect()
            })
            .collect();
        let n_gates = if spec.unified_gate { 1 } else { spec.streams };
        let gates = (0..n_gates)
            .map(|g| {
                let gname = if spec.unified_gate { format!("{name}.gate") } else { format!("{name}.gate{}", g + 1) };
                AggregationGate::new(store, &gname, m, spec.gate_reduction, rng)
            })
            .collect();
        let restore = ConvBn::new(store, &format!("{name}.restore"), m, co, 1, 1, 0, false, rng);
        let projection = spec
            .projection
            .then(|| ConvBn::new(store, &format!("{name}.projection"), ci, co, 1, 1, 0, false, rng));
        let candidates = kinds
            .iter()
            .map(|&kind| {
                let prefix = if kinds.len() == 1 { String::from(name) } else { format!("{name}.{}", kind.name()) };
                CandidateNorms {
                    kind,
                    inner: kind.inner_in().then(|| InstanceNorm::new(store, &format!("{prefix}.in_inner"), co)),
                    outer: kind.outer_in().then(|| InstanceNorm::new(store, &format!("{prefix}.in_outer"), co)),
                }
            })
            .collect();
        Ok(OsBlock { spec, reduce, streams, gates, restore, projection, candidates })
    }

    pub fn candidate_kinds(&self) -> Vec<CandidateKind> {
        self.candidates.iter().map(|c| c.kind).collect()
    }

    /// Parameters of the shared gate (or of every gate when not unified).
    pub fn gate_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for g in &self.gates {
            ids.push(g.fc1.weight);
            ids.extend(g.fc1.bias);
            ids.push(g.fc2.weight);
            ids.extend(g.fc2.bias);
        }
        ids
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, sel: Selection) -> Result<Var> {
        Ok(self.forward_traced(ctx, x, sel, BlockProbe::default())?.output)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx<'_>, x: Var, sel: Selection, probe: BlockProbe) -> Result<BlockTrace> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(shape_err!("OS block expects {} input channels, got shape {:?}", self.spec.in_channels, shape));
        }
        let x1 = self.reduce.forward(ctx, x)?;
        let mut stream_out = Vec::with_capacity(self.streams.len());
        let mut gate_out = Vec::with_capacity(self.streams.len());
        let mut residual: Option<Var> = None;
        for (t, layers) in self.streams.iter().enumerate() {
            let mut h = x1;
            for layer in layers {
                h = layer.forward(ctx, h)?;
            }
            if probe.zero_stream == Some(t) {
                h = ctx.tape.scale(h, 0.0)?;
            }
            let g = match probe.gate {
                GateMode::Learned => self.gates[if self.spec.unified_gate { 0 } else { t }].forward(ctx, h)?,
                GateMode::Constant(v) => {
                    let s = ctx.tape.shape(h);
                    let dims = [s[0], s[1], 1, 1];
                    ctx.tape.constant(Tensor::full(&dims, v))
                }
            };
            let gated = ctx.tape.mul(h, g)?;
            residual = Some(match residual {
                None => gated,
                Some(acc) => ctx.tape.add(acc, gated)?,
            });
            stream_out.push(h);
            gate_out.push(g);
        }
        let residual = residual.expect("at least one stream");
        let branch = self.restore.forward(ctx, residual)?;
        let skip = match &self.projection {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };

        let wanted: Vec<usize> = match sel {
            Selection::Fixed => vec![0],
            Selection::Candidate(kind) => vec![self
                .candidates
                .iter()
                .position(|c| c.kind == kind)
                .ok_or_else(|| Error::Contract(format!("block holds no {} candidate", kind.name())))?],
            Selection::Mixture(_) => (0..self.candidates.len()).collect(),
        };
        let mut cand_out = Vec::with_capacity(wanted.len());
        for &ci in &wanted {
            let c = &self.candidates[ci];
            let b = match &c.inner {
                Some(inn) => inn.forward(ctx, branch)?,
                None => branch,
            };
            let mut y = ctx.tape.add(b, skip)?;
            if let Some(out) = &c.outer {
                y = out.forward(ctx, y)?;
            }
            cand_out.push(ctx.tape.relu(y)?);
        }
        let output = match sel {
            Selection::Mixture(alpha) => ctx.tape.weighted_sum(&cand_out, alpha)?,
            _ => cand_out[0],
        };
        Ok(BlockTrace { output, residual, streams: stream_out, gates: gate_out, candidates: cand_out })
    }

    /// The single-scale residual bottleneck `y = x + F(x)` on this block's
    /// weights: reduce, the first stream's Lite 3x3 layer, restore, skip add,
    /// ReLU. No gate is involved.
    pub fn baseline_forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let x1 = self.reduce.forward(ctx, x)?;
        let h = self.streams[0][0].forward(ctx, x1)?;
        let branch = self.restore.forward(ctx, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let y = ctx.tape.add(branch, skip)?;
        ctx.tape.relu(y)
    }
}

/// Outcome of [`shared_gate_gradient_check`].
#[derive(Clone, Debug)]
pub struct SharedGateReport {
    /// `‖Σ_hw ∂L/∂x̃ ⊙ x^t‖` for each stream: the signal stream `t` sends
    /// into the gate output.
    pub stream_contributions: Vec<f64>,
    /// Largest relative error between back-propagated gate-parameter
    /// gradients and their re-assembly from per-stream contributions.
    pub assembly_rel_err: f64,
    /// Gate-parameter gradients against central finite differences.
    pub finite_difference: GradCheckReport,
}

impl SharedGateReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.assembly_rel_err < tolerance && self.finite_difference.max_rel_err < tolerance
    }
}

/// Verifies how gate-parameter gradients collect supervision from all
/// streams, for the linear probe loss `L = Σ y ⊙ weights`.
///
/// The gradient reaching the gate output of stream `t` is `∂L/∂x̃ ⊙ x^t`;
/// pushing each through the gate MLP by hand and summing over streams must
/// reproduce the back-propagated gradients of the gate parameters.
pub fn shared_gate_gradient_check(
    block: &OsBlock,
    store: &mut ParamStore,
    x: &Tensor,
    weights: &Tensor,
    probe: BlockProbe,
    tolerance: f64,
) -> Result<SharedGateReport> {
    let loss_of = |tape: &mut Tape, store: &mut ParamStore, keep: bool| -> Result<(Var, BlockTrace)> {
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(tape, store, Mode::Train);
        let trace = block.forward_traced(&mut ctx, xv, Selection::Fixed, probe)?;
        let w = ctx.tape.constant(weights.clone());
        let prod = ctx.tape.mul(trace.output, w)?;
        if keep {
            ctx.tape.retain_grad(trace.residual);
        }
        Ok((ctx.tape.sum(prod)?, trace))
    };

    store.zero_grads();
    let mut tape = Tape::new();
    let (loss, trace) = loss_of(&mut tape, store, true)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(store);
    let d_residual = tape.grad(trace.residual).ok_or_else(|| Error::Contract("residual gradient missing".into()))?;

    let [n, c, h, w] = tape.value(trace.streams[0]).dims4()?;
    let hw = h * w;
    let mut contributions = Vec::with_capacity(trace.streams.len());
    let mut assembled: Vec<Vec<f64>> = block.gate_params().iter().map(|&id| vec![0.0; store.get(id).value.len()]).collect();
    for (t, &sv) in trace.streams.iter().enumerate() {
        let xs = tape.value(sv).data();
        // ∂L/∂G(x^t), one entry per (sample, channel)
        let dgate: Vec<f64> = (0..n * c)
            .map(|p| (0..hw).map(|j| d_residual[p * hw + j] * xs[p * hw + j]).sum())
            .collect();
        contributions.push(libm::sqrt(dgate.iter().map(|v| v * v).sum()));
        let gi = if block.spec.unified_gate { 0 } else { t };
        let gate = &block.gates[gi];
        let pooled: Vec<f64> = xs.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let grads = gate_mlp_backward(gate, store, &pooled, tape.value(trace.gates[t]).data(), &dgate, n)?;
        for (k, g) in grads.into_iter().enumerate() {
            for (a, b) in assembled[gi * 4 + k].iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    let mut assembly_rel_err: f64 = 0.0;
    for (ids, manual) in block.gate_params().iter().zip(&assembled) {
        for (a, b) in store.get(*ids).grad.iter().zip(manual) {
            assembly_rel_err = assembly_rel_err.max(relative_error(*a, *b));
        }
    }

    let ids = block.gate_params();
    let finite_difference = check_params("shared gate", store, &ids, 64, tolerance, |tape, store| {
        loss_of(tape, store, false).map(|(l, _)| l)
    })?;
    Ok(SharedGateReport { stream_contributions: contributions, assembly_rel_err, finite_difference })
}

/// Hand-written gradients of the gate MLP parameters (`fc1.weight`,
/// `fc1.bias`, `fc2.weight`, `fc2.bias`) given the gradient at its output.
fn gate_mlp_backward(
    gate: &AggregationGate,
    store: &ParamStore,
    pooled: &[f64],
    gate_out: &[f64],
    dgate: &[f64],
    n: usize,
) -> Result<[Vec<f64>; 4]> {
    let (c, hd) = (gate.channels, gate.hidden);
    let w1 = store.get(gate.fc1.weight).value.data();
    let b1 = gate.fc1.bias.map(|b| store.get(b).value.data()).ok_or_else(|| shape_err!("gate fc1 has no bias"))?;
    let mut dw1 = vec![0.0; hd * c];
    let mut db1 = vec![0.0; hd];
    let mut dw2 = vec![0.0; c * hd];
    let mut db2 = vec![0.0; c];
    for s in 0..n {
        let p = &pooled[s * c..(s + 1) * c];
        let hidden: Vec<f64> = (0..hd)
            .map(|j| (b1[j] + (0..c).map(|i| w1[j * c + i] * p[i]).sum::<f64>()).max(0.0))
            .collect();
        let dz2: Vec<f64> = (0..c)
            .map(|i| {
                let g = gate_out[s * c + i];
                dgate[s * c + i] * g * (1.0 - g)
            })
            .collect();
        let w2 = store.get(gate.fc2.weight).value.data();
        let mut dh = vec![0.0; hd];
        for i in 0..c {
            db2[i] += dz2[i];
            for j in 0..hd {
                dw2[i * hd + j] += dz2[i] * hidden[j];
                dh[j] += w2[i * hd + j] * dz2[i];
            }
        }
        for j in 0..hd {
            if hidden[j] <= 0.0 {
                continue;
            }
            db1[j] += dh[j];
            for i in 0..c {
                dw1[j * c + i] += dh[j] * p[i];
            }
        }
    }
    Ok([dw1, db1, dw2, db2])
}
