use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::gumbel::{argmax, relaxed_selection, sample_gumbel_softmax, GumbelSample};
use super::ArchParams;
use crate::error::{config_err, Error, Result};
use crate::nn::{Ctx, Model, ModelSpec, NetOutput};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Search configuration on top of a network spec.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernetSpec {
    pub model: ModelSpec,
    /// Monte-Carlo samples per gradient estimate.
    pub samples: usize,
}

impl SupernetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(config_err!("Monte-Carlo sample count must be at least 1"));
        }
        self.model.validate()
    }
}

impl Model {
    /// Current logits and the given temperature.
    pub fn arch_params(&self, temperature: f64) -> ArchParams {
        let logits = self
            .net
            .arch_logits
            .iter()
            .map(|&id| {
                let d = self.store.get(id).value.data();
                [d[0], d[1], d[2], d[3]]
            })
            .collect();
        ArchParams { logits, temperature }
    }
}

/// One Gumbel-Softmax draw for every search block.
pub fn sample_all<R: Rng + ?Sized>(arch: &ArchParams, rng: &mut R) -> Result<Vec<GumbelSample>> {
    arch.logits.iter().map(|l| sample_gumbel_softmax(l, arch.temperature, rng)).collect()
}

/// Forward pass where each block outputs `Σ_ω α_ω ω(x)` with `α` rebuilt on
/// the tape from the logits and the fixed noise of `samples`, so gradients
/// flow to both the weights and the logits.
pub fn supernet_forward(
    model: &mut Model,
    tape: &mut Tape,
    images: &Tensor,
    samples: &[GumbelSample],
    temperature: f64,
    mode: Mode,
) -> Result<NetOutput> {
    if !model.net.is_search() {
        return Err(Error::Contract("supernet_forward needs a search network".into()));
    }
    if samples.len() != model.net.arch_logits.len() {
        return Err(Error::Contract(format!(
            "{} Gumbel samples for {} search blocks",
            samples.len(),
            model.net.arch_logits.len()
        )));
    }
    let x = tape.constant(images.clone());
    let mut alphas = Vec::with_capacity(samples.len());
    for (&id, s) in model.net.arch_logits.iter().zip(samples) {
        let pi = tape.param(&model.store, id);
        alphas.push(relaxed_selection(tape, pi, &s.noise, temperature)?);
    }
    let mut ctx = Ctx::new(tape, &mut model.store, mode);
    model.net.forward(&mut ctx, x, Some(&alphas))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    /// Mean loss over the Monte-Carlo samples.
    pub loss: f64,
    pub samples: Vec<Vec<GumbelSample>>,
}

/// Monte-Carlo estimate of the gradients of `E_z[L]` with respect to the
/// weights and the logits: the average over `samples` independent Gumbel
/// draws of single backward passes. Gradients are left in `model.store`
/// (zeroed first).
#[allow(clippy::too_many_arguments)]
pub fn estimate_gradients<R: Rng + ?Sized>(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    smoothing: f64,
    samples: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<GradientEstimate> {
    if samples == 0 {
        return Err(config_err!("Monte-Carlo sample count must be at least 1"));
    }
    model.store.zero_grads();
    let mut loss_sum = 0.0;
    let mut drawn = Vec::with_capacity(samples);
    for _ in 0..samples {
        let arch = model.arch_params(temperature);
        let draw = sample_all(&arch, rng)?;
        let mut tape = Tape::new();
        let out = supernet_forward(model, &mut tape, images, &draw, temperature, Mode::Train)?;
        let logits = out.logits.ok_or_else(|| Error::Contract("search network has no classifier".into()))?;
        let loss = tape.label_smoothed_ce(logits, labels, smoothing)?;
        loss_sum += tape.value(loss).data()[0];
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut model.store);
        drawn.push(draw);
    }
    if samples > 1 {
        let inv = 1.0 / samples as f64;
        for p in model.store.params_mut() {
            p.grad.iter_mut().for_each(|g| *g *= inv);
        }
    }
    Ok(GradientEstimate { loss: loss_sum / samples as f64, samples: drawn })
}

/// Per-block argmax of the logits; ties go to the earliest candidate
/// (`OS < OS_IN_in < OS_IN_out < OS_IN_in_out`).
pub fn derive_variants(arch: &ArchParams) -> Vec<crate::nn::CandidateKind> {
    arch.logits.iter().map(argmax).collect()
}

/// The fixed network spec selected by a finished search.
pub fn derive_architecture(supernet: &Model) -> Result<ModelSpec> {
    if !supernet.net.is_search() {
        return Err(Error::Contract("derive_architecture needs a search network".into()));
    }
    let variants = derive_variants(&supernet.arch_params(1.0));
    Ok(ModelSpec { variants, ..supernet.spec.clone() })
}
