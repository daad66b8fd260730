//! Differentiable search over per-block instance-normalisation placement.
//!
//! Each search block mixes its four candidates with weights
//! `α = softmax((π + z) / λ)`, where `π` are unconstrained logits and `z`
//! is Gumbel(0, 1) noise, so the argmax of `π + z` follows `softmax(π)`.

mod gumbel;
mod supernet;

pub use gumbel::{
    gumbel_noise, relaxed_selection, sample_gumbel_softmax, temperature_schedule, ArchParams, GumbelSample,
    TemperatureSchedule,
};
pub use supernet::{
    derive_architecture, derive_variants, estimate_gradients, sample_all, supernet_forward, GradientEstimate,
    SupernetSpec,
};
