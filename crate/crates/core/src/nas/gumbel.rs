use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, Result};
use crate::nn::CandidateKind;
use crate::rng::open_unit;
use crate::tape::{softmax_in_place, Tape, Var};

/// Logits `π` of every search block plus the current temperature `λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    pub logits: Vec<[f64; 4]>,
    pub temperature: f64,
}

impl ArchParams {
    pub fn uniform(blocks: usize, temperature: f64) -> Self {
        ArchParams { logits: alloc::vec![[0.0; 4]; blocks], temperature }
    }

    /// `softmax(π)` of every block.
    pub fn probabilities(&self) -> Vec<[f64; 4]> {
        self.logits
            .iter()
            .map(|l| {
                let mut p = *l;
                softmax_in_place(&mut p);
                p
            })
            .collect()
    }
}

/// One relaxed draw for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    /// Relaxed one-hot weights on the simplex.
    pub alpha: [f64; 4],
    /// Gumbel noise `z = −log(−log u)`.
    pub noise: [f64; 4],
    pub uniforms: [f64; 4],
}

/// `−log(−log u)` for `u ∈ (0, 1)`.
pub fn gumbel_noise(u: f64) -> f64 {
    -libm::log(-libm::log(u))
}

/// Draws `α = softmax((π + z) / λ)` with fresh Gumbel noise. Uniform draws
/// of exactly 0 are rejected and redrawn.
pub fn sample_gumbel_softmax<R: Rng + ?Sized>(logits: &[f64; 4], temperature: f64, rng: &mut R) -> Result<GumbelSample> {
    if !(temperature > 0.0) {
        return Err(config_err!("temperature must be positive, got {temperature}"));
    }
    let mut uniforms = [0.0; 4];
    let mut noise = [0.0; 4];
    let mut alpha = [0.0; 4];
    for k in 0..4 {
        uniforms[k] = open_unit(rng);
        noise[k] = gumbel_noise(uniforms[k]);
        alpha[k] = (logits[k] + noise[k]) / temperature;
    }
    softmax_in_place(&mut alpha);
    Ok(GumbelSample { alpha, noise, uniforms })
}

/// The same relaxation recorded on a tape so gradients reach `π`.
pub fn relaxed_selection(tape: &mut Tape, logits: Var, noise: &[f64; 4], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(config_err!("temperature must be positive, got {temperature}"));
    }
    let shifted = tape.shift(logits, noise)?;
    let scaled = tape.scale(shifted, 1.0 / temperature)?;
    tape.softmax(scaled)
}

/// Step-wise annealing of the softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TemperatureSchedule {
    pub start: f64,
    pub decrement: f64,
    pub every_epochs: usize,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { start: 10.0, decrement: 0.5, every_epochs: 20, floor: 1.0 }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.every_epochs.max(1)) as f64;
        (self.start - self.decrement * steps).max(self.floor)
    }
}

/// `λ(e) = max(1, 10 − 0.5·⌊e / 20⌋)`.
pub fn temperature_schedule(epoch: usize) -> f64 {
    TemperatureSchedule::default().at(epoch)
}

/// Index of the largest entry; ties go to the earliest candidate.
pub(crate) fn argmax(v: &[f64; 4]) -> CandidateKind {
    let mut best = 0;
    for k in 1..4 {
        if v[k] > v[best] {
            best = k;
        }
    }
    CandidateKind::ALL[best]
}
