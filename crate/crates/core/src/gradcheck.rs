//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward computation, so it stays
//! independent of every backward rule it is used to verify. Central
//! differences at `h` and `h/2` are combined by Richardson extrapolation, so
//! curvature enters only at fourth order. A central
//! difference whose stencil crosses a ReLU kink or a max-pool tie measures a
//! mix of two slopes. Such a stencil is retried with a step ten and a hundred
//! times smaller. When only one side crosses, a second-order one-sided
//! stencil on the other side is used instead. An entry whose stencils all
//! cross is skipped.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-4;
/// Steps tried, in order, until a stencil stays on one smooth piece.
const STEPS: [f64; 3] = [FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0];
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Entries compared with a reduced step or a one-sided stencil after the
    /// default one crossed a non-differentiable point.
    pub refined: usize,
    /// Entries whose stencil crossed such a point at every step.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Below tolerance, with at most one entry in ten skipped.
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.skipped * 9 <= self.checked
    }

    fn merge(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(relative_error(analytic, numeric));
    }

    /// `probe(d)` evaluates the loss with the entry shifted by `d`; `base` is
    /// the unshifted evaluation.
    fn central(&mut self, analytic: f64, base: Probe, mut probe: impl FnMut(f64) -> Result<Probe>) -> Result<()> {
        for (attempt, h) in STEPS.into_iter().enumerate() {
            let (plus, minus) = (probe(h)?, probe(-h)?);
            let numeric = if plus.signature == base.signature && minus.signature == base.signature {
                let (half_plus, half_minus) = (probe(h / 2.0)?, probe(-h / 2.0)?);
                let coarse = (plus.loss - minus.loss) / (2.0 * h);
                let fine = (half_plus.loss - half_minus.loss) / h;
                Some((4.0 * fine - coarse) / 3.0)
            } else {
                let side = if plus.signature == base.signature { h } else { -h };
                let (near, far) = (if side > 0.0 { plus } else { minus }, probe(2.0 * side)?);
                (near.signature == base.signature && far.signature == base.signature)
                    .then(|| (4.0 * near.loss - 3.0 * base.loss - far.loss) / (2.0 * side))
            };
            if let Some(numeric) = numeric {
                self.refined += usize::from(attempt > 0 || plus.signature != minus.signature);
                self.merge(analytic, numeric);
                return Ok(());
            }
        }
        self.skipped += 1;
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Probe {
    loss: f64,
    signature: u64,
}

/// Indices of at most `limit` entries spread evenly over `0..len`.
fn probe_indices(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    (0..limit).map(|i| i * len / limit).collect()
}

/// Checks the gradient of a scalar function of free input tensors.
///
/// `f` receives the inputs as tape leaves and must return a scalar loss.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let base = Probe { loss: tape.value(loss).data()[0], signature: tape.branch_signature() };
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<Probe> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(Probe { loss: tape.value(loss).data()[0], signature: tape.branch_signature() })
    };
    let mut report = GradCheckReport { name: name.into(), checked: 0, refined: 0, skipped: 0, max_rel_err: 0.0, tolerance };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            report.central(analytic[ti][j], base, |d| {
                work[ti].data_mut()[j] = orig + d;
                let probe = eval(&work);
                work[ti].data_mut()[j] = orig;
                probe
            })?;
        }
    }
    Ok(report)
}

/// Checks gradients of stored parameters. `f` builds the loss on a fresh tape,
/// binding parameters from the store it is handed. At most `per_tensor`
/// entries of each parameter are perturbed.
pub fn check_params<F>(
    name: &str,
    store: &mut ParamStore,
    ids: &[ParamId],
    per_tensor: usize,
    tolerance: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = Probe { loss: tape.value(loss).data()[0], signature: tape.branch_signature() };
    tape.backward(loss)?;
    tape.accumulate_param_grads(store);
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.get(id).grad.clone()).collect();

    let mut report = GradCheckReport { name: name.into(), checked: 0, refined: 0, skipped: 0, max_rel_err: 0.0, tolerance };
    let mut eval = |store: &mut ParamStore| -> Result<Probe> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(Probe { loss: tape.value(loss).data()[0], signature: tape.branch_signature() })
    };
    for (k, &id) in ids.iter().enumerate() {
        for j in probe_indices(store.get(id).value.len(), per_tensor) {
            let orig = store.get(id).value.data()[j];
            report.central(analytic[k][j], base, |d| {
                store.get_mut(id).value.data_mut()[j] = orig + d;
                let probe = eval(store);
                store.get_mut(id).value.data_mut()[j] = orig;
                probe
            })?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-6).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stencils_avoid_kinks() {
        let near_kink = Tensor::new(&[4], alloc::vec![0.5, 5e-5, 5e-9, -2.0]).unwrap();
        let r = check_inputs("relu", &[near_kink], 1e-4, |t, v| {
            let y = t.relu(v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert_eq!((r.checked, r.refined, r.skipped), (4, 2, 0));
        assert!(r.max_rel_err < 1e-9);

        // |x| at its kink: both sides cross at every step.
        let r = check_inputs("abs", &[Tensor::new(&[1], alloc::vec![0.0]).unwrap()], 1e-4, |t, v| {
            let neg = t.scale(v[0], -1.0)?;
            let (a, b) = (t.relu(v[0])?, t.relu(neg)?);
            let s = t.add(a, b)?;
            t.sum(s)
        })
        .unwrap();
        assert_eq!((r.checked, r.skipped), (0, 1));
        assert!(!r.passed());
    }

    #[test]
    fn probes_are_spread_and_bounded() {
        assert_eq!(probe_indices(3, 10), [0, 1, 2]);
        let p = probe_indices(100, 4);
        assert_eq!(p, [0, 25, 50, 75]);
    }
}
