//! Activation maps: channel-wise sum of absolute activations, spatially
//! ℓ2-normalised per sample.

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMaps {
    /// `N, 1, H, W`.
    pub maps: Tensor,
    /// Samples whose features were all zero; their maps are left at zero.
    pub degenerate: Vec<usize>,
}

pub fn activation_map(features: &Tensor) -> Result<ActivationMaps> {
    let [n, c, h, w] = features.dims4()?;
    if c == 0 {
        return Err(shape_err!("activation map needs at least one channel"));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    let mut degenerate = Vec::new();
    for (s, sample) in features.data().chunks(c * hw).enumerate() {
        let mut map = alloc::vec![0.0; hw];
        for plane in sample.chunks(hw) {
            for (m, v) in map.iter_mut().zip(plane) {
                *m += v.abs();
            }
        }
        let norm = libm::sqrt(map.iter().map(|v| v * v).sum());
        if norm > 0.0 {
            map.iter_mut().for_each(|v| *v /= norm);
        } else {
            log::warn!("sample {s} has all-zero features; activation map left at zero");
            degenerate.push(s);
        }
        out.extend(map);
    }
    Ok(ActivationMaps { maps: Tensor::new(&[n, 1, h, w], out)?, degenerate })
}
