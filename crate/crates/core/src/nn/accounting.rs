//! Analytical parameter and multiply-add counts.
//!
//! Parameters: every learnable tensor of the feature extractor, normalisation
//! affines included, classifier excluded. Multiply-adds: convolutions, the
//! gate MLPs and the fc layer; normalisation, pooling and activations are
//! free.

use super::model::ModelSpec;
use crate::error::Result;

fn conv_bn(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k + 2 * c_out
}

pub fn count_params(spec: &ModelSpec) -> Result<usize> {
    spec.validate()?;
    let plan = spec.channels();
    let mut total = conv_bn(3, plan.conv1, 7);
    for (i, bs) in spec.block_specs().iter().enumerate() {
        total += bs.params();
        if i == 1 || i == 3 {
            total += conv_bn(bs.out_channels, bs.out_channels, 1);
        }
    }
    total += conv_bn(plan.stages[2], plan.conv5, 1);
    total += plan.conv5 * plan.fc + plan.fc + 2 * plan.fc;
    Ok(total)
}

/// Multiply-adds of one forward pass on an `height × width` input.
pub fn count_mult_adds(spec: &ModelSpec, height: usize, width: usize) -> Result<usize> {
    spec.validate()?;
    let plan = spec.channels();
    let (mut h, mut w) = ((height + 6 - 7) / 2 + 1, (width + 6 - 7) / 2 + 1);
    let mut total = h * w * 3 * plan.conv1 * 49;
    h = (h + 2 - 3) / 2 + 1;
    w = (w + 2 - 3) / 2 + 1;
    for (i, bs) in spec.block_specs().iter().enumerate() {
        total += bs.mult_adds(h, w);
        if i == 1 || i == 3 {
            total += h * w * bs.out_channels * bs.out_channels;
            h /= 2;
            w /= 2;
        }
    }
    total += h * w * plan.stages[2] * plan.conv5;
    total += plan.conv5 * plan.fc;
    Ok(total)
}

/// Multiply-adds at the spec's own input resolution.
pub fn count_mult_adds_at_resolution(spec: &ModelSpec) -> Result<usize> {
    let (h, w) = spec.input_size();
    count_mult_adds(spec, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::block::CandidateKind;
    use crate::nn::model::build_model;
    use crate::params::ParamGroup;

    #[test]
    fn matches_allocated_parameters() {
        for beta in [0.25, 0.5] {
            for variants in [[CandidateKind::Os; 6], [CandidateKind::OsInInOut; 6]] {
                let spec = ModelSpec { num_classes: 10, variants: variants.to_vec(), ..ModelSpec::with_multipliers(beta, 0.25) };
                let model = build_model(&spec, 0).unwrap();
                assert_eq!(count_params(&spec).unwrap(), model.store.count_group(ParamGroup::Base));
            }
        }
    }

    #[test]
    fn full_size_reference_counts() {
        let spec = ModelSpec::default();
        assert_eq!(count_params(&spec).unwrap(), 2_169_508);
        assert_eq!(count_mult_adds(&spec, 256, 128).unwrap(), 978_875_392);
    }
}
