//! Dilated conversion: output stride 32 → 8 with unchanged weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, STAGE_STRIDES};

/// Per-stage stride override and dilation multiplier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionPlan {
    pub target_output_stride: usize,
    /// (stage index, new stride of its first unit, dilation multiplier)
    pub stages: Vec<(usize, usize, usize)>,
}

impl Default for ConversionPlan {
    fn default() -> Self {
        ConversionPlan {
            target_output_stride: 8,
            stages: vec![(2, 1, 2), (3, 1, 4)],
        }
    }
}

/// Removes the stride of stages 3 and 4 and dilates their 3×3 convs by 2 and 4.
///
/// The first conv of each converted stage keeps the dilation the stage input
/// already has (1 for stage 3, 2 for stage 4): it used to carry the stride, so
/// its taps sit at the previous resolution. Every later conv gets the stage
/// rate. With this rule the converted feature maps, sampled every 2 (stage 3)
/// or 4 (stage 4) pixels, reproduce the unconverted ones. Projection convs are
/// 1×1 and stay undilated; they are kept even when the unit is now stride 1.
pub fn convert_to_dilated(spec: &NetworkSpec) -> Result<NetworkSpec> {
    if spec.converted {
        return Err(Error::InvalidArgument("network is already converted".into()));
    }
    let strides: Vec<usize> = spec.stages.iter().map(|s| s[0].stride).collect();
    if strides != STAGE_STRIDES || spec.units().any(|u| u.dilation != 1 || u.entry_dilation != 1) {
        return Err(Error::InvalidArgument(format!(
            "conversion expects default strides {STAGE_STRIDES:?} and dilation 1, got strides {strides:?}"
        )));
    }
    let plan = ConversionPlan::default();
    let mut out = spec.clone();
    let mut prev_rate = 1;
    for &(stage, stride, rate) in &plan.stages {
        for (u, unit) in out.stages[stage].iter_mut().enumerate() {
            if u == 0 {
                unit.stride = stride;
                unit.entry_dilation = prev_rate;
            } else {
                unit.entry_dilation = rate;
            }
            unit.dilation = rate;
        }
        prev_rate = rate;
    }
    out.converted = true;
    out.head.upsample = out.output_stride();
    debug_assert_eq!(out.head.upsample, plan.target_output_stride);
    out.validate()?;
    Ok(out)
}

pub fn output_stride(spec: &NetworkSpec) -> usize {
    spec.output_stride()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, Variant};

    #[test]
    fn stride_32_to_8() {
        for v in Variant::ALL {
            let s = build_network(v, 2).unwrap();
            assert_eq!(output_stride(&s), 32);
            let c = convert_to_dilated(&s).unwrap();
            assert_eq!(output_stride(&c), 8);
            assert_eq!(c.head.upsample, 8);
            assert_eq!(c.parameter_count(), s.parameter_count());
        }
    }

    #[test]
    fn stem_alone_is_stride_4() {
        let s = build_network(Variant::Standard, 2).unwrap();
        assert_eq!(s.stem.stride * s.stem.pool_stride, 4);
    }

    #[test]
    fn dilation_rates() {
        let c = convert_to_dilated(&build_network(Variant::Standard, 2).unwrap()).unwrap();
        let d: Vec<_> = c.units().map(|u| (u.stride, u.entry_dilation, u.dilation)).collect();
        assert_eq!(
            d,
            vec![
                (1, 1, 1),
                (1, 1, 1),
                (2, 1, 1),
                (1, 1, 1),
                (1, 1, 2),
                (1, 2, 2),
                (1, 2, 4),
                (1, 4, 4)
            ]
        );
        assert!(c.stages[2][0].has_projection && c.stages[3][0].has_projection);
    }

    #[test]
    fn refuses_second_conversion() {
        let c = convert_to_dilated(&build_network(Variant::LightV1, 2).unwrap()).unwrap();
        assert!(convert_to_dilated(&c).is_err());
        let mut fake = c.clone();
        fake.converted = false;
        assert!(convert_to_dilated(&fake).is_err());
    }
}
