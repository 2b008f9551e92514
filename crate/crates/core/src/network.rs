//! Declarative ResNet-18 segmentation networks: standard, Light-v1, Light-v2.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    LightV1,
    LightV2,
    /// Non-standard channel plan built with [`NetworkSpec::with_plan`].
    Custom,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Standard, Variant::LightV1, Variant::LightV2];

    pub fn channel_plan(self) -> Option<[usize; 4]> {
        match self {
            Variant::Standard => Some([64, 128, 256, 512]),
            Variant::LightV1 => Some([64, 128, 64, 64]),
            Variant::LightV2 => Some([64, 128, 32, 32]),
            Variant::Custom => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::LightV1 => "light_v1",
            Variant::LightV2 => "light_v2",
            Variant::Custom => "custom",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "standard" | "resnet18" => Ok(Variant::Standard),
            "light_v1" | "v1" => Ok(Variant::LightV1),
            "light_v2" | "v2" => Ok(Variant::LightV2),
            other => Err(Error::InvalidArgument(format!(
                "unknown network variant `{other}` (expected standard, light_v1 or light_v2)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum UnitKind {
    Plain,
    /// One residual branch per candidate dilation, mixed by a relaxed one-hot gate.
    Gated { candidates: Vec<usize> },
}

/// A "basic" residual unit: two 3×3 conv–BN layers plus identity or projected skip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Dilation of the second conv (and of the first, unless `entry_dilation` differs).
    pub dilation: usize,
    /// Dilation of the first conv. Differs from `dilation` only in the first unit
    /// of a stage whose stride was removed by dilated conversion.
    pub entry_dilation: usize,
    pub has_projection: bool,
    pub kind: UnitKind,
}

impl UnitSpec {
    pub fn plain(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        UnitSpec {
            in_channels,
            out_channels,
            stride,
            dilation: 1,
            entry_dilation: 1,
            has_projection: stride != 1 || in_channels != out_channels,
            kind: UnitKind::Plain,
        }
    }

    pub fn is_gated(&self) -> bool {
        matches!(self.kind, UnitKind::Gated { .. })
    }

    fn parameter_count(&self) -> usize {
        let (i, o) = (self.in_channels, self.out_channels);
        let branch = 9 * i * o + 9 * o * o + 4 * o;
        let branches = match &self.kind {
            UnitKind::Plain => 1,
            UnitKind::Gated { candidates } => candidates.len(),
        };
        let gate = match &self.kind {
            UnitKind::Plain => 0,
            UnitKind::Gated { candidates } => candidates.len(),
        };
        let proj = if self.has_projection { i * o + 2 * o } else { 0 };
        branches * branch + proj + gate
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

impl Default for StemSpec {
    fn default() -> Self {
        StemSpec {
            in_channels: 3,
            channels: 64,
            kernel: 7,
            stride: 2,
            pool_kernel: 3,
            pool_stride: 2,
        }
    }
}

/// 1×1 classifier followed by bilinear upsampling back to input resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub upsample: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub num_classes: usize,
    pub channel_plan: [usize; 4],
    pub stem: StemSpec,
    pub stages: Vec<Vec<UnitSpec>>,
    pub head: HeadSpec,
    /// Set by dilated conversion; guards against converting twice.
    #[serde(default)]
    pub converted: bool,
    /// Dilations chosen by a search, when this spec was decoded from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub searched_dilations: Option<Vec<usize>>,
}

pub const UNITS_PER_STAGE: usize = 2;
pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// Builds the unconverted (output stride 32) network for a standard variant.
pub fn build_network(variant: Variant, num_classes: usize) -> Result<NetworkSpec> {
    let plan = variant.channel_plan().ok_or_else(|| {
        Error::InvalidArgument("custom variants are built with NetworkSpec::with_plan".into())
    })?;
    NetworkSpec::build(variant, StemSpec::default(), plan, num_classes)
}

impl NetworkSpec {
    /// ResNet-18 topology with an arbitrary stem width and channel plan, e.g.
    /// a narrow proxy for desk-scale experiments.
    pub fn with_plan(stem_channels: usize, plan: [usize; 4], num_classes: usize) -> Result<Self> {
        let stem = StemSpec {
            channels: stem_channels,
            ..StemSpec::default()
        };
        Self::build(Variant::Custom, stem, plan, num_classes)
    }

    fn build(variant: Variant, stem: StemSpec, plan: [usize; 4], num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if num_classes > 255 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must fit 8-bit label maps (<= 255), got {num_classes}"
            )));
        }
        if stem.channels == 0 || plan.contains(&0) {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = stem.channels;
        for (s, &out_ch) in plan.iter().enumerate() {
            let mut units = Vec::with_capacity(UNITS_PER_STAGE);
            units.push(UnitSpec::plain(in_ch, out_ch, STAGE_STRIDES[s]));
            for _ in 1..UNITS_PER_STAGE {
                units.push(UnitSpec::plain(out_ch, out_ch, 1));
            }
            stages.push(units);
            in_ch = out_ch;
        }
        let spec = NetworkSpec {
            variant,
            num_classes,
            channel_plan: plan,
            head: HeadSpec {
                in_channels: plan[3],
                num_classes,
                upsample: 0,
            },
            stem,
            stages,
            converted: false,
            searched_dilations: None,
        };
        let os = spec.output_stride();
        let spec = NetworkSpec {
            head: HeadSpec {
                upsample: os,
                ..spec.head
            },
            ..spec
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitSpec> {
        self.stages.iter().flatten()
    }

    pub fn units_mut(&mut self) -> impl Iterator<Item = &mut UnitSpec> {
        self.stages.iter_mut().flatten()
    }

    pub fn unit_count(&self) -> usize {
        self.units().count()
    }

    /// (stage, unit) positions of the last `count` residual units.
    pub fn tail_positions(&self, count: usize) -> Vec<(usize, usize)> {
        let all: Vec<_> = self
            .stages
            .iter()
            .enumerate()
            .flat_map(|(s, units)| (0..units.len()).map(move |u| (s, u)))
            .collect();
        all[all.len().saturating_sub(count)..].to_vec()
    }

    /// Product of every stride from input to the final feature map.
    pub fn output_stride(&self) -> usize {
        self.stem.stride * self.stem.pool_stride * self.units().map(|u| u.stride).product::<usize>()
    }

    /// Trainable parameter count (conv weights, BN affine, head bias, gate logits).
    pub fn parameter_count(&self) -> usize {
        let stem = self.stem.in_channels * self.stem.channels * self.stem.kernel * self.stem.kernel
            + 2 * self.stem.channels;
        let units: usize = self.units().map(UnitSpec::parameter_count).sum();
        let head = self.head.in_channels * self.num_classes + self.num_classes;
        stem + units + head
    }

    pub fn gated_units(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (s, units) in self.stages.iter().enumerate() {
            for (u, unit) in units.iter().enumerate() {
                if unit.is_gated() {
                    out.push((s, u));
                }
            }
        }
        out
    }

    /// Replaces the last four units with gated units over `candidates`.
    pub fn with_gated_tail(&self, candidates: &[usize], count: usize) -> Result<NetworkSpec> {
        validate_candidates(candidates)?;
        let mut spec = self.clone();
        for (s, u) in self.tail_positions(count) {
            let unit = &mut spec.stages[s][u];
            if unit.stride != 1 {
                return Err(Error::InvalidArgument(format!(
                    "unit {}.{u} has stride {}; gate only stride-1 units (convert the network first)",
                    s + 1,
                    unit.stride
                )));
            }
            unit.kind = UnitKind::Gated {
                candidates: candidates.to_vec(),
            };
            unit.dilation = 1;
            unit.entry_dilation = 1;
        }
        Ok(spec)
    }

    /// Plain network with the given dilations on the last `dilations.len()` units
    /// (both convs of each unit).
    pub fn with_tail_dilations(&self, dilations: &[usize]) -> Result<NetworkSpec> {
        if dilations.contains(&0) {
            return Err(Error::InvalidArgument("dilation must be >= 1".into()));
        }
        let mut spec = self.clone();
        for ((s, u), &d) in self.tail_positions(dilations.len()).into_iter().zip(dilations) {
            let unit = &mut spec.stages[s][u];
            unit.kind = UnitKind::Plain;
            unit.dilation = d;
            unit.entry_dilation = d;
        }
        Ok(spec)
    }

    /// Identifies stride/dilation geometry; BN running statistics are tied to it.
    pub fn geometry_key(&self) -> String {
        let mut key = format!("s{}", self.output_stride());
        for u in self.units() {
            key.push_str(&format!("-{}:{}:{}", u.stride, u.entry_dilation, u.dilation));
        }
        key
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 || self.stages.iter().any(|s| s.len() != UNITS_PER_STAGE) {
            return Err(Error::InvalidArgument(
                "network must have 4 stages of 2 residual units".into(),
            ));
        }
        let mut in_ch = self.stem.channels;
        for (s, units) in self.stages.iter().enumerate() {
            for (u, unit) in units.iter().enumerate() {
                let at = format!("unit {}.{u}", s + 1);
                if unit.in_channels != in_ch {
                    return Err(Error::InvalidArgument(format!(
                        "{at}: in_channels {} != previous out_channels {in_ch}",
                        unit.in_channels
                    )));
                }
                if unit.dilation == 0 || unit.entry_dilation == 0 || unit.stride == 0 {
                    return Err(Error::InvalidArgument(format!("{at}: stride and dilation must be >= 1")));
                }
                let needs_proj = unit.stride != 1 || unit.in_channels != unit.out_channels;
                // Conversion keeps projections on units that lost their stride.
                if needs_proj && !unit.has_projection || !self.converted && unit.has_projection && !needs_proj {
                    return Err(Error::InvalidArgument(format!(
                        "{at}: has_projection={} inconsistent with stride {} and channels {}->{}",
                        unit.has_projection, unit.stride, unit.in_channels, unit.out_channels
                    )));
                }
                if let UnitKind::Gated { candidates } = &unit.kind {
                    validate_candidates(candidates)?;
                }
                in_ch = unit.out_channels;
            }
        }
        if self.head.in_channels != in_ch || self.head.num_classes != self.num_classes {
            return Err(Error::InvalidArgument("head does not match the last stage".into()));
        }
        if self.head.upsample != self.output_stride() {
            return Err(Error::InvalidArgument(format!(
                "head upsample ×{} does not undo output stride {}",
                self.head.upsample,
                self.output_stride()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Spatial shape of each stage output for an input of `h × w`.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let mut stride = self.stem.stride * self.stem.pool_stride;
        let mut out = Vec::new();
        for (units, &c) in self.stages.iter().zip(&self.channel_plan) {
            for u in units {
                stride *= u.stride;
            }
            out.push((c, h / stride, w / stride));
        }
        out
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let [_, c, h, w] = shape.0;
        if c != self.stem.in_channels {
            return Err(Error::Shape(format!(
                "image has {c} channels, network expects {}",
                self.stem.in_channels
            )));
        }
        let os = self.output_stride();
        if h == 0 || w == 0 || h % os != 0 || w % os != 0 {
            return Err(Error::Shape(format!(
                "image spatial dims {h}x{w} must be positive multiples of {os} (the output stride)"
            )));
        }
        Ok(())
    }
}

pub(crate) fn validate_candidates(candidates: &[usize]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("candidate dilation set is empty".into()));
    }
    if candidates[0] < 1 || candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "candidate dilations must be strictly increasing and >= 1, got {candidates:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_plan_and_stride() {
        let s = build_network(Variant::Standard, 2).unwrap();
        assert_eq!(s.channel_plan, [64, 128, 256, 512]);
        assert_eq!(s.unit_count(), 8);
        assert_eq!(s.output_stride(), 32);
        assert_eq!(s.head.upsample, 32);
        let strides: Vec<_> = s.stages.iter().map(|st| st[0].stride).collect();
        assert_eq!(strides, STAGE_STRIDES);
    }

    #[test]
    fn light_variants_thin_last_stages() {
        let v1 = build_network(Variant::LightV1, 4).unwrap();
        assert_eq!(v1.stages[2][0].out_channels, 64);
        assert_eq!(v1.stages[3][1].out_channels, 64);
        let v2 = build_network(Variant::LightV2, 4).unwrap();
        assert_eq!(&v2.channel_plan[2..], &[32, 32]);
        let std = build_network(Variant::Standard, 4).unwrap();
        assert!(v2.parameter_count() < v1.parameter_count());
        assert!(v1.parameter_count() < std.parameter_count());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_network(Variant::Standard, 1).is_err());
        assert!("resnet50".parse::<Variant>().is_err());
        assert_eq!("light-v2".parse::<Variant>().unwrap(), Variant::LightV2);
        let s = build_network(Variant::LightV1, 2).unwrap();
        assert!(s.check_input(Shape::new(1, 3, 224, 320)).is_ok());
        let err = s.check_input(Shape::new(1, 3, 100, 96)).unwrap_err();
        assert!(err.to_string().contains("multiples of 32"), "{err}");
    }

    #[test]
    fn projection_invariant() {
        let s = build_network(Variant::LightV1, 2).unwrap();
        for u in s.units() {
            assert_eq!(u.has_projection, u.stride != 1 || u.in_channels != u.out_channels);
        }
        assert!(s.stages[3][0].has_projection);
        assert!(!s.stages[3][1].has_projection);
    }

    #[test]
    fn json_round_trip() {
        let s = build_network(Variant::LightV2, 4).unwrap();
        let back = NetworkSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
