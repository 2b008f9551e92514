//! Named parameter tensors and BN running-statistic buffers.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, UnitKind, UnitSpec};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    HeadWeight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
    GateLogits,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
}

fn conv_entry(out: &mut Vec<ParamEntry>, name: String, cout: usize, cin: usize, k: usize) {
    out.push(ParamEntry {
        name,
        shape: Shape::new(cout, cin, k, k),
        kind: ParamKind::ConvWeight,
    });
}

fn bn_entries(out: &mut Vec<ParamEntry>, prefix: &str, c: usize) {
    for (suffix, kind) in [
        ("gamma", ParamKind::Gamma),
        ("beta", ParamKind::Beta),
        ("running_mean", ParamKind::RunningMean),
        ("running_var", ParamKind::RunningVar),
    ] {
        out.push(ParamEntry {
            name: format!("{prefix}.{suffix}"),
            shape: Shape::new(c, 1, 1, 1),
            kind,
        });
    }
}

pub fn unit_prefix(stage: usize, unit: usize) -> String {
    format!("layer{}.{unit}", stage + 1)
}

/// Prefix of residual-function parameters for `branch` (None for a plain unit).
pub fn branch_prefix(unit_prefix: &str, branch: Option<usize>) -> String {
    match branch {
        None => unit_prefix.to_string(),
        Some(i) => format!("{unit_prefix}.branch{i}"),
    }
}

fn unit_entries(out: &mut Vec<ParamEntry>, prefix: &str, unit: &UnitSpec) {
    let (i, o) = (unit.in_channels, unit.out_channels);
    let branches: Vec<Option<usize>> = match &unit.kind {
        UnitKind::Plain => vec![None],
        UnitKind::Gated { candidates } => (0..candidates.len()).map(Some).collect(),
    };
    for b in branches {
        let p = branch_prefix(prefix, b);
        conv_entry(out, format!("{p}.conv1.weight"), o, i, 3);
        bn_entries(out, &format!("{p}.bn1"), o);
        conv_entry(out, format!("{p}.conv2.weight"), o, o, 3);
        bn_entries(out, &format!("{p}.bn2"), o);
    }
    if unit.has_projection {
        conv_entry(out, format!("{prefix}.proj.conv.weight"), o, i, 1);
        bn_entries(out, &format!("{prefix}.proj.bn"), o);
    }
    if let UnitKind::Gated { candidates } = &unit.kind {
        out.push(ParamEntry {
            name: format!("{prefix}.gate.log_alpha"),
            shape: Shape::new(candidates.len(), 1, 1, 1),
            kind: ParamKind::GateLogits,
        });
    }
}

/// Every tensor a network needs, in a fixed order.
pub fn param_layout(spec: &NetworkSpec) -> Vec<ParamEntry> {
    let mut out = Vec::new();
    let st = &spec.stem;
    conv_entry(&mut out, "stem.conv.weight".into(), st.channels, st.in_channels, st.kernel);
    bn_entries(&mut out, "stem.bn", st.channels);
    for (s, units) in spec.stages.iter().enumerate() {
        for (u, unit) in units.iter().enumerate() {
            unit_entries(&mut out, &unit_prefix(s, u), unit);
        }
    }
    conv_entry(&mut out, "head.conv.weight".into(), spec.num_classes, spec.head.in_channels, 1);
    out.last_mut().expect("head").kind = ParamKind::HeadWeight;
    out.push(ParamEntry {
        name: "head.conv.bias".into(),
        shape: Shape::new(spec.num_classes, 1, 1, 1),
        kind: ParamKind::Bias,
    });
    out
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so each tensor's init is independent of layout order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

const HEAD_INIT_STD: f64 = 0.01;

/// Trainable parameters and BN running statistics of one network, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    kinds: BTreeMap<String, ParamKind>,
    /// Geometry key of the spec the running statistics were last estimated for.
    pub stats_geometry: Option<String>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
            kinds: BTreeMap::new(),
            stats_geometry: None,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// He-normal (fan-out) conv weights, small head weights, BN gamma 1 / beta 0,
    /// running stats (0, 1), uniform gate logits.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut store = ParamStore::default();
        for e in param_layout(spec) {
            let n = e.shape.numel();
            let data: Vec<T> = match e.kind {
                ParamKind::ConvWeight | ParamKind::HeadWeight => {
                    let [cout, _, kh, kw] = e.shape.0;
                    let std = if e.kind == ParamKind::HeadWeight {
                        HEAD_INIT_STD
                    } else {
                        (2.0 / (cout * kh * kw) as f64).sqrt()
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &e.name));
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                }
                ParamKind::Gamma | ParamKind::RunningVar => vec![T::one(); n],
                _ => vec![T::zero(); n],
            };
            store.insert(&e.name, e.kind, Tensor::from_vec(e.shape, data).expect("layout shape"));
        }
        store
    }

    /// All-zero parameters with unit running variance (BN becomes the identity
    /// up to epsilon, every conv outputs zero).
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let mut store = ParamStore::default();
        for e in param_layout(spec) {
            let fill = if e.kind == ParamKind::RunningVar { T::one() } else { T::zero() };
            store.insert(&e.name, e.kind, Tensor::full(e.shape, fill));
        }
        store
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
        self.kinds.insert(name.to_string(), kind);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.kinds.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// (name, kind, tensor) in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.as_str(), self.kinds[k], t))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, k, _)| k.trainable())
            .map(|(n, _, _)| n.to_string())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, k, _)| k.trainable())
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Checks that every tensor `spec` needs is present with the right shape.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        for e in param_layout(spec) {
            let t = self.get(&e.name)?;
            if t.shape() != e.shape {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {}, network expects {}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
        }
        Ok(())
    }

    pub fn stats_fresh(&self, spec: &NetworkSpec) -> bool {
        self.stats_geometry.as_deref() == Some(spec.geometry_key().as_str())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            kinds: self.kinds.clone(),
            stats_geometry: self.stats_geometry.clone(),
        }
    }

    /// Keeps only the tensors `spec` uses, e.g. after decoding a search.
    pub fn retain_for(&mut self, spec: &NetworkSpec) {
        let keep: std::collections::BTreeSet<String> =
            param_layout(spec).into_iter().map(|e| e.name).collect();
        self.tensors.retain(|k, _| keep.contains(k));
        self.kinds.retain(|k, _| keep.contains(k));
    }
}
