//! Forward evaluation of a [`NetworkSpec`] on an autodiff tape.

use std::collections::BTreeMap;

use crate::autodiff::{BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, UnitKind, UnitSpec};
use crate::ops::{self, BatchStats, ConvGeom, PoolGeom};
use crate::params::{branch_prefix, unit_prefix, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Source of batch-norm statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, recorded for running-average updates.
    Train,
    /// Running statistics.
    Infer,
    /// Running statistics, while recording the batch statistics each BN layer sees.
    Collect,
}

/// One forward pass: a tape plus the parameter leaves it has pulled in.
pub struct Session<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    vars: BTreeMap<String, Var>,
    trainable: bool,
    pub mode: NormMode,
    eps: T,
    /// Batch statistics per BN layer prefix, in Train and Collect modes.
    pub bn_stats: Vec<(String, BatchStats)>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: NormMode, trainable: bool) -> Self {
        Session {
            tape: Tape::new(),
            params,
            vars: BTreeMap::new(),
            trainable,
            mode,
            eps: T::of(BN_EPS),
            bn_stats: Vec::new(),
        }
    }

    pub fn with_eps(mut self, eps: T) -> Self {
        self.eps = eps;
        self
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Leaf for a named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.tape.leaf(t, self.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves used so far, by name.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn input(&mut self, image: Tensor<T>) -> Var {
        self.tape.constant(image)
    }

    fn conv(&mut self, name: &str, x: Var, geom: ConvGeom, bias: Option<&str>) -> Result<Var> {
        let w = self.param(name)?;
        let b = bias.map(|b| self.param(b)).transpose()?;
        self.tape
            .conv2d(x, w, b, geom)
            .map_err(|e| annotate(e, name))
    }

    fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let (y, stats) = match self.mode {
            NormMode::Train => self.tape.batch_norm(x, gamma, beta, BnMode::Train, self.eps)?,
            NormMode::Infer | NormMode::Collect => {
                if self.mode == NormMode::Collect {
                    let st = ops::batch_stats(self.tape.value(x))?;
                    self.bn_stats.push((prefix.to_string(), st));
                }
                let mean = self.params.get(&format!("{prefix}.running_mean"))?.data();
                let var = self.params.get(&format!("{prefix}.running_var"))?.data();
                self.tape
                    .batch_norm(x, gamma, beta, BnMode::Infer { mean, var }, self.eps)
                    .map_err(|e| annotate(e, prefix))?
            }
        };
        if let Some(st) = stats {
            self.bn_stats.push((prefix.to_string(), st));
        }
        Ok(y)
    }
}

fn annotate(e: Error, at: &str) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("{at}: {m}")),
        other => other,
    }
}

/// conv3×3–BN–ReLU–conv3×3–BN.
fn residual_function<T: Scalar>(
    s: &mut Session<'_, T>,
    prefix: &str,
    unit: &UnitSpec,
    x: Var,
    entry_dilation: usize,
    dilation: usize,
) -> Result<Var> {
    let h = s.conv(
        &format!("{prefix}.conv1.weight"),
        x,
        ConvGeom::same(3, unit.stride, entry_dilation),
        None,
    )?;
    let h = s.bn(&format!("{prefix}.bn1"), h)?;
    let h = s.tape.relu(h);
    let h = s.conv(
        &format!("{prefix}.conv2.weight"),
        h,
        ConvGeom::same(3, 1, dilation),
        None,
    )?;
    s.bn(&format!("{prefix}.bn2"), h)
}

fn skip<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, unit: &UnitSpec, x: Var) -> Result<Var> {
    if !unit.has_projection {
        return Ok(x);
    }
    let p = s.conv(
        &format!("{prefix}.proj.conv.weight"),
        x,
        ConvGeom::new(unit.stride, 1, 0),
        None,
    )?;
    s.bn(&format!("{prefix}.proj.bn"), p)
}

/// `relu(skip(x) + F(x))`, or for a gated unit `relu(skip(x) + Σ_i z_i F_i(x))`
/// with `F_i` dilated by the i-th candidate.
pub fn residual_unit_forward<T: Scalar>(
    s: &mut Session<'_, T>,
    prefix: &str,
    unit: &UnitSpec,
    x: Var,
    gate: Option<Var>,
) -> Result<Var> {
    let c = s.tape.value(x).shape().c();
    if c != unit.in_channels {
        return Err(Error::Shape(format!(
            "{prefix}: input has {c} channels, unit expects in_channels={}",
            unit.in_channels
        )));
    }
    let f = match (&unit.kind, gate) {
        (UnitKind::Plain, None) => {
            residual_function(s, prefix, unit, x, unit.entry_dilation, unit.dilation)?
        }
        (UnitKind::Gated { candidates }, Some(z)) => {
            let n = s.tape.value(z).numel();
            if n != candidates.len() {
                return Err(Error::Shape(format!(
                    "{prefix}: gate has {n} weights for {} candidate dilations",
                    candidates.len()
                )));
            }
            let mut branches = Vec::with_capacity(candidates.len());
            for (i, &d) in candidates.iter().enumerate() {
                let bp = branch_prefix(prefix, Some(i));
                branches.push(residual_function(s, &bp, unit, x, d, d)?);
            }
            s.tape.weighted_sum(&branches, z)?
        }
        (UnitKind::Plain, Some(_)) => {
            return Err(Error::InvalidArgument(format!("{prefix}: gate weights given to a plain unit")))
        }
        (UnitKind::Gated { .. }, None) => {
            return Err(Error::InvalidArgument(format!("{prefix}: gated unit needs gate weights")))
        }
    };
    let sk = skip(s, prefix, unit, x)?;
    let y = s.tape.add(sk, f)?;
    Ok(s.tape.relu(y))
}

/// Handles to the network's intermediate and final outputs.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Stem output followed by the output of each of the 4 stages.
    pub features: Vec<Var>,
}

/// Full segmentation forward. `gates` holds one weight vector per gated unit,
/// in network order.
pub fn forward_segmentation<T: Scalar>(
    spec: &NetworkSpec,
    s: &mut Session<'_, T>,
    image: Var,
    gates: &[Var],
) -> Result<Forward> {
    spec.check_input(s.tape.value(image).shape())?;
    let n_gated = spec.units().filter(|u| u.is_gated()).count();
    if gates.len() != n_gated {
        return Err(Error::InvalidArgument(format!(
            "{} gate vectors for {n_gated} gated units",
            gates.len()
        )));
    }
    let st = &spec.stem;
    let x = s.conv(
        "stem.conv.weight",
        image,
        ConvGeom::same(st.kernel, st.stride, 1),
        None,
    )?;
    let x = s.bn("stem.bn", x)?;
    let x = s.tape.relu(x);
    let mut x = s.tape.max_pool2d(
        x,
        PoolGeom {
            kernel: st.pool_kernel,
            stride: st.pool_stride,
            padding: st.pool_kernel / 2,
        },
    )?;
    let mut features = vec![x];
    let mut gate_iter = gates.iter().copied();
    for (si, units) in spec.stages.iter().enumerate() {
        for (ui, unit) in units.iter().enumerate() {
            let g = if unit.is_gated() { gate_iter.next() } else { None };
            x = residual_unit_forward(s, &unit_prefix(si, ui), unit, x, g)?;
        }
        features.push(x);
    }
    let y = s.conv(
        "head.conv.weight",
        x,
        ConvGeom::new(1, 1, 0),
        Some("head.conv.bias"),
    )?;
    let logits = s.tape.upsample_bilinear(y, spec.head.upsample)?;
    Ok(Forward { logits, features })
}

/// Infer-mode logits for a plain (non-gated) network.
pub fn predict<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = Session::new(params, NormMode::Infer, false);
    let x = s.input(image.clone());
    let out = forward_segmentation(spec, &mut s, x, &[])?;
    Ok(s.tape.value(out.logits).clone())
}

/// Per-pixel argmax over classes; ties go to the lower class id.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let [n, c, h, w] = logits.shape().0;
    let plane = h * w;
    let d = logits.data();
    let mut out = vec![0u8; n * plane];
    for i in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut bv = d[i * c * plane + p];
            for k in 1..c {
                let v = d[(i * c + k) * plane + p];
                if v > bv {
                    bv = v;
                    best = k;
                }
            }
            out[i * plane + p] = best as u8;
        }
    }
    out
}
