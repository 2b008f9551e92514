//! Gumbel-Softmax relaxation of per-unit dilation choice, annealing, decoding
//! and the joint search loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{validate_candidates, NetworkSpec, UnitKind};
use crate::ops;
use crate::params::{branch_prefix, unit_prefix, ParamStore};
use crate::train::{self, TrainConfig, TrainLog};

pub const DEFAULT_CANDIDATES: [usize; 5] = [1, 2, 4, 8, 16];
pub const GATED_UNITS: usize = 4;

const U_MIN: f64 = 1e-12;

/// `−ln(−ln u)` with `u` clamped to `[1e-12, 1 − 1e-12]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(U_MIN, 1.0 - U_MIN);
    -(-u.ln()).ln()
}

/// `n` independent standard Gumbel draws.
pub fn gumbel_sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect()
}

/// Selection state of one gated unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub log_alpha: Vec<f64>,
    pub tau: f64,
    pub candidates: Vec<usize>,
    pub rng_seed: u64,
}

impl GateState {
    pub fn new(candidates: Vec<usize>, tau: f64, rng_seed: u64) -> Result<Self> {
        let s = GateState {
            log_alpha: vec![0.0; candidates.len()],
            tau,
            candidates,
            rng_seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        validate_candidates(&self.candidates)?;
        if self.log_alpha.len() != self.candidates.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gate logits for {} candidates",
                self.log_alpha.len(),
                self.candidates.len()
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// `softmax(log_alpha)`: the probability of each candidate under Gumbel-max sampling.
    pub fn probabilities(&self) -> Vec<f64> {
        ops::softmax(&self.log_alpha)
    }
}

/// `softmax((log_alpha + g) / tau)` with fresh Gumbel noise `g`.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(state: &GateState, rng: &mut R) -> Result<Vec<f64>> {
    state.validate()?;
    let g = gumbel_sample(state.log_alpha.len(), rng);
    ops::gumbel_softmax(&state.log_alpha, &g, state.tau)
}

/// Exponential temperature decay with a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub rate: f64,
}

impl AnnealSchedule {
    /// Rate chosen so the temperature reaches `tau_min` exactly at `total_steps`.
    pub fn over(tau0: f64, tau_min: f64, total_steps: usize) -> Result<Self> {
        if !(tau0 > 0.0) || !(tau_min > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperatures must be > 0, got tau0={tau0}, tau_min={tau_min}"
            )));
        }
        let rate = if total_steps == 0 || tau0 <= tau_min {
            0.0
        } else {
            (tau0 / tau_min).ln() / total_steps as f64
        };
        Ok(AnnealSchedule { tau0, tau_min, rate })
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            tau0: 5.0,
            tau_min: 0.1,
            rate: 1e-3,
        }
    }
}

/// `max(tau_min, tau0 · exp(−rate · step))`.
pub fn anneal_temperature(step: usize, s: &AnnealSchedule) -> Result<f64> {
    if !(s.tau0 > 0.0) || !(s.tau_min > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperatures must be > 0, got tau0={}, tau_min={}",
            s.tau0, s.tau_min
        )));
    }
    if !(s.rate >= 0.0) {
        return Err(Error::InvalidArgument(format!("anneal rate must be >= 0, got {}", s.rate)));
    }
    Ok((s.tau0 * (-s.rate * step as f64).exp()).max(s.tau_min))
}

/// Chosen dilation for each gated unit, in network order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilationAssignment(pub Vec<usize>);

/// `candidates[argmax(log_alpha)]` per unit; ties go to the smallest dilation.
pub fn decode_gates(states: &[GateState]) -> DilationAssignment {
    DilationAssignment(
        states
            .iter()
            .map(|s| {
                let mut best = 0;
                for (i, &v) in s.log_alpha.iter().enumerate() {
                    if v > s.log_alpha[best] {
                        best = i;
                    }
                }
                s.candidates[best]
            })
            .collect(),
    )
}

/// Gate states of a gated spec, read from its parameters.
pub fn gate_states(spec: &NetworkSpec, params: &ParamStore<f32>, tau: f64, seed: u64) -> Result<Vec<GateState>> {
    let mut out = Vec::new();
    for (s, u) in spec.gated_units() {
        let UnitKind::Gated { candidates } = &spec.stages[s][u].kind else {
            unreachable!("gated_units returns gated units")
        };
        let la = params.get(&format!("{}.gate.log_alpha", unit_prefix(s, u)))?;
        out.push(GateState {
            log_alpha: la.data().iter().map(|&v| f64::from(v)).collect(),
            tau,
            candidates: candidates.clone(),
            rng_seed: seed,
        });
    }
    Ok(out)
}

/// Plain network with the gated units replaced by units of the chosen dilation.
pub fn apply_assignment(gated: &NetworkSpec, assignment: &DilationAssignment) -> Result<NetworkSpec> {
    let positions = gated.gated_units();
    if positions.len() != assignment.0.len() {
        return Err(Error::InvalidArgument(format!(
            "{} dilations for {} gated units",
            assignment.0.len(),
            positions.len()
        )));
    }
    let mut spec = gated.clone();
    for (&(s, u), &d) in positions.iter().zip(&assignment.0) {
        let unit = &mut spec.stages[s][u];
        unit.kind = UnitKind::Plain;
        unit.dilation = d;
        unit.entry_dilation = d;
    }
    spec.searched_dilations = Some(assignment.0.clone());
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub train: TrainConfig,
    pub candidates: Vec<usize>,
    pub gated_units: usize,
    pub tau0: f64,
    pub tau_min: f64,
    /// Start every branch's last BN scale at zero so each gated unit begins as
    /// its skip path and the gate logits are not pushed around by random
    /// branch outputs early on.
    pub zero_init_branches: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            train: TrainConfig::default(),
            candidates: DEFAULT_CANDIDATES.to_vec(),
            gated_units: GATED_UNITS,
            tau0: 5.0,
            tau_min: 0.1,
            zero_init_branches: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub assignment: DilationAssignment,
    /// Plain network using the decoded dilations.
    pub decoded: NetworkSpec,
    /// The gated network that was optimized.
    pub gated: NetworkSpec,
    pub params: ParamStore<f32>,
    pub states: Vec<GateState>,
    pub log: TrainLog,
}

/// Flags the last units of a converted `base` as gated, then jointly trains
/// branch weights and gate logits through Gumbel-Softmax samples while the
/// temperature anneals.
pub fn run_search(base: &NetworkSpec, data: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome> {
    if !base.converted {
        return Err(Error::InvalidArgument("search expects a converted (output stride 8) network".into()));
    }
    let gated = base.with_gated_tail(&cfg.candidates, cfg.gated_units)?;
    let mut params = ParamStore::init(&gated, cfg.train.seed);
    if cfg.zero_init_branches {
        zero_branch_residuals(&gated, &mut params)?;
    }
    search_from(&gated, params, data, cfg)
}

/// Zeroes `bn2.gamma` of every branch of every gated unit.
pub fn zero_branch_residuals(gated: &NetworkSpec, params: &mut ParamStore<f32>) -> Result<()> {
    for (s, u) in gated.gated_units() {
        let prefix = unit_prefix(s, u);
        let UnitKind::Gated { candidates } = &gated.stages[s][u].kind else { continue };
        for k in 0..candidates.len() {
            let name = format!("{}.bn2.gamma", branch_prefix(&prefix, Some(k)));
            params.get_mut(&name)?.data_mut().fill(0.0);
        }
    }
    Ok(())
}

/// Search from given initial parameters of an already-gated spec.
pub fn search_from(
    gated: &NetworkSpec,
    params: ParamStore<f32>,
    data: &Dataset,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    let schedule = AnnealSchedule::over(cfg.tau0, cfg.tau_min, cfg.train.total_steps)?;
    let out = train::train_from(gated, params, data, &cfg.train, Some(&schedule))?;
    let tau = anneal_temperature(cfg.train.total_steps, &schedule)?;
    let states = gate_states(gated, &out.params, tau, cfg.train.seed)?;
    let assignment = decode_gates(&states);
    let decoded = apply_assignment(gated, &assignment)?;
    Ok(SearchOutcome {
        assignment,
        decoded,
        gated: gated.clone(),
        params: out.params,
        states,
        log: out.log,
    })
}
