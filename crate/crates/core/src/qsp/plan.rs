use crate::error::{Error, Result};
use crate::kv::{KvDoc, KvWriter};
use crate::qpca::step_count;

use super::angles::{poly_to_angles, QspAngles};
use super::poly::{build_step_poly, StepSpec};

/// Default rotation scale. Any `x` below `2` keeps every eigenphase inside
/// one period; total photon cost does not depend on it.
pub const DEFAULT_X: f64 = 1.0;
/// Distance from `1/2` below which the top eigenvalue counts as degenerate.
pub const HALF_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlanMode {
    Noiseless,
    /// First stage over a noisy state: split the top eigenvector from the rest.
    NoisyFirst { gamma: f64, dim: usize },
    /// Second stage: split the second eigenvector from the noise floor.
    NoisySecond { gamma: f64, dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QspPlan {
    pub r_prior: f64,
    pub eps: f64,
    pub eps_gate: f64,
    pub delta: f64,
    pub x: f64,
    pub k: f64,
    pub gate_count: usize,
    pub anti_count: usize,
    pub degree: usize,
    pub step: StepSpec,
    pub angles: QspAngles,
    pub steps_per_gate: u64,
    pub predicted_photons: u64,
}

/// Spectrum of the noisy state implied by a prior: top, second, floor.
pub fn noisy_levels(r: f64, gamma: f64, dim: usize) -> (f64, f64, f64) {
    let floor = gamma / dim as f64;
    ((1.0 - gamma) * r + floor, (1.0 - gamma) * (1.0 - r) + floor, floor)
}

fn check_inputs(r_prior: f64, eps: f64, delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r_prior) {
        return Err(Error::InvalidParameter(format!("r_prior = {r_prior} outside [0, 1]")));
    }
    if (r_prior - 0.5).abs() <= HALF_TOLERANCE {
        return Err(Error::InvalidParameter("r = 1/2 is unsupported".into()));
    }
    if r_prior < 0.5 {
        return Err(Error::InvalidParameter(format!("r_prior = {r_prior} must be the top eigenvalue")));
    }
    if !(eps > 0.0 && eps < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("eps = {eps}, delta = {delta} must lie in (0, 1)")));
    }
    Ok(())
}

pub fn plan(r_prior: f64, eps: f64, delta: f64, mode: PlanMode) -> Result<QspPlan> {
    plan_with_x(r_prior, eps, delta, mode, DEFAULT_X)
}

/// Budget for a rotation scale `x`.
///
/// Noiseless: eigenphases sit at `(1-r) x` and `r x`; the step is centered at
/// `x/2` with half-width `x/4`, shrunk to the gap when `r < 3/4`.
pub fn plan_with_x(r_prior: f64, eps: f64, delta: f64, mode: PlanMode, x: f64) -> Result<QspPlan> {
    check_inputs(r_prior, eps, delta)?;
    let flat = delta / 2.0;
    let (step, x) = match mode {
        PlanMode::Noiseless => {
            if !(x > 0.0 && x < 2.0) {
                return Err(Error::InvalidParameter(format!("x = {x} outside (0, 2)")));
            }
            let half = x * (0.25f64).min(r_prior - 0.5);
            (StepSpec::new(x / 2.0, half, flat).map_err(|e| infeasible(e, r_prior, x))?, x)
        }
        PlanMode::NoisyFirst { gamma, dim } => {
            let (top, second, _) = noisy_levels(r_prior, gamma, dim);
            (StepSpec::between(x * second, x * top, flat).map_err(|e| infeasible(e, r_prior, x))?, x)
        }
        PlanMode::NoisySecond { gamma, dim } => {
            let (top, second, floor) = noisy_levels(r_prior, gamma, dim);
            if second - floor <= 0.0 {
                return Err(Error::Infeasible(format!("no gap between second level {second} and floor {floor}")));
            }
            // top eigenphase lands one half-width inside the far edge of the pass zone
            let x2 = (std::f64::consts::PI / (top - floor)).min(1.99 / (second - floor));
            (StepSpec::between(x2 * floor, x2 * second, flat).map_err(|e| infeasible(e, r_prior, x2))?, x2)
        }
    };
    let poly = build_step_poly(&step)?;
    let angles = poly_to_angles(&poly)?;
    let gate_count = angles.gate_count();
    let eps_gate = if gate_count > 0 { eps / gate_count as f64 } else { eps };
    let steps_per_gate = ((x * x / eps_gate) - 1e-9).ceil().max(1.0) as u64;
    let k = steps_per_gate as f64 / x;
    debug_assert_eq!(step_count(x, k), steps_per_gate);
    Ok(QspPlan {
        r_prior,
        eps,
        eps_gate,
        delta,
        x,
        k,
        gate_count,
        anti_count: angles.anti_count,
        degree: poly.degree(),
        step,
        angles,
        steps_per_gate,
        predicted_photons: 1 + gate_count as u64 * steps_per_gate,
    })
}

fn infeasible(e: Error, r: f64, x: f64) -> Error {
    Error::Infeasible(format!(
        "{e}; largest transition half-width at r = {r}, x = {x} is {:.4}",
        x * (r - 0.5).max(0.0)
    ))
}

/// Both stages of the noisy scheme. The first stage budget is tightened by
/// `(1 - r) / r` so that leakage from the dominant eigenvector stays within
/// `eps` relative to the weak one.
pub fn plan_two_stage(r_prior: f64, eps: f64, delta: f64, gamma: f64, dim: usize) -> Result<(QspPlan, QspPlan)> {
    check_inputs(r_prior, eps, delta)?;
    let eps1 = eps * (1.0 - r_prior) / r_prior;
    let first = plan_with_x(r_prior, eps1, delta, PlanMode::NoisyFirst { gamma, dim }, DEFAULT_X)?;
    let second = plan_with_x(r_prior, eps, delta, PlanMode::NoisySecond { gamma, dim }, DEFAULT_X)?;
    Ok((first, second))
}

impl QspPlan {
    /// Eigenphases of `exp(i x rho)` for a given eigenvalue.
    pub fn phase_of(&self, eigenvalue: f64) -> f64 {
        self.x * eigenvalue
    }

    pub fn dump(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|a| format!("{a:?}")).collect::<Vec<_>>().join(",");
        KvWriter::new()
            .put("r_prior", format!("{:?}", self.r_prior))
            .put("eps", format!("{:?}", self.eps))
            .put("eps_gate", format!("{:?}", self.eps_gate))
            .put("delta", format!("{:?}", self.delta))
            .put("x", format!("{:?}", self.x))
            .put("k", format!("{:?}", self.k))
            .put("gate_count", self.gate_count)
            .put("anti_count", self.anti_count)
            .put("degree", self.degree)
            .put("shift", format!("{:?}", self.step.shift))
            .put("halfwidth", format!("{:?}", self.step.halfwidth))
            .put("flatness", format!("{:?}", self.step.flatness))
            .put("steps_per_gate", self.steps_per_gate)
            .put("predicted_photons", self.predicted_photons)
            .put("lambda", format!("{:?}", self.angles.lambda))
            .put("theta", list(&self.angles.theta))
            .put("phi", list(&self.angles.phi))
            .finish()
    }

    pub fn load(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let parse_list = |s: String| -> Result<Vec<f64>> {
            s.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse { line: 0, msg: e.to_string() }))
                .collect()
        };
        let step = StepSpec::new(doc.require("shift")?, doc.require("halfwidth")?, doc.require("flatness")?)?;
        let anti_count: usize = doc.require("anti_count")?;
        let angles = QspAngles {
            lambda: doc.require("lambda")?,
            theta: parse_list(doc.take_raw("theta").unwrap_or_default())?,
            phi: parse_list(doc.take_raw("phi").unwrap_or_default())?,
            anti_count,
        };
        let plan = QspPlan {
            r_prior: doc.require("r_prior")?,
            eps: doc.require("eps")?,
            eps_gate: doc.require("eps_gate")?,
            delta: doc.require("delta")?,
            x: doc.require("x")?,
            k: doc.require("k")?,
            gate_count: doc.require("gate_count")?,
            anti_count,
            degree: doc.require("degree")?,
            step,
            angles,
            steps_per_gate: doc.require("steps_per_gate")?,
            predicted_photons: doc.require("predicted_photons")?,
        };
        doc.finish()?;
        if plan.angles.theta.len() != plan.gate_count + 1 || plan.angles.phi.len() != plan.gate_count + 1 {
            return Err(Error::Parse { line: 0, msg: "angle lists do not match gate_count".into() });
        }
        Ok(plan)
    }
}
