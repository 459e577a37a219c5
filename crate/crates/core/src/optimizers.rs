//! Adam baseline and the feedback-linearization family: FL, FL with
//! momentum, AdamFLIP and its AMSGrad-metric variant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerId {
    Adam,
    Fl,
    FlMomentum,
    Adamflip,
    AdamflipV2,
}

impl OptimizerId {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerId::Adam => "adam",
            OptimizerId::Fl => "fl",
            OptimizerId::FlMomentum => "fl_momentum",
            OptimizerId::Adamflip => "adamflip",
            OptimizerId::AdamflipV2 => "adamflip_v2",
        }
    }

    /// Whether the method uses the constrained formulation.
    pub fn is_constrained(&self) -> bool {
        *self != OptimizerId::Adam
    }
}

/// Step-size schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// `η / (√t · ln(t + 1))`
    InvSqrtLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainConfig {
    pub kappa: f64,
    /// Per-constraint gains; overrides `kappa` when set.
    pub kappa_diag: Option<Vec<f64>>,
    pub eps_damp: f64,
    pub delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eta: f64,
    pub schedule: Schedule,
    /// Reserved; any value is rejected.
    pub ki: Option<f64>,
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            kappa: 1000.0,
            kappa_diag: None,
            eps_damp: 1e-8,
            delta: 1e-8,
            beta1: 0.95,
            beta2: 0.999,
            eta: 1e-3,
            schedule: Schedule::Constant,
            ki: None,
        }
    }
}

impl GainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ki.is_some() {
            return Err(Error::Unsupported("integral gain `ki` is not supported".into()));
        }
        let gains_ok = match &self.kappa_diag {
            Some(d) => d.iter().all(|&k| k > 0.0 && k.is_finite()),
            None => self.kappa > 0.0 && self.kappa.is_finite(),
        };
        if !gains_ok {
            return Err(Error::Config("gains must be positive".into()));
        }
        if !(self.eps_damp >= 0.0) || !(self.delta > 0.0) || !(self.eta > 0.0) {
            return Err(Error::Config("eps_damp must be >= 0, delta and eta > 0".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Diagonal of K for `m` constraints.
    pub fn gains(&self, m: usize) -> Result<Vec<f64>> {
        match &self.kappa_diag {
            Some(d) if d.len() != m => Err(Error::Dimension(format!("kappa_diag has {} entries, need {m}", d.len()))),
            Some(d) => Ok(d.clone()),
            None => Ok(vec![self.kappa; m]),
        }
    }

    pub fn max_gain(&self) -> f64 {
        match &self.kappa_diag {
            Some(d) => d.iter().cloned().fold(0.0, f64::max),
            None => self.kappa,
        }
    }

    /// Step size at step `t` (1-based).
    pub fn eta_at(&self, t: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.eta,
            Schedule::InvSqrtLog => {
                let t = t as f64;
                self.eta / (t.sqrt() * (t + 1.0).ln())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub v_bar: Vec<f64>,
    pub t: u64,
    pub last_lambda: Vec<f64>,
    /// Steps whose multiplier solve needed extra damping.
    pub damping_escalations: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            v_bar: vec![0.0; n],
            t: 0,
            last_lambda: vec![],
            damping_escalations: 0,
        }
    }
}

/// Result of a multiplier solve.
#[derive(Clone, Debug, PartialEq)]
pub struct Multiplier {
    pub lambda: Vec<f64>,
    /// Damping actually used.
    pub eps: f64,
    pub escalated: bool,
}

/// `λ = −(J M Jᵀ + εI)⁻¹ (J M ∇f − K h)` with `M` the diagonal metric
/// (identity when `None`).
pub fn solve_multiplier(
    jac_h: &[Vec<f64>],
    grad_f: &[f64],
    h: &[f64],
    k: &[f64],
    eps_damp: f64,
    metric: Option<&[f64]>,
) -> Result<Vec<f64>> {
    solve_multiplier_detailed(jac_h, grad_f, h, k, eps_damp, metric).map(|s| s.lambda)
}

pub fn solve_multiplier_detailed(
    jac_h: &[Vec<f64>],
    grad_f: &[f64],
    h: &[f64],
    k: &[f64],
    eps_damp: f64,
    metric: Option<&[f64]>,
) -> Result<Multiplier> {
    let m = jac_h.len();
    let n = grad_f.len();
    if h.len() != m || k.len() != m || jac_h.iter().any(|r| r.len() != n) || metric.is_some_and(|d| d.len() != n) {
        return Err(Error::Dimension("multiplier solve: inconsistent shapes".into()));
    }
    if !(eps_damp >= 0.0) {
        return Err(Error::Config("eps_damp must be >= 0".into()));
    }
    let w = |j: usize| metric.map_or(1.0, |d| d[j]);
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for a in 0..m {
        for b in a..m {
            let s: f64 = (0..n).map(|j| jac_h[a][j] * w(j) * jac_h[b][j]).sum();
            gram[(a, b)] = s;
            gram[(b, a)] = s;
        }
        let jm_g: f64 = (0..n).map(|j| jac_h[a][j] * w(j) * grad_f[j]).sum();
        rhs[a] = jm_g - k[a] * h[a];
    }
    let mut eps = eps_damp;
    for attempt in 0..=3 {
        let damped = &gram + DMatrix::<f64>::identity(m, m) * eps;
        if let Some(ch) = damped.cholesky() {
            let x = ch.solve(&rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(Multiplier {
                    lambda: x.iter().map(|v| -v).collect(),
                    eps,
                    escalated: attempt > 0,
                });
            }
        }
        eps = (10.0 * eps).max(1e-8);
    }
    Err(Error::SingularConstraint {
        gram: (0..m).map(|a| (0..m).map(|b| gram[(a, b)]).collect()).collect(),
    })
}

/// `∇f + Jᵀλ`
pub fn combined_direction(bundle: &LossBundle, lambda: &[f64]) -> Vec<f64> {
    let mut g = bundle.grad_f.clone();
    for (row, l) in bundle.jac_h.iter().zip(lambda) {
        for (gi, ji) in g.iter_mut().zip(row) {
            *gi += l * ji;
        }
    }
    g
}

/// What a step did, for tracing and probes.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub lambda: Vec<f64>,
    pub eta: f64,
    pub escalated: bool,
    /// Preconditioner `D_t` used by the metric variant.
    pub metric: Option<Vec<f64>>,
}

fn check_bundle(params: &[f64], bundle: &LossBundle) -> Result<()> {
    if bundle.grad_f.len() != params.len() {
        return Err(Error::Dimension(format!(
            "bundle has {} gradient entries for {} parameters",
            bundle.grad_f.len(),
            params.len()
        )));
    }
    Ok(())
}

fn identity_multiplier(bundle: &LossBundle, cfg: &GainConfig) -> Result<Multiplier> {
    let k = cfg.gains(bundle.m())?;
    solve_multiplier_detailed(&bundle.jac_h, &bundle.grad_f, &bundle.h, &k, cfg.eps_damp, None)
}

/// `θ ← θ − η(∇f + Jᵀλ)`
pub fn fl_step(params: &mut [f64], bundle: &LossBundle, cfg: &GainConfig) -> Result<StepInfo> {
    check_bundle(params, bundle)?;
    let mult = identity_multiplier(bundle, cfg)?;
    let g = combined_direction(bundle, &mult.lambda);
    for (p, gi) in params.iter_mut().zip(&g) {
        *p -= cfg.eta * gi;
    }
    Ok(StepInfo {
        lambda: mult.lambda,
        eta: cfg.eta,
        escalated: mult.escalated,
        metric: None,
    })
}

/// Un-normalized heavy-ball accumulation `m ← β₁m + g`, `θ ← θ − ηm`.
pub fn fl_momentum_step(params: &mut [f64], bundle: &LossBundle, state: &mut OptimizerState, cfg: &GainConfig) -> Result<StepInfo> {
    check_bundle(params, bundle)?;
    let mult = identity_multiplier(bundle, cfg)?;
    let g = combined_direction(bundle, &mult.lambda);
    for ((p, m), gi) in params.iter_mut().zip(state.m.iter_mut()).zip(&g) {
        *m = cfg.beta1 * *m + gi;
        *p -= cfg.eta * *m;
    }
    finish(state, &mult);
    Ok(StepInfo {
        lambda: mult.lambda,
        eta: cfg.eta,
        escalated: mult.escalated,
        metric: None,
    })
}

fn finish(state: &mut OptimizerState, mult: &Multiplier) {
    state.t += 1;
    state.last_lambda = mult.lambda.clone();
    if mult.escalated {
        state.damping_escalations += 1;
    }
}

fn adam_update(params: &mut [f64], g: &[f64], state: &mut OptimizerState, cfg: &GainConfig, t: u64) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for j in 0..params.len() {
        state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g[j];
        state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        let mh = state.m[j] / c1;
        let vh = state.v[j] / c2;
        params[j] -= cfg.eta * mh / (vh.sqrt() + cfg.delta);
    }
}

/// AdamFLIP: damped identity-metric multiplier, then an Adam update along
/// `∇f + Jᵀλ`.
pub fn adamflip_step(params: &mut [f64], bundle: &LossBundle, state: &mut OptimizerState, cfg: &GainConfig) -> Result<StepInfo> {
    check_bundle(params, bundle)?;
    let mult = identity_multiplier(bundle, cfg)?;
    let g = combined_direction(bundle, &mult.lambda);
    adam_update(params, &g, state, cfg, state.t + 1);
    finish(state, &mult);
    Ok(StepInfo {
        lambda: mult.lambda,
        eta: cfg.eta,
        escalated: mult.escalated,
        metric: None,
    })
}

/// Metric-consistent variant: `D_t = 1/(√v̄_{t−1} + δ)` enters both the
/// multiplier solve and the update; `v̄` is the running elementwise max of
/// the bias-corrected second moment.
pub fn adamflip_v2_step(params: &mut [f64], bundle: &LossBundle, state: &mut OptimizerState, cfg: &GainConfig) -> Result<StepInfo> {
    check_bundle(params, bundle)?;
    let t = state.t + 1;
    let d: Vec<f64> = state.v_bar.iter().map(|v| 1.0 / (v.sqrt() + cfg.delta)).collect();
    let k = cfg.gains(bundle.m())?;
    let mult = solve_multiplier_detailed(&bundle.jac_h, &bundle.grad_f, &bundle.h, &k, 0.0, Some(&d))?;
    let g = combined_direction(bundle, &mult.lambda);
    let eta = cfg.eta_at(t);
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for j in 0..params.len() {
        state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g[j];
        state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        let vt = state.v[j] / c2;
        state.v_bar[j] = state.v_bar[j].max(vt);
        params[j] -= eta * d[j] * state.m[j] / c1;
    }
    finish(state, &mult);
    Ok(StepInfo {
        lambda: mult.lambda,
        eta,
        escalated: mult.escalated,
        metric: Some(d),
    })
}

/// Plain Adam on a given gradient.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, cfg: &GainConfig) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::Dimension("gradient length differs from parameter count".into()));
    }
    let t = state.t + 1;
    adam_update(params, grad, state, cfg, t);
    state.t = t;
    Ok(())
}

/// `‖r‖² + ‖h‖₁` with `r = ∇f + Jᵀλ†`, `λ† = −(J D Jᵀ)⁻¹ J D ∇f`.
/// Returns the value and `r`.
pub fn kkt_residual(bundle: &LossBundle, metric: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    let zeros = vec![0.0; bundle.m()];
    let lambda = solve_multiplier(&bundle.jac_h, &bundle.grad_f, &bundle.h, &zeros, 0.0, metric)?;
    let r = combined_direction(bundle, &lambda);
    let rr: f64 = r.iter().map(|x| x * x).sum();
    let h1: f64 = bundle.h.iter().map(|x| x.abs()).sum();
    Ok((rr + h1, r))
}
