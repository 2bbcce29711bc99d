//! Non-negativity by Lagrangian relaxation with a subgradient-style
//! multiplier update and gap-driven step control.

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentMatrix;
use crate::error::{AorError, Result};
use crate::recovery::{
    assemble_system, dot, objective, solve_cg_from, CgOptions, ClampDiagnostics, Hyperparameters, Multipliers,
    Observations, RecoveryResult,
};
use crate::table::{fmt_f64, TableWriter};

/// Sums below this in magnitude make the step zero.
pub const STEP_DENOM_EPS: f64 = 1e-12;
/// Relative gap for early termination.
pub const EARLY_STOP_GAP: f64 = 1e-6;
/// Entries above this count as non-negative for early termination.
pub const EARLY_STOP_NEG: f64 = -1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub mu0: f64,
    pub gap_threshold: f64,
    pub iterations: usize,
    pub stall_window: usize,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            mu0: 1e5,
            gap_threshold: 500.0,
            iterations: 1000,
            stall_window: 1,
        }
    }
}

impl LrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu0 > 0.0 && self.mu0.is_finite()) {
            return Err(AorError::Validation(format!("mu0 must be positive, got {}", self.mu0)));
        }
        if !(self.gap_threshold > 0.0) {
            return Err(AorError::Validation(format!("gap threshold must be positive, got {}", self.gap_threshold)));
        }
        if self.iterations == 0 || self.stall_window == 0 {
            return Err(AorError::Validation("iterations and stall window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Objective minus `λ_xᵀx + λ_qᵀq`.
pub fn relaxed_objective(
    a: &AssignmentMatrix,
    obs: &Observations,
    hyper: &Hyperparameters,
    multipliers: &Multipliers,
    x: &[f64],
    q: &[f64],
) -> Result<f64> {
    let f = objective(a, obs, hyper, x, q)?;
    if multipliers.lambda_x.len() != x.len() || multipliers.lambda_q.len() != q.len() {
        return Err(AorError::Dimension("multiplier lengths do not match (x, q)".into()));
    }
    Ok(f - dot(&multipliers.lambda_x, x) - dot(&multipliers.lambda_q, q))
}

fn clamp0(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&e| if e > 0.0 { e } else { 0.0 }).collect()
}

pub fn feasible_projection(x: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (clamp0(x), clamp0(q))
}

/// Objective at a non-negative point.
pub fn feasible_objective(
    a: &AssignmentMatrix,
    obs: &Observations,
    hyper: &Hyperparameters,
    x_f: &[f64],
    q_f: &[f64],
) -> Result<f64> {
    if let Some(v) = x_f.iter().chain(q_f).find(|v| !(**v >= 0.0)) {
        return Err(AorError::Domain(format!("feasible objective requires non-negative input, found {v}")));
    }
    objective(a, obs, hyper, x_f, q_f)
}

/// `μ (Z_R − Z_F) / (Σx + Σq)²`, or zero when the sum vanishes. The flag
/// reports the degenerate case.
pub fn step_size(mu: f64, z_r: f64, z_f: f64, x: &[f64], q: &[f64]) -> (f64, bool) {
    let total: f64 = x.iter().sum::<f64>() + q.iter().sum::<f64>();
    if total.abs() < STEP_DENOM_EPS {
        return (0.0, true);
    }
    (mu * (z_r - z_f) / (total * total), false)
}

/// `λ ← max(0, λ + s·E)` elementwise.
pub fn update_multipliers(m: &Multipliers, s: f64, x: &[f64], q: &[f64]) -> Multipliers {
    let step = |l: &[f64], v: &[f64]| -> Vec<f64> { l.iter().zip(v).map(|(l, v)| (l + s * v).max(0.0)).collect() };
    Multipliers {
        lambda_x: step(&m.lambda_x, x),
        lambda_q: step(&m.lambda_q, q),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrIterate {
    pub iter: usize,
    pub gap: f64,
    pub step: f64,
    pub mu: f64,
    pub z_r: f64,
    pub z_f: f64,
    /// Best feasible objective up to and including this iteration.
    pub best_z_f: f64,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct LrOutcome {
    /// Best feasible iterate; every entry is ≥ 0.
    pub result: RecoveryResult,
    pub best_objective: f64,
    pub multipliers: Multipliers,
    pub trajectory: Vec<LrIterate>,
    pub stopped_early: bool,
    /// Set when an inner solve failed and the loop ended with partial results.
    pub failure: Option<String>,
    pub degenerate_steps: usize,
    /// Iterations whose gap came out positive beyond round-off.
    pub positive_gaps: usize,
}

impl LrOutcome {
    pub fn trajectory_table(&self) -> String {
        let mut w = TableWriter::new(&["iter", "gap", "step", "mu", "Z_R", "Z_F"]);
        for r in &self.trajectory {
            w.row([
                r.iter.to_string(),
                fmt_f64(r.gap),
                fmt_f64(r.step),
                fmt_f64(r.mu),
                fmt_f64(r.z_r),
                fmt_f64(r.z_f),
            ]);
        }
        w.finish()
    }
}

pub fn lr_solve(
    a: &AssignmentMatrix,
    obs: &Observations,
    hyper: Hyperparameters,
    config: &LrConfig,
    opts: &CgOptions,
) -> Result<LrOutcome> {
    config.validate()?;
    hyper.validate()?;
    let (n_x, n_q) = (a.n_x(), a.n_q());
    let mut multipliers = Multipliers::zeros(n_x, n_q);
    let mut system = assemble_system(a, obs, hyper, None)?;
    let mut mu = config.mu0;
    let mut gaps: Vec<f64> = Vec::new();
    let mut trajectory = Vec::new();
    let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    let mut last: Option<RecoveryResult> = None;
    let mut warm: Option<Vec<f64>> = None;
    let mut failure = None;
    let mut stopped_early = false;
    let mut degenerate_steps = 0;
    let mut positive_gaps = 0;

    for t in 1..=config.iterations {
        system.set_multipliers(&multipliers);
        let res = solve_cg_from(&system, warm.as_deref(), opts)?;
        if !res.converged {
            failure = Some(format!(
                "inner solve did not converge at iteration {t} (residual {:e})",
                res.residual_norm
            ));
            break;
        }
        let z_r = relaxed_objective(a, obs, &hyper, &multipliers, &res.x, &res.q)?;
        let (x_f, q_f) = feasible_projection(&res.x, &res.q);
        let z_f = feasible_objective(a, obs, &hyper, &x_f, &q_f)?;
        let gap = z_r - z_f;
        if !gap.is_finite() {
            failure = Some(format!("iterates diverged at iteration {t}; step scale mu0 is too large for this instance"));
            break;
        }
        if gap > 1e-9 * z_f.abs().max(1.0) {
            positive_gaps += 1;
        }
        if gaps.len() >= config.stall_window {
            let prev = gaps[gaps.len() - config.stall_window];
            if (gap - prev).abs() < config.gap_threshold {
                mu /= 2.0;
            }
        }
        gaps.push(gap);
        let (step, degenerate) = step_size(mu, z_r, z_f, &res.x, &res.q);
        degenerate_steps += degenerate as usize;
        if best.as_ref().is_none_or(|b| z_f < b.2) {
            best = Some((x_f, q_f, z_f));
        }
        let best_z_f = best.as_ref().map(|b| b.2).unwrap();
        trajectory.push(LrIterate {
            iter: t,
            gap,
            step,
            mu,
            z_r,
            z_f,
            best_z_f,
            cg_iterations: res.cg_iterations,
        });
        let min_entry = res.x.iter().chain(&res.q).copied().fold(f64::INFINITY, f64::min);
        if gap.abs() / z_f.abs().max(1.0) < EARLY_STOP_GAP && min_entry >= EARLY_STOP_NEG {
            stopped_early = true;
            last = Some(res);
            break;
        }
        multipliers = update_multipliers(&multipliers, step, &res.x, &res.q);
        warm = Some(res.stacked());
        last = Some(res);
    }

    let Some((x, q, best_objective)) = best else {
        return Err(AorError::NonConvergence(failure.unwrap_or_else(|| "no iterate produced".into())));
    };
    let last = last.expect("a recorded iterate implies a solve");
    Ok(LrOutcome {
        result: RecoveryResult {
            x,
            q,
            cg_iterations: trajectory.iter().map(|r| r.cg_iterations).sum(),
            residual_norm: last.residual_norm,
            converged: failure.is_none(),
            clamp_diagnostics: ClampDiagnostics {
                negative_x: last.clamp_diagnostics.negative_x,
                negative_q: last.clamp_diagnostics.negative_q,
            },
        },
        best_objective,
        multipliers,
        trajectory,
        stopped_early,
        failure,
        degenerate_steps,
        positive_gaps,
    })
}
