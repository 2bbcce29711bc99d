//! Hyperparameter tuning by stochastic gradient descent on the observed-flow
//! fitting loss, with exact derivatives of the recovered solution obtained
//! from one extra linear solve per hyperparameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentMatrix;
use crate::error::{AorError, Result};
use crate::recovery::{
    assemble_system, conjugate_gradient, dot, BlockSystem, CgOptions, Hyperparameters, LinearOperator, Observations,
};
use crate::table::{fmt_f64, TableWriter};

/// Mean squared residual over observed entries.
pub fn loss(x: &[f64], obs: &Observations) -> Result<f64> {
    let n = observed_count(obs)?;
    let r = obs.residual_x(x);
    Ok(dot(&r, &r) / n)
}

fn observed_count(obs: &Observations) -> Result<f64> {
    match obs.num_observed() {
        0 => Err(AorError::Domain("loss is undefined without observed links".into())),
        n => Ok(n as f64),
    }
}

/// `∂L/∂x = (2/n) M_xᵀ (M_x x − x_0)`.
pub fn loss_gradient_x(x: &[f64], obs: &Observations) -> Result<Vec<f64>> {
    let n = observed_count(obs)?;
    let r: Vec<f64> = obs.residual_x(x).into_iter().map(|v| 2.0 * v / n).collect();
    Ok(obs.scatter_x(&r, x.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HyperParam {
    Wx,
    Wq,
    Wsx,
    Wsq,
}

impl HyperParam {
    pub const ALL: [HyperParam; 4] = [HyperParam::Wx, HyperParam::Wq, HyperParam::Wsx, HyperParam::Wsq];

    pub fn get(self, h: &Hyperparameters) -> f64 {
        match self {
            HyperParam::Wx => h.w_x,
            HyperParam::Wq => h.w_q,
            HyperParam::Wsx => h.w_sx,
            HyperParam::Wsq => h.w_sq,
        }
    }

    pub fn set(self, h: &mut Hyperparameters, v: f64) {
        match self {
            HyperParam::Wx => h.w_x = v,
            HyperParam::Wq => h.w_q = v,
            HyperParam::Wsx => h.w_sx = v,
            HyperParam::Wsq => h.w_sq = v,
        }
    }
}

/// `∂V/∂w − (∂M/∂w) E`.
fn sensitivity_rhs(system: &BlockSystem<'_>, e: &[f64], which: HyperParam) -> Vec<f64> {
    let (n_x, n_q) = (system.n_x(), system.n_q());
    let obs = system.observations();
    let mut b = vec![0.0; n_x + n_q];
    match which {
        HyperParam::Wx => (0..n_x).for_each(|i| b[i] = -e[i]),
        HyperParam::Wq => (n_x..n_x + n_q).for_each(|i| b[i] = -e[i]),
        HyperParam::Wsx => {
            for (&r, &v) in obs.link_rows().iter().zip(obs.x0()) {
                b[r] = v - e[r];
            }
        }
        HyperParam::Wsq => {
            for (&c, &v) in obs.od_cols().iter().zip(obs.q0()) {
                b[n_x + c] = v - e[n_x + c];
            }
        }
    }
    b
}

#[derive(Debug, Clone)]
pub struct Sensitivity {
    pub de: Vec<f64>,
    pub converged: bool,
}

/// `∂E/∂w` for the solution `E` of `system`.
pub fn solution_sensitivity(
    system: &BlockSystem<'_>,
    e: &[f64],
    which: HyperParam,
    opts: &CgOptions,
) -> Result<Sensitivity> {
    if e.len() != system.dim() {
        return Err(AorError::Dimension(format!("solution length {} != {}", e.len(), system.dim())));
    }
    let b = sensitivity_rhs(system, e, which);
    let out = conjugate_gradient(system, &b, None, opts)?;
    Ok(Sensitivity {
        de: out.solution,
        converged: out.converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Ordered as w_x, w_q, w_sx, w_sq.
    pub gradient: [f64; 4],
    pub converged: bool,
}

/// Loss and its hyperparameter gradient through the four solution sensitivities.
pub fn loss_gradient(system: &BlockSystem<'_>, e: &[f64], opts: &CgOptions) -> Result<LossReport> {
    let n_x = system.n_x();
    let obs = system.observations();
    let x = &e[..n_x];
    let value = loss(x, obs)?;
    let gx = loss_gradient_x(x, obs)?;
    let sens: Vec<Sensitivity> = HyperParam::ALL
        .par_iter()
        .map(|&w| solution_sensitivity(system, e, w, opts))
        .collect::<Result<_>>()?;
    let mut gradient = [0.0; 4];
    for (g, s) in gradient.iter_mut().zip(&sens) {
        *g = dot(&gx, &s.de[..n_x]);
    }
    Ok(LossReport {
        value,
        gradient,
        converged: sens.iter().all(|s| s.converged),
    })
}

/// Same gradient via a single adjoint solve `M y = [∂L/∂x ; 0]`, then
/// `dL/dw = yᵀ(∂V/∂w − (∂M/∂w)E)` (valid because M is symmetric).
pub fn loss_gradient_adjoint(system: &BlockSystem<'_>, e: &[f64], opts: &CgOptions) -> Result<[f64; 4]> {
    let n_x = system.n_x();
    let mut g = loss_gradient_x(&e[..n_x], system.observations())?;
    g.resize(system.dim(), 0.0);
    let y = conjugate_gradient(system, &g, None, opts)?.solution;
    let mut out = [0.0; 4];
    for (o, w) in out.iter_mut().zip(HyperParam::ALL) {
        *o = dot(&y, &sensitivity_rhs(system, e, w));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub a: AssignmentMatrix,
    pub obs: Observations,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hyper_floor: f64,
    pub cg: CgOptions,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            epochs: 100,
            seed: 0,
            hyper_floor: 1e-8,
            cg: CgOptions::default(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AorError::Validation(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(AorError::Validation("epochs must be at least 1".into()));
        }
        if !(self.hyper_floor > 0.0) {
            return Err(AorError::Validation("hyperparameter floor must be positive".into()));
        }
        Ok(())
    }
}

/// Log-uniform draw of each weight in `[1e-3, 1e1]`.
pub fn random_init(seed: u64) -> Hyperparameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || 10f64.powf(rng.random_range(-3.0..=1.0));
    Hyperparameters {
        w_x: draw(),
        w_q: draw(),
        w_sx: draw(),
        w_sq: draw(),
    }
}

/// One epoch: the loss is evaluated at `hyper`, which is then updated.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub hyper: Hyperparameters,
    pub loss: f64,
    pub sample: usize,
}

#[derive(Debug, Clone)]
pub struct TuningOutcome {
    pub hyper: Hyperparameters,
    pub trajectory: Vec<TrajectoryRow>,
    pub diagnostics: Vec<String>,
}

impl TuningOutcome {
    pub fn trajectory_table(&self) -> String {
        let mut w = TableWriter::new(&["epoch", "w_x", "w_q", "w_sx", "w_sq", "loss"]);
        for r in &self.trajectory {
            w.row([
                r.epoch.to_string(),
                fmt_f64(r.hyper.w_x),
                fmt_f64(r.hyper.w_q),
                fmt_f64(r.hyper.w_sx),
                fmt_f64(r.hyper.w_sq),
                fmt_f64(r.loss),
            ]);
        }
        w.finish()
    }
}

/// Solves one sample and returns its loss report, or `None` when a solve fails to converge.
pub fn sample_gradient(sample: &TrainingSample, hyper: Hyperparameters, opts: &CgOptions) -> Result<Option<LossReport>> {
    let sys = assemble_system(&sample.a, &sample.obs, hyper, None)?;
    let out = conjugate_gradient(&sys, sys.rhs(), None, opts)?;
    if !out.converged {
        return Ok(None);
    }
    let report = loss_gradient(&sys, &out.solution, opts)?;
    Ok(report.converged.then_some(report))
}

/// Mean loss of the recovered flows over `samples` at fixed weights.
pub fn family_loss(samples: &[TrainingSample], hyper: Hyperparameters, opts: &CgOptions) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let sys = assemble_system(&s.a, &s.obs, hyper, None)?;
            let out = conjugate_gradient(&sys, sys.rhs(), None, opts)?;
            loss(&out.solution[..sys.n_x()], &s.obs)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn sgd_tune(samples: &[TrainingSample], config: &SgdConfig, init: Hyperparameters) -> Result<TuningOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(AorError::Validation("at least one training sample is required".into()));
    }
    init.validate()?;
    if let Some((name, v)) = init.named().into_iter().find(|(_, v)| *v < config.hyper_floor) {
        return Err(AorError::Validation(format!("initial {name} = {v} is below the floor {}", config.hyper_floor)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut hyper = init;
    let mut trajectory = Vec::with_capacity(config.epochs);
    let mut diagnostics = Vec::new();
    let max_skips = 10 * samples.len();
    let mut skips = 0;
    let mut epoch = 0;
    while epoch < config.epochs {
        let idx = rng.random_range(0..samples.len());
        let Some(report) = sample_gradient(&samples[idx], hyper, &config.cg)? else {
            diagnostics.push(format!(
                "epoch {}: solve on sample {} did not converge, skipped",
                epoch + 1,
                samples[idx].label
            ));
            skips += 1;
            if skips > max_skips {
                return Err(AorError::NonConvergence(format!("{skips} sample solves failed during tuning")));
            }
            continue;
        };
        trajectory.push(TrajectoryRow {
            epoch: epoch + 1,
            hyper,
            loss: report.value,
            sample: idx,
        });
        for (w, g) in HyperParam::ALL.into_iter().zip(report.gradient) {
            let next = w.get(&hyper) - config.learning_rate * g;
            w.set(&mut hyper, next.max(config.hyper_floor));
        }
        epoch += 1;
    }
    Ok(TuningOutcome {
        hyper,
        trajectory,
        diagnostics,
    })
}
