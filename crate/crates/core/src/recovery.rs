//! Regularised least-squares recovery of link flows `x` and OD demands `q`.
//!
//! The objective is
//! `‖x − A q‖² + w_x‖x‖² + w_q‖q‖² + w_sx‖M_x x − x_0‖² + w_sq‖M_q q − q_0‖²`,
//! and its stationary point solves the symmetric block system `M E = V`
//! (half the Hessian on the left). Multipliers enter `V` directly, which
//! rescales them by two relative to the plain Lagrangian stationarity.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentMatrix, FlatIndex};
use crate::error::{AorError, Result};
use crate::network::Network;
use crate::table::{fmt_f64, Table, TableWriter};

/// Observed link-time flows and optional prior OD-time demands.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    link_rows: Vec<usize>,
    x0: Vec<f64>,
    od_cols: Vec<usize>,
    q0: Vec<f64>,
}

fn check_entries(kind: &str, idx: &[usize], vals: &[f64]) -> Result<()> {
    if idx.len() != vals.len() {
        return Err(AorError::Dimension(format!(
            "{kind}: {} indices but {} values",
            idx.len(),
            vals.len()
        )));
    }
    let mut seen = HashSet::with_capacity(idx.len());
    for (&i, &v) in idx.iter().zip(vals) {
        if !seen.insert(i) {
            return Err(AorError::Duplicate(format!("{kind} index {i}")));
        }
        if !(v.is_finite() && v >= 0.0) {
            return Err(AorError::Validation(format!("{kind} value at {i} must be finite and >= 0, got {v}")));
        }
    }
    Ok(())
}

impl Observations {
    pub fn new(link_rows: Vec<usize>, x0: Vec<f64>, od_cols: Vec<usize>, q0: Vec<f64>) -> Result<Observations> {
        check_entries("observed link row", &link_rows, &x0)?;
        check_entries("prior OD column", &od_cols, &q0)?;
        Ok(Observations {
            link_rows,
            x0,
            od_cols,
            q0,
        })
    }

    pub fn links_only(link_rows: Vec<usize>, x0: Vec<f64>) -> Result<Observations> {
        Observations::new(link_rows, x0, Vec::new(), Vec::new())
    }

    pub fn empty() -> Observations {
        Observations {
            link_rows: Vec::new(),
            x0: Vec::new(),
            od_cols: Vec::new(),
            q0: Vec::new(),
        }
    }

    pub fn link_rows(&self) -> &[usize] {
        &self.link_rows
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn od_cols(&self) -> &[usize] {
        &self.od_cols
    }

    pub fn q0(&self) -> &[f64] {
        &self.q0
    }

    /// Number of observed (link, bin) entries.
    pub fn num_observed(&self) -> usize {
        self.link_rows.len()
    }

    pub fn check_range(&self, n_x: usize, n_q: usize) -> Result<()> {
        if let Some(r) = self.link_rows.iter().find(|&&r| r >= n_x) {
            return Err(AorError::Dimension(format!("observed row {r} out of range 0..{n_x}")));
        }
        if let Some(c) = self.od_cols.iter().find(|&&c| c >= n_q) {
            return Err(AorError::Dimension(format!("prior column {c} out of range 0..{n_q}")));
        }
        Ok(())
    }

    /// `M_x x`.
    pub fn select_x(&self, x: &[f64]) -> Vec<f64> {
        self.link_rows.iter().map(|&r| x[r]).collect()
    }

    /// `M_x x − x_0`.
    pub fn residual_x(&self, x: &[f64]) -> Vec<f64> {
        self.link_rows.iter().zip(&self.x0).map(|(&r, &v)| x[r] - v).collect()
    }

    /// `M_q q − q_0`.
    pub fn residual_q(&self, q: &[f64]) -> Vec<f64> {
        self.od_cols.iter().zip(&self.q0).map(|(&c, &v)| q[c] - v).collect()
    }

    /// `M_xᵀ v` as a dense vector of length `n_x`.
    pub fn scatter_x(&self, v: &[f64], n_x: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_x];
        for (&r, &val) in self.link_rows.iter().zip(v) {
            out[r] = val;
        }
        out
    }

    pub fn scatter_q(&self, v: &[f64], n_q: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_q];
        for (&c, &val) in self.od_cols.iter().zip(v) {
            out[c] = val;
        }
        out
    }

    /// Diagonal of `M_xᵀ M_x`: 1 on observed rows, else 0.
    pub fn mask_x(&self, n_x: usize) -> Vec<f64> {
        self.scatter_x(&vec![1.0; self.link_rows.len()], n_x)
    }

    pub fn mask_q(&self, n_q: usize) -> Vec<f64> {
        self.scatter_q(&vec![1.0; self.od_cols.len()], n_q)
    }

    /// Reads `link_id,bin,flow` rows.
    pub fn flows_from_table(table: &Table, network: &Network, index: &FlatIndex) -> Result<(Vec<usize>, Vec<f64>)> {
        table.require_columns(&["link_id", "bin", "flow"])?;
        let mut rows = Vec::with_capacity(table.len());
        let mut vals = Vec::with_capacity(table.len());
        for row in table.rows() {
            let id = row.str("link_id")?;
            let link = network
                .link_position(id)
                .ok_or_else(|| row.error(format!("unknown link {id}")))?;
            let bin: usize = row.parse("bin")?;
            if bin >= index.num_bins {
                return Err(row.error(format!("bin {bin} outside 0..{}", index.num_bins)));
            }
            rows.push(index.link_time(link, bin));
            vals.push(row.parse("flow")?);
        }
        Ok((rows, vals))
    }

    /// Reads `od_index,bin,demand` rows.
    pub fn demands_from_table(table: &Table, index: &FlatIndex) -> Result<(Vec<usize>, Vec<f64>)> {
        table.require_columns(&["od_index", "bin", "demand"])?;
        let mut cols = Vec::with_capacity(table.len());
        let mut vals = Vec::with_capacity(table.len());
        for row in table.rows() {
            let od: usize = row.parse("od_index")?;
            let bin: usize = row.parse("bin")?;
            if od >= index.num_ods || bin >= index.num_bins {
                return Err(row.error(format!("OD-time ({od}, {bin}) out of range")));
            }
            cols.push(index.od_time(od, bin));
            vals.push(row.parse("demand")?);
        }
        Ok((cols, vals))
    }

    pub fn flows_table(&self, network: &Network, index: &FlatIndex) -> String {
        flows_to_table(&self.link_rows, &self.x0, network, index, "flow")
    }
}

fn flows_to_table(rows: &[usize], vals: &[f64], network: &Network, index: &FlatIndex, column: &str) -> String {
    let mut w = TableWriter::new(&["link_id", "bin", column]);
    for (&r, &v) in rows.iter().zip(vals) {
        let (l, b) = index.link_time_inv(r);
        w.row([network.link(l).id.clone(), b.to_string(), fmt_f64(v)]);
    }
    w.finish()
}

/// Dense link-time vector as `link_id,bin,<column>`.
pub fn link_series_table(x: &[f64], network: &Network, index: &FlatIndex, column: &str) -> String {
    let rows: Vec<usize> = (0..x.len()).collect();
    flows_to_table(&rows, x, network, index, column)
}

/// Dense OD-time vector as `od_index,bin,<column>`.
pub fn od_series_table(q: &[f64], index: &FlatIndex, column: &str) -> String {
    let mut w = TableWriter::new(&["od_index", "bin", column]);
    for (c, &v) in q.iter().enumerate() {
        let (o, b) = index.od_time_inv(c);
        w.row([o.to_string(), b.to_string(), fmt_f64(v)]);
    }
    w.finish()
}

/// Reads a dense link-time vector written by [`link_series_table`].
pub fn link_series_from_table(table: &Table, network: &Network, index: &FlatIndex, column: &str) -> Result<Vec<f64>> {
    table.require_columns(&["link_id", "bin", column])?;
    let mut x = vec![f64::NAN; index.num_rows()];
    for row in table.rows() {
        let id = row.str("link_id")?;
        let link = network
            .link_position(id)
            .ok_or_else(|| row.error(format!("unknown link {id}")))?;
        let bin: usize = row.parse("bin")?;
        if bin >= index.num_bins {
            return Err(row.error(format!("bin {bin} outside 0..{}", index.num_bins)));
        }
        x[index.link_time(link, bin)] = row.parse(column)?;
    }
    if let Some(r) = x.iter().position(|v| v.is_nan()) {
        let (l, b) = index.link_time_inv(r);
        return Err(AorError::Validation(format!("no {column} for link {} bin {b}", network.link(l).id)));
    }
    Ok(x)
}

pub fn od_series_from_table(table: &Table, index: &FlatIndex, column: &str) -> Result<Vec<f64>> {
    table.require_columns(&["od_index", "bin", column])?;
    let mut q = vec![f64::NAN; index.num_cols()];
    for row in table.rows() {
        let od: usize = row.parse("od_index")?;
        let bin: usize = row.parse("bin")?;
        if od >= index.num_ods || bin >= index.num_bins {
            return Err(row.error(format!("OD-time ({od}, {bin}) out of range")));
        }
        q[index.od_time(od, bin)] = row.parse(column)?;
    }
    if let Some(c) = q.iter().position(|v| v.is_nan()) {
        return Err(AorError::Validation(format!("no {column} for OD column {c}")));
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub w_x: f64,
    pub w_q: f64,
    pub w_sx: f64,
    pub w_sq: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            w_x: 1e-6,
            w_q: 1e-3,
            w_sx: 100.0,
            w_sq: 1.0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AorError::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.w_x <= 0.0 || self.w_q <= 0.0 {
            return Err(AorError::Validation("w_x and w_q must be positive".into()));
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [("w_x", self.w_x), ("w_q", self.w_q), ("w_sx", self.w_sx), ("w_sq", self.w_sq)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub lambda_x: Vec<f64>,
    pub lambda_q: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(n_x: usize, n_q: usize) -> Multipliers {
        Multipliers {
            lambda_x: vec![0.0; n_x],
            lambda_q: vec![0.0; n_q],
        }
    }

    pub fn is_non_negative(&self) -> bool {
        self.lambda_x.iter().chain(&self.lambda_q).all(|&v| v >= 0.0)
    }
}

/// Symmetric operator usable by [`conjugate_gradient`].
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);
    /// Diagonal, used for Jacobi preconditioning.
    fn diagonal(&self) -> Vec<f64>;
}

/// Block system `M E = V`, applied matrix-free.
#[derive(Debug, Clone)]
pub struct BlockSystem<'a> {
    a: &'a AssignmentMatrix,
    obs: &'a Observations,
    hyper: Hyperparameters,
    mask_x: Vec<f64>,
    mask_q: Vec<f64>,
    rhs: Vec<f64>,
}

/// Builds the operator and right-hand side. Multipliers are optional (zero).
pub fn assemble_system<'a>(
    a: &'a AssignmentMatrix,
    obs: &'a Observations,
    hyper: Hyperparameters,
    multipliers: Option<&Multipliers>,
) -> Result<BlockSystem<'a>> {
    let (n_x, n_q) = (a.n_x(), a.n_q());
    obs.check_range(n_x, n_q)?;
    if let Some(m) = multipliers {
        if m.lambda_x.len() != n_x || m.lambda_q.len() != n_q {
            return Err(AorError::Dimension(format!(
                "multipliers ({}, {}) do not match system ({n_x}, {n_q})",
                m.lambda_x.len(),
                m.lambda_q.len()
            )));
        }
    }
    let mut sys = BlockSystem {
        a,
        obs,
        hyper,
        mask_x: obs.mask_x(n_x),
        mask_q: obs.mask_q(n_q),
        rhs: Vec::new(),
    };
    sys.rhs = sys.base_rhs();
    if let Some(m) = multipliers {
        sys.add_multipliers(m);
    }
    Ok(sys)
}

impl<'a> BlockSystem<'a> {
    pub fn n_x(&self) -> usize {
        self.a.n_x()
    }

    pub fn n_q(&self) -> usize {
        self.a.n_q()
    }

    pub fn hyper(&self) -> Hyperparameters {
        self.hyper
    }

    pub fn assignment(&self) -> &'a AssignmentMatrix {
        self.a
    }

    pub fn observations(&self) -> &'a Observations {
        self.obs
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn mask_x(&self) -> &[f64] {
        &self.mask_x
    }

    pub fn mask_q(&self) -> &[f64] {
        &self.mask_q
    }

    /// `[w_sx M_xᵀ x_0 ; w_sq M_qᵀ q_0]`.
    pub fn base_rhs(&self) -> Vec<f64> {
        let mut v = self.obs.scatter_x(self.obs.x0(), self.n_x());
        v.iter_mut().for_each(|e| *e *= self.hyper.w_sx);
        let mut vq = self.obs.scatter_q(self.obs.q0(), self.n_q());
        vq.iter_mut().for_each(|e| *e *= self.hyper.w_sq);
        v.extend(vq);
        v
    }

    /// Replaces the right-hand side with the base plus `multipliers`.
    pub fn set_multipliers(&mut self, m: &Multipliers) {
        self.rhs = self.base_rhs();
        self.add_multipliers(m);
    }

    fn add_multipliers(&mut self, m: &Multipliers) {
        for (r, l) in self.rhs.iter_mut().zip(m.lambda_x.iter().chain(&m.lambda_q)) {
            *r += l;
        }
    }

    pub fn residual_norm(&self, e: &[f64], b: &[f64]) -> f64 {
        let mut me = vec![0.0; self.dim()];
        self.apply(e, &mut me);
        norm(&me.iter().zip(b).map(|(u, v)| u - v).collect::<Vec<_>>())
    }
}

impl LinearOperator for BlockSystem<'_> {
    fn dim(&self) -> usize {
        self.n_x() + self.n_q()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n_x = self.n_x();
        let (vx, vq) = v.split_at(n_x);
        let (ox, oq) = out.split_at_mut(n_x);
        let h = &self.hyper;
        let mut avq = vec![0.0; n_x];
        self.a.matrix().mul_vec_into(vq, &mut avq);
        for i in 0..n_x {
            ox[i] = (1.0 + h.w_x + h.w_sx * self.mask_x[i]) * vx[i] - avq[i];
            avq[i] -= vx[i];
        }
        // Bottom block: Aᵀ(A v_q − v_x) + w_q v_q + w_sq M_qᵀM_q v_q.
        self.a.transpose().mul_vec_into(&avq, oq);
        for (j, o) in oq.iter_mut().enumerate() {
            *o += (h.w_q + h.w_sq * self.mask_q[j]) * vq[j];
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let h = &self.hyper;
        let mut d: Vec<f64> = self.mask_x.iter().map(|m| 1.0 + h.w_x + h.w_sx * m).collect();
        let colsq = self.a.matrix().column_sq_norms();
        d.extend(colsq.iter().zip(&self.mask_q).map(|(c, m)| c + h.w_q + h.w_sq * m));
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgOptions {
    pub tol: f64,
    /// Defaults to ten times the system dimension.
    pub max_iter: Option<usize>,
    pub jacobi: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: 1e-8,
            max_iter: None,
            jacobi: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// True `‖b − M x‖₂` at exit.
    pub residual_norm: f64,
    pub converged: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients on `op x = b`, stopping at
/// `‖b − op x‖ ≤ tol ‖b‖`. The recursive residual is re-verified against the
/// true residual before declaring convergence.
pub fn conjugate_gradient<O: LinearOperator + ?Sized>(
    op: &O,
    b: &[f64],
    init: Option<&[f64]>,
    opts: &CgOptions,
) -> Result<CgOutcome> {
    let n = op.dim();
    if b.len() != n {
        return Err(AorError::Dimension(format!("rhs length {} for operator of size {n}", b.len())));
    }
    if !(opts.tol > 0.0) {
        return Err(AorError::Validation(format!("CG tolerance must be positive, got {}", opts.tol)));
    }
    let max_iter = opts.max_iter.unwrap_or(10 * n.max(1));
    let inv_diag: Option<Vec<f64>> = opts.jacobi.then(|| {
        op.diagonal()
            .into_iter()
            .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
            .collect()
    });
    let precondition = |r: &[f64]| -> Vec<f64> {
        match &inv_diag {
            Some(d) => r.iter().zip(d).map(|(a, b)| a * b).collect(),
            None => r.to_vec(),
        }
    };

    let mut x = match init {
        Some(v) if v.len() == n => v.to_vec(),
        Some(v) => return Err(AorError::Dimension(format!("initial guess length {} != {n}", v.len()))),
        None => vec![0.0; n],
    };
    let threshold = opts.tol * norm(b);
    let mut ax = vec![0.0; n];
    let true_residual = |x: &[f64], ax: &mut [f64]| -> Vec<f64> {
        op.apply(x, ax);
        b.iter().zip(ax.iter()).map(|(u, v)| u - v).collect()
    };

    let mut r = true_residual(&x, &mut ax);
    let mut rnorm = norm(&r);
    let mut iterations = 0;
    if rnorm <= threshold {
        return Ok(CgOutcome {
            solution: x,
            iterations,
            residual_norm: rnorm,
            converged: true,
        });
    }
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    while iterations < max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            // Breakdown: the operator is not positive definite along p.
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        if norm(&r) <= threshold {
            r = true_residual(&x, &mut ax);
            rnorm = norm(&r);
            if rnorm <= threshold {
                return Ok(CgOutcome {
                    solution: x,
                    iterations,
                    residual_norm: rnorm,
                    converged: true,
                });
            }
            // Drifted: restart from the true residual.
            z = precondition(&r);
            p = z.clone();
            rz = dot(&r, &z);
            continue;
        }
        z = precondition(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    r = true_residual(&x, &mut ax);
    rnorm = norm(&r);
    Ok(CgOutcome {
        solution: x,
        iterations,
        residual_norm: rnorm,
        converged: rnorm <= threshold,
    })
}

/// Counts of negative entries in the unconstrained estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampDiagnostics {
    pub negative_x: usize,
    pub negative_q: usize,
}

#[derive(Debug, Clone)]
pub struct RecoveryResult {
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub cg_iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    pub clamp_diagnostics: ClampDiagnostics,
}

impl RecoveryResult {
    fn from_solution(n_x: usize, out: CgOutcome) -> RecoveryResult {
        let mut x = out.solution;
        let q = x.split_off(n_x);
        let clamp_diagnostics = ClampDiagnostics {
            negative_x: x.iter().filter(|v| **v < 0.0).count(),
            negative_q: q.iter().filter(|v| **v < 0.0).count(),
        };
        RecoveryResult {
            x,
            q,
            cg_iterations: out.iterations,
            residual_norm: out.residual_norm,
            converged: out.converged,
            clamp_diagnostics,
        }
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.x.iter().chain(&self.q).copied().collect()
    }

    pub fn flows_table(&self, network: &Network, index: &FlatIndex) -> String {
        link_series_table(&self.x, network, index, "flow_est")
    }

    pub fn demands_table(&self, index: &FlatIndex) -> String {
        od_series_table(&self.q, index, "demand_est")
    }
}

pub fn solve_cg(system: &BlockSystem<'_>, opts: &CgOptions) -> Result<RecoveryResult> {
    solve_cg_from(system, None, opts)
}

/// As [`solve_cg`], warm-started from `init` when given.
pub fn solve_cg_from(system: &BlockSystem<'_>, init: Option<&[f64]>, opts: &CgOptions) -> Result<RecoveryResult> {
    let out = conjugate_gradient(system, system.rhs(), init, opts)?;
    Ok(RecoveryResult::from_solution(system.n_x(), out))
}

/// Unconstrained stationary point of the objective with zero multipliers.
pub fn recover(
    a: &AssignmentMatrix,
    obs: &Observations,
    hyper: Hyperparameters,
    opts: &CgOptions,
) -> Result<RecoveryResult> {
    hyper.validate()?;
    let sys = assemble_system(a, obs, hyper, None)?;
    solve_cg(&sys, opts)
}

/// Value of the regularised least-squares objective at `(x, q)`.
pub fn objective(
    a: &AssignmentMatrix,
    obs: &Observations,
    hyper: &Hyperparameters,
    x: &[f64],
    q: &[f64],
) -> Result<f64> {
    if x.len() != a.n_x() || q.len() != a.n_q() {
        return Err(AorError::Dimension(format!(
            "(x, q) lengths ({}, {}) for a {}x{} assignment",
            x.len(),
            q.len(),
            a.n_x(),
            a.n_q()
        )));
    }
    obs.check_range(a.n_x(), a.n_q())?;
    let aq = a.apply(q)?;
    let fit: f64 = x.iter().zip(&aq).map(|(u, v)| (u - v) * (u - v)).sum();
    let rx = obs.residual_x(x);
    let rq = obs.residual_q(q);
    Ok(fit
        + hyper.w_x * dot(x, x)
        + hyper.w_q * dot(q, q)
        + hyper.w_sx * dot(&rx, &rx)
        + hyper.w_sq * dot(&rq, &rq))
}
