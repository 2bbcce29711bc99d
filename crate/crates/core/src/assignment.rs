//! Dynamic assignment: flow-progression weights, logit path choice and the
//! assignment matrix mapping OD departures to link-time flows.
//!
//! Layouts:
//! - link-time rows: `link · |T| + bin`
//! - OD-time columns: `od · |T| + departure_bin`
//! - path-time slots: `(od · k + rank) · |T| + departure_bin`

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AorError, Result};
use crate::network::{k_shortest_paths, path_arrival_times, Network, OdPair, Path, PathSet, SpeedProfile};
use crate::sparse::CsrMatrix;
use crate::table::TableWriter;

/// Entries of the progression weights below this are dropped.
pub const RHO_DROP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatIndex {
    pub num_links: usize,
    pub num_ods: usize,
    pub paths_per_od: usize,
    pub num_bins: usize,
}

impl FlatIndex {
    pub fn num_rows(&self) -> usize {
        self.num_links * self.num_bins
    }

    pub fn num_cols(&self) -> usize {
        self.num_ods * self.num_bins
    }

    pub fn num_path_slots(&self) -> usize {
        self.num_ods * self.paths_per_od * self.num_bins
    }

    pub fn link_time(&self, link: usize, bin: usize) -> usize {
        debug_assert!(link < self.num_links && bin < self.num_bins);
        link * self.num_bins + bin
    }

    pub fn link_time_inv(&self, row: usize) -> (usize, usize) {
        (row / self.num_bins, row % self.num_bins)
    }

    pub fn od_time(&self, od: usize, bin: usize) -> usize {
        debug_assert!(od < self.num_ods && bin < self.num_bins);
        od * self.num_bins + bin
    }

    pub fn od_time_inv(&self, col: usize) -> (usize, usize) {
        (col / self.num_bins, col % self.num_bins)
    }

    pub fn path_time(&self, od: usize, rank: usize, bin: usize) -> usize {
        debug_assert!(od < self.num_ods && rank < self.paths_per_od && bin < self.num_bins);
        (od * self.paths_per_od + rank) * self.num_bins + bin
    }

    pub fn path_time_inv(&self, slot: usize) -> (usize, usize, usize) {
        let bin = slot % self.num_bins;
        let path = slot / self.num_bins;
        (path / self.paths_per_od, path % self.paths_per_od, bin)
    }

    /// Sidecar documenting the row and column bijections.
    pub fn to_table(&self, network: &Network) -> String {
        let mut w = TableWriter::new(&["axis", "index", "key", "bin"]);
        for row in 0..self.num_rows() {
            let (l, b) = self.link_time_inv(row);
            w.row(["row".to_string(), row.to_string(), network.link(l).id.clone(), b.to_string()]);
        }
        for col in 0..self.num_cols() {
            let (o, b) = self.od_time_inv(col);
            w.row(["col".to_string(), col.to_string(), o.to_string(), b.to_string()]);
        }
        w.finish()
    }
}

/// Absolute clock interval over which a departure cohort enters a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub start: f64,
    pub end: f64,
    /// The later departure arrived first; `end` was raised to `start`.
    pub inverted: bool,
}

impl Window {
    fn new(start: f64, end: f64) -> Window {
        if end < start {
            Window {
                start,
                end: start,
                inverted: true,
            }
        } else {
            Window {
                start,
                end,
                inverted: false,
            }
        }
    }
}

/// Entry window at `link` for the cohort departing in `[t_o, t_o + delta_t]`.
pub fn arrival_window(
    network: &Network,
    profile: &SpeedProfile,
    path: &Path,
    link: usize,
    t_o: f64,
    delta_t: f64,
) -> Result<Window> {
    let pos = path
        .links
        .iter()
        .position(|&l| l == link)
        .ok_or_else(|| AorError::Domain(format!("link {} is not on the path", network.link(link).id)))?;
    let prefix = &path.links[..pos];
    let a = *path_arrival_times(network, profile, prefix, t_o).times.last().unwrap();
    let b = *path_arrival_times(network, profile, prefix, t_o + delta_t).times.last().unwrap();
    Ok(Window::new(a, b))
}

/// Share of the window `[a, b]` falling into the bin `[t0, t1)`. A degenerate
/// window puts all of its mass in the bin containing `a`.
pub fn rho_entry(a: f64, b: f64, t0: f64, t1: f64) -> f64 {
    if b > a {
        let overlap = b.min(t1) - a.max(t0);
        if overlap > 0.0 {
            overlap / (b - a)
        } else {
            0.0
        }
    } else if a >= t0 && a < t1 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct AssignmentWeights {
    pub rho: CsrMatrix,
    pub index: FlatIndex,
    /// Windows whose end was clamped up to their start.
    pub inverted_windows: usize,
    /// Path-time columns whose traversal ran past the horizon (mass truncated).
    pub truncated_columns: usize,
}

fn rho_column(
    network: &Network,
    profile: &SpeedProfile,
    index: &FlatIndex,
    links: &[usize],
    bin: usize,
    slot: usize,
    out: &mut Vec<(usize, usize, f64)>,
) -> (usize, bool) {
    let grid = profile.grid();
    let t_o = grid.bin_start(bin);
    let early = path_arrival_times(network, profile, links, t_o).times;
    let late = path_arrival_times(network, profile, links, t_o + grid.delta_t).times;
    let mut inverted = 0;
    let mut truncated = false;
    for (i, &link) in links.iter().enumerate() {
        let w = Window::new(early[i], late[i]);
        if w.inverted {
            inverted += 1;
        }
        if w.end > grid.end() || (w.end == w.start && w.start >= grid.end()) {
            truncated = true;
        }
        let first = grid.bin_clamped(w.start).0;
        for b in first..grid.num_bins {
            let (t0, t1) = (grid.bin_start(b), grid.bin_end(b));
            if t0 > w.end {
                break;
            }
            let v = rho_entry(w.start, w.end, t0, t1);
            if v >= RHO_DROP {
                out.push((index.link_time(link, b), slot, v));
            }
        }
    }
    (inverted, truncated)
}

/// Triplets, inverted-window count and truncated-column count for one OD.
type OdBlock = (Vec<(usize, usize, f64)>, usize, usize);

/// Flow-progression weights for every (OD, path rank, departure bin).
pub fn build_rho(
    network: &Network,
    profile: &SpeedProfile,
    path_sets: &[PathSet],
    paths_per_od: usize,
) -> Result<AssignmentWeights> {
    if paths_per_od == 0 {
        return Err(AorError::Validation("paths per OD must be at least 1".into()));
    }
    if let Some(ps) = path_sets.iter().find(|ps| ps.len() > paths_per_od) {
        return Err(AorError::Dimension(format!(
            "OD {}->{} has {} paths, more than the {} slots",
            ps.od.origin,
            ps.od.destination,
            ps.len(),
            paths_per_od
        )));
    }
    let index = FlatIndex {
        num_links: network.num_links(),
        num_ods: path_sets.len(),
        paths_per_od,
        num_bins: profile.grid().num_bins,
    };
    let per_od: Vec<OdBlock> = path_sets
        .par_iter()
        .enumerate()
        .map(|(od, ps)| {
            let mut out = Vec::new();
            let mut inverted = 0;
            let mut truncated = 0;
            for (rank, path) in ps.paths.iter().enumerate() {
                for bin in 0..index.num_bins {
                    let slot = index.path_time(od, rank, bin);
                    let (inv, trunc) =
                        rho_column(network, profile, &index, &path.links, bin, slot, &mut out);
                    inverted += inv;
                    truncated += trunc as usize;
                }
            }
            (out, inverted, truncated)
        })
        .collect();
    let mut triplets = Vec::with_capacity(per_od.iter().map(|p| p.0.len()).sum());
    let mut inverted_windows = 0;
    let mut truncated_columns = 0;
    for (t, inv, trunc) in per_od {
        triplets.extend(t);
        inverted_windows += inv;
        truncated_columns += trunc;
    }
    let rho = CsrMatrix::from_triplets(index.num_rows(), index.num_path_slots(), &triplets)?;
    Ok(AssignmentWeights {
        rho,
        index,
        inverted_windows,
        truncated_columns,
    })
}

/// Logit shares `exp(-α τ_k) / Σ exp(-α τ_j)`, evaluated with max-subtraction.
pub fn logit_shares(travel_times: &[f64], alpha: f64) -> Vec<f64> {
    let best = travel_times.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = travel_times.iter().map(|t| (-alpha * (t - best)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Path-choice fractions for departures at `t_o`, from each path's full travel time.
pub fn path_choice_fraction(
    network: &Network,
    profile: &SpeedProfile,
    path_set: &PathSet,
    t_o: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    if path_set.is_empty() {
        return Err(AorError::Domain("path choice over an empty path set".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(AorError::Validation(format!("logit sensitivity must be positive, got {alpha}")));
    }
    let taus: Vec<f64> = path_set
        .paths
        .iter()
        .map(|p| path_arrival_times(network, profile, &p.links, t_o).total_travel_time())
        .collect();
    Ok(logit_shares(&taus, alpha))
}

#[derive(Debug, Clone)]
pub struct PathChoice {
    pub theta: CsrMatrix,
    pub alpha: f64,
    pub index: FlatIndex,
}

/// Block-diagonal path-choice matrix; ODs without paths emit nothing.
pub fn build_theta(
    network: &Network,
    profile: &SpeedProfile,
    path_sets: &[PathSet],
    paths_per_od: usize,
    alpha: f64,
) -> Result<PathChoice> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(AorError::Validation(format!("logit sensitivity must be positive, got {alpha}")));
    }
    let index = FlatIndex {
        num_links: network.num_links(),
        num_ods: path_sets.len(),
        paths_per_od,
        num_bins: profile.grid().num_bins,
    };
    let grid = *profile.grid();
    let per_od: Vec<Vec<(usize, usize, f64)>> = path_sets
        .par_iter()
        .enumerate()
        .map(|(od, ps)| {
            let mut out = Vec::new();
            if ps.is_empty() {
                return Ok(out);
            }
            for bin in 0..index.num_bins {
                let shares = path_choice_fraction(network, profile, ps, grid.bin_start(bin), alpha)?;
                for (rank, s) in shares.into_iter().enumerate() {
                    if s > 0.0 {
                        out.push((index.path_time(od, rank, bin), index.od_time(od, bin), s));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let triplets: Vec<_> = per_od.into_iter().flatten().collect();
    let theta = CsrMatrix::from_triplets(index.num_path_slots(), index.num_cols(), &triplets)?;
    Ok(PathChoice { theta, alpha, index })
}

/// Sparse map from OD-departure demand to link-time flow, with its transpose
/// cached for matrix-free normal-equation products.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    a: CsrMatrix,
    at: CsrMatrix,
    provenance: String,
}

impl AssignmentMatrix {
    pub fn from_csr(a: CsrMatrix) -> Result<AssignmentMatrix> {
        if let Some(v) = a.values().iter().find(|v| **v < 0.0) {
            return Err(AorError::Validation(format!("assignment entries must be non-negative, found {v}")));
        }
        let mut h = Sha256::new();
        h.update(a.to_coo_text().as_bytes());
        let provenance = hex::encode(h.finalize());
        let at = a.transpose();
        Ok(AssignmentMatrix { a, at, provenance })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.a
    }

    pub fn transpose(&self) -> &CsrMatrix {
        &self.at
    }

    /// Number of link-time rows.
    pub fn n_x(&self) -> usize {
        self.a.rows()
    }

    /// Number of OD-time columns.
    pub fn n_q(&self) -> usize {
        self.a.cols()
    }

    /// SHA-256 of the coordinate serialisation.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn apply(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.a.mul_vec(q)
    }

    pub fn apply_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.at.mul_vec(x)
    }
}

/// `A = ρ θ`.
pub fn build_assignment(rho: &AssignmentWeights, theta: &PathChoice) -> Result<AssignmentMatrix> {
    AssignmentMatrix::from_csr(rho.rho.matmul(&theta.theta)?)
}

/// Link-time flows `x = A q`.
pub fn apply_assignment(a: &AssignmentMatrix, q: &[f64]) -> Result<Vec<f64>> {
    a.apply(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentConfig {
    /// Candidate paths per OD pair.
    pub k: usize,
    /// Logit sensitivity to travel time, 1/s.
    pub alpha: f64,
    /// Reference time for path enumeration; defaults to the horizon start.
    pub t_ref: Option<f64>,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            k: 5,
            alpha: 0.01,
            t_ref: None,
        }
    }
}

/// Everything produced while building an assignment matrix for one scenario.
#[derive(Debug, Clone)]
pub struct AssignmentModel {
    pub path_sets: Vec<PathSet>,
    pub weights: AssignmentWeights,
    pub choice: PathChoice,
    pub matrix: AssignmentMatrix,
    pub index: FlatIndex,
    pub warnings: Vec<String>,
}

pub fn enumerate_paths(
    network: &Network,
    profile: &SpeedProfile,
    ods: &[OdPair],
    k: usize,
    t_ref: f64,
) -> Result<Vec<PathSet>> {
    ods.par_iter()
        .map(|od| k_shortest_paths(network, profile, od, k, t_ref))
        .collect()
}

pub fn build_model(
    network: &Network,
    profile: &SpeedProfile,
    ods: &[OdPair],
    config: &AssignmentConfig,
) -> Result<AssignmentModel> {
    let t_ref = config.t_ref.unwrap_or(profile.grid().t_start);
    let path_sets = enumerate_paths(network, profile, ods, config.k, t_ref)?;
    let mut warnings: Vec<String> = path_sets.iter().filter_map(|ps| ps.warning.clone()).collect();
    let weights = build_rho(network, profile, &path_sets, config.k)?;
    let choice = build_theta(network, profile, &path_sets, config.k, config.alpha)?;
    if weights.inverted_windows > 0 {
        warnings.push(format!("{} arrival windows inverted and clamped", weights.inverted_windows));
    }
    let matrix = build_assignment(&weights, &choice)?;
    Ok(AssignmentModel {
        index: weights.index,
        path_sets,
        weights,
        choice,
        matrix,
        warnings,
    })
}
