//! Shared fixtures and independent dense oracles for the integration tests.
#![allow(dead_code)]

use aor::assignment::AssignmentMatrix;
use aor::network::{Link, Network, Node, SpeedProfile};
use aor::recovery::{Hyperparameters, Observations};
use aor::sparse::CsrMatrix;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub a: AssignmentMatrix,
    pub obs: Observations,
    pub q_true: Vec<f64>,
}

/// Random sparse non-negative assignment with observations drawn from `A q_true`.
/// Demand priors are attached to a random subset of columns when `with_prior`.
pub fn random_instance(seed: u64, n_x: usize, n_q: usize, density: f64, with_prior: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trip = Vec::new();
    for c in 0..n_q {
        // Every column touches at least one row.
        let r0 = rng.random_range(0..n_x);
        trip.push((r0, c, rng.random_range(0.1..1.0)));
        for r in 0..n_x {
            if r != r0 && rng.random_bool(density) {
                trip.push((r, c, rng.random_range(0.05..1.0)));
            }
        }
    }
    let a = AssignmentMatrix::from_csr(CsrMatrix::from_triplets(n_x, n_q, &trip).unwrap()).unwrap();
    let q_true: Vec<f64> = (0..n_q).map(|_| rng.random_range(5.0..50.0)).collect();
    let x_true = a.apply(&q_true).unwrap();
    let n_obs = (n_x / 3).max(1);
    let mut rows = sample(&mut rng, n_x, n_obs).into_vec();
    rows.sort_unstable();
    let x0: Vec<f64> = rows.iter().map(|&r| x_true[r] * rng.random_range(0.9..1.1)).collect();
    let (cols, q0) = if with_prior {
        let n_p = (n_q / 4).max(1);
        let mut cols = sample(&mut rng, n_q, n_p).into_vec();
        cols.sort_unstable();
        let q0 = cols.iter().map(|&c| q_true[c] * rng.random_range(0.8..1.2)).collect();
        (cols, q0)
    } else {
        (Vec::new(), Vec::new())
    };
    Instance {
        a,
        obs: Observations::new(rows, x0, cols, q0).unwrap(),
        q_true,
    }
}

pub fn random_hyper(seed: u64) -> Hyperparameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut lg = |lo: f64, hi: f64| 10f64.powf(rng.random_range(lo..hi));
    Hyperparameters {
        w_x: lg(-2.0, 0.0),
        w_q: lg(-2.0, 0.0),
        w_sx: lg(-1.0, 1.0),
        w_sq: lg(-1.0, 1.0),
    }
}

pub fn dense(a: &AssignmentMatrix) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.n_x(), a.n_q());
    for (r, c, v) in a.matrix().triplets() {
        m[(r, c)] += v;
    }
    m
}

/// Dense block matrix of the stationarity system, assembled from its definition.
pub fn dense_system(a: &AssignmentMatrix, obs: &Observations, h: &Hyperparameters) -> (DMatrix<f64>, DVector<f64>) {
    let (n_x, n_q) = (a.n_x(), a.n_q());
    let ad = dense(a);
    let mut m = DMatrix::zeros(n_x + n_q, n_x + n_q);
    let mut v = DVector::zeros(n_x + n_q);
    for i in 0..n_x {
        m[(i, i)] = 1.0 + h.w_x;
    }
    for (&r, &x0) in obs.link_rows().iter().zip(obs.x0()) {
        m[(r, r)] += h.w_sx;
        v[r] += h.w_sx * x0;
    }
    let ata = ad.transpose() * &ad;
    for i in 0..n_x {
        for j in 0..n_q {
            m[(i, n_x + j)] = -ad[(i, j)];
            m[(n_x + j, i)] = -ad[(i, j)];
        }
    }
    for i in 0..n_q {
        for j in 0..n_q {
            m[(n_x + i, n_x + j)] = ata[(i, j)];
        }
        m[(n_x + i, n_x + i)] += h.w_q;
    }
    for (&c, &q0) in obs.od_cols().iter().zip(obs.q0()) {
        m[(n_x + c, n_x + c)] += h.w_sq;
        v[n_x + c] += h.w_sq * q0;
    }
    (m, v)
}

/// Dense direct solve (LU with partial pivoting) of the stationarity system.
pub fn dense_solve(a: &AssignmentMatrix, obs: &Observations, h: &Hyperparameters) -> Vec<f64> {
    let (m, v) = dense_system(a, obs, h);
    m.lu().solve(&v).expect("system is nonsingular").iter().copied().collect()
}

/// Objective evaluated directly from its five terms.
pub fn objective_direct(a: &AssignmentMatrix, obs: &Observations, h: &Hyperparameters, x: &[f64], q: &[f64]) -> f64 {
    let ad = dense(a);
    let aq = &ad * DVector::from_column_slice(q);
    let fit: f64 = x.iter().zip(aq.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    let sx: f64 = obs.link_rows().iter().zip(obs.x0()).map(|(&r, x0)| (x[r] - x0).powi(2)).sum();
    let sq: f64 = obs.od_cols().iter().zip(obs.q0()).map(|(&c, q0)| (q[c] - q0).powi(2)).sum();
    fit + h.w_x * x.iter().map(|v| v * v).sum::<f64>() + h.w_q * q.iter().map(|v| v * v).sum::<f64>() + h.w_sx * sx + h.w_sq * sq
}

/// Gradient of the objective by its closed form.
pub fn objective_gradient(a: &AssignmentMatrix, obs: &Observations, h: &Hyperparameters, x: &[f64], q: &[f64]) -> Vec<f64> {
    let ad = dense(a);
    let r = DVector::from_column_slice(x) - &ad * DVector::from_column_slice(q);
    let mut gx: Vec<f64> = r.iter().zip(x).map(|(r, x)| 2.0 * r + 2.0 * h.w_x * x).collect();
    for (&i, x0) in obs.link_rows().iter().zip(obs.x0()) {
        gx[i] += 2.0 * h.w_sx * (x[i] - x0);
    }
    let atr = ad.transpose() * r;
    let mut gq: Vec<f64> = atr.iter().zip(q).map(|(v, q)| -2.0 * v + 2.0 * h.w_q * q).collect();
    for (&j, q0) in obs.od_cols().iter().zip(obs.q0()) {
        gq[j] += 2.0 * h.w_sq * (q[j] - q0);
    }
    gx.extend(gq);
    gx
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

/// Walks a path holding each link's entry-bin speed. Returns the entry time of
/// every link followed by the final arrival.
pub fn walk(profile: &SpeedProfile, net: &Network, links: &[usize], t_o: f64) -> Vec<f64> {
    let g = profile.grid();
    let mut t = t_o;
    let mut out = vec![t];
    for &l in links {
        let b = (((t - g.t_start) / g.delta_t).floor().max(0.0) as usize).min(g.num_bins - 1);
        t += net.link(l).length_m / profile.speed(l, b);
        out.push(t);
    }
    out
}

pub fn overlap_fraction(a: f64, b: f64, t0: f64, t1: f64) -> f64 {
    if b > a {
        ((b.min(t1) - a.max(t0)).max(0.0)) / (b - a)
    } else if a >= t0 && a < t1 {
        1.0
    } else {
        0.0
    }
}

/// Random directed graph on `v0..v{nodes-1}` with integer-hundred lengths.
pub fn random_graph(seed: u64, nodes: usize, edges: usize) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node_list: Vec<Node> = (0..nodes).map(|i| Node { id: format!("v{i}") }).collect();
    let mut links = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    while links.len() < edges {
        let (u, v) = (rng.random_range(0..nodes), rng.random_range(0..nodes));
        if u == v || !seen.insert((u, v)) {
            continue;
        }
        links.push(Link {
            id: format!("e{}", links.len()),
            from: format!("v{u}"),
            to: format!("v{v}"),
            // Integer lengths keep ties exact.
            length_m: rng.random_range(1..6) as f64 * 100.0,
            road_class: None,
        });
    }
    Network::new(node_list, links).unwrap()
}
