mod common;

use aor::assignment::{build_model, AssignmentConfig, AssignmentModel};
use aor::network::{k_shortest_paths, path_arrival_times, Network, OdPair, SpeedProfile, TimeGrid};
use common::{overlap_fraction, random_graph, walk};
use aor::synthgen::{generate, ScenarioConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense ρθ assembled from scratch for the paths the model enumerated.
fn dense_oracle(net: &Network, profile: &SpeedProfile, model: &AssignmentModel, alpha: f64) -> DMatrix<f64> {
    let idx = &model.index;
    let g = profile.grid();
    let mut a = DMatrix::zeros(idx.num_rows(), idx.num_cols());
    for (od, ps) in model.path_sets.iter().enumerate() {
        for bin in 0..g.num_bins {
            let t_o = g.t_start + bin as f64 * g.delta_t;
            let taus: Vec<f64> = ps
                .paths
                .iter()
                .map(|p| walk(profile, net, &p.links, t_o).last().unwrap() - t_o)
                .collect();
            let w: Vec<f64> = taus.iter().map(|t| (-alpha * t).exp()).collect();
            let total: f64 = w.iter().sum();
            for (k, p) in ps.paths.iter().enumerate() {
                let theta = w[k] / total;
                let early = walk(profile, net, &p.links, t_o);
                let late = walk(profile, net, &p.links, t_o + g.delta_t);
                for (i, &l) in p.links.iter().enumerate() {
                    let (a0, b0) = (early[i], late[i].max(early[i]));
                    for b in 0..g.num_bins {
                        let t0 = g.t_start + b as f64 * g.delta_t;
                        let rho = overlap_fraction(a0, b0, t0, t0 + g.delta_t);
                        if rho >= 1e-12 {
                            a[(idx.link_time(l, b), idx.od_time(od, bin))] += theta * rho;
                        }
                    }
                }
            }
        }
    }
    a
}

fn tiny_config(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        grid_shape: [2, 2],
        num_od: 4,
        bins: 4,
        obs_fraction: 0.5,
        ..ScenarioConfig::default()
    }
}

#[test]
fn synthetic_truth_matches_dense_forward_oracle() {
    for seed in 0..4 {
        let cfg = tiny_config(seed);
        let s = generate(&cfg).unwrap();
        let oracle = dense_oracle(&s.network, &s.profile, &s.model, cfg.assignment.alpha);
        let built = common::dense(&s.model.matrix);
        assert!((&built - &oracle).abs().max() < 1e-12, "seed {seed}");
        let x = &oracle * nalgebra::DVector::from_column_slice(&s.q_true);
        for (i, v) in x.iter().enumerate() {
            assert!((v - s.x_true[i]).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }
}

/// All simple paths by depth-first search.
fn all_simple_paths(net: &Network, from: usize, to: usize) -> Vec<Vec<usize>> {
    fn dfs(net: &Network, at: usize, to: usize, seen: &mut Vec<bool>, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if at == to {
            out.push(path.clone());
            return;
        }
        for l in 0..net.num_links() {
            let (u, v) = net.link_ends(l);
            if u == at && !seen[v] {
                seen[v] = true;
                path.push(l);
                dfs(net, v, to, seen, path, out);
                path.pop();
                seen[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    let mut seen = vec![false; net.num_nodes()];
    seen[from] = true;
    dfs(net, from, to, &mut seen, &mut Vec::new(), &mut out);
    out
}

fn uniform_profile(net: &Network, bins: usize) -> SpeedProfile {
    SpeedProfile::uniform(TimeGrid::new(0.0, 300.0, bins).unwrap(), net.num_links(), 10.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn k_shortest_matches_brute_force(seed in any::<u64>(), nodes in 3usize..7, extra in 0usize..8) {
        let edges = (nodes + extra).min(nodes * (nodes - 1));
        let net = random_graph(seed, nodes, edges);
        let profile = uniform_profile(&net, 4);
        let od = OdPair::new("v0", format!("v{}", nodes - 1)).unwrap();
        let (o, d) = (net.node_position("v0").unwrap(), net.node_position(&format!("v{}", nodes - 1)).unwrap());
        let mut brute: Vec<(f64, Vec<&str>, Vec<usize>)> = all_simple_paths(&net, o, d)
            .into_iter()
            .map(|p| {
                let cost: f64 = p.iter().map(|&l| net.link(l).length_m / 10.0).sum();
                let ids = p.iter().map(|&l| net.link(l).id.as_str()).collect();
                (cost, ids, p)
            })
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        for k in [1usize, 3, 50] {
            let ps = k_shortest_paths(&net, &profile, &od, k, 0.0).unwrap();
            let want = brute.len().min(k);
            prop_assert_eq!(ps.paths.len(), want);
            for (i, p) in ps.paths.iter().enumerate() {
                prop_assert!((ps.costs[i] - brute[i].0).abs() < 1e-9);
                if i > 0 {
                    prop_assert!(ps.costs[i] >= ps.costs[i - 1]);
                }
                // Exact sequence only where the cost is not tied with a neighbour.
                let tied = brute.iter().filter(|b| (b.0 - brute[i].0).abs() < 1e-9).count() > 1;
                if !tied || k == 50 {
                    prop_assert_eq!(&p.links, &brute[i].2);
                }
            }
        }
    }

    #[test]
    fn paths_are_connected_walks_with_consistent_times(seed in any::<u64>(), t_o in 0.0f64..2000.0) {
        let cfg = ScenarioConfig { seed, grid_shape: [3, 3], num_od: 6, bins: 6, ..ScenarioConfig::default() };
        let s = generate(&cfg).unwrap();
        for ps in &s.model.path_sets {
            for p in &ps.paths {
                let o = s.network.node_position(&ps.od.origin).unwrap();
                let d = s.network.node_position(&ps.od.destination).unwrap();
                prop_assert_eq!(s.network.link_ends(p.links[0]).0, o);
                prop_assert_eq!(s.network.link_ends(*p.links.last().unwrap()).1, d);
                for w in p.links.windows(2) {
                    prop_assert_eq!(s.network.link_ends(w[0]).1, s.network.link_ends(w[1]).0);
                }
                let arr = path_arrival_times(&s.network, &s.profile, &p.links, t_o);
                let walked = walk(&s.profile, &s.network, &p.links, t_o);
                prop_assert!((arr.total_travel_time() - (walked.last().unwrap() - t_o)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn theta_and_rho_are_stochastic(seed in any::<u64>()) {
        let cfg = ScenarioConfig { seed, grid_shape: [3, 3], num_od: 6, bins: 8, ..ScenarioConfig::default() };
        let s = generate(&cfg).unwrap();
        let idx = s.model.index;
        let theta = s.model.choice.theta.to_dense();
        for od in 0..idx.num_ods {
            if s.model.path_sets[od].paths.is_empty() {
                continue;
            }
            for bin in 0..idx.num_bins {
                let c = idx.od_time(od, bin);
                let sum: f64 = theta.iter().map(|row| row[c]).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
        let rho = s.model.weights.rho.to_dense();
        let g = s.profile.grid();
        for (od, ps) in s.model.path_sets.iter().enumerate() {
            for (k, p) in ps.paths.iter().enumerate() {
                for bin in 0..idx.num_bins {
                    let t_o = g.bin_start(bin);
                    let early = walk(&s.profile, &s.network, &p.links, t_o);
                    let late = walk(&s.profile, &s.network, &p.links, t_o + g.delta_t);
                    if early.last().unwrap().max(*late.last().unwrap()) > g.end() {
                        continue;
                    }
                    let col = idx.path_time(od, k, bin);
                    for &l in &p.links {
                        let sum: f64 = (0..idx.num_bins).map(|b| rho[idx.link_time(l, b)][col]).sum();
                        prop_assert!((sum - 1.0).abs() <= 1e-12, "od {} path {} bin {} link {}: {}", od, k, bin, l, sum);
                    }
                }
            }
        }
    }

    #[test]
    fn assignment_is_linear_and_deterministic(seed in any::<u64>()) {
        let cfg = ScenarioConfig { seed, grid_shape: [3, 3], num_od: 5, bins: 5, ..ScenarioConfig::default() };
        let s = generate(&cfg).unwrap();
        let again = build_model(&s.network, &s.profile, &s.ods, &cfg.assignment).unwrap();
        prop_assert_eq!(again.matrix.matrix(), s.model.matrix.matrix());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_q = s.model.matrix.n_q();
        let q1: Vec<f64> = (0..n_q).map(|_| rng.random_range(0.0..100.0)).collect();
        let q2: Vec<f64> = (0..n_q).map(|_| rng.random_range(0.0..100.0)).collect();
        let sum: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| a + b).collect();
        let (x1, x2, xs) = (s.model.matrix.apply(&q1).unwrap(), s.model.matrix.apply(&q2).unwrap(), s.model.matrix.apply(&sum).unwrap());
        for i in 0..xs.len() {
            prop_assert!((xs[i] - x1[i] - x2[i]).abs() <= 1e-10);
            prop_assert!(x1[i] >= 0.0);
        }
    }
}

/// Networks of at most five links: column mass equals Σ θ_k · |path k| for
/// columns whose every path finishes inside the horizon.
#[test]
fn column_mass_matches_path_walking_on_small_networks() {
    for seed in 0..40u64 {
        let nodes = 3 + (seed % 2) as usize;
        let net = random_graph(seed, nodes, 5.min(nodes * (nodes - 1)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = 6;
        let grid = TimeGrid::new(0.0, 60.0, bins).unwrap();
        let speeds: Vec<f64> = (0..net.num_links() * bins).map(|_| rng.random_range(2.0..20.0)).collect();
        let profile = SpeedProfile::new(grid, net.num_links(), speeds).unwrap();
        let mut ods = Vec::new();
        for o in 0..nodes {
            for d in 0..nodes {
                if o != d {
                    ods.push(OdPair::new(format!("v{o}"), format!("v{d}")).unwrap());
                }
            }
        }
        let cfg = AssignmentConfig { k: 3, alpha: 0.02, t_ref: None };
        let model = build_model(&net, &profile, &ods, &cfg).unwrap();
        let a = common::dense(&model.matrix);
        let mut checked = 0;
        for (od, ps) in model.path_sets.iter().enumerate() {
            for bin in 0..bins {
                let t_o = grid.bin_start(bin);
                let finishes = ps.paths.iter().all(|p| {
                    [t_o, t_o + 60.0].iter().all(|&t| *walk(&profile, &net, &p.links, t).last().unwrap() <= grid.end())
                });
                if !finishes {
                    continue;
                }
                let taus: Vec<f64> = ps.paths.iter().map(|p| walk(&profile, &net, &p.links, t_o).last().unwrap() - t_o).collect();
                let w: Vec<f64> = taus.iter().map(|t| (-cfg.alpha * t).exp()).collect();
                let total: f64 = w.iter().sum();
                let want: f64 = ps.paths.iter().zip(&w).map(|(p, wk)| wk / total * p.links.len() as f64).sum();
                let got: f64 = a.column(model.index.od_time(od, bin)).sum();
                assert!((got - want).abs() <= 1e-12 * want.max(1.0), "seed {seed} od {od} bin {bin}: {got} vs {want}");
                checked += 1;
            }
        }
        assert!(checked > 0 || model.path_sets.iter().all(|p| p.paths.is_empty()));
    }
}

