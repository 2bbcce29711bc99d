//! Seeded lattice scenarios: network, speeds, demand, true flows and sparse
//! observations, generated through the model's own forward map.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{build_model, AssignmentConfig, AssignmentModel};
use crate::error::{AorError, Result};
use crate::network::{load_network, load_speeds, Link, Network, Node, OdPair, RoadClass, SpeedProfile, TimeGrid};
use crate::recovery::{link_series_table, od_series_table, Observations};
use crate::table::{write_text, Table, TableWriter};
use crate::tuning::TrainingSample;

pub const NODES_FILE: &str = "nodes.csv";
pub const LINKS_FILE: &str = "links.csv";
pub const SPEEDS_FILE: &str = "speeds.csv";
pub const ODS_FILE: &str = "od_pairs.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const FLOW_TRUTH_FILE: &str = "flow_true.csv";
pub const DEMAND_TRUTH_FILE: &str = "demand_true.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Lattice rows × columns.
    pub grid_shape: [usize; 2],
    pub link_length_m: f64,
    pub num_od: usize,
    /// Vehicles per departure bin.
    pub demand_range: [f64; 2],
    pub speed_range: [f64; 2],
    pub bins: usize,
    pub delta_t: f64,
    pub t_start: f64,
    pub obs_fraction: f64,
    /// Sample observed rows with probability proportional to link flow.
    pub obs_bias: bool,
    pub noise_std: f64,
    /// Percentage perturbation of the speeds that generate the truth.
    pub mismatch_pct: f64,
    pub assignment: AssignmentConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            grid_shape: [6, 6],
            link_length_m: 500.0,
            num_od: 40,
            demand_range: [10.0, 100.0],
            speed_range: [8.0, 16.0],
            bins: 12,
            delta_t: 300.0,
            t_start: 0.0,
            obs_fraction: 0.0232,
            obs_bias: false,
            noise_std: 0.0,
            mismatch_pct: 0.0,
            assignment: AssignmentConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let [r, c] = self.grid_shape;
        if r == 0 || c == 0 || r * c < 2 {
            return Err(AorError::Validation(format!("grid {r}x{c} needs at least two nodes")));
        }
        let ordered = |name: &str, [lo, hi]: [f64; 2], strict_lo: bool| -> Result<()> {
            let lo_ok = if strict_lo { lo > 0.0 } else { lo >= 0.0 };
            if !(lo_ok && lo <= hi && hi.is_finite()) {
                return Err(AorError::Validation(format!("{name} [{lo}, {hi}] is not an ordered valid range")));
            }
            Ok(())
        };
        ordered("demand_range", self.demand_range, false)?;
        ordered("speed_range", self.speed_range, true)?;
        if !(self.obs_fraction > 0.0 && self.obs_fraction <= 1.0) {
            return Err(AorError::Validation(format!("obs_fraction must be in (0, 1], got {}", self.obs_fraction)));
        }
        if self.bins == 0 || !(self.delta_t > 0.0) || !(self.link_length_m > 0.0) {
            return Err(AorError::Validation("bins, delta_t and link length must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.mismatch_pct >= 0.0 && self.mismatch_pct < 100.0) {
            return Err(AorError::Validation("noise_std must be >= 0 and mismatch_pct in [0, 100)".into()));
        }
        if self.num_od == 0 {
            return Err(AorError::Validation("num_od must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t_start, self.delta_t, self.bins)
    }

    /// Number of observed rows for a network with `num_links` links.
    pub fn observation_count(&self, num_links: usize) -> usize {
        ((self.obs_fraction * (num_links * self.bins) as f64).round() as usize).clamp(1, num_links * self.bins)
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: Network,
    /// Speeds visible to recovery.
    pub profile: SpeedProfile,
    pub ods: Vec<OdPair>,
    /// Assignment built from `profile`.
    pub model: AssignmentModel,
    pub q_true: Vec<f64>,
    pub x_true: Vec<f64>,
    pub observations: Observations,
    pub label: String,
}

impl Scenario {
    pub fn training_sample(&self) -> TrainingSample {
        TrainingSample {
            a: self.model.matrix.clone(),
            obs: self.observations.clone(),
            label: self.label.clone(),
        }
    }
}

fn node_id(r: usize, c: usize) -> String {
    format!("n{r}_{c}")
}

fn line_class(i: usize, n: usize) -> RoadClass {
    if i == 0 || i + 1 == n {
        RoadClass::Highway
    } else if i.is_multiple_of(2) {
        RoadClass::Arterial
    } else {
        RoadClass::Secondary
    }
}

/// Lattice with a pair of opposing links between neighbouring nodes.
/// Border lines are highways, interior lines alternate arterial/secondary.
pub fn lattice(rows: usize, cols: usize, length_m: f64) -> Result<Network> {
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(Node { id: node_id(r, c) });
        }
    }
    let mut links = Vec::new();
    let mut add = |a: (usize, usize), b: (usize, usize), class: RoadClass| {
        for (u, v) in [(a, b), (b, a)] {
            links.push(Link {
                id: format!("{}-{}", node_id(u.0, u.1), node_id(v.0, v.1)),
                from: node_id(u.0, u.1),
                to: node_id(v.0, v.1),
                length_m,
                road_class: Some(class),
            });
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                add((r, c), (r, c + 1), line_class(r, rows));
            }
            if r + 1 < rows {
                add((r, c), (r + 1, c), line_class(c, cols));
            }
        }
    }
    Network::new(nodes, links)
}

fn sample_ods(network: &Network, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<OdPair>> {
    let n = network.num_nodes();
    if count > n * (n - 1) {
        return Err(AorError::Domain(format!("{count} distinct OD pairs requested from {n} nodes")));
    }
    let mut seen = HashSet::new();
    let mut ods = Vec::with_capacity(count);
    while ods.len() < count {
        let o = rng.random_range(0..n);
        let d = rng.random_range(0..n);
        if o != d && seen.insert((o, d)) {
            ods.push(OdPair::new(network.nodes()[o].id.clone(), network.nodes()[d].id.clone())?);
        }
    }
    Ok(ods)
}

fn structure_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sample_rng(seed: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample + 1);
    rng
}

fn sample_observations(
    config: &ScenarioConfig,
    x_true: &[f64],
    num_links: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Observations> {
    let n_rows = x_true.len();
    let count = config.observation_count(num_links);
    let mut rows: Vec<usize> = if config.obs_bias {
        let totals: Vec<f64> = (0..num_links)
            .map(|l| x_true[l * config.bins..(l + 1) * config.bins].iter().sum())
            .collect();
        let mean = totals.iter().sum::<f64>() / num_links as f64;
        // Small floor so unused links stay eligible when the budget exceeds the used ones.
        let floor = 1e-6 * mean.max(1.0);
        index::sample_weighted(rng, n_rows, |r| totals[r / config.bins] + floor, count)
            .map_err(|e| AorError::Domain(format!("weighted observation sampling failed: {e}")))?
            .into_vec()
    } else {
        index::sample(rng, n_rows, count).into_vec()
    };
    rows.sort_unstable();
    let noise = if config.noise_std > 0.0 {
        Some(Normal::new(0.0, config.noise_std).map_err(|e| AorError::Validation(e.to_string()))?)
    } else {
        None
    };
    let x0 = rows
        .iter()
        .map(|&r| match &noise {
            Some(n) => (x_true[r] + n.sample(rng)).max(0.0),
            None => x_true[r],
        })
        .collect();
    Observations::links_only(rows, x0)
}

fn draw_speeds(config: &ScenarioConfig, num_links: usize, rng: &mut ChaCha8Rng) -> Result<SpeedProfile> {
    let [lo, hi] = config.speed_range;
    let speeds = (0..num_links * config.bins).map(|_| rng.random_range(lo..=hi)).collect();
    SpeedProfile::new(config.grid()?, num_links, speeds)
}

fn generate_with(config: &ScenarioConfig, network: &Network, ods: &[OdPair], sample: u64) -> Result<Scenario> {
    let mut rng = sample_rng(config.seed, sample);
    let profile = draw_speeds(config, network.num_links(), &mut rng)?;
    let model = build_model(network, &profile, ods, &config.assignment)?;
    let [lo, hi] = config.demand_range;
    let q_true: Vec<f64> = (0..model.index.num_cols()).map(|_| rng.random_range(lo..=hi)).collect();
    let x_true = if config.mismatch_pct > 0.0 {
        let scale = config.mismatch_pct / 100.0;
        let perturbed: Vec<f64> = profile
            .speeds()
            .iter()
            .map(|v| v * (1.0 + scale * rng.random_range(-1.0..=1.0)))
            .collect();
        let truth_profile = SpeedProfile::new(*profile.grid(), network.num_links(), perturbed)?;
        let truth_model = build_model(network, &truth_profile, ods, &config.assignment)?;
        truth_model.matrix.apply(&q_true)?
    } else {
        model.matrix.apply(&q_true)?
    };
    let observations = sample_observations(config, &x_true, network.num_links(), &mut rng)?;
    Ok(Scenario {
        network: network.clone(),
        profile,
        ods: ods.to_vec(),
        model,
        q_true,
        x_true,
        observations,
        label: format!("sample-{sample}"),
    })
}

fn structure(config: &ScenarioConfig) -> Result<(Network, Vec<OdPair>)> {
    config.validate()?;
    let [rows, cols] = config.grid_shape;
    let network = lattice(rows, cols, config.link_length_m)?;
    let ods = sample_ods(&network, config.num_od, &mut structure_rng(config.seed))?;
    Ok((network, ods))
}

pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    let (network, ods) = structure(config)?;
    generate_with(config, &network, &ods, 0)
}

/// `count` scenarios sharing the network and OD list, with independently
/// seeded speeds, demands and observations.
pub fn split_samples(config: &ScenarioConfig, count: usize) -> Result<Vec<Scenario>> {
    if count == 0 {
        return Err(AorError::Validation("sample count must be at least 1".into()));
    }
    let (network, ods) = structure(config)?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_with(config, &network, &ods, i))
        .collect()
}

pub fn ods_table(ods: &[OdPair]) -> String {
    let mut w = TableWriter::new(&["od_index", "origin", "destination"]);
    for (i, od) in ods.iter().enumerate() {
        w.row([i.to_string(), od.origin.clone(), od.destination.clone()]);
    }
    w.finish()
}

pub fn read_ods(path: &Path) -> Result<Vec<OdPair>> {
    let t = Table::read_path(path)?;
    t.require_columns(&["od_index", "origin", "destination"])?;
    let mut ods = Vec::with_capacity(t.len());
    for row in t.rows() {
        let i: usize = row.parse("od_index")?;
        if i != ods.len() {
            return Err(row.error(format!("expected od_index {}, found {i}", ods.len())));
        }
        ods.push(OdPair::new(row.str("origin")?, row.str("destination")?).map_err(|e| row.error(e.to_string()))?);
    }
    Ok(ods)
}

/// Writes the seven scenario data files into `dir`.
pub fn write_scenario(dir: &Path, s: &Scenario) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| AorError::io(dir, e))?;
    let index = &s.model.index;
    let files = [
        (NODES_FILE, s.network.nodes_table()),
        (LINKS_FILE, s.network.links_table()),
        (SPEEDS_FILE, s.profile.to_table(&s.network)),
        (ODS_FILE, ods_table(&s.ods)),
        (OBSERVATIONS_FILE, s.observations.flows_table(&s.network, index)),
        (FLOW_TRUTH_FILE, link_series_table(&s.x_true, &s.network, index, "flow")),
        (DEMAND_TRUTH_FILE, od_series_table(&s.q_true, index, "demand")),
    ];
    for (name, text) in &files {
        write_text(&dir.join(name), text)?;
    }
    Ok(files.iter().map(|(n, _)| n.to_string()).collect())
}

/// Scenario inputs read back from disk; truth files are optional.
#[derive(Debug, Clone)]
pub struct ScenarioFiles {
    pub network: Network,
    pub profile: SpeedProfile,
    pub ods: Vec<OdPair>,
    pub observations: Table,
    pub flow_truth: Option<Table>,
    pub demand_truth: Option<Table>,
}

fn optional_table(path: &Path) -> Result<Option<Table>> {
    if path.exists() {
        Table::read_path(path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn read_scenario(dir: &Path, t_start: f64, delta_t: f64) -> Result<ScenarioFiles> {
    let network = load_network(&dir.join(NODES_FILE), &dir.join(LINKS_FILE))?;
    let profile = load_speeds(&dir.join(SPEEDS_FILE), &network, t_start, delta_t, true)?;
    let ods = read_ods(&dir.join(ODS_FILE))?;
    let observations = Table::read_path(&dir.join(OBSERVATIONS_FILE))?;
    Ok(ScenarioFiles {
        flow_truth: optional_table(&dir.join(FLOW_TRUTH_FILE))?,
        demand_truth: optional_table(&dir.join(DEMAND_TRUTH_FILE))?,
        network,
        profile,
        ods,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            grid_shape: [3, 3],
            num_od: 5,
            bins: 4,
            obs_fraction: 0.25,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn lattice_shape() {
        let net = lattice(6, 6, 500.0).unwrap();
        assert_eq!(net.num_nodes(), 36);
        assert_eq!(net.num_links(), 120);
        assert!(net.links().iter().all(|l| l.road_class.is_some()));
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.q_true, b.q_true);
        assert_eq!(a.x_true, b.x_true);
        assert_eq!(a.observations, b.observations);
        assert_eq!(a.profile.speeds(), b.profile.speeds());
    }

    #[test]
    fn truth_is_forward_map() {
        let s = generate(&small()).unwrap();
        let x = s.model.matrix.apply(&s.q_true).unwrap();
        for (u, v) in x.iter().zip(&s.x_true) {
            assert!((u - v).abs() <= 1e-10);
        }
    }

    #[test]
    fn full_noiseless_observation() {
        let cfg = ScenarioConfig {
            obs_fraction: 1.0,
            ..small()
        };
        let s = generate(&cfg).unwrap();
        assert_eq!(s.observations.x0(), &s.x_true[..]);
    }

    #[test]
    fn observation_count_and_uniqueness() {
        for bias in [false, true] {
            let cfg = ScenarioConfig {
                obs_bias: bias,
                ..small()
            };
            let s = generate(&cfg).unwrap();
            let rows = s.observations.link_rows();
            let expect = (0.25 * (s.network.num_links() * 4) as f64).round() as usize;
            assert!(rows.len().abs_diff(expect) <= 1);
            let set: HashSet<_> = rows.iter().collect();
            assert_eq!(set.len(), rows.len());
        }
    }

    #[test]
    fn noise_is_truncated_at_zero() {
        let cfg = ScenarioConfig {
            noise_std: 500.0,
            obs_fraction: 1.0,
            ..small()
        };
        let s = generate(&cfg).unwrap();
        assert!(s.observations.x0().iter().all(|v| *v >= 0.0));
        assert_ne!(s.observations.x0(), &s.x_true[..]);
    }

    #[test]
    fn mismatch_changes_truth_only() {
        let base = generate(&small()).unwrap();
        let cfg = ScenarioConfig {
            mismatch_pct: 20.0,
            ..small()
        };
        let m = generate(&cfg).unwrap();
        assert_eq!(base.profile.speeds(), m.profile.speeds());
        assert_eq!(base.q_true, m.q_true);
        assert_ne!(base.x_true, m.x_true);
    }

    #[test]
    fn samples_share_structure() {
        let s = split_samples(&small(), 3).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x.ods == s[0].ods && x.model.index == s[0].model.index));
        assert_ne!(s[0].q_true, s[1].q_true);
        assert_eq!(split_samples(&small(), 1).unwrap().len(), 1);
        assert!(split_samples(&small(), 0).is_err());
    }

    #[test]
    fn validation() {
        let bad = ScenarioConfig {
            obs_fraction: 0.0,
            ..small()
        };
        assert!(generate(&bad).is_err());
        let bad = ScenarioConfig {
            demand_range: [5.0, 1.0],
            ..small()
        };
        assert!(generate(&bad).is_err());
        let bad = ScenarioConfig {
            grid_shape: [1, 2],
            num_od: 3,
            ..small()
        };
        assert!(matches!(generate(&bad), Err(AorError::Domain(_))));
    }

    #[test]
    fn files_round_trip() {
        let s = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let names = write_scenario(dir.path(), &s).unwrap();
        assert_eq!(names.len(), 7);
        let back = read_scenario(dir.path(), 0.0, 300.0).unwrap();
        assert_eq!(back.ods, s.ods);
        assert_eq!(back.profile.speeds(), s.profile.speeds());
        assert_eq!(back.network.num_links(), s.network.num_links());
        let (rows, x0) = Observations::flows_from_table(&back.observations, &back.network, &s.model.index).unwrap();
        assert_eq!(rows, s.observations.link_rows());
        assert_eq!(x0, s.observations.x0());
    }
}
