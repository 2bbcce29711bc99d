//! Road network model, speed profiles, link travel times and K-shortest paths.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::path::Path as FsPath;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AorError, Result};
use crate::table::{fmt_f64, Table, TableWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Highway,
    Expressway,
    Arterial,
    Secondary,
    Branch,
    Frontage,
    Ramp,
}

impl RoadClass {
    pub const ALL: [RoadClass; 7] = [
        RoadClass::Highway,
        RoadClass::Expressway,
        RoadClass::Arterial,
        RoadClass::Secondary,
        RoadClass::Branch,
        RoadClass::Frontage,
        RoadClass::Ramp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RoadClass::Highway => "highway",
            RoadClass::Expressway => "expressway",
            RoadClass::Arterial => "arterial",
            RoadClass::Secondary => "secondary",
            RoadClass::Branch => "branch",
            RoadClass::Frontage => "frontage",
            RoadClass::Ramp => "ramp",
        }
    }
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoadClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        RoadClass::ALL
            .iter()
            .copied()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown road class {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub road_class: Option<RoadClass>,
}

/// Directed road graph. Link positions are dense (`0..num_links`) and follow
/// construction order.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<Node>,
    node_index: HashMap<String, usize>,
    links: Vec<Link>,
    link_index: HashMap<String, usize>,
    link_ends: Vec<(usize, usize)>,
    out_links: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(nodes: Vec<Node>, links: Vec<Link>) -> Result<Network> {
        let mut node_index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.id.clone(), i).is_some() {
                return Err(AorError::Duplicate(format!("node {}", n.id)));
            }
        }
        let mut link_index = HashMap::with_capacity(links.len());
        let mut link_ends = Vec::with_capacity(links.len());
        let mut out_links = vec![Vec::new(); nodes.len()];
        for (i, l) in links.iter().enumerate() {
            if link_index.insert(l.id.clone(), i).is_some() {
                return Err(AorError::Duplicate(format!("link {}", l.id)));
            }
            if !(l.length_m > 0.0 && l.length_m.is_finite()) {
                return Err(AorError::Validation(format!(
                    "link {} has non-positive length {}",
                    l.id, l.length_m
                )));
            }
            if l.from == l.to {
                return Err(AorError::Validation(format!("link {} is a self-loop", l.id)));
            }
            let from = *node_index
                .get(&l.from)
                .ok_or_else(|| AorError::Reference(format!("link {} from node {}", l.id, l.from)))?;
            let to = *node_index
                .get(&l.to)
                .ok_or_else(|| AorError::Reference(format!("link {} to node {}", l.id, l.to)))?;
            link_ends.push((from, to));
            out_links[from].push(i);
        }
        Ok(Network {
            nodes,
            node_index,
            links,
            link_index,
            link_ends,
            out_links,
        })
    }

    pub fn from_tables(node_table: &Table, link_table: &Table) -> Result<Network> {
        node_table.require_columns(&["id"])?;
        link_table.require_columns(&["id", "from", "to", "length_m"])?;
        let nodes = node_table
            .rows()
            .map(|r| Ok(Node { id: r.str("id")?.to_string() }))
            .collect::<Result<Vec<_>>>()?;
        let links = link_table
            .rows()
            .map(|r| {
                let road_class = match r.opt("road_class") {
                    Some(s) => Some(s.parse::<RoadClass>().map_err(|e| r.error(e))?),
                    None => None,
                };
                Ok(Link {
                    id: r.str("id")?.to_string(),
                    from: r.str("from")?.to_string(),
                    to: r.str("to")?.to_string(),
                    length_m: r.parse("length_m")?,
                    road_class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(nodes, links)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, pos: usize) -> &Link {
        &self.links[pos]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn node_position(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn link_position(&self, id: &str) -> Option<usize> {
        self.link_index.get(id).copied()
    }

    /// `(from, to)` node positions of a link.
    pub fn link_ends(&self, pos: usize) -> (usize, usize) {
        self.link_ends[pos]
    }

    pub fn out_links(&self, node: usize) -> &[usize] {
        &self.out_links[node]
    }

    pub fn nodes_table(&self) -> String {
        let mut w = TableWriter::new(&["id"]);
        for n in &self.nodes {
            w.row([n.id.as_str()]);
        }
        w.finish()
    }

    pub fn links_table(&self) -> String {
        let mut w = TableWriter::new(&["id", "from", "to", "length_m", "road_class"]);
        for l in &self.links {
            w.row([
                l.id.clone(),
                l.from.clone(),
                l.to.clone(),
                fmt_f64(l.length_m),
                l.road_class.map(|c| c.to_string()).unwrap_or_default(),
            ]);
        }
        w.finish()
    }
}

pub fn load_network(node_file: &FsPath, link_file: &FsPath) -> Result<Network> {
    let nodes = Table::read_path(node_file)?;
    let links = Table::read_path(link_file)?;
    Network::from_tables(&nodes, &links)
}

/// Discretised analysis window. Bin `b` covers `[t_start + b·Δt, t_start + (b+1)·Δt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub delta_t: f64,
    pub num_bins: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, delta_t: f64, num_bins: usize) -> Result<TimeGrid> {
        if !(delta_t > 0.0 && delta_t.is_finite()) || !t_start.is_finite() {
            return Err(AorError::Validation(format!(
                "time grid needs finite start and positive resolution, got start {t_start}, delta_t {delta_t}"
            )));
        }
        if num_bins == 0 {
            return Err(AorError::Validation("time grid needs at least one bin".into()));
        }
        Ok(TimeGrid {
            t_start,
            delta_t,
            num_bins,
        })
    }

    pub fn end(&self) -> f64 {
        self.t_start + self.num_bins as f64 * self.delta_t
    }

    pub fn bin_start(&self, bin: usize) -> f64 {
        self.t_start + bin as f64 * self.delta_t
    }

    pub fn bin_end(&self, bin: usize) -> f64 {
        self.t_start + (bin + 1) as f64 * self.delta_t
    }

    /// Bin containing `t`, or `None` outside the horizon.
    pub fn bin_of(&self, t: f64) -> Option<usize> {
        if !(t >= self.t_start && t < self.end()) {
            return None;
        }
        let b = ((t - self.t_start) / self.delta_t).floor() as usize;
        // Guard against rounding at the upper bin edge.
        Some(if self.bin_start(b) > t { b - 1 } else { b.min(self.num_bins - 1) })
    }

    /// Bin containing `t`, clamped to the first/last bin outside the horizon.
    pub fn bin_clamped(&self, t: f64) -> (usize, bool) {
        match self.bin_of(t) {
            Some(b) => (b, false),
            None if t < self.t_start => (0, true),
            None => (self.num_bins - 1, true),
        }
    }
}

/// Per-link, per-bin speeds in metres per second, stored link-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    grid: TimeGrid,
    num_links: usize,
    speeds: Vec<f64>,
}

impl SpeedProfile {
    pub fn new(grid: TimeGrid, num_links: usize, speeds: Vec<f64>) -> Result<SpeedProfile> {
        if speeds.len() != num_links * grid.num_bins {
            return Err(AorError::Dimension(format!(
                "speed matrix has {} entries, expected {} links x {} bins",
                speeds.len(),
                num_links,
                grid.num_bins
            )));
        }
        if let Some(i) = speeds.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(AorError::Validation(format!(
                "speed at link {} bin {} is {} (must be positive)",
                i / grid.num_bins,
                i % grid.num_bins,
                speeds[i]
            )));
        }
        Ok(SpeedProfile {
            grid,
            num_links,
            speeds,
        })
    }

    /// Constant speed on every link and bin.
    pub fn uniform(grid: TimeGrid, num_links: usize, speed: f64) -> Result<SpeedProfile> {
        SpeedProfile::new(grid, num_links, vec![speed; num_links * grid.num_bins])
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_links(&self) -> usize {
        self.num_links
    }

    pub fn speed(&self, link: usize, bin: usize) -> f64 {
        self.speeds[link * self.grid.num_bins + bin]
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    /// Reads `link_id, bin, speed_mps` rows. Every link x bin must be present
    /// unless `impute` is set, in which case gaps take the link's mean speed.
    pub fn from_table(
        table: &Table,
        network: &Network,
        t_start: f64,
        delta_t: f64,
        impute: bool,
    ) -> Result<SpeedProfile> {
        table.require_columns(&["link_id", "bin", "speed_mps"])?;
        let mut entries = Vec::with_capacity(table.len());
        let mut num_bins = 0usize;
        for r in table.rows() {
            let link_id = r.str("link_id")?;
            let link = network
                .link_position(link_id)
                .ok_or_else(|| AorError::Reference(format!("speed row for link {link_id}")))?;
            let bin: usize = r.parse("bin")?;
            let v: f64 = match r.opt("speed_mps") {
                Some(_) => r.parse("speed_mps")?,
                None if impute => f64::NAN,
                None => return Err(r.error("missing speed value")),
            };
            if !impute && !(v > 0.0 && v.is_finite()) {
                return Err(r.error(format!("speed must be positive, got {v}")));
            }
            num_bins = num_bins.max(bin + 1);
            entries.push((link, bin, v, r.line()));
        }
        let grid = TimeGrid::new(t_start, delta_t, num_bins)?;
        let n = network.num_links();
        let mut speeds = vec![f64::NAN; n * num_bins];
        for (link, bin, v, line) in entries {
            let slot = &mut speeds[link * num_bins + bin];
            if !slot.is_nan() {
                return Err(AorError::Duplicate(format!(
                    "speed for link {} bin {bin} (line {line})",
                    network.link(link).id
                )));
            }
            *slot = v;
        }
        for l in 0..n {
            let row = &mut speeds[l * num_bins..(l + 1) * num_bins];
            let valid: Vec<f64> = row.iter().copied().filter(|v| *v > 0.0 && v.is_finite()).collect();
            if valid.len() == num_bins {
                continue;
            }
            if !impute || valid.is_empty() {
                return Err(AorError::Validation(format!(
                    "link {} has {} of {num_bins} valid speed bins",
                    network.link(l).id,
                    valid.len()
                )));
            }
            let mean = valid.iter().sum::<f64>() / valid.len() as f64;
            for v in row.iter_mut().filter(|v| !(**v > 0.0 && v.is_finite())) {
                *v = mean;
            }
        }
        SpeedProfile::new(grid, n, speeds)
    }

    pub fn to_table(&self, network: &Network) -> String {
        let mut w = TableWriter::new(&["link_id", "bin", "speed_mps"]);
        for l in 0..self.num_links {
            for b in 0..self.grid.num_bins {
                w.row([
                    network.link(l).id.clone(),
                    b.to_string(),
                    fmt_f64(self.speed(l, b)),
                ]);
            }
        }
        w.finish()
    }
}

pub fn load_speeds(
    path: &FsPath,
    network: &Network,
    t_start: f64,
    delta_t: f64,
    impute: bool,
) -> Result<SpeedProfile> {
    SpeedProfile::from_table(&Table::read_path(path)?, network, t_start, delta_t, impute)
}

/// Steady-state traversal time `d_l / v_l(t)` using the speed of the bin containing `t`.
pub fn link_travel_time(network: &Network, profile: &SpeedProfile, link: usize, t: f64) -> Result<f64> {
    let grid = profile.grid();
    let bin = grid.bin_of(t).ok_or(AorError::Horizon {
        t,
        start: grid.t_start,
        end: grid.end(),
    })?;
    Ok(network.link(link).length_m / profile.speed(link, bin))
}

/// Like [`link_travel_time`], but times outside the horizon reuse the nearest
/// bin's speed. The flag reports whether clamping happened.
pub fn link_travel_time_clamped(
    network: &Network,
    profile: &SpeedProfile,
    link: usize,
    t: f64,
) -> (f64, bool) {
    let (bin, clamped) = profile.grid().bin_clamped(t);
    (network.link(link).length_m / profile.speed(link, bin), clamped)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OdPair {
    pub origin: String,
    pub destination: String,
}

impl OdPair {
    pub fn new(origin: impl Into<String>, destination: impl Into<String>) -> Result<OdPair> {
        let (origin, destination) = (origin.into(), destination.into());
        if origin == destination {
            return Err(AorError::Validation(format!(
                "OD pair with identical origin and destination {origin}"
            )));
        }
        Ok(OdPair {
            origin,
            destination,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub od: OdPair,
    /// Link positions in travel order.
    pub links: Vec<usize>,
}

impl Path {
    pub fn contains(&self, link: usize) -> bool {
        self.links.contains(&link)
    }

    /// Checks endpoint chaining from origin to destination and that no link repeats.
    pub fn is_valid_walk(&self, network: &Network) -> bool {
        let (Some(o), Some(d)) = (
            network.node_position(&self.od.origin),
            network.node_position(&self.od.destination),
        ) else {
            return false;
        };
        if self.links.is_empty() {
            return false;
        }
        let mut seen = HashSet::new();
        let mut at = o;
        for &l in &self.links {
            let (from, to) = network.link_ends(l);
            if from != at || !seen.insert(l) {
                return false;
            }
            at = to;
        }
        at == d
    }

    pub fn link_ids<'a>(&self, network: &'a Network) -> Vec<&'a str> {
        self.links.iter().map(|&l| network.link(l).id.as_str()).collect()
    }
}

/// Candidate paths of one OD pair, ascending by reference travel time.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub od: OdPair,
    pub paths: Vec<Path>,
    /// Reference travel time of each path, seconds.
    pub costs: Vec<f64>,
    pub warning: Option<String>,
}

impl PathSet {
    pub fn empty(od: OdPair, warning: impl Into<String>) -> PathSet {
        PathSet {
            od,
            paths: Vec::new(),
            costs: Vec::new(),
            warning: Some(warning.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalTimes {
    /// Absolute entry time of each link followed by the exit time of the last link.
    pub times: Vec<f64>,
    /// Set when any lookup fell outside the horizon and reused an edge bin.
    pub clamped: bool,
}

impl ArrivalTimes {
    pub fn total_travel_time(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }
}

/// Walks the path from departure `t_o`, sampling each link's speed at the bin the
/// vehicle occupies when it enters that link.
pub fn path_arrival_times(
    network: &Network,
    profile: &SpeedProfile,
    links: &[usize],
    t_o: f64,
) -> ArrivalTimes {
    let mut times = Vec::with_capacity(links.len() + 1);
    let mut clamped = profile.grid().bin_of(t_o).is_none();
    let mut t = t_o;
    times.push(t);
    for &l in links {
        let (tt, c) = link_travel_time_clamped(network, profile, l, t);
        clamped |= c;
        t += tt;
        times.push(t);
    }
    ArrivalTimes { times, clamped }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on cost, then on node position for deterministic pops.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(
    network: &Network,
    weights: &[f64],
    source: usize,
    target: usize,
    banned_nodes: &[bool],
    banned_links: &HashSet<usize>,
) -> Option<Vec<usize>> {
    let n = network.num_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut via: Vec<Option<usize>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry { cost: 0.0, node: source });
    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        if node == target {
            break;
        }
        for &l in network.out_links(node) {
            if banned_links.contains(&l) {
                continue;
            }
            let (_, to) = network.link_ends(l);
            if banned_nodes[to] {
                continue;
            }
            let next = cost + weights[l];
            if next < dist[to] {
                dist[to] = next;
                via[to] = Some(l);
                heap.push(HeapEntry { cost: next, node: to });
            } else if next == dist[to] && via[to].is_some() {
                // Equal cost: keep the lexicographically smaller link-id sequence.
                let mut cand = trace(network, &via, source, node);
                cand.push(l);
                let current = trace(network, &via, source, to);
                if id_sequence_cmp(network, &cand, &current) == Ordering::Less {
                    via[to] = Some(l);
                }
            }
        }
    }
    if !dist[target].is_finite() {
        return None;
    }
    Some(trace(network, &via, source, target))
}

fn trace(network: &Network, via: &[Option<usize>], source: usize, target: usize) -> Vec<usize> {
    let mut links = Vec::new();
    let mut at = target;
    while at != source {
        let l = via[at].expect("reached node has a predecessor");
        links.push(l);
        at = network.link_ends(l).0;
    }
    links.reverse();
    links
}

fn id_sequence_cmp(network: &Network, a: &[usize], b: &[usize]) -> Ordering {
    let ia = a.iter().map(|&l| network.link(l).id.as_str());
    let ib = b.iter().map(|&l| network.link(l).id.as_str());
    ia.cmp(ib)
}

fn path_cost(weights: &[f64], links: &[usize]) -> f64 {
    links.iter().fold(0.0, |acc, &l| acc + weights[l])
}

fn compare_candidates(network: &Network, a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| id_sequence_cmp(network, &a.1, &b.1))
}

/// Yen's loopless K-shortest paths with edge weights taken as travel times at `t_ref`.
///
/// Equal-cost candidates are ordered by their link-id sequence. A disconnected
/// pair yields an empty set carrying a warning.
pub fn k_shortest_paths(
    network: &Network,
    profile: &SpeedProfile,
    od: &OdPair,
    k: usize,
    t_ref: f64,
) -> Result<PathSet> {
    if k == 0 {
        return Err(AorError::Validation("k must be at least 1".into()));
    }
    let source = network
        .node_position(&od.origin)
        .ok_or_else(|| AorError::Reference(format!("OD origin {}", od.origin)))?;
    let target = network
        .node_position(&od.destination)
        .ok_or_else(|| AorError::Reference(format!("OD destination {}", od.destination)))?;
    let weights: Vec<f64> = (0..network.num_links())
        .map(|l| link_travel_time_clamped(network, profile, l, t_ref).0)
        .collect();

    let no_nodes = vec![false; network.num_nodes()];
    let Some(first) = dijkstra(network, &weights, source, target, &no_nodes, &HashSet::new()) else {
        return Ok(PathSet::empty(
            od.clone(),
            format!("no path from {} to {}", od.origin, od.destination),
        ));
    };

    let mut accepted: Vec<(f64, Vec<usize>)> = vec![(path_cost(&weights, &first), first)];
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    seen.insert(accepted[0].1.clone());
    let mut candidates: Vec<(f64, Vec<usize>)> = Vec::new();

    while accepted.len() < k {
        let prev = accepted[accepted.len() - 1].1.clone();
        let mut root_nodes = vec![source];
        for i in 0..prev.len() {
            let spur_node = root_nodes[i];
            let root = &prev[..i];
            let banned_links: HashSet<usize> = accepted
                .iter()
                .filter(|(_, p)| p.len() > i && &p[..i] == root)
                .map(|(_, p)| p[i])
                .collect();
            let mut banned_nodes = vec![false; network.num_nodes()];
            for &n in &root_nodes[..i] {
                banned_nodes[n] = true;
            }
            if let Some(spur) =
                dijkstra(network, &weights, spur_node, target, &banned_nodes, &banned_links)
            {
                let mut full = root.to_vec();
                full.extend(spur);
                if seen.insert(full.clone()) {
                    candidates.push((path_cost(&weights, &full), full));
                }
            }
            root_nodes.push(network.link_ends(prev[i]).1);
        }
        if candidates.is_empty() {
            break;
        }
        let best = (0..candidates.len())
            .min_by(|&a, &b| compare_candidates(network, &candidates[a], &candidates[b]))
            .expect("non-empty candidates");
        accepted.push(candidates.swap_remove(best));
    }

    let (costs, paths) = accepted
        .into_iter()
        .map(|(c, links)| {
            (
                c,
                Path {
                    od: od.clone(),
                    links,
                },
            )
        })
        .unzip();
    Ok(PathSet {
        od: od.clone(),
        paths,
        costs,
        warning: None,
    })
}
