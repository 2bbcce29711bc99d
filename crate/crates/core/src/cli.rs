//! Command-line front end: `generate`, `build`, `recover`, `tune`, `evaluate`.
//!
//! Every command reads an optional TOML run configuration; flags override
//! their config keys. Data outputs are deterministic for a given seed and
//! configuration. Timestamps and wall-clock timings go only into
//! `manifest.toml`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{build_model, AssignmentModel};
use crate::error::{AorError, Result};
use crate::lagrange::{lr_solve, LrConfig};
use crate::metrics::{evaluate, FlowSeries, MetricReport};
use crate::network::{load_network, Network};
use crate::recovery::{link_series_from_table, recover, CgOptions, Hyperparameters, Observations};
use crate::synthgen::{
    generate, read_scenario, split_samples, write_scenario, ScenarioConfig, ScenarioFiles, FLOW_TRUTH_FILE,
    LINKS_FILE, NODES_FILE,
};
use crate::table::{fmt_f64, read_text, write_text, Table, TableWriter};
use crate::tuning::{family_loss, random_init, sgd_tune, SgdConfig, TrainingSample};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DEMAND_PRIOR_FILE: &str = "demand_prior.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Use Lagrangian relaxation in `recover`; `--no-lr` turns it off.
    pub use_lr: bool,
    /// Scenario layout, time grid and assignment settings.
    pub scenario: ScenarioConfig,
    pub hyper: Hyperparameters,
    pub solver: CgOptions,
    pub lr: LrConfig,
    pub sgd: SgdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            use_lr: true,
            scenario: ScenarioConfig::default(),
            hyper: Hyperparameters::default(),
            solver: CgOptions::default(),
            lr: LrConfig::default(),
            sgd: SgdConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| AorError::parse(source, 0, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&read_text(path)?, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serialises")
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn apply(&mut self, flags: &CommonFlags) {
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(o) = &flags.out {
            self.out = o.clone();
        }
        if let Some(t) = flags.tol {
            self.solver.tol = t;
        }
        if let Some(m) = flags.max_iter {
            self.solver.max_iter = Some(m);
        }
        // One seed drives every random stream.
        self.scenario.seed = self.seed;
        self.sgd.seed = self.seed;
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonFlags {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Relative CG tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(name = "aor", version, about = "Analytical traffic-flow recovery on sparse observations")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario (or a family of samples).
    Generate {
        /// Number of samples sharing network and OD list.
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Build the assignment matrix for a scenario directory.
    Build { scenario: PathBuf },
    /// Recover link flows and OD demands for a scenario directory.
    Recover {
        scenario: PathBuf,
        /// Plain unconstrained solve instead of Lagrangian relaxation.
        #[arg(long)]
        no_lr: bool,
    },
    /// Tune hyperparameters by SGD over sample directories.
    Tune {
        #[arg(required = true)]
        samples: Vec<PathBuf>,
    },
    /// Score estimated flows against ground truth.
    Evaluate {
        /// `link_id,bin,flow_est` table.
        #[arg(long)]
        estimates: PathBuf,
        /// `link_id,bin,flow` table.
        #[arg(long)]
        truth: PathBuf,
        /// Directory holding the network tables.
        #[arg(long)]
        network: PathBuf,
    },
}

#[derive(Debug, Default, Serialize)]
struct Manifest {
    command: String,
    version: String,
    seed: u64,
    config_sha256: String,
    timestamp_unix: u64,
    outputs: Vec<String>,
    timing_s: toml::Table,
    details: toml::Table,
    diagnostics: Vec<String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig) -> Manifest {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config_sha256: cfg.hash(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            ..Manifest::default()
        }
    }

    fn time(&mut self, key: &str, start: Instant) {
        self.timing_s.insert(key.into(), start.elapsed().as_secs_f64().into());
    }

    fn detail(&mut self, key: &str, v: impl Into<toml::Value>) {
        self.details.insert(key.into(), v.into());
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest serialises");
        write_text(&dir.join(MANIFEST_FILE), &text)
    }
}

struct Outputs<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Result<Outputs<'a>> {
        std::fs::create_dir_all(dir).map_err(|e| AorError::io(dir, e))?;
        Ok(Outputs {
            dir,
            names: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        write_text(&self.dir.join(name), text)?;
        self.names.push(name.into());
        Ok(())
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(AorError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ))
    }
}

fn cmd_generate(cfg: &RunConfig, samples: usize) -> Result<()> {
    cfg.scenario.validate()?;
    let mut out = Outputs::new(&cfg.out)?;
    let mut manifest = Manifest::new("generate", cfg);
    let start = Instant::now();
    if samples <= 1 {
        let s = generate(&cfg.scenario)?;
        out.names = write_scenario(&cfg.out, &s)?;
        manifest.detail("links", s.network.num_links() as i64);
        manifest.detail("od_pairs", s.ods.len() as i64);
        manifest.detail("observed_rows", s.observations.num_observed() as i64);
        manifest.diagnostics.extend(s.model.warnings.iter().cloned());
    } else {
        for (i, s) in split_samples(&cfg.scenario, samples)?.iter().enumerate() {
            let name = format!("sample_{i:02}");
            for f in write_scenario(&cfg.out.join(&name), s)? {
                out.names.push(format!("{name}/{f}"));
            }
        }
        manifest.detail("samples", samples as i64);
    }
    manifest.time("generate", start);
    manifest.outputs = out.names;
    manifest.write(&cfg.out)
}

fn load_inputs(dir: &Path, cfg: &RunConfig) -> Result<(ScenarioFiles, AssignmentModel, Observations, f64)> {
    require_dir(dir)?;
    let files = read_scenario(dir, cfg.scenario.t_start, cfg.scenario.delta_t)?;
    let start = Instant::now();
    let model = build_model(&files.network, &files.profile, &files.ods, &cfg.scenario.assignment)?;
    let build_s = start.elapsed().as_secs_f64();
    let (rows, x0) = Observations::flows_from_table(&files.observations, &files.network, &model.index)?;
    let prior = dir.join(DEMAND_PRIOR_FILE);
    let (cols, q0) = if prior.exists() {
        Observations::demands_from_table(&Table::read_path(&prior)?, &model.index)?
    } else {
        (Vec::new(), Vec::new())
    };
    Ok((files, model, Observations::new(rows, x0, cols, q0)?, build_s))
}

fn paths_table(model: &AssignmentModel, network: &Network) -> String {
    let mut w = TableWriter::new(&["od_index", "rank", "cost_s", "links"]);
    for (o, ps) in model.path_sets.iter().enumerate() {
        for (k, (p, c)) in ps.paths.iter().zip(&ps.costs).enumerate() {
            w.row([o.to_string(), k.to_string(), fmt_f64(*c), p.link_ids(network).join(" ")]);
        }
    }
    w.finish()
}

fn cmd_build(cfg: &RunConfig, scenario: &Path) -> Result<()> {
    require_dir(scenario)?;
    let files = read_scenario(scenario, cfg.scenario.t_start, cfg.scenario.delta_t)?;
    let start = Instant::now();
    let model = build_model(&files.network, &files.profile, &files.ods, &cfg.scenario.assignment)?;
    let mut manifest = Manifest::new("build", cfg);
    manifest.time("build", start);
    let mut out = Outputs::new(&cfg.out)?;
    out.write("assignment.coo", &model.matrix.matrix().to_coo_text())?;
    out.write("index_map.csv", &model.index.to_table(&files.network))?;
    out.write("paths.csv", &paths_table(&model, &files.network))?;
    manifest.detail("n_x", model.matrix.n_x() as i64);
    manifest.detail("n_q", model.matrix.n_q() as i64);
    manifest.detail("nnz", model.matrix.matrix().nnz() as i64);
    manifest.detail("assignment_sha256", model.matrix.provenance());
    manifest.diagnostics = model.warnings.clone();
    manifest.outputs = out.names;
    manifest.write(&cfg.out)
}

fn metric_outputs(out: &mut Outputs<'_>, report: &MetricReport, network: &Network) -> Result<()> {
    out.write("metrics_summary.csv", &report.summary_table())?;
    out.write("metrics_links.csv", &report.links_table(network))?;
    out.write("mae_histogram.csv", &report.histogram_table())
}

fn cmd_recover(cfg: &RunConfig, scenario: &Path) -> Result<()> {
    cfg.hyper.validate()?;
    let (files, model, obs, build_s) = load_inputs(scenario, cfg)?;
    let mut manifest = Manifest::new("recover", cfg);
    manifest.timing_s.insert("build".into(), build_s.into());
    let mut out = Outputs::new(&cfg.out)?;
    let start = Instant::now();
    let result = if cfg.use_lr {
        let lr = lr_solve(&model.matrix, &obs, cfg.hyper, &cfg.lr, &cfg.solver)?;
        out.write("lr_trajectory.csv", &lr.trajectory_table())?;
        manifest.detail("lr_iterations", lr.trajectory.len() as i64);
        manifest.detail("lr_stopped_early", lr.stopped_early);
        manifest.detail("best_objective", lr.best_objective);
        if let Some(f) = &lr.failure {
            manifest.diagnostics.push(f.clone());
        }
        lr.result
    } else {
        recover(&model.matrix, &obs, cfg.hyper, &cfg.solver)?
    };
    manifest.time("solve", start);
    manifest.detail("mode", if cfg.use_lr { "lr" } else { "unconstrained" });
    manifest.detail("cg_iterations", result.cg_iterations as i64);
    manifest.detail("residual_norm", result.residual_norm);
    manifest.detail("converged", result.converged);
    manifest.detail("negative_x", result.clamp_diagnostics.negative_x as i64);
    manifest.detail("negative_q", result.clamp_diagnostics.negative_q as i64);
    manifest.diagnostics.extend(model.warnings.iter().cloned());
    out.write("flow_est.csv", &result.flows_table(&files.network, &model.index))?;
    out.write("demand_est.csv", &result.demands_table(&model.index))?;
    if let Some(truth) = &files.flow_truth {
        let x_true = link_series_from_table(truth, &files.network, &model.index, "flow")?;
        let series = FlowSeries::new(x_true, result.x.clone(), model.index.num_bins)?;
        let report = evaluate(&series, &files.network)?;
        manifest.detail("wrme", report.wrme);
        manifest.diagnostics.extend(report.diagnostics.iter().cloned());
        metric_outputs(&mut out, &report, &files.network)?;
    }
    manifest.outputs = out.names;
    manifest.write(&cfg.out)?;
    if !result.converged {
        return Err(AorError::NonConvergence(format!(
            "solver stopped with residual {:e}; outputs written to {}",
            result.residual_norm,
            cfg.out.display()
        )));
    }
    Ok(())
}

fn cmd_tune(cfg: &RunConfig, dirs: &[PathBuf]) -> Result<()> {
    cfg.sgd.validate()?;
    let mut samples = Vec::with_capacity(dirs.len());
    for d in dirs {
        let (_, model, obs, _) = load_inputs(d, cfg)?;
        samples.push(TrainingSample {
            a: model.matrix,
            obs,
            label: d.display().to_string(),
        });
    }
    let init = random_init(cfg.seed);
    let start = Instant::now();
    let outcome = sgd_tune(&samples, &cfg.sgd, init)?;
    let mut manifest = Manifest::new("tune", cfg);
    manifest.time("tune", start);
    let mut out = Outputs::new(&cfg.out)?;
    out.write("sgd_trajectory.csv", &outcome.trajectory_table())?;
    let tuned = toml::to_string(&outcome.hyper).expect("hyperparameters serialise");
    out.write("hyperparameters.toml", &tuned)?;
    let before = family_loss(&samples, init, &cfg.sgd.cg)?;
    let after = family_loss(&samples, outcome.hyper, &cfg.sgd.cg)?;
    manifest.detail("family_loss_init", before);
    manifest.detail("family_loss_final", after);
    manifest.diagnostics = outcome.diagnostics;
    manifest.outputs = out.names;
    manifest.write(&cfg.out)
}

fn cmd_evaluate(cfg: &RunConfig, estimates: &Path, truth: &Path, network_dir: &Path) -> Result<()> {
    let network = load_network(&network_dir.join(NODES_FILE), &network_dir.join(LINKS_FILE))?;
    let truth_t = Table::read_path(truth)?;
    let est_t = Table::read_path(estimates)?;
    let num_bins = max_bin(&truth_t)? + 1;
    if max_bin(&est_t)? + 1 != num_bins {
        return Err(AorError::Validation("estimate and truth tables cover different bins".into()));
    }
    let index = crate::assignment::FlatIndex {
        num_links: network.num_links(),
        num_ods: 0,
        paths_per_od: 1,
        num_bins,
    };
    let x_true = link_series_from_table(&truth_t, &network, &index, "flow")?;
    let x_est = link_series_from_table(&est_t, &network, &index, "flow_est")?;
    let report = evaluate(&FlowSeries::new(x_true, x_est, num_bins)?, &network)?;
    let mut manifest = Manifest::new("evaluate", cfg);
    manifest.detail("wrme", report.wrme);
    manifest.diagnostics = report.diagnostics.clone();
    let mut out = Outputs::new(&cfg.out)?;
    metric_outputs(&mut out, &report, &network)?;
    manifest.outputs = out.names;
    manifest.write(&cfg.out)
}

fn max_bin(t: &Table) -> Result<usize> {
    t.require_columns(&["bin"])?;
    let mut m = None;
    for row in t.rows() {
        let b: usize = row.parse("bin")?;
        m = Some(m.map_or(b, |x: usize| x.max(b)));
    }
    m.ok_or_else(|| AorError::Validation("empty flow table".into()))
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.common);
    match &cli.command {
        Command::Generate { samples } => {
            if *samples == 0 {
                return Err(AorError::Validation("--samples must be at least 1".into()));
            }
            cmd_generate(&cfg, *samples)
        }
        Command::Build { scenario } => cmd_build(&cfg, scenario),
        Command::Recover { scenario, no_lr } => {
            if *no_lr {
                cfg.use_lr = false;
            }
            cmd_recover(&cfg, scenario)
        }
        Command::Tune { samples } => cmd_tune(&cfg, samples),
        Command::Evaluate {
            estimates,
            truth,
            network,
        } => cmd_evaluate(&cfg, estimates, truth, network),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Whether `dir` holds ground-truth flows.
pub fn has_truth(dir: &Path) -> bool {
    dir.join(FLOW_TRUTH_FILE).exists()
}
