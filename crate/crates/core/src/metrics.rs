//! Flow-weighted recovery error metrics.

use std::collections::BTreeMap;

use crate::error::{AorError, Result};
use crate::network::{Network, RoadClass};
use crate::table::{fmt_f64, TableWriter};

/// Upper edges of the MAE histogram buckets (vehicles per bin); the last
/// bucket is open-ended.
pub const MAE_BUCKET_EDGES: [f64; 5] = [10.0, 20.0, 30.0, 40.0, 50.0];

/// Ground truth and estimates, link-major (`link · T + bin`).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSeries {
    truth: Vec<f64>,
    estimate: Vec<f64>,
    num_bins: usize,
}

impl FlowSeries {
    pub fn new(truth: Vec<f64>, estimate: Vec<f64>, num_bins: usize) -> Result<FlowSeries> {
        if num_bins == 0 || !truth.len().is_multiple_of(num_bins) {
            return Err(AorError::Dimension(format!(
                "series length {} is not a multiple of {num_bins} bins",
                truth.len()
            )));
        }
        if truth.len() != estimate.len() {
            return Err(AorError::Dimension(format!(
                "truth has {} entries, estimate {}",
                truth.len(),
                estimate.len()
            )));
        }
        if let Some(v) = truth.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(AorError::Validation(format!("ground truth must be finite and >= 0, found {v}")));
        }
        if let Some(v) = estimate.iter().find(|v| !v.is_finite()) {
            return Err(AorError::Validation(format!("estimate must be finite, found {v}")));
        }
        Ok(FlowSeries {
            truth,
            estimate,
            num_bins,
        })
    }

    pub fn num_links(&self) -> usize {
        self.truth.len() / self.num_bins
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn link(&self, l: usize) -> (&[f64], &[f64]) {
        let r = l * self.num_bins..(l + 1) * self.num_bins;
        (&self.truth[r.clone()], &self.estimate[r])
    }

    fn link_total(&self, l: usize) -> f64 {
        self.link(l).0.iter().sum()
    }

    fn link_abs_error(&self, l: usize) -> f64 {
        let (f, g) = self.link(l);
        f.iter().zip(g).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Links whose total ground-truth flow is zero.
    pub fn zero_flow_links(&self) -> Vec<usize> {
        (0..self.num_links()).filter(|&l| self.link_total(l) == 0.0).collect()
    }
}

/// `W_l = Σ_t f_l / Σ_l Σ_t f_l`.
pub fn link_weights(series: &FlowSeries) -> Result<Vec<f64>> {
    let totals: Vec<f64> = (0..series.num_links()).map(|l| series.link_total(l)).collect();
    let all: f64 = totals.iter().sum();
    if all <= 0.0 {
        return Err(AorError::Domain("total network flow is zero".into()));
    }
    Ok(totals.into_iter().map(|t| t / all).collect())
}

/// `Σ_t |f − f̂| / Σ_t f`.
pub fn rme(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    let total: f64 = truth.iter().sum();
    if total <= 0.0 {
        return Err(AorError::Domain("relative error undefined for a link with zero flow".into()));
    }
    let err: f64 = truth.iter().zip(estimate).map(|(a, b)| (a - b).abs()).sum();
    Ok(err / total)
}

/// `(1/T) Σ_t |f − f̂|`.
pub fn mae(truth: &[f64], estimate: &[f64]) -> f64 {
    let err: f64 = truth.iter().zip(estimate).map(|(a, b)| (a - b).abs()).sum();
    err / truth.len() as f64
}

/// WRME over the given links, zero-flow links already dropped.
fn wrme_over(series: &FlowSeries, links: impl Iterator<Item = usize>) -> Option<f64> {
    let (mut err, mut total) = (0.0, 0.0);
    for l in links {
        let t = series.link_total(l);
        if t > 0.0 {
            err += series.link_abs_error(l);
            total += t;
        }
    }
    (total > 0.0).then(|| err / total)
}

/// Flow-weighted relative mean error, `Σ_l W_l RME_l`, over links with
/// positive flow.
pub fn wrme(series: &FlowSeries) -> Result<f64> {
    wrme_over(series, 0..series.num_links())
        .ok_or_else(|| AorError::Domain("no link carries positive ground-truth flow".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassBreakdown {
    pub wrme: BTreeMap<RoadClass, f64>,
    /// Classes present on the network whose links all carry zero flow.
    pub skipped: Vec<RoadClass>,
}

/// WRME within each road class, using class-internal weights.
pub fn wrme_by_class(series: &FlowSeries, classes: &[Option<RoadClass>]) -> Result<ClassBreakdown> {
    if classes.len() != series.num_links() {
        return Err(AorError::Dimension(format!(
            "{} class labels for {} links",
            classes.len(),
            series.num_links()
        )));
    }
    let mut members: BTreeMap<RoadClass, Vec<usize>> = BTreeMap::new();
    for (l, c) in classes.iter().enumerate() {
        let c = c.ok_or_else(|| AorError::Validation(format!("link {l} has no road class")))?;
        members.entry(c).or_default().push(l);
    }
    let mut out = ClassBreakdown {
        wrme: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for (c, links) in members {
        match wrme_over(series, links.into_iter()) {
            Some(v) => {
                out.wrme.insert(c, v);
            }
            None => out.skipped.push(c),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkMetric {
    pub link: usize,
    pub total_flow: f64,
    /// `None` for zero-flow links.
    pub rme: Option<f64>,
    pub mae: f64,
}

pub fn link_metrics(series: &FlowSeries) -> Vec<LinkMetric> {
    (0..series.num_links())
        .map(|l| {
            let (f, g) = series.link(l);
            LinkMetric {
                link: l,
                total_flow: series.link_total(l),
                rme: rme(f, g).ok(),
                mae: mae(f, g),
            }
        })
        .collect()
}

/// Counts of links per MAE bucket `[0,10), [10,20), …, [50, ∞)`.
pub fn mae_histogram(metrics: &[LinkMetric]) -> Vec<usize> {
    let mut counts = vec![0; MAE_BUCKET_EDGES.len() + 1];
    for m in metrics {
        let b = MAE_BUCKET_EDGES.iter().position(|&e| m.mae < e).unwrap_or(MAE_BUCKET_EDGES.len());
        counts[b] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub wrme: f64,
    pub by_class: Option<ClassBreakdown>,
    pub links: Vec<LinkMetric>,
    pub histogram: Vec<usize>,
    pub diagnostics: Vec<String>,
}

pub fn evaluate(series: &FlowSeries, network: &Network) -> Result<MetricReport> {
    if series.num_links() != network.num_links() {
        return Err(AorError::Validation(format!(
            "series covers {} links, network has {}",
            series.num_links(),
            network.num_links()
        )));
    }
    let mut diagnostics = Vec::new();
    let zero = series.zero_flow_links();
    if !zero.is_empty() {
        diagnostics.push(format!("{} zero-flow links excluded from WRME and RME", zero.len()));
    }
    let classes: Vec<Option<RoadClass>> = network.links().iter().map(|l| l.road_class).collect();
    let by_class = if classes.iter().all(Option::is_some) {
        let b = wrme_by_class(series, &classes)?;
        for c in &b.skipped {
            diagnostics.push(format!("class {c} carries no flow and is skipped"));
        }
        Some(b)
    } else {
        diagnostics.push("road classes missing; per-class WRME not reported".into());
        None
    };
    let links = link_metrics(series);
    let histogram = mae_histogram(&links);
    Ok(MetricReport {
        wrme: wrme(series)?,
        by_class,
        links,
        histogram,
        diagnostics,
    })
}

impl MetricReport {
    /// `scope,wrme` rows: `all` first, then one row per class.
    pub fn summary_table(&self) -> String {
        let mut w = TableWriter::new(&["scope", "wrme"]);
        w.row(["all".to_string(), fmt_f64(self.wrme)]);
        if let Some(b) = &self.by_class {
            for (c, v) in &b.wrme {
                w.row([c.to_string(), fmt_f64(*v)]);
            }
        }
        w.finish()
    }

    pub fn links_table(&self, network: &Network) -> String {
        let mut w = TableWriter::new(&["link_id", "road_class", "total_flow", "rme", "mae"]);
        for m in &self.links {
            let link = network.link(m.link);
            w.row([
                link.id.clone(),
                link.road_class.map(|c| c.to_string()).unwrap_or_default(),
                fmt_f64(m.total_flow),
                m.rme.map(fmt_f64).unwrap_or_default(),
                fmt_f64(m.mae),
            ]);
        }
        w.finish()
    }

    pub fn histogram_table(&self) -> String {
        let mut w = TableWriter::new(&["mae_lo", "mae_hi", "links"]);
        let mut lo = 0.0;
        for (i, &count) in self.histogram.iter().enumerate() {
            let hi = MAE_BUCKET_EDGES.get(i).map(|e| fmt_f64(*e)).unwrap_or_else(|| "inf".into());
            w.row([fmt_f64(lo), hi, count.to_string()]);
            lo = MAE_BUCKET_EDGES.get(i).copied().unwrap_or(f64::INFINITY);
        }
        w.finish()
    }
}
