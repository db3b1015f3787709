//! Calibration metrics (ECE, NLL, regression curves, KS) and their CSV and
//! SVG renderings.

mod svg;

pub use svg::{render_reliability_svg, render_scene_svg, reliability_svg, scene_svg, AxisScale, SceneStyle};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NLL_CLAMP: f64 = 1e-12;
pub const OBJECT_BINS: usize = 10;
pub const PIXEL_BINS: usize = 15;
pub const REGRESSION_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    EqualWidth,
    EqualSize,
}

impl Binning {
    pub fn as_str(&self) -> &'static str {
        match self {
            Binning::EqualWidth => "equal_width",
            Binning::EqualSize => "equal_size",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    /// Bin interval. For equal-size bins these are the smallest and largest
    /// prediction in the bin.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub positives: usize,
    pub mean_confidence: f64,
    pub empirical_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub binning: Binning,
    pub num_bins: usize,
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
    pub ece: f64,
    pub nll: f64,
}

impl ReliabilityReport {
    pub fn histogram(&self) -> Vec<usize> {
        self.bins.iter().map(|b| b.count).collect()
    }
}

fn equal_width_index(p: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut b = ((p * nf).floor().max(0.0) as usize).min(n - 1);
    // Guard the floor against rounding near interior edges.
    if b > 0 && p < b as f64 / nf {
        b -= 1;
    } else if b + 1 < n && p >= (b + 1) as f64 / nf {
        b += 1;
    }
    b
}

/// Contiguous groups of the sorted predictions, sizes differing by at most
/// one; a run of equal predictions straddling a boundary stays in the
/// earlier group.
fn equal_size_ranges(sorted: &[f64], n: usize) -> Vec<(usize, usize)> {
    let total = sorted.len();
    let (base, rem) = (total / n, total % n);
    let mut ranges = Vec::with_capacity(n);
    let (mut start, mut target) = (0, 0);
    for i in 0..n {
        target += base + usize::from(i < rem);
        let mut end = target.max(start);
        while end > 0 && end < total && sorted[end] == sorted[end - 1] {
            end += 1;
        }
        ranges.push((start, end));
        start = end;
    }
    ranges
}

pub fn binary_nll(pairs: &[(f64, u8)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(p, y)| {
            let p = p.clamp(NLL_CLAMP, 1.0 - NLL_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    sum / pairs.len() as f64
}

pub fn compute_reliability(pairs: &[(f64, u8)], binning: Binning, num_bins: usize) -> Result<ReliabilityReport> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("reliability needs at least one prediction".into()));
    }
    if num_bins == 0 {
        return Err(Error::validation("num_bins", "must be positive"));
    }
    if let Some(bad) = pairs.iter().find(|(p, y)| !(0.0..=1.0).contains(p) || *y > 1) {
        return Err(Error::validation("pairs", format!("invalid prediction/label {bad:?}")));
    }
    if binning == Binning::EqualWidth {
        let mut acc = EqualWidthAccumulator::new(num_bins)?;
        for &(p, y) in pairs {
            acc.add(p, y);
        }
        return acc.finish();
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let ps: Vec<f64> = sorted.iter().map(|x| x.0).collect();
    let mut acc = vec![(0usize, 0usize, 0.0f64); num_bins];
    let mut bounds: Vec<(f64, f64)> = Vec::with_capacity(num_bins);
    let mut last_hi = 0.0;
    for (i, (s, e)) in equal_size_ranges(&ps, num_bins).into_iter().enumerate() {
        for &(p, y) in &sorted[s..e] {
            acc[i].0 += 1;
            acc[i].1 += y as usize;
            acc[i].2 += p;
        }
        if e > s {
            bounds.push((ps[s], ps[e - 1]));
            last_hi = ps[e - 1];
        } else {
            bounds.push((last_hi, last_hi));
        }
    }
    Ok(build_report(Binning::EqualSize, &acc, &bounds, binary_nll(pairs)))
}

fn build_report(binning: Binning, acc: &[(usize, usize, f64)], bounds: &[(f64, f64)], nll: f64) -> ReliabilityReport {
    let total: usize = acc.iter().map(|a| a.0).sum();
    let bins: Vec<ReliabilityBin> = acc
        .iter()
        .zip(bounds)
        .map(|(&(count, positives, sum_p), &(lo, hi))| {
            let (mean_confidence, empirical_frequency) = if count > 0 {
                (sum_p / count as f64, positives as f64 / count as f64)
            } else {
                (0.0, 0.0)
            };
            ReliabilityBin { lo, hi, count, positives, mean_confidence, empirical_frequency }
        })
        .collect();
    let ece = bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / total as f64 * (b.mean_confidence - b.empirical_frequency).abs())
        .sum();
    ReliabilityReport { binning, num_bins: acc.len(), bins, total, ece, nll }
}

/// Streaming equal-width reliability statistics, for inputs too large to
/// hold in memory (such as every pixel of a split).
#[derive(Debug, Clone, PartialEq)]
pub struct EqualWidthAccumulator {
    bins: Vec<(usize, usize, f64)>,
    nll_sum: f64,
}

impl EqualWidthAccumulator {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::validation("num_bins", "must be positive"));
        }
        Ok(EqualWidthAccumulator { bins: vec![(0, 0, 0.0); num_bins], nll_sum: 0.0 })
    }

    pub fn add(&mut self, p: f64, y: u8) {
        let idx = equal_width_index(p, self.bins.len());
        let b = &mut self.bins[idx];
        b.0 += 1;
        b.1 += y as usize;
        b.2 += p;
        let pc = p.clamp(NLL_CLAMP, 1.0 - NLL_CLAMP);
        self.nll_sum -= if y == 1 { pc.ln() } else { (1.0 - pc).ln() };
    }

    /// Adds `other`'s counts; merging in a fixed order keeps results reproducible.
    pub fn merge(&mut self, other: &EqualWidthAccumulator) -> Result<()> {
        if other.bins.len() != self.bins.len() {
            return Err(Error::validation("num_bins", "cannot merge accumulators with different bin counts"));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
        self.nll_sum += other.nll_sum;
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.0).sum()
    }

    pub fn finish(&self) -> Result<ReliabilityReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InsufficientData("reliability needs at least one prediction".into()));
        }
        let n = self.bins.len() as f64;
        let bounds: Vec<(f64, f64)> = (0..self.bins.len()).map(|i| (i as f64 / n, (i + 1) as f64 / n)).collect();
        Ok(build_report(Binning::EqualWidth, &self.bins, &bounds, self.nll_sum / total as f64))
    }
}

/// Observed frequency of `quantiles <= k / 100` for `k = 0..=100`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionCurve {
    pub points: Vec<(f64, f64)>,
}

impl RegressionCurve {
    /// Largest vertical distance from the diagonal.
    pub fn sup_distance(&self) -> f64 {
        self.points.iter().map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

pub fn compute_regression_curve(quantiles: &[f64]) -> Result<RegressionCurve> {
    if quantiles.is_empty() {
        return Err(Error::InsufficientData("regression curve needs at least one quantile".into()));
    }
    let mut sorted = quantiles.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let last = (REGRESSION_POINTS - 1) as f64;
    let points = (0..REGRESSION_POINTS)
        .map(|k| {
            let x = k as f64 / last;
            (x, sorted.partition_point(|&q| q <= x) as f64 / n)
        })
        .collect();
    Ok(RegressionCurve { points })
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1).
pub fn ks_uniform(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// `bin_index,lo,hi,count,mean_conf,emp_freq,zero_positive`; the last column
/// flags non-empty bins without a single positive.
pub fn write_reliability_csv(path: &Path, report: &ReliabilityReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_index", "lo", "hi", "count", "mean_conf", "emp_freq", "zero_positive"])?;
    for (i, b) in report.bins.iter().enumerate() {
        w.write_record([
            i.to_string(),
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            b.mean_confidence.to_string(),
            b.empirical_frequency.to_string(),
            u8::from(b.count > 0 && b.positives == 0).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_regression_csv(path: &Path, curve: &RegressionCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["nominal", "observed"])?;
    for (x, y) in &curve.points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub variant: String,
    pub timestep: u16,
    pub value: f64,
}

pub const METRICS_HEADER: [&str; 5] = ["metric", "split", "variant", "timestep", "value"];

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([r.metric.clone(), r.split.clone(), r.variant.clone(), r.timestep.to_string(), r.value.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Format(format!("{}: unexpected header {:?}", path.display(), header)));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Fixed-width table of metric rows, one line per row.
pub fn format_metrics_table(rows: &[MetricRow], out: &mut impl Write) -> std::io::Result<()> {
    let mw = rows.iter().map(|r| r.metric.len()).chain([6]).max().unwrap_or(6);
    let sw = rows.iter().map(|r| r.split.len()).chain([5]).max().unwrap_or(5);
    let vw = rows.iter().map(|r| r.variant.len()).chain([7]).max().unwrap_or(7);
    writeln!(out, "{:<mw$}  {:<sw$}  {:<vw$}  {:>8}  {:>14}", "metric", "split", "variant", "timestep", "value")?;
    for r in rows {
        writeln!(out, "{:<mw$}  {:<sw$}  {:<vw$}  {:>8}  {:>14.6e}", r.metric, r.split, r.variant, r.timestep, r.value)?;
    }
    Ok(())
}
