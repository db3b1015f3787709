//! End-to-end runs: dataset generation, the uncalibrated / pixel-wise /
//! object-wise comparison, and result reporting.
//!
//! Frames are streamed from disk and processed in parallel with results
//! collected in frame-id order, so outputs do not depend on thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bevg::{file_name, read_grid_file, write_grid_file};
use crate::calibrate::{
    calibrate_grid, fit_beta, fit_isotonic_iter, fit_quantile_map, CalibFile, CalibMeta, CalibrationMap, IsotonicMap,
    PixelSampler,
};
use crate::error::{Error, Result};
use crate::evaluate::{
    compute_regression_curve, compute_reliability, ks_uniform, render_reliability_svg, scene_svg, write_metrics_csv,
    write_regression_csv, write_reliability_csv, AxisScale, Binning, EqualWidthAccumulator, MetricRow,
    ReliabilityReport, SceneStyle, OBJECT_BINS, PIXEL_BINS,
};
use crate::extract::{extract_objects_at, ExtractionConfig};
use crate::grid::FrameRecord;
use crate::matching::{area_labels, match_frame, presence_labels, record_matches, write_matches_csv, MatchResult};
use crate::region::RegionSpec;
use crate::split::{assign_episode_splits, Split, SplitAssignment};
use crate::synth::{generate_episode, SynthConfig};
use crate::uncertainty::{annotate_presence, location_quantiles, PresenceConfig};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.csv";

fn config_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Relative paths in a config file are taken relative to the file's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A dataset generation config: every [`SynthConfig`] key plus `output_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub output_dir: PathBuf,
    pub synth: SynthConfig,
}

impl GenerateConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> std::result::Result<Self, String> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let output_dir = match table.remove("output_dir") {
            Some(toml::Value::String(s)) => resolve(base_dir, Path::new(&s)),
            Some(_) => return Err("`output_dir` must be a string".into()),
            None => return Err("missing field `output_dir`".into()),
        };
        let synth: SynthConfig = table.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        synth.validate().map_err(|e| e.to_string())?;
        Ok(GenerateConfig { output_dir, synth })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&read_text(path)?, base).map_err(|e| config_error(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub frame_id: String,
    pub episode_id: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// SHA-256 of the canonical TOML serialization of the generator config.
    pub config_sha256: String,
    pub num_frames: usize,
    pub frames: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dataset_dir: &Path) -> Result<Self> {
        let path = dataset_dir.join(MANIFEST_FILE);
        toml::from_str(&read_text(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn config_hash(config: &SynthConfig) -> Result<String> {
    let canonical = toml::to_string(config).map_err(|e| Error::Format(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Writes every frame as a BEVG file plus `manifest.toml`.
pub fn cmd_generate(config: &GenerateConfig) -> Result<Manifest> {
    let synth = &config.synth;
    synth.validate()?;
    create_dir(&config.output_dir)?;
    let per_episode: Vec<Vec<ManifestEntry>> = (0..synth.num_episodes)
        .into_par_iter()
        .map(|ep| {
            let frames = generate_episode::<f64>(synth, ep)?;
            frames
                .iter()
                .map(|f| {
                    let rec = &f.record;
                    let file = file_name(&rec.episode_id, &rec.frame_id);
                    write_grid_file(rec, config.output_dir.join(&file))?;
                    Ok(ManifestEntry { frame_id: rec.frame_id.clone(), episode_id: rec.episode_id.clone(), file })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let frames: Vec<ManifestEntry> = per_episode.into_iter().flatten().collect();
    let manifest = Manifest { config_sha256: config_hash(synth)?, num_frames: frames.len(), frames };
    let path = config.output_dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    log::info!("wrote {} frames to {}", manifest.num_frames, config.output_dir.display());
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Uncal,
    PwCal,
    ObjCal,
}

impl Variant {
    /// Label used in `metrics.csv` and as the output subdirectory name.
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Uncal => "uncal",
            Variant::PwCal => "pw-cal",
            Variant::ObjCal => "obj-cal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub calibration_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { calibration_fraction: 0.5, seed: 0 }
    }
}

fn default_regions() -> Vec<RegionSpec> {
    vec![RegionSpec::ahead_10x20()]
}

fn default_timesteps() -> Vec<u16> {
    vec![0, 4]
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Uncal, Variant::PwCal, Variant::ObjCal]
}

fn default_obj_cal_base() -> Variant {
    Variant::PwCal
}

fn default_object_bins() -> usize {
    OBJECT_BINS
}

fn default_pixel_bins() -> usize {
    PIXEL_BINS
}

fn default_scene_svgs() -> usize {
    4
}

fn default_clip_log() -> f64 {
    -12.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub extraction: ExtractionConfig,
    #[serde(default)]
    pub presence: PresenceConfig,
    #[serde(default = "default_regions")]
    pub regions: Vec<RegionSpec>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "default_timesteps")]
    pub timesteps_to_evaluate: Vec<u16>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    /// Grids the object-wise maps are fitted on: `pw_cal` or `uncal`.
    #[serde(default = "default_obj_cal_base")]
    pub obj_cal_base: Variant,
    #[serde(default)]
    pub pixel_sampler: PixelSampler,
    #[serde(default = "default_object_bins")]
    pub object_bins: usize,
    #[serde(default = "default_pixel_bins")]
    pub pixel_bins: usize,
    #[serde(default = "default_scene_svgs")]
    pub num_scene_svgs: usize,
    #[serde(default = "default_clip_log")]
    pub clip_log: f64,
}

impl RunConfig {
    /// Minimal config with defaults for everything but the two directories.
    pub fn new(dataset_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset_dir: dataset_dir.into(),
            output_dir: output_dir.into(),
            extraction: ExtractionConfig::default(),
            presence: PresenceConfig::default(),
            regions: default_regions(),
            split: SplitConfig::default(),
            timesteps_to_evaluate: default_timesteps(),
            variants: default_variants(),
            obj_cal_base: default_obj_cal_base(),
            pixel_sampler: PixelSampler::default(),
            object_bins: OBJECT_BINS,
            pixel_bins: PIXEL_BINS,
            num_scene_svgs: default_scene_svgs(),
            clip_log: default_clip_log(),
        }
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> std::result::Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.dataset_dir = resolve(base_dir, &cfg.dataset_dir);
        cfg.output_dir = resolve(base_dir, &cfg.output_dir);
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&read_text(path)?, base).map_err(|e| config_error(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.extraction.validate()?;
        self.presence.validate()?;
        if self.variants.is_empty() {
            return Err(Error::validation("variants", "must not be empty"));
        }
        if self.obj_cal_base == Variant::ObjCal {
            return Err(Error::validation("obj_cal_base", "must be `uncal` or `pw_cal`"));
        }
        if self.timesteps_to_evaluate.is_empty() {
            return Err(Error::validation("timesteps_to_evaluate", "must not be empty"));
        }
        if !(self.split.calibration_fraction > 0.0 && self.split.calibration_fraction < 1.0) {
            return Err(Error::validation("split.calibration_fraction", "must lie in (0, 1)"));
        }
        if self.object_bins == 0 || self.pixel_bins == 0 {
            return Err(Error::validation("bins", "must be positive"));
        }
        if self.pixel_sampler.stride == 0 {
            return Err(Error::validation("pixel_sampler.stride", "must be positive"));
        }
        if !(self.clip_log < 0.0) {
            return Err(Error::validation("clip_log", "must be negative"));
        }
        let mut names = BTreeSet::new();
        for r in &self.regions {
            if !names.insert(r.name.as_str()) {
                return Err(Error::validation("regions", format!("duplicate region name {}", r.name)));
            }
        }
        Ok(())
    }

    /// Timestep 0 plus every evaluated timestep, ascending.
    fn steps(&self) -> Vec<u16> {
        let mut s: BTreeSet<u16> = self.timesteps_to_evaluate.iter().copied().collect();
        s.insert(0);
        s.into_iter().collect()
    }
}

/// Per-frame results of extraction, matching and labelling on one set of grids.
#[derive(Debug, Clone, Default)]
struct FrameOutcome {
    frame_id: String,
    presence: BTreeMap<u16, Vec<(f64, u8)>>,
    /// (region index, p_area, label) at timestep 0.
    area: Vec<(usize, f64, u8)>,
    /// (q_direction, q_distance) per matched pair.
    quantiles: BTreeMap<u16, Vec<(f64, f64)>>,
    matches: Vec<MatchResult>,
    pixel_acc: BTreeMap<u16, EqualWidthAccumulator>,
    pixel_pairs: BTreeMap<u16, Vec<(f64, f64)>>,
    scene: Option<String>,
}

struct FrameTask<'a> {
    entry: &'a ManifestEntry,
    split: Split,
    /// Position among calibration frames, for pixel subsampling offsets.
    cal_ordinal: usize,
    scene: bool,
}

fn process_frame(
    mut frame: FrameRecord<f64>,
    task: &FrameTask,
    cfg: &RunConfig,
    collect_pixel_pairs: bool,
) -> Result<FrameOutcome> {
    let steps = cfg.steps();
    let mass = cfg.presence.ellipse_mass;
    for &t in &steps {
        if frame.grid(t).is_none() {
            return Err(Error::validation(
                "timesteps_to_evaluate",
                format!("frame {} has no timestep {t}", frame.frame_id),
            ));
        }
    }
    frame.detections = extract_objects_at(&frame, &cfg.extraction, &steps)?;
    annotate_presence(&mut frame, mass);
    let mut out = FrameOutcome { frame_id: frame.frame_id.clone(), ..Default::default() };
    let meta = *frame.meta();
    for &t in &steps {
        let result = match_frame(&frame, t, mass);
        record_matches(&mut frame, &result);
        out.presence.insert(t, presence_labels(&result, &frame));
        let ann = frame.annotation(t).expect("checked above");
        let mut qs = Vec::new();
        for &(det_id, obj_id) in &result.pairs {
            let det = frame.detections.iter().find(|d| d.detection_id == det_id).expect("paired detection");
            let obj = ann.instances().iter().find(|o| o.object_id == obj_id).expect("paired annotation");
            match location_quantiles(det, t, obj, &meta) {
                Ok(q) => qs.push((q.q_direction, q.q_distance)),
                Err(Error::DegenerateDirection) => {
                    log::warn!("frame {} detection {det_id}: mean at ego position, quantiles skipped", frame.frame_id)
                }
                Err(e) => return Err(e),
            }
        }
        out.quantiles.insert(t, qs);
        if t == 0 {
            out.area = area_labels(&frame, &result, &cfg.regions, &cfg.presence)
                .into_iter()
                .enumerate()
                .map(|(i, (p, y))| (i, p, y))
                .collect();
        }
        out.matches.push(result);
        match task.split {
            Split::Test => {
                let mut acc = EqualWidthAccumulator::new(cfg.pixel_bins)?;
                let grid = frame.grid(t).expect("checked above");
                for (p, &occ) in grid.cells().iter().zip(ann.occupied()) {
                    acc.add(*p, occ as u8);
                }
                out.pixel_acc.insert(t, acc);
            }
            Split::Calibration if collect_pixel_pairs => {
                let offset = task.cal_ordinal * meta.num_cells();
                out.pixel_pairs.insert(t, cfg.pixel_sampler.frame_pairs(&frame, t, offset)?);
            }
            Split::Calibration => {}
        }
    }
    if task.scene {
        let style = SceneStyle { clip_log: cfg.clip_log, ellipse_mass: mass, ..Default::default() };
        out.scene = Some(scene_svg(&frame, 0, &frame.detections, &cfg.regions, &style)?);
    }
    Ok(out)
}

fn run_pass(
    tasks: &[FrameTask],
    cfg: &RunConfig,
    pixel_maps: Option<&BTreeMap<u16, IsotonicMap>>,
    collect_pixel_pairs: bool,
) -> Result<Vec<FrameOutcome>> {
    tasks
        .par_iter()
        .map(|task| {
            let mut frame: FrameRecord<f64> = read_grid_file(cfg.dataset_dir.join(&task.entry.file))?;
            if frame.frame_id != task.entry.frame_id || frame.episode_id != task.entry.episode_id {
                return Err(Error::Format(format!(
                    "{}: ids ({}, {}) do not match the manifest",
                    task.entry.file, frame.frame_id, frame.episode_id
                )));
            }
            if let Some(maps) = pixel_maps {
                for (&t, map) in maps {
                    frame.grids[t as usize] = calibrate_grid(&frame.grids[t as usize], map)?;
                }
            }
            process_frame(frame, task, cfg, collect_pixel_pairs)
        })
        .collect()
}

/// Fails with [`Error::Leakage`] if any fitted frame is also evaluated.
pub fn assert_no_leakage<'a>(fitted: impl IntoIterator<Item = &'a str>, evaluated: &BTreeSet<String>) -> Result<()> {
    let overlap: Vec<String> = fitted.into_iter().filter(|f| evaluated.contains(*f)).map(str::to_string).collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(overlap))
    }
}

/// Object-level records of one variant on the test split.
#[derive(Debug, Clone, Default)]
struct Evaluated {
    presence: BTreeMap<u16, Vec<(f64, u8)>>,
    area: Vec<(usize, f64, u8)>,
    quantiles: BTreeMap<u16, Vec<(f64, f64)>>,
}

fn gather(outcomes: &[FrameOutcome], ids: &BTreeSet<String>) -> Evaluated {
    let mut ev = Evaluated::default();
    for o in outcomes.iter().filter(|o| ids.contains(&o.frame_id)) {
        for (t, v) in &o.presence {
            ev.presence.entry(*t).or_default().extend(v);
        }
        ev.area.extend(&o.area);
        for (t, v) in &o.quantiles {
            ev.quantiles.entry(*t).or_default().extend(v);
        }
    }
    ev
}

struct ObjectMaps {
    presence: BTreeMap<u16, Option<CalibrationMap>>,
    area: Option<CalibrationMap>,
    direction: BTreeMap<u16, Option<CalibrationMap>>,
    distance: BTreeMap<u16, Option<CalibrationMap>>,
}

fn fit_or_warn(target: &str, fit: Result<CalibrationMap>) -> Result<Option<CalibrationMap>> {
    match fit {
        Ok(m) => Ok(Some(m)),
        Err(e @ (Error::InsufficientData(_) | Error::NoConvergence { .. })) => {
            log::warn!("{target}: {e}; metrics left empty");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn fit_object_maps(cal: &Evaluated, steps: &[u16]) -> Result<ObjectMaps> {
    let mut maps = ObjectMaps {
        presence: BTreeMap::new(),
        area: None,
        direction: BTreeMap::new(),
        distance: BTreeMap::new(),
    };
    let empty = Vec::new();
    for &t in steps {
        let pairs = cal.presence.get(&t).unwrap_or(&empty);
        let fit = fit_beta(pairs).map(CalibrationMap::Beta);
        maps.presence.insert(t, fit_or_warn(&format!("presence_t{t}"), fit)?);
        let qs = cal.quantiles.get(&t).map(Vec::as_slice).unwrap_or(&[]);
        let dir: Vec<f64> = qs.iter().map(|q| q.0).collect();
        let dist: Vec<f64> = qs.iter().map(|q| q.1).collect();
        maps.direction.insert(t, fit_or_warn(&format!("direction_t{t}"), fit_quantile_map(&dir).map(CalibrationMap::Quantile))?);
        maps.distance.insert(t, fit_or_warn(&format!("distance_t{t}"), fit_quantile_map(&dist).map(CalibrationMap::Quantile))?);
    }
    let area_pairs: Vec<(f64, u8)> = cal.area.iter().map(|&(_, p, y)| (p, y)).collect();
    maps.area = fit_or_warn("area", fit_beta(&area_pairs).map(CalibrationMap::Beta))?;
    Ok(maps)
}

/// Applies object maps; records whose map could not be fitted are dropped.
fn apply_object_maps(ev: &Evaluated, maps: &ObjectMaps) -> Evaluated {
    let mut out = Evaluated::default();
    for (t, pairs) in &ev.presence {
        let v = match maps.presence.get(t).and_then(Option::as_ref) {
            Some(m) => pairs.iter().map(|&(p, y)| (m.apply(p), y)).collect(),
            None => Vec::new(),
        };
        out.presence.insert(*t, v);
    }
    out.area = match &maps.area {
        Some(m) => ev.area.iter().map(|&(i, p, y)| (i, m.apply(p), y)).collect(),
        None => Vec::new(),
    };
    for (t, qs) in &ev.quantiles {
        let v = match (
            maps.direction.get(t).and_then(Option::as_ref),
            maps.distance.get(t).and_then(Option::as_ref),
        ) {
            (Some(a), Some(b)) => qs.iter().map(|&(x, y)| (a.apply(x), b.apply(y))).collect(),
            _ => Vec::new(),
        };
        out.quantiles.insert(*t, v);
    }
    out
}

struct Writer<'a> {
    cfg: &'a RunConfig,
    rows: Vec<MetricRow>,
}

impl Writer<'_> {
    fn push(&mut self, metric: &str, variant: Variant, t: u16, value: f64) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            split: "test".into(),
            variant: variant.label().into(),
            timestep: t,
            value,
        });
    }

    fn reliability(&mut self, dir: &Path, name: &str, metric: &str, variant: Variant, t: u16, pairs: &[(f64, u8)]) -> Result<()> {
        self.push(&format!("n_{metric}"), variant, t, pairs.len() as f64);
        if pairs.is_empty() {
            log::warn!("{}: no {metric} records at timestep {t}", variant.label());
            self.push(&format!("ece_{metric}"), variant, t, f64::NAN);
            self.push(&format!("nll_{metric}"), variant, t, f64::NAN);
            return Ok(());
        }
        let report = compute_reliability(pairs, Binning::EqualWidth, self.cfg.object_bins)?;
        self.push(&format!("ece_{metric}"), variant, t, report.ece);
        self.push(&format!("nll_{metric}"), variant, t, report.nll);
        write_report(dir, name, &report, AxisScale::Linear)?;
        let eq = compute_reliability(pairs, Binning::EqualSize, self.cfg.object_bins)?;
        self.push(&format!("ece_{metric}_eqsize"), variant, t, eq.ece);
        write_report(dir, &format!("{name}_eqsize"), &eq, AxisScale::log_for(&eq))
    }

    fn quantiles(&mut self, dir: &Path, variant: Variant, t: u16, qs: &[(f64, f64)]) -> Result<()> {
        self.push("n_quantiles", variant, t, qs.len() as f64);
        for (axis, pick) in [("direction", 0usize), ("distance", 1)] {
            let values: Vec<f64> = qs.iter().map(|q| if pick == 0 { q.0 } else { q.1 }).collect();
            if values.is_empty() {
                self.push(&format!("ks_{axis}"), variant, t, f64::NAN);
                continue;
            }
            self.push(&format!("ks_{axis}"), variant, t, ks_uniform(&values));
            let curve = compute_regression_curve(&values)?;
            write_regression_csv(&dir.join(format!("regression_{axis}_t{t}.csv")), &curve)?;
        }
        Ok(())
    }

    fn objects(&mut self, dir: &Path, variant: Variant, ev: &Evaluated) -> Result<()> {
        for &t in &self.cfg.timesteps_to_evaluate.clone() {
            let empty = Vec::new();
            let pairs = ev.presence.get(&t).unwrap_or(&empty);
            self.reliability(dir, &format!("presence_t{t}"), "presence", variant, t, pairs)?;
            let qs = ev.quantiles.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            self.quantiles(dir, variant, t, qs)?;
        }
        let area: Vec<(f64, u8)> = ev.area.iter().map(|&(_, p, y)| (p, y)).collect();
        self.reliability(dir, "area", "area", variant, 0, &area)
    }

    fn pixels(&mut self, dir: &Path, variant: Variant, outcomes: &[FrameOutcome]) -> Result<()> {
        for &t in &self.cfg.timesteps_to_evaluate.clone() {
            let mut acc = EqualWidthAccumulator::new(self.cfg.pixel_bins)?;
            for o in outcomes {
                if let Some(a) = o.pixel_acc.get(&t) {
                    acc.merge(a)?;
                }
            }
            let report = acc.finish()?;
            self.push("ece_pixel", variant, t, report.ece);
            self.push("nll_pixel", variant, t, report.nll);
            write_report(dir, &format!("pixel_t{t}"), &report, AxisScale::log_for(&report))?;
        }
        Ok(())
    }
}

fn write_report(dir: &Path, name: &str, report: &ReliabilityReport, scale: AxisScale) -> Result<()> {
    write_reliability_csv(&dir.join(format!("reliability_{name}.csv")), report)?;
    render_reliability_svg(report, name, scale, &dir.join(format!("reliability_{name}.svg")))
}

fn write_frame_artifacts(dir: &Path, outcomes: &[FrameOutcome]) -> Result<()> {
    let matches: Vec<MatchResult> = outcomes.iter().flat_map(|o| o.matches.iter().cloned()).collect();
    write_matches_csv(&dir.join("matches.csv"), &matches)?;
    let scenes: Vec<&FrameOutcome> = outcomes.iter().filter(|o| o.scene.is_some()).collect();
    if !scenes.is_empty() {
        let sdir = dir.join("scenes");
        create_dir(&sdir)?;
        for o in scenes {
            let path = sdir.join(format!("{}.svg", o.frame_id));
            fs::write(&path, o.scene.as_ref().unwrap()).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn write_calib(dir: &Path, target: &str, map: &CalibrationMap, n: usize, fitted: &[String]) -> Result<()> {
    let cdir = dir.join("calib");
    create_dir(&cdir)?;
    let meta = CalibMeta { target: target.into(), num_observations: n, fitted_frames: fitted.to_vec() };
    CalibFile::new(meta, map.clone()).write(&cdir.join(format!("{target}.calib")))
}

/// Summary of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub metrics: Vec<MetricRow>,
    pub split: SplitAssignment,
    pub metrics_path: PathBuf,
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let manifest = Manifest::read(&cfg.dataset_dir)?;
    let mut entries = manifest.frames.clone();
    entries.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    let pairs: Vec<(&str, &str)> = entries.iter().map(|e| (e.episode_id.as_str(), e.frame_id.as_str())).collect();
    let split = assign_episode_splits(&pairs, cfg.split.calibration_fraction, cfg.split.seed)?;
    let cal_ids: Vec<String> = split.frames_in(Split::Calibration).map(str::to_string).collect();
    let test_ids: BTreeSet<String> = split.frames_in(Split::Test).map(str::to_string).collect();
    let cal_set: BTreeSet<String> = cal_ids.iter().cloned().collect();
    log::info!("{} calibration frames, {} test frames", cal_ids.len(), test_ids.len());

    let scene_ids: BTreeSet<&str> = test_ids.iter().take(cfg.num_scene_svgs).map(String::as_str).collect();
    let mut cal_ordinal = 0;
    let tasks: Vec<FrameTask> = entries
        .iter()
        .map(|e| {
            let s = split.split_of(&e.frame_id).expect("every frame assigned");
            let ord = cal_ordinal;
            if s == Split::Calibration {
                cal_ordinal += 1;
            }
            FrameTask { entry: e, split: s, cal_ordinal: ord, scene: scene_ids.contains(e.frame_id.as_str()) }
        })
        .collect();

    let wants = |v: Variant| cfg.variants.contains(&v);
    let need_pw = wants(Variant::PwCal) || (wants(Variant::ObjCal) && cfg.obj_cal_base == Variant::PwCal);
    let need_uncal = wants(Variant::Uncal) || (wants(Variant::ObjCal) && cfg.obj_cal_base == Variant::Uncal);
    let steps = cfg.steps();

    create_dir(&cfg.output_dir)?;
    let mut writer = Writer { cfg, rows: Vec::new() };
    let mut variant_outcomes: BTreeMap<Variant, Vec<FrameOutcome>> = BTreeMap::new();

    if need_uncal || need_pw {
        let raw = run_pass(&tasks, cfg, None, need_pw)?;
        let mut pixel_maps = BTreeMap::new();
        if need_pw {
            assert_no_leakage(cal_ids.iter().map(String::as_str), &test_ids)?;
            for &t in &steps {
                let pairs = raw.iter().flat_map(|o| o.pixel_pairs.get(&t).into_iter().flatten().copied());
                let map = fit_isotonic_iter(pairs)?;
                log::info!("pixel map t={t}: {} breakpoints", map.breakpoints.len());
                pixel_maps.insert(t, map);
            }
        }
        if wants(Variant::Uncal) {
            let dir = cfg.output_dir.join(Variant::Uncal.label());
            create_dir(&dir)?;
            writer.pixels(&dir, Variant::Uncal, &raw)?;
            writer.objects(&dir, Variant::Uncal, &gather(&raw, &test_ids))?;
            write_frame_artifacts(&dir, &raw)?;
        }
        if need_uncal {
            variant_outcomes.insert(Variant::Uncal, raw);
        }
        if need_pw {
            let calibrated = run_pass(&tasks, cfg, Some(&pixel_maps), false)?;
            if wants(Variant::PwCal) {
                let dir = cfg.output_dir.join(Variant::PwCal.label());
                create_dir(&dir)?;
                let n_pixels = |t: u16| pixel_maps[&t].clip_floor.recip().round() as usize;
                for (t, map) in &pixel_maps {
                    write_calib(&dir, &format!("pixel_t{t}"), &CalibrationMap::Isotonic(map.clone()), n_pixels(*t), &cal_ids)?;
                }
                writer.pixels(&dir, Variant::PwCal, &calibrated)?;
                writer.objects(&dir, Variant::PwCal, &gather(&calibrated, &test_ids))?;
                write_frame_artifacts(&dir, &calibrated)?;
            }
            variant_outcomes.insert(Variant::PwCal, calibrated);
        }
    }

    if wants(Variant::ObjCal) {
        let base = &variant_outcomes[&cfg.obj_cal_base];
        let cal = gather(base, &cal_set);
        assert_no_leakage(cal_ids.iter().map(String::as_str), &test_ids)?;
        let maps = fit_object_maps(&cal, &steps)?;
        let dir = cfg.output_dir.join(Variant::ObjCal.label());
        create_dir(&dir)?;
        let n_or_zero = |v: Option<&Vec<(f64, u8)>>| v.map_or(0, Vec::len);
        for &t in &steps {
            if let Some(Some(m)) = maps.presence.get(&t) {
                write_calib(&dir, &format!("presence_t{t}"), m, n_or_zero(cal.presence.get(&t)), &cal_ids)?;
            }
            let nq = cal.quantiles.get(&t).map_or(0, Vec::len);
            if let Some(Some(m)) = maps.direction.get(&t) {
                write_calib(&dir, &format!("direction_t{t}"), m, nq, &cal_ids)?;
            }
            if let Some(Some(m)) = maps.distance.get(&t) {
                write_calib(&dir, &format!("distance_t{t}"), m, nq, &cal_ids)?;
            }
        }
        if let Some(m) = &maps.area {
            write_calib(&dir, "area", m, cal.area.len(), &cal_ids)?;
        }
        let test = apply_object_maps(&gather(base, &test_ids), &maps);
        writer.objects(&dir, Variant::ObjCal, &test)?;
    }

    let metrics_path = cfg.output_dir.join(METRICS_FILE);
    write_metrics_csv(&metrics_path, &writer.rows)?;
    Ok(RunSummary { metrics: writer.rows, split, metrics_path })
}

/// Reads `metrics.csv` from a results directory.
pub fn load_metrics(results_dir: &Path) -> Result<Vec<MetricRow>> {
    crate::evaluate::read_metrics_csv(&results_dir.join(METRICS_FILE))
}
