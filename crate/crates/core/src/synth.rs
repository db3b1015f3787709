//! Synthetic episodes with known ground truth.
//!
//! Each object renders an isotropic Gaussian bump into the occupancy field.
//! The bump center is the object's true position displaced by a per-timestep
//! Gaussian jitter, so the predicted location carries genuine error relative
//! to the annotation. Annotations are deterministic footprints: the
//! `pixel_footprint` cells nearest the true position. The reported grid is the
//! clipped field passed through a monotone [`DistortionSpec`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AnnotatedObject, AnnotationMask, FrameRecord, GridMeta, ProbGrid};
use crate::region::CellRect;
use crate::scalar::Real;

/// Bumps are evaluated out to this many spreads from their center.
pub const BUMP_SUPPORT_SPREADS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Identity,
    Power,
    LogisticShift,
}

/// Monotone map from true occupancy probability to reported probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    /// Exponent of the power map.
    #[serde(default = "one")]
    pub gamma: f64,
    /// Log-odds offset of the logistic-shift map.
    #[serde(default)]
    pub shift: f64,
}

fn one() -> f64 {
    1.0
}

impl DistortionSpec {
    pub fn identity() -> Self {
        DistortionSpec {
            kind: DistortionKind::Identity,
            gamma: 1.0,
            shift: 0.0,
        }
    }

    pub fn power(gamma: f64) -> Self {
        DistortionSpec {
            kind: DistortionKind::Power,
            gamma,
            shift: 0.0,
        }
    }

    pub fn logistic_shift(shift: f64) -> Self {
        DistortionSpec {
            kind: DistortionKind::LogisticShift,
            gamma: 1.0,
            shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == DistortionKind::Power && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation("distortion.gamma", "must be positive"));
        }
        if !self.shift.is_finite() {
            return Err(Error::validation("distortion.shift", "must be finite"));
        }
        Ok(())
    }

    pub fn apply<T: Real>(&self, q: T) -> T {
        match self.kind {
            DistortionKind::Identity => q,
            DistortionKind::Power => q.powf(T::lit(self.gamma)),
            DistortionKind::LogisticShift => {
                if q <= T::zero() || q >= T::one() {
                    return q;
                }
                let logit = (q / (T::one() - q)).ln() + T::lit(self.shift);
                crate::scalar::sigmoid(logit)
            }
        }
    }
}

/// Priors for sampling objects and clutter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectPrior {
    pub peak_min: f64,
    pub peak_max: f64,
    pub spread_min: f64,
    pub spread_max: f64,
    /// Per-axis velocity bound in cells per timestep.
    pub max_speed_cells: f64,
    pub pixel_footprint: usize,
    /// Minimum distance between any two objects (and clutter) at every timestep.
    pub min_separation_cells: f64,
    /// Bump-center jitter standard deviation, in units of the object's spread.
    pub location_jitter: f64,
    /// Objects start at least this far from the grid border.
    pub margin_cells: f64,
    pub clutter_peak_min: f64,
    pub clutter_peak_max: f64,
}

impl Default for ObjectPrior {
    fn default() -> Self {
        ObjectPrior {
            peak_min: 0.05,
            peak_max: 1.0,
            spread_min: 1.0,
            spread_max: 2.0,
            max_speed_cells: 1.0,
            pixel_footprint: 5,
            min_separation_cells: 12.0,
            location_jitter: 1.0,
            margin_cells: 4.0,
            clutter_peak_min: 0.05,
            clutter_peak_max: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub meta: GridMeta<f64>,
    pub num_episodes: usize,
    pub frames_per_episode: usize,
    pub objects_per_frame_mean: f64,
    pub distortion: DistortionSpec,
    /// Constant background probability added to the field.
    pub occupancy_noise: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub objects: ObjectPrior,
    /// Mean number of object-like bumps with no annotation behind them.
    #[serde(default)]
    pub clutter_per_frame_mean: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.distortion.validate()?;
        if self.num_episodes == 0 || self.frames_per_episode == 0 {
            return Err(Error::validation("num_episodes/frames_per_episode", "must be positive"));
        }
        if !(self.objects_per_frame_mean >= 0.0 && self.objects_per_frame_mean.is_finite()) {
            return Err(Error::validation("objects_per_frame_mean", "must be non-negative"));
        }
        if !(self.clutter_per_frame_mean >= 0.0 && self.clutter_per_frame_mean.is_finite()) {
            return Err(Error::validation("clutter_per_frame_mean", "must be non-negative"));
        }
        if !(self.occupancy_noise >= 0.0 && self.occupancy_noise < 0.5) {
            return Err(Error::validation("occupancy_noise", "must lie in [0, 0.5)"));
        }
        let o = &self.objects;
        let peak_ok = |lo: f64, hi: f64| lo > 0.0 && lo <= hi && hi <= 1.0;
        if !peak_ok(o.peak_min, o.peak_max) || !peak_ok(o.clutter_peak_min, o.clutter_peak_max) {
            return Err(Error::validation("objects.peak", "peak ranges must satisfy 0 < min <= max <= 1"));
        }
        if !(o.spread_min > 0.0 && o.spread_min <= o.spread_max) {
            return Err(Error::validation("objects.spread", "must satisfy 0 < min <= max"));
        }
        if o.pixel_footprint == 0 {
            return Err(Error::validation("objects.pixel_footprint", "must be at least 1"));
        }
        if !(o.max_speed_cells >= 0.0 && o.min_separation_cells >= 0.0 && o.location_jitter >= 0.0) {
            return Err(Error::validation("objects", "speed, separation and jitter must be non-negative"));
        }
        let span = |n: usize| n as f64 - 1.0 - 2.0 * o.margin_cells;
        if !(o.margin_cells >= 0.0 && span(self.meta.height_cells) >= 0.0 && span(self.meta.width_cells) >= 0.0) {
            return Err(Error::validation("objects.margin_cells", "leaves no room on the grid"));
        }
        Ok(())
    }

    /// Frame id for the `frame`-th frame of episode `episode`; unique across the dataset.
    pub fn frame_id(&self, episode: usize, frame: usize) -> String {
        format!("f{:06}", episode * self.frames_per_episode + frame)
    }

    pub fn episode_id(&self, episode: usize) -> String {
        format!("ep{episode:04}")
    }
}

/// A ground-truth object (or clutter source) moving linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject<T: Real> {
    pub object_id: u32,
    pub start_row: T,
    pub start_col: T,
    /// (rows, cols) per timestep.
    pub velocity: (T, T),
    pub pixel_footprint: usize,
    pub peak_intensity: T,
    pub spread_cells: T,
}

impl<T: Real> SynthObject<T> {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_footprint == 0 {
            return Err(Error::validation("pixel_footprint", "must be at least 1"));
        }
        if !(self.peak_intensity > T::zero() && self.peak_intensity <= T::one()) {
            return Err(Error::validation("peak_intensity", "must lie in (0, 1]"));
        }
        if !(self.spread_cells > T::zero()) {
            return Err(Error::validation("spread_cells", "must be positive"));
        }
        Ok(())
    }

    pub fn position(&self, timestep: u16) -> (T, T) {
        let t = T::lit(timestep as f64);
        (
            self.start_row + self.velocity.0 * t,
            self.start_col + self.velocity.1 * t,
        )
    }
}

/// A generated frame together with the truth that produced it.
#[derive(Debug, Clone)]
pub struct SynthFrame<T: Real> {
    pub record: FrameRecord<T>,
    pub objects: Vec<SynthObject<T>>,
    pub clutter: Vec<SynthObject<T>>,
    /// `bump_centers[t][i]`: rendered center of `objects[i]` at timestep `t`,
    /// `None` once the object has left the grid.
    pub bump_centers: Vec<Vec<Option<(T, T)>>>,
}

pub fn generate_dataset<T: Real>(config: &SynthConfig) -> Result<Vec<FrameRecord<T>>> {
    let frames = generate_dataset_with_truth::<T>(config)?;
    Ok(frames.into_iter().map(|f| f.record).collect())
}

pub fn generate_dataset_with_truth<T: Real>(config: &SynthConfig) -> Result<Vec<SynthFrame<T>>> {
    config.validate()?;
    let episodes = (0..config.num_episodes)
        .into_par_iter()
        .map(|e| generate_episode::<T>(config, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(episodes.into_iter().flatten().collect())
}

/// Generates one episode from its own RNG stream derived from `(rng_seed, episode)`.
pub fn generate_episode<T: Real>(config: &SynthConfig, episode: usize) -> Result<Vec<SynthFrame<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(episode as u64);
    (0..config.frames_per_episode)
        .map(|f| generate_frame(config, episode, f, &mut rng))
        .collect()
}

fn generate_frame<T: Real>(
    config: &SynthConfig,
    episode: usize,
    frame: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SynthFrame<T>> {
    let meta = cast_meta::<T>(&config.meta);
    let prior = &config.objects;
    let steps = config.meta.num_future_steps;

    let n_objects = poisson(rng, config.objects_per_frame_mean);
    let n_clutter = poisson(rng, config.clutter_per_frame_mean);

    let mut placed: Vec<SynthObject<T>> = Vec::new();
    let mut objects = Vec::new();
    let mut clutter = Vec::new();
    for i in 0..n_objects + n_clutter {
        let is_clutter = i >= n_objects;
        let (peak_lo, peak_hi) = if is_clutter {
            (prior.clutter_peak_min, prior.clutter_peak_max)
        } else {
            (prior.peak_min, prior.peak_max)
        };
        if let Some(mut obj) = sample_object::<T>(config, rng, &placed, peak_lo, peak_hi) {
            obj.object_id = if is_clutter { clutter.len() } else { objects.len() } as u32;
            placed.push(obj.clone());
            if is_clutter {
                clutter.push(obj);
            } else {
                objects.push(obj);
            }
        }
    }

    let jitter_sd = prior.location_jitter;
    let mut grids = Vec::with_capacity(steps as usize + 1);
    let mut annotations = Vec::with_capacity(steps as usize + 1);
    let mut bump_centers = Vec::with_capacity(steps as usize + 1);
    let mut alive = vec![true; objects.len() + clutter.len()];
    for t in 0..=steps {
        let mut bumps = Vec::new();
        let mut instances = Vec::new();
        let mut centers = Vec::with_capacity(objects.len());
        for (k, obj) in objects.iter().chain(clutter.iter()).enumerate() {
            // Draw jitter unconditionally so the RNG stream does not depend on survival.
            let jr: f64 = rng.sample(StandardNormal);
            let jc: f64 = rng.sample(StandardNormal);
            let pos = obj.position(t);
            alive[k] = alive[k] && in_grid(&meta, pos);
            let is_object = k < objects.len();
            if !alive[k] {
                if is_object {
                    centers.push(None);
                }
                continue;
            }
            let sd = obj.spread_cells * T::lit(jitter_sd);
            let center = (pos.0 + sd * T::lit(jr), pos.1 + sd * T::lit(jc));
            bumps.push(Bump {
                center,
                peak: obj.peak_intensity,
                spread: obj.spread_cells,
            });
            if is_object {
                centers.push(Some(center));
                let pixels = footprint_pixels(&meta, pos, obj.pixel_footprint);
                if !pixels.is_empty() {
                    instances.push(AnnotatedObject::from_pixels(obj.object_id, pixels)?);
                }
            }
        }
        let field = render_field(&meta, &bumps, T::lit(config.occupancy_noise));
        let cells = field.into_iter().map(|q| config.distortion.apply(q)).collect();
        grids.push(ProbGrid::new(meta, t, cells)?);
        annotations.push(AnnotationMask::from_instances(meta, t, instances)?);
        bump_centers.push(centers);
    }

    let record = FrameRecord::new(
        config.frame_id(episode, frame),
        config.episode_id(episode),
        grids,
        annotations,
    )?;
    Ok(SynthFrame {
        record,
        objects,
        clutter,
        bump_centers,
    })
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

fn sample_object<T: Real>(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    placed: &[SynthObject<T>],
    peak_lo: f64,
    peak_hi: f64,
) -> Option<SynthObject<T>> {
    const MAX_TRIES: usize = 50;
    let prior = &config.objects;
    let m = prior.margin_cells;
    let h = config.meta.height_cells as f64 - 1.0;
    let w = config.meta.width_cells as f64 - 1.0;
    for _ in 0..MAX_TRIES {
        let row = rng.random_range(m..=h - m);
        let col = rng.random_range(m..=w - m);
        let v = prior.max_speed_cells;
        let (vr, vc) = if v > 0.0 {
            (rng.random_range(-v..=v), rng.random_range(-v..=v))
        } else {
            (0.0, 0.0)
        };
        let peak = rng.random_range(peak_lo..=peak_hi);
        let spread = rng.random_range(prior.spread_min..=prior.spread_max);
        let candidate = SynthObject {
            object_id: 0,
            start_row: T::lit(row),
            start_col: T::lit(col),
            velocity: (T::lit(vr), T::lit(vc)),
            pixel_footprint: prior.pixel_footprint,
            peak_intensity: T::lit(peak),
            spread_cells: T::lit(spread),
        };
        let sep = T::lit(prior.min_separation_cells);
        let clear = placed.iter().all(|other| {
            (0..=config.meta.num_future_steps).all(|t| {
                let (a, b) = (candidate.position(t), other.position(t));
                ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= sep
            })
        });
        if clear {
            return Some(candidate);
        }
    }
    None
}

fn in_grid<T: Real>(meta: &GridMeta<T>, pos: (T, T)) -> bool {
    pos.0 >= T::zero()
        && pos.1 >= T::zero()
        && pos.0 <= T::from_usize_lossy(meta.height_cells - 1)
        && pos.1 <= T::from_usize_lossy(meta.width_cells - 1)
}

pub(crate) fn cast_meta<T: Real>(meta: &GridMeta<f64>) -> GridMeta<T> {
    GridMeta {
        height_cells: meta.height_cells,
        width_cells: meta.width_cells,
        cell_size_m: T::lit(meta.cell_size_m),
        ego_row: T::lit(meta.ego_row),
        ego_col: T::lit(meta.ego_col),
        num_future_steps: meta.num_future_steps,
        step_seconds: T::lit(meta.step_seconds),
    }
}

/// Isotropic Gaussian bump `peak * exp(-d^2 / (2 spread^2))`.
#[derive(Debug, Clone, Copy)]
pub struct Bump<T: Real> {
    pub center: (T, T),
    pub peak: T,
    pub spread: T,
}

/// Clipped sum of bumps plus constant background, row-major.
pub fn render_field<T: Real>(meta: &GridMeta<T>, bumps: &[Bump<T>], background: T) -> Vec<T> {
    let mut field = vec![T::zero(); meta.num_cells()];
    let two = T::lit(2.0);
    for b in bumps {
        let reach = b.spread * T::lit(BUMP_SUPPORT_SPREADS);
        let rect = CellRect::new(
            b.center.0 - reach,
            b.center.0 + reach,
            b.center.1 - reach,
            b.center.1 + reach,
        );
        let denom = two * b.spread * b.spread;
        for (r, c) in rect.cells(meta) {
            let dr = T::from_usize_lossy(r) - b.center.0;
            let dc = T::from_usize_lossy(c) - b.center.1;
            field[meta.index(r, c)] += b.peak * (-(dr * dr + dc * dc) / denom).exp();
        }
    }
    for q in &mut field {
        *q = (*q + background).min(T::one());
    }
    field
}

/// The `n` in-grid cells nearest `center`, ties broken by (row, col).
pub fn footprint_pixels<T: Real>(meta: &GridMeta<T>, center: (T, T), n: usize) -> Vec<(u16, u16)> {
    let reach = T::lit((n as f64).sqrt().ceil() + 2.0);
    let rect = CellRect::new(center.0 - reach, center.0 + reach, center.1 - reach, center.1 + reach);
    let mut cells: Vec<(T, usize, usize)> = rect
        .cells(meta)
        .into_iter()
        .map(|(r, c)| {
            let dr = T::from_usize_lossy(r) - center.0;
            let dc = T::from_usize_lossy(c) - center.1;
            (dr * dr + dc * dc, r, c)
        })
        .collect();
    cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cells
        .into_iter()
        .take(n)
        .map(|(_, r, c)| (r as u16, c as u16))
        .collect()
}

/// True iff any annotated pixel of any instance at timestep 0 lies in `region`.
pub fn oracle_presence<T: Real>(frame: &FrameRecord<T>, region: &CellRect<T>) -> bool {
    frame.annotations[0]
        .instances()
        .iter()
        .flat_map(|o| o.pixels())
        .any(|&(r, c)| region.contains(r as usize, c as usize))
}
