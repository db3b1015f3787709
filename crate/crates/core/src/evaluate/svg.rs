use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{DetectedObject, FrameRecord};
use crate::region::RegionSpec;
use crate::scalar::Real;
use crate::uncertainty::chi2_2dof_quantile;

use super::ReliabilityReport;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisScale {
    Linear,
    /// Base-10 logarithmic axes; values below `min` are drawn at `min`.
    Log { min: f64 },
}

impl AxisScale {
    /// Log axes starting at the decade below the smallest positive bin value.
    pub fn log_for(report: &ReliabilityReport) -> Self {
        let smallest = report
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .flat_map(|b| [b.mean_confidence, b.empirical_frequency, b.lo])
            .filter(|v| *v > 0.0)
            .fold(1.0f64, f64::min);
        let decade = smallest.log10().floor().clamp(-12.0, -1.0);
        AxisScale::Log { min: 10f64.powf(decade) }
    }

    /// Position in [0, 1] along the axis.
    fn position(&self, v: f64) -> f64 {
        match *self {
            AxisScale::Linear => v.clamp(0.0, 1.0),
            AxisScale::Log { min } => {
                let v = v.clamp(min, 1.0);
                (v.log10() - min.log10()) / -min.log10()
            }
        }
    }
}

const PLOT: f64 = 300.0;
const HIST: f64 = 80.0;
const LEFT: f64 = 50.0;
const TOP: f64 = 20.0;
const GAP: f64 = 30.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Reliability diagram: per-bin bars with slope-1 roofs through
/// (mean confidence, frequency), a red dot per non-empty bin, the diagonal,
/// and a log-count histogram panel beneath.
pub fn reliability_svg(report: &ReliabilityReport, title: &str, scale: AxisScale) -> String {
    let width = LEFT + PLOT + 20.0;
    let height = TOP + PLOT + GAP + HIST + 30.0;
    let x = |v: f64| LEFT + scale.position(v) * PLOT;
    let y = |v: f64| TOP + PLOT - scale.position(v) * PLOT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="14" font-size="12" text-anchor="middle">{}</text>"#, LEFT + PLOT / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect class="frame" x="{LEFT}" y="{TOP}" width="{PLOT}" height="{PLOT}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line class="diagonal" x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    for b in &report.bins {
        let (lo, hi) = (b.lo, b.hi.max(b.lo));
        let (roof_lo, roof_hi) = if b.count > 0 {
            let f = |v: f64| (b.empirical_frequency + v - b.mean_confidence).clamp(0.0, 1.0);
            (f(lo), f(hi))
        } else {
            (lo, hi)
        };
        if b.count > 0 {
            let _ = writeln!(
                s,
                r#"<polygon class="bar" points="{:.3},{:.3} {:.3},{:.3} {:.3},{:.3} {:.3},{:.3}" fill="steelblue" fill-opacity="0.5" stroke="steelblue"/>"#,
                x(lo),
                y(0.0),
                x(lo),
                y(roof_lo),
                x(hi),
                y(roof_hi),
                x(hi),
                y(0.0)
            );
        }
        let _ = writeln!(
            s,
            r#"<line class="roof" x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="navy" stroke-width="2"/>"#,
            x(lo),
            y(roof_lo),
            x(hi),
            y(roof_hi)
        );
        if b.count > 0 {
            let _ = writeln!(
                s,
                r#"<circle class="dot" cx="{:.3}" cy="{:.3}" r="3" fill="red"/>"#,
                x(b.mean_confidence),
                y(b.empirical_frequency)
            );
        }
    }
    let ticks: Vec<f64> = match scale {
        AxisScale::Linear => (0..=5).map(|i| i as f64 / 5.0).collect(),
        AxisScale::Log { min } => {
            let decades = (-min.log10()).round() as i32;
            (0..=decades).map(|d| 10f64.powi(-d)).collect()
        }
    };
    for t in ticks {
        let _ = writeln!(
            s,
            r#"<text class="tick" x="{:.3}" y="{:.3}" font-size="9" text-anchor="middle">{t}</text>"#,
            x(t),
            TOP + PLOT + 12.0
        );
        let _ = writeln!(
            s,
            r#"<text class="tick" x="{:.3}" y="{:.3}" font-size="9" text-anchor="end">{t}</text>"#,
            LEFT - 4.0,
            y(t) + 3.0
        );
    }
    let hist_top = TOP + PLOT + GAP;
    let _ = writeln!(
        s,
        r#"<rect class="histogram-frame" x="{LEFT}" y="{hist_top}" width="{PLOT}" height="{HIST}" fill="none" stroke="black"/>"#
    );
    let max_count = report.bins.iter().map(|b| b.count).max().unwrap_or(0);
    let log_max = (1.0 + max_count as f64).ln().max(f64::MIN_POSITIVE);
    let slot = PLOT / report.bins.len().max(1) as f64;
    for (i, b) in report.bins.iter().enumerate() {
        let h = (1.0 + b.count as f64).ln() / log_max * HIST;
        let _ = writeln!(
            s,
            r#"<rect class="hist" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="gray"><title>{}</title></rect>"#,
            LEFT + i as f64 * slot + 1.0,
            hist_top + HIST - h,
            (slot - 2.0).max(0.5),
            h,
            b.count
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_reliability_svg(report: &ReliabilityReport, title: &str, scale: AxisScale, path: &Path) -> Result<()> {
    std::fs::write(path, reliability_svg(report, title, scale)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneStyle {
    /// Natural-log probability below which cells take the floor color.
    pub clip_log: f64,
    /// Mass of the drawn location ellipses.
    pub ellipse_mass: f64,
    /// Pixels per cell.
    pub cell_px: f64,
}

impl Default for SceneStyle {
    fn default() -> Self {
        SceneStyle { clip_log: -12.0, ellipse_mass: 0.99, cell_px: 3.0 }
    }
}

fn colormap(t: f64) -> (u8, u8, u8) {
    // Dark purple to teal to yellow.
    let stops = [(0.0, (68.0, 1.0, 84.0)), (0.5, (33.0, 145.0, 140.0)), (1.0, (253.0, 231.0, 37.0))];
    let t = t.clamp(0.0, 1.0);
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let u = (t - a.0) / (b.0 - a.0);
    let lerp = |p: f64, q: f64| (p + u * (q - p)).round() as u8;
    (lerp(a.1 .0, b.1 .0), lerp(a.1 .1, b.1 .1), lerp(a.1 .2, b.1 .2))
}

/// Grid raster in clipped log scale with detection ellipses, dashed region
/// rectangles and the ego marker. Forward (increasing row) points up.
pub fn scene_svg<T: Real>(
    frame: &FrameRecord<T>,
    timestep: u16,
    detections: &[DetectedObject<T>],
    regions: &[RegionSpec],
    style: &SceneStyle,
) -> Result<String> {
    let grid = frame
        .grid(timestep)
        .ok_or_else(|| Error::validation("timestep", format!("frame {} has no timestep {timestep}", frame.frame_id)))?;
    let meta = grid.meta();
    let (h, w) = (meta.height_cells, meta.width_cells);
    let px = style.cell_px;
    let (width, height) = (w as f64 * px, h as f64 * px);
    // Cell (r, c) occupies the square centred at (c, h - 1 - r) in cell units.
    let sx = |c: f64| (c + 0.5) * px;
    let sy = |r: f64| (h as f64 - 1.0 - r + 0.5) * px;
    let (fr, fg, fb) = colormap(0.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<title>{} t={timestep}</title>"#, escape(&frame.frame_id));
    let _ = writeln!(s, r#"<rect class="floor" x="0" y="0" width="{width}" height="{height}" fill="rgb({fr},{fg},{fb})"/>"#);
    for (r, c, p) in grid.iter() {
        let lp = p.f64().ln();
        if !(lp > style.clip_log) {
            continue;
        }
        let (cr, cg, cb) = colormap((lp - style.clip_log) / -style.clip_log);
        let _ = writeln!(
            s,
            r#"<rect class="cell" x="{:.2}" y="{:.2}" width="{px}" height="{px}" fill="rgb({cr},{cg},{cb})"/>"#,
            sx(c as f64) - px / 2.0,
            sy(r as f64) - px / 2.0
        );
    }
    let radius = chi2_2dof_quantile(style.ellipse_mass).sqrt();
    for d in detections {
        let Some(g) = d.location.get(&timestep) else { continue };
        let m = g.mean();
        let (l1, l2) = g.eigenvalues();
        let theta = g.major_axis_angle().f64();
        // Major axis (cos, sin) in (row, col) maps to (sin, -cos) on screen.
        let angle = (-theta.cos()).atan2(theta.sin()).to_degrees();
        let (cx, cy) = (sx(m[1].f64()), sy(m[0].f64()));
        let _ = writeln!(
            s,
            r#"<ellipse class="ellipse" cx="{cx:.3}" cy="{cy:.3}" rx="{:.3}" ry="{:.3}" transform="rotate({angle:.3} {cx:.3} {cy:.3})" fill="none" stroke="white" stroke-width="1.5"><title>detection {}</title></ellipse>"#,
            radius * l1.f64().sqrt() * px,
            radius * l2.f64().max(0.0).sqrt() * px,
            d.detection_id
        );
    }
    for region in regions {
        let rect = region.to_cell_rect(meta);
        let (x0, x1) = (sx(rect.col_min.f64()), sx(rect.col_max.f64()));
        let (y0, y1) = (sy(rect.row_max.f64()), sy(rect.row_min.f64()));
        let _ = writeln!(
            s,
            r#"<rect class="region" x="{x0:.3}" y="{y0:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="red" stroke-dasharray="6 4"><title>{}</title></rect>"#,
            x1 - x0,
            y1 - y0,
            escape(&region.name)
        );
    }
    let _ = writeln!(
        s,
        r#"<circle class="ego" cx="{:.3}" cy="{:.3}" r="{:.3}" fill="white" stroke="black"/>"#,
        sx(meta.ego_col.f64()),
        sy(meta.ego_row.f64()),
        (1.5 * px).max(2.0)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_scene_svg<T: Real>(
    frame: &FrameRecord<T>,
    timestep: u16,
    detections: &[DetectedObject<T>],
    regions: &[RegionSpec],
    style: &SceneStyle,
    path: &Path,
) -> Result<()> {
    let svg = scene_svg(frame, timestep, detections, regions, style)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
