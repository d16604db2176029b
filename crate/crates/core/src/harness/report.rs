//! Success tables, trajectory statistics and SVG overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrialResult;
use crate::error::Result;
use crate::modelcore::Variant;
use crate::stacksim::{Position, WORLD_HEIGHT, WORLD_WIDTH};

/// Published average success rates at three times teaching speed.
pub const PAPER_AVERAGE: [(Variant, f64); 4] =
    [(Variant::Sarnn, 0.0), (Variant::Hsarnn, 52.0), (Variant::Sarnnst, 78.0), (Variant::Hsarnnst, 94.0)];

pub fn paper_average(v: Variant) -> f64 {
    PAPER_AVERAGE.iter().find(|(p, _)| *p == v).map(|(_, r)| *r).expect("every variant listed")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub position: Position,
    pub successes: usize,
    pub trials: usize,
}

/// `100 * successes / trials`; `None` without trials.
pub fn rate(successes: usize, trials: usize) -> Option<f64> {
    (trials > 0).then(|| 100.0 * successes as f64 / trials as f64)
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_string(), |v| format!("{v}"))
}

/// Trials of one variant at one position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub variant: Variant,
    pub position: Position,
    pub trials: Vec<TrialResult>,
}

impl TrialSet {
    pub fn cell(&self) -> Cell {
        Cell {
            variant: self.variant,
            position: self.position,
            successes: self.trials.iter().filter(|t| t.success).count(),
            trials: self.trials.len(),
        }
    }

    /// Per-step average hand position over trials.
    pub fn mean_trajectory(&self) -> Vec<[f64; 2]> {
        let Some(len) = self.trials.iter().map(|t| t.trajectory.len()).min() else {
            return Vec::new();
        };
        let n = self.trials.len() as f64;
        (0..len)
            .map(|i| {
                let (y, z) =
                    self.trials.iter().fold((0.0, 0.0), |(y, z), t| (y + t.trajectory[i][0], z + t.trajectory[i][1]));
                [y / n, z / n]
            })
            .collect()
    }

    /// Mean over steps of the RMS distance of trials from the mean
    /// trajectory, in meters. `None` with fewer than two trials.
    pub fn trajectory_std(&self) -> Option<f64> {
        if self.trials.len() < 2 {
            return None;
        }
        let mean = self.mean_trajectory();
        if mean.is_empty() {
            return None;
        }
        let n = self.trials.len() as f64;
        let total: f64 = mean
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let var: f64 = self
                    .trials
                    .iter()
                    .map(|t| {
                        let (dy, dz) = (t.trajectory[i][0] - m[0], t.trajectory[i][1] - m[1]);
                        dy * dy + dz * dz
                    })
                    .sum::<f64>()
                    / n;
                var.sqrt()
            })
            .sum();
        Some(total / mean.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub variant: Variant,
    pub position: Position,
    pub trajectory_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpread {
    pub variant: Variant,
    pub sigma: f64,
    pub seeds: usize,
    /// Mean standard deviation of predicted motion across noise seeds.
    pub motion_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub name: String,
    /// `None` when an operand is missing.
    pub holds: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub speed: f64,
    pub noise: f64,
    pub cells: Vec<Cell>,
    pub spreads: Vec<Spread>,
    pub noise_spread: Vec<NoiseSpread>,
    pub trends: Vec<Trend>,
}

impl AblationReport {
    pub fn build(sets: &[TrialSet], speed: f64, noise: f64, noise_spread: Vec<NoiseSpread>) -> Self {
        let cells: Vec<Cell> = sets.iter().map(TrialSet::cell).collect();
        let spreads = sets
            .iter()
            .map(|s| Spread { variant: s.variant, position: s.position, trajectory_std: s.trajectory_std() })
            .collect();
        let mut report = Self { speed, noise, cells, spreads, noise_spread, trends: Vec::new() };
        report.trends = report.compute_trends();
        report
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.variant) {
                out.push(c.variant);
            }
        }
        out
    }

    /// Mean success rate of a variant over all its trials.
    pub fn mean_rate(&self, v: Variant) -> Option<f64> {
        let (s, n) =
            self.cells.iter().filter(|c| c.variant == v).fold((0, 0), |(s, n), c| (s + c.successes, n + c.trials));
        rate(s, n)
    }

    pub fn spread(&self, v: Variant, p: Position) -> Option<f64> {
        self.spreads.iter().find(|s| s.variant == v && s.position == p).and_then(|s| s.trajectory_std)
    }

    fn compute_trends(&self) -> Vec<Trend> {
        use Variant::*;
        let ge = |a: Variant, b: Variant| Some(self.mean_rate(a)? >= self.mean_rate(b)?);
        let mut trends = vec![
            Trend { name: "rate HSARNNST >= SARNN".into(), holds: ge(Hsarnnst, Sarnn) },
            Trend { name: "rate HSARNNST >= SARNNST".into(), holds: ge(Hsarnnst, Sarnnst) },
            Trend { name: "rate SARNNST >= HSARNN".into(), holds: ge(Sarnnst, Hsarnn) },
            Trend { name: "rate HSARNN >= SARNN".into(), holds: ge(Hsarnn, Sarnn) },
            Trend { name: "rate SARNNST >= SARNN".into(), holds: ge(Sarnnst, Sarnn) },
            Trend {
                name: "trajectory std at C: SARNNST <= SARNN".into(),
                holds: (|| Some(self.spread(Sarnnst, Position::C)? <= self.spread(Sarnn, Position::C)?))(),
            },
        ];
        let noise = |v: Variant| self.noise_spread.iter().find(|n| n.variant == v).map(|n| n.motion_std);
        trends.push(Trend {
            name: "noise motion std: HSARNNST <= SARNNST".into(),
            holds: (|| Some(noise(Hsarnnst)? <= noise(Sarnnst)?))(),
        });
        trends
    }

    pub fn trend(&self, name: &str) -> Option<bool> {
        self.trends.iter().find(|t| t.name == name).and_then(|t| t.holds)
    }

    /// `variant,position,successes,trials,rate` rows, then a `mean` row and
    /// a `paper` reference row per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,position,successes,trials,rate\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.variant,
                c.position,
                c.successes,
                c.trials,
                fmt_rate(rate(c.successes, c.trials))
            );
        }
        for v in self.variants() {
            let (s, n) =
                self.cells.iter().filter(|c| c.variant == v).fold((0, 0), |(s, n), c| (s + c.successes, n + c.trials));
            let _ = writeln!(out, "{v},mean,{s},{n},{}", fmt_rate(rate(s, n)));
        }
        for v in self.variants() {
            let _ = writeln!(out, "{v},paper,-,-,{}", paper_average(v));
        }
        out
    }
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN: f64 = 40.0;

pub fn variant_color(v: Variant) -> &'static str {
    match v {
        Variant::Sarnn => "#d62728",
        Variant::Hsarnn => "#ff7f0e",
        Variant::Sarnnst => "#2ca02c",
        Variant::Hsarnnst => "#1f77b4",
    }
}

fn to_px(p: [f64; 2]) -> (f64, f64) {
    let sx = (SVG_W - 2.0 * MARGIN) / WORLD_WIDTH;
    let sz = (SVG_H - 2.0 * MARGIN - 20.0) / WORLD_HEIGHT;
    (MARGIN + p[0] * sx, SVG_H - MARGIN - p[1] * sz)
}

fn polyline(points: &[[f64; 2]]) -> String {
    let mut s = String::new();
    for (i, &p) in points.iter().enumerate() {
        let (x, y) = to_px(p);
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s
}

/// Hand trajectories at one position: every trial dotted, the per-variant
/// mean solid.
pub fn trajectory_svg(position: Position, sets: &[&TrialSet]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let trials = sets.iter().map(|t| t.trials.len()).max().unwrap_or(0);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="22" font-family="sans-serif" font-size="13">Hand trajectories at position {position}: dotted lines are the {trials} trials, solid lines the average trajectory</text>"#
    );
    let (x0, y0) = to_px([0.0, 0.0]);
    let (x1, y1) = to_px([WORLD_WIDTH, WORLD_HEIGHT]);
    let _ = writeln!(
        s,
        r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#999"/>"##,
        x1 - x0,
        y0 - y1
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">y [m]</text>"#,
        (x0 + x1) / 2.0,
        y0 + 28.0
    );
    let _ =
        writeln!(s, r#"<text x="12" y="{:.2}" font-family="sans-serif" font-size="11">z [m]</text>"#, (y0 + y1) / 2.0);
    for (i, set) in sets.iter().enumerate() {
        let color = variant_color(set.variant);
        let _ = writeln!(s, r#"<g data-variant="{}">"#, set.variant);
        for t in &set.trials {
            let _ = writeln!(
                s,
                r#"<polyline class="trial" fill="none" stroke="{color}" stroke-width="1" stroke-dasharray="2,3" stroke-opacity="0.6" points="{}"/>"#,
                polyline(&t.trajectory)
            );
        }
        let mean = set.mean_trajectory();
        if !mean.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline class="mean" fill="none" stroke="{color}" stroke-width="2.5" points="{}"/>"#,
                polyline(&mean)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            SVG_W - MARGIN - 90.0,
            y1 + 16.0 + 16.0 * i as f64,
            set.variant
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one `trajectories_<pos>.svg` per position present in `sets`.
pub fn write_trajectory_svgs(sets: &[TrialSet], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for p in Position::ALL {
        let at: Vec<&TrialSet> = sets.iter().filter(|s| s.position == p).collect();
        if at.is_empty() {
            continue;
        }
        let path = dir.join(format!("trajectories_{p}.svg"));
        fs::write(&path, trajectory_svg(p, &at))?;
        paths.push(path);
    }
    Ok(paths)
}
