//! Metrics and baselines: normalized MAE, mission accuracy against the
//! dataset's mean travel distance, the historical-average baseline, and the
//! Table-style comparison report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::haversine_m;
use crate::ingest::{NormStats, ResampledSeries, WindowSample};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("mean_travel_distance: need >= 2 frames, got {0}")]
    TooShort(usize),
    #[error("mission_accuracy: mean travel distance is degenerate ({0} m)")]
    DegenerateDistance(f64),
    #[error("baseline_ha: empty training set")]
    EmptyTrain,
    #[error("compare: horizon sets differ across methods: {0}")]
    HorizonMismatch(String),
    #[error("compare: no reports")]
    Empty,
}

/// Predictions for one window: normalized (lat, lon) per bus per step,
/// laid out like [`WindowSample::target`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub l_out: usize,
    pub n_buses: usize,
    pub values: Vec<f64>,
}

impl Forecast {
    pub fn new(l_out: usize, n_buses: usize, values: Vec<f64>) -> Result<Self, EvalError> {
        if values.len() != l_out * n_buses * 2 {
            return Err(EvalError::Shape {
                op: "forecast",
                detail: format!(
                    "{} values for {l_out} steps x {n_buses} buses x 2",
                    values.len()
                ),
            });
        }
        Ok(Forecast {
            l_out,
            n_buses,
            values,
        })
    }

    /// Stacks per-step N x 2 model outputs.
    pub fn from_step_tensors(steps: &[Tensor]) -> Result<Self, EvalError> {
        let l_out = steps.len();
        let n_buses = steps.first().map(|t| t.shape()[0]).unwrap_or(0);
        let mut values = Vec::with_capacity(l_out * n_buses * 2);
        for t in steps {
            values.extend_from_slice(t.data());
        }
        Forecast::new(l_out, n_buses, values)
    }

    /// The ground truth of a window as a forecast (oracle injection).
    pub fn truth_of(sample: &WindowSample) -> Self {
        Forecast {
            l_out: sample.l_out,
            n_buses: sample.n_buses,
            values: sample.target.clone(),
        }
    }

    pub fn at(&self, t: usize, bus: usize, f: usize) -> f64 {
        self.values[(t * self.n_buses + bus) * 2 + f]
    }

    pub fn set(&mut self, t: usize, bus: usize, f: usize, v: f64) {
        self.values[(t * self.n_buses + bus) * 2 + f] = v;
    }
}

fn check_pairing(
    op: &'static str,
    preds: &[Forecast],
    windows: &[WindowSample],
) -> Result<(), EvalError> {
    if preds.len() != windows.len() {
        return Err(EvalError::Shape {
            op,
            detail: format!("{} forecasts vs {} windows", preds.len(), windows.len()),
        });
    }
    for (p, w) in preds.iter().zip(windows) {
        if p.l_out != w.l_out || p.n_buses != w.n_buses {
            return Err(EvalError::Shape {
                op,
                detail: format!(
                    "forecast {}x{} vs window {}x{}",
                    p.l_out, p.n_buses, w.l_out, w.n_buses
                ),
            });
        }
    }
    Ok(())
}

/// Mean absolute error over every step, bus, and coordinate of every
/// window, in normalized units.
pub fn mae(preds: &[Forecast], windows: &[WindowSample]) -> Result<f64, EvalError> {
    check_pairing("mae", preds, windows)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, w) in preds.iter().zip(windows) {
        for (pv, tv) in p.values.iter().zip(&w.target) {
            total += (pv - tv).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(EvalError::Shape {
            op: "mae",
            detail: "no elements".into(),
        });
    }
    Ok(total / count as f64)
}

/// Mean haversine displacement between consecutive model-step frames over
/// all buses, observed frames only. This is the scale the mission-accuracy
/// margin multiplies.
pub fn mean_travel_distance(series: &[ResampledSeries]) -> Result<f64, EvalError> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut frames_seen = 0usize;
    for s in series {
        frames_seen = frames_seen.max(s.len());
        for i in 1..s.len() {
            if s.observed[i - 1] && s.observed[i] {
                total += haversine_m(
                    (s.frames[i - 1][0], s.frames[i - 1][1]),
                    (s.frames[i][0], s.frames[i][1]),
                );
                count += 1;
            }
        }
    }
    if frames_seen < 2 {
        return Err(EvalError::TooShort(frames_seen));
    }
    if count == 0 {
        return Err(EvalError::TooShort(1));
    }
    Ok(total / count as f64)
}

/// Whether a trajectory (or each point) must beat the margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyGranularity {
    /// A (window, bus) trajectory counts iff its mean per-step error is
    /// within the margin.
    Trajectory,
    /// Every (window, bus, step) point is judged independently.
    Point,
}

impl Default for AccuracyGranularity {
    fn default() -> Self {
        AccuracyGranularity::Trajectory
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissionAccuracyConfig {
    /// Error margin as a fraction of the mean travel distance.
    pub margin: f64,
    pub mean_travel_distance_m: f64,
    pub granularity: AccuracyGranularity,
}

impl MissionAccuracyConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.mean_travel_distance_m > 0.0) {
            return Err(EvalError::DegenerateDistance(self.mean_travel_distance_m));
        }
        Ok(())
    }

    pub fn threshold_m(&self) -> f64 {
        self.margin * self.mean_travel_distance_m
    }
}

/// Fraction of correct predictions: both sides are denormalized and a
/// trajectory (default) counts as correct iff its mean per-step haversine
/// error stays within `margin * mean_travel_distance`.
pub fn mission_accuracy(
    preds: &[Forecast],
    windows: &[WindowSample],
    config: &MissionAccuracyConfig,
    stats: &NormStats,
) -> Result<f64, EvalError> {
    check_pairing("mission_accuracy", preds, windows)?;
    config.validate()?;
    let threshold = config.threshold_m();

    let mut correct = 0usize;
    let mut total = 0usize;
    for (p, w) in preds.iter().zip(windows) {
        for bus in 0..w.n_buses {
            match config.granularity {
                AccuracyGranularity::Trajectory => {
                    let mut err_sum = 0.0;
                    for t in 0..w.l_out {
                        err_sum += point_error_m(p, w, t, bus, stats);
                    }
                    let mean_err = err_sum / w.l_out as f64;
                    total += 1;
                    if mean_err <= threshold {
                        correct += 1;
                    }
                }
                AccuracyGranularity::Point => {
                    for t in 0..w.l_out {
                        total += 1;
                        if point_error_m(p, w, t, bus, stats) <= threshold {
                            correct += 1;
                        }
                    }
                }
            }
        }
    }
    if total == 0 {
        return Err(EvalError::Shape {
            op: "mission_accuracy",
            detail: "no trajectories".into(),
        });
    }
    Ok(correct as f64 / total as f64)
}

fn point_error_m(p: &Forecast, w: &WindowSample, t: usize, bus: usize, stats: &NormStats) -> f64 {
    let pred = (
        stats.denormalize(0, p.at(t, bus, 0)),
        stats.denormalize(1, p.at(t, bus, 1)),
    );
    let truth = (
        stats.denormalize(0, w.target_at(t, bus, 0)),
        stats.denormalize(1, w.target_at(t, bus, 1)),
    );
    haversine_m(pred, truth)
}

/// Mean haversine error in meters over every predicted point, for
/// interpretability alongside the normalized MAE.
pub fn mean_error_meters(
    preds: &[Forecast],
    windows: &[WindowSample],
    stats: &NormStats,
) -> Result<f64, EvalError> {
    check_pairing("mean_error_meters", preds, windows)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, w) in preds.iter().zip(windows) {
        for bus in 0..w.n_buses {
            for t in 0..w.l_out {
                total += point_error_m(p, w, t, bus, stats);
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

// ── Historical-average baseline ─────────────────────────────────────────

/// Per-offset, per-bus, per-coordinate averages of the training targets.
/// Predictions are the same for every test window.
#[derive(Debug, Clone, PartialEq)]
pub struct HaBaseline {
    l_out: usize,
    n_buses: usize,
    averages: Vec<f64>,
}

pub fn baseline_ha(train_windows: &[WindowSample]) -> Result<HaBaseline, EvalError> {
    let first = train_windows.first().ok_or(EvalError::EmptyTrain)?;
    let (l_out, n_buses) = (first.l_out, first.n_buses);
    let mut averages = vec![0.0; l_out * n_buses * 2];
    for w in train_windows {
        if w.l_out != l_out || w.n_buses != n_buses {
            return Err(EvalError::Shape {
                op: "baseline_ha",
                detail: "inconsistent window shapes".into(),
            });
        }
        for (acc, v) in averages.iter_mut().zip(&w.target) {
            *acc += v;
        }
    }
    let n = train_windows.len() as f64;
    for acc in &mut averages {
        *acc /= n;
    }
    Ok(HaBaseline {
        l_out,
        n_buses,
        averages,
    })
}

impl HaBaseline {
    pub fn predict(&self, _window: &WindowSample) -> Forecast {
        Forecast {
            l_out: self.l_out,
            n_buses: self.n_buses,
            values: self.averages.clone(),
        }
    }
}

// ── Comparison report ───────────────────────────────────────────────────

/// One method's scores at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub horizon_minutes: u32,
    pub mae: f64,
    pub mission_accuracy: f64,
    pub mean_error_m: f64,
    pub n_windows: usize,
    pub config_digest: String,
}

/// Published reference results for side-by-side context (rendered only on
/// request; never part of any computation).
pub const REFERENCE_RESULTS: [(&str, f64, f64, f64, f64); 4] = [
    // method, 15-min MAE, 15-min accuracy, 25-min MAE, 25-min accuracy
    ("Gat+HA (reported)", 0.6494, 0.3097, 0.4866, 0.1812),
    ("Gat+LSTM (reported)", 0.1427, 0.4612, 0.2236, 0.3516),
    ("Gat+GRU (reported)", 0.0605, 0.7792, 0.1660, 0.6319),
    ("GSMT (reported)", 0.0515, 0.8812, 0.1510, 0.6612),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub granularity: AccuracyGranularity,
    pub rows: Vec<MethodReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub reference_rows: Vec<MethodReport>,
}

/// Merges per-method, per-horizon reports into one table. Every method
/// must cover the same horizon set.
pub fn compare(
    reports: Vec<MethodReport>,
    granularity: AccuracyGranularity,
    include_reference: bool,
) -> Result<ComparisonTable, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut horizons_by_method: Vec<(String, Vec<u32>)> = Vec::new();
    for r in &reports {
        match horizons_by_method.iter_mut().find(|(m, _)| *m == r.method) {
            Some((_, hs)) => hs.push(r.horizon_minutes),
            None => horizons_by_method.push((r.method.clone(), vec![r.horizon_minutes])),
        }
    }
    for (_, hs) in &mut horizons_by_method {
        hs.sort_unstable();
    }
    let expect = &horizons_by_method[0].1;
    for (m, hs) in &horizons_by_method[1..] {
        if hs != expect {
            return Err(EvalError::HorizonMismatch(format!(
                "{} has {hs:?}, {} has {expect:?}",
                m, horizons_by_method[0].0
            )));
        }
    }

    let reference_rows = if include_reference {
        let mut rows = Vec::new();
        for (method, mae15, acc15, mae25, acc25) in REFERENCE_RESULTS {
            for (h, mae, acc) in [(15, mae15, acc15), (25, mae25, acc25)] {
                if expect.contains(&h) {
                    rows.push(MethodReport {
                        method: method.to_string(),
                        horizon_minutes: h,
                        mae,
                        mission_accuracy: acc,
                        mean_error_m: f64::NAN,
                        n_windows: 0,
                        config_digest: "reference".into(),
                    });
                }
            }
        }
        rows
    } else {
        Vec::new()
    };

    Ok(ComparisonTable {
        granularity,
        rows: reports,
        reference_rows,
    })
}

impl ComparisonTable {
    /// Horizons covered, ascending.
    fn horizons(&self) -> Vec<u32> {
        let mut hs: Vec<u32> = self.rows.iter().map(|r| r.horizon_minutes).collect();
        hs.sort_unstable();
        hs.dedup();
        hs
    }

    fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    fn row_for(&self, method: &str, horizon: u32) -> Option<&MethodReport> {
        self.rows
            .iter()
            .chain(&self.reference_rows)
            .find(|r| r.method == method && r.horizon_minutes == horizon)
    }

    /// Plain-text table, methods as rows, (MAE, mission accuracy) per
    /// horizon as column groups.
    pub fn render_text(&self) -> String {
        let horizons = self.horizons();
        let mut methods = self.methods();
        let ref_methods: Vec<&str> = self
            .reference_rows
            .iter()
            .map(|r| r.method.as_str())
            .collect();
        for m in ref_methods {
            if !methods.contains(&m) {
                methods.push(m);
            }
        }

        let name_width = methods
            .iter()
            .map(|m| m.len())
            .max()
            .unwrap_or(6)
            .max("Method".len());
        let mut out = String::new();
        out.push_str(&format!("{:<name_width$}", "Method"));
        for h in &horizons {
            out.push_str(&format!("  {:>10} {:>9}", format!("{h}min MAE"), "Accuracy"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(name_width + horizons.len() * 23));
        out.push('\n');
        for m in methods {
            out.push_str(&format!("{m:<name_width$}"));
            for &h in &horizons {
                match self.row_for(m, h) {
                    Some(r) => out.push_str(&format!(
                        "  {:>10.4} {:>8.2}%",
                        r.mae,
                        r.mission_accuracy * 100.0
                    )),
                    None => out.push_str(&format!("  {:>10} {:>9}", "-", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}
