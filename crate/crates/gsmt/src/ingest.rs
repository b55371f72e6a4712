//! GPS data engineering: parse raw records, clean and impute them, resample
//! onto a uniform time grid, normalize features, and slice sliding-window
//! training samples.
//!
//! The grid is shared across the whole fleet: `resample` computes one
//! `grid_start`/`grid_step` from the full record set so every bus's frame
//! `i` refers to the same instant. Buses without a fix near an instant get
//! a placeholder frame with `observed = false` until `impute` fills it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::haversine_m;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("gps csv: missing column `{0}`")]
    MissingColumn(String),
    #[error("gps csv line {line}: {detail}")]
    Row { line: u64, detail: String },
    #[error("gps csv: empty input (no data rows)")]
    EmptyInput,
    #[error("clean: all records dropped (bbox={bbox}, speed={speed}, min_fixes={min_fixes})")]
    EmptyAfterClean {
        bbox: usize,
        speed: usize,
        min_fixes: usize,
    },
    #[error("impute: bus `{0}` has zero observed frames")]
    CannotImpute(String),
    #[error("resample: {0}")]
    Resample(String),
    #[error("windows: series disagree on time grid: {0}")]
    GridMismatch(String),
    #[error("windows: {0}")]
    Window(String),
    #[error("split: {got} windows, need at least {need}")]
    TooFewWindows { got: usize, need: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

// ── Records and parsing ─────────────────────────────────────────────────

/// One raw GPS fix. Timestamps are UTC Unix seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsRecord {
    pub bus_id: String,
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub speed_kmh: f64,
}

pub const GPS_CSV_HEADER: [&str; 5] = ["bus_id", "timestamp", "lat", "lon", "speed_kmh"];

/// Parses the GPS CSV format (`bus_id,timestamp,lat,lon,speed_kmh`).
///
/// Timestamps may be Unix seconds or ISO-8601. Records come back sorted by
/// (bus_id, timestamp) with exact duplicates (same bus and timestamp)
/// collapsed, keeping the first occurrence.
pub fn parse_gps_csv<R: std::io::Read>(reader: R) -> Result<Vec<GpsRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    let mut col = [0usize; 5];
    for (i, name) in GPS_CSV_HEADER.iter().enumerate() {
        col[i] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| IngestError::MissingColumn((*name).to_string()))?;
    }

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<&str, IngestError> {
            row.get(col[i]).ok_or_else(|| IngestError::Row {
                line,
                detail: format!("missing field `{}`", GPS_CSV_HEADER[i]),
            })
        };
        let bus_id = field(0)?.to_string();
        if bus_id.is_empty() {
            return Err(IngestError::Row {
                line,
                detail: "empty bus_id".into(),
            });
        }
        let timestamp = parse_timestamp(field(1)?).map_err(|detail| IngestError::Row {
            line,
            detail,
        })?;
        let num = |i: usize| -> Result<f64, IngestError> {
            field(i)?.parse::<f64>().map_err(|e| IngestError::Row {
                line,
                detail: format!("bad `{}`: {e}", GPS_CSV_HEADER[i]),
            })
        };
        let (lat, lon, speed_kmh) = (num(2)?, num(3)?, num(4)?);
        if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
            return Err(IngestError::Row {
                line,
                detail: format!("lat {lat} outside [-90, 90]"),
            });
        }
        if !(-180.0..=180.0).contains(&lon) || !lon.is_finite() {
            return Err(IngestError::Row {
                line,
                detail: format!("lon {lon} outside [-180, 180]"),
            });
        }
        if !(speed_kmh >= 0.0) || !speed_kmh.is_finite() {
            return Err(IngestError::Row {
                line,
                detail: format!("speed {speed_kmh} must be >= 0"),
            });
        }
        records.push(GpsRecord {
            bus_id,
            timestamp,
            lat,
            lon,
            speed_kmh,
        });
    }
    if records.is_empty() {
        return Err(IngestError::EmptyInput);
    }

    records.sort_by(|a, b| {
        a.bus_id
            .cmp(&b.bus_id)
            .then_with(|| a.timestamp.cmp(&b.timestamp))
    });
    records.dedup_by(|later, first| later.bus_id == first.bus_id && later.timestamp == first.timestamp);
    Ok(records)
}

fn parse_timestamp(s: &str) -> Result<i64, String> {
    if let Ok(secs) = s.parse::<i64>() {
        return Ok(secs);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|dt| dt.timestamp())
        .map_err(|e| format!("bad timestamp `{s}`: {e}"))
}

// ── Cleaning ────────────────────────────────────────────────────────────

/// Outlier rules: a geographic bounding box, a cap on the speed implied by
/// consecutive fixes, and a minimum surviving fix count per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanConfig {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    /// Cap for the speed implied between a fix and the previous kept fix.
    pub max_speed_kmh: f64,
    pub min_fixes_per_bus: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        // Loose box around the Klang Valley.
        CleanConfig {
            lat_min: 2.6,
            lat_max: 3.7,
            lon_min: 101.0,
            lon_max: 102.4,
            max_speed_kmh: 120.0,
            min_fixes_per_bus: 10,
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err("clean bbox is not well-ordered".into());
        }
        if !(self.max_speed_kmh > 0.0) {
            return Err("clean.max_speed_kmh must be > 0".into());
        }
        Ok(())
    }

    fn in_bbox(&self, r: &GpsRecord) -> bool {
        r.lat >= self.lat_min
            && r.lat <= self.lat_max
            && r.lon >= self.lon_min
            && r.lon <= self.lon_max
    }
}

/// Per-rule drop counts from one `clean` pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input: usize,
    pub kept: usize,
    pub dropped_bbox: usize,
    pub dropped_speed: usize,
    pub dropped_min_fixes: usize,
}

/// Drops fixes outside the bounding box, fixes whose implied speed from the
/// previous kept fix exceeds the cap, and buses left with too few fixes.
/// Idempotent: a second pass over its own output drops nothing.
pub fn clean(
    records: &[GpsRecord],
    config: &CleanConfig,
) -> Result<(Vec<GpsRecord>, CleanReport), IngestError> {
    let mut report = CleanReport {
        input: records.len(),
        ..CleanReport::default()
    };

    let mut by_bus: BTreeMap<&str, Vec<&GpsRecord>> = BTreeMap::new();
    for r in records {
        by_bus.entry(&r.bus_id).or_default().push(r);
    }

    let mut kept = Vec::new();
    for (_, fixes) in by_bus {
        let mut bus_kept: Vec<GpsRecord> = Vec::with_capacity(fixes.len());
        for fix in fixes {
            if !config.in_bbox(fix) {
                report.dropped_bbox += 1;
                continue;
            }
            if let Some(prev) = bus_kept.last() {
                let dt = (fix.timestamp - prev.timestamp) as f64;
                let dist = haversine_m((prev.lat, prev.lon), (fix.lat, fix.lon));
                let implied_kmh = if dt > 0.0 {
                    dist / dt * 3.6
                } else {
                    f64::INFINITY
                };
                if implied_kmh > config.max_speed_kmh {
                    report.dropped_speed += 1;
                    continue;
                }
            }
            bus_kept.push(fix.clone());
        }
        if bus_kept.len() < config.min_fixes_per_bus {
            report.dropped_min_fixes += bus_kept.len();
        } else {
            kept.extend(bus_kept);
        }
    }

    report.kept = kept.len();
    if kept.is_empty() {
        return Err(IngestError::EmptyAfterClean {
            bbox: report.dropped_bbox,
            speed: report.dropped_speed,
            min_fixes: report.dropped_min_fixes,
        });
    }
    Ok((kept, report))
}

// ── Resampling and imputation ───────────────────────────────────────────

/// A bus's observations aligned to the fleet-wide uniform grid. Frame `i`
/// holds (lat, lon, speed) at `grid_start + i * grid_step`; `observed[i]`
/// is false where the value was imputed (or not yet filled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledSeries {
    pub bus_id: String,
    pub grid_start: i64,
    pub grid_step: u32,
    pub frames: Vec<[f64; 3]>,
    pub observed: Vec<bool>,
}

impl ResampledSeries {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn time_at(&self, frame: usize) -> i64 {
        self.grid_start + frame as i64 * self.grid_step as i64
    }
}

/// Aligns every bus to one shared grid spanning the full record set. The
/// frame at instant `t` is the mean of the bus's fixes in
/// `[t - agg_window/2, t + agg_window/2)`; instants with no fixes are left
/// unobserved for `impute`.
pub fn resample(
    records: &[GpsRecord],
    grid_step: u32,
    agg_window: u32,
) -> Result<Vec<ResampledSeries>, IngestError> {
    if grid_step == 0 {
        return Err(IngestError::Resample("grid_step must be > 0".into()));
    }
    if agg_window < grid_step {
        return Err(IngestError::Resample(format!(
            "agg_window {agg_window} must be >= grid_step {grid_step}"
        )));
    }
    if records.is_empty() {
        return Err(IngestError::Resample("no records".into()));
    }

    let t_first = records.iter().map(|r| r.timestamp).min().unwrap();
    let t_last = records.iter().map(|r| r.timestamp).max().unwrap();
    let len = ((t_last - t_first) as f64 / grid_step as f64).ceil() as usize + 1;

    let mut by_bus: BTreeMap<&str, Vec<&GpsRecord>> = BTreeMap::new();
    for r in records {
        by_bus.entry(&r.bus_id).or_default().push(r);
    }

    let half = agg_window as f64 / 2.0;
    let mut out = Vec::with_capacity(by_bus.len());
    for (bus_id, fixes) in by_bus {
        let times: Vec<f64> = fixes.iter().map(|r| r.timestamp as f64).collect();
        let mut frames = vec![[0.0; 3]; len];
        let mut observed = vec![false; len];
        for (i, (frame, obs)) in frames.iter_mut().zip(&mut observed).enumerate() {
            let t = (t_first + i as i64 * grid_step as i64) as f64;
            let lo = times.partition_point(|&ft| ft < t - half);
            let hi = times.partition_point(|&ft| ft < t + half);
            if lo < hi {
                let mut acc = [0.0; 3];
                for fix in &fixes[lo..hi] {
                    acc[0] += fix.lat;
                    acc[1] += fix.lon;
                    acc[2] += fix.speed_kmh;
                }
                let n = (hi - lo) as f64;
                *frame = [acc[0] / n, acc[1] / n, acc[2] / n];
                *obs = true;
            }
        }
        out.push(ResampledSeries {
            bus_id: bus_id.to_string(),
            grid_start: t_first,
            grid_step,
            frames,
            observed,
        });
    }
    Ok(out)
}

/// Fills gaps: interior ones by per-feature linear interpolation between the
/// nearest observed neighbors, leading/trailing ones by holding the nearest
/// observed frame. The mask is preserved so downstream stages can tell
/// imputed frames apart.
pub fn impute(series: &ResampledSeries) -> Result<ResampledSeries, IngestError> {
    let observed_idx: Vec<usize> = (0..series.len()).filter(|&i| series.observed[i]).collect();
    if observed_idx.is_empty() {
        return Err(IngestError::CannotImpute(series.bus_id.clone()));
    }

    let mut frames = series.frames.clone();
    let (&first, &last) = (observed_idx.first().unwrap(), observed_idx.last().unwrap());
    for i in 0..first {
        frames[i] = frames[first];
    }
    for i in last + 1..frames.len() {
        frames[i] = frames[last];
    }
    for pair in observed_idx.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a <= 1 {
            continue;
        }
        for i in a + 1..b {
            let w = (i - a) as f64 / (b - a) as f64;
            for f in 0..3 {
                frames[i][f] = frames[a][f] + w * (frames[b][f] - frames[a][f]);
            }
        }
    }
    Ok(ResampledSeries {
        frames,
        ..series.clone()
    })
}

/// Keeps every `model_step`-th frame, scaling the grid step accordingly.
/// This is how a 1-minute smoothed grid becomes the model's 5-minute step.
pub fn decimate(series: &ResampledSeries, model_step: usize) -> Result<ResampledSeries, IngestError> {
    if model_step == 0 {
        return Err(IngestError::Resample("model_step must be >= 1".into()));
    }
    Ok(ResampledSeries {
        bus_id: series.bus_id.clone(),
        grid_start: series.grid_start,
        grid_step: series.grid_step * model_step as u32,
        frames: series.frames.iter().step_by(model_step).copied().collect(),
        observed: series.observed.iter().step_by(model_step).copied().collect(),
    })
}

// ── Normalization ───────────────────────────────────────────────────────

/// Per-feature min/max over the training portion of the series. Holding the
/// stats as a value is the "fitted" state: normalization cannot run before a
/// fit because no `NormStats` exists yet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub lat: (f64, f64),
    pub lon: (f64, f64),
    pub speed: (f64, f64),
}

impl NormStats {
    fn feature(&self, f: usize) -> (f64, f64) {
        match f {
            0 => self.lat,
            1 => self.lon,
            _ => self.speed,
        }
    }

    /// Min-max scaling to [0, 1]; a degenerate feature (max == min) maps to
    /// 0.5. Out-of-range values pass through unclipped so the inverse stays
    /// exact.
    pub fn normalize(&self, f: usize, x: f64) -> f64 {
        let (min, max) = self.feature(f);
        if max > min {
            (x - min) / (max - min)
        } else {
            0.5
        }
    }

    pub fn denormalize(&self, f: usize, y: f64) -> f64 {
        let (min, max) = self.feature(f);
        if max > min {
            y * (max - min) + min
        } else {
            min
        }
    }
}

/// Fits min/max per feature over frames `[0, train_end)` of every series —
/// the training portion only, so later partitions cannot leak into the
/// scaling.
pub fn fit_norm(series: &[ResampledSeries], train_end: usize) -> Result<NormStats, IngestError> {
    let mut mins = [f64::INFINITY; 3];
    let mut maxs = [f64::NEG_INFINITY; 3];
    let mut seen = false;
    for s in series {
        for frame in s.frames.iter().take(train_end) {
            seen = true;
            for f in 0..3 {
                mins[f] = mins[f].min(frame[f]);
                maxs[f] = maxs[f].max(frame[f]);
            }
        }
    }
    if !seen {
        return Err(IngestError::Resample(
            "fit_norm: no frames in training range".into(),
        ));
    }
    Ok(NormStats {
        lat: (mins[0], maxs[0]),
        lon: (mins[1], maxs[1]),
        speed: (mins[2], maxs[2]),
    })
}

/// Applies `stats` to every frame of every series.
pub fn normalize_series(series: &[ResampledSeries], stats: &NormStats) -> Vec<ResampledSeries> {
    series
        .iter()
        .map(|s| ResampledSeries {
            frames: s
                .frames
                .iter()
                .map(|fr| [
                    stats.normalize(0, fr[0]),
                    stats.normalize(1, fr[1]),
                    stats.normalize(2, fr[2]),
                ])
                .collect(),
            ..s.clone()
        })
        .collect()
}

// ── Windowing ───────────────────────────────────────────────────────────

/// One training sample: `l_in` input frames of (lat, lon, speed) for every
/// bus and `l_out` target frames of (lat, lon), both in normalized units.
/// Layout is frame-major then bus-major: `input[(t * n_buses + b) * 3 + f]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub start_frame: usize,
    pub start_time: i64,
    pub n_buses: usize,
    pub l_in: usize,
    pub l_out: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl WindowSample {
    pub fn input_at(&self, t: usize, bus: usize, f: usize) -> f64 {
        self.input[(t * self.n_buses + bus) * 3 + f]
    }

    pub fn target_at(&self, t: usize, bus: usize, f: usize) -> f64 {
        self.target[(t * self.n_buses + bus) * 2 + f]
    }

    fn input_end(&self) -> usize {
        self.start_frame + self.l_in
    }

    fn target_end(&self) -> usize {
        self.start_frame + self.l_in + self.l_out
    }
}

/// Number of windows a series of `len` frames yields.
pub fn window_count(len: usize, l_in: usize, l_out: usize, stride: usize) -> usize {
    let total = l_in + l_out;
    if len < total {
        0
    } else {
        (len - total) / stride + 1
    }
}

/// Frame index one past the last training target when the first
/// `train_windows` windows form the training partition.
pub fn train_end_frame(train_windows: usize, l_in: usize, l_out: usize, stride: usize) -> usize {
    if train_windows == 0 {
        0
    } else {
        (train_windows - 1) * stride + l_in + l_out
    }
}

/// Slices sliding windows at offsets 0, stride, 2*stride, … from a set of
/// series sharing one grid. Returns an empty list when the series are too
/// short; it is the caller's job to treat that as fatal or not.
pub fn make_windows(
    series: &[ResampledSeries],
    l_in: usize,
    l_out: usize,
    stride: usize,
) -> Result<Vec<WindowSample>, IngestError> {
    if series.is_empty() {
        return Err(IngestError::Window("no series".into()));
    }
    if l_in < 1 || l_out < 1 || stride < 1 {
        return Err(IngestError::Window(
            "l_in, l_out, and stride must all be >= 1".into(),
        ));
    }
    let first = &series[0];
    for s in series {
        if s.grid_start != first.grid_start || s.grid_step != first.grid_step {
            return Err(IngestError::GridMismatch(format!(
                "bus {} starts {}@{}s, bus {} starts {}@{}s",
                first.bus_id, first.grid_start, first.grid_step, s.bus_id, s.grid_start, s.grid_step
            )));
        }
        if s.len() != first.len() {
            return Err(IngestError::GridMismatch(format!(
                "bus {} has {} frames, bus {} has {}",
                first.bus_id,
                first.len(),
                s.bus_id,
                s.len()
            )));
        }
    }

    let n_buses = series.len();
    let mut windows = Vec::new();
    let mut offset = 0;
    while offset + l_in + l_out <= first.len() {
        // Every bus must have a frame at every step; resample+impute
        // guarantees that, but direct callers may hand in gappy series.
        let complete = series
            .iter()
            .all(|s| s.frames.len() >= offset + l_in + l_out);
        if complete {
            let mut input = Vec::with_capacity(l_in * n_buses * 3);
            for t in 0..l_in {
                for s in series {
                    input.extend_from_slice(&s.frames[offset + t]);
                }
            }
            let mut target = Vec::with_capacity(l_out * n_buses * 2);
            for t in 0..l_out {
                for s in series {
                    let fr = &s.frames[offset + l_in + t];
                    target.push(fr[0]);
                    target.push(fr[1]);
                }
            }
            windows.push(WindowSample {
                start_frame: offset,
                start_time: first.time_at(offset),
                n_buses,
                l_in,
                l_out,
                input,
                target,
            });
        }
        offset += stride;
    }
    Ok(windows)
}

// ── Chronological split ─────────────────────────────────────────────────

/// How the split boundary guard decides a validation/test window leaks.
///
/// `TargetOverlap` (default) drops a window when its target frames overlap
/// the preceding partition's target frames — the frames used for supervision
/// there. `InputOverlap` is stricter and also forbids the window's *input*
/// frames from touching preceding targets; at small dataset scales it can
/// empty the later partitions outright, which is why it is opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitGuard {
    TargetOverlap,
    InputOverlap,
    Off,
}

impl Default for SplitGuard {
    fn default() -> Self {
        SplitGuard::TargetOverlap
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub n_windows: usize,
    pub train: usize,
    pub val_before_guard: usize,
    pub test_before_guard: usize,
    pub val_dropped: usize,
    pub test_dropped: usize,
}

/// Train/validation/test partitions in chronological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

const MIN_WINDOWS: usize = 10;

/// Splits windows 80/10/10 by count at the ⌊0.8n⌋ and ⌊0.9n⌋ boundaries,
/// then applies the leakage guard to the validation and test partitions,
/// reporting how many windows it dropped.
pub fn split(
    windows: Vec<WindowSample>,
    guard: SplitGuard,
) -> Result<(DatasetSplit, SplitReport), IngestError> {
    let n = windows.len();
    if n < MIN_WINDOWS {
        return Err(IngestError::TooFewWindows {
            got: n,
            need: MIN_WINDOWS,
        });
    }
    debug_assert!(windows.windows(2).all(|w| w[0].start_time <= w[1].start_time));

    let b1 = (0.8 * n as f64).floor() as usize;
    let b2 = (0.9 * n as f64).floor() as usize;

    let mut rest = windows;
    let tail = rest.split_off(b2);
    let mid = rest.split_off(b1);
    let train = rest;

    let mut report = SplitReport {
        n_windows: n,
        train: train.len(),
        val_before_guard: mid.len(),
        test_before_guard: tail.len(),
        ..SplitReport::default()
    };

    let apply = |part: Vec<WindowSample>, preceding_end: usize| -> (Vec<WindowSample>, usize) {
        let before = part.len();
        let kept: Vec<WindowSample> = part
            .into_iter()
            .filter(|w| match guard {
                SplitGuard::Off => true,
                SplitGuard::TargetOverlap => w.start_frame + w.l_in >= preceding_end,
                SplitGuard::InputOverlap => w.start_frame >= preceding_end,
            })
            .collect();
        let dropped = before - kept.len();
        (kept, dropped)
    };

    let train_target_end = train.last().map(|w| w.target_end()).unwrap_or(0);
    let (val, val_dropped) = apply(mid, train_target_end);
    report.val_dropped = val_dropped;

    // Test guards against every frame used before it: train targets plus
    // the targets of validation windows that survived the guard (dropped
    // ones are discarded entirely and supervise nothing).
    let val_target_end = val.last().map(|w| w.target_end()).unwrap_or(0);
    let (test, test_dropped) = apply(tail, train_target_end.max(val_target_end));
    report.test_dropped = test_dropped;

    Ok((DatasetSplit { train, val, test }, report))
}
