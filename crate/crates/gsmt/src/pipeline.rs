//! End-to-end orchestration shared by the CLI and the acceptance tests:
//! synth → preprocess → train → evaluate → predict, all driven by one
//! [`RunConfig`].

use serde::Serialize;

use crate::checkpoint::{Checkpoint, DatasetBundle, BUNDLE_VERSION, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::corrector::{
    classify, correct, fit_modes, kinematic_extrapolate, KinematicState, MotionModeModel,
};
use crate::eval::{
    baseline_ha, compare, mae, mean_error_meters, mean_travel_distance, mission_accuracy,
    ComparisonTable, Forecast, MethodReport, MissionAccuracyConfig,
};
use crate::graphs::build_sequence;
use crate::ingest::{
    self, decimate, fit_norm, impute, make_windows, normalize_series, resample, split, GpsRecord,
    NormStats, ResampledSeries, WindowSample,
};
use crate::model::{train, CellKind, PreparedWindow, Seq2SeqModel, TrainConfig};
use crate::synth::{make_route, simulate, SimOutput};
use crate::{Error, Result};

/// Simulates the configured synthetic scenario.
pub fn run_synth(config: &RunConfig) -> Result<SimOutput> {
    let route = make_route(
        config.synth.route_kind,
        config.synth.route_waypoints,
        config.synth.route_extent_km,
        config.seed(),
    )?;
    let fleet = config.fleet_spec(route.total_len_m());
    Ok(simulate(&route, &fleet, config.synth.duration_s)?)
}

/// parse → clean → resample → impute → decimate → normalize → window →
/// split, sealed into a dataset bundle.
pub fn run_preprocess(records: &[GpsRecord], config: &RunConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let (kept, clean_report) = ingest::clean(records, &config.clean)?;

    let fine = resample(&kept, config.resample.grid_step_s, config.resample.agg_window_s)?;
    let mut series = Vec::with_capacity(fine.len());
    for s in &fine {
        let filled = impute(s)?;
        series.push(decimate(&filled, config.resample.model_step)?);
    }

    let (l_in, l_out, stride) = (config.l_in(), config.l_out(), config.window.stride);
    let len = series.first().map(|s| s.len()).unwrap_or(0);
    let n_windows = ingest::window_count(len, l_in, l_out, stride);
    if n_windows < 10 {
        return Err(ingest::IngestError::TooFewWindows {
            got: n_windows,
            need: 10,
        }
        .into());
    }
    let train_windows = (0.8 * n_windows as f64).floor() as usize;
    let train_end = ingest::train_end_frame(train_windows, l_in, l_out, stride);

    let stats = fit_norm(&series, train_end)?;
    let normalized = normalize_series(&series, &stats);
    let windows = make_windows(&normalized, l_in, l_out, stride)?;
    let (dataset, split_report) = split(windows, config.window.guard)?;

    // Travel-distance scale and speed samples come from the training range
    // of the raw-unit series, observed frames only.
    let train_slices: Vec<ResampledSeries> = series
        .iter()
        .map(|s| ResampledSeries {
            bus_id: s.bus_id.clone(),
            grid_start: s.grid_start,
            grid_step: s.grid_step,
            frames: s.frames[..train_end.min(s.len())].to_vec(),
            observed: s.observed[..train_end.min(s.len())].to_vec(),
        })
        .collect();
    let mean_travel = mean_travel_distance(&train_slices)?;
    let mut train_speed_samples = Vec::new();
    for s in &train_slices {
        for (frame, &obs) in s.frames.iter().zip(&s.observed) {
            if obs {
                train_speed_samples.push(frame[2]);
            }
        }
    }

    Ok(DatasetBundle {
        format_version: BUNDLE_VERSION,
        created_unix: 0,
        content_digest: String::new(),
        config_digest: config.digest(),
        horizon_minutes: config.horizon_minutes(),
        model_step_s: config.model_step_s(),
        bus_ids: series.iter().map(|s| s.bus_id.clone()).collect(),
        norm_stats: stats,
        series,
        split: dataset,
        clean_report,
        split_report,
        mean_travel_distance_m: mean_travel,
        train_speed_samples,
    }
    .seal())
}

/// Builds the fused, row-normalized graph for every window.
pub fn prepare_windows(
    windows: &[WindowSample],
    stats: &NormStats,
    config: &RunConfig,
) -> Result<Vec<PreparedWindow>> {
    windows
        .iter()
        .map(|w| {
            let graphs = build_sequence(w, stats, &config.graph)?;
            Ok(PreparedWindow {
                sample: w.clone(),
                gamma: graphs.normalized,
            })
        })
        .collect()
}

/// Trains the predictor (or resumes from a checkpoint) and fits the
/// motion-mode model, producing a sealed checkpoint holding the
/// best-validation parameters.
pub fn run_train(
    bundle: &DatasetBundle,
    config: &RunConfig,
    cell: CellKind,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    config.validate()?;
    let train_set = prepare_windows(&bundle.split.train, &bundle.norm_stats, config)?;
    let val_set = prepare_windows(&bundle.split.val, &bundle.norm_stats, config)?;

    let (mut model, progress, mut history) = match resume {
        Some(ckpt) => {
            if ckpt.bundle_digest != bundle.content_digest {
                return Err(Error::Compat(format!(
                    "checkpoint was trained on bundle {}, got {}",
                    ckpt.bundle_digest, bundle.content_digest
                )));
            }
            (
                ckpt.instantiate_model()?,
                Some(ckpt.train_progress.clone()),
                ckpt.history.clone(),
            )
        }
        None => (
            Seq2SeqModel::new(config.model_config(cell))?,
            None,
            Vec::new(),
        ),
    };

    let train_config = TrainConfig {
        epochs: config.train.epochs,
        patience: config.train.patience,
        adam: config.adam(),
        seed: config.seed(),
    };
    let outcome = train(&mut model, &train_set, &val_set, &train_config, progress)?;
    history.extend(outcome.history.clone());

    let motion_modes = fit_modes(&bundle.train_speed_samples, config.betas())?;

    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        created_unix: 0,
        content_digest: String::new(),
        run_config: config.clone(),
        config_digest: config.digest(),
        bundle_digest: bundle.content_digest.clone(),
        model_config: model.config,
        norm_stats: bundle.norm_stats,
        params: Checkpoint::tensors_of(&model.params),
        motion_modes,
        train_progress: outcome.progress,
        history,
        best_val_mae: outcome.best_val_mae,
        best_epoch: outcome.best_epoch,
    }
    .seal())
}

// ── Corrector application ───────────────────────────────────────────────

/// Applies the task corrector to normalized forecasts. Blending happens in
/// denormalized degree space; when every blend weight is zero the whole
/// chain is skipped so the output is bit-identical to the input.
pub fn apply_corrector(
    forecasts: &[Forecast],
    windows: &[WindowSample],
    modes: &MotionModeModel,
    stats: &NormStats,
    step_duration_s: f64,
    recent_steps: usize,
) -> Result<Vec<Forecast>> {
    if modes.betas.low == 0.0 && modes.betas.medium == 0.0 && modes.betas.high == 0.0 {
        return Ok(forecasts.to_vec());
    }
    let mut out = Vec::with_capacity(forecasts.len());
    for (fc, w) in forecasts.iter().zip(windows) {
        let mut corrected = fc.clone();
        for bus in 0..w.n_buses {
            let k = recent_steps.clamp(1, w.l_in);
            let mut speed_sum = 0.0;
            for t in w.l_in - k..w.l_in {
                speed_sum += stats.denormalize(2, w.input_at(t, bus, 2)).max(0.0);
            }
            let recent_speed = speed_sum / k as f64;

            let last = (
                stats.denormalize(0, w.input_at(w.l_in - 1, bus, 0)),
                stats.denormalize(1, w.input_at(w.l_in - 1, bus, 1)),
            );
            let prev_idx = w.l_in.saturating_sub(2);
            let prev = (
                stats.denormalize(0, w.input_at(prev_idx, bus, 0)),
                stats.denormalize(1, w.input_at(prev_idx, bus, 1)),
            );
            let state = KinematicState {
                position: last,
                previous: prev,
                recent_speed_kmh: recent_speed,
            };
            let mode = classify(recent_speed, modes);
            let extrapolated =
                kinematic_extrapolate(&state, mode, modes, w.l_out, step_duration_s);

            let raw: Vec<(f64, f64)> = (0..w.l_out)
                .map(|t| {
                    (
                        stats.denormalize(0, fc.at(t, bus, 0)),
                        stats.denormalize(1, fc.at(t, bus, 1)),
                    )
                })
                .collect();
            let blended = correct(&raw, &extrapolated, mode, modes)?;
            for (t, (lat, lon)) in blended.iter().enumerate() {
                corrected.set(t, bus, 0, stats.normalize(0, *lat));
                corrected.set(t, bus, 1, stats.normalize(1, *lon));
            }
        }
        out.push(corrected);
    }
    Ok(out)
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Apply the task corrector to the main model's forecasts.
    pub corrector: bool,
    /// Train and evaluate the GAT+GRU baseline, and report GAT+LSTM
    /// (the corrector-less model) as its own row.
    pub baselines: bool,
    /// Include the published reference rows in the table.
    pub paper_reference: bool,
    /// Add an `oracle` row with predictions injected from the ground
    /// truth, as a harness self-check.
    pub oracle_self_test: bool,
    /// Skip digest compatibility checks.
    pub force: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            corrector: true,
            baselines: false,
            paper_reference: false,
            oracle_self_test: false,
            force: false,
        }
    }
}

/// Raw per-window forecasts of a model over the test set.
fn model_forecasts(
    model: &Seq2SeqModel,
    prepared: &[PreparedWindow],
) -> Result<Vec<Forecast>> {
    prepared
        .iter()
        .map(|w| {
            let steps = model.predict_window(&w.sample, &w.gamma)?;
            Ok(Forecast::from_step_tensors(&steps)?)
        })
        .collect()
}

/// Evaluates one trained checkpoint against its bundle, producing a row
/// per method at the bundle's horizon.
pub fn evaluate_pair(
    ckpt: &Checkpoint,
    bundle: &DatasetBundle,
    options: &EvalOptions,
) -> Result<Vec<MethodReport>> {
    if !options.force && ckpt.bundle_digest != bundle.content_digest {
        return Err(Error::Compat(format!(
            "checkpoint was trained on bundle {}, evaluate got {} (pass --force to override)",
            ckpt.bundle_digest, bundle.content_digest
        )));
    }
    let config = &ckpt.run_config;
    let test_windows: Vec<WindowSample> = bundle.split.test.clone();
    if test_windows.is_empty() {
        return Err(Error::Format("bundle has no test windows".into()));
    }
    let prepared = prepare_windows(&test_windows, &bundle.norm_stats, config)?;
    let acc_config = MissionAccuracyConfig {
        margin: config.eval.margin,
        mean_travel_distance_m: bundle.mean_travel_distance_m,
        granularity: config.eval.granularity,
    };

    let mut rows = Vec::new();
    let mut push_method = |name: &str, forecasts: &[Forecast]| -> Result<()> {
        rows.push(MethodReport {
            method: name.to_string(),
            horizon_minutes: bundle.horizon_minutes,
            mae: mae(forecasts, &test_windows)?,
            mission_accuracy: mission_accuracy(
                forecasts,
                &test_windows,
                &acc_config,
                &bundle.norm_stats,
            )?,
            mean_error_m: mean_error_meters(forecasts, &test_windows, &bundle.norm_stats)?,
            n_windows: test_windows.len(),
            config_digest: ckpt.config_digest.clone(),
        });
        Ok(())
    };

    let model = ckpt.instantiate_model()?;
    let raw = model_forecasts(&model, &prepared)?;
    let gsmt = if options.corrector {
        apply_corrector(
            &raw,
            &test_windows,
            &ckpt.motion_modes,
            &bundle.norm_stats,
            bundle.model_step_s as f64,
            config.corrector.recent_steps,
        )?
    } else {
        raw.clone()
    };
    push_method("GSMT", &gsmt)?;

    let ha = baseline_ha(&bundle.split.train)?;
    let ha_forecasts: Vec<Forecast> = test_windows.iter().map(|w| ha.predict(w)).collect();
    push_method("HA", &ha_forecasts)?;

    if options.baselines {
        // GAT+LSTM is the trained model without the corrector.
        push_method("GAT+LSTM", &raw)?;

        let gru_ckpt = run_train(bundle, config, CellKind::Gru, None)?;
        let gru_model = gru_ckpt.instantiate_model()?;
        let gru_raw = model_forecasts(&gru_model, &prepared)?;
        push_method("GAT+GRU", &gru_raw)?;
    }

    if options.oracle_self_test {
        let truth: Vec<Forecast> = test_windows.iter().map(Forecast::truth_of).collect();
        push_method("oracle", &truth)?;
    }

    Ok(rows)
}

/// Evaluates any number of (checkpoint, bundle) pairs — one per horizon —
/// and merges the rows into a single comparison table.
pub fn run_evaluate(
    pairs: &[(Checkpoint, DatasetBundle)],
    options: &EvalOptions,
) -> Result<ComparisonTable> {
    let mut rows = Vec::new();
    for (ckpt, bundle) in pairs {
        rows.extend(evaluate_pair(ckpt, bundle, options)?);
    }
    let granularity = pairs
        .first()
        .map(|(c, _)| c.run_config.eval.granularity)
        .unwrap_or_default();
    Ok(compare(rows, granularity, options.paper_reference)?)
}

// ── Prediction export ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub bus_id: String,
    pub step: usize,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone)]
pub struct PredictionOutput {
    pub rows: Vec<PredictionRow>,
    pub geojson: serde_json::Value,
    /// First predicted instant per the input grid.
    pub first_step_unix: i64,
    pub step_s: u32,
}

/// Runs the model on the trailing window of fresh GPS records and exports
/// per-bus forecasts. The records go through the same cleaning and
/// resampling as training data, using the checkpoint's stored config.
pub fn run_predict(ckpt: &Checkpoint, records: &[GpsRecord]) -> Result<PredictionOutput> {
    let config = &ckpt.run_config;
    let (kept, _) = ingest::clean(records, &config.clean)?;
    let fine = resample(&kept, config.resample.grid_step_s, config.resample.agg_window_s)?;
    let mut series = Vec::with_capacity(fine.len());
    for s in &fine {
        let filled = impute(s)?;
        series.push(decimate(&filled, config.resample.model_step)?);
    }

    let l_in = config.l_in();
    let l_out = config.l_out();
    let len = series.first().map(|s| s.len()).unwrap_or(0);
    if len < l_in {
        let need_min = l_in as u32 * config.model_step_s() / 60;
        return Err(ingest::IngestError::Window(format!(
            "need at least {need_min} minutes of history ({l_in} model frames), got {len} frames"
        ))
        .into());
    }
    if series.len() < 2 {
        return Err(ingest::IngestError::Window(
            "need at least 2 buses to build the fleet graph".into(),
        )
        .into());
    }

    let start = len - l_in;
    let stats = &ckpt.norm_stats;
    let tail: Vec<ResampledSeries> = series
        .iter()
        .map(|s| ResampledSeries {
            bus_id: s.bus_id.clone(),
            grid_start: s.time_at(start),
            grid_step: s.grid_step,
            frames: s.frames[start..].to_vec(),
            observed: s.observed[start..].to_vec(),
        })
        .collect();
    let normalized = normalize_series(&tail, stats);

    let n = normalized.len();
    let mut input = Vec::with_capacity(l_in * n * 3);
    for t in 0..l_in {
        for s in &normalized {
            input.extend_from_slice(&s.frames[t]);
        }
    }
    let sample = WindowSample {
        start_frame: 0,
        start_time: tail[0].grid_start,
        n_buses: n,
        l_in,
        l_out,
        input,
        target: vec![0.0; l_out * n * 2],
    };

    let graphs = build_sequence(&sample, stats, &config.graph)?;
    let model = ckpt.instantiate_model()?;
    let steps = model.predict_window(&sample, &graphs.normalized)?;
    let raw = Forecast::from_step_tensors(&steps)?;
    let corrected = apply_corrector(
        std::slice::from_ref(&raw),
        std::slice::from_ref(&sample),
        &ckpt.motion_modes,
        stats,
        config.model_step_s() as f64,
        config.corrector.recent_steps,
    )?
    .remove(0);

    let mut rows = Vec::with_capacity(n * l_out);
    let mut features = Vec::with_capacity(n * 2);
    for (b, s) in tail.iter().enumerate() {
        let history_coords: Vec<[f64; 2]> = s
            .frames
            .iter()
            .map(|f| [f[1], f[0]]) // GeoJSON positions are [lon, lat]
            .collect();
        let last_observed = *history_coords.last().unwrap();
        let mut predicted_coords = vec![last_observed];
        for t in 0..l_out {
            let lat = stats.denormalize(0, corrected.at(t, b, 0));
            let lon = stats.denormalize(1, corrected.at(t, b, 1));
            rows.push(PredictionRow {
                bus_id: s.bus_id.clone(),
                step: t + 1,
                lat,
                lon,
            });
            predicted_coords.push([lon, lat]);
        }
        features.push(serde_json::json!({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": history_coords},
            "properties": {"bus_id": s.bus_id, "kind": "history"},
        }));
        features.push(serde_json::json!({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": predicted_coords},
            "properties": {"bus_id": s.bus_id, "kind": "predicted"},
        }));
    }
    rows.sort_by(|a, b| a.bus_id.cmp(&b.bus_id).then(a.step.cmp(&b.step)));

    let first_step_unix = tail[0].time_at(l_in - 1) + tail[0].grid_step as i64;
    Ok(PredictionOutput {
        rows,
        geojson: serde_json::json!({
            "type": "FeatureCollection",
            "features": features,
        }),
        first_step_unix,
        step_s: tail[0].grid_step,
    })
}
