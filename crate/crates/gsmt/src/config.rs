//! Run configuration: one TOML file with a section per module, every knob
//! overridable from the command line via `--set section.key=value`.
//!
//! Validation runs all cross-field checks up front so a bad combination
//! fails before any work starts, with a message naming the fields involved.

use serde::{Deserialize, Serialize};

use crate::corrector::BlendWeights;
use crate::eval::AccuracyGranularity;
use crate::graphs::GraphConfig;
use crate::ingest::{CleanConfig, SplitGuard};
use crate::model::{CellKind, ModelConfig};
use crate::numerics::AdamConfig;
use crate::synth::{CongestionZone, FleetSpec, RouteKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_buses: usize,
    pub headway_s: i64,
    pub base_speed_kmh: f64,
    pub gps_noise_sigma_m: f64,
    pub dropout_prob: f64,
    pub fix_interval_s: i64,
    pub duration_s: i64,
    pub route_kind: RouteKind,
    pub route_waypoints: usize,
    pub route_extent_km: f64,
    pub start_unix: i64,
    /// Generates the two stock congestion zones scaled to the route/duration.
    pub congestion: bool,
    /// Explicit zones, appended after the stock ones.
    pub zones: Vec<CongestionZone>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_buses: 5,
            headway_s: 600,
            base_speed_kmh: 36.0,
            gps_noise_sigma_m: 10.0,
            dropout_prob: 0.05,
            fix_interval_s: 30,
            duration_s: 21_600,
            route_kind: RouteKind::Loop,
            route_waypoints: 12,
            route_extent_km: 15.0,
            start_unix: 1_704_067_200,
            congestion: true,
            zones: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleSection {
    pub grid_step_s: u32,
    pub agg_window_s: u32,
    /// Grid steps per model step (1-minute grid, 5-minute model frames).
    pub model_step: usize,
}

impl Default for ResampleSection {
    fn default() -> Self {
        ResampleSection {
            grid_step_s: 60,
            agg_window_s: 300,
            model_step: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    /// Input history span in minutes; `l_in` is derived from it unless set.
    pub history_min: u32,
    /// Forecast horizon in minutes; `l_out` is derived from it unless set.
    pub horizon_min: u32,
    pub l_in: Option<usize>,
    pub l_out: Option<usize>,
    pub stride: usize,
    pub guard: SplitGuard,
}

impl Default for WindowSection {
    fn default() -> Self {
        WindowSection {
            history_min: 50,
            horizon_min: 15,
            l_in: None,
            l_out: None,
            stride: 1,
            guard: SplitGuard::TargetOverlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_width: usize,
    pub gat_layers: usize,
    pub attn_hidden: usize,
    pub leaky_relu_slope: f64,
    pub teacher_forcing_ratio: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_width: 32,
            gat_layers: 3,
            attn_hidden: 32,
            leaky_relu_slope: 0.2,
            teacher_forcing_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 300,
            patience: 25,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorSection {
    pub beta_low: f64,
    pub beta_medium: f64,
    pub beta_high: f64,
    /// Input steps used for the recent-speed estimate.
    pub recent_steps: usize,
}

impl Default for CorrectorSection {
    fn default() -> Self {
        CorrectorSection {
            beta_low: 0.1,
            beta_medium: 0.2,
            beta_high: 0.3,
            recent_steps: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub margin: f64,
    pub granularity: AccuracyGranularity,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            margin: 0.05,
            granularity: AccuracyGranularity::Trajectory,
        }
    }
}

/// The whole run configuration. `seed` feeds every random stream
/// (simulation, initialization, shuffling, teacher forcing).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub synth: SynthSection,
    pub clean: CleanConfig,
    pub resample: ResampleSection,
    pub window: WindowSection,
    pub graph: GraphConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub corrector: CorrectorSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    /// Model frames per input window.
    pub fn l_in(&self) -> usize {
        self.window
            .l_in
            .unwrap_or_else(|| self.derived_l(self.window.history_min))
    }

    /// Model frames per output window.
    pub fn l_out(&self) -> usize {
        self.window
            .l_out
            .unwrap_or_else(|| self.derived_l(self.window.horizon_min))
    }

    fn derived_l(&self, minutes: u32) -> usize {
        let span_s = minutes as usize * 60;
        let model_step_s = self.model_step_s() as usize;
        span_s / model_step_s.max(1)
    }

    /// Seconds between consecutive model frames.
    pub fn model_step_s(&self) -> u32 {
        self.resample.grid_step_s * self.resample.model_step as u32
    }

    pub fn horizon_minutes(&self) -> u32 {
        (self.l_out() as u32 * self.model_step_s()) / 60
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
        }
    }

    pub fn betas(&self) -> BlendWeights {
        BlendWeights {
            low: self.corrector.beta_low,
            medium: self.corrector.beta_medium,
            high: self.corrector.beta_high,
        }
    }

    pub fn model_config(&self, cell: CellKind) -> ModelConfig {
        ModelConfig {
            hidden_width: self.model.hidden_width,
            gat_layers: self.model.gat_layers,
            attn_hidden: self.model.attn_hidden,
            l_in: self.l_in(),
            l_out: self.l_out(),
            leaky_relu_slope: self.model.leaky_relu_slope,
            teacher_forcing_ratio: self.model.teacher_forcing_ratio,
            cell,
            seed: self.seed(),
        }
    }

    /// The fleet spec for the synthetic scenario, stock congestion zones
    /// included when enabled.
    pub fn fleet_spec(&self, route_total_m: f64) -> FleetSpec {
        let s = &self.synth;
        let mut zones = Vec::new();
        if s.congestion {
            let start = s.start_unix;
            let d = s.duration_s + s.headway_s * s.n_buses as i64;
            // Morning-peak style slowdown over a mid-route stretch plus a
            // milder all-day zone further along.
            zones.push(CongestionZone {
                arc_from_m: 0.20 * route_total_m,
                arc_to_m: 0.45 * route_total_m,
                multiplier: 0.5,
                active_from_s: start + d / 4,
                active_to_s: start + 3 * d / 4,
            });
            zones.push(CongestionZone {
                arc_from_m: 0.60 * route_total_m,
                arc_to_m: 0.75 * route_total_m,
                multiplier: 0.7,
                active_from_s: start,
                active_to_s: start + d,
            });
        }
        zones.extend(s.zones.iter().copied());
        FleetSpec {
            n_buses: s.n_buses,
            headway_s: s.headway_s,
            base_speed_kmh: s.base_speed_kmh,
            congestion_zones: zones,
            gps_noise_sigma_m: s.gps_noise_sigma_m,
            dropout_prob: s.dropout_prob,
            fix_interval_s: s.fix_interval_s,
            route_kind: s.route_kind,
            seed: self.seed(),
            start_unix: s.start_unix,
        }
    }

    /// All cross-field checks. Errors name every field involved.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));

        if self.resample.grid_step_s == 0 {
            return fail("resample.grid_step_s must be > 0".into());
        }
        if self.resample.agg_window_s < self.resample.grid_step_s {
            return fail(format!(
                "resample.agg_window_s ({}) must be >= resample.grid_step_s ({})",
                self.resample.agg_window_s, self.resample.grid_step_s
            ));
        }
        if self.resample.model_step == 0 {
            return fail("resample.model_step must be >= 1".into());
        }

        let model_step_s = self.model_step_s();
        if let Some(l_in) = self.window.l_in {
            let span = l_in as u32 * model_step_s;
            if span != self.window.history_min * 60 {
                return fail(format!(
                    "window.l_in ({l_in}) x model step ({model_step_s}s) = {span}s \
                     disagrees with window.history_min ({} min); adjust window.l_in or \
                     window.history_min",
                    self.window.history_min
                ));
            }
        } else if (self.window.history_min as usize * 60) % model_step_s as usize != 0 {
            return fail(format!(
                "window.history_min ({} min) is not a whole number of model steps \
                 (resample.grid_step_s x resample.model_step = {model_step_s}s)",
                self.window.history_min
            ));
        }
        if let Some(l_out) = self.window.l_out {
            let span = l_out as u32 * model_step_s;
            if span != self.window.horizon_min * 60 {
                return fail(format!(
                    "window.l_out ({l_out}) x model step ({model_step_s}s) = {span}s \
                     disagrees with window.horizon_min ({} min); adjust window.l_out or \
                     window.horizon_min",
                    self.window.horizon_min
                ));
            }
        } else if (self.window.horizon_min as usize * 60) % model_step_s as usize != 0 {
            return fail(format!(
                "window.horizon_min ({} min) is not a whole number of model steps \
                 (resample.grid_step_s x resample.model_step = {model_step_s}s)",
                self.window.horizon_min
            ));
        }
        if self.l_in() == 0 || self.l_out() == 0 {
            return fail(format!(
                "window history/horizon ({} min / {} min) too short for a {}s model step",
                self.window.history_min,
                self.window.horizon_min,
                model_step_s
            ));
        }
        if self.window.stride == 0 {
            return fail("window.stride must be >= 1".into());
        }

        self.clean.validate().map_err(Error::Config)?;
        self.graph.validate().map_err(Error::Config)?;
        self.model_config(CellKind::Lstm)
            .validate()
            .map_err(Error::Config)?;
        self.betas().validate().map_err(Error::Config)?;
        if self.corrector.recent_steps == 0 {
            return fail("corrector.recent_steps must be >= 1".into());
        }
        if self.corrector.recent_steps > self.l_in() {
            return fail(format!(
                "corrector.recent_steps ({}) exceeds window.l_in ({})",
                self.corrector.recent_steps,
                self.l_in()
            ));
        }
        if !(self.eval.margin > 0.0) {
            return fail(format!("eval.margin must be > 0, got {}", self.eval.margin));
        }
        if !(self.train.lr > 0.0) {
            return fail(format!("train.lr must be > 0, got {}", self.train.lr));
        }
        for (name, b) in [("beta1", self.train.beta1), ("beta2", self.train.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("train.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.train.epsilon > 0.0) {
            return fail("train.epsilon must be > 0".into());
        }

        let fleet = self.fleet_spec(1000.0);
        fleet.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.synth.route_waypoints < 2 {
            return fail("synth.route_waypoints must be >= 2".into());
        }
        if !(self.synth.route_extent_km > 0.0) {
            return fail("synth.route_extent_km must be > 0".into());
        }
        Ok(())
    }

    /// Loads a TOML file, applies `--set section.key=value` overrides, and
    /// validates.
    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                text.parse()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Canonical digest of the configuration (sha-256 over canonical JSON).
    pub fn digest(&self) -> String {
        crate::checkpoint::sha256_of(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects section.key=value, got `{spec}`")))?;
    let path = path.trim();
    let segments: Vec<&str> = path.split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("--set: bad key path `{path}`")));
    }

    // Parse the value through the TOML grammar so types come out right;
    // fall back to a string for bare words.
    let parsed: toml::Value = format!("v = {}", raw_value.trim())
        .parse::<toml::Table>()
        .map(|mut t| t.remove("v").unwrap())
        .unwrap_or_else(|_| toml::Value::String(raw_value.trim().to_string()));

    let mut current = table;
    for seg in &segments[..segments.len() - 1] {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set: `{seg}` in `{path}` is not a section")))?;
    }
    current.insert(segments.last().unwrap().to_string(), parsed);
    Ok(())
}
