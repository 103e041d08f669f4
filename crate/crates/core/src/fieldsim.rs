//! Lumped soil-moisture simulator for closed-loop policy comparison.
//!
//! ADC counts rise as the soil dries. Evaporation is a multiplicative
//! function of temperature, light and humidity; irrigation lowers the
//! reading linearly in the dispensed volume.

use std::f64::consts::{PI, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edgenode::{EdgeNode, Mode, NodeConfig, NodeError};
use crate::mix_seed;
use crate::schema::Trigger;
use crate::telemetry::SensorSample;
use crate::tinymodel::EdgeModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherConfig {
    pub temp_mean_c: f64,
    pub temp_amp_c: f64,
    pub temp_noise_c: f64,
    pub hum_mean_pct: f64,
    pub hum_amp_pct: f64,
    pub hum_noise_pct: f64,
    pub light_peak_lux: f64,
    pub light_noise_frac: f64,
    pub sunrise_h: f64,
    pub sunset_h: f64,
}

impl Default for WeatherConfig {
    /// A cool, humid greenhouse under grow lights.
    fn default() -> Self {
        Self {
            temp_mean_c: 21.5,
            temp_amp_c: 1.5,
            temp_noise_c: 0.2,
            hum_mean_pct: 84.0,
            hum_amp_pct: 6.0,
            hum_noise_pct: 1.0,
            light_peak_lux: 2000.0,
            light_noise_frac: 0.05,
            sunrise_h: 6.0,
            sunset_h: 18.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub duration_days: f64,
    pub dt_s: f64,
    /// counts per hour at 20 °C, no light, 0% humidity
    pub evap_base: f64,
    pub evap_temp_gain: f64,
    pub evap_light_gain: f64,
    pub evap_hum_gain: f64,
    /// counts removed per ml dispensed
    pub absorb_per_ml: f64,
    pub initial_soil_adc: f64,
    pub sensor_noise_adc: f64,
    pub band_low_adc: f64,
    pub band_high_adc: f64,
    pub weather: WeatherConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            duration_days: 14.0,
            dt_s: 60.0,
            evap_base: 18.0,
            evap_temp_gain: 0.8,
            evap_light_gain: 0.5,
            evap_hum_gain: 0.5,
            absorb_per_ml: 6.0,
            initial_soil_adc: 2500.0,
            sensor_noise_adc: 4.0,
            band_low_adc: 2200.0,
            band_high_adc: 3500.0,
            weather: WeatherConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt_s > 0.0 && self.dt_s.is_finite()) {
            return Err("dt_s must be positive".into());
        }
        if !(self.absorb_per_ml > 0.0 && self.absorb_per_ml.is_finite()) {
            return Err("absorb_per_ml must be positive".into());
        }
        if !(self.duration_days > 0.0 && self.duration_days.is_finite()) {
            return Err("duration_days must be positive".into());
        }
        if !(self.evap_base >= 0.0 && self.evap_base.is_finite()) {
            return Err("evap_base must be non-negative".into());
        }
        if self.band_low_adc.partial_cmp(&self.band_high_adc) != Some(std::cmp::Ordering::Less) {
            return Err("band_low_adc must be below band_high_adc".into());
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.duration_days * 86_400.0 / self.dt_s).round() as usize
    }
}

pub const SOIL_MIN: f64 = 400.0;
pub const SOIL_MAX: f64 = 4095.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weather {
    pub temp_c: f64,
    pub hum_pct: f64,
    pub light_lux: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub soil_adc: f64,
    pub t_s: f64,
}

/// Evaporation in counts per hour.
pub fn evap_rate(w: &Weather, cfg: &ScenarioConfig) -> f64 {
    cfg.evap_base
        * (1.0 + cfg.evap_temp_gain * (w.temp_c - 20.0) / 15.0)
        * (1.0 + cfg.evap_light_gain * w.light_lux / 5000.0)
        * (1.0 - cfg.evap_hum_gain * w.hum_pct / 100.0)
}

/// Advances the field by `dt_s`, applying evaporation and then the water
/// dispensed during the step.
pub fn step(state: &FieldState, w: &Weather, dispensed_ml: f64, cfg: &ScenarioConfig) -> FieldState {
    let next = state.soil_adc + evap_rate(w, cfg) * cfg.dt_s / 3600.0 - cfg.absorb_per_ml * dispensed_ml;
    FieldState { soil_adc: next.clamp(SOIL_MIN, SOIL_MAX), t_s: state.t_s + cfg.dt_s }
}

/// Noise-free diurnal weather at time `t_s`. Temperature peaks mid
/// afternoon, humidity moves opposite, light follows a half-sine between
/// sunrise and sunset.
pub fn weather(t_s: f64, cfg: &WeatherConfig) -> Weather {
    let h = (t_s / 3600.0).rem_euclid(24.0);
    let phase = (TAU * (h - 9.0) / 24.0).sin();
    let light = if h > cfg.sunrise_h && h < cfg.sunset_h {
        cfg.light_peak_lux * (PI * (h - cfg.sunrise_h) / (cfg.sunset_h - cfg.sunrise_h)).sin()
    } else {
        0.0
    };
    clip_weather(Weather {
        temp_c: cfg.temp_mean_c + cfg.temp_amp_c * phase,
        hum_pct: cfg.hum_mean_pct - cfg.hum_amp_pct * phase,
        light_lux: light,
    })
}

fn clip_weather(w: Weather) -> Weather {
    Weather { temp_c: w.temp_c.clamp(20.0, 35.0), hum_pct: w.hum_pct.clamp(20.0, 90.0), light_lux: w.light_lux.clamp(0.0, 5000.0) }
}

/// The full seeded weather stream for a scenario; both arms of an
/// experiment see the same series.
pub fn weather_series(cfg: &ScenarioConfig, seed: u64) -> Vec<Weather> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5745_4154));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let wc = &cfg.weather;
    (0..cfg.n_steps())
        .map(|k| {
            let base = weather(k as f64 * cfg.dt_s, wc);
            let (a, b, c): (f64, f64, f64) = (unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng));
            clip_weather(Weather {
                temp_c: base.temp_c + wc.temp_noise_c * a,
                hum_pct: base.hum_pct + wc.hum_noise_pct * b,
                light_lux: base.light_lux * (1.0 + wc.light_noise_frac * c).max(0.0),
            })
        })
        .collect()
}

/// A running field: state, its weather stream and a noisy soil sensor.
#[derive(Debug, Clone)]
pub struct Field {
    cfg: ScenarioConfig,
    state: FieldState,
    weather: Vec<Weather>,
    k: usize,
    sensor_rng: ChaCha8Rng,
    t0_ms: i64,
}

impl Field {
    pub fn new(cfg: ScenarioConfig, seed: u64) -> Self {
        Self::with_start(cfg, seed, 0)
    }

    pub fn with_start(cfg: ScenarioConfig, seed: u64, t0_ms: i64) -> Self {
        Self {
            state: FieldState { soil_adc: cfg.initial_soil_adc.clamp(SOIL_MIN, SOIL_MAX), t_s: 0.0 },
            weather: weather_series(&cfg, seed),
            k: 0,
            sensor_rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5345_4e53)),
            cfg,
            t0_ms,
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn state(&self) -> FieldState {
        self.state
    }

    pub fn step_index(&self) -> usize {
        self.k
    }

    pub fn done(&self) -> bool {
        self.k >= self.weather.len()
    }

    pub fn current_weather(&self) -> Option<Weather> {
        self.weather.get(self.k).copied()
    }

    pub fn ts_ms(&self) -> i64 {
        self.t0_ms + (self.state.t_s * 1000.0).round() as i64
    }

    /// What the node's sensors report at the current step.
    pub fn reading(&mut self) -> Option<SensorSample> {
        let w = self.current_weather()?;
        let noise: f64 = Normal::new(0.0, self.cfg.sensor_noise_adc.max(0.0)).map(|n| n.sample(&mut self.sensor_rng)).unwrap_or(0.0);
        Some(SensorSample::new(
            self.ts_ms(),
            (self.state.soil_adc + noise).round().clamp(0.0, SOIL_MAX),
            (w.temp_c * 10.0).round() / 10.0,
            (w.hum_pct * 10.0).round() / 10.0,
            w.light_lux.round(),
        ))
    }

    pub fn advance(&mut self, dispensed_ml: f64) {
        if let Some(w) = self.current_weather() {
            self.state = step(&self.state, &w, dispensed_ml, &self.cfg);
            self.k += 1;
        }
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // built once per run
pub enum Policy {
    /// Unconditional dose every `interval_s`, starting at t = 0.
    Timer { interval_s: f64, dose_ml: f64 },
    /// An edge node in rule or model mode.
    Node { cfg: Box<NodeConfig>, model: Option<EdgeModel> },
}

impl Policy {
    pub fn timer() -> Self {
        Policy::Timer { interval_s: 6.0 * 3600.0, dose_ml: 15.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Timer { .. } => "timer",
            Policy::Node { cfg, .. } => match cfg.mode {
                Mode::Model => "model",
                Mode::Rule => "rule",
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayReport {
    pub day: usize,
    pub total_ml: f64,
    pub events: usize,
    pub time_in_band_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterReport {
    pub policy: String,
    pub total_ml: f64,
    pub n_events: usize,
    pub time_in_band_pct: f64,
    pub time_above_dry_pct: f64,
    pub mean_soil_adc: f64,
    pub final_soil_adc: f64,
    pub days: Vec<DayReport>,
}

pub const DAY_CSV_HEADER: &str = "day,policy,total_ml,events,time_in_band_pct";

impl WaterReport {
    pub fn day_csv_rows(&self) -> String {
        self.days.iter().map(|d| format!("{},{},{:.1},{},{:.2}\n", d.day, self.policy, d.total_ml, d.events, d.time_in_band_pct)).collect()
    }
}

pub fn days_csv(reports: &[&WaterReport]) -> String {
    let mut s = format!("{DAY_CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.day_csv_rows());
    }
    s
}

/// One step of a policy run, kept for coupling checks and plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t_s: f64,
    pub soil_adc: f64,
    pub dispensed_ml: f64,
    pub next_soil_adc: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub report: WaterReport,
    pub trace: Vec<TraceStep>,
    pub node_transcript: Vec<String>,
}

struct Tally {
    steps: usize,
    in_band: usize,
    above: usize,
    soil_sum: f64,
}

pub fn run_policy(policy: &Policy, cfg: &ScenarioConfig, seed: u64) -> Result<PolicyRun, NodeError> {
    run_policy_inner(policy, cfg, seed, false)
}

/// Like [`run_policy`] but also keeps the node's transcript.
pub fn run_policy_with_transcript(policy: &Policy, cfg: &ScenarioConfig, seed: u64) -> Result<PolicyRun, NodeError> {
    run_policy_inner(policy, cfg, seed, true)
}

fn run_policy_inner(policy: &Policy, cfg: &ScenarioConfig, seed: u64, keep_transcript: bool) -> Result<PolicyRun, NodeError> {
    cfg.validate().map_err(NodeError::Config)?;
    let mut field = Field::new(*cfg, seed);
    let mut node = match policy {
        Policy::Node { cfg: ncfg, model } => {
            let mut n = EdgeNode::new((**ncfg).clone(), model.clone())?;
            n.keep_transcript(keep_transcript);
            Some(n)
        }
        Policy::Timer { .. } => None,
    };
    let steps_per_day = (86_400.0 / cfg.dt_s).round().max(1.0) as usize;
    let mut days: Vec<(f64, usize, Tally)> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.n_steps());
    let mut total = Tally { steps: 0, in_band: 0, above: 0, soil_sum: 0.0 };
    let (mut total_ml, mut n_events) = (0.0, 0usize);
    while !field.done() {
        let k = field.step_index();
        let day = k / steps_per_day;
        if days.len() <= day {
            days.push((0.0, 0, Tally { steps: 0, in_band: 0, above: 0, soil_sum: 0.0 }));
        }
        let before = field.state();
        let sample = field.reading().expect("field not done");
        let mut ml = 0.0;
        let mut events = 0;
        match (policy, node.as_mut()) {
            (Policy::Timer { interval_s, dose_ml }, _) => {
                let every = (interval_s / cfg.dt_s).round().max(1.0) as usize;
                if k.is_multiple_of(every) {
                    ml = *dose_ml;
                    events = 1;
                }
            }
            (Policy::Node { .. }, Some(n)) => {
                for e in n.process_sample(sample)?.events() {
                    if e.watered() {
                        ml += e.dispensed_ml;
                        events += 1;
                    }
                }
            }
            (Policy::Node { .. }, None) => unreachable!("node policy always has a node"),
        }
        field.advance(ml);
        trace.push(TraceStep { t_s: before.t_s, soil_adc: before.soil_adc, dispensed_ml: ml, next_soil_adc: field.state().soil_adc });
        let in_band = (cfg.band_low_adc..=cfg.band_high_adc).contains(&before.soil_adc);
        let above = before.soil_adc > cfg.band_high_adc;
        for t in [&mut total, &mut days[day].2] {
            t.steps += 1;
            t.in_band += in_band as usize;
            t.above += above as usize;
            t.soil_sum += before.soil_adc;
        }
        days[day].0 += ml;
        days[day].1 += events;
        total_ml += ml;
        n_events += events;
    }
    let pct = |a: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * a as f64 / n as f64 };
    let report = WaterReport {
        policy: policy.name().to_string(),
        total_ml,
        n_events,
        time_in_band_pct: pct(total.in_band, total.steps),
        time_above_dry_pct: pct(total.above, total.steps),
        mean_soil_adc: total.soil_sum / total.steps.max(1) as f64,
        final_soil_adc: field.state().soil_adc,
        days: days
            .iter()
            .enumerate()
            .map(|(i, (ml, ev, t))| DayReport { day: i + 1, total_ml: *ml, events: *ev, time_in_band_pct: pct(t.in_band, t.steps) })
            .collect(),
    };
    let node_transcript = node.map(|n| n.transcript().to_vec()).unwrap_or_default();
    Ok(PolicyRun { report, trace, node_transcript })
}

/// Runs both policies against the same seeded weather and sensor noise.
pub fn run_experiment(a: &Policy, b: &Policy, cfg: &ScenarioConfig, seed: u64) -> Result<(WaterReport, WaterReport), NodeError> {
    let (ra, rb) = rayon::join(|| run_policy(a, cfg, seed), || run_policy(b, cfg, seed));
    Ok((ra?.report, rb?.report))
}

/// Node config used by simulation policies: one decision per `window_len`
/// steps of `dt_s`.
pub fn sim_node_config(mode: Mode, cfg: &ScenarioConfig) -> NodeConfig {
    NodeConfig {
        node_id: format!(
            "sim-{}",
            match mode {
                Mode::Model => "model",
                Mode::Rule => "rule",
            }
        ),
        sample_period_ms: (cfg.dt_s * 1000.0) as u64,
        mode,
        ..NodeConfig::default()
    }
}

/// Triggers that count as automatic decisions in a simulation report.
pub fn is_policy_trigger(t: Trigger) -> bool {
    matches!(t, Trigger::Model | Trigger::Rule)
}
