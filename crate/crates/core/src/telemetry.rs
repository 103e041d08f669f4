//! Sensor-side preprocessing shared by the edge node, the data generator and
//! the ensemble trainer.
//!
//! Soil moisture is reported in raw ADC counts of a capacitive probe where a
//! *higher* count means *drier* soil. All calibration landmarks below follow
//! that convention.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ADC_MAX: f64 = 4095.0;
pub const LUX_MAX: f64 = 5000.0;
const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("non-finite value in field `{0}`")]
    NonFinite(&'static str),
    #[error("field `{field}` out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sample has no pH channel")]
    MissingPh,
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("invalid smoothing parameters: {0}")]
    InvalidSmoothing(String),
}

/// One timestamped reading of the five environmental channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSample {
    pub ts_ms: i64,
    pub soil_adc: f64,
    pub temp_c: f64,
    pub hum_pct: f64,
    pub light_lux: f64,
    #[serde(default)]
    pub ph: Option<f64>,
}

impl SensorSample {
    pub fn new(ts_ms: i64, soil_adc: f64, temp_c: f64, hum_pct: f64, light_lux: f64) -> Self {
        Self { ts_ms, soil_adc, temp_c, hum_pct, light_lux, ph: None }
    }

    pub fn with_ph(mut self, ph: f64) -> Self {
        self.ph = Some(ph);
        self
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        check_finite("soil_adc", self.soil_adc)?;
        check_finite("temp_c", self.temp_c)?;
        check_finite("hum_pct", self.hum_pct)?;
        check_finite("light_lux", self.light_lux)?;
        check_range("soil_adc", self.soil_adc, 0.0, ADC_MAX)?;
        check_range("hum_pct", self.hum_pct, 0.0, 100.0)?;
        if self.light_lux < 0.0 {
            return Err(TelemetryError::OutOfRange { field: "light_lux", value: self.light_lux });
        }
        if let Some(ph) = self.ph {
            check_finite("ph", ph)?;
            check_range("ph", ph, 0.0, 14.0)?;
        }
        Ok(())
    }
}

fn check_finite(field: &'static str, v: f64) -> Result<(), TelemetryError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TelemetryError::NonFinite(field))
    }
}

fn check_range(field: &'static str, v: f64, lo: f64, hi: f64) -> Result<(), TelemetryError> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(TelemetryError::OutOfRange { field, value: v })
    }
}

/// ADC landmarks of the soil probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationProfile {
    /// Below this the probe is standing in water.
    pub water_level_adc: f64,
    /// Upper edge of the post-irrigation "wet" band.
    pub wet_high_adc: f64,
    pub optimal_adc: f64,
    /// Lower edge of the "dry soil" band.
    pub dry_low_adc: f64,
    /// Probe in dry air.
    pub dry_air_adc: f64,
    pub adc_max: f64,
}

impl Default for CalibrationProfile {
    fn default() -> Self {
        Self {
            water_level_adc: 1500.0,
            wet_high_adc: 2900.0,
            optimal_adc: 2500.0,
            dry_low_adc: 3500.0,
            dry_air_adc: 3699.0,
            adc_max: ADC_MAX,
        }
    }
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<(), TelemetryError> {
        let chain = [self.water_level_adc, self.optimal_adc, self.wet_high_adc, self.dry_low_adc, self.dry_air_adc];
        if chain.iter().chain([&self.adc_max]).any(|v| !v.is_finite()) {
            return Err(TelemetryError::InvalidCalibration("non-finite landmark".into()));
        }
        if !chain.windows(2).all(|w| w[0] < w[1]) || self.dry_air_adc > self.adc_max {
            return Err(TelemetryError::InvalidCalibration(format!(
                "landmarks must satisfy water < optimal < wet_high < dry_low < dry_air <= adc_max, got {chain:?} / {}",
                self.adc_max
            )));
        }
        Ok(())
    }
}

/// Dryness relative to the optimal landmark: 0 at optimal, 100 at the dry
/// threshold, negative when wetter than optimal. Truncates toward zero.
pub fn dryness_pct(soil_adc: f64, cal: &CalibrationProfile) -> i32 {
    let pct = 100.0 * (soil_adc - cal.optimal_adc) / (cal.dry_low_adc - cal.optimal_adc);
    pct.trunc() as i32
}

/// Exponentially weighted smoothing over one decision window.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingState {
    window_len: usize,
    ema_alpha: f64,
    ema: Option<SensorSample>,
    seen: usize,
}

impl SmoothingState {
    pub fn new(window_len: usize, ema_alpha: f64) -> Result<Self, TelemetryError> {
        if window_len == 0 {
            return Err(TelemetryError::InvalidSmoothing("window_len must be >= 1".into()));
        }
        if !(ema_alpha > 0.0 && ema_alpha <= 1.0) {
            return Err(TelemetryError::InvalidSmoothing(format!("ema_alpha must lie in (0, 1], got {ema_alpha}")));
        }
        Ok(Self { window_len, ema_alpha, ema: None, seen: 0 })
    }

    /// Starts from an existing smoothed value instead of the first sample.
    pub fn with_state(mut self, state: SensorSample) -> Self {
        self.ema = Some(state);
        self
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn alpha(&self) -> f64 {
        self.ema_alpha
    }

    /// Number of samples fed since the last reset.
    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn window_full(&self) -> bool {
        self.seen >= self.window_len
    }

    pub fn current(&self) -> Option<SensorSample> {
        self.ema
    }

    pub fn reset(&mut self) {
        self.ema = None;
        self.seen = 0;
    }

    /// Feeds one sample and returns the smoothed reading. The first sample
    /// after a reset seeds the filter.
    pub fn smooth(&mut self, sample: &SensorSample) -> SensorSample {
        let a = self.ema_alpha;
        let blend = |x: f64, s: f64| a * x + (1.0 - a) * s;
        let next = match self.ema {
            None => *sample,
            Some(s) => SensorSample {
                ts_ms: sample.ts_ms,
                soil_adc: blend(sample.soil_adc, s.soil_adc),
                temp_c: blend(sample.temp_c, s.temp_c),
                hum_pct: blend(sample.hum_pct, s.hum_pct),
                light_lux: blend(sample.light_lux, s.light_lux),
                ph: match (sample.ph, s.ph) {
                    (Some(x), Some(p)) => Some(blend(x, p)),
                    (x, p) => x.or(p),
                },
            },
        };
        self.ema = Some(next);
        self.seen += 1;
        next
    }
}

/// Linear maps applied to temperature before it reaches the edge model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationConfig {
    pub temp_offset_c: f64,
    pub temp_span_c: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self { temp_offset_c: 5.0, temp_span_c: 70.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEncoding {
    /// sin/cos of the time of day.
    #[default]
    Clock,
    /// Always (0, 1), i.e. midnight.
    Constant,
}

/// The eight inputs of the on-node model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeInputVector {
    pub soil_n: f64,
    pub temp_n: f64,
    pub hum_n: f64,
    pub time_sin: f64,
    pub time_cos: f64,
    pub inter_soil_temp: f64,
    pub inter_soil_hum: f64,
    pub inter_temp_hum: f64,
}

impl EdgeInputVector {
    pub const LEN: usize = 8;
    pub const NAMES: [&'static str; 8] =
        ["soil_n", "temp_n", "hum_n", "time_sin", "time_cos", "inter_soil_temp", "inter_soil_hum", "inter_temp_hum"];

    pub fn to_array(&self) -> [f64; 8] {
        [self.soil_n, self.temp_n, self.hum_n, self.time_sin, self.time_cos, self.inter_soil_temp, self.inter_soil_hum, self.inter_temp_hum]
    }
}

pub fn seconds_of_day(ts_ms: i64) -> f64 {
    (ts_ms.rem_euclid(86_400_000)) as f64 / 1000.0
}

pub fn normalize(smoothed: &SensorSample, cal: &CalibrationProfile, norm: &NormalizationConfig, seconds_of_day: f64) -> EdgeInputVector {
    let soil_n = (smoothed.soil_adc - cal.water_level_adc) / (cal.dry_air_adc - cal.water_level_adc);
    let temp_n = (smoothed.temp_c + norm.temp_offset_c) / norm.temp_span_c;
    let hum_n = smoothed.hum_pct / 100.0;
    let phase = TAU * seconds_of_day / SECONDS_PER_DAY;
    EdgeInputVector {
        soil_n,
        temp_n,
        hum_n,
        time_sin: phase.sin(),
        time_cos: phase.cos(),
        inter_soil_temp: soil_n * temp_n,
        inter_soil_hum: soil_n * hum_n,
        inter_temp_hum: temp_n * hum_n,
    }
}

/// Constants behind the engineered offline features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub stress_temp_base_c: f64,
    pub stress_temp_span_c: f64,
    pub ph_low: f64,
    pub ph_high: f64,
    /// Smoothing factor of the cumulative-stress EWMA.
    pub cumulative_beta: f64,
    pub light_low_below: f64,
    pub light_high_above: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            stress_temp_base_c: 20.0,
            stress_temp_span_c: 15.0,
            ph_low: 5.5,
            ph_high: 7.5,
            cumulative_beta: 0.1,
            light_low_below: 1000.0,
            light_high_above: 3000.0,
        }
    }
}

impl FeatureConfig {
    /// Heat term scaled by dryness of the air, in [0, 1].
    pub fn stress_index(&self, temp_c: f64, hum_pct: f64) -> f64 {
        let heat = ((temp_c - self.stress_temp_base_c) / self.stress_temp_span_c).clamp(0.0, 1.0);
        heat * (1.0 - hum_pct / 100.0)
    }

    pub fn et_proxy(&self, temp_c: f64, hum_pct: f64, light_lux: f64) -> f64 {
        self.stress_index(temp_c, hum_pct) * (0.5 + 0.5 * light_lux / LUX_MAX)
    }

    pub fn ph_suitable(&self, ph: f64) -> bool {
        (self.ph_low..=self.ph_high).contains(&ph)
    }

    /// (low, medium, high); both 1000 and 3000 fall in the medium band.
    pub fn light_category(&self, lux: f64) -> (f64, f64, f64) {
        if lux < self.light_low_below {
            (1.0, 0.0, 0.0)
        } else if lux <= self.light_high_above {
            (0.0, 1.0, 0.0)
        } else {
            (0.0, 0.0, 1.0)
        }
    }
}

/// Running EWMA of the stress index.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StressState {
    value: Option<f64>,
}

impl StressState {
    pub fn update(&mut self, stress: f64, beta: f64) -> f64 {
        let v = match self.value {
            None => stress,
            Some(prev) => beta * stress + (1.0 - beta) * prev,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// The fourteen offline training features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector14 {
    pub moisture: f64,
    pub light: f64,
    pub ph: f64,
    pub temperature: f64,
    pub humidity: f64,
    pub moisture_deficit: f64,
    pub stress_index: f64,
    pub ph_suitability: f64,
    pub moisture_change_rate: f64,
    pub cumulative_stress: f64,
    pub et_proxy: f64,
    pub light_low: f64,
    pub light_med: f64,
    pub light_high: f64,
}

impl FeatureVector14 {
    pub const LEN: usize = 14;
    pub const NAMES: [&'static str; 14] = [
        "moisture",
        "light",
        "ph",
        "temperature",
        "humidity",
        "moisture_deficit",
        "stress_index",
        "ph_suitability",
        "moisture_change_rate",
        "cumulative_stress",
        "et_proxy",
        "light_low",
        "light_med",
        "light_high",
    ];

    pub fn to_array(&self) -> [f64; 14] {
        [
            self.moisture,
            self.light,
            self.ph,
            self.temperature,
            self.humidity,
            self.moisture_deficit,
            self.stress_index,
            self.ph_suitability,
            self.moisture_change_rate,
            self.cumulative_stress,
            self.et_proxy,
            self.light_low,
            self.light_med,
            self.light_high,
        ]
    }
}

pub fn engineer_features(
    sample: &SensorSample,
    prev: Option<&SensorSample>,
    stress_state: &mut StressState,
    cal: &CalibrationProfile,
    cfg: &FeatureConfig,
) -> Result<FeatureVector14, TelemetryError> {
    check_finite("soil_adc", sample.soil_adc)?;
    check_finite("temp_c", sample.temp_c)?;
    check_finite("hum_pct", sample.hum_pct)?;
    check_finite("light_lux", sample.light_lux)?;
    let ph = sample.ph.ok_or(TelemetryError::MissingPh)?;
    check_finite("ph", ph)?;

    let stress = cfg.stress_index(sample.temp_c, sample.hum_pct);
    let change_rate = match prev {
        Some(p) => {
            check_finite("prev.soil_adc", p.soil_adc)?;
            let dt_min = (sample.ts_ms - p.ts_ms) as f64 / 60_000.0;
            if dt_min > 0.0 {
                (sample.soil_adc - p.soil_adc) / dt_min
            } else {
                0.0
            }
        }
        None => 0.0,
    };
    let cumulative = stress_state.update(stress, cfg.cumulative_beta);
    let (low, med, high) = cfg.light_category(sample.light_lux);

    Ok(FeatureVector14 {
        moisture: sample.soil_adc,
        light: sample.light_lux,
        ph,
        temperature: sample.temp_c,
        humidity: sample.hum_pct,
        moisture_deficit: sample.soil_adc - cal.optimal_adc,
        stress_index: stress,
        ph_suitability: if cfg.ph_suitable(ph) { 1.0 } else { 0.0 },
        moisture_change_rate: change_rate,
        cumulative_stress: cumulative,
        et_proxy: cfg.et_proxy(sample.temp_c, sample.hum_pct, sample.light_lux),
        light_low: low,
        light_med: med,
        light_high: high,
    })
}

/// Per-feature standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ScalerParams {
    /// Population standard deviation; features with zero spread get std 1.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, TelemetryError> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let n = rows.len() as f64;
        let mut means = vec![0.0; width];
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(TelemetryError::DimensionMismatch { expected: width, got: row.len() });
            }
            for (m, x) in means.iter_mut().zip(row) {
                *m += x;
            }
        }
        means.iter_mut().for_each(|m| *m /= n.max(1.0));
        let mut vars = vec![0.0; width];
        for row in rows {
            for ((v, x), m) in vars.iter_mut().zip(row.as_ref()).zip(&means) {
                *v += (x - m) * (x - m);
            }
        }
        let stds = vars
            .into_iter()
            .map(|v| {
                let s = (v / n.max(1.0)).sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { means, stds })
    }

    pub fn identity(width: usize) -> Self {
        Self { means: vec![0.0; width], stds: vec![1.0; width] }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Rounds every parameter to the nearest `f32`, so that a model exported
    /// in single precision standardizes inputs bit-identically.
    pub fn snapped_to_f32(&self) -> Self {
        let snap = |v: &f64| *v as f32 as f64;
        Self {
            means: self.means.iter().map(snap).collect(),
            stds: self
                .stds
                .iter()
                .map(|s| {
                    let s = *s as f32 as f64;
                    if s > 0.0 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect(),
        }
    }

    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>, TelemetryError> {
        let mut out = vec![0.0; x.len()];
        self.standardize_into(x, &mut out)?;
        Ok(out)
    }

    pub fn standardize_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), TelemetryError> {
        if x.len() != self.means.len() || out.len() != x.len() {
            return Err(TelemetryError::DimensionMismatch { expected: self.means.len(), got: x.len() });
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = (x[i] - self.means[i]) / self.stds[i];
        }
        Ok(())
    }

    pub fn unstandardize(&self, z: &[f64]) -> Result<Vec<f64>, TelemetryError> {
        if z.len() != self.means.len() {
            return Err(TelemetryError::DimensionMismatch { expected: self.means.len(), got: z.len() });
        }
        Ok(z.iter().zip(&self.means).zip(&self.stds).map(|((v, m), s)| v * s + m).collect())
    }
}
