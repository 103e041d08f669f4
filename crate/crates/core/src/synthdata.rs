//! Synthetic agro-environmental dataset matched to the published descriptive
//! statistics, plus the two canonical CSV layouts.
//!
//! Marginals are clipped mixtures whose parameters were fitted so that the
//! clipped sample mean, standard deviation and median land on the reference
//! table. Temperature and humidity are coupled through a Gaussian copula; the
//! latent correlation is solved for so the *observed* Pearson correlation
//! after clipping hits the configured target.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{
    engineer_features, normalize, CalibrationProfile, FeatureConfig, NormalizationConfig, SensorSample, StressState, TelemetryError,
    LUX_MAX,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const NEED_HEADER: &str = "soil_adc,light,ph,temperature,humidity,need";
pub const WATER_HEADER: &str = "soil_adc,light,temperature,humidity,water_ml";

/// Clip bounds of each channel.
pub const MOISTURE_RANGE: (f64, f64) = (501.0, 4095.0);
pub const LIGHT_RANGE: (f64, f64) = (0.0, 5000.0);
pub const PH_RANGE: (f64, f64) = (3.0, 12.0);
pub const TEMP_RANGE: (f64, f64) = (20.0, 35.0);
pub const HUM_RANGE: (f64, f64) = (20.0, 90.0);

const CHUNK_ROWS: usize = 4096;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unexpected header: expected `{expected}`, found `{found}`")]
    BadHeader { expected: &'static str, found: String },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("split fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("empty dataset")]
    Empty,
    #[error("row {row} lacks the `{field}` column")]
    MissingField { row: usize, field: &'static str },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Weights of the irrigation-need score. `bias` multiplies a constant 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedWeights {
    pub bias: f64,
    pub moisture_deficit: f64,
    pub stress_index: f64,
    pub et_proxy: f64,
    pub light: f64,
    pub ph_penalty: f64,
}

impl Default for NeedWeights {
    fn default() -> Self {
        Self { bias: 0.226, moisture_deficit: 0.29, stress_index: 0.054, et_proxy: 0.05, light: 0.192, ph_penalty: 0.024 }
    }
}

impl NeedWeights {
    pub fn zero() -> Self {
        Self { bias: 0.0, moisture_deficit: 0.0, stress_index: 0.0, et_proxy: 0.0, light: 0.0, ph_penalty: 0.0 }
    }
}

/// Water volume label: `k * (deficit/1000)^exponent * (1 + stress_gain*stress + light_gain*light/5000)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaterLabelParams {
    pub k: f64,
    pub exponent: f64,
    pub stress_gain: f64,
    pub light_gain: f64,
    /// Half-width of the uniform multiplicative noise.
    pub noise_frac: f64,
}

impl Default for WaterLabelParams {
    fn default() -> Self {
        Self { k: 7.5, exponent: 1.5, stress_gain: 80.0, light_gain: 8.0, noise_frac: 0.02 }
    }
}

/// Two-component normal mixture, clipped and rounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClippedMixture {
    pub weight_a: f64,
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
    pub lo: f64,
    pub hi: f64,
    pub resolution: f64,
}

impl ClippedMixture {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let z: f64 = StandardNormal.sample(rng);
        let x = if u < self.weight_a { self.mean_a + self.sd_a * z } else { self.mean_b + self.sd_b * z };
        quantize(x.clamp(self.lo, self.hi), self.resolution)
    }
}

fn quantize(x: f64, resolution: f64) -> f64 {
    if resolution > 0.0 {
        let q = (x / resolution).round() * resolution;
        // keep one decimal values like 24.9 exact in their shortest form
        (q * 1e6).round() / 1e6
    } else {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub moisture: ClippedMixture,
    pub ph: ClippedMixture,
    pub temp_mean: f64,
    pub temp_sd: f64,
    pub hum_mean: f64,
    pub hum_sd: f64,
    /// Light is uniform on `[lo - pad, hi + pad]`, clipped, so both ends occur.
    pub light_pad: f64,
}

impl Default for Marginals {
    fn default() -> Self {
        Self {
            moisture: ClippedMixture {
                weight_a: 0.2304,
                mean_a: 1311.7,
                sd_a: 836.7,
                mean_b: 3062.8,
                sd_b: 505.2,
                lo: MOISTURE_RANGE.0,
                hi: MOISTURE_RANGE.1,
                resolution: 1.0,
            },
            ph: ClippedMixture {
                weight_a: 0.3574,
                mean_a: 4.410,
                sd_a: 1.119,
                mean_b: 9.204,
                sd_b: 1.545,
                lo: PH_RANGE.0,
                hi: PH_RANGE.1,
                resolution: 0.1,
            },
            temp_mean: 27.212,
            temp_sd: 4.434,
            hum_mean: 54.518,
            hum_sd: 20.771,
            light_pad: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub schema_version: u32,
    pub n_rows: usize,
    pub seed: u64,
    pub temp_hum_rho: f64,
    pub need_weights: NeedWeights,
    pub noise_sd: f64,
    pub water: WaterLabelParams,
    pub marginals: Marginals,
    /// Spacing of the implicit row timestamps.
    pub row_interval_ms: i64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            n_rows: 30_001,
            seed: 7,
            temp_hum_rho: -0.42,
            need_weights: NeedWeights::default(),
            noise_sd: 0.01,
            water: WaterLabelParams::default(),
            marginals: Marginals::default(),
            row_interval_ms: 60_000,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SynthError::InvalidConfig(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.n_rows == 0 {
            return Err(SynthError::InvalidConfig("n_rows must be >= 1".into()));
        }
        if !(self.temp_hum_rho > -1.0 && self.temp_hum_rho < 1.0) {
            return Err(SynthError::InvalidConfig("temp_hum_rho must lie in (-1, 1)".into()));
        }
        if self.noise_sd.is_nan() || self.noise_sd < 0.0 {
            return Err(SynthError::InvalidConfig("noise_sd must be >= 0".into()));
        }
        if self.row_interval_ms <= 0 {
            return Err(SynthError::InvalidConfig("row_interval_ms must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub soil_adc: f64,
    pub light_lux: f64,
    pub ph: Option<f64>,
    pub temp_c: f64,
    pub hum_pct: f64,
    pub need: Option<f64>,
    pub water_ml: Option<f64>,
}

impl DatasetRow {
    pub fn sample(&self, ts_ms: i64) -> SensorSample {
        SensorSample { ts_ms, soil_adc: self.soil_adc, temp_c: self.temp_c, hum_pct: self.hum_pct, light_lux: self.light_lux, ph: self.ph }
    }
}

/// Deterministic part of the need label, before noise and clamping.
pub fn need_score(row: &DatasetRow, w: &NeedWeights, cal: &CalibrationProfile, features: &FeatureConfig) -> f64 {
    let deficit = ((row.soil_adc - cal.optimal_adc) / (cal.adc_max - cal.optimal_adc)).max(0.0);
    let stress = features.stress_index(row.temp_c, row.hum_pct);
    let et = features.et_proxy(row.temp_c, row.hum_pct, row.light_lux);
    let ph_penalty = match row.ph {
        Some(ph) if features.ph_suitable(ph) => 0.0,
        Some(_) => 1.0,
        None => 0.0,
    };
    w.bias
        + w.moisture_deficit * deficit
        + w.stress_index * stress
        + w.et_proxy * et
        + w.light * row.light_lux / LUX_MAX
        + w.ph_penalty * ph_penalty
}

pub fn label_need(row: &DatasetRow, w: &NeedWeights, noise: f64) -> f64 {
    let score = need_score(row, w, &CalibrationProfile::default(), &FeatureConfig::default());
    (score + noise).clamp(0.0, 1.0)
}

/// Noise-free water volume in millilitres.
pub fn water_ml_clean(row: &DatasetRow, p: &WaterLabelParams, cal: &CalibrationProfile, features: &FeatureConfig) -> f64 {
    let deficit = row.soil_adc - cal.optimal_adc;
    if deficit <= 0.0 {
        return 0.0;
    }
    let stress = features.stress_index(row.temp_c, row.hum_pct);
    p.k * (deficit / 1000.0).powf(p.exponent) * (1.0 + p.stress_gain * stress + p.light_gain * row.light_lux / LUX_MAX)
}

/// `noise` is a multiplicative perturbation, clamped to `[-noise_frac, noise_frac]`.
pub fn label_water_ml(row: &DatasetRow, p: &WaterLabelParams, noise: f64) -> f64 {
    let clean = water_ml_clean(row, p, &CalibrationProfile::default(), &FeatureConfig::default());
    (clean * (1.0 + noise.clamp(-p.noise_frac, p.noise_frac))).max(0.0)
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Sample Pearson correlation.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(xs, ys)
}

fn clipped_pair(m: &Marginals, z1: f64, z2: f64) -> (f64, f64) {
    let t = quantize((m.temp_mean + m.temp_sd * z1).clamp(TEMP_RANGE.0, TEMP_RANGE.1), 0.1);
    let h = quantize((m.hum_mean + m.hum_sd * z2).clamp(HUM_RANGE.0, HUM_RANGE.1), 0.1);
    (t, h)
}

/// Latent copula correlation that yields `target` after clipping, found by
/// bisection on a fixed reference sample.
pub fn latent_rho_for(target: f64, m: &Marginals) -> f64 {
    const N: usize = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x005e_edc0_9a1a);
    let base: Vec<(f64, f64)> = (0..N).map(|_| (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))).collect();
    let realized = |rho: f64| {
        let s = (1.0 - rho * rho).sqrt();
        let (ts, hs): (Vec<f64>, Vec<f64>) = base.iter().map(|&(a, b)| clipped_pair(m, a, rho * a + s * b)).unzip();
        pearson(&ts, &hs)
    };
    let (mut lo, mut hi) = (-0.999, 0.999);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if realized(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<DatasetRow>, SynthError> {
    cfg.validate()?;
    let m = cfg.marginals;
    let rho = latent_rho_for(cfg.temp_hum_rho, &m);
    let s = (1.0 - rho * rho).sqrt();
    let n_chunks = cfg.n_rows.div_ceil(CHUNK_ROWS);
    let chunks: Vec<Vec<DatasetRow>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(cfg.seed, c as u64));
            let len = CHUNK_ROWS.min(cfg.n_rows - c * CHUNK_ROWS);
            (0..len)
                .map(|_| {
                    let soil = m.moisture.sample(&mut rng);
                    let ph = m.ph.sample(&mut rng);
                    let light: f64 = rng.random_range(LIGHT_RANGE.0 - m.light_pad..LIGHT_RANGE.1 + m.light_pad);
                    let light = light.clamp(LIGHT_RANGE.0, LIGHT_RANGE.1).round();
                    let z1: f64 = StandardNormal.sample(&mut rng);
                    let z2: f64 = StandardNormal.sample(&mut rng);
                    let (temp, hum) = clipped_pair(&m, z1, rho * z1 + s * z2);
                    let mut row = DatasetRow {
                        soil_adc: soil,
                        light_lux: light,
                        ph: Some(ph),
                        temp_c: temp,
                        hum_pct: hum,
                        need: None,
                        water_ml: None,
                    };
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let wn: f64 = rng.random_range(-1.0..=1.0);
                    row.need = Some(label_need(&row, &cfg.need_weights, cfg.noise_sd * eps));
                    row.water_ml = Some(label_water_ml(&row, &cfg.water, cfg.water.noise_frac * wn));
                    row
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Fractions of need values in the low (<0.3), medium and high (>0.6) zones.
pub fn zone_fractions(needs: &[f64]) -> (f64, f64, f64) {
    let n = needs.len().max(1) as f64;
    let low = needs.iter().filter(|v| **v < 0.3).count() as f64 / n;
    let high = needs.iter().filter(|v| **v > 0.6).count() as f64 / n;
    (low, 1.0 - low - high, high)
}

/// Deterministic shuffled split; the training side gets `ceil(fraction * n)` rows.
pub fn split<T: Clone>(rows: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), SynthError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SynthError::InvalidFraction(fraction));
    }
    if rows.is_empty() {
        return Err(SynthError::Empty);
    }
    let order = shuffled_indices(rows.len(), seed);
    let n_train = ((rows.len() as f64) * fraction).ceil() as usize;
    let train = order[..n_train].iter().map(|&i| rows[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| rows[i].clone()).collect();
    Ok((train, test))
}

pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvTask {
    Need,
    Water,
}

impl CsvTask {
    pub fn header(self) -> &'static str {
        match self {
            CsvTask::Need => NEED_HEADER,
            CsvTask::Water => WATER_HEADER,
        }
    }
}

pub fn to_csv_string(rows: &[DatasetRow], task: CsvTask) -> Result<String, SynthError> {
    let mut out = String::with_capacity(rows.len() * 48);
    out.push_str(task.header());
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        match task {
            CsvTask::Need => {
                let ph = r.ph.ok_or(SynthError::MissingField { row: i, field: "ph" })?;
                let need = r.need.ok_or(SynthError::MissingField { row: i, field: "need" })?;
                writeln!(out, "{:?},{:?},{:?},{:?},{:?},{:?}", r.soil_adc, r.light_lux, ph, r.temp_c, r.hum_pct, need)
            }
            CsvTask::Water => {
                let w = r.water_ml.ok_or(SynthError::MissingField { row: i, field: "water_ml" })?;
                writeln!(out, "{:?},{:?},{:?},{:?},{:?}", r.soil_adc, r.light_lux, r.temp_c, r.hum_pct, w)
            }
        }
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[DatasetRow], task: CsvTask) -> Result<(), SynthError> {
    fs::write(path, to_csv_string(rows, task)?)?;
    Ok(())
}

pub fn parse_csv(text: &str, task: CsvTask) -> Result<Vec<DatasetRow>, SynthError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h.trim_end_matches('\r')).unwrap_or("");
    if header != task.header() {
        return Err(SynthError::BadHeader { expected: task.header(), found: header.to_string() });
    }
    let arity = task.header().split(',').count();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != arity {
            return Err(SynthError::Malformed { line: line_no, message: format!("expected {arity} fields, found {}", fields.len()) });
        }
        let mut vals = Vec::with_capacity(arity);
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| SynthError::Malformed { line: line_no, message: format!("not a number: `{f}`") })?;
            vals.push(v);
        }
        rows.push(match task {
            CsvTask::Need => DatasetRow {
                soil_adc: vals[0],
                light_lux: vals[1],
                ph: Some(vals[2]),
                temp_c: vals[3],
                hum_pct: vals[4],
                need: Some(vals[5]),
                water_ml: None,
            },
            CsvTask::Water => DatasetRow {
                soil_adc: vals[0],
                light_lux: vals[1],
                ph: None,
                temp_c: vals[2],
                hum_pct: vals[3],
                need: None,
                water_ml: Some(vals[4]),
            },
        });
    }
    Ok(rows)
}

pub fn read_csv(path: impl AsRef<Path>, task: CsvTask) -> Result<Vec<DatasetRow>, SynthError> {
    parse_csv(&fs::read_to_string(path)?, task)
}

/// Builds the 14-feature matrix in row order, treating rows as consecutive
/// readings `row_interval_ms` apart, and returns it with the need targets.
pub fn need_features(
    rows: &[DatasetRow],
    row_interval_ms: i64,
    cal: &CalibrationProfile,
    features: &FeatureConfig,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), SynthError> {
    let mut stress = StressState::default();
    let mut prev: Option<SensorSample> = None;
    let mut x = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let s = r.sample(i as i64 * row_interval_ms);
        let fv = engineer_features(&s, prev.as_ref(), &mut stress, cal, features)?;
        x.push(fv.to_array().to_vec());
        y.push(r.need.ok_or(SynthError::MissingField { row: i, field: "need" })?);
        prev = Some(s);
    }
    Ok((x, y))
}

/// Edge-model inputs with the constant time encoding, and water targets.
pub fn water_features(
    rows: &[DatasetRow],
    cal: &CalibrationProfile,
    norm: &NormalizationConfig,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), SynthError> {
    let mut x = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        x.push(normalize(&r.sample(0), cal, norm, 0.0).to_array().to_vec());
        y.push(r.water_ml.ok_or(SynthError::MissingField { row: i, field: "water_ml" })?);
    }
    Ok((x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl ColumnStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
        Self { mean, std: var.sqrt(), min: sorted[0], max: sorted[sorted.len() - 1], median }
    }
}

/// Summary of a generated dataset, used by the CLI report and the tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_rows: usize,
    pub moisture: ColumnStats,
    pub light: ColumnStats,
    pub ph: ColumnStats,
    pub temperature: ColumnStats,
    pub humidity: ColumnStats,
    pub need: ColumnStats,
    pub corr_temp_hum: f64,
    pub corr_deficit_need: f64,
    pub zone_low: f64,
    pub zone_medium: f64,
    pub zone_high: f64,
}

pub fn summarize(rows: &[DatasetRow]) -> Result<DatasetSummary, SynthError> {
    if rows.is_empty() {
        return Err(SynthError::Empty);
    }
    let col = |f: &dyn Fn(&DatasetRow) -> Option<f64>, name: &'static str| -> Result<Vec<f64>, SynthError> {
        rows.iter().enumerate().map(|(i, r)| f(r).ok_or(SynthError::MissingField { row: i, field: name })).collect()
    };
    let moisture = col(&|r| Some(r.soil_adc), "soil_adc")?;
    let temp = col(&|r| Some(r.temp_c), "temperature")?;
    let hum = col(&|r| Some(r.hum_pct), "humidity")?;
    let need = col(&|r| r.need, "need")?;
    let (zone_low, zone_medium, zone_high) = zone_fractions(&need);
    Ok(DatasetSummary {
        n_rows: rows.len(),
        moisture: ColumnStats::of(&moisture),
        light: ColumnStats::of(&col(&|r| Some(r.light_lux), "light")?),
        ph: ColumnStats::of(&col(&|r| r.ph, "ph")?),
        temperature: ColumnStats::of(&temp),
        humidity: ColumnStats::of(&hum),
        need: ColumnStats::of(&need),
        corr_temp_hum: pearson(&temp, &hum),
        corr_deficit_need: pearson(&moisture, &need),
        zone_low,
        zone_medium,
        zone_high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig { n_rows: n, seed, ..Default::default() }
    }

    #[test]
    fn single_row_within_bounds() {
        let rows = generate(&small(1, 3)).unwrap();
        assert_eq!(rows.len(), 1);
        let r = rows[0];
        assert!((MOISTURE_RANGE.0..=MOISTURE_RANGE.1).contains(&r.soil_adc));
        assert!((LIGHT_RANGE.0..=LIGHT_RANGE.1).contains(&r.light_lux));
        assert!((PH_RANGE.0..=PH_RANGE.1).contains(&r.ph.unwrap()));
        assert!((TEMP_RANGE.0..=TEMP_RANGE.1).contains(&r.temp_c));
        assert!((HUM_RANGE.0..=HUM_RANGE.1).contains(&r.hum_pct));
        assert!((0.0..=1.0).contains(&r.need.unwrap()));
        assert!(r.water_ml.unwrap() >= 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(5000, 11)).unwrap();
        let b = generate(&small(5000, 11)).unwrap();
        assert_eq!(to_csv_string(&a, CsvTask::Need).unwrap(), to_csv_string(&b, CsvTask::Need).unwrap());
        let c = generate(&small(5000, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weights_without_noise_give_zero_need() {
        let cfg = GeneratorConfig { n_rows: 200, noise_sd: 0.0, need_weights: NeedWeights::zero(), ..Default::default() };
        assert!(generate(&cfg).unwrap().iter().all(|r| r.need == Some(0.0)));
    }

    fn row(soil: f64, temp: f64, hum: f64, light: f64, ph: f64) -> DatasetRow {
        DatasetRow { soil_adc: soil, light_lux: light, ph: Some(ph), temp_c: temp, hum_pct: hum, need: None, water_ml: None }
    }

    #[test]
    fn need_zone_examples() {
        let w = NeedWeights::default();
        assert!(label_need(&row(4095.0, 35.0, 20.0, 5000.0, 6.5), &w, 0.0) > 0.6);
        assert!(label_need(&row(501.0, 22.0, 70.0, 500.0, 6.5), &w, 0.0) < 0.3);
    }

    #[test]
    fn water_examples() {
        let p = WaterLabelParams::default();
        assert_eq!(label_water_ml(&row(940.0, 29.0, 42.0, 4876.0, 7.0), &p, 0.0), 0.0);
        assert_eq!(label_water_ml(&row(2500.0, 35.0, 20.0, 5000.0, 7.0), &p, 0.02), 0.0);
        let w = label_water_ml(&row(3312.0, 33.0, 31.0, 2300.0, 7.0), &p, 0.0);
        assert!((200.0..=400.0).contains(&w), "{w}");
        // mild row stays small
        let w = label_water_ml(&row(2764.0, 21.0, 77.0, 535.0, 7.0), &p, 0.0);
        assert!(w < 20.0, "{w}");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let rows: Vec<usize> = (0..30_001).collect();
        let (tr, te) = split(&rows, 0.8, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (24_001, 6_000));
        let (tr2, te2) = split(&rows, 0.8, 5).unwrap();
        assert_eq!((tr.clone(), te.clone()), (tr2, te2));
        let mut all: Vec<usize> = tr.into_iter().chain(te).collect();
        all.sort_unstable();
        assert_eq!(all, rows);

        let (tr, te) = split(&[42], 0.8, 1).unwrap();
        assert_eq!((tr, te), (vec![42], vec![]));
        assert!(matches!(split(&rows, 1.0, 1), Err(SynthError::InvalidFraction(_))));
        assert!(matches!(split(&rows, 0.0, 1), Err(SynthError::InvalidFraction(_))));
        assert!(matches!(split::<u8>(&[], 0.5, 1), Err(SynthError::Empty)));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let rows = generate(&small(100, 2)).unwrap();
        for task in [CsvTask::Need, CsvTask::Water] {
            let text = to_csv_string(&rows, task).unwrap();
            assert!(text.starts_with(task.header()));
            let back = parse_csv(&text, task).unwrap();
            assert_eq!(back.len(), 100);
            for (a, b) in rows.iter().zip(&back) {
                assert_eq!(a.soil_adc, b.soil_adc);
                assert_eq!(a.temp_c, b.temp_c);
                match task {
                    CsvTask::Need => assert_eq!((a.ph, a.need), (b.ph, b.need)),
                    CsvTask::Water => assert_eq!(a.water_ml, b.water_ml),
                }
            }
        }
        assert!(parse_csv(&format!("{WATER_HEADER}\n"), CsvTask::Water).unwrap().is_empty());
        let logged = format!("{WATER_HEADER}\n2856.0,1105.0,25.0,66.0,9.128869428584574\n");
        let r = parse_csv(&logged, CsvTask::Water).unwrap()[0];
        assert_eq!((r.soil_adc, r.light_lux, r.temp_c, r.hum_pct), (2856.0, 1105.0, 25.0, 66.0));
        assert_eq!(r.water_ml, Some(9.128869428584574));
        assert_eq!(to_csv_string(&[r], CsvTask::Water).unwrap(), logged);

        let err = parse_csv(&format!("{WATER_HEADER}\n1,2,3,4,5\n1,2,3\n"), CsvTask::Water).unwrap_err();
        assert!(matches!(err, SynthError::Malformed { line: 3, .. }), "{err}");
        let err = parse_csv(&format!("{WATER_HEADER}\n1,2,x,4,5\n"), CsvTask::Water).unwrap_err();
        assert!(matches!(err, SynthError::Malformed { line: 2, .. }), "{err}");
        assert!(matches!(parse_csv("a,b\n", CsvTask::Need), Err(SynthError::BadHeader { .. })));
    }

    #[test]
    fn config_json_roundtrip_and_validation() {
        let cfg = GeneratorConfig::default();
        let back = GeneratorConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        let partial = GeneratorConfig::from_json(r#"{"schema_version":1,"n_rows":10,"seed":3}"#).unwrap();
        assert_eq!((partial.n_rows, partial.seed, partial.noise_sd), (10, 3, 0.01));
        assert!(GeneratorConfig::from_json(r#"{"schema_version":2}"#).is_err());
        assert!(GeneratorConfig::from_json(r#"{"n_rows":0}"#).is_err());
        assert!(GeneratorConfig::from_json(r#"{"temp_hum_rho":1.0}"#).is_err());
    }

    #[test]
    fn latent_rho_overshoots_target_slightly() {
        let rho = latent_rho_for(-0.42, &Marginals::default());
        assert!(rho < -0.42 && rho > -0.5, "{rho}");
    }
}
