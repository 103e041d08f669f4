//! Where a node's readings come from: a scripted list, a CSV replay, or the
//! field simulator.

use std::collections::VecDeque;
use std::path::Path;

use thiserror::Error;

use crate::fieldsim::{Field, ScenarioConfig};
use crate::telemetry::SensorSample;

#[derive(Debug, Error, PartialEq)]
pub enum SourceError {
    #[error("replay line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("replay: {0}")]
    Io(String),
}

pub trait SensorSource {
    /// The next reading, `None` once the source is exhausted.
    fn next_sample(&mut self) -> Option<Result<SensorSample, SourceError>>;

    /// Tells the source that the node just dispensed `ml`. Only sources
    /// coupled to a plant model care.
    fn apply_dispense(&mut self, _ml: f64) {}
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedSource {
    samples: VecDeque<SensorSample>,
    dispensed: Vec<f64>,
}

impl ScriptedSource {
    pub fn new(samples: impl IntoIterator<Item = SensorSample>) -> Self {
        Self { samples: samples.into_iter().collect(), dispensed: Vec::new() }
    }

    /// Volumes reported through `apply_dispense`, in order.
    pub fn dispensed(&self) -> &[f64] {
        &self.dispensed
    }
}

impl SensorSource for ScriptedSource {
    fn next_sample(&mut self) -> Option<Result<SensorSample, SourceError>> {
        self.samples.pop_front().map(Ok)
    }

    fn apply_dispense(&mut self, ml: f64) {
        self.dispensed.push(ml);
    }
}

pub const REPLAY_HEADER: &str = "ts_ms,soil_adc,temp_c,hum_pct,light_lux";

/// CSV replay with columns `ts_ms,soil_adc,temp_c,hum_pct,light_lux[,ph]`.
/// Timestamps are compressed by `speed` relative to the first row.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    rows: VecDeque<(usize, String)>,
    speed: f64,
    t0: Option<i64>,
}

impl ReplaySource {
    pub fn from_csv(text: &str, speed: f64) -> Result<Self, SourceError> {
        if !(speed.is_finite() && speed > 0.0) {
            return Err(SourceError::Malformed { line: 0, message: format!("speed must be positive, got {speed}") });
        }
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim().starts_with(REPLAY_HEADER) => {}
            Some((i, h)) => {
                return Err(SourceError::Malformed { line: i + 1, message: format!("expected header {REPLAY_HEADER:?}, got {h:?}") })
            }
            None => return Err(SourceError::Malformed { line: 1, message: "empty replay".into() }),
        }
        Ok(Self { rows: lines.map(|(i, l)| (i + 1, l.to_string())).collect(), speed, t0: None })
    }

    pub fn from_path(path: &Path, speed: f64) -> Result<Self, SourceError> {
        let text = std::fs::read_to_string(path).map_err(|e| SourceError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv(&text, speed)
    }

    pub fn remaining(&self) -> usize {
        self.rows.len()
    }

    fn parse(&mut self, line: usize, row: &str) -> Result<SensorSample, SourceError> {
        let bad = |message: String| SourceError::Malformed { line, message };
        let cols: Vec<&str> = row.split(',').map(str::trim).collect();
        if !(5..=6).contains(&cols.len()) {
            return Err(bad(format!("expected 5 or 6 columns, got {}", cols.len())));
        }
        let ts: i64 = cols[0].parse().map_err(|_| bad(format!("bad ts_ms {:?}", cols[0])))?;
        let mut v = [0.0f64; 5];
        for (k, c) in cols[1..].iter().enumerate() {
            v[k] = c.parse().map_err(|_| bad(format!("bad number {c:?}")))?;
        }
        let t0 = *self.t0.get_or_insert(ts);
        let ts = t0 + ((ts - t0) as f64 / self.speed).round() as i64;
        let mut s = SensorSample::new(ts, v[0], v[1], v[2], v[3]);
        if cols.len() == 6 {
            s = s.with_ph(v[4]);
        }
        s.validate().map_err(|e| bad(e.to_string()))?;
        Ok(s)
    }
}

impl SensorSource for ReplaySource {
    fn next_sample(&mut self) -> Option<Result<SensorSample, SourceError>> {
        let (line, row) = self.rows.pop_front()?;
        Some(self.parse(line, &row))
    }
}

/// The field simulator as a sensor: each sample advances the field by one
/// step, applying whatever was dispensed since the previous sample.
#[derive(Debug, Clone)]
pub struct SimulatedSource {
    field: Field,
    pending_ml: f64,
    started: bool,
}

impl SimulatedSource {
    pub fn new(cfg: ScenarioConfig, seed: u64) -> Self {
        Self { field: Field::new(cfg, seed), pending_ml: 0.0, started: false }
    }

    pub fn with_start(cfg: ScenarioConfig, seed: u64, t0_ms: i64) -> Self {
        Self { field: Field::with_start(cfg, seed, t0_ms), pending_ml: 0.0, started: false }
    }

    pub fn field(&self) -> &Field {
        &self.field
    }
}

impl SensorSource for SimulatedSource {
    fn next_sample(&mut self) -> Option<Result<SensorSample, SourceError>> {
        if self.started {
            self.field.advance(std::mem::take(&mut self.pending_ml));
        }
        self.started = true;
        self.field.reading().map(Ok)
    }

    fn apply_dispense(&mut self, ml: f64) {
        self.pending_ml += ml;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_parses_and_compresses_time() {
        let csv = "ts_ms,soil_adc,temp_c,hum_pct,light_lux,ph\n1000,3723,24.9,45.8,0,6.5\n\n5000,3700,25,46,10\n";
        let mut r = ReplaySource::from_csv(csv, 2.0).unwrap();
        let a = r.next_sample().unwrap().unwrap();
        assert_eq!((a.ts_ms, a.soil_adc, a.ph), (1000, 3723.0, Some(6.5)));
        let b = r.next_sample().unwrap().unwrap();
        assert_eq!((b.ts_ms, b.ph), (3000, None));
        assert!(r.next_sample().is_none());
    }

    #[test]
    fn replay_rejects_bad_rows() {
        assert!(ReplaySource::from_csv("a,b\n", 1.0).is_err());
        assert!(ReplaySource::from_csv("", 1.0).is_err());
        assert!(ReplaySource::from_csv(REPLAY_HEADER, 0.0).is_err());
        let mut r = ReplaySource::from_csv(&format!("{REPLAY_HEADER}\n1,2,3\n1,abc,2,3,4\n1,5000,2,3,4\n"), 1.0).unwrap();
        for line in [2, 3, 4] {
            match r.next_sample() {
                Some(Err(SourceError::Malformed { line: l, .. })) => assert_eq!(l, line),
                other => panic!("line {line}: {other:?}"),
            }
        }
    }

    #[test]
    fn simulated_source_applies_water_on_next_step() {
        let cfg = ScenarioConfig { sensor_noise_adc: 0.0, duration_days: 1.0, ..Default::default() };
        let mut dry = SimulatedSource::new(cfg, 4);
        let mut wet = SimulatedSource::new(cfg, 4);
        let a = dry.next_sample().unwrap().unwrap();
        let b = wet.next_sample().unwrap().unwrap();
        assert_eq!(a, b);
        wet.apply_dispense(10.0);
        let a = dry.next_sample().unwrap().unwrap();
        let b = wet.next_sample().unwrap().unwrap();
        assert!((a.soil_adc - b.soil_adc - 60.0).abs() <= 1.0, "{} {}", a.soil_adc, b.soil_adc);
        assert_eq!(dry.field().step_index(), 1);
    }
}
