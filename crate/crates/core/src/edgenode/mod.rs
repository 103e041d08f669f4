//! The on-node control loop: window smoothing, tiny-model inference, safety
//! gating, pump actuation and the human-readable transcript.

mod runner;
pub mod source;
pub mod transcript;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{validate_node_id, EventPayload, SchemaError, SkipReason, Trigger};
use crate::telemetry::{
    normalize, seconds_of_day, CalibrationProfile, EdgeInputVector, NormalizationConfig, SensorSample, TelemetryError, TimeEncoding,
};
use crate::tinymodel::EdgeModel;

pub use runner::{EdgeNode, Inbound, NodeSummary, NullUplink, Uplink};
pub use source::{ReplaySource, ScriptedSource, SensorSource, SimulatedSource, SourceError};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid node config: {0}")]
    Config(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Model(#[from] crate::tinymodel::TinyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Model,
    Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    pub sample_period_ms: u64,
    pub window_len: usize,
    pub ema_alpha: f64,
    pub calibration: CalibrationProfile,
    pub normalization: NormalizationConfig,
    pub time_encoding: TimeEncoding,
    pub min_ml: f64,
    pub max_ml: f64,
    pub cooldown_s: f64,
    pub pump_ms_per_ml: f64,
    /// Fixed dose used by rule mode and by manual commands without `ml`.
    pub rule_dose_ml: f64,
    pub model_path: Option<String>,
    pub mode: Mode,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            node_id: "node-1".into(),
            sample_period_ms: 2000,
            window_len: 14,
            ema_alpha: 0.25,
            calibration: CalibrationProfile::default(),
            normalization: NormalizationConfig::default(),
            time_encoding: TimeEncoding::Constant,
            min_ml: 1.0,
            max_ml: 500.0,
            cooldown_s: 600.0,
            pump_ms_per_ml: 238.0,
            rule_dose_ml: 15.0,
            model_path: None,
            mode: Mode::Model,
        }
    }
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), NodeError> {
        validate_node_id(&self.node_id)?;
        self.calibration.validate()?;
        let bad = |m: String| Err(NodeError::Config(m));
        if self.window_len < 1 {
            return bad("window_len must be >= 1".into());
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return bad(format!("ema_alpha must be in (0, 1], got {}", self.ema_alpha));
        }
        if !(self.min_ml.is_finite() && self.max_ml.is_finite() && self.min_ml >= 0.0 && self.min_ml < self.max_ml) {
            return bad(format!("need 0 <= min_ml < max_ml, got {} and {}", self.min_ml, self.max_ml));
        }
        if !(self.pump_ms_per_ml.is_finite() && self.pump_ms_per_ml > 0.0) {
            return bad("pump_ms_per_ml must be positive".into());
        }
        if !(self.cooldown_s.is_finite() && self.cooldown_s >= 0.0) {
            return bad(format!("cooldown_s must be >= 0, got {}", self.cooldown_s));
        }
        if !(self.rule_dose_ml.is_finite() && self.rule_dose_ml > 0.0) {
            return bad("rule_dose_ml must be positive".into());
        }
        if self.sample_period_ms == 0 {
            return bad("sample_period_ms must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, NodeError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| NodeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlays a (possibly partial) JSON object onto this config and
    /// validates the result.
    pub fn merge_json(&self, patch: &[u8]) -> Result<Self, NodeError> {
        let patch: serde_json::Value = serde_json::from_slice(patch).map_err(|e| NodeError::Config(e.to_string()))?;
        let mut merged = serde_json::to_value(self).expect("config serializes");
        match (merged.as_object_mut(), patch) {
            (Some(base), serde_json::Value::Object(p)) => base.extend(p),
            _ => return Err(NodeError::Config("config must be a JSON object".into())),
        }
        let cfg: Self = serde_json::from_value(merged).map_err(|e| NodeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn edge_inputs(&self, smoothed: &SensorSample) -> EdgeInputVector {
        let secs = match self.time_encoding {
            TimeEncoding::Clock => seconds_of_day(smoothed.ts_ms),
            TimeEncoding::Constant => 0.0,
        };
        normalize(smoothed, &self.calibration, &self.normalization, secs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrrigationEvent {
    pub ts_ms: i64,
    pub predicted_ml: f64,
    pub dispensed_ml: f64,
    pub duration_ms: u64,
    pub trigger: Trigger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped_reason: Option<SkipReason>,
}

impl IrrigationEvent {
    fn skip(ts_ms: i64, predicted_ml: f64, trigger: Trigger, reason: SkipReason) -> Self {
        Self { ts_ms, predicted_ml, dispensed_ml: 0.0, duration_ms: 0, trigger, skipped_reason: Some(reason) }
    }

    pub fn watered(&self) -> bool {
        self.skipped_reason.is_none()
    }

    pub fn to_payload(&self, node: &str) -> EventPayload {
        EventPayload {
            ts: self.ts_ms,
            node: node.to_string(),
            predicted_ml: self.predicted_ml,
            dispensed_ml: self.dispensed_ml,
            duration_ms: self.duration_ms,
            trigger: self.trigger,
            skipped_reason: self.skipped_reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PumpState {
    #[default]
    Idle,
    Running {
        remaining_ms: u64,
    },
}

/// Volumetric pump: a dose of `ml` runs for `round(ml * ms_per_ml)` ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpModel {
    pub ms_per_ml: f64,
    pub state: PumpState,
    pub total_ml: f64,
    pub total_ms: u64,
}

impl PumpModel {
    pub fn new(ms_per_ml: f64) -> Self {
        Self { ms_per_ml, state: PumpState::Idle, total_ml: 0.0, total_ms: 0 }
    }

    pub fn duration_ms(&self, ml: f64) -> u64 {
        (ml * self.ms_per_ml).round() as u64
    }

    /// Starts a run; the simulated pump finishes on the next `advance`.
    pub fn start(&mut self, ml: f64) -> u64 {
        let ms = self.duration_ms(ml);
        self.state = PumpState::Running { remaining_ms: ms };
        self.total_ml += ml;
        self.total_ms += ms;
        ms
    }

    pub fn advance(&mut self, elapsed_ms: u64) {
        if let PumpState::Running { remaining_ms } = self.state {
            self.state =
                if remaining_ms <= elapsed_ms { PumpState::Idle } else { PumpState::Running { remaining_ms: remaining_ms - elapsed_ms } };
        }
    }

    pub fn is_running(&self) -> bool {
        matches!(self.state, PumpState::Running { .. })
    }
}

/// Mutable gate state carried between decisions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateState {
    pub last_dispense_ms: Option<i64>,
    pub paused: bool,
}

impl GateState {
    fn in_cooldown(&self, now_ms: i64, cfg: &NodeConfig) -> bool {
        self.last_dispense_ms.is_some_and(|t| ((now_ms - t) as f64) < cfg.cooldown_s * 1000.0)
    }
}

/// Everything one decision produced, for logging and publishing.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub event: IrrigationEvent,
    pub inputs: Option<EdgeInputVector>,
    /// Set when a model was configured but could not be used.
    pub model_fallback: bool,
}

pub fn round_to_tenth(ml: f64) -> f64 {
    (ml * 10.0).round() / 10.0
}

/// Applies the dose limits to a wanted volume. `None` means skip below_min.
fn dose(ml: f64, cfg: &NodeConfig) -> Option<f64> {
    let ml = ml.clamp(0.0, cfg.max_ml);
    if ml < cfg.min_ml {
        return None;
    }
    Some(round_to_tenth(ml).clamp(cfg.min_ml, cfg.max_ml))
}

fn finish(ts_ms: i64, predicted: f64, trigger: Trigger, cfg: &NodeConfig, gate: &mut GateState) -> IrrigationEvent {
    if gate.paused {
        return IrrigationEvent::skip(ts_ms, predicted, trigger, SkipReason::Paused);
    }
    if gate.in_cooldown(ts_ms, cfg) {
        return IrrigationEvent::skip(ts_ms, predicted, trigger, SkipReason::Cooldown);
    }
    match dose(predicted, cfg) {
        None => IrrigationEvent::skip(ts_ms, predicted, trigger, SkipReason::BelowMin),
        Some(ml) => {
            gate.last_dispense_ms = Some(ts_ms);
            IrrigationEvent {
                ts_ms,
                predicted_ml: predicted,
                dispensed_ml: ml,
                duration_ms: (ml * cfg.pump_ms_per_ml).round() as u64,
                trigger,
                skipped_reason: None,
            }
        }
    }
}

/// One decision on a smoothed window reading. The in-water guard comes
/// first, then pause and cooldown, then the dose limits.
pub fn decide(smoothed: &SensorSample, model: Option<&EdgeModel>, cfg: &NodeConfig, gate: &mut GateState) -> Decision {
    let ts = smoothed.ts_ms;
    let cal = &cfg.calibration;
    let use_model = cfg.mode == Mode::Model;
    let default_trigger = if use_model { Trigger::Model } else { Trigger::Rule };
    if smoothed.soil_adc < cal.water_level_adc {
        return Decision {
            event: IrrigationEvent::skip(ts, 0.0, default_trigger, SkipReason::InWater),
            inputs: None,
            model_fallback: false,
        };
    }
    let inputs = cfg.edge_inputs(smoothed);
    let mut model_fallback = false;
    if use_model {
        let predicted = match model.map(|m| m.infer(&inputs.to_array())) {
            Some(Ok(ml)) => Some(ml),
            _ => None,
        };
        if let Some(p) = predicted {
            let p = if p.is_finite() { p.clamp(0.0, cfg.max_ml) } else { 0.0 };
            return Decision { event: finish(ts, p, Trigger::Model, cfg, gate), inputs: Some(inputs), model_fallback };
        }
        model_fallback = true;
    }
    let predicted = if smoothed.soil_adc >= cal.dry_low_adc { cfg.rule_dose_ml } else { 0.0 };
    Decision { event: finish(ts, predicted, Trigger::Rule, cfg, gate), inputs: Some(inputs), model_fallback }
}

/// A manual irrigation request, subject to the same guards as automatic
/// decisions. `soil_adc` is the latest smoothed reading, if any.
pub fn decide_manual(ts_ms: i64, ml: Option<f64>, soil_adc: Option<f64>, cfg: &NodeConfig, gate: &mut GateState) -> IrrigationEvent {
    let wanted = ml.unwrap_or(cfg.rule_dose_ml);
    if soil_adc.is_some_and(|s| s < cfg.calibration.water_level_adc) {
        return IrrigationEvent::skip(ts_ms, wanted, Trigger::Manual, SkipReason::InWater);
    }
    finish(ts_ms, wanted, Trigger::Manual, cfg, gate)
}
