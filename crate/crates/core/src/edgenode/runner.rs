use std::io::Write;

use serde::Serialize;

use super::source::SensorSource;
use super::transcript::{decision_lines, inputs_line, sample_line};
use super::{decide, decide_manual, Decision, GateState, IrrigationEvent, NodeConfig, NodeError, PumpModel};
use crate::schema::{parse_topic, topic, Command, SkipReason, StatusPayload, TelemetryPayload, TopicKind};
use crate::telemetry::{dryness_pct, SensorSample, SmoothingState};
use crate::tinymodel::EdgeModel;

/// A message delivered to the node from the broker.
#[derive(Debug, Clone, PartialEq)]
pub struct Inbound {
    pub topic: String,
    pub payload: Vec<u8>,
}

/// The node's view of its MQTT client. Publishing never blocks the control
/// loop; a disconnected client is expected to buffer or drop.
pub trait Uplink {
    fn publish(&mut self, topic: &str, payload: &[u8], qos: u8, retain: bool);
    fn poll_inbound(&mut self) -> Vec<Inbound>;
    fn is_connected(&self) -> bool;
}

/// No broker at all.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullUplink;

impl Uplink for NullUplink {
    fn publish(&mut self, _: &str, _: &[u8], _: u8, _: bool) {}

    fn poll_inbound(&mut self) -> Vec<Inbound> {
        Vec::new()
    }

    fn is_connected(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NodeSummary {
    pub samples: usize,
    pub rejected_samples: usize,
    pub decisions: usize,
    pub waterings: usize,
    pub total_ml: f64,
    pub skipped_in_water: usize,
    pub skipped_below_min: usize,
    pub skipped_cooldown: usize,
    pub skipped_paused: usize,
    pub manual_events: usize,
    pub model_fallbacks: usize,
    pub rejected_inbound: usize,
}

impl NodeSummary {
    fn record(&mut self, e: &IrrigationEvent) {
        match e.skipped_reason {
            None => {
                self.waterings += 1;
                self.total_ml += e.dispensed_ml;
            }
            Some(SkipReason::InWater) => self.skipped_in_water += 1,
            Some(SkipReason::BelowMin) => self.skipped_below_min += 1,
            Some(SkipReason::Cooldown) => self.skipped_cooldown += 1,
            Some(SkipReason::Paused) => self.skipped_paused += 1,
        }
    }
}

/// What one sample produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    /// Manual events triggered by commands applied before the sample.
    pub manual: Vec<IrrigationEvent>,
    /// Set when the sample completed a window.
    pub decision: Option<Decision>,
}

impl StepOutcome {
    pub fn events(&self) -> impl Iterator<Item = &IrrigationEvent> {
        self.manual.iter().chain(self.decision.as_ref().map(|d| &d.event))
    }

    pub fn dispensed_ml(&self) -> f64 {
        self.events().map(|e| e.dispensed_ml).sum()
    }
}

pub struct EdgeNode {
    cfg: NodeConfig,
    model: Option<EdgeModel>,
    smoothing: SmoothingState,
    gate: GateState,
    pump: PumpModel,
    last_smoothed: Option<SensorSample>,
    uplink: Option<Box<dyn Uplink + Send>>,
    keep_transcript: bool,
    transcript: Vec<String>,
    sink: Option<Box<dyn Write + Send>>,
    events: Vec<IrrigationEvent>,
    summary: NodeSummary,
    fallback_flag: bool,
}

impl std::fmt::Debug for EdgeNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EdgeNode").field("cfg", &self.cfg).field("summary", &self.summary).finish_non_exhaustive()
    }
}

impl EdgeNode {
    pub fn new(cfg: NodeConfig, model: Option<EdgeModel>) -> Result<Self, NodeError> {
        cfg.validate()?;
        Ok(Self {
            smoothing: SmoothingState::new(cfg.window_len, cfg.ema_alpha)?,
            pump: PumpModel::new(cfg.pump_ms_per_ml),
            cfg,
            model,
            gate: GateState::default(),
            last_smoothed: None,
            uplink: None,
            keep_transcript: true,
            transcript: Vec::new(),
            sink: None,
            events: Vec::new(),
            summary: NodeSummary::default(),
            fallback_flag: false,
        })
    }

    /// Builds a node and loads `cfg.model_path` if one is set.
    pub fn from_config(cfg: NodeConfig) -> Result<Self, NodeError> {
        let model = cfg.model_path.as_deref().map(load_model).transpose()?;
        Self::new(cfg, model)
    }

    pub fn with_uplink(mut self, uplink: Box<dyn Uplink + Send>) -> Self {
        self.uplink = Some(uplink);
        self
    }

    /// Streams transcript lines to `sink` as they are produced.
    pub fn with_sink(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn keep_transcript(&mut self, keep: bool) {
        self.keep_transcript = keep;
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn gate(&self) -> &GateState {
        &self.gate
    }

    pub fn pump(&self) -> &PumpModel {
        &self.pump
    }

    pub fn transcript(&self) -> &[String] {
        &self.transcript
    }

    pub fn events(&self) -> &[IrrigationEvent] {
        &self.events
    }

    pub fn summary(&self) -> &NodeSummary {
        &self.summary
    }

    /// True once a model-mode decision had to fall back to the rule.
    pub fn model_fallback_flag(&self) -> bool {
        self.fallback_flag
    }

    pub fn uplink_mut(&mut self) -> Option<&mut (dyn Uplink + Send + 'static)> {
        self.uplink.as_deref_mut()
    }

    fn log(&mut self, line: String) {
        if let Some(s) = self.sink.as_mut() {
            // a broken log sink must not stop the control loop
            let _ = writeln!(s, "{line}");
        }
        if self.keep_transcript {
            self.transcript.push(line);
        }
    }

    fn publish(&mut self, kind: TopicKind, payload: &impl Serialize) {
        if let Some(up) = self.uplink.as_mut() {
            let body = serde_json::to_vec(payload).expect("payload serializes");
            up.publish(&topic(&self.cfg.node_id, kind), &body, kind.qos(), kind.retained());
        }
    }

    /// Announces the node; call once the uplink is attached.
    pub fn announce(&mut self, ts_ms: i64) {
        let status = StatusPayload { online: true, node: Some(self.cfg.node_id.clone()), ts: Some(ts_ms) };
        self.publish(TopicKind::Status, &status);
        let mode = format!("{:?}", self.cfg.mode).to_lowercase();
        self.log(format!("[Status] online node={} mode={mode}", self.cfg.node_id));
    }

    fn record_event(&mut self, e: IrrigationEvent) {
        if e.watered() {
            self.pump.start(e.dispensed_ml);
        }
        for l in decision_lines(&e) {
            self.log(l);
        }
        self.publish(TopicKind::Event, &e.to_payload(&self.cfg.node_id));
        self.summary.record(&e);
        self.events.push(e);
    }

    /// Applies one broker delivery. Returns a manual event if the message
    /// was an irrigation command.
    pub fn handle_inbound(&mut self, msg: &Inbound, now_ms: i64) -> Option<IrrigationEvent> {
        match parse_topic(&msg.topic) {
            Some((node, TopicKind::Cmd)) if node == self.cfg.node_id => match Command::parse(&msg.payload) {
                Ok(cmd) => self.apply_command(cmd, now_ms),
                Err(e) => {
                    self.summary.rejected_inbound += 1;
                    self.log(format!("[Command] rejected: {e}"));
                    None
                }
            },
            Some((node, TopicKind::Config)) if node == self.cfg.node_id => {
                if let Err(e) = self.apply_config_json(&msg.payload) {
                    self.summary.rejected_inbound += 1;
                    self.log(format!("[Status] config rejected: {e}"));
                }
                None
            }
            _ => {
                self.summary.rejected_inbound += 1;
                None
            }
        }
    }

    pub fn apply_command(&mut self, cmd: Command, now_ms: i64) -> Option<IrrigationEvent> {
        match cmd {
            Command::Pause => {
                self.gate.paused = true;
                self.log("[Command] pause".into());
                None
            }
            Command::Resume => {
                self.gate.paused = false;
                self.log("[Command] resume".into());
                None
            }
            Command::IrrigateNow { ml } => {
                match ml {
                    Some(ml) => self.log(format!("[Command] irrigate_now {ml:.1} ml")),
                    None => self.log("[Command] irrigate_now".into()),
                }
                let soil = self.smoothing.current().or(self.last_smoothed).map(|s| s.soil_adc);
                let e = decide_manual(now_ms, ml, soil, &self.cfg, &mut self.gate);
                self.summary.manual_events += 1;
                self.record_event(e);
                Some(e)
            }
        }
    }

    /// Merges a (possibly partial) JSON config over the current one.
    pub fn apply_config_json(&mut self, payload: &[u8]) -> Result<(), NodeError> {
        let cfg = self.cfg.merge_json(payload)?;
        self.apply_config(cfg)
    }

    pub fn apply_config(&mut self, cfg: NodeConfig) -> Result<(), NodeError> {
        cfg.validate()?;
        if cfg.node_id != self.cfg.node_id {
            return Err(NodeError::Config(format!("node_id cannot change from {} to {}", self.cfg.node_id, cfg.node_id)));
        }
        let model = match &cfg.model_path {
            Some(p) if cfg.model_path != self.cfg.model_path => Some(load_model(p)?),
            _ => None,
        };
        if let Some(m) = model {
            self.model = Some(m);
        }
        if cfg.window_len != self.cfg.window_len || cfg.ema_alpha != self.cfg.ema_alpha {
            self.smoothing = SmoothingState::new(cfg.window_len, cfg.ema_alpha)?;
        }
        self.pump.ms_per_ml = cfg.pump_ms_per_ml;
        self.cfg = cfg;
        self.log("[Status] config applied".into());
        Ok(())
    }

    /// One control-loop iteration: pending broker deliveries first, then the
    /// sample; a full window triggers a decision.
    pub fn process_sample(&mut self, raw: SensorSample) -> Result<StepOutcome, NodeError> {
        let mut out = StepOutcome::default();
        let inbound = self.uplink.as_mut().map(|u| u.poll_inbound()).unwrap_or_default();
        for msg in &inbound {
            if let Some(e) = self.handle_inbound(msg, raw.ts_ms) {
                out.manual.push(e);
            }
        }
        self.pump.advance(self.cfg.sample_period_ms);
        if let Err(e) = raw.validate() {
            self.summary.rejected_samples += 1;
            self.log(format!("[Status] rejected sample: {e}"));
            return Ok(out);
        }
        self.summary.samples += 1;
        self.log(sample_line(&raw, &self.cfg.calibration));
        let smoothed = self.smoothing.smooth(&raw);
        if !self.smoothing.window_full() {
            return Ok(out);
        }
        self.smoothing.reset();
        self.last_smoothed = Some(smoothed);
        let d = decide(&smoothed, self.model.as_ref(), &self.cfg, &mut self.gate);
        self.summary.decisions += 1;
        if d.model_fallback {
            self.summary.model_fallbacks += 1;
            if !self.fallback_flag {
                self.fallback_flag = true;
                self.log("[Status] model unavailable, using rule mode".into());
            }
        }
        if let Some(v) = &d.inputs {
            self.log(inputs_line(v));
        }
        let cal = self.cfg.calibration;
        let telemetry = TelemetryPayload {
            ts: smoothed.ts_ms,
            node: self.cfg.node_id.clone(),
            soil_adc: smoothed.soil_adc,
            soil_n: (smoothed.soil_adc - cal.water_level_adc) / (cal.dry_air_adc - cal.water_level_adc),
            dryness_pct: dryness_pct(smoothed.soil_adc, &cal),
            temp_c: smoothed.temp_c,
            hum_pct: smoothed.hum_pct,
            light_lux: smoothed.light_lux,
            ph: smoothed.ph,
        };
        self.publish(TopicKind::Telemetry, &telemetry);
        self.record_event(d.event);
        out.decision = Some(d);
        Ok(out)
    }

    /// Drives the node until the source is exhausted, feeding dispensed
    /// water back into the source.
    pub fn run(&mut self, source: &mut dyn SensorSource) -> Result<NodeSummary, NodeError> {
        while let Some(sample) = source.next_sample() {
            let out = self.process_sample(sample?)?;
            let ml = out.dispensed_ml();
            if ml > 0.0 {
                source.apply_dispense(ml);
            }
        }
        if let Some(s) = self.sink.as_mut() {
            let _ = s.flush();
        }
        Ok(self.summary.clone())
    }
}

pub fn load_model(path: &str) -> Result<EdgeModel, NodeError> {
    let bytes = std::fs::read(path)?;
    Ok(crate::tinymodel::load(&bytes)?)
}
