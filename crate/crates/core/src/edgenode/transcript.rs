//! Line-oriented node log. The human-facing lines follow the serial-console
//! style of the reference firmware; each decision also gets an `[Event]`
//! line carrying the exact event as JSON so logs can be replayed.

use thiserror::Error;

use super::IrrigationEvent;
use crate::schema::SkipReason;
use crate::telemetry::{dryness_pct, CalibrationProfile, EdgeInputVector, SensorSample};

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct TranscriptError {
    pub line: usize,
    pub message: String,
}

pub fn sample_line(raw: &SensorSample, cal: &CalibrationProfile) -> String {
    format!(
        "[Sample] Soil: {} ({}% dry) Temp: {:.1}°C Hum: {:.1}%",
        raw.soil_adc.round() as i64,
        dryness_pct(raw.soil_adc, cal),
        raw.temp_c,
        raw.hum_pct
    )
}

pub fn inputs_line(v: &EdgeInputVector) -> String {
    format!(
        "[Model Inputs] Soil: {:.4} Temp: {:.4} Hum: {:.4} Time: [{:.4},{:.4}] Interactions: [{:.4}, {:.4}, {:.4}]",
        v.soil_n, v.temp_n, v.hum_n, v.time_sin, v.time_cos, v.inter_soil_temp, v.inter_soil_hum, v.inter_temp_hum
    )
}

/// Prediction and action lines for one event, followed by its `[Event]` line.
pub fn decision_lines(e: &IrrigationEvent) -> Vec<String> {
    let mut out = Vec::with_capacity(4);
    if e.skipped_reason == Some(SkipReason::InWater) {
        out.push(format!("[Prediction] Soil in water, no watering needed ({:.2} ml)", 0.0));
    } else {
        out.push(format!("[Prediction] {:.2} ml needed", e.predicted_ml));
    }
    match e.skipped_reason {
        None => {
            out.push(format!("[Action] Watering {:.1} ml ({} ms)", e.dispensed_ml, e.duration_ms));
            out.push("[Action] Watering complete".into());
        }
        Some(SkipReason::InWater | SkipReason::BelowMin) => out.push("[Action] No watering needed".into()),
        Some(r) => out.push(format!("[Action] Skipped: {}", r.as_str())),
    }
    out.push(event_line(e));
    out
}

pub fn event_line(e: &IrrigationEvent) -> String {
    format!("[Event] {}", serde_json::to_string(e).expect("event serializes"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Watering { ml: f64, ms: u64 },
    Complete,
    NoWatering,
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Line {
    Sample { soil: i64, dry_pct: i32, temp_c: f64, hum_pct: f64 },
    ModelInputs { soil: f64, temp: f64, hum: f64, time: [f64; 2], interactions: [f64; 3] },
    Prediction { ml: f64, in_water: bool },
    Action(Action),
    Event(IrrigationEvent),
    Command(String),
    Status(String),
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.trim().parse::<T>().map_err(|_| format!("bad number {s:?}"))
}

fn after<'a>(s: &'a str, key: &str) -> Result<&'a str, String> {
    s.split_once(key).map(|(_, r)| r).ok_or_else(|| format!("missing {key:?}"))
}

fn until<'a>(s: &'a str, end: &str) -> Result<&'a str, String> {
    s.split_once(end).map(|(l, _)| l).ok_or_else(|| format!("missing {end:?}"))
}

fn bracketed<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let inner = until(after(s, "[")?, "]")?;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != N {
        return Err(format!("expected {N} values in [{inner}]"));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = num(p)?;
    }
    Ok(out)
}

fn parse_body(line: &str) -> Result<Line, String> {
    if let Some(rest) = line.strip_prefix("[Sample] ") {
        let soil = num(until(after(rest, "Soil: ")?, " (")?)?;
        let dry_pct = num(until(after(rest, "(")?, "% dry)")?)?;
        let temp_c = num(until(after(rest, "Temp: ")?, "°C")?)?;
        let hum_pct = num(until(after(rest, "Hum: ")?, "%")?)?;
        return Ok(Line::Sample { soil, dry_pct, temp_c, hum_pct });
    }
    if let Some(rest) = line.strip_prefix("[Model Inputs] ") {
        return Ok(Line::ModelInputs {
            soil: num(until(after(rest, "Soil: ")?, " Temp")?)?,
            temp: num(until(after(rest, "Temp: ")?, " Hum")?)?,
            hum: num(until(after(rest, "Hum: ")?, " Time")?)?,
            time: bracketed(after(rest, "Time: ")?)?,
            interactions: bracketed(after(rest, "Interactions: ")?)?,
        });
    }
    if let Some(rest) = line.strip_prefix("[Prediction] ") {
        if rest.starts_with("Soil in water") {
            let ml = num(until(after(rest, "(")?, " ml)")?)?;
            return Ok(Line::Prediction { ml, in_water: true });
        }
        return Ok(Line::Prediction { ml: num(until(rest, " ml needed")?)?, in_water: false });
    }
    if let Some(rest) = line.strip_prefix("[Action] ") {
        return Ok(Line::Action(match rest {
            "Watering complete" => Action::Complete,
            "No watering needed" => Action::NoWatering,
            _ if rest.starts_with("Skipped: ") => Action::Skipped(rest["Skipped: ".len()..].to_string()),
            _ => {
                let body = rest.strip_prefix("Watering ").ok_or("unknown action")?;
                Action::Watering { ml: num(until(body, " ml")?)?, ms: num(until(after(body, "(")?, " ms)")?)? }
            }
        }));
    }
    if let Some(rest) = line.strip_prefix("[Event] ") {
        return serde_json::from_str(rest).map(Line::Event).map_err(|e| e.to_string());
    }
    if let Some(rest) = line.strip_prefix("[Command] ") {
        return Ok(Line::Command(rest.to_string()));
    }
    if let Some(rest) = line.strip_prefix("[Status] ") {
        return Ok(Line::Status(rest.to_string()));
    }
    Err("unrecognized line".into())
}

pub fn parse_line(line: &str) -> Result<Line, String> {
    parse_body(line.trim_end())
}

/// Parses a whole transcript; blank lines are ignored.
pub fn parse_transcript(text: &str) -> Result<Vec<Line>, TranscriptError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l).map_err(|message| TranscriptError { line: i + 1, message }))
        .collect()
}

pub fn events_from_transcript(text: &str) -> Result<Vec<IrrigationEvent>, TranscriptError> {
    Ok(parse_transcript(text)?
        .into_iter()
        .filter_map(|l| match l {
            Line::Event(e) => Some(e),
            _ => None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Trigger;
    use proptest::prelude::*;

    #[test]
    fn sample_line_format() {
        let cal = CalibrationProfile::default();
        let s = SensorSample::new(0, 3723.0, 24.9, 45.8, 0.0);
        assert_eq!(sample_line(&s, &cal), "[Sample] Soil: 3723 (122% dry) Temp: 24.9°C Hum: 45.8%");
        let s = SensorSample::new(0, 2151.0, 25.2, 46.3, 0.0);
        assert_eq!(sample_line(&s, &cal), "[Sample] Soil: 2151 (-34% dry) Temp: 25.2°C Hum: 46.3%");
    }

    #[test]
    fn parses_reference_lines() {
        let l =
            parse_line("[Model Inputs] Soil: 1.0101 Temp: 0.4263 Hum: 0.4582 Time: [0.0000,1.0000] Interactions: [0.4306, 0.4628, 0.1953]")
                .unwrap();
        assert_eq!(
            l,
            Line::ModelInputs { soil: 1.0101, temp: 0.4263, hum: 0.4582, time: [0.0, 1.0], interactions: [0.4306, 0.4628, 0.1953] }
        );
        assert_eq!(parse_line("[Prediction] 14.99 ml needed").unwrap(), Line::Prediction { ml: 14.99, in_water: false });
        assert_eq!(
            parse_line("[Prediction] Soil in water, no watering needed (0.00 ml)").unwrap(),
            Line::Prediction { ml: 0.0, in_water: true }
        );
        assert_eq!(parse_line("[Action] Watering 15.0 ml (3568 ms)").unwrap(), Line::Action(Action::Watering { ml: 15.0, ms: 3568 }));
        assert_eq!(parse_line("[Action] Watering complete").unwrap(), Line::Action(Action::Complete));
        assert_eq!(parse_line("[Action] No watering needed").unwrap(), Line::Action(Action::NoWatering));
        assert_eq!(
            parse_line("[Sample] Soil: 1040 (-146% dry) Temp: 25.2°C Hum: 46.1%").unwrap(),
            Line::Sample { soil: 1040, dry_pct: -146, temp_c: 25.2, hum_pct: 46.1 }
        );
        assert!(parse_line("[Sample] Soil: x").is_err());
        assert!(parse_line("hello").is_err());
    }

    fn arb_event() -> impl Strategy<Value = IrrigationEvent> {
        (
            any::<i64>(),
            -1e3f64..1e3,
            prop::option::of(prop::sample::select(vec![
                SkipReason::InWater,
                SkipReason::BelowMin,
                SkipReason::Cooldown,
                SkipReason::Paused,
            ])),
            prop::sample::select(vec![Trigger::Model, Trigger::Rule, Trigger::Manual]),
            0.0f64..500.0,
        )
            .prop_map(|(ts, p, skip, trigger, ml)| IrrigationEvent {
                ts_ms: ts,
                predicted_ml: p,
                dispensed_ml: if skip.is_some() { 0.0 } else { ml },
                duration_ms: if skip.is_some() { 0 } else { (ml * 238.0).round() as u64 },
                trigger,
                skipped_reason: skip,
            })
    }

    proptest! {
        #[test]
        fn events_survive_the_transcript(events in prop::collection::vec(arb_event(), 0..20)) {
            let text: String = events.iter().flat_map(decision_lines).map(|l| l + "\n").collect();
            let back = events_from_transcript(&text).unwrap();
            prop_assert_eq!(back, events);
        }
    }
}
