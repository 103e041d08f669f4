//! Derived views over stored records: bucket downsampling for charts and
//! the CSV export that joins telemetry to irrigation events.

use serde::Serialize;

use irrigo_core::synthdata::WATER_HEADER;

use crate::store::{RecordKind, StoreRecord};

/// Numeric telemetry fields averaged per bucket.
pub const BUCKET_FIELDS: [&str; 7] = ["soil_adc", "soil_n", "dryness_pct", "temp_c", "hum_pct", "light_lux", "ph"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub from: i64,
    pub to: i64,
    pub count: usize,
    /// Field means; a field missing from every record in the bucket is absent.
    pub mean: serde_json::Map<String, serde_json::Value>,
}

/// Splits `[lo, hi]` into `n` equal-width buckets and averages each
/// non-empty one. Records outside the span are ignored.
pub fn downsample(records: &[StoreRecord], lo: i64, hi: i64, n: usize) -> Vec<Bucket> {
    if n == 0 || lo > hi {
        return Vec::new();
    }
    let span = (hi as i128 - lo as i128 + 1) as f64;
    let width = span / n as f64;
    let mut sums = vec![([0.0f64; BUCKET_FIELDS.len()], [0usize; BUCKET_FIELDS.len()], 0usize); n];
    for r in records.iter().filter(|r| r.ts >= lo && r.ts <= hi) {
        let i = (((r.ts as i128 - lo as i128) as f64 / width) as usize).min(n - 1);
        let (s, c, count) = &mut sums[i];
        *count += 1;
        for (k, name) in BUCKET_FIELDS.iter().enumerate() {
            if let Some(v) = r.payload.get(name).and_then(|v| v.as_f64()) {
                s[k] += v;
                c[k] += 1;
            }
        }
    }
    sums.into_iter()
        .enumerate()
        .filter(|(_, (_, _, count))| *count > 0)
        .map(|(i, (s, c, count))| {
            let edge = |j: usize| lo + (j as f64 * width).round() as i64;
            let mut mean = serde_json::Map::new();
            for (k, name) in BUCKET_FIELDS.iter().enumerate() {
                if c[k] > 0 {
                    mean.insert(name.to_string(), serde_json::json!(s[k] / c[k] as f64));
                }
            }
            Bucket { from: edge(i), to: if i + 1 == n { hi } else { edge(i + 1) - 1 }, count, mean }
        })
        .collect()
}

fn num(r: &StoreRecord, key: &str) -> f64 {
    r.payload.get(key).and_then(|v| v.as_f64()).unwrap_or(0.0)
}

/// CSV in the training-data layout. Each non-duplicate irrigation event is
/// credited to the first telemetry row at or after it, provided that row
/// lies within `window_ms` of the event; rows without one get 0.
pub fn export_csv(telemetry: &[StoreRecord], events: &[StoreRecord], window_ms: i64) -> String {
    let mut tel: Vec<&StoreRecord> = telemetry.iter().filter(|r| r.kind == RecordKind::Telemetry).collect();
    tel.sort_by_key(|r| r.ts);
    let mut water = vec![0.0f64; tel.len()];
    for e in events.iter().filter(|e| e.kind == RecordKind::Event && !e.dup) {
        let i = tel.partition_point(|t| t.ts < e.ts);
        if i < tel.len() && tel[i].ts - e.ts <= window_ms {
            water[i] += num(e, "dispensed_ml");
        }
    }
    let mut out = String::with_capacity(64 * (tel.len() + 1));
    out.push_str(WATER_HEADER);
    out.push('\n');
    for (t, w) in tel.iter().zip(water) {
        out.push_str(&format!("{},{},{},{},{}\n", num(t, "soil_adc"), num(t, "light_lux"), num(t, "temp_c"), num(t, "hum_pct"), w));
    }
    out
}
