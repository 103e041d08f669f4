use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{EnsembleError, Matrix, TreeEnsembleModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r2: f64,
    pub explained_variance: f64,
    pub rmse: f64,
    pub mae: f64,
    pub mape_pct: f64,
    pub p95_abs_err: f64,
    pub mean_bias: f64,
    /// Wall-clock fields; `None` in reports that must be reproducible.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_time_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub infer_us_per_sample: Option<f64>,
}

impl MetricsReport {
    pub fn without_timings(mut self) -> Self {
        self.train_time_s = None;
        self.infer_us_per_sample = None;
        self
    }

    pub const CSV_HEADER: &'static str =
        "model,r2,explained_variance,rmse,mae,mape_pct,p95_abs_err,mean_bias,train_time_s,infer_us_per_sample";

    pub fn csv_row(&self, name: &str) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.r2,
            self.explained_variance,
            self.rmse,
            self.mae,
            self.mape_pct,
            self.p95_abs_err,
            self.mean_bias,
            opt(self.train_time_s),
            opt(self.infer_us_per_sample)
        )
    }
}

/// Linear interpolation between order statistics (`h = (n-1)p`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pop_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

pub fn metrics_from_predictions(y: &[f64], yhat: &[f64]) -> Result<MetricsReport, EnsembleError> {
    if y.is_empty() {
        return Err(EnsembleError::EmptyDataset);
    }
    if y.len() != yhat.len() {
        return Err(EnsembleError::LengthMismatch { x: yhat.len(), y: y.len() });
    }
    let n = y.len() as f64;
    let ym = mean(y);
    let sst: f64 = y.iter().map(|v| (v - ym).powi(2)).sum();
    if sst <= 0.0 {
        return Err(EnsembleError::ConstantTarget);
    }
    let resid: Vec<f64> = yhat.iter().zip(y).map(|(p, t)| p - t).collect();
    let sse: f64 = resid.iter().map(|r| r * r).sum();
    let abs: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
    let (mut ape, mut n_ape) = (0.0, 0usize);
    for (r, t) in resid.iter().zip(y) {
        if t.abs() > 1e-6 {
            ape += (r / t).abs();
            n_ape += 1;
        }
    }
    Ok(MetricsReport {
        r2: 1.0 - sse / sst,
        explained_variance: 1.0 - pop_var(&resid) / (sst / n),
        rmse: (sse / n).sqrt(),
        mae: mean(&abs),
        mape_pct: if n_ape > 0 { 100.0 * ape / n_ape as f64 } else { 0.0 },
        p95_abs_err: percentile(&abs, 0.95),
        mean_bias: mean(&resid),
        train_time_s: None,
        infer_us_per_sample: None,
    })
}

/// Predicts on raw test rows and scores the result; inference time per row
/// is measured and attached.
pub fn evaluate(model: &TreeEnsembleModel, x_test: &Matrix, y_test: &[f64]) -> Result<MetricsReport, EnsembleError> {
    if x_test.n_rows() == 0 {
        return Err(EnsembleError::EmptyDataset);
    }
    let start = Instant::now();
    let yhat = model.predict_matrix(x_test)?;
    let per_row = start.elapsed().as_secs_f64() * 1e6 / x_test.n_rows() as f64;
    let mut report = metrics_from_predictions(y_test, &yhat)?;
    report.infer_us_per_sample = Some(per_row);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_stat: f64,
    pub p_value: f64,
    pub n: usize,
    /// Mean of `|a| - |b|`; negative means `a` has the smaller errors.
    pub mean_diff: f64,
}

/// Paired test on absolute errors with a two-sided normal-approximation p.
pub fn paired_t_test(err_a: &[f64], err_b: &[f64]) -> Result<TTest, EnsembleError> {
    if err_a.len() != err_b.len() {
        return Err(EnsembleError::LengthMismatch { x: err_a.len(), y: err_b.len() });
    }
    let n = err_a.len();
    if n < 30 {
        return Err(EnsembleError::TooFewPairs(n));
    }
    let d: Vec<f64> = err_a.iter().zip(err_b).map(|(a, b)| a.abs() - b.abs()).collect();
    let m = mean(&d);
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    if sd == 0.0 {
        if m == 0.0 {
            return Ok(TTest { t_stat: 0.0, p_value: 1.0, n, mean_diff: 0.0 });
        }
        return Err(EnsembleError::DegenerateVariance);
    }
    let t = m / (sd / (n as f64).sqrt());
    let p = libm::erfc(t.abs() / std::f64::consts::SQRT_2);
    Ok(TTest { t_stat: t, p_value: p, n, mean_diff: m })
}
