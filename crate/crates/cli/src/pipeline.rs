//! Offline pipeline: datasets, the RF/GB comparison and edge-model budgets.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use irrigo_core::ensemble::{
    evaluate, metrics_from_predictions, paired_t_test, train_boosting, train_forest, EnsembleError, EnsembleKind, Hyperparams, Matrix,
    MetricsReport, TTest, TreeEnsembleModel,
};
use irrigo_core::synthdata::{generate, need_features, split, water_features, DatasetRow, GeneratorConfig, SynthError};
use irrigo_core::telemetry::{FeatureConfig, NormalizationConfig};
use irrigo_core::tinymodel::{export, load, quantize, QuantMode, TinyError};
use irrigo_core::{CalibrationProfile, EdgeInputVector, FeatureVector14};

pub const TRAIN_FRACTION: f64 = 0.8;
/// p-value below which the paired test counts as decisive.
pub const SIGNIFICANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Tiny(#[from] TinyError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Need,
    Water,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "need" => Ok(Task::Need),
            "water" => Ok(Task::Water),
            other => Err(format!("unknown task {other:?} (expected need or water)")),
        }
    }
}

impl Task {
    pub fn csv(self) -> irrigo_core::synthdata::CsvTask {
        match self {
            Task::Need => irrigo_core::synthdata::CsvTask::Need,
            Task::Water => irrigo_core::synthdata::CsvTask::Water,
        }
    }

    pub fn feature_names(self) -> Vec<String> {
        match self {
            Task::Need => FeatureVector14::NAMES.iter().map(|s| s.to_string()).collect(),
            Task::Water => EdgeInputVector::NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Feature matrix and targets for one task.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl Dataset {
    /// Rows are read in order; the need task treats them as consecutive
    /// readings `row_interval_ms` apart.
    pub fn build(rows: &[DatasetRow], task: Task, row_interval_ms: i64) -> Result<Self> {
        let cal = CalibrationProfile::default();
        let (x, y) = match task {
            Task::Need => need_features(rows, row_interval_ms, &cal, &FeatureConfig::default())?,
            Task::Water => water_features(rows, &cal, &NormalizationConfig::default())?,
        };
        Ok(Self { x: Matrix::from_rows(&x)?, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// The generated dataset split into train and test rows.
pub fn synth_split(cfg: &GeneratorConfig) -> Result<(Vec<DatasetRow>, Vec<DatasetRow>)> {
    let rows = generate(cfg)?;
    Ok(split(&rows, TRAIN_FRACTION, cfg.seed)?)
}

pub fn train(kind: EnsembleKind, data: &Dataset, hp: &Hyperparams, seed: u64, task: Task) -> Result<TreeEnsembleModel> {
    hp.validate()?;
    let names = task.feature_names();
    Ok(match kind {
        EnsembleKind::Forest => train_forest(&data.x, &data.y, &hp.rf, seed, &names)?,
        EnsembleKind::Boosting => train_boosting(&data.x, &data.y, &hp.gb, seed, &names)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub kind: EnsembleKind,
    pub metrics: MetricsReport,
    pub model_bytes: usize,
    pub n_trees: usize,
    pub n_nodes: usize,
    pub max_depth: usize,
    /// Features by decreasing importance; empty when the model has no splits.
    pub importance: Vec<(String, f64)>,
}

impl ModelReport {
    pub fn top_feature(&self) -> Option<&str> {
        self.importance.first().map(|(n, _)| n.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Improvement {
    pub metric: &'static str,
    pub rf: f64,
    pub gb: f64,
    /// Relative change from RF to GB, signed so that positive favours GB.
    pub gb_gain_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub hyperparams: Hyperparams,
    pub rf: ModelReport,
    pub gb: ModelReport,
    pub improvement: Vec<Improvement>,
    /// Paired test on absolute errors, RF first: a positive `mean_diff`
    /// means GB has the smaller errors.
    pub t_test: Option<TTest>,
    pub favours: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timings {
    pub rf_train_s: f64,
    pub gb_train_s: f64,
    pub rf_infer_us: f64,
    pub gb_infer_us: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: CompareReport,
    pub timings: Timings,
    pub rf: TreeEnsembleModel,
    pub gb: TreeEnsembleModel,
    /// Per-model metrics with timings attached, for the CSV form.
    pub rf_metrics: MetricsReport,
    pub gb_metrics: MetricsReport,
}

fn gain(higher_is_better: bool, rf: f64, gb: f64) -> Option<f64> {
    if rf == 0.0 || !rf.is_finite() || !gb.is_finite() {
        return None;
    }
    let d = if higher_is_better { gb - rf } else { rf - gb };
    Some(100.0 * d / rf.abs())
}

fn model_report(model: &TreeEnsembleModel, metrics: MetricsReport) -> Result<ModelReport> {
    let s = model.summary(&Hyperparams::default());
    let mut importance = s.importance;
    importance.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ModelReport {
        kind: model.kind,
        metrics: metrics.without_timings(),
        model_bytes: export(model)?.len(),
        n_trees: s.n_trees,
        n_nodes: s.n_nodes,
        max_depth: s.max_depth,
        importance,
    })
}

/// Trains both ensembles on `train`, scores them on `test` and tests the
/// paired absolute errors.
pub fn compare(train_set: &Dataset, test_set: &Dataset, hp: &Hyperparams, seed: u64, task: Task) -> Result<Comparison> {
    let t = Instant::now();
    let rf = train(EnsembleKind::Forest, train_set, hp, seed, task)?;
    let rf_train_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let gb = train(EnsembleKind::Boosting, train_set, hp, seed, task)?;
    let gb_train_s = t.elapsed().as_secs_f64();

    let mut rf_metrics = evaluate(&rf, &test_set.x, &test_set.y)?;
    let mut gb_metrics = evaluate(&gb, &test_set.x, &test_set.y)?;
    rf_metrics.train_time_s = Some(rf_train_s);
    gb_metrics.train_time_s = Some(gb_train_s);

    let err = |m: &TreeEnsembleModel| -> Result<Vec<f64>> {
        Ok(m.predict_matrix(&test_set.x)?.iter().zip(&test_set.y).map(|(p, y)| (p - y).abs()).collect())
    };
    let t_test = match paired_t_test(&err(&rf)?, &err(&gb)?) {
        Ok(t) => Some(t),
        Err(EnsembleError::DegenerateVariance | EnsembleError::TooFewPairs(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let favours = match t_test {
        Some(t) if t.p_value < SIGNIFICANCE && t.mean_diff > 0.0 => "gradient_boosting",
        Some(t) if t.p_value < SIGNIFICANCE && t.mean_diff < 0.0 => "random_forest",
        _ => "none",
    };

    let rf_r = model_report(&rf, rf_metrics)?;
    let gb_r = model_report(&gb, gb_metrics)?;
    let (a, b) = (&rf_r.metrics, &gb_r.metrics);
    let improvement = vec![
        Improvement { metric: "r2", rf: a.r2, gb: b.r2, gb_gain_pct: gain(true, a.r2, b.r2) },
        Improvement {
            metric: "explained_variance",
            rf: a.explained_variance,
            gb: b.explained_variance,
            gb_gain_pct: gain(true, a.explained_variance, b.explained_variance),
        },
        Improvement { metric: "rmse", rf: a.rmse, gb: b.rmse, gb_gain_pct: gain(false, a.rmse, b.rmse) },
        Improvement { metric: "mae", rf: a.mae, gb: b.mae, gb_gain_pct: gain(false, a.mae, b.mae) },
        Improvement { metric: "mape_pct", rf: a.mape_pct, gb: b.mape_pct, gb_gain_pct: gain(false, a.mape_pct, b.mape_pct) },
        Improvement { metric: "p95_abs_err", rf: a.p95_abs_err, gb: b.p95_abs_err, gb_gain_pct: gain(false, a.p95_abs_err, b.p95_abs_err) },
        Improvement {
            metric: "abs_mean_bias",
            rf: a.mean_bias.abs(),
            gb: b.mean_bias.abs(),
            gb_gain_pct: gain(false, a.mean_bias.abs(), b.mean_bias.abs()),
        },
        Improvement {
            metric: "model_bytes",
            rf: rf_r.model_bytes as f64,
            gb: gb_r.model_bytes as f64,
            gb_gain_pct: gain(false, rf_r.model_bytes as f64, gb_r.model_bytes as f64),
        },
    ];
    let report = CompareReport {
        seed,
        n_train: train_set.len(),
        n_test: test_set.len(),
        n_features: train_set.x.n_cols(),
        hyperparams: *hp,
        rf: rf_r,
        gb: gb_r,
        improvement,
        t_test,
        favours,
    };
    let timings = Timings {
        rf_train_s,
        gb_train_s,
        rf_infer_us: rf_metrics.infer_us_per_sample.unwrap_or(0.0),
        gb_infer_us: gb_metrics.infer_us_per_sample.unwrap_or(0.0),
    };
    Ok(Comparison { report, timings, rf, gb, rf_metrics, gb_metrics })
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{v:+.2}%")).unwrap_or_else(|| "n/a".into())
}

/// Plain-text table of the comparison; timings are included when given.
pub fn render_table(r: &CompareReport, timings: Option<&Timings>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "train rows {}, test rows {}, features {}, seed {}", r.n_train, r.n_test, r.n_features, r.seed);
    let _ = writeln!(s, "{:<24}{:>16}{:>20}{:>12}", "metric", "random forest", "gradient boosting", "gb gain");
    let labels = [
        ("r2", "R²"),
        ("explained_variance", "explained variance"),
        ("rmse", "RMSE"),
        ("mae", "MAE"),
        ("mape_pct", "MAPE (%)"),
        ("p95_abs_err", "p95 abs error"),
        ("abs_mean_bias", "|mean bias|"),
    ];
    for (key, label) in labels {
        if let Some(i) = r.improvement.iter().find(|i| i.metric == key) {
            let _ = writeln!(s, "{label:<24}{:>16.6}{:>20.6}{:>12}", i.rf, i.gb, pct(i.gb_gain_pct));
        }
    }
    if let Some(t) = timings {
        let _ = writeln!(
            s,
            "{:<24}{:>16.3}{:>20.3}{:>12}",
            "training time (s)",
            t.rf_train_s,
            t.gb_train_s,
            pct(gain(false, t.rf_train_s, t.gb_train_s))
        );
        let _ = writeln!(
            s,
            "{:<24}{:>16.3}{:>20.3}{:>12}",
            "inference (µs/row)",
            t.rf_infer_us,
            t.gb_infer_us,
            pct(gain(false, t.rf_infer_us, t.gb_infer_us))
        );
    }
    if let Some(i) = r.improvement.iter().find(|i| i.metric == "model_bytes") {
        let _ = writeln!(s, "{:<24}{:>16.1}{:>20.1}{:>12}", "model size (KB)", i.rf / 1024.0, i.gb / 1024.0, pct(i.gb_gain_pct));
    }
    match &r.t_test {
        Some(t) => {
            let _ = writeln!(
                s,
                "paired t-test on |error| (rf - gb): t = {:.2}, p = {:.3e}, n = {}, favours {}",
                t.t_stat, t.p_value, t.n, r.favours
            );
        }
        None => {
            let _ = writeln!(s, "paired t-test on |error|: undefined (identical error differences)");
        }
    }
    let top = |m: &ModelReport| m.top_feature().unwrap_or("none").to_string();
    let _ = writeln!(s, "top feature: rf {}, gb {}", top(&r.rf), top(&r.gb));
    s
}

/// Stable JSON form: no wall-clock values, fixed field order.
pub fn report_json(r: &CompareReport) -> String {
    serde_json::to_string_pretty(r).expect("report serializes") + "\n"
}

pub fn metrics_csv(c: &Comparison) -> String {
    format!("{}\n{}\n{}\n", MetricsReport::CSV_HEADER, c.rf_metrics.csv_row("random_forest"), c.gb_metrics.csv_row("gradient_boosting"))
}

pub fn importance_csv(r: &CompareReport) -> String {
    let mut s = String::from("model,rank,feature,importance\n");
    for (name, m) in [("random_forest", &r.rf), ("gradient_boosting", &r.gb)] {
        for (k, (f, v)) in m.importance.iter().enumerate() {
            let _ = writeln!(s, "{name},{},{f},{v:.6}", k + 1);
        }
    }
    s
}

/// Size, parity and speed of a model once exported for the edge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeBudget {
    pub parity_rows: usize,
    pub max_abs_diff: f64,
    pub artifact_bytes: usize,
    /// Mean time of one single-row call, best of several passes.
    pub infer_us_per_row: f64,
    pub quant_mode: QuantMode,
    pub quant_bytes: usize,
    pub size_reduction_pct: f64,
    pub rmse_float: f64,
    pub rmse_quant: f64,
    pub rmse_degradation_pct: f64,
}

pub fn edge_budget(model: &TreeEnsembleModel, test_set: &Dataset, parity_rows: usize, mode: QuantMode) -> Result<EdgeBudget> {
    if test_set.is_empty() {
        return Err(PipelineError::Invalid("empty test set".into()));
    }
    let bytes = export(model)?;
    let edge = load(&bytes)?;
    let n = parity_rows.min(test_set.len());
    let mut max_abs_diff: f64 = 0.0;
    for i in 0..n {
        let row = test_set.x.row(i);
        max_abs_diff = max_abs_diff.max((edge.infer(row)? - model.predict(row)?).abs());
    }

    let mut best = f64::INFINITY;
    let mut sink = 0.0;
    for _ in 0..5 {
        let t = Instant::now();
        for row in test_set.x.rows() {
            sink += edge.infer(row)?;
        }
        best = best.min(t.elapsed().as_secs_f64() * 1e6 / test_set.len() as f64);
    }
    std::hint::black_box(sink);

    let qbytes = quantize(&bytes, mode)?;
    let q = load(&qbytes)?;
    let float: Vec<f64> = test_set.x.rows().map(|r| edge.infer(r)).collect::<std::result::Result<_, _>>()?;
    let quant: Vec<f64> = test_set.x.rows().map(|r| q.infer(r)).collect::<std::result::Result<_, _>>()?;
    let rmse_float = metrics_from_predictions(&test_set.y, &float)?.rmse;
    let rmse_quant = metrics_from_predictions(&test_set.y, &quant)?.rmse;
    Ok(EdgeBudget {
        parity_rows: n,
        max_abs_diff,
        artifact_bytes: bytes.len(),
        infer_us_per_row: best,
        quant_mode: mode,
        quant_bytes: qbytes.len(),
        size_reduction_pct: 100.0 * (1.0 - qbytes.len() as f64 / bytes.len() as f64),
        rmse_float,
        rmse_quant,
        rmse_degradation_pct: if rmse_float > 0.0 { 100.0 * (rmse_quant - rmse_float) / rmse_float } else { 0.0 },
    })
}

/// The seed-`seed` need dataset, featurized and split.
pub fn need_split(cfg: &GeneratorConfig) -> Result<(Dataset, Dataset)> {
    let (train_rows, test_rows) = synth_split(cfg)?;
    Ok((Dataset::build(&train_rows, Task::Need, cfg.row_interval_ms)?, Dataset::build(&test_rows, Task::Need, cfg.row_interval_ms)?))
}

/// Gradient-boosted water model used by the node in model mode.
pub fn train_water_model(n_rows: usize, seed: u64) -> Result<TreeEnsembleModel> {
    let rows = generate(&GeneratorConfig { n_rows, seed, ..Default::default() })?;
    let data = Dataset::build(&rows, Task::Water, 0)?;
    train(EnsembleKind::Boosting, &data, &Hyperparams::default(), seed, Task::Water)
}
