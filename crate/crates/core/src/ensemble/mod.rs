//! Regression tree ensembles: CART base learners, a bagged random forest and
//! least-squares gradient boosting, plus evaluation helpers.

pub mod cart;
pub mod curve;
pub mod metrics;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{ScalerParams, TelemetryError};

pub use cart::{fit_cart, CartParams, CartTree, Node};
pub use curve::{learning_curve, CurvePoint};
pub use metrics::{evaluate, metrics_from_predictions, paired_t_test, MetricsReport, TTest};
pub use train::{fit_gradient_boosting, fit_random_forest, train_boosting, train_forest};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("row count mismatch: {x} feature rows vs {y} targets")]
    LengthMismatch { x: usize, y: usize },
    #[error("ragged matrix: row {row} has {got} columns, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("invalid hyperparameter {name}: {reason}")]
    InvalidHyperparam { name: String, reason: String },
    #[error("target has zero variance; r2 is undefined")]
    ConstantTarget,
    #[error("paired test needs at least 30 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("paired differences have zero variance")]
    DegenerateVariance,
    #[error("learning-curve fraction {fraction} leaves {rows} rows, below min_samples_split")]
    FractionTooSmall { fraction: f64, rows: usize },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self, EnsembleError> {
        if data.len() != n_rows * n_cols {
            return Err(EnsembleError::Ragged { row: 0, expected: n_rows * n_cols, got: data.len() });
        }
        Ok(Self { n_rows, n_cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, EnsembleError> {
        let n_cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(EnsembleError::Ragged { row: i, expected: n_cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n_rows: rows.len(), n_cols, data })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    /// Applies `scaler` to every row.
    pub fn standardized(&self, scaler: &ScalerParams) -> Result<Self, EnsembleError> {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.n_rows {
            scaler.standardize_into(self.row(i), &mut data[i * self.n_cols..(i + 1) * self.n_cols])?;
        }
        Ok(Self { n_rows: self.n_rows, n_cols: self.n_cols, data })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.n_cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { n_rows: idx.len(), n_cols: self.n_cols, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features_fraction: f64,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_estimators: 100, max_depth: 10, min_samples_split: 5, min_samples_leaf: 2, max_features_fraction: 1.0, bootstrap: true }
    }
}

impl ForestParams {
    pub fn cart(&self) -> CartParams {
        CartParams {
            max_depth: self.max_depth,
            min_samples_split: self.min_samples_split,
            min_samples_leaf: self.min_samples_leaf,
            max_features_fraction: self.max_features_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostingParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub subsample: f64,
}

impl Default for BoostingParams {
    fn default() -> Self {
        Self { n_estimators: 100, learning_rate: 0.1, max_depth: 5, min_samples_split: 10, min_samples_leaf: 4, subsample: 0.8 }
    }
}

impl BoostingParams {
    pub fn cart(&self) -> CartParams {
        CartParams {
            max_depth: self.max_depth,
            min_samples_split: self.min_samples_split,
            min_samples_leaf: self.min_samples_leaf,
            max_features_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub rf: ForestParams,
    pub gb: BoostingParams,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |name: &str, reason: &str| Err(EnsembleError::InvalidHyperparam { name: name.into(), reason: reason.into() });
        for (name, v) in [
            ("rf.min_samples_split", self.rf.min_samples_split),
            ("rf.min_samples_leaf", self.rf.min_samples_leaf),
            ("gb.min_samples_split", self.gb.min_samples_split),
            ("gb.min_samples_leaf", self.gb.min_samples_leaf),
        ] {
            if v < 1 {
                return bad(name, "must be >= 1");
            }
        }
        if self.rf.n_estimators < 1 {
            return bad("rf.n_estimators", "must be >= 1");
        }
        if !(self.rf.max_features_fraction > 0.0 && self.rf.max_features_fraction <= 1.0) {
            return bad("rf.max_features_fraction", "must be in (0, 1]");
        }
        if !(self.gb.learning_rate > 0.0 && self.gb.learning_rate <= 1.0) {
            return bad("gb.learning_rate", "must be in (0, 1]");
        }
        if !(self.gb.subsample > 0.0 && self.gb.subsample <= 1.0) {
            return bad("gb.subsample", "must be in (0, 1]");
        }
        Ok(())
    }

    /// Applies a dotted `section.field=value` override, e.g. `gb.learning_rate=0.05`.
    pub fn with_override(&self, assignment: &str) -> Result<Self, EnsembleError> {
        let bad = |reason: String| EnsembleError::InvalidHyperparam { name: assignment.into(), reason };
        let (key, raw) = assignment.split_once('=').ok_or_else(|| bad("expected key=value".into()))?;
        let (section, field) = key.trim().split_once('.').ok_or_else(|| bad("expected rf.<field> or gb.<field>".into()))?;
        let mut tree = serde_json::to_value(self).map_err(|e| bad(e.to_string()))?;
        let slot = tree.get_mut(section).and_then(|s| s.get_mut(field)).ok_or_else(|| bad(format!("unknown key {key}")))?;
        let value: serde_json::Value = serde_json::from_str(raw.trim()).map_err(|e| bad(e.to_string()))?;
        *slot = value;
        let out: Self = serde_json::from_value(tree).map_err(|e| bad(e.to_string()))?;
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Forest,
    Boosting,
}

/// A fitted ensemble together with the scaler that maps raw features into
/// the space the trees were trained in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsembleModel {
    pub kind: EnsembleKind,
    pub trees: Vec<CartTree>,
    pub init_value: f64,
    pub learning_rate: f64,
    pub scaler: ScalerParams,
    pub feature_names: Vec<String>,
}

impl TreeEnsembleModel {
    pub fn n_features(&self) -> usize {
        self.scaler.len()
    }

    /// Prediction for a row that is already standardized.
    pub fn predict_standardized(&self, z: &[f64]) -> f64 {
        match self.kind {
            EnsembleKind::Forest => {
                if self.trees.is_empty() {
                    return self.init_value;
                }
                self.trees.iter().map(|t| t.predict(z)).sum::<f64>() / self.trees.len() as f64
            }
            EnsembleKind::Boosting => self.init_value + self.learning_rate * self.trees.iter().map(|t| t.predict(z)).sum::<f64>(),
        }
    }

    pub fn predict(&self, raw: &[f64]) -> Result<f64, EnsembleError> {
        let z = self.scaler.standardize(raw)?;
        Ok(self.predict_standardized(&z))
    }

    pub fn predict_matrix(&self, raw: &Matrix) -> Result<Vec<f64>, EnsembleError> {
        let mut z = vec![0.0; raw.n_cols()];
        raw.rows()
            .map(|r| {
                self.scaler.standardize_into(r, &mut z)?;
                Ok(self.predict_standardized(&z))
            })
            .collect()
    }

    /// Impurity importance: each split credits its weighted squared-error
    /// reduction to its feature, normalized to sum 1. All zeros when the
    /// model has no splits.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features()];
        for t in &self.trees {
            for n in &t.nodes {
                if let Node::Split { feature, gain, .. } = *n {
                    imp[feature] += gain;
                }
            }
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            imp.iter_mut().for_each(|v| *v /= total);
        }
        imp
    }

    /// Feature names ordered by decreasing importance.
    pub fn importance_ranking(&self) -> Vec<(String, f64)> {
        let mut ranked: Vec<(String, f64)> = self.feature_names.iter().cloned().zip(self.feature_importance()).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        ranked
    }

    pub fn n_nodes(&self) -> usize {
        self.trees.iter().map(|t| t.nodes.len()).sum()
    }

    pub fn summary(&self, hp: &Hyperparams) -> ModelSummary {
        let imp = self.feature_importance();
        let any = imp.iter().any(|v| *v > 0.0);
        ModelSummary {
            kind: self.kind,
            hyperparams: match self.kind {
                EnsembleKind::Forest => serde_json::to_value(hp.rf).unwrap_or_default(),
                EnsembleKind::Boosting => serde_json::to_value(hp.gb).unwrap_or_default(),
            },
            n_trees: self.trees.len(),
            n_nodes: self.n_nodes(),
            max_depth: self.trees.iter().map(CartTree::depth).max().unwrap_or(0),
            importance: if any { self.feature_names.iter().cloned().zip(imp).collect() } else { Vec::new() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: EnsembleKind,
    pub hyperparams: serde_json::Value,
    pub n_trees: usize,
    pub n_nodes: usize,
    pub max_depth: usize,
    pub importance: Vec<(String, f64)>,
}
