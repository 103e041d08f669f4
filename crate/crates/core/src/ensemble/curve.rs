use serde::{Deserialize, Serialize};

use super::metrics::metrics_from_predictions;
use super::{train_boosting, train_forest, EnsembleError, EnsembleKind, Hyperparams, Matrix, TreeEnsembleModel};
use crate::synthdata::shuffled_indices;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub n_train: usize,
    pub train_r2: f64,
    pub val_r2: f64,
}

pub const DEFAULT_FRACTIONS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const CURVE_CSV_HEADER: &str = "fraction,n_train,train_r2,val_r2";

/// Shuffle split used by the learning curve: `(pool, holdout)` row indices,
/// the holdout being the last 20% of a seeded permutation.
pub fn holdout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = shuffled_indices(n, seed);
    let n_pool = (n as f64 * 0.8).ceil() as usize;
    (order[..n_pool].to_vec(), order[n_pool..].to_vec())
}

pub(crate) fn fit_kind(
    kind: EnsembleKind,
    x: &Matrix,
    y: &[f64],
    hp: &Hyperparams,
    seed: u64,
    names: &[String],
) -> Result<TreeEnsembleModel, EnsembleError> {
    match kind {
        EnsembleKind::Forest => train_forest(x, y, &hp.rf, seed, names),
        EnsembleKind::Boosting => train_boosting(x, y, &hp.gb, seed, names),
    }
}

/// Trains on growing prefixes of the shuffled pool and scores each fit on
/// the prefix itself and on the fixed holdout.
pub fn learning_curve(
    x: &Matrix,
    y: &[f64],
    hp: &Hyperparams,
    kind: EnsembleKind,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<CurvePoint>, EnsembleError> {
    if x.n_rows() != y.len() {
        return Err(EnsembleError::LengthMismatch { x: x.n_rows(), y: y.len() });
    }
    if x.n_rows() == 0 {
        return Err(EnsembleError::EmptyDataset);
    }
    let (pool, holdout) = holdout_split(x.n_rows(), seed);
    let x_val = x.select_rows(&holdout);
    let y_val: Vec<f64> = holdout.iter().map(|&i| y[i]).collect();
    let min_split = match kind {
        EnsembleKind::Forest => hp.rf.min_samples_split,
        EnsembleKind::Boosting => hp.gb.min_samples_split,
    };
    let mut out = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(EnsembleError::InvalidHyperparam { name: "fraction".into(), reason: format!("{fraction} not in (0, 1]") });
        }
        let n = (pool.len() as f64 * fraction).ceil() as usize;
        if n < min_split {
            return Err(EnsembleError::FractionTooSmall { fraction, rows: n });
        }
        let idx = &pool[..n];
        let x_tr = x.select_rows(idx);
        let y_tr: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let model = fit_kind(kind, &x_tr, &y_tr, hp, seed, &[])?;
        let train_r2 = metrics_from_predictions(&y_tr, &model.predict_matrix(&x_tr)?)?.r2;
        let val_r2 = metrics_from_predictions(&y_val, &model.predict_matrix(&x_val)?)?.r2;
        out.push(CurvePoint { fraction, n_train: n, train_r2, val_r2 });
    }
    Ok(out)
}

pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_CSV_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!("{:.2},{},{:.6},{:.6}\n", p.fraction, p.n_train, p.train_r2, p.val_r2));
    }
    s
}
