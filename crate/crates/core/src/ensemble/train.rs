use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::cart::{grow, Presorted};
use super::{BoostingParams, EnsembleError, EnsembleKind, ForestParams, Matrix, TreeEnsembleModel};
use crate::mix_seed;
use crate::telemetry::ScalerParams;

fn check_xy(x: &Matrix, y: &[f64]) -> Result<(), EnsembleError> {
    if x.n_rows() == 0 {
        return Err(EnsembleError::EmptyDataset);
    }
    if x.n_rows() != y.len() {
        return Err(EnsembleError::LengthMismatch { x: x.n_rows(), y: y.len() });
    }
    Ok(())
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("f{i}")).collect()
}

/// Bagged forest on an already standardized matrix. Tree `t` draws its
/// bootstrap from a stream derived from `(seed, t)`, so the result does not
/// depend on how rayon schedules the trees.
pub fn fit_random_forest(x: &Matrix, y: &[f64], rf: &ForestParams, seed: u64) -> Result<TreeEnsembleModel, EnsembleError> {
    check_xy(x, y)?;
    if rf.n_estimators == 0 {
        return Err(EnsembleError::InvalidHyperparam { name: "rf.n_estimators".into(), reason: "must be >= 1".into() });
    }
    let data = Presorted::new(x);
    let n = x.n_rows();
    let params = rf.cart();
    let trees = (0..rf.n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, t as u64));
            let weights = if rf.bootstrap {
                let mut w = vec![0u32; n];
                for _ in 0..n {
                    w[rng.random_range(0..n)] += 1;
                }
                w
            } else {
                vec![1u32; n]
            };
            grow(&data, y, &weights, &params, Some(&mut rng))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TreeEnsembleModel {
        kind: EnsembleKind::Forest,
        trees,
        init_value: 0.0,
        learning_rate: 1.0,
        scaler: ScalerParams::identity(x.n_cols()),
        feature_names: default_names(x.n_cols()),
    })
}

/// Least-squares gradient boosting on an already standardized matrix.
pub fn fit_gradient_boosting(x: &Matrix, y: &[f64], gb: &BoostingParams, seed: u64) -> Result<TreeEnsembleModel, EnsembleError> {
    check_xy(x, y)?;
    let n = x.n_rows();
    let init = (y.iter().sum::<f64>() / n as f64) as f32 as f64;
    let lr = gb.learning_rate as f32 as f64;
    let mut f = vec![init; n];
    let mut residual = vec![0.0; n];
    let data = Presorted::new(x);
    let params = gb.cart();
    let k = ((gb.subsample * n as f64).round() as usize).clamp(1, n);
    let mut trees = Vec::with_capacity(gb.n_estimators);
    for round in 0..gb.n_estimators {
        for i in 0..n {
            residual[i] = y[i] - f[i];
        }
        let weights = if k < n {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, round as u64));
            let mut w = vec![0u32; n];
            for i in sample_indices(&mut rng, n, k) {
                w[i] = 1;
            }
            w
        } else {
            vec![1u32; n]
        };
        let tree = grow(&data, &residual, &weights, &params, None)?;
        for (i, fi) in f.iter_mut().enumerate() {
            *fi += lr * tree.predict(x.row(i));
        }
        trees.push(tree);
    }
    Ok(TreeEnsembleModel {
        kind: EnsembleKind::Boosting,
        trees,
        init_value: init,
        learning_rate: lr,
        scaler: ScalerParams::identity(x.n_cols()),
        feature_names: default_names(x.n_cols()),
    })
}

fn prepare(x_raw: &Matrix) -> Result<(ScalerParams, Matrix), EnsembleError> {
    let rows: Vec<&[f64]> = x_raw.rows().collect();
    let scaler = ScalerParams::fit(&rows)?.snapped_to_f32();
    let z = x_raw.standardized(&scaler)?;
    Ok((scaler, z))
}

fn finish(mut model: TreeEnsembleModel, scaler: ScalerParams, names: &[String]) -> TreeEnsembleModel {
    model.scaler = scaler;
    if names.len() == model.feature_names.len() {
        model.feature_names = names.to_vec();
    }
    model
}

/// Fits a scaler on raw features, then a forest in standardized space.
pub fn train_forest(x_raw: &Matrix, y: &[f64], rf: &ForestParams, seed: u64, names: &[String]) -> Result<TreeEnsembleModel, EnsembleError> {
    check_xy(x_raw, y)?;
    let (scaler, z) = prepare(x_raw)?;
    Ok(finish(fit_random_forest(&z, y, rf, seed)?, scaler, names))
}

/// Fits a scaler on raw features, then a boosted ensemble in standardized space.
pub fn train_boosting(
    x_raw: &Matrix,
    y: &[f64],
    gb: &BoostingParams,
    seed: u64,
    names: &[String],
) -> Result<TreeEnsembleModel, EnsembleError> {
    check_xy(x_raw, y)?;
    let (scaler, z) = prepare(x_raw)?;
    Ok(finish(fit_gradient_boosting(&z, y, gb, seed)?, scaler, names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{fit_cart, Node};
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y = rows.iter().map(|r| 3.0 * r[0] + r[1] * r[1] + 0.1 * rng.random_range(-1.0..1.0)).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    fn mse(model: &TreeEnsembleModel, x: &Matrix, y: &[f64]) -> f64 {
        x.rows().zip(y).map(|(r, t)| (model.predict_standardized(r) - t).powi(2)).sum::<f64>() / y.len() as f64
    }

    #[test]
    fn constant_target_forest() {
        let (x, _) = toy(50, 1);
        let m = fit_random_forest(&x, &[2.5; 50], &ForestParams { n_estimators: 5, ..Default::default() }, 3).unwrap();
        for r in x.rows() {
            assert_eq!(m.predict_standardized(r), 2.5);
        }
    }

    #[test]
    fn single_unbagged_tree_equals_cart() {
        let (x, y) = toy(120, 2);
        let rf = ForestParams { n_estimators: 1, bootstrap: false, ..Default::default() };
        let m = fit_random_forest(&x, &y, &rf, 9).unwrap();
        let t = fit_cart(&x, &y, &rf.cart()).unwrap();
        for r in x.rows() {
            assert_eq!(m.predict_standardized(r), t.predict(r));
        }
    }

    #[test]
    fn forest_is_deterministic() {
        let (x, y) = toy(200, 3);
        let rf = ForestParams { n_estimators: 8, ..Default::default() };
        let a = fit_random_forest(&x, &y, &rf, 11).unwrap();
        let b = fit_random_forest(&x, &y, &rf, 11).unwrap();
        assert_eq!(a, b);
        let c = fit_random_forest(&x, &y, &rf, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_rounds_is_mean_predictor() {
        let (x, y) = toy(40, 4);
        let gb = BoostingParams { n_estimators: 0, ..Default::default() };
        let m = fit_gradient_boosting(&x, &y, &gb, 0).unwrap();
        let mean = y.iter().sum::<f64>() / 40.0;
        assert_eq!(m.predict_standardized(x.row(0)), mean as f32 as f64);
    }

    #[test]
    fn one_full_step_equals_hand_composition() {
        let (x, y) = toy(150, 5);
        let gb = BoostingParams { n_estimators: 1, learning_rate: 1.0, subsample: 1.0, ..Default::default() };
        let m = fit_gradient_boosting(&x, &y, &gb, 0).unwrap();
        let mean = (y.iter().sum::<f64>() / y.len() as f64) as f32 as f64;
        let resid: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let t = fit_cart(&x, &resid, &gb.cart()).unwrap();
        for r in x.rows() {
            let want = mean + t.predict(r);
            assert!((m.predict_standardized(r) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_sample_training_loss_never_increases() {
        let (x, y) = toy(300, 6);
        let gb = BoostingParams { n_estimators: 30, subsample: 1.0, ..Default::default() };
        let m = fit_gradient_boosting(&x, &y, &gb, 0).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=m.trees.len() {
            let partial = TreeEnsembleModel { trees: m.trees[..k].to_vec(), ..m.clone() };
            let loss = mse(&partial, &x, &y);
            assert!(loss <= prev + 1e-12, "round {k}: {loss} > {prev}");
            prev = loss;
        }
    }

    #[test]
    fn importance_concentrates_on_signal_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..400).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| (6.0 * r[0]).sin()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let m = fit_random_forest(&x, &y, &ForestParams { n_estimators: 10, ..Default::default() }, 1).unwrap();
        let imp = m.feature_importance();
        assert!(imp[0] > 0.5, "{imp:?}");
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn no_splits_gives_zero_importance() {
        let (x, _) = toy(10, 9);
        let m = fit_random_forest(&x, &[1.0; 10], &ForestParams { n_estimators: 2, ..Default::default() }, 1).unwrap();
        assert!(m.feature_importance().iter().all(|v| *v == 0.0));
        assert!(m.summary(&Default::default()).importance.is_empty());
    }

    #[test]
    fn forest_leaves_respect_min_leaf_in_draws() {
        let (x, y) = toy(200, 10);
        let rf = ForestParams { n_estimators: 4, min_samples_leaf: 5, max_depth: 6, ..Default::default() };
        let m = fit_random_forest(&x, &y, &rf, 2).unwrap();
        for t in &m.trees {
            assert!(t.depth() <= 6);
            for n in &t.nodes {
                if let Node::Leaf { n_samples, .. } = n {
                    assert!(*n_samples >= 5);
                }
            }
        }
    }

    #[test]
    fn raw_training_snaps_scaler() {
        let (x, y) = toy(80, 12);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let m = train_boosting(&x, &y, &BoostingParams { n_estimators: 5, ..Default::default() }, 0, &names).unwrap();
        assert_eq!(m.feature_names, names);
        for v in m.scaler.means.iter().chain(&m.scaler.stds) {
            assert_eq!(*v, *v as f32 as f64);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn boosting_telescopes(seed in any::<u64>(), rounds in 0usize..12, lr in 0.05f64..1.0) {
            let (x, y) = toy(60, seed);
            let gb = BoostingParams { n_estimators: rounds, learning_rate: lr, ..Default::default() };
            let m = fit_gradient_boosting(&x, &y, &gb, seed).unwrap();
            for r in x.rows().take(10) {
                let mut sum = 0.0;
                for t in &m.trees {
                    sum += t.predict(r);
                }
                let want = m.init_value + m.learning_rate * sum;
                prop_assert!((m.predict_standardized(r) - want).abs() < 1e-9);
            }
        }

        #[test]
        fn forest_drop_one_reweights(seed in any::<u64>(), n_trees in 2usize..8, drop in 0usize..8) {
            let (x, y) = toy(60, seed);
            let m = fit_random_forest(&x, &y, &ForestParams { n_estimators: n_trees, max_depth: 4, ..Default::default() }, seed).unwrap();
            let drop = drop % n_trees;
            let mut reduced = m.clone();
            let removed = reduced.trees.remove(drop);
            let nf = n_trees as f64;
            for r in x.rows().take(10) {
                let pf = m.predict_standardized(r);
                let pt = removed.predict(r);
                let want = pf - (pt - pf) / (nf - 1.0);
                prop_assert!((reduced.predict_standardized(r) - want).abs() < 1e-9);
            }
        }
    }
}
