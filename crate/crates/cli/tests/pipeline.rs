use irrigo_cli::pipeline::{compare, edge_budget, need_split, render_table, Task};
use irrigo_core::ensemble::Hyperparams;
use irrigo_core::synthdata::GeneratorConfig;
use irrigo_core::tinymodel::QuantMode;

fn small() -> Hyperparams {
    ["rf.n_estimators=15", "gb.n_estimators=40"].iter().fold(Hyperparams::default(), |hp, o| hp.with_override(o).unwrap())
}

#[test]
fn report_figures_follow_from_the_predictions() {
    let (train_set, test_set) = need_split(&GeneratorConfig { n_rows: 4000, seed: 11, ..Default::default() }).unwrap();
    let c = compare(&train_set, &test_set, &small(), 11, Task::Need).unwrap();
    let r = &c.report;
    assert_eq!((r.n_train, r.n_test, r.n_features), (3200, 800, 14));

    let abs_err = |m: &irrigo_core::ensemble::TreeEnsembleModel| -> Vec<f64> {
        test_set.x.rows().zip(&test_set.y).map(|(x, y)| (m.predict(x).unwrap() - y).abs()).collect()
    };
    let (ea, eb) = (abs_err(&c.rf), abs_err(&c.gb));
    let n = ea.len() as f64;
    let mae_rf = ea.iter().sum::<f64>() / n;
    let mae_gb = eb.iter().sum::<f64>() / n;
    assert!((r.rf.metrics.mae - mae_rf).abs() < 1e-12);
    assert!((r.gb.metrics.mae - mae_gb).abs() < 1e-12);

    // paired t statistic on d = |e_rf| - |e_gb|
    let d: Vec<f64> = ea.iter().zip(&eb).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = r.t_test.as_ref().unwrap();
    assert!((t.mean_diff - mean).abs() < 1e-12);
    assert!((t.t_stat - mean / (sd / n.sqrt())).abs() < 1e-9);
    assert_eq!(r.favours == "gradient_boosting", t.p_value < 0.01 && mean > 0.0);

    let mae = r.improvement.iter().find(|i| i.metric == "mae").unwrap();
    assert!((mae.gb_gain_pct.unwrap() - 100.0 * (mae_rf - mae_gb) / mae_rf).abs() < 1e-9);
    let r2 = r.improvement.iter().find(|i| i.metric == "r2").unwrap();
    assert_eq!(r2.gb_gain_pct.unwrap() > 0.0, r.gb.metrics.r2 > r.rf.metrics.r2);

    let table = render_table(r, Some(&c.timings));
    assert!(table.contains("random forest") && table.contains("gradient boosting"));
    assert!(!render_table(r, None).contains("training time"));

    let b = edge_budget(&c.gb, &test_set, 100, QuantMode::F16).unwrap();
    assert_eq!(b.parity_rows, 100);
    assert!(b.max_abs_diff < 1e-9);
    assert!(b.quant_bytes < b.artifact_bytes);
}
