use half::f16;
use serde::{Deserialize, Serialize};

use super::{EdgeModel, TinyError, LEAF, VERSION_F16, VERSION_F32, VERSION_I16};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// IEEE half precision, no scaling.
    F16,
    /// Symmetric 16-bit fixed point with a per-tree scale for thresholds and
    /// another for leaf values.
    I16,
}

impl std::str::FromStr for QuantMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f16" => Ok(Self::F16),
            "i16" => Ok(Self::I16),
            other => Err(format!("unknown quantization mode {other:?} (expected f16 or i16)")),
        }
    }
}

pub fn quantize_i16(value: f64, scale: f32) -> Result<i16, TinyError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(TinyError::OutOfRange { value: scale as f64, reason: "scale must be positive and finite" });
    }
    let q = (value / scale as f64).round();
    if !(q.is_finite() && q.abs() <= i16::MAX as f64) {
        return Err(TinyError::OutOfRange { value, reason: "outside the i16 grid for this scale" });
    }
    Ok(q as i16)
}

pub fn dequantize_i16(q: i16, scale: f32) -> f64 {
    q as f64 * scale as f64
}

fn scale_for(values: impl Iterator<Item = f64>) -> Result<f32, TinyError> {
    let max = values.fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Ok(1.0);
    }
    let mut scale = (max / i16::MAX as f64) as f32;
    if !(scale.is_finite() && scale > 0.0 && scale.is_normal()) {
        return Err(TinyError::OutOfRange { value: max, reason: "dynamic range outside the i16 scale span" });
    }
    // f32 rounding may leave max/scale a hair above the grid edge
    while (max / scale as f64).round() > i16::MAX as f64 {
        scale = f32::from_bits(scale.to_bits() + 1);
    }
    Ok(scale)
}

/// Re-encodes a version-1 artifact with 16-bit node values.
pub fn quantize(artifact: &[u8], mode: QuantMode) -> Result<Vec<u8>, TinyError> {
    let src = EdgeModel::from_bytes(artifact)?;
    if src.version != VERSION_F32 {
        return Err(TinyError::NotFloatArtifact(src.version));
    }
    let mut out = src.clone();
    for t in 0..src.n_trees() {
        let (a, b) = (src.tree_start[t] as usize, src.tree_start[t + 1] as usize);
        let is_leaf = |k: usize| src.feature[k] == LEAF;
        match mode {
            QuantMode::F16 => {
                for k in a..b {
                    let v = src.value[k];
                    let h = f16::from_f64(v);
                    if !h.is_finite() {
                        return Err(TinyError::OutOfRange { value: v, reason: "exceeds the f16 range" });
                    }
                    out.value[k] = h.to_f64();
                }
            }
            QuantMode::I16 => {
                let ts = scale_for((a..b).filter(|k| !is_leaf(*k)).map(|k| src.value[k]))?;
                let vs = scale_for((a..b).filter(|k| is_leaf(*k)).map(|k| src.value[k]))?;
                for k in a..b {
                    let s = if is_leaf(k) { vs } else { ts };
                    out.value[k] = dequantize_i16(quantize_i16(src.value[k], s)?, s);
                }
                out.thr_scale[t] = ts;
                out.val_scale[t] = vs;
            }
        }
    }
    out.version = match mode {
        QuantMode::F16 => VERSION_F16,
        QuantMode::I16 => VERSION_I16,
    };
    Ok(out.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{metrics_from_predictions, train_boosting, BoostingParams, CartTree, EnsembleKind, Matrix, TreeEnsembleModel};
    use crate::telemetry::ScalerParams;
    use crate::tinymodel::{export, load};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_round_trip() {
        let s = 1.0 / 256.0;
        let q = quantize_i16(5.0, s).unwrap();
        assert!((dequantize_i16(q, s) - 5.0).abs() <= 1.0 / 256.0);
        let q = quantize_i16(5.001, s).unwrap();
        assert!((dequantize_i16(q, s) - 5.001).abs() <= 1.0 / 256.0);
        assert!(quantize_i16(1e6, s).is_err());
        assert!(quantize_i16(1.0, 0.0).is_err());
    }

    #[test]
    fn f16_overflow_is_a_range_error() {
        let model = TreeEnsembleModel {
            kind: EnsembleKind::Forest,
            trees: vec![CartTree::leaf(1e6, 1)],
            init_value: 0.0,
            learning_rate: 1.0,
            scaler: ScalerParams::identity(1),
            feature_names: vec![],
        };
        let bytes = export(&model).unwrap();
        assert!(matches!(quantize(&bytes, QuantMode::F16), Err(TinyError::OutOfRange { .. })));
        let q = load(&quantize(&bytes, QuantMode::I16).unwrap()).unwrap();
        assert!((q.infer(&[0.0]).unwrap() - 1e6).abs() <= 1e6 / 32767.0);
    }

    #[test]
    fn quantized_artifacts_are_smaller_and_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..3000).map(|_| (0..4).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0].sin() * 3.0 + r[1] + 0.5 * r[2]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let model = train_boosting(&x, &y, &BoostingParams::default(), 0, &[]).unwrap();
        let base = export(&model).unwrap();
        let f32m = load(&base).unwrap();
        let ref_pred: Vec<f64> = x.rows().map(|r| f32m.infer(r).unwrap()).collect();
        let rmse_ref = metrics_from_predictions(&y, &ref_pred).unwrap().rmse;
        for mode in [QuantMode::F16, QuantMode::I16] {
            let q = quantize(&base, mode).unwrap();
            assert!((q.len() as f64) <= 0.65 * base.len() as f64, "{mode:?}: {} vs {}", q.len(), base.len());
            let m = load(&q).unwrap();
            assert_eq!(m.to_bytes(), q);
            let pred: Vec<f64> = x.rows().map(|r| m.infer(r).unwrap()).collect();
            let rmse = metrics_from_predictions(&y, &pred).unwrap().rmse;
            assert!(rmse <= 1.02 * rmse_ref, "{mode:?}: {rmse} vs {rmse_ref}");
            assert!(matches!(quantize(&q, mode), Err(TinyError::NotFloatArtifact(_))));
        }
    }
}
