//! TML1: a fixed-layout little-endian container for tree ensembles, and an
//! allocation-free evaluator for it.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   magic "TML1" | version u16 | kind u8 | n_features u8 | n_trees u16 | init f32 | lr f32
//! scaler   means: n_features x f32 | stds: n_features x f32
//! trees    v1:   n_nodes u16, then n_nodes x {feature u8, pad u8, left u16, right u16, pad u16, value f32}
//!          v2/3: n_nodes u16, thr_scale f32, val_scale f32,
//!                then n_nodes x {feature u8, left u16, right u16, value i16|f16}
//! ```
//!
//! `feature == 0xFF` marks a leaf, whose `value` is the output; otherwise
//! `value` is the split threshold on the standardized feature and the row
//! goes left when `z <= threshold`. Child indices are local to the tree and
//! always greater than the parent's index.

mod quantize;

use half::f16;
use serde::Serialize;
use thiserror::Error;

use crate::ensemble::{EnsembleKind, Node, TreeEnsembleModel};

pub use quantize::{dequantize_i16, quantize, quantize_i16, QuantMode};

pub const MAGIC: [u8; 4] = *b"TML1";
pub const HEADER_LEN: usize = 18;
pub const NODE_LEN: usize = 12;
pub const QNODE_LEN: usize = 7;
pub const LEAF: u8 = 0xFF;

pub const VERSION_F32: u16 = 1;
pub const VERSION_F16: u16 = 2;
pub const VERSION_I16: u16 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum TinyError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown model kind {0}")]
    UnknownKind(u8),
    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after the last tree")]
    TrailingBytes(usize),
    #[error("tree {tree} node {node}: {reason}")]
    BadNode { tree: usize, node: usize, reason: &'static str },
    #[error("invalid scaler entry for feature {0}")]
    BadScaler(usize),
    #[error("non-finite header field {0}")]
    NonFiniteHeader(&'static str),
    #[error("limit exceeded: {0}")]
    LimitExceeded(String),
    #[error("value {value} not representable: {reason}")]
    OutOfRange { value: f64, reason: &'static str },
    #[error("expected {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("input {0} is not finite")]
    NonFiniteInput(usize),
    #[error("operation needs a version-1 (f32) artifact, got version {0}")]
    NotFloatArtifact(u16),
}

/// A decoded, validated artifact. Immutable after load; `infer` touches only
/// these arrays and a few locals.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeModel {
    version: u16,
    kind: EnsembleKind,
    n_features: usize,
    init_value: f32,
    learning_rate: f32,
    means: Vec<f32>,
    stds: Vec<f32>,
    /// Node offset of each tree, plus a final end marker.
    tree_start: Vec<u32>,
    feature: Vec<u8>,
    left: Vec<u16>,
    right: Vec<u16>,
    value: Vec<f64>,
    thr_scale: Vec<f32>,
    val_scale: Vec<f32>,
    depth: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeInfo {
    pub n_nodes: usize,
    pub n_leaves: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub magic: String,
    pub version: u16,
    pub encoding: &'static str,
    pub kind: EnsembleKind,
    pub n_features: usize,
    pub n_trees: usize,
    pub init_value: f32,
    pub learning_rate: f32,
    pub total_nodes: usize,
    pub max_node_visits: usize,
    pub file_bytes: usize,
    pub trees: Vec<TreeInfo>,
}

fn kind_code(kind: EnsembleKind) -> u8 {
    match kind {
        EnsembleKind::Boosting => 0,
        EnsembleKind::Forest => 1,
    }
}

fn to_f32(value: f64, what: &'static str) -> Result<f32, TinyError> {
    let v = value as f32;
    if !v.is_finite() {
        return Err(TinyError::OutOfRange { value, reason: what });
    }
    Ok(v)
}

/// Serializes a fitted ensemble as a version-1 artifact.
pub fn export(model: &TreeEnsembleModel) -> Result<Vec<u8>, TinyError> {
    Ok(EdgeModel::from_ensemble(model)?.to_bytes())
}

/// Parses and validates an artifact of any supported version.
pub fn load(bytes: &[u8]) -> Result<EdgeModel, TinyError> {
    EdgeModel::from_bytes(bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TinyError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(TinyError::Truncated { offset: self.pos, needed: n - rest });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TinyError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, TinyError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn f32(&mut self) -> Result<f32, TinyError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl EdgeModel {
    pub fn from_ensemble(model: &TreeEnsembleModel) -> Result<Self, TinyError> {
        let n_features = model.n_features();
        if n_features > 255 {
            return Err(TinyError::LimitExceeded(format!("{n_features} features (max 255)")));
        }
        if model.trees.len() > u16::MAX as usize {
            return Err(TinyError::LimitExceeded(format!("{} trees (max 65535)", model.trees.len())));
        }
        let (init, lr) = match model.kind {
            EnsembleKind::Forest => (0.0, 1.0),
            EnsembleKind::Boosting => (model.init_value, model.learning_rate),
        };
        let mut out = Self {
            version: VERSION_F32,
            kind: model.kind,
            n_features,
            init_value: to_f32(init, "init_value")?,
            learning_rate: to_f32(lr, "learning_rate")?,
            means: model.scaler.means.iter().map(|v| to_f32(*v, "scaler mean")).collect::<Result<_, _>>()?,
            stds: model.scaler.stds.iter().map(|v| to_f32(*v, "scaler std")).collect::<Result<_, _>>()?,
            tree_start: vec![0],
            feature: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            value: Vec::new(),
            thr_scale: Vec::new(),
            val_scale: Vec::new(),
            depth: Vec::new(),
        };
        for (t, tree) in model.trees.iter().enumerate() {
            if tree.nodes.len() > u16::MAX as usize {
                return Err(TinyError::LimitExceeded(format!("tree {t} has {} nodes (max 65535)", tree.nodes.len())));
            }
            for n in &tree.nodes {
                match *n {
                    Node::Leaf { value, .. } => {
                        out.feature.push(LEAF);
                        out.left.push(0);
                        out.right.push(0);
                        out.value.push(to_f32(value, "leaf value")? as f64);
                    }
                    Node::Split { feature, threshold, left, right, .. } => {
                        out.feature.push(feature as u8);
                        out.left.push(left as u16);
                        out.right.push(right as u16);
                        out.value.push(to_f32(threshold, "threshold")? as f64);
                    }
                }
            }
            out.tree_start.push(out.feature.len() as u32);
            out.thr_scale.push(1.0);
            out.val_scale.push(1.0);
            out.depth.push(tree.depth() as u16);
        }
        out.validate_scaler()?;
        Ok(out)
    }

    fn validate_scaler(&self) -> Result<(), TinyError> {
        if !self.init_value.is_finite() {
            return Err(TinyError::NonFiniteHeader("init_value"));
        }
        if !self.learning_rate.is_finite() {
            return Err(TinyError::NonFiniteHeader("learning_rate"));
        }
        for i in 0..self.n_features {
            if !self.means[i].is_finite() || !(self.stds[i].is_finite() && self.stds[i] > 0.0) {
                return Err(TinyError::BadScaler(i));
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TinyError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(TinyError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
        }
        let version = r.u16()?;
        if !(VERSION_F32..=VERSION_I16).contains(&version) {
            return Err(TinyError::UnsupportedVersion(version));
        }
        let kind = match r.u8()? {
            0 => EnsembleKind::Boosting,
            1 => EnsembleKind::Forest,
            k => return Err(TinyError::UnknownKind(k)),
        };
        let n_features = r.u8()? as usize;
        let n_trees = r.u16()? as usize;
        let init_value = r.f32()?;
        let learning_rate = r.f32()?;
        let mut means = Vec::with_capacity(n_features);
        for _ in 0..n_features {
            means.push(r.f32()?);
        }
        let mut stds = Vec::with_capacity(n_features);
        for _ in 0..n_features {
            stds.push(r.f32()?);
        }
        let mut m = Self {
            version,
            kind,
            n_features,
            init_value,
            learning_rate,
            means,
            stds,
            tree_start: vec![0],
            feature: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            value: Vec::new(),
            thr_scale: Vec::new(),
            val_scale: Vec::new(),
            depth: Vec::new(),
        };
        m.validate_scaler()?;
        let node_len = if version == VERSION_F32 { NODE_LEN } else { QNODE_LEN };
        for t in 0..n_trees {
            let n_nodes = r.u16()? as usize;
            if n_nodes == 0 {
                return Err(TinyError::BadNode { tree: t, node: 0, reason: "empty tree" });
            }
            let (ts, vs) = if version == VERSION_F32 { (1.0, 1.0) } else { (r.f32()?, r.f32()?) };
            if !(ts.is_finite() && ts > 0.0 && vs.is_finite() && vs > 0.0) {
                return Err(TinyError::BadNode { tree: t, node: 0, reason: "invalid scale" });
            }
            if r.remaining() < n_nodes * node_len {
                return Err(TinyError::Truncated { offset: r.pos, needed: n_nodes * node_len - r.remaining() });
            }
            for i in 0..n_nodes {
                let bad = |reason| TinyError::BadNode { tree: t, node: i, reason };
                let feature = r.u8()?;
                if version == VERSION_F32 {
                    r.u8()?;
                }
                let left = r.u16()?;
                let right = r.u16()?;
                if version == VERSION_F32 {
                    r.u16()?;
                }
                let is_leaf = feature == LEAF;
                let raw = match version {
                    VERSION_F32 => r.f32()? as f64,
                    VERSION_F16 => {
                        let b = r.take(2)?;
                        f16::from_le_bytes([b[0], b[1]]).to_f64()
                    }
                    _ => {
                        let b = r.take(2)?;
                        let scale = if is_leaf { vs } else { ts };
                        dequantize_i16(i16::from_le_bytes([b[0], b[1]]), scale)
                    }
                };
                if !raw.is_finite() {
                    return Err(bad("non-finite value"));
                }
                if is_leaf {
                    if left != 0 || right != 0 {
                        return Err(bad("leaf with children"));
                    }
                } else {
                    if feature as usize >= n_features {
                        return Err(bad("feature index out of range"));
                    }
                    let ok = |c: u16| (c as usize) > i && (c as usize) < n_nodes;
                    if !ok(left) || !ok(right) || left == right {
                        return Err(bad("child index out of range"));
                    }
                }
                m.feature.push(feature);
                m.left.push(left);
                m.right.push(right);
                m.value.push(raw);
            }
            let start = m.tree_start[t] as usize;
            m.tree_start.push(m.feature.len() as u32);
            m.thr_scale.push(ts);
            m.val_scale.push(vs);
            m.depth.push(tree_depth(&m.feature[start..], &m.left[start..], &m.right[start..]) as u16);
        }
        if r.remaining() > 0 {
            return Err(TinyError::TrailingBytes(r.remaining()));
        }
        Ok(m)
    }

    /// Canonical byte encoding; `load(bytes).to_bytes() == bytes` for every
    /// artifact this crate writes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let quantized = self.version != VERSION_F32;
        let node_len = if quantized { QNODE_LEN } else { NODE_LEN };
        let mut out = Vec::with_capacity(self.encoded_len(node_len));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(kind_code(self.kind));
        out.push(self.n_features as u8);
        out.extend_from_slice(&(self.n_trees() as u16).to_le_bytes());
        out.extend_from_slice(&self.init_value.to_le_bytes());
        out.extend_from_slice(&self.learning_rate.to_le_bytes());
        for v in self.means.iter().chain(&self.stds) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in 0..self.n_trees() {
            let (a, b) = (self.tree_start[t] as usize, self.tree_start[t + 1] as usize);
            out.extend_from_slice(&((b - a) as u16).to_le_bytes());
            if quantized {
                out.extend_from_slice(&self.thr_scale[t].to_le_bytes());
                out.extend_from_slice(&self.val_scale[t].to_le_bytes());
            }
            for k in a..b {
                out.push(self.feature[k]);
                if !quantized {
                    out.push(0);
                }
                out.extend_from_slice(&self.left[k].to_le_bytes());
                out.extend_from_slice(&self.right[k].to_le_bytes());
                if !quantized {
                    out.extend_from_slice(&[0, 0]);
                }
                let v = self.value[k];
                match self.version {
                    VERSION_F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    VERSION_F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                    _ => {
                        let scale = if self.feature[k] == LEAF { self.val_scale[t] } else { self.thr_scale[t] };
                        let q = (v / scale as f64).round() as i16;
                        out.extend_from_slice(&q.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    fn encoded_len(&self, node_len: usize) -> usize {
        let per_tree = if node_len == QNODE_LEN { 10 } else { 2 };
        HEADER_LEN + 8 * self.n_features + per_tree * self.n_trees() + node_len * self.feature.len()
    }

    pub fn version(&self) -> u16 {
        self.version
    }

    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.tree_start.len() - 1
    }

    pub fn init_value(&self) -> f32 {
        self.init_value
    }

    /// Upper bound on nodes touched by one `infer` call.
    pub fn max_node_visits(&self) -> usize {
        self.depth.iter().map(|d| *d as usize + 1).sum()
    }

    /// Evaluates one raw (unstandardized) input row. Performs no heap
    /// allocation.
    pub fn infer(&self, x: &[f64]) -> Result<f64, TinyError> {
        if x.len() != self.n_features {
            return Err(TinyError::Arity { expected: self.n_features, got: x.len() });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(TinyError::NonFiniteInput(i));
        }
        let n_trees = self.n_trees();
        let mut sum = 0.0f64;
        for t in 0..n_trees {
            let base = self.tree_start[t] as usize;
            let mut i = 0usize;
            loop {
                let k = base + i;
                let f = self.feature[k];
                if f == LEAF {
                    sum += self.value[k];
                    break;
                }
                let f = f as usize;
                let z = (x[f] - self.means[f] as f64) / self.stds[f] as f64;
                i = if z <= self.value[k] { self.left[k] } else { self.right[k] } as usize;
            }
        }
        Ok(match self.kind {
            EnsembleKind::Forest if n_trees == 0 => self.init_value as f64,
            EnsembleKind::Forest => sum / n_trees as f64,
            EnsembleKind::Boosting => self.init_value as f64 + self.learning_rate as f64 * sum,
        })
    }

    pub fn info(&self) -> ModelInfo {
        let trees: Vec<TreeInfo> = (0..self.n_trees())
            .map(|t| {
                let (a, b) = (self.tree_start[t] as usize, self.tree_start[t + 1] as usize);
                TreeInfo {
                    n_nodes: b - a,
                    n_leaves: self.feature[a..b].iter().filter(|f| **f == LEAF).count(),
                    depth: self.depth[t] as usize,
                }
            })
            .collect();
        ModelInfo {
            magic: String::from_utf8_lossy(&MAGIC).into_owned(),
            version: self.version,
            encoding: match self.version {
                VERSION_F32 => "f32",
                VERSION_F16 => "f16",
                _ => "i16",
            },
            kind: self.kind,
            n_features: self.n_features,
            n_trees: self.n_trees(),
            init_value: self.init_value,
            learning_rate: self.learning_rate,
            total_nodes: self.feature.len(),
            max_node_visits: self.max_node_visits(),
            file_bytes: self.encoded_len(if self.version == VERSION_F32 { NODE_LEN } else { QNODE_LEN }),
            trees,
        }
    }
}

fn tree_depth(feature: &[u8], left: &[u16], right: &[u16]) -> usize {
    // children always follow parents, so one forward pass suffices
    let n = feature.len();
    let mut depth = vec![0usize; n];
    let mut max = 0;
    for i in 0..n {
        if feature[i] != LEAF {
            for c in [left[i] as usize, right[i] as usize] {
                if c < n {
                    depth[c] = depth[c].max(depth[i] + 1);
                    max = max.max(depth[c]);
                }
            }
        }
    }
    max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{train_boosting, train_forest, BoostingParams, CartTree, ForestParams, Matrix};
    use crate::telemetry::ScalerParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(init: f64, n_features: usize) -> TreeEnsembleModel {
        TreeEnsembleModel {
            kind: EnsembleKind::Boosting,
            trees: vec![],
            init_value: init,
            learning_rate: 0.1,
            scaler: ScalerParams::identity(n_features),
            feature_names: vec![],
        }
    }

    fn data(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| vec![rng.random_range(500.0..4000.0), rng.random_range(20.0..35.0), rng.random_range(0.0..5000.0)]).collect();
        let y = rows.iter().map(|r| (r[0] - 2500.0).max(0.0) * 0.2 + r[1] + r[2] * 1e-3).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn constant_model_layout() {
        let bytes = export(&constant(5.0, 2)).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 1 + 2 + 4 + 4 + 2 * 2 * 4);
        assert_eq!(&bytes[..4], b"TML1");
        let m = load(&bytes).unwrap();
        assert_eq!(m.infer(&[1.0, -7.0]).unwrap(), 5.0);
        assert_eq!(m.infer(&[1e9, 3.0]).unwrap(), 5.0);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = export(&constant(5.0, 1)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(load(&bytes), Err(TinyError::BadMagic(*b"XXXX")));
    }

    #[test]
    fn single_leaf_tree() {
        let mut m = constant(0.0, 1);
        m.kind = EnsembleKind::Forest;
        m.trees = vec![CartTree::leaf(3.25, 1)];
        let e = load(&export(&m).unwrap()).unwrap();
        assert_eq!(e.infer(&[0.0]).unwrap(), 3.25);
        assert_eq!(e.max_node_visits(), 1);
    }

    #[test]
    fn structural_rejections() {
        let (x, y) = data(200, 1);
        let model = train_forest(&x, &y, &ForestParams { n_estimators: 2, max_depth: 3, ..Default::default() }, 0, &[]).unwrap();
        let good = export(&model).unwrap();
        let first_node = HEADER_LEN + 8 * 3 + 2;
        // left child pointing back at the root
        let mut b = good.clone();
        b[first_node + 2..first_node + 4].copy_from_slice(&0u16.to_le_bytes());
        assert!(matches!(load(&b), Err(TinyError::BadNode { reason: "child index out of range", .. })));
        // NaN threshold
        let mut b = good.clone();
        b[first_node + 8..first_node + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(load(&b), Err(TinyError::BadNode { reason: "non-finite value", .. })));
        // truncation and trailing garbage
        assert!(matches!(load(&good[..good.len() - 1]), Err(TinyError::Truncated { .. })));
        let mut b = good.clone();
        b.push(0);
        assert_eq!(load(&b), Err(TinyError::TrailingBytes(1)));
        let mut b = good.clone();
        b[4] = 9;
        assert_eq!(load(&b), Err(TinyError::UnsupportedVersion(9)));
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let (x, y) = data(500, 2);
        let model = train_boosting(&x, &y, &BoostingParams { n_estimators: 20, ..Default::default() }, 0, &[]).unwrap();
        let a = export(&model).unwrap();
        let b = load(&a).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_eq!(export(&model).unwrap(), a);
        assert_eq!(load(&a).unwrap().info().file_bytes, a.len());
    }

    #[test]
    fn parity_with_training_predictor() {
        let (x, y) = data(2000, 3);
        let (xt, _) = data(1000, 4);
        for model in [
            train_boosting(&x, &y, &BoostingParams::default(), 1, &[]).unwrap(),
            train_forest(&x, &y, &ForestParams { n_estimators: 20, ..Default::default() }, 1, &[]).unwrap(),
        ] {
            let e = load(&export(&model).unwrap()).unwrap();
            for r in xt.rows() {
                let d = (e.infer(r).unwrap() - model.predict(r).unwrap()).abs();
                assert!(d <= 1e-5, "{d}");
            }
            assert!(e.max_node_visits() <= e.n_trees() * (model.trees.iter().map(|t| t.depth()).max().unwrap() + 1));
        }
    }

    #[test]
    fn input_errors() {
        let e = load(&export(&constant(1.0, 2)).unwrap()).unwrap();
        assert_eq!(e.infer(&[1.0]), Err(TinyError::Arity { expected: 2, got: 1 }));
        assert_eq!(e.infer(&[1.0, f64::NAN]), Err(TinyError::NonFiniteInput(1)));
    }

    #[test]
    fn export_limits() {
        let mut m = constant(1.0, 256);
        assert!(matches!(export(&m), Err(TinyError::LimitExceeded(_))));
        m = constant(f64::MAX, 1);
        assert!(matches!(export(&m), Err(TinyError::OutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn random_buffers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..1024)) {
            let _ = load(&bytes);
        }

        #[test]
        fn random_buffers_with_valid_prefix_never_panic(tail in prop::collection::vec(any::<u8>(), 0..1024), version in 1u16..=3) {
            let mut bytes = MAGIC.to_vec();
            bytes.extend_from_slice(&version.to_le_bytes());
            bytes.extend_from_slice(&tail);
            if let Ok(m) = load(&bytes) {
                let x = vec![0.5; m.n_features()];
                prop_assert!(m.infer(&x).is_ok());
            }
        }

        #[test]
        fn mutated_artifacts_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
            let (x, y) = data(100, 5);
            let model = train_forest(&x, &y, &ForestParams { n_estimators: 3, max_depth: 4, ..Default::default() }, 0, &[]).unwrap();
            let mut bytes = export(&model).unwrap();
            let i = pos.index(bytes.len());
            bytes[i] = byte;
            if let Ok(m) = load(&bytes) {
                prop_assert!(m.infer(&[1000.0, 25.0, 100.0]).is_ok());
            }
        }
    }
}
