//! Greedy variance-reduction regression trees.
//!
//! Rows are addressed through per-feature presorted index arrays, so a node
//! split costs one linear scan per feature plus a stable partition; nothing
//! is re-sorted below the root. Bootstrap and subsample draws are expressed
//! as integer row weights.

use rand::seq::index::sample as sample_indices;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnsembleError, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Fraction of features examined at each node.
    pub max_features_fraction: f64,
}

impl Default for CartParams {
    fn default() -> Self {
        Self { max_depth: 10, min_samples_split: 2, min_samples_leaf: 1, max_features_fraction: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
        /// Weighted squared-error reduction achieved by this split.
        gain: f64,
        n_samples: u32,
    },
    Leaf {
        value: f64,
        n_samples: u32,
    },
}

/// Flat preorder node array; node 0 is the root and children always follow
/// their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartTree {
    pub nodes: Vec<Node>,
}

impl CartTree {
    pub fn leaf(value: f64, n_samples: u32) -> Self {
        Self { nodes: vec![Node::Leaf { value, n_samples }] }
    }

    /// Evaluates an already standardized row. Goes left when `x <= threshold`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if x[feature] <= threshold { left as usize } else { right as usize };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.len() - self.n_splits()
    }
}

/// Column-major copy of a matrix with every column's row order presorted.
#[derive(Debug, Clone)]
pub struct Presorted {
    n_rows: usize,
    cols: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(x: &Matrix) -> Self {
        let cols: Vec<Vec<f64>> = (0..x.n_cols()).map(|j| (0..x.n_rows()).map(|i| x.get(i, j)).collect()).collect();
        let sorted = cols
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Self { n_rows: x.n_rows(), cols, sorted }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }
}

/// Smallest `f32`-representable threshold `t` with `a <= t < b`, preferring
/// the one nearest the midpoint. `None` when the gap is below `f32` spacing.
pub fn snap_threshold(a: f64, b: f64) -> Option<f64> {
    let mid = 0.5 * (a + b);
    let m = mid as f32;
    let candidates = [m, next_down(m), next_up(m)];
    candidates
        .iter()
        .map(|c| *c as f64)
        .filter(|t| *t >= a && *t < b && t.is_finite())
        .min_by(|x, y| (x - mid).abs().total_cmp(&(y - mid).abs()))
}

fn next_up(x: f32) -> f32 {
    if x.is_nan() || x == f32::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f32::from_bits(1);
    }
    let bits = x.to_bits();
    f32::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

fn next_down(x: f32) -> f32 {
    -next_up(-x)
}

/// Relative tolerance under which two split gains count as tied.
pub(crate) const TIE_TOLERANCE: f64 = 1e-10;

struct Grower<'a> {
    data: &'a Presorted,
    y: &'a [f64],
    w: &'a [u32],
    params: &'a CartParams,
    orders: Vec<Vec<u32>>,
    go_left: Vec<bool>,
    scratch: Vec<u32>,
    nodes: Vec<Node>,
    rng: Option<&'a mut ChaCha8Rng>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    /// Number of order positions that go left.
    left_len: usize,
    gain: f64,
}

impl Grower<'_> {
    fn build(&mut self, start: usize, end: usize, depth: usize) -> u32 {
        let (mut wsum, mut ysum) = (0.0f64, 0.0f64);
        for &r in &self.orders[0][start..end] {
            let w = self.w[r as usize] as f64;
            wsum += w;
            ysum += w * self.y[r as usize];
        }
        // leaf values live in single precision, like split thresholds
        let value = (ysum / wsum) as f32 as f64;
        let idx = self.nodes.len() as u32;
        let n_samples = wsum as u32;
        let p = self.params;
        let can_split = depth < p.max_depth && wsum >= p.min_samples_split as f64 && wsum >= 2.0 * p.min_samples_leaf.max(1) as f64;
        let best = if can_split { self.best_split(start, end, wsum, ysum) } else { None };
        let Some(best) = best else {
            self.nodes.push(Node::Leaf { value, n_samples });
            return idx;
        };

        let order = &self.orders[best.feature];
        for (k, &r) in order[start..end].iter().enumerate() {
            self.go_left[r as usize] = k < best.left_len;
        }
        let mid = start + best.left_len;
        for f in 0..self.orders.len() {
            let seg = &mut self.orders[f][start..end];
            self.scratch.clear();
            let mut li = 0;
            for k in 0..seg.len() {
                let r = seg[k];
                if self.go_left[r as usize] {
                    seg[li] = r;
                    li += 1;
                } else {
                    self.scratch.push(r);
                }
            }
            debug_assert_eq!(start + li, mid);
            seg[li..].copy_from_slice(&self.scratch);
        }

        self.nodes.push(Node::Split { feature: best.feature, threshold: best.threshold, left: 0, right: 0, gain: best.gain, n_samples });
        let left = self.build(start, mid, depth + 1);
        let right = self.build(mid, end, depth + 1);
        if let Node::Split { left: l, right: r, .. } = &mut self.nodes[idx as usize] {
            *l = left;
            *r = right;
        }
        idx
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let n = self.data.n_cols();
        let frac = self.params.max_features_fraction;
        if frac >= 1.0 {
            return (0..n).collect();
        }
        let k = ((n as f64 * frac).ceil() as usize).clamp(1, n);
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let mut picked = sample_indices(rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            None => (0..k).collect(),
        }
    }

    fn best_split(&mut self, start: usize, end: usize, wsum: f64, ysum: f64) -> Option<BestSplit> {
        let min_leaf = self.params.min_samples_leaf.max(1) as f64;
        let parent = ysum * ysum / wsum;
        let tol = TIE_TOLERANCE * parent.abs().max(1.0);
        let mut best: Option<BestSplit> = None;
        for f in self.candidate_features() {
            let col = &self.data.cols[f];
            let order = &self.orders[f][start..end];
            let (mut wl, mut sl) = (0.0f64, 0.0f64);
            for k in 0..order.len() - 1 {
                let r = order[k] as usize;
                let w = self.w[r] as f64;
                wl += w;
                sl += w * self.y[r];
                let a = col[r];
                let b = col[order[k + 1] as usize];
                if a.partial_cmp(&b) != Some(std::cmp::Ordering::Less) {
                    continue;
                }
                let wr = wsum - wl;
                if wl < min_leaf || wr < min_leaf {
                    continue;
                }
                let sr = ysum - sl;
                let gain = sl * sl / wl + sr * sr / wr - parent;
                let better = match &best {
                    None => gain > tol,
                    Some(b) => gain > b.gain + tol,
                };
                if better {
                    if let Some(threshold) = snap_threshold(a, b) {
                        best = Some(BestSplit { feature: f, threshold, left_len: k + 1, gain });
                    }
                }
            }
        }
        best
    }
}

/// Grows one tree on the weighted rows of `data`. Rows with weight 0 are
/// ignored.
pub(crate) fn grow(
    data: &Presorted,
    y: &[f64],
    weights: &[u32],
    params: &CartParams,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<CartTree, EnsembleError> {
    if data.n_rows() == 0 || weights.iter().all(|w| *w == 0) {
        return Err(EnsembleError::EmptyDataset);
    }
    if y.len() != data.n_rows() || weights.len() != data.n_rows() {
        return Err(EnsembleError::LengthMismatch { x: data.n_rows(), y: y.len() });
    }
    if data.n_cols() == 0 {
        let (ws, ys) = weights.iter().zip(y).fold((0.0, 0.0), |(a, b), (w, v)| (a + *w as f64, b + *w as f64 * v));
        return Ok(CartTree::leaf((ys / ws) as f32 as f64, ws as u32));
    }
    let orders: Vec<Vec<u32>> = data.sorted.iter().map(|o| o.iter().copied().filter(|&r| weights[r as usize] > 0).collect()).collect();
    let n_active = orders[0].len();
    let mut g = Grower {
        data,
        y,
        w: weights,
        params,
        orders,
        go_left: vec![false; data.n_rows()],
        scratch: Vec::with_capacity(n_active),
        nodes: Vec::new(),
        rng,
    };
    g.build(0, n_active, 0);
    Ok(CartTree { nodes: g.nodes })
}

/// Fits a single regression tree on every row of `x` (already standardized).
pub fn fit_cart(x: &Matrix, y: &[f64], params: &CartParams) -> Result<CartTree, EnsembleError> {
    if x.n_rows() == 0 {
        return Err(EnsembleError::EmptyDataset);
    }
    if x.n_rows() != y.len() {
        return Err(EnsembleError::LengthMismatch { x: x.n_rows(), y: y.len() });
    }
    let data = Presorted::new(x);
    grow(&data, y, &vec![1; x.n_rows()], params, None)
}
