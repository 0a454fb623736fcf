//! Convolutional kernel over decision trees.
//!
//! Two internal nodes match when they split on the same feature. The number
//! of common rooted subtrees at a node pair obeys
//!
//! ```text
//! C(v, v') = 0                                  if s(v) != s(v')
//! C(v, v') = prod_{c in {left, right}} (1 + C(v_c, v'_c))   otherwise
//! ```
//!
//! where any pair involving a leaf contributes `C = 0`. The tree kernel is
//! `k(T, T') = sum_{v, v'} x(v) x(v') C(v, v')` over internal-node pairs,
//! with `x(v)` the split value.

use std::cmp::Ordering;
use std::io::Write;
use std::ops::{Add, Mul};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{serialize_tree, DecisionTree, EstimatorId, TreeNode};

/// Internal nodes in post-order, so every child index is smaller than its parent's.
#[derive(Debug, Clone)]
pub struct FlatTree {
    features: Vec<usize>,
    values: Vec<f64>,
    left: Vec<Option<usize>>,
    right: Vec<Option<usize>>,
    /// `by_feature[f]` lists the nodes splitting on `f`, ascending.
    by_feature: Vec<Vec<usize>>,
}

impl FlatTree {
    pub fn new(root: &TreeNode) -> Self {
        let mut flat = FlatTree {
            features: Vec::new(),
            values: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            by_feature: Vec::new(),
        };
        flat.push(root);
        let max_feature = flat.features.iter().copied().max().map_or(0, |f| f + 1);
        flat.by_feature = vec![Vec::new(); max_feature];
        for (i, &f) in flat.features.iter().enumerate() {
            flat.by_feature[f].push(i);
        }
        flat
    }

    fn push(&mut self, node: &TreeNode) -> Option<usize> {
        match node {
            TreeNode::Leaf { .. } => None,
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                let l = self.push(left);
                let r = self.push(right);
                self.features.push(*feature);
                self.values.push(*threshold);
                self.left.push(l);
                self.right.push(r);
                Some(self.features.len() - 1)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Index of the root in post-order, if the tree has any split.
    pub fn root(&self) -> Option<usize> {
        self.len().checked_sub(1)
    }

    fn same_feature(&self, f: usize) -> &[usize] {
        self.by_feature.get(f).map_or(&[], |v| v.as_slice())
    }
}

/// Numeric type for subtree counts.
trait Count: Copy + Add<Output = Self> + Mul<Output = Self> {
    const ZERO: Self;
    const ONE: Self;
}

impl Count for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
}

/// Saturates at `u128::MAX` instead of overflowing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sat(u128);

impl Add for Sat {
    type Output = Sat;
    fn add(self, o: Sat) -> Sat {
        Sat(self.0.saturating_add(o.0))
    }
}

impl Mul for Sat {
    type Output = Sat;
    fn mul(self, o: Sat) -> Sat {
        Sat(self.0.saturating_mul(o.0))
    }
}

impl Count for Sat {
    const ZERO: Sat = Sat(0);
    const ONE: Sat = Sat(1);
}

/// Full `|a| x |b|` table of common-subtree counts, row-major in `a`.
fn count_table<T: Count>(a: &FlatTree, b: &FlatTree) -> Vec<T> {
    let nb = b.len();
    let mut table = vec![T::ZERO; a.len() * nb];
    for i in 0..a.len() {
        for &j in b.same_feature(a.features[i]) {
            let mut c = T::ONE;
            if let (Some(ci), Some(cj)) = (a.left[i], b.left[j]) {
                c = c * (T::ONE + table[ci * nb + cj]);
            }
            if let (Some(ci), Some(cj)) = (a.right[i], b.right[j]) {
                c = c * (T::ONE + table[ci * nb + cj]);
            }
            table[i * nb + j] = c;
        }
    }
    table
}

fn root_index(node: &TreeNode) -> Result<FlatTree> {
    if node.is_leaf() {
        return Err(Error::InvalidArgument("common subtrees are defined on internal nodes".into()));
    }
    Ok(FlatTree::new(node))
}

/// Number of common labelled subtrees rooted at both `v` and `v2`. Counts
/// saturate at `u128::MAX`.
pub fn common_subtree_count(v: &TreeNode, v2: &TreeNode) -> Result<u128> {
    let a = root_index(v)?;
    let b = root_index(v2)?;
    let table = count_table::<Sat>(&a, &b);
    Ok(table[a.root().unwrap() * b.len() + b.root().unwrap()].0)
}

/// The node kernel `h(v)^T h(v')`, identical to [`common_subtree_count`].
pub fn node_kernel(v: &TreeNode, v2: &TreeNode) -> Result<u128> {
    common_subtree_count(v, v2)
}

/// Unweighted kernel: the node kernel summed over all internal-node pairs.
pub fn tree_kernel_unweighted(t: &DecisionTree, t2: &DecisionTree) -> u128 {
    let a = FlatTree::new(&t.root);
    let b = FlatTree::new(&t2.root);
    count_table::<Sat>(&a, &b).into_iter().fold(Sat(0), |s, c| s + c).0
}

/// A tree flattened once for repeated kernel evaluations.
#[derive(Debug, Clone)]
pub struct PreparedTree {
    flat: FlatTree,
    key: Vec<u8>,
}

impl PreparedTree {
    pub fn new(tree: &DecisionTree) -> Self {
        Self::with_scales(tree, None)
    }

    /// Divides each split value by `scales[feature]` before flattening.
    pub fn with_scales(tree: &DecisionTree, scales: Option<&[f64]>) -> Self {
        let root = match scales {
            Some(s) => tree.root.map_thresholds(&|f, x| x / s.get(f).copied().unwrap_or(1.0)),
            None => tree.root.clone(),
        };
        let scaled = DecisionTree {
            id: tree.id,
            root,
            d: tree.d,
        };
        Self {
            flat: FlatTree::new(&scaled.root),
            key: serialize_tree(&scaled),
        }
    }

    pub fn flat(&self) -> &FlatTree {
        &self.flat
    }
}

fn weighted_sum(a: &FlatTree, b: &FlatTree) -> f64 {
    let table = count_table::<f64>(a, b);
    let nb = b.len();
    let mut total = 0.0;
    for i in 0..a.len() {
        for &j in b.same_feature(a.features[i]) {
            total += a.values[i] * b.values[j] * table[i * nb + j];
        }
    }
    total
}

/// Weighted kernel on prepared trees. The pair is put in a canonical order
/// first so that `k(a, b)` and `k(b, a)` are bit-identical.
pub fn kernel_prepared(a: &PreparedTree, b: &PreparedTree) -> f64 {
    match a.key.cmp(&b.key) {
        Ordering::Greater => weighted_sum(&b.flat, &a.flat),
        _ => weighted_sum(&a.flat, &b.flat),
    }
}

/// `k(T, T') = sum x(v) x(v') C(v, v')` with the linear split-value kernel.
pub fn tree_kernel(t: &DecisionTree, t2: &DecisionTree) -> f64 {
    kernel_prepared(&PreparedTree::new(t), &PreparedTree::new(t2))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Per-feature scales; split values are divided by them when present.
    pub standardize: Option<Vec<f64>>,
    /// Cosine normalisation `k / sqrt(k(T,T) k(T',T'))`.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    ids: Vec<EstimatorId>,
}

impl GramMatrix {
    pub fn from_entries(entries: DMatrix<f64>, ids: Vec<EstimatorId>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{}x{} matrix for {} ids",
                entries.nrows(),
                entries.ncols(),
                ids.len()
            )));
        }
        let scale = entries.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for i in 0..entries.nrows() {
            for j in 0..i {
                if (entries[(i, j)] - entries[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { entries, ids })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[EstimatorId] {
        &self.ids
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn max_diagonal(&self) -> f64 {
        self.entries.diagonal().iter().fold(0.0f64, |a, &x| a.max(x))
    }

    /// `(min, max)` eigenvalues.
    pub fn eigen_range(&self) -> (f64, f64) {
        if self.n() == 0 {
            return (0.0, 0.0);
        }
        let eig = SymmetricEigen::new(self.entries.clone()).eigenvalues;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }

    /// Accepts when the smallest eigenvalue is at least `-rel_tol` times the largest.
    pub fn check_psd(&self, rel_tol: f64) -> Result<()> {
        let (min, max) = self.eigen_range();
        if min < -rel_tol * max.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: min,
                max_eigenvalue: max,
            });
        }
        Ok(())
    }

    /// Principal submatrix on `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> GramMatrix {
        let n = rows.len();
        let entries = DMatrix::from_fn(n, n, |i, j| self.entries[(rows[i], rows[j])]);
        GramMatrix {
            entries,
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string()];
        header.extend(self.ids.iter().map(|id| format!("{}:{}", id.origin.0, id.counter)));
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut row = vec![format!("{}:{}", id.origin.0, id.counter)];
            row.extend((0..self.n()).map(|j| format!("{:e}", self.entries[(i, j)])));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<gram csv>", e))?;
        Ok(())
    }
}

/// Assembles the Gram matrix of `trees`, computing each `i <= j` entry once.
pub fn gram(trees: &[DecisionTree], cfg: &KernelConfig) -> GramMatrix {
    let prepared: Vec<PreparedTree> = trees
        .par_iter()
        .map(|t| PreparedTree::with_scales(t, cfg.standardize.as_deref()))
        .collect();
    let n = trees.len();
    let mut entries = DMatrix::zeros(n, n);
    let upper: Vec<(usize, usize, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let prepared = &prepared;
            (i..n).map(move |j| (i, j, kernel_prepared(&prepared[i], &prepared[j])))
        })
        .collect();
    for (i, j, k) in upper {
        entries[(i, j)] = k;
        entries[(j, i)] = k;
    }
    if cfg.normalize {
        normalize_in_place(&mut entries);
    }
    GramMatrix {
        entries,
        ids: trees.iter().map(|t| t.id).collect(),
    }
}

pub(crate) fn normalize_in_place(entries: &mut DMatrix<f64>) {
    let diag: Vec<f64> = entries.diagonal().iter().copied().collect();
    let n = diag.len();
    for i in 0..n {
        for j in 0..n {
            let denom = (diag[i] * diag[j]).sqrt();
            entries[(i, j)] = if denom > 0.0 { entries[(i, j)] / denom } else { 0.0 };
        }
    }
}

/// Brute-force enumeration used to validate the recursion.
pub mod oracle {
    use std::collections::{BTreeMap, BTreeSet};

    use crate::error::{Error, Result};
    use crate::tree::{DecisionTree, TreeNode};

    pub const MAX_ORACLE_INTERNAL: usize = 20;

    /// Every rooted subtree at `v`: the root's label, and for each child
    /// position either a cut (`_`) or one subtree rooted at that child.
    fn rooted_subtrees(v: &TreeNode) -> Vec<String> {
        match v {
            TreeNode::Leaf { .. } => Vec::new(),
            TreeNode::Internal {
                feature, left, right, ..
            } => {
                let mut lefts = vec!["_".to_string()];
                lefts.extend(rooted_subtrees(left));
                let mut rights = vec!["_".to_string()];
                rights.extend(rooted_subtrees(right));
                let mut out = Vec::with_capacity(lefts.len() * rights.len());
                for l in &lefts {
                    for r in &rights {
                        out.push(format!("s{feature}({l},{r})"));
                    }
                }
                out
            }
        }
    }

    pub fn subtree_set(v: &TreeNode) -> Result<BTreeSet<String>> {
        if v.internal_count() > MAX_ORACLE_INTERNAL {
            return Err(Error::InvalidArgument(format!(
                "oracle limited to {MAX_ORACLE_INTERNAL} internal nodes"
            )));
        }
        Ok(rooted_subtrees(v).into_iter().collect())
    }

    /// The explicit set of subtrees rooted at both `v` and `v2`.
    pub fn enumerate_common_subtrees(v: &TreeNode, v2: &TreeNode) -> Result<BTreeSet<String>> {
        let a = subtree_set(v)?;
        let b = subtree_set(v2)?;
        Ok(a.intersection(&b).cloned().collect())
    }

    /// All internal nodes of a tree, pre-order.
    pub fn internal_nodes(root: &TreeNode) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            if let TreeNode::Internal { left, right, .. } = n {
                out.push(n);
                stack.push(right);
                stack.push(left);
            }
        }
        out
    }

    /// Explicit weighted feature map `sum_v x(v) h(v)`, keyed by subtree.
    pub fn feature_map(tree: &DecisionTree) -> Result<BTreeMap<String, f64>> {
        let mut map = BTreeMap::new();
        for v in internal_nodes(&tree.root) {
            let TreeNode::Internal { threshold, .. } = v else { unreachable!() };
            for t in subtree_set(v)? {
                *map.entry(t).or_insert(0.0) += threshold;
            }
        }
        Ok(map)
    }

    pub fn explicit_kernel(a: &DecisionTree, b: &DecisionTree) -> Result<f64> {
        let fa = feature_map(a)?;
        let fb = feature_map(b)?;
        Ok(fa.iter().filter_map(|(k, x)| fb.get(k).map(|y| x * y)).sum())
    }
}
