//! CART decision trees with bootstrap sampling and feature bagging, plus
//! their canonical byte encoding.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::seeding::rng_from;

/// Identifier of a federation participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Node{:02}", self.0)
    }
}

/// Globally unique estimator label: the creating node plus its private counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EstimatorId {
    pub origin: NodeId,
    pub counter: u64,
}

impl EstimatorId {
    pub fn new(origin: NodeId, counter: u64) -> Self {
        Self { origin, counter }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.origin, self.counter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Internal {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        score: f64,
    },
}

impl TreeNode {
    pub fn leaf(score: f64) -> Self {
        TreeNode::Leaf { score }
    }

    pub fn split(feature: usize, threshold: f64, left: TreeNode, right: TreeNode) -> Self {
        TreeNode::Internal {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    pub fn internal_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.internal_count() + right.internal_count(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Applies `f` to every split value, leaving structure and leaves intact.
    pub fn map_thresholds(&self, f: &impl Fn(usize, f64) -> f64) -> TreeNode {
        match self {
            TreeNode::Leaf { score } => TreeNode::Leaf { score: *score },
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
            } => TreeNode::split(
                *feature,
                f(*feature, *threshold),
                left.map_thresholds(f),
                right.map_thresholds(f),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub id: EstimatorId,
    pub root: TreeNode,
    pub d: usize,
}

impl DecisionTree {
    pub fn new(id: EstimatorId, root: TreeNode, d: usize) -> Result<Self> {
        validate_node(&root, d, 0)?;
        Ok(Self { id, root, d })
    }

    pub fn internal_count(&self) -> usize {
        self.root.internal_count()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        predict_tree(self, x)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serialize_tree(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trees always serialize")
    }
}

fn validate_node(node: &TreeNode, d: usize, offset: usize) -> Result<()> {
    match node {
        TreeNode::Leaf { score } => {
            if !(0.0..=1.0).contains(score) {
                return Err(Error::malformed(offset, format!("leaf score {score} outside [0, 1]")));
            }
        }
        TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
        } => {
            if *feature >= d {
                return Err(Error::malformed(offset, format!("feature {feature} >= d = {d}")));
            }
            if !threshold.is_finite() {
                return Err(Error::malformed(offset, "non-finite split value"));
            }
            validate_node(left, d, offset)?;
            validate_node(right, d, offset)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    None,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeTrainConfig {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features examined per split; `None` means `ceil(sqrt(d))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
}

impl Default for TreeTrainConfig {
    fn default() -> Self {
        Self {
            max_depth: 10,
            min_samples_leaf: 5,
            features_per_split: None,
            bootstrap: true,
            class_weighting: ClassWeighting::Balanced,
            seed: 0,
        }
    }
}

impl TreeTrainConfig {
    pub fn features_for(&self, d: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::Config("max_depth and min_samples_leaf must be positive".into()));
        }
        if let Some(f) = self.features_per_split {
            if f == 0 || f > d {
                return Err(Error::Config(format!("features_per_split {f} not in 1..={d}")));
            }
        }
        Ok(())
    }
}

/// Draws `m` rows uniformly with replacement.
pub fn bootstrap_sample(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng_from(seed, &[0x424f]);
    let m = ds.len();
    let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..m)).collect();
    Ok(ds.select(&idx))
}

pub fn fit_tree(train: &LabeledDataset, cfg: &TreeTrainConfig, id: EstimatorId) -> Result<DecisionTree> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = train.dim();
    cfg.validate(d)?;
    let sample;
    let data = if cfg.bootstrap {
        sample = bootstrap_sample(train, cfg.seed)?;
        &sample
    } else {
        train
    };

    let weights = class_weights(data, cfg.class_weighting);
    let mut grower = Grower {
        data,
        weights,
        cfg,
        n_features: cfg.features_for(d),
        rng: rng_from(cfg.seed, &[0x4652]),
    };
    let indices: Vec<usize> = (0..data.len()).collect();
    let root = grower.grow(indices, 0);
    Ok(DecisionTree { id, root, d })
}

fn class_weights(ds: &LabeledDataset, weighting: ClassWeighting) -> [f64; 2] {
    match weighting {
        ClassWeighting::None => [1.0, 1.0],
        ClassWeighting::Balanced => {
            let pos = ds.positives();
            let neg = ds.len() - pos;
            if pos == 0 || neg == 0 {
                return [1.0, 1.0];
            }
            let m = ds.len() as f64;
            [m / (2.0 * neg as f64), m / (2.0 * pos as f64)]
        }
    }
}

struct Grower<'a> {
    data: &'a LabeledDataset,
    weights: [f64; 2],
    cfg: &'a TreeTrainConfig,
    n_features: usize,
    rng: ChaCha8Rng,
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn gini(w_neg: f64, w_pos: f64) -> f64 {
    let w = w_neg + w_pos;
    if w <= 0.0 {
        return 0.0;
    }
    let p = w_pos / w;
    2.0 * p * (1.0 - p)
}

impl Grower<'_> {
    fn weighted_counts(&self, indices: &[usize]) -> (f64, f64) {
        let labels = self.data.labels();
        indices.iter().fold((0.0, 0.0), |(neg, pos), &i| {
            if labels[i] == 1 {
                (neg, pos + self.weights[1])
            } else {
                (neg + self.weights[0], pos)
            }
        })
    }

    fn grow(&mut self, indices: Vec<usize>, depth: usize) -> TreeNode {
        let (w_neg, w_pos) = self.weighted_counts(&indices);
        let score = if w_neg + w_pos > 0.0 { w_pos / (w_neg + w_pos) } else { 0.0 };
        if depth >= self.cfg.max_depth
            || w_neg == 0.0
            || w_pos == 0.0
            || indices.len() < 2 * self.cfg.min_samples_leaf
        {
            return TreeNode::leaf(score);
        }
        let Some(split) = self.best_split(&indices, w_neg, w_pos) else {
            return TreeNode::leaf(score);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = indices
            .into_iter()
            .partition(|&i| self.data.row(i)[split.feature] <= split.threshold);
        let left = self.grow(left, depth + 1);
        let right = self.grow(right, depth + 1);
        TreeNode::split(split.feature, split.threshold, left, right)
    }

    fn best_split(&mut self, indices: &[usize], w_neg: f64, w_pos: f64) -> Option<Split> {
        let d = self.data.dim();
        let mut features = sample(&mut self.rng, d, self.n_features).into_vec();
        features.sort_unstable();

        let parent = (w_neg + w_pos) * gini(w_neg, w_pos);
        let min_leaf = self.cfg.min_samples_leaf;
        let labels = self.data.labels();
        let n = indices.len();
        let mut best: Option<Split> = None;
        let mut column: Vec<(f64, u8)> = Vec::with_capacity(n);

        for feature in features {
            column.clear();
            column.extend(indices.iter().map(|&i| (self.data.row(i)[feature], labels[i])));
            column.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

            let (mut l_neg, mut l_pos) = (0.0, 0.0);
            for k in 0..n - 1 {
                if column[k].1 == 1 {
                    l_pos += self.weights[1];
                } else {
                    l_neg += self.weights[0];
                }
                let left_count = k + 1;
                if left_count < min_leaf || n - left_count < min_leaf {
                    continue;
                }
                let (lo, hi) = (column[k].0, column[k + 1].0);
                if lo >= hi {
                    continue;
                }
                let (r_neg, r_pos) = (w_neg - l_neg, w_pos - l_pos);
                let child = (l_neg + l_pos) * gini(l_neg, l_pos) + (r_neg + r_pos) * gini(r_neg, r_pos);
                let gain = parent - child;
                let better = match &best {
                    None => gain > 1e-12 * parent.max(f64::MIN_POSITIVE),
                    Some(b) => gain > b.gain * (1.0 + 1e-12),
                };
                if better {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    if threshold == 0.0 {
                        threshold = 0.0; // canonical +0.0
                    }
                    best = Some(Split { feature, threshold, gain });
                }
            }
        }
        best
    }
}

/// Routes `x` to a leaf: left when `x[feature] <= threshold`.
pub fn predict_tree(tree: &DecisionTree, x: &[f64]) -> Result<f64> {
    if x.len() != tree.d {
        return Err(Error::DimensionMismatch {
            expected: tree.d,
            got: x.len(),
        });
    }
    let mut node = &tree.root;
    loop {
        match node {
            TreeNode::Leaf { score } => return Ok(*score),
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                node = if x[*feature] <= *threshold { left } else { right };
            }
        }
    }
}

const MAGIC: &[u8; 4] = b"FTRE";
const TAG_LEAF: u8 = 0;
const TAG_INTERNAL: u8 = 1;
const MAX_DECODE_DEPTH: usize = 1024;

/// Canonical encoding: header (magic, origin u32, counter u64, d u32) followed
/// by the pre-order node sequence. Leaves are `0x00, score f64`; internal
/// nodes are `0x01, feature u32, split value f64`. All integers and floats
/// little-endian; zero is always written as `+0.0`.
pub fn serialize_tree(tree: &DecisionTree) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 13 * (2 * tree.internal_count() + 1));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&tree.id.origin.0.to_le_bytes());
    out.extend_from_slice(&tree.id.counter.to_le_bytes());
    out.extend_from_slice(&(tree.d as u32).to_le_bytes());
    encode_node(&tree.root, &mut out);
    out
}

fn canonical(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

fn encode_node(node: &TreeNode, out: &mut Vec<u8>) {
    match node {
        TreeNode::Leaf { score } => {
            out.push(TAG_LEAF);
            out.extend_from_slice(&canonical(*score).to_le_bytes());
        }
        TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
        } => {
            out.push(TAG_INTERNAL);
            out.extend_from_slice(&(*feature as u32).to_le_bytes());
            out.extend_from_slice(&canonical(*threshold).to_le_bytes());
            encode_node(left, out);
            encode_node(right, out);
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::malformed(self.pos, "unexpected end of input"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::malformed(at, "non-finite float"));
        }
        if v == 0.0 && v.is_sign_negative() {
            return Err(Error::malformed(at, "non-canonical negative zero"));
        }
        Ok(v)
    }
}

pub fn deserialize_tree(bytes: &[u8]) -> Result<DecisionTree> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::malformed(0, "bad magic"));
    }
    let origin = NodeId(cur.u32()?);
    let counter = cur.u64()?;
    let d = cur.u32()? as usize;
    let root = decode_node(&mut cur, d, 0)?;
    if cur.pos != bytes.len() {
        return Err(Error::malformed(cur.pos, "trailing bytes"));
    }
    Ok(DecisionTree {
        id: EstimatorId::new(origin, counter),
        root,
        d,
    })
}

fn decode_node(cur: &mut Cursor<'_>, d: usize, depth: usize) -> Result<TreeNode> {
    if depth > MAX_DECODE_DEPTH {
        return Err(Error::malformed(cur.pos, "tree too deep"));
    }
    let at = cur.pos;
    match cur.u8()? {
        TAG_LEAF => {
            let score_at = cur.pos;
            let score = cur.f64()?;
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::malformed(score_at, format!("leaf score {score} outside [0, 1]")));
            }
            Ok(TreeNode::Leaf { score })
        }
        TAG_INTERNAL => {
            let feat_at = cur.pos;
            let feature = cur.u32()? as usize;
            if feature >= d {
                return Err(Error::malformed(feat_at, format!("feature {feature} >= d = {d}")));
            }
            let threshold = cur.f64()?;
            let left = decode_node(cur, d, depth + 1)?;
            let right = decode_node(cur, d, depth + 1)?;
            Ok(TreeNode::split(feature, threshold, left, right))
        }
        tag => Err(Error::malformed(at, format!("unknown node tag {tag}"))),
    }
}
