//! The ensemble classifier and its three atomic mutations: `add` (union by
//! estimator id), `get_top` (ranked prefix), and `crop` (ranked truncation).

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{p_greedy_rank_with, RankingOptions};
use crate::tree::{deserialize_tree, predict_tree, serialize_tree, DecisionTree, EstimatorId};
use crate::treekernel::{kernel_prepared, normalize_in_place, GramMatrix, KernelConfig, PreparedTree};

/// Everything needed to order an ensemble's members.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ranker {
    pub kernel: KernelConfig,
    pub options: RankingOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    #[default]
    Average,
    Majority,
}

/// Raw (unnormalised) kernel values for a prefix of the members.
#[derive(Debug, Clone)]
struct KernelCache {
    config: KernelConfig,
    prepared: Vec<PreparedTree>,
    entries: DMatrix<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Ensemble {
    members: Vec<DecisionTree>,
    n_max_hint: Option<usize>,
    ranked: bool,
    cache: Option<KernelCache>,
}

impl PartialEq for Ensemble {
    fn eq(&self, other: &Self) -> bool {
        self.members == other.members
    }
}

impl Ensemble {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_hint(n_max: usize) -> Self {
        Self {
            n_max_hint: Some(n_max),
            ..Self::default()
        }
    }

    pub fn from_trees(trees: impl IntoIterator<Item = DecisionTree>) -> Self {
        let mut e = Self::new();
        e.add(trees);
        e
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[DecisionTree] {
        &self.members
    }

    pub fn ids(&self) -> Vec<EstimatorId> {
        self.members.iter().map(|t| t.id).collect()
    }

    pub fn contains(&self, id: EstimatorId) -> bool {
        self.members.iter().any(|t| t.id == id)
    }

    pub fn capacity_hint(&self) -> Option<usize> {
        self.n_max_hint
    }

    /// Whether the member order is the result of a ranking.
    pub fn is_ranked(&self) -> bool {
        self.ranked
    }

    /// Union by estimator id: incoming trees whose id is already present
    /// (or repeated within `new`) are dropped. Returns how many were added.
    pub fn add(&mut self, new: impl IntoIterator<Item = DecisionTree>) -> usize {
        let mut seen: HashSet<EstimatorId> = self.members.iter().map(|t| t.id).collect();
        let before = self.members.len();
        for tree in new {
            if seen.insert(tree.id) {
                self.members.push(tree);
            }
        }
        let added = self.members.len() - before;
        if added > 0 {
            self.ranked = false;
        }
        added
    }

    pub fn predict(&self, x: &[f64], mode: PredictionMode) -> Result<f64> {
        if self.members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let n = self.members.len() as f64;
        match mode {
            PredictionMode::Average => {
                let mut sum = 0.0;
                for t in &self.members {
                    sum += predict_tree(t, x)?;
                }
                Ok(sum / n)
            }
            PredictionMode::Majority => {
                let mut votes = 0usize;
                for t in &self.members {
                    if predict_tree(t, x)? > 0.5 {
                        votes += 1;
                    }
                }
                Ok(votes as f64 / n)
            }
        }
    }

    pub fn predict_batch(&self, rows: &[Vec<f64>], mode: PredictionMode) -> Result<Vec<f64>> {
        rows.par_iter().map(|x| self.predict(x, mode)).collect()
    }

    /// Anomalous iff the score exceeds 0.5.
    pub fn classify(&self, x: &[f64], mode: PredictionMode) -> Result<bool> {
        Ok(self.predict(x, mode)? > 0.5)
    }

    fn ensure_cache(&mut self, cfg: &KernelConfig) {
        if self.cache.as_ref().is_some_and(|c| &c.config != cfg) {
            self.cache = None;
        }
        let cache = self.cache.get_or_insert_with(|| KernelCache {
            config: cfg.clone(),
            prepared: Vec::new(),
            entries: DMatrix::zeros(0, 0),
        });
        let have = cache.prepared.len();
        let n = self.members.len();
        if have == n {
            return;
        }
        let fresh: Vec<PreparedTree> = self.members[have..]
            .par_iter()
            .map(|t| PreparedTree::with_scales(t, cfg.standardize.as_deref()))
            .collect();
        cache.prepared.extend(fresh);
        let prepared = &cache.prepared;
        let rows: Vec<Vec<f64>> = (have..n)
            .into_par_iter()
            .map(|i| (0..=i).map(|j| kernel_prepared(&prepared[i], &prepared[j])).collect())
            .collect();
        let mut entries = DMatrix::zeros(n, n);
        entries.view_mut((0, 0), (have, have)).copy_from(&cache.entries);
        for (r, row) in rows.into_iter().enumerate() {
            let i = have + r;
            for (j, k) in row.into_iter().enumerate() {
                entries[(i, j)] = k;
                entries[(j, i)] = k;
            }
        }
        cache.entries = entries;
    }

    /// Gram matrix of the current members, in member order.
    pub fn gram(&mut self, cfg: &KernelConfig) -> GramMatrix {
        self.ensure_cache(cfg);
        let mut entries = self.cache.as_ref().unwrap().entries.clone();
        if cfg.normalize {
            normalize_in_place(&mut entries);
        }
        GramMatrix::from_entries(entries, self.ids()).expect("cached kernel matrix is symmetric")
    }

    fn reorder(&mut self, order: &[usize]) {
        let mut slots: Vec<Option<DecisionTree>> = self.members.drain(..).map(Some).collect();
        self.members = order.iter().map(|&i| slots[i].take().unwrap()).collect();
        if let Some(cache) = &mut self.cache {
            let n = order.len();
            cache.entries = DMatrix::from_fn(n, n, |i, j| cache.entries[(order[i], order[j])]);
            cache.prepared = order.iter().map(|&i| cache.prepared[i].clone()).collect();
        }
    }

    /// Ranks all members and stores them in ranked order, unless the current
    /// order already is one.
    pub fn rank(&mut self, ranker: &Ranker) -> Result<()> {
        if self.ranked || self.members.is_empty() {
            self.ranked = true;
            return Ok(());
        }
        let gram = self.gram(&ranker.kernel);
        let ranking = p_greedy_rank_with(&gram, gram.n(), ranker.options)?;
        self.reorder(&ranking.indices);
        self.ranked = true;
        Ok(())
    }

    /// The first `min(k, n)` members in ranking order.
    pub fn get_top(&mut self, k: usize, ranker: &Ranker) -> Result<Vec<DecisionTree>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        self.rank(ranker)?;
        Ok(self.members[..k.min(self.members.len())].to_vec())
    }

    /// Keeps only the `k` best-ranked members.
    pub fn crop(&mut self, k: usize, ranker: &Ranker) -> Result<()> {
        if k == 0 {
            return Err(Error::InvalidArgument("crop size must be at least 1".into()));
        }
        self.rank(ranker)?;
        if self.members.len() > k {
            self.members.truncate(k);
            if let Some(cache) = &mut self.cache {
                cache.prepared.truncate(k);
                cache.entries = cache.entries.view((0, 0), (k, k)).into_owned();
            }
        }
        Ok(())
    }

    /// Writes the canonical tree encodings plus a manifest.
    pub fn save(&self, path: impl AsRef<Path>, round: Option<u32>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_container(round)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, EnsembleManifest)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_container(&bytes)
    }

    pub fn to_container(&self, round: Option<u32>) -> Vec<u8> {
        let manifest = EnsembleManifest {
            ids: self.ids(),
            ranked: self.ranked,
            round,
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.members {
            let bytes = serialize_tree(t);
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_container(bytes: &[u8]) -> Result<(Self, EnsembleManifest)> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<(usize, &[u8])> {
            if bytes.len() - pos < n {
                return Err(Error::malformed(pos, "truncated ensemble container"));
            }
            let at = pos;
            pos += n;
            Ok((at, &bytes[at..at + n]))
        };
        if take(4)?.1 != CONTAINER_MAGIC {
            return Err(Error::malformed(0, "bad ensemble magic"));
        }
        let len = u32::from_le_bytes(take(4)?.1.try_into().unwrap()) as usize;
        let manifest: EnsembleManifest = serde_json::from_slice(take(len)?.1)?;
        let mut members = Vec::with_capacity(manifest.ids.len());
        for id in &manifest.ids {
            let len = u32::from_le_bytes(take(4)?.1.try_into().unwrap()) as usize;
            let (at, raw) = take(len)?;
            let tree = deserialize_tree(raw).map_err(|e| match e {
                Error::Malformed { offset, reason } => Error::malformed(at + offset, reason),
                other => other,
            })?;
            if tree.id != *id {
                return Err(Error::malformed(at, format!("tree id {} does not match manifest {id}", tree.id)));
            }
            members.push(tree);
        }
        if take(1).is_ok() {
            return Err(Error::malformed(bytes.len(), "trailing bytes in ensemble container"));
        }
        let ensemble = Ensemble {
            members,
            n_max_hint: None,
            ranked: manifest.ranked,
            cache: None,
        };
        Ok((ensemble, manifest))
    }
}

const CONTAINER_MAGIC: &[u8; 4] = b"FENS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub ids: Vec<EstimatorId>,
    pub ranked: bool,
    pub round: Option<u32>,
}
