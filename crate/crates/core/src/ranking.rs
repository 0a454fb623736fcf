//! Greedy ordering of trees by the power function of the Gaussian process
//! whose covariance is the tree kernel.
//!
//! At each step the candidate with the largest posterior variance, given
//! the trees already picked, is selected. Variances are updated with a
//! Newton basis, so a full ordering of `n` trees costs `O(n^2 k)`. The
//! posterior variance does not depend on observed values, so no labels are
//! needed.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::EstimatorId;
use crate::treekernel::GramMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingOptions {
    /// Stop the greedy phase once the largest residual variance drops to
    /// this fraction of the largest prior variance.
    pub rel_tolerance: f64,
    /// Relative eigenvalue slack accepted before a Gram matrix is declared indefinite.
    pub psd_tolerance: f64,
}

impl Default for RankingOptions {
    fn default() -> Self {
        Self {
            rel_tolerance: 1e-10,
            psd_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankStep {
    pub index: usize,
    pub id: EstimatorId,
    /// Posterior variance of the candidate at the moment it was picked.
    pub variance: f64,
}

impl RankStep {
    pub fn power(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Row indices into the Gram matrix, best first.
    pub indices: Vec<usize>,
    pub order: Vec<EstimatorId>,
    /// Greedy picks; indices past `steps.len()` were appended by id order
    /// after the residual variance vanished.
    pub steps: Vec<RankStep>,
}

impl Ranking {
    pub fn appended(&self) -> usize {
        self.indices.len() - self.steps.len()
    }

    pub fn write_trace<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "origin", "counter", "variance", "power"])?;
        for (s, step) in self.steps.iter().enumerate() {
            w.write_record([
                s.to_string(),
                step.id.origin.0.to_string(),
                step.id.counter.to_string(),
                format!("{:e}", step.variance),
                format!("{:e}", step.power()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<ranking trace>", e))?;
        Ok(())
    }
}

/// Incremental state of the greedy selection.
#[derive(Debug, Clone)]
pub struct GreedySelectionState<'g> {
    gram: &'g GramMatrix,
    selected: Vec<usize>,
    is_selected: Vec<bool>,
    /// Column `t` holds the `t`-th Newton basis function evaluated at every candidate.
    basis: Vec<DVector<f64>>,
    residual: Vec<f64>,
    tolerance: f64,
    opts: RankingOptions,
}

impl<'g> GreedySelectionState<'g> {
    pub fn new(gram: &'g GramMatrix, opts: RankingOptions) -> Result<Self> {
        let n = gram.n();
        let residual: Vec<f64> = (0..n).map(|i| gram.get(i, i)).collect();
        let scale = gram.max_diagonal();
        if residual.iter().any(|&r| r < -opts.psd_tolerance * scale.max(f64::MIN_POSITIVE)) {
            gram.check_psd(opts.psd_tolerance)?;
        }
        Ok(Self {
            gram,
            selected: Vec::new(),
            is_selected: vec![false; n],
            basis: Vec::new(),
            residual: residual.into_iter().map(|r| r.max(0.0)).collect(),
            tolerance: opts.rel_tolerance * scale,
            opts,
        })
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Current posterior variance of every candidate (zero for selected ones).
    pub fn residual_power(&self) -> &[f64] {
        &self.residual
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn max_residual(&self) -> f64 {
        self.candidates().map(|i| self.residual[i]).fold(0.0, f64::max)
    }

    fn candidates(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.residual.len()).filter(|&i| !self.is_selected[i])
    }

    /// Picks the next candidate, or `None` when every remaining variance is
    /// at or below the tolerance. Ties within `1e-12` of the scale go to the
    /// smallest id.
    pub fn step(&mut self) -> Result<Option<RankStep>> {
        let ids = self.gram.ids();
        let tie = 1e-12 * self.gram.max_diagonal();
        let mut best: Option<usize> = None;
        for i in self.candidates() {
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (ri, rb) = (self.residual[i], self.residual[b]);
                    if ri > rb + tie || ((ri - rb).abs() <= tie && ids[i] < ids[b]) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let Some(pick) = best else { return Ok(None) };
        let variance = self.residual[pick];
        if variance <= self.tolerance || variance <= 0.0 {
            return Ok(None);
        }

        let n = self.residual.len();
        let norm = variance.sqrt();
        let mut column = DVector::zeros(n);
        for j in 0..n {
            let mut v = self.gram.get(j, pick);
            for b in &self.basis {
                v -= b[j] * b[pick];
            }
            column[j] = v / norm;
        }
        let floor = -self.opts.psd_tolerance * self.gram.max_diagonal();
        let mut indefinite = false;
        for j in 0..n {
            if self.is_selected[j] {
                continue;
            }
            let r = self.residual[j] - column[j] * column[j];
            if r < floor {
                indefinite = true;
            }
            self.residual[j] = r.max(0.0);
        }
        if indefinite {
            self.gram.check_psd(self.opts.psd_tolerance)?;
        }
        self.residual[pick] = 0.0;
        self.is_selected[pick] = true;
        self.selected.push(pick);
        self.basis.push(column);
        Ok(Some(RankStep {
            index: pick,
            id: ids[pick],
            variance,
        }))
    }
}

/// Orders the first `min(k, n)` trees of `g`; use `k = n` for a full ranking.
pub fn p_greedy_rank(g: &GramMatrix, k: usize) -> Result<Ranking> {
    p_greedy_rank_with(g, k, RankingOptions::default())
}

pub fn p_greedy_rank_with(g: &GramMatrix, k: usize, opts: RankingOptions) -> Result<Ranking> {
    let n = g.n();
    let k = k.min(n);
    let mut state = GreedySelectionState::new(g, opts)?;
    let mut steps = Vec::with_capacity(k);
    while steps.len() < k {
        match state.step()? {
            Some(step) => steps.push(step),
            None => break,
        }
    }
    let mut indices: Vec<usize> = steps.iter().map(|s| s.index).collect();
    if indices.len() < k {
        if steps.is_empty() && n > 0 {
            warn!("all {n} trees have zero prior variance; ranking falls back to id order");
        }
        let mut rest: Vec<usize> = (0..n).filter(|i| !state.is_selected[*i]).collect();
        rest.sort_by_key(|&i| g.ids()[i]);
        indices.extend(rest.into_iter().take(k - indices.len()));
    }
    Ok(Ranking {
        order: indices.iter().map(|&i| g.ids()[i]).collect(),
        indices,
        steps,
    })
}

pub const EXACT_JITTER: f64 = 1e-10;

/// Posterior variance `k(c,c) - k_S(c)^T (K_S + jitter I)^{-1} k_S(c)` by a
/// dense Cholesky solve.
pub fn posterior_variance_exact(g: &GramMatrix, selected: &[usize], candidate: usize) -> Result<f64> {
    let prior = g.get(candidate, candidate);
    if selected.is_empty() {
        return Ok(prior);
    }
    let s = selected.len();
    let k_ss = DMatrix::from_fn(s, s, |a, b| {
        g.get(selected[a], selected[b]) + if a == b { EXACT_JITTER } else { 0.0 }
    });
    let k_sc = DVector::from_fn(s, |a, _| g.get(selected[a], candidate));
    let chol = k_ss
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("kernel submatrix on {selected:?} is not invertible")))?;
    let w = chol.solve(&k_sc);
    Ok(prior - k_sc.dot(&w))
}
