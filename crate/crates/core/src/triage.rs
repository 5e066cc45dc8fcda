//! Protect / merge / evict triage of standardized scores and the split of a
//! layer's reduction budget between the evict and merge channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::ImportanceScores;

/// Level sets of the scores, as ascending population rows.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LevelSets {
    pub protect: Vec<usize>,
    pub merge_pool: Vec<usize>,
    pub evict_pool: Vec<usize>,
}

impl LevelSets {
    pub fn n_patches(&self) -> usize {
        self.protect.len() + self.merge_pool.len() + self.evict_pool.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriagePartition {
    pub protect: Vec<usize>,
    pub merge_pool: Vec<usize>,
    pub evict_pool: Vec<usize>,
    pub r_e: usize,
    pub r_m: usize,
}

impl TriagePartition {
    pub fn new(sets: LevelSets, r_e: usize, r_m: usize) -> Self {
        TriagePartition {
            protect: sets.protect,
            merge_pool: sets.merge_pool,
            evict_pool: sets.evict_pool,
            r_e,
            r_m,
        }
    }

    pub fn r(&self) -> usize {
        self.r_e + self.r_m
    }

    /// Fraction of patch tokens that are protected.
    pub fn protected_fraction(&self) -> f64 {
        let n = self.protect.len() + self.merge_pool.len() + self.evict_pool.len();
        self.protect.len() as f64 / n as f64
    }
}

/// `P = {s > τ}`, `E = {s < −τ}`, `M` = the rest (boundary values included).
pub fn partition(scores: &ImportanceScores, tau: f64) -> Result<LevelSets> {
    if !scores.standardized {
        return Err(Error::Contract("triage requires standardized scores".into()));
    }
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::validation(format!("tau must be >= 0, got {tau}")));
    }
    let mut sets = LevelSets::default();
    for (&s, &row) in scores.values.iter().zip(&scores.rows) {
        if s > tau {
            sets.protect.push(row);
        } else if s < -tau {
            sets.evict_pool.push(row);
        } else {
            sets.merge_pool.push(row);
        }
    }
    sets.protect.sort_unstable();
    sets.merge_pool.sort_unstable();
    sets.evict_pool.sort_unstable();
    Ok(sets)
}

/// `r_e = min(⌊ρ r⌋, |E|)`, `r_m = r − r_e`.
pub fn allocate(sets: &LevelSets, r: usize, evict_ratio: f64) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&evict_ratio) {
        return Err(Error::validation(format!("evict_ratio must lie in [0, 1], got {evict_ratio}")));
    }
    let n = sets.n_patches();
    if r >= n {
        return Err(Error::validation(format!("budget r = {r} must be below the {n} patch tokens")));
    }
    let wanted = (evict_ratio * r as f64 + 1e-9).floor() as usize;
    let r_e = wanted.min(sets.evict_pool.len()).min(r);
    Ok((r_e, r - r_e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_scores(v: Vec<f64>) -> ImportanceScores {
        ImportanceScores {
            standardized: true,
            ..ImportanceScores::raw(v)
        }
    }

    #[test]
    fn direct_level_sets() {
        let s = partition(&std_scores(vec![2.0, 0.1, -0.5, -2.0]), 1.0).unwrap();
        assert_eq!(s.protect, vec![0]);
        assert_eq!(s.merge_pool, vec![1, 2]);
        assert_eq!(s.evict_pool, vec![3]);
    }

    #[test]
    fn boundary_is_merge() {
        let s = partition(&std_scores(vec![1.0, -1.0, 0.0]), 1.0).unwrap();
        assert_eq!(s.merge_pool, vec![0, 1, 2]);
        let all = partition(&std_scores(vec![0.0; 4]), 0.0).unwrap();
        assert_eq!(all.merge_pool.len(), 4);
        let inf = partition(&std_scores(vec![5.0, -5.0]), f64::INFINITY).unwrap();
        assert_eq!(inf.merge_pool, vec![0, 1]);
    }

    #[test]
    fn raw_scores_rejected() {
        assert!(matches!(partition(&ImportanceScores::raw(vec![0.0, 1.0]), 1.0), Err(Error::Contract(_))));
    }

    fn sets_with_evict(e: usize, total: usize) -> LevelSets {
        LevelSets {
            protect: vec![],
            merge_pool: (e..total).collect(),
            evict_pool: (0..e).collect(),
        }
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate(&sets_with_evict(3, 40), 10, 0.5).unwrap(), (3, 7));
        assert_eq!(allocate(&sets_with_evict(20, 40), 10, 0.5).unwrap(), (5, 5));
        assert_eq!(allocate(&sets_with_evict(20, 40), 10, 0.0).unwrap(), (0, 10));
        assert_eq!(allocate(&sets_with_evict(50, 200), 100, 0.29).unwrap(), (29, 71));
        assert!(allocate(&sets_with_evict(2, 10), 10, 0.5).is_err());
    }
}
