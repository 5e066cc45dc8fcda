//! Token populations, layer traces and importance-score vectors.
//!
//! Row indices are used everywhere in the crate to name tokens. When a
//! population carries a CLS token it is row 0; it has size 1, an empty
//! provenance set, and is never scored, matched, merged or evicted.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit row-sum of CLS-to-patch attention vectors.
pub const ATTENTION_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenPopulation {
    features: Array2<f64>,
    sizes: Vec<u32>,
    provenance: Vec<Vec<u32>>,
    has_cls: bool,
    original_patches: u32,
}

impl TokenPopulation {
    /// Builds a fresh population where every patch token covers exactly one
    /// original patch (row `k + offset` covers patch `k`).
    pub fn new(features: Array2<f64>, has_cls: bool) -> Result<Self> {
        let n = features.nrows();
        let offset = usize::from(has_cls);
        if n <= offset {
            return Err(Error::validation("population needs at least one patch token"));
        }
        let sizes = vec![1u32; n];
        let mut provenance = Vec::with_capacity(n);
        if has_cls {
            provenance.push(Vec::new());
        }
        for k in 0..(n - offset) {
            provenance.push(vec![k as u32]);
        }
        let original = (n - offset) as u32;
        Self::from_parts(features, sizes, provenance, has_cls, original)
    }

    pub fn from_parts(
        features: Array2<f64>,
        sizes: Vec<u32>,
        provenance: Vec<Vec<u32>>,
        has_cls: bool,
        original_patches: u32,
    ) -> Result<Self> {
        let pop = TokenPopulation {
            features,
            sizes,
            provenance,
            has_cls,
            original_patches,
        };
        pop.validate()?;
        Ok(pop)
    }

    fn validate(&self) -> Result<()> {
        let (n, d) = self.features.dim();
        let offset = usize::from(self.has_cls);
        if n <= offset {
            return Err(Error::validation("population needs at least one patch token"));
        }
        if d == 0 {
            return Err(Error::validation("feature dimension must be at least 1"));
        }
        if self.sizes.len() != n || self.provenance.len() != n {
            return Err(Error::validation(format!(
                "sizes ({}) and provenance ({}) must have one entry per token ({n})",
                self.sizes.len(),
                self.provenance.len()
            )));
        }
        if let Some((i, _)) = self.features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite feature at {i:?}")));
        }
        if self.has_cls && (self.sizes[0] != 1 || !self.provenance[0].is_empty()) {
            return Err(Error::validation("CLS row must have size 1 and empty provenance"));
        }
        let mut seen = vec![false; self.original_patches as usize];
        let mut total: u64 = 0;
        for row in offset..n {
            let prov = &self.provenance[row];
            if prov.is_empty() || self.sizes[row] as usize != prov.len() {
                return Err(Error::validation(format!(
                    "row {row}: size {} does not match provenance of {} patches",
                    self.sizes[row],
                    prov.len()
                )));
            }
            if prov.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::validation(format!("row {row}: provenance not sorted")));
            }
            for &p in prov {
                let slot = seen.get_mut(p as usize).ok_or_else(|| {
                    Error::validation(format!(
                        "row {row}: patch {p} outside original range {}",
                        self.original_patches
                    ))
                })?;
                if *slot {
                    return Err(Error::validation(format!("patch {p} appears in two tokens")));
                }
                *slot = true;
            }
            total += u64::from(self.sizes[row]);
        }
        debug_assert!(total <= u64::from(self.original_patches));
        Ok(())
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    pub fn provenance(&self) -> &[Vec<u32>] {
        &self.provenance
    }

    pub fn has_cls(&self) -> bool {
        self.has_cls
    }

    pub fn original_patches(&self) -> u32 {
        self.original_patches
    }

    pub fn n_tokens(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn first_patch_row(&self) -> usize {
        usize::from(self.has_cls)
    }

    pub fn patch_rows(&self) -> Range<usize> {
        self.first_patch_row()..self.n_tokens()
    }

    pub fn n_patches(&self) -> usize {
        self.n_tokens() - self.first_patch_row()
    }

    /// Number of original patches still represented by the patch tokens.
    pub fn total_size(&self) -> u64 {
        self.patch_rows().map(|r| u64::from(self.sizes[r])).sum()
    }

    /// Patch-token features only (CLS row dropped), as an owned matrix.
    pub fn patch_features(&self) -> Array2<f64> {
        self.features
            .slice(ndarray::s![self.first_patch_row().., ..])
            .to_owned()
    }

    /// Checks that `row` names a patch token.
    pub fn check_patch_row(&self, row: usize) -> Result<()> {
        if self.has_cls && row == 0 {
            return Err(Error::validation("the CLS token cannot be used here"));
        }
        if row >= self.n_tokens() {
            return Err(Error::validation(format!(
                "row {row} out of range for {} tokens",
                self.n_tokens()
            )));
        }
        Ok(())
    }

    /// Keeps the given rows (in the given order), leaving them bit-identical.
    pub(crate) fn select_rows(&self, rows: &[usize]) -> TokenPopulation {
        TokenPopulation {
            features: self.features.select(Axis(0), rows),
            sizes: rows.iter().map(|&r| self.sizes[r]).collect(),
            provenance: rows.iter().map(|&r| self.provenance[r].clone()).collect(),
            has_cls: self.has_cls,
            original_patches: self.original_patches,
        }
    }

    pub(crate) fn with_parts_unchecked(
        features: Array2<f64>,
        sizes: Vec<u32>,
        provenance: Vec<Vec<u32>>,
        has_cls: bool,
        original_patches: u32,
    ) -> TokenPopulation {
        let pop = TokenPopulation {
            features,
            sizes,
            provenance,
            has_cls,
            original_patches,
        };
        debug_assert!(pop.validate().is_ok());
        pop
    }

    /// Provenance is canonical when patch rows cover `0..original` with
    /// consecutive ranges in row order. Canonical provenance need not be stored.
    pub fn has_canonical_provenance(&self) -> bool {
        let mut next = 0u32;
        for row in self.patch_rows() {
            for &p in &self.provenance[row] {
                if p != next {
                    return false;
                }
                next += 1;
            }
        }
        next == self.original_patches
    }

    pub(crate) fn canonical_provenance(sizes: &[u32], has_cls: bool) -> (Vec<Vec<u32>>, u32) {
        let mut next = 0u32;
        let prov = sizes
            .iter()
            .enumerate()
            .map(|(row, &s)| {
                if has_cls && row == 0 {
                    Vec::new()
                } else {
                    let v: Vec<u32> = (next..next + s).collect();
                    next += s;
                    v
                }
            })
            .collect();
        (prov, next)
    }
}

/// One recorded layer: the token population plus optional CLS-to-patch
/// attention over its patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayer {
    pub population: TokenPopulation,
    pub cls_attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layers: Vec<TraceLayer>,
    pub depth: u32,
}

impl LayerTrace {
    pub fn new(layers: Vec<TraceLayer>, depth: u32) -> Result<Self> {
        let trace = LayerTrace { layers, depth };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation("trace has no layers"));
        }
        if self.depth == 0 {
            return Err(Error::validation("model depth must be positive"));
        }
        if self.layers.len() > self.depth as usize {
            return Err(Error::validation(format!(
                "{} layers exceed model depth {}",
                self.layers.len(),
                self.depth
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.population.validate()?;
            if let Some(att) = &layer.cls_attention {
                validate_attention(att, layer.population.n_patches())
                    .map_err(|e| Error::validation(format!("layer {l}: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Checks a CLS-to-patch attention vector: one entry per patch token, each
/// in [0, 1], summing to 1.
pub fn validate_attention(att: &[f64], n_patches: usize) -> Result<()> {
    if att.len() != n_patches {
        return Err(Error::validation(format!(
            "attention has {} entries, expected {n_patches}",
            att.len()
        )));
    }
    if att.iter().any(|a| !a.is_finite() || *a < -ATTENTION_SUM_TOL || *a > 1.0 + ATTENTION_SUM_TOL) {
        return Err(Error::validation("attention entries must lie in [0, 1]"));
    }
    let sum: f64 = att.iter().sum();
    if (sum - 1.0).abs() > ATTENTION_SUM_TOL {
        return Err(Error::validation(format!("attention sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Per-token importance scores, aligned to population rows via `rows`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub values: Vec<f64>,
    pub rows: Vec<usize>,
    pub standardized: bool,
    /// Set by z-scoring when the input had zero spread.
    pub degenerate: bool,
}

impl ImportanceScores {
    /// Raw (unstandardized) scores for rows `0..values.len()`.
    pub fn raw(values: Vec<f64>) -> Self {
        let rows = (0..values.len()).collect();
        ImportanceScores {
            values,
            rows,
            standardized: false,
            degenerate: false,
        }
    }

    pub fn with_rows(values: Vec<f64>, rows: Vec<usize>) -> Result<Self> {
        if values.len() != rows.len() {
            return Err(Error::validation("scores and rows differ in length"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite score"));
        }
        Ok(ImportanceScores {
            values,
            rows,
            standardized: false,
            degenerate: false,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows ordered by ascending score; ties keep the lower row first.
    pub fn rows_ascending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| {
            self.values[a]
                .total_cmp(&self.values[b])
                .then(self.rows[a].cmp(&self.rows[b]))
        });
        idx.into_iter().map(|i| self.rows[i]).collect()
    }

    pub fn score_of(&self, row: usize) -> Option<f64> {
        self.rows.iter().position(|&r| r == row).map(|i| self.values[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fresh_population_has_singleton_provenance() {
        let pop = TokenPopulation::new(array![[0.0, 1.0], [1.0, 2.0], [3.0, 4.0]], true).unwrap();
        assert_eq!(pop.n_patches(), 2);
        assert_eq!(pop.provenance()[0], Vec::<u32>::new());
        assert_eq!(pop.provenance()[2], vec![1]);
        assert_eq!(pop.total_size(), 2);
        assert!(pop.has_canonical_provenance());
    }

    #[test]
    fn rejects_non_finite_features() {
        let err = TokenPopulation::new(array![[0.0, f64::NAN]], false).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_overlapping_provenance() {
        let err = TokenPopulation::from_parts(
            array![[0.0], [1.0]],
            vec![1, 1],
            vec![vec![0], vec![0]],
            false,
            2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_size_provenance_mismatch() {
        assert!(TokenPopulation::from_parts(
            array![[0.0], [1.0]],
            vec![2, 1],
            vec![vec![0], vec![1]],
            false,
            3,
        )
        .is_err());
    }

    #[test]
    fn attention_must_sum_to_one() {
        assert!(validate_attention(&[0.5, 0.5], 2).is_ok());
        assert!(validate_attention(&[0.5, 0.4], 2).is_err());
        assert!(validate_attention(&[1.0], 2).is_err());
    }

    #[test]
    fn trace_depth_bounds_layer_count() {
        let pop = TokenPopulation::new(array![[0.0], [1.0]], false).unwrap();
        let layer = TraceLayer {
            population: pop,
            cls_attention: None,
        };
        assert!(LayerTrace::new(vec![layer.clone(), layer.clone()], 1).is_err());
        assert!(LayerTrace::new(vec![], 1).is_err());
        assert!(LayerTrace::new(vec![layer], 1).is_ok());
    }

    #[test]
    fn ascending_rows_break_ties_by_row() {
        let s = ImportanceScores::with_rows(vec![1.0, 0.0, 1.0, -1.0], vec![4, 5, 2, 9]).unwrap();
        assert_eq!(s.rows_ascending(), vec![9, 5, 2, 4]);
    }
}
