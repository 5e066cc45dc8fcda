//! Unary importance scoring.
//!
//! The fused score of a layer is
//!
//! ```text
//! s = w · z(Ã) + (1 − w) · z(norm_F),     Ã = (1 + γ) A(l) − γ A(l−1)
//! ```
//!
//! where `norm_F` is the length of a token's per-dimension z-score vector
//! (a diagonal Mahalanobis distance from the layer population), `A` is the
//! CLS-to-patch attention and `z` standardizes within the layer. Before
//! `l_start`, or without attention, only the `norm_F` branch is used.

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::tokens::{validate_attention, ImportanceScores, TokenPopulation};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

/// Relative spread below which a score vector counts as constant.
const DEGENERATE_REL_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringParams {
    pub gamma: f64,
    pub w_cls: f64,
    pub l_start: usize,
    pub sigma_floor: f64,
}

impl ScoringParams {
    pub fn new(gamma: f64, w_cls: f64, l_start: usize) -> Self {
        ScoringParams {
            gamma,
            w_cls,
            l_start,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.w_cls) {
            return Err(Error::validation(format!("w_cls must lie in [0, 1], got {}", self.w_cls)));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::validation("sigma_floor must be positive"));
        }
        Ok(())
    }
}

/// Inputs for scoring one layer. `prev_cls_attn` must already be aligned
/// to the current tokens (see [`inherit_attention`]).
#[derive(Debug, Clone, Copy)]
pub struct LayerScoringContext<'a> {
    pub population: &'a TokenPopulation,
    pub cls_attn: Option<&'a [f64]>,
    pub prev_cls_attn: Option<&'a [f64]>,
    pub layer: usize,
}

/// `norm_F` of every row of `x`, with statistics taken over the same rows.
pub fn norm_f_matrix(x: &Array2<f64>, sigma_floor: f64) -> Vec<f64> {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let inv_sd: Vec<f64> = centered
        .axis_iter(Axis(1))
        .map(|col| 1.0 / (col.dot(&col) / n).sqrt().max(sigma_floor))
        .collect();
    centered
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .zip(&inv_sd)
                .map(|(v, s)| (v * s) * (v * s))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Raw `norm_F` scores of the patch tokens (CLS excluded from the
/// statistics and from the output).
pub fn norm_f(pop: &TokenPopulation, sigma_floor: f64) -> Result<ImportanceScores> {
    if !(sigma_floor > 0.0 && sigma_floor.is_finite()) {
        return Err(Error::validation("sigma_floor must be positive"));
    }
    if pop.n_patches() < 2 {
        return Err(Error::Degenerate("norm_F needs at least two patch tokens".into()));
    }
    let values = norm_f_matrix(&pop.patch_features(), sigma_floor);
    ImportanceScores::with_rows(values, pop.patch_rows().collect())
}

/// `(1 + γ) a − γ a_prev`
pub fn momentum_cls(a: &[f64], a_prev: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if a.len() != a_prev.len() {
        return Err(Error::validation(format!(
            "attention lengths differ: {} vs {}",
            a.len(),
            a_prev.len()
        )));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::validation("gamma must be >= 0"));
    }
    Ok(a.iter()
        .zip(a_prev)
        .map(|(x, p)| (1.0 + gamma) * x - gamma * p)
        .collect())
}

/// Standardizes with the population standard deviation. A constant input
/// yields all zeros with `degenerate` set.
pub fn zscore(scores: &ImportanceScores) -> Result<ImportanceScores> {
    let v = &scores.values;
    if v.len() < 2 {
        return Err(Error::validation("z-score needs at least two scores"));
    }
    let mean = stats::mean(v);
    let sd = stats::variance(v).sqrt();
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let degenerate = sd == 0.0 || sd <= DEGENERATE_REL_STD * scale;
    let values = if degenerate {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| (x - mean) / sd).collect()
    };
    Ok(ImportanceScores {
        values,
        rows: scores.rows.clone(),
        standardized: true,
        degenerate,
    })
}

/// `w · cls + (1 − w) · nf` over standardized inputs.
pub fn fuse(cls: &ImportanceScores, nf: &ImportanceScores, w_cls: f64) -> Result<ImportanceScores> {
    if !cls.standardized || !nf.standardized {
        return Err(Error::Contract("fuse requires standardized scores".into()));
    }
    if cls.rows != nf.rows {
        return Err(Error::validation("fused scores cover different tokens"));
    }
    if !(0.0..=1.0).contains(&w_cls) {
        return Err(Error::validation(format!("w_cls must lie in [0, 1], got {w_cls}")));
    }
    let values = cls
        .values
        .iter()
        .zip(&nf.values)
        .map(|(c, n)| w_cls * c + (1.0 - w_cls) * n)
        .collect();
    Ok(ImportanceScores {
        values,
        rows: cls.rows.clone(),
        standardized: true,
        degenerate: cls.degenerate && nf.degenerate,
    })
}

/// Fused layer score over the patch tokens.
pub fn catis_score(ctx: &LayerScoringContext<'_>, params: &ScoringParams) -> Result<ImportanceScores> {
    params.validate()?;
    let pop = ctx.population;
    let nf = zscore(&norm_f(pop, params.sigma_floor)?)?;
    let att = match ctx.cls_attn {
        Some(att) if ctx.layer >= params.l_start => att,
        _ => return Ok(nf),
    };
    validate_attention(att, pop.n_patches())?;
    let (prev, gamma) = match ctx.prev_cls_attn {
        Some(p) => {
            validate_attention(p, pop.n_patches())?;
            (p, params.gamma)
        }
        None => (att, 0.0),
    };
    let momentum = momentum_cls(att, prev, gamma)?;
    let cls = zscore(&ImportanceScores::with_rows(momentum, nf.rows.clone())?)?;
    fuse(&cls, &nf, params.w_cls)
}

/// Carries CLS attention recorded on `prev` over to the tokens of `cur`.
///
/// Each current patch token receives the size-weighted mean attention of
/// the previous tokens whose patches it contains; the result is renormalized
/// to sum to one over the current tokens.
pub fn inherit_attention(
    prev_att: &[f64],
    prev: &TokenPopulation,
    cur: &TokenPopulation,
) -> Result<Vec<f64>> {
    if prev_att.len() != prev.n_patches() {
        return Err(Error::validation("previous attention does not match its population"));
    }
    let mut owner: HashMap<u32, usize> = HashMap::new();
    for (k, row) in prev.patch_rows().enumerate() {
        for &p in &prev.provenance()[row] {
            owner.insert(p, k);
        }
    }
    let mut out = Vec::with_capacity(cur.n_patches());
    for row in cur.patch_rows() {
        let mut parts: Vec<usize> = cur.provenance()[row]
            .iter()
            .map(|p| {
                owner.get(p).copied().ok_or_else(|| {
                    Error::validation(format!("patch {p} of row {row} is absent from the previous layer"))
                })
            })
            .collect::<Result<_>>()?;
        parts.sort_unstable();
        parts.dedup();
        let prev_rows: Vec<usize> = parts.iter().map(|&k| k + prev.first_patch_row()).collect();
        let weight: f64 = prev_rows.iter().map(|&r| f64::from(prev.sizes()[r])).sum();
        let acc: f64 = parts
            .iter()
            .zip(&prev_rows)
            .map(|(&k, &r)| f64::from(prev.sizes()[r]) * prev_att[k])
            .sum();
        out.push(acc / weight);
    }
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("inherited attention is zero on every token".into()));
    }
    out.iter_mut().for_each(|a| *a /= total);
    Ok(out)
}
