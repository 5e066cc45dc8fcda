//! Collapse diagnostics: ranking consistency of pairwise similarity under
//! perturbation, Frobenius distortion, off-diagonal feature correlation, the
//! merge-pool restriction of ranking consistency, and Monte-Carlo
//! perturbation energy of pairwise versus unary signals.
//!
//! All statistics are computed over patch tokens; a CLS row never enters a
//! similarity matrix or a correlation.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scoring::{norm_f_matrix, DEFAULT_SIGMA_FLOOR};
use crate::stats::{self, LinearFit};
use crate::tokens::TokenPopulation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Cosine,
    Dot,
}

impl std::str::FromStr for SimilarityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SimilarityKind::Cosine),
            "dot" => Ok(SimilarityKind::Dot),
            other => Err(Error::validation(format!("unknown similarity kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::Dot => "dot",
        })
    }
}

/// Symmetric patch-by-patch similarity matrix. `rows[k]` is the population
/// row behind matrix index `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub kind: SimilarityKind,
    pub rows: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Strict upper triangle, row-major.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.values[[i, j]]);
            }
        }
        out
    }

    /// Restriction to the given population rows (sorted, unique).
    pub fn restrict(&self, rows: &[usize]) -> Result<SimilarityMatrix> {
        let idx: Vec<usize> = rows
            .iter()
            .map(|r| {
                self.rows
                    .binary_search(r)
                    .map_err(|_| Error::validation(format!("row {r} not in similarity matrix")))
            })
            .collect::<Result<_>>()?;
        let values = self.values.select(Axis(0), &idx).select(Axis(1), &idx);
        Ok(SimilarityMatrix {
            values,
            kind: self.kind,
            rows: rows.to_vec(),
        })
    }
}

/// Unit-normalizes rows; errors on a zero-norm row.
pub(crate) fn normalize_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(format!(
                "token {i} has zero norm under cosine similarity"
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Gram matrix with the upper triangle mirrored so the result is exactly
/// symmetric.
fn symmetric_gram(x: &Array2<f64>) -> Array2<f64> {
    let mut g = x.dot(&x.t());
    let n = g.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            g[[j, i]] = g[[i, j]];
        }
    }
    g
}

pub(crate) fn similarity_of_matrix(x: &Array2<f64>, kind: SimilarityKind) -> Result<Array2<f64>> {
    match kind {
        SimilarityKind::Dot => Ok(symmetric_gram(x)),
        SimilarityKind::Cosine => {
            let mut g = symmetric_gram(&normalize_rows(x)?);
            g.diag_mut().fill(1.0);
            Ok(g)
        }
    }
}

pub fn pairwise_similarity(pop: &TokenPopulation, kind: SimilarityKind) -> Result<SimilarityMatrix> {
    if pop.n_patches() < 2 {
        return Err(Error::Degenerate("similarity needs at least two patch tokens".into()));
    }
    let values = similarity_of_matrix(&pop.patch_features(), kind)?;
    Ok(SimilarityMatrix {
        values,
        kind,
        rows: pop.patch_rows().collect(),
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "spearman inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::validation("spearman needs at least two observations"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::validation("spearman input contains non-finite values"));
    }
    stats::pearson(&stats::average_ranks(a), &stats::average_ranks(b))
        .map_err(|e| match e {
            Error::Undefined(_) => Error::Undefined("spearman of a constant vector".into()),
            other => other,
        })
}

fn check_same_shape(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Result<()> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::validation(format!(
            "similarity shapes differ: {:?} vs {:?}",
            a.values.dim(),
            b.values.dim()
        )));
    }
    Ok(())
}

/// Spearman correlation between the strict upper triangles of a clean and
/// a perturbed similarity matrix.
pub fn ranking_consistency(clean: &SimilarityMatrix, corrupted: &SimilarityMatrix) -> Result<f64> {
    check_same_shape(clean, corrupted)?;
    if clean.kind != corrupted.kind {
        return Err(Error::validation("similarity kinds differ"));
    }
    spearman_rho(&clean.upper_triangle(), &corrupted.upper_triangle())
}

pub fn frobenius_distance(clean: &SimilarityMatrix, corrupted: &SimilarityMatrix) -> Result<f64> {
    check_same_shape(clean, corrupted)?;
    Ok(clean
        .values
        .iter()
        .zip(corrupted.values.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Mean absolute off-diagonal Pearson correlation between feature
/// dimensions, taken across patch tokens.
pub fn rho_off(pop: &TokenPopulation) -> Result<f64> {
    let x = pop.patch_features();
    let (n, d) = x.dim();
    if n < 3 {
        return Err(Error::Degenerate("rho_off needs at least three patch tokens".into()));
    }
    if d < 2 {
        return Err(Error::Degenerate("rho_off needs at least two dimensions".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let mut z = &x - &mean;
    for (k, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        let sd = (col.dot(&col) / n as f64).sqrt();
        if sd == 0.0 {
            return Err(Error::Undefined(format!("feature dimension {k} has zero variance")));
        }
        col.mapv_inplace(|v| v / sd);
    }
    let corr = z.t().dot(&z) / n as f64;
    let mut total = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j != k {
                total += corr[[j, k]].clamp(-1.0, 1.0).abs();
            }
        }
    }
    Ok(total / (d * (d - 1)) as f64)
}

fn pool_rows(pop: &TokenPopulation, pool: &[usize]) -> Result<Vec<usize>> {
    let mut rows = pool.to_vec();
    rows.sort_unstable();
    if rows.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation("pool contains duplicate rows"));
    }
    for &r in &rows {
        pop.check_patch_row(r)?;
    }
    Ok(rows)
}

/// Ranking consistency restricted to a token pool (e.g. a triage merge pool).
pub fn pool_rho_s(
    clean: &TokenPopulation,
    corrupted: &TokenPopulation,
    pool: &[usize],
    kind: SimilarityKind,
) -> Result<f64> {
    if pool.len() < 3 {
        return Err(Error::Degenerate(format!(
            "pool of {} tokens is too small (need 3)",
            pool.len()
        )));
    }
    if clean.n_tokens() != corrupted.n_tokens() || clean.has_cls() != corrupted.has_cls() {
        return Err(Error::validation("clean and corrupted populations differ in layout"));
    }
    let rows = pool_rows(clean, pool)?;
    let s_clean = pairwise_similarity(clean, kind)?.restrict(&rows)?;
    let s_corr = pairwise_similarity(corrupted, kind)?.restrict(&rows)?;
    ranking_consistency(&s_clean, &s_corr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergySignal {
    PairwiseCosine,
    PairwiseDot,
    UnaryNormF,
}

fn signal_scores(x: &Array2<f64>, signal: EnergySignal) -> Result<Vec<f64>> {
    match signal {
        EnergySignal::PairwiseCosine | EnergySignal::PairwiseDot => {
            let kind = if signal == EnergySignal::PairwiseCosine {
                SimilarityKind::Cosine
            } else {
                SimilarityKind::Dot
            };
            let s = similarity_of_matrix(x, kind)?;
            let n = s.nrows();
            let mut out = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    out.push(s[[i, j]]);
                }
            }
            Ok(out)
        }
        EnergySignal::UnaryNormF => Ok(norm_f_matrix(x, DEFAULT_SIGMA_FLOOR)),
    }
}

/// Monte-Carlo estimate of the total perturbation energy
/// `V = sum over scores of E[(perturbed - clean)^2]` under i.i.d. isotropic
/// Gaussian per-token perturbations with per-component standard deviation
/// `sigma`.
///
/// Draws for token `i` at iteration `m` come from the stream keyed by
/// `(seed, i, m)`; per-iteration sums are reduced in iteration order, so
/// the result is bit-identical regardless of thread scheduling.
pub fn perturbation_energy(
    pop: &TokenPopulation,
    signal: EnergySignal,
    sigma: f64,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
    }
    if n_mc == 0 {
        return Err(Error::validation("n_mc must be at least 1"));
    }
    if pop.n_patches() < 2 {
        return Err(Error::Degenerate("perturbation energy needs two patch tokens".into()));
    }
    let x = pop.patch_features();
    let base = signal_scores(&x, signal)?;
    let d = x.ncols();
    let per_iter: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|m| -> Result<f64> {
            let mut perturbed = x.clone();
            let mut noise = vec![0.0; d];
            for (i, mut row) in perturbed.axis_iter_mut(Axis(0)).enumerate() {
                rng::fill_normal(seed, &[i as u64, m as u64], &mut noise);
                row.iter_mut().zip(&noise).for_each(|(v, e)| *v += sigma * e);
            }
            let scores = signal_scores(&perturbed, signal)?;
            Ok(scores.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum())
        })
        .collect::<Result<_>>()?;
    Ok(per_iter.iter().sum::<f64>() / n_mc as f64)
}

/// Energies below this are indistinguishable from round-off.
pub const ENERGY_FLOOR: f64 = 1e-18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyPoint {
    pub np: usize,
    pub v_pair: f64,
    pub v_unary: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySweep {
    /// Slope of log(V_pair / V_unary) against log N_p.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Some energy fell below [`ENERGY_FLOOR`]; the fit is not meaningful.
    pub degenerate: bool,
    pub points: Vec<EnergyPoint>,
}

const TAG_POPULATION: u64 = 0x706f70;
const TAG_PERTURB: u64 = 0x6d63;

/// i.i.d. standard-normal population used by the energy sweep.
pub fn gaussian_population(np: usize, d: usize, seed: u64) -> Result<TokenPopulation> {
    let mut x = Array2::zeros((np, d));
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let v = rng::normal_vec(seed, &[TAG_POPULATION, np as u64, i as u64], d);
        row.iter_mut().zip(v).for_each(|(a, b)| *a = b);
    }
    TokenPopulation::new(x, false)
}

/// Measures pairwise-cosine and unary norm_F perturbation energy over a grid
/// of population sizes and fits log(V_pair / V_unary) against log N_p.
pub fn energy_gap_sweep(
    np_list: &[usize],
    d: usize,
    sigma: f64,
    n_mc: usize,
    seed: u64,
) -> Result<EnergySweep> {
    if np_list.len() < 3 {
        return Err(Error::validation("energy sweep needs at least three population sizes"));
    }
    if let Some(np) = np_list.iter().find(|&&np| np < 4) {
        return Err(Error::validation(format!("population size {np} below minimum 4")));
    }
    if d < 2 {
        return Err(Error::validation("energy sweep needs d >= 2"));
    }
    let mut points = Vec::with_capacity(np_list.len());
    for &np in np_list {
        let pop = gaussian_population(np, d, seed)?;
        let mc_seed = rng::mix_key(seed, &[TAG_PERTURB, np as u64]);
        let v_pair = perturbation_energy(&pop, EnergySignal::PairwiseCosine, sigma, n_mc, mc_seed)?;
        let v_unary = perturbation_energy(&pop, EnergySignal::UnaryNormF, sigma, n_mc, mc_seed)?;
        points.push(EnergyPoint {
            np,
            v_pair,
            v_unary,
            ratio: v_pair / v_unary,
        });
    }
    let degenerate = points.iter().any(|p| {
        p.v_pair < ENERGY_FLOOR || p.v_unary < ENERGY_FLOOR || !(p.ratio.is_finite() && p.ratio > 0.0)
    });
    let usable = points.iter().all(|p| p.ratio.is_finite() && p.ratio > 0.0);
    let (slope, intercept, r2) = if usable {
        let xs: Vec<f64> = points.iter().map(|p| (p.np as f64).ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.ratio.ln()).collect();
        let fit = LinearFit::ols(&xs, &ys)?;
        (fit.slope, fit.intercept, fit.r2)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(EnergySweep {
        slope,
        intercept,
        r2,
        degenerate,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub rho_s: f64,
    pub delta_f: f64,
    pub rho_off: f64,
    pub pool_rho_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub v_pair: f64,
    pub v_unary: f64,
    pub np: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub per_layer: Vec<LayerDiagnostics>,
    pub energy: Option<EnergySummary>,
    pub similarity: SimilarityKind,
    /// Which feature matrix the similarity statistics were computed on.
    pub feature_source: String,
}

impl DiagnosticsReport {
    pub fn validate(&self) -> Result<()> {
        for l in &self.per_layer {
            let ok = (-1.0..=1.0).contains(&l.rho_s)
                && l.delta_f >= 0.0
                && (0.0..=1.0).contains(&l.rho_off)
                && l.pool_rho_s.is_none_or(|p| (-1.0..=1.0).contains(&p));
            if !ok {
                return Err(Error::validation(format!("layer {} statistic out of range", l.layer)));
            }
        }
        if let Some(e) = &self.energy {
            if !(e.v_pair >= 0.0 && e.v_unary >= 0.0) {
                return Err(Error::validation("negative perturbation energy"));
            }
        }
        Ok(())
    }

    /// CSV body (header plus one row per layer).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,rho_s,delta_f,rho_off,pool_rho_s\n");
        for l in &self.per_layer {
            let pool = l.pool_rho_s.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", l.layer, l.rho_s, l.delta_f, l.rho_off, pool);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
