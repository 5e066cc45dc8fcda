//! Layer reduction operators: bipartite merging with size-weighted averaging,
//! eviction, the two top-k ablations and the triaged operator that scores,
//! partitions and then evicts and merges within the assigned pools.
//!
//! Every operator works on population rows and leaves a CLS row untouched.
//! Each one removes exactly `r` patch tokens or fails.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{normalize_rows, SimilarityKind};
use crate::error::{Error, Result};
use crate::scoring::{catis_score, LayerScoringContext, ScoringParams};
use crate::tokens::{ImportanceScores, TokenPopulation};
use crate::triage::{allocate, partition, TriagePartition};

/// Merge pairs `(src, dst)` as population rows. A destination may absorb
/// several sources; no source is also a destination.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MergePlan {
    pub pairs: Vec<(usize, usize)>,
}

impl MergePlan {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn sorted_patch_rows(pop: &TokenPopulation, rows: &[usize], what: &str) -> Result<Vec<usize>> {
    let mut v = rows.to_vec();
    v.sort_unstable();
    if v.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation(format!("{what} contains duplicate rows")));
    }
    for &r in &v {
        pop.check_patch_row(r)?;
    }
    Ok(v)
}

/// One round of bipartite matching inside `pool`.
///
/// The pool (ascending rows) alternates into sources A (even positions) and
/// destinations B (odd positions). Each source links to its most similar
/// destination, ties going to the lower row; the `r_m` strongest links are
/// kept, ties going to the lower source row.
pub fn bipartite_match(
    pop: &TokenPopulation,
    pool: &[usize],
    r_m: usize,
    kind: SimilarityKind,
) -> Result<MergePlan> {
    let pool = sorted_patch_rows(pop, pool, "merge pool")?;
    if r_m == 0 {
        return Ok(MergePlan::default());
    }
    if pool.len() < r_m + 1 {
        return Err(Error::validation(format!(
            "merge pool of {} tokens cannot supply {r_m} merges",
            pool.len()
        )));
    }
    let a: Vec<usize> = pool.iter().copied().step_by(2).collect();
    let b: Vec<usize> = pool.iter().copied().skip(1).step_by(2).collect();
    if r_m > a.len() {
        return Err(Error::Capacity(format!(
            "{r_m} merges exceed the {} sources of one matching round",
            a.len()
        )));
    }
    let mut xa = pop.features().select(Axis(0), &a);
    let mut xb = pop.features().select(Axis(0), &b);
    if kind == SimilarityKind::Cosine {
        xa = normalize_rows(&xa)?;
        xb = normalize_rows(&xb)?;
    }
    let sim = xa.dot(&xb.t());
    let mut links: Vec<(f64, usize, usize)> = sim
        .axis_iter(Axis(0))
        .zip(&a)
        .map(|(row, &src)| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (row[best], src, b[best])
        })
        .collect();
    links.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    Ok(MergePlan {
        pairs: links.into_iter().take(r_m).map(|(_, s, d)| (s, d)).collect(),
    })
}

/// Folds each source into its destination by size-weighted averaging.
pub fn apply_merge(pop: &TokenPopulation, plan: &MergePlan) -> Result<TokenPopulation> {
    if plan.is_empty() {
        return Ok(pop.clone());
    }
    let srcs: Vec<usize> = plan.pairs.iter().map(|p| p.0).collect();
    let srcs = sorted_patch_rows(pop, &srcs, "merge sources")?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(s, d) in &plan.pairs {
        pop.check_patch_row(d)?;
        if srcs.binary_search(&d).is_ok() {
            return Err(Error::validation(format!("row {d} is both a source and a destination")));
        }
        groups.entry(d).or_default().push(s);
    }
    let mut features = pop.features().clone();
    let mut sizes = pop.sizes().to_vec();
    let mut provenance = pop.provenance().to_vec();
    for (&d, group) in &mut groups {
        group.sort_unstable();
        let total: u32 = sizes[d] + group.iter().map(|&s| pop.sizes()[s]).sum::<u32>();
        let base: Array1<f64> = pop.row(d).to_owned();
        let mut merged = base.clone();
        for &s in group.iter() {
            let w = f64::from(pop.sizes()[s]) / f64::from(total);
            merged
                .iter_mut()
                .zip(pop.row(s).iter().zip(base.iter()))
                .for_each(|(m, (xs, xd))| *m += w * (xs - xd));
            provenance[d].extend_from_slice(&pop.provenance()[s]);
        }
        provenance[d].sort_unstable();
        sizes[d] = total;
        features.row_mut(d).assign(&merged);
    }
    let keep: Vec<usize> = (0..pop.n_tokens())
        .filter(|r| srcs.binary_search(r).is_err())
        .collect();
    let features: Array2<f64> = features.select(Axis(0), &keep);
    Ok(TokenPopulation::with_parts_unchecked(
        features,
        keep.iter().map(|&r| sizes[r]).collect(),
        keep.iter().map(|&r| std::mem::take(&mut provenance[r])).collect(),
        pop.has_cls(),
        pop.original_patches(),
    ))
}

/// Removes the given patch rows; survivors are untouched.
pub fn apply_evict(pop: &TokenPopulation, victims: &[usize]) -> Result<TokenPopulation> {
    let victims = sorted_patch_rows(pop, victims, "victim set")?;
    if victims.len() >= pop.n_patches() {
        return Err(Error::validation("eviction would remove every patch token"));
    }
    let keep: Vec<usize> = (0..pop.n_tokens())
        .filter(|r| victims.binary_search(r).is_err())
        .collect();
    Ok(pop.select_rows(&keep))
}

/// Position of `row` once the (sorted) `removed` rows are dropped.
fn shift_row(row: usize, removed: &[usize]) -> usize {
    row - removed.partition_point(|&x| x < row)
}

/// `r_m` merges inside `pool`, over as many matching rounds as needed.
/// Returns the reduced population and the plan of each round (rows of the
/// population that round was applied to).
pub fn merge_reduce(
    pop: &TokenPopulation,
    pool: &[usize],
    r_m: usize,
    kind: SimilarityKind,
) -> Result<(TokenPopulation, Vec<MergePlan>)> {
    let mut pool = sorted_patch_rows(pop, pool, "merge pool")?;
    if r_m > 0 && pool.len() < r_m + 1 {
        return Err(Error::validation(format!(
            "merge pool of {} tokens cannot supply {r_m} merges",
            pool.len()
        )));
    }
    let mut cur = pop.clone();
    let mut plans = Vec::new();
    let mut remaining = r_m;
    while remaining > 0 {
        let step = remaining.min(pool.len().div_ceil(2));
        let plan = bipartite_match(&cur, &pool, step, kind)?;
        let mut removed: Vec<usize> = plan.pairs.iter().map(|p| p.0).collect();
        removed.sort_unstable();
        cur = apply_merge(&cur, &plan)?;
        pool = pool
            .into_iter()
            .filter(|r| removed.binary_search(r).is_err())
            .map(|r| shift_row(r, &removed))
            .collect();
        plans.push(plan);
        remaining -= step;
    }
    Ok((cur, plans))
}

fn check_budget(pop: &TokenPopulation, r: usize) -> Result<()> {
    if r >= pop.n_patches() {
        return Err(Error::validation(format!(
            "budget r = {r} must be below the {} patch tokens",
            pop.n_patches()
        )));
    }
    Ok(())
}

/// Bipartite merging over all patch tokens.
pub fn tome_layer(pop: &TokenPopulation, r: usize, kind: SimilarityKind) -> Result<TokenPopulation> {
    check_budget(pop, r)?;
    let pool: Vec<usize> = pop.patch_rows().collect();
    Ok(merge_reduce(pop, &pool, r, kind)?.0)
}

fn check_scores_cover(pop: &TokenPopulation, scores: &ImportanceScores) -> Result<()> {
    let mut rows = scores.rows.clone();
    rows.sort_unstable();
    if !rows.iter().copied().eq(pop.patch_rows()) {
        return Err(Error::validation("scores must cover exactly the patch tokens"));
    }
    Ok(())
}

/// Evicts the `r` lowest-scoring tokens.
pub fn topk_evict_layer(pop: &TokenPopulation, scores: &ImportanceScores, r: usize) -> Result<TokenPopulation> {
    check_budget(pop, r)?;
    check_scores_cover(pop, scores)?;
    let victims: Vec<usize> = scores.rows_ascending().into_iter().take(r).collect();
    apply_evict(pop, &victims)
}

/// Merges `r` pairs among the `2r` lowest-scoring tokens.
pub fn topk_merge_layer(
    pop: &TokenPopulation,
    scores: &ImportanceScores,
    r: usize,
    kind: SimilarityKind,
) -> Result<TokenPopulation> {
    check_budget(pop, r)?;
    check_scores_cover(pop, scores)?;
    let pool: Vec<usize> = scores.rows_ascending().into_iter().take(2 * r).collect();
    Ok(merge_reduce(pop, &pool, r, kind)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatisParams {
    pub scoring: ScoringParams,
    pub tau: f64,
    pub evict_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatisOutput {
    pub population: TokenPopulation,
    /// Level sets and the budget split from allocation, before any
    /// re-routing.
    pub partition: TriagePartition,
    pub scores: ImportanceScores,
    /// Evicted rows of the input population, ascending.
    pub evicted: Vec<usize>,
    pub merge_plans: Vec<MergePlan>,
    /// Merge budget the pool could not supply, served by eviction instead.
    pub rerouted: usize,
}

/// Scores, triages, evicts from E and merges within M.
///
/// When M is too small for its merge budget (fewer than `r_m + 1` tokens),
/// that budget is evicted instead: first the lowest-scoring members of M,
/// then the remaining members of E. Protected tokens are never touched; if
/// the budget cannot be met without them the call fails with a capacity
/// error.
pub fn catis_layer(
    ctx: &LayerScoringContext<'_>,
    params: &CatisParams,
    r: usize,
    kind: SimilarityKind,
) -> Result<CatisOutput> {
    let pop = ctx.population;
    check_budget(pop, r)?;
    let scores = catis_score(ctx, &params.scoring)?;
    let sets = partition(&scores, params.tau)?;
    let (r_e, r_m) = allocate(&sets, r, params.evict_ratio)?;
    let by_score = |rows: &[usize]| -> Vec<usize> {
        let mut v = rows.to_vec();
        v.sort_by(|&x, &y| {
            let sx = scores.score_of(x).expect("scored row");
            let sy = scores.score_of(y).expect("scored row");
            sx.total_cmp(&sy).then(x.cmp(&y))
        });
        v
    };
    let evict_order = by_score(&sets.evict_pool);
    let mut victims: Vec<usize> = evict_order[..r_e].to_vec();
    let (merges, rerouted) = if r_m > 0 && sets.merge_pool.len() < r_m + 1 {
        let from_m: Vec<usize> = by_score(&sets.merge_pool).into_iter().take(r_m).collect();
        let short = r_m - from_m.len();
        let spare = &evict_order[r_e..];
        if short > spare.len() {
            return Err(Error::Capacity(format!(
                "merge pool of {} and evict pool of {} cannot absorb r = {r} without touching {} protected tokens",
                sets.merge_pool.len(),
                sets.evict_pool.len(),
                sets.protect.len()
            )));
        }
        victims.extend_from_slice(&from_m);
        victims.extend_from_slice(&spare[..short]);
        (0, r_m)
    } else {
        (r_m, 0)
    };
    victims.sort_unstable();
    let evicted_pop = apply_evict(pop, &victims)?;
    let pool: Vec<usize> = sets
        .merge_pool
        .iter()
        .filter(|r| victims.binary_search(r).is_err())
        .map(|&r| shift_row(r, &victims))
        .collect();
    let (population, merge_plans) = merge_reduce(&evicted_pop, &pool, merges, kind)?;
    Ok(CatisOutput {
        population,
        partition: TriagePartition::new(sets, r_e, r_m),
        scores,
        evicted: victims,
        merge_plans,
        rerouted,
    })
}

/// Which operator a reduction pipeline applies at each layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reducer", rename_all = "kebab-case")]
pub enum Reducer {
    None,
    Tome,
    Catis(CatisParams),
    TopkEvict(ScoringParams),
    TopkMerge(ScoringParams),
}

impl Reducer {
    pub fn name(&self) -> &'static str {
        match self {
            Reducer::None => "none",
            Reducer::Tome => "tome",
            Reducer::Catis(_) => "catis",
            Reducer::TopkEvict(_) => "topk-evict",
            Reducer::TopkMerge(_) => "topk-merge",
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, Reducer::None)
    }
}

/// Result of one layer of a reduction pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReduction {
    pub population: TokenPopulation,
    pub partition: Option<TriagePartition>,
    pub rerouted: usize,
}

/// Applies `reducer` with budget `r` to the population in `ctx`.
pub fn reduce_layer(
    reducer: &Reducer,
    ctx: &LayerScoringContext<'_>,
    r: usize,
    kind: SimilarityKind,
) -> Result<LayerReduction> {
    let pop = ctx.population;
    let plain = |population| LayerReduction {
        population,
        partition: None,
        rerouted: 0,
    };
    match reducer {
        Reducer::None => Ok(plain(pop.clone())),
        Reducer::Tome => Ok(plain(tome_layer(pop, r, kind)?)),
        Reducer::TopkEvict(sp) => {
            check_budget(pop, r)?;
            Ok(plain(topk_evict_layer(pop, &catis_score(ctx, sp)?, r)?))
        }
        Reducer::TopkMerge(sp) => {
            check_budget(pop, r)?;
            Ok(plain(topk_merge_layer(pop, &catis_score(ctx, sp)?, r, kind)?))
        }
        Reducer::Catis(params) => {
            let out = catis_layer(ctx, params, r, kind)?;
            Ok(LayerReduction {
                population: out.population,
                partition: Some(out.partition),
                rerouted: out.rerouted,
            })
        }
    }
}

/// Token accounting for one reduced layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: usize,
    pub patches_in: usize,
    pub patches_out: usize,
    pub r: usize,
    pub r_e: Option<usize>,
    pub r_m: Option<usize>,
    pub protected: Option<usize>,
    pub rerouted: usize,
    pub total_size: u64,
}

impl LayerAudit {
    pub fn new(layer: usize, before: &TokenPopulation, out: &LayerReduction, r: usize) -> Self {
        let p = out.partition.as_ref();
        LayerAudit {
            layer,
            patches_in: before.n_patches(),
            patches_out: out.population.n_patches(),
            r,
            r_e: p.map(|p| p.r_e),
            r_m: p.map(|p| p.r_m),
            protected: p.map(|p| p.protect.len()),
            rerouted: out.rerouted,
            total_size: out.population.total_size(),
        }
    }
}

/// Everything a pipeline keeps about one reduced layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub audit: LayerAudit,
    pub partition: Option<TriagePartition>,
    /// Population leaving the reducer.
    pub reduced: TokenPopulation,
}

impl LayerRecord {
    pub fn new(layer: usize, before: &TokenPopulation, out: LayerReduction, r: usize) -> Self {
        LayerRecord {
            audit: LayerAudit::new(layer, before, &out, r),
            partition: out.partition,
            reduced: out.population,
        }
    }
}
