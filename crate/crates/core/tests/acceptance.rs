//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenlab::diagnostics::{energy_gap_sweep, gaussian_population, rho_off, spearman_rho, SimilarityKind};
use tokenlab::experiment::{self, RunConfig};
use tokenlab::recurrence::{closed_form, fit_inverse_depth, r_crit_exact, simulate, Coupling, RecurrenceConfig};
use tokenlab::reduce::{
    apply_merge, catis_layer, reduce_layer, tome_layer, CatisParams, MergePlan, Reducer,
};
use tokenlab::scoring::{zscore, LayerScoringContext, ScoringParams};
use tokenlab::synth::{gen_clusters, ClusterSpec};
use tokenlab::triage::{allocate, partition};
use tokenlab::{ImportanceScores, TokenPopulation};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.3}s of {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
}

fn closed_form_agreement() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let cfg = RecurrenceConfig::linear(
            rng.random_range(0.01..0.2),
            rng.random_range(0.05..1.0),
            rng.random_range(0.01..0.2),
            rng.random_range(0.5..10.0),
            64,
            1e12,
        );
        let traj = simulate(&cfg).unwrap();
        for l in 1..=64u32 {
            let cf = closed_form(&cfg, l).unwrap();
            worst = worst.max((traj.deltas[l as usize] - cf).abs() / cf);
        }
    }
    let (fast, t) = within(Duration::from_secs(1), start);
    outcome(worst < 1e-10 && fast, format!("max rel err {worst:.3e} (< 1e-10), {t}"))
}

fn super_linearity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for coupling in [Coupling::Linear, Coupling::quadratic(), Coupling::sqrt()] {
        for _ in 0..20 {
            let mut cfg = RecurrenceConfig::linear(
                rng.random_range(0.01..0.2),
                rng.random_range(0.0..0.5),
                rng.random_range(0.01..0.05),
                rng.random_range(0.5..4.0),
                rng.random_range(4..48),
                1e6,
            );
            cfg.coupling = coupling.clone();
            if !simulate(&cfg).unwrap().is_super_linear() {
                failures += 1;
            }
        }
    }
    let (fast, t) = within(Duration::from_secs(1), start);
    outcome(failures == 0 && fast, format!("{failures}/60 trajectories with a decreasing increment, {t}"))
}

fn inverse_depth_law() -> Outcome {
    let start = Instant::now();
    let base = RecurrenceConfig::linear(0.1, 0.05, 0.01, 1.0, 12, 1.0);
    let mut points = Vec::new();
    let mut max_coupling = 0.0f64;
    for l in [12u32, 24, 40] {
        let cfg = RecurrenceConfig { depth: l, ..base.clone() };
        let r = r_crit_exact(&cfg).unwrap();
        max_coupling = max_coupling.max(cfg.alpha * r * cfg.delta);
        points.push((l, r));
    }
    let fit = fit_inverse_depth(&points).unwrap();
    let bound = 0.05 * points[0].1;
    let (fast, t) = within(Duration::from_secs(1), start);
    outcome(
        max_coupling < 0.05 && fit.r2 > 0.99 && fit.intercept.abs() < bound && fast,
        format!(
            "max alpha*r_crit*delta {max_coupling:.4}, R2 {:.6}, |intercept| {:.4} (< {bound:.4}), {t}",
            fit.r2,
            fit.intercept.abs()
        ),
    )
}

fn energy_gap() -> Outcome {
    let start = Instant::now();
    let sweep = energy_gap_sweep(&[32, 64, 128, 256, 512], 64, 0.01, 500, 0).unwrap();
    let (fast, t) = within(Duration::from_secs(60), start);
    outcome(
        (0.8..=1.2).contains(&sweep.slope) && sweep.r2 > 0.95 && !sweep.degenerate && fast,
        format!("slope {:.4} in [0.8, 1.2], R2 {:.5}, {t}", sweep.slope, sweep.r2),
    )
}

fn brute_rank(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (brute_rank(a), brute_rank(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

fn diagnostic_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(3..=50);
        let ties = checked % 2 == 1;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if ties {
                        f64::from(rng.random_range(0..5u8))
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let Ok(got) = spearman_rho(&a, &b) else {
            continue;
        };
        worst = worst.max((got - brute_spearman(&a, &b)).abs());
        checked += 1;
    }
    let offs: Vec<f64> = (0..20)
        .map(|seed| rho_off(&gaussian_population(256, 32, seed).unwrap()).unwrap())
        .collect();
    let max_off = offs.iter().copied().fold(0.0, f64::max);
    let mean_off = offs.iter().sum::<f64>() / 20.0;
    outcome(
        worst < 1e-12 && max_off < 0.10,
        format!("max spearman deviation {worst:.2e} (< 1e-12), rho_off max {max_off:.4} mean {mean_off:.4} (< 0.10)"),
    )
}

fn random_attention(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn random_population(rng: &mut ChaCha8Rng, n_patches: usize, d: usize) -> TokenPopulation {
    let x = Array2::from_shape_fn((n_patches + 1, d), |_| rng.random_range(-1.0..1.0));
    TokenPopulation::new(x, true).unwrap()
}

fn budget_and_protection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut problems = Vec::new();
    for case in 0..100 {
        let n = rng.random_range(16..64);
        let d = rng.random_range(4..24);
        let pop = random_population(&mut rng, n, d);
        let att = random_attention(&mut rng, n);
        let prev = random_attention(&mut rng, n);
        let r = rng.random_range(1..=n / 4);
        let scoring = ScoringParams::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0);
        let catis = CatisParams {
            scoring,
            tau: rng.random_range(0.5..1.5),
            evict_ratio: rng.random_range(0.0..1.0),
        };
        let ctx = LayerScoringContext {
            population: &pop,
            cls_attn: Some(&att),
            prev_cls_attn: Some(&prev),
            layer: 1,
        };
        let kind = SimilarityKind::Cosine;
        for reducer in [
            Reducer::Tome,
            Reducer::Catis(catis),
            Reducer::TopkEvict(scoring),
            Reducer::TopkMerge(scoring),
        ] {
            match reduce_layer(&reducer, &ctx, r, kind) {
                Ok(out) => {
                    if out.population.n_patches() != n - r {
                        problems.push(format!("case {case}: {} left {}", reducer.name(), out.population.n_patches()));
                    }
                    let merge_only = matches!(reducer, Reducer::Tome | Reducer::TopkMerge(_));
                    if merge_only && out.population.total_size() != pop.total_size() {
                        problems.push(format!("case {case}: {} changed total size", reducer.name()));
                    }
                }
                Err(e) => problems.push(format!("case {case}: {} failed: {e}", reducer.name())),
            }
        }
        let Ok(out) = catis_layer(&ctx, &catis, r, kind) else {
            continue;
        };
        for &p in &out.partition.protect {
            let kept = out
                .population
                .provenance()
                .iter()
                .position(|prov| prov == &pop.provenance()[p]);
            let identical = kept.is_some_and(|k| {
                out.population.row(k) == pop.row(p) && out.population.sizes()[k] == pop.sizes()[p]
            });
            if !identical {
                problems.push(format!("case {case}: protected row {p} changed"));
            }
        }
        let merge_only = CatisParams {
            tau: f64::INFINITY,
            evict_ratio: 0.0,
            ..catis
        };
        let a = catis_layer(&ctx, &merge_only, r, kind).map(|o| o.population);
        let b = tome_layer(&pop, r, kind);
        if a.ok() != b.ok() {
            problems.push(format!("case {case}: tau = inf, evict_ratio = 0 differs from merge-only"));
        }
    }
    outcome(
        problems.is_empty(),
        format!("{} violations over 100 configs{}", problems.len(), first(&problems)),
    )
}

fn first(problems: &[String]) -> String {
    problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
}

fn triage_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut problems = Vec::new();
    for case in 0..200 {
        let n = rng.random_range(4..80);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tau = if case % 10 == 0 { f64::INFINITY } else { rng.random_range(0.0..2.0) };
        let r = rng.random_range(0..n);
        let ratio = rng.random_range(0.0..1.0);
        let z = zscore(&ImportanceScores::raw(raw.clone())).unwrap();
        let sets = partition(&z, tau).unwrap();
        let mut all: Vec<usize> = sets
            .protect
            .iter()
            .chain(&sets.merge_pool)
            .chain(&sets.evict_pool)
            .copied()
            .collect();
        all.sort_unstable();
        if !all.iter().copied().eq(0..n) {
            problems.push(format!("case {case}: sets are not a disjoint cover"));
        }
        let (r_e, r_m) = allocate(&sets, r, ratio).unwrap();
        if r_e > sets.evict_pool.len() || r_e + r_m != r {
            problems.push(format!("case {case}: allocation ({r_e}, {r_m}) for r = {r}"));
        }
        if sets.evict_pool.is_empty() && (r_e, r_m) != (0, r) {
            problems.push(format!("case {case}: empty E did not fall back to merge-only"));
        }
        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-5.0..5.0);
        let moved: Vec<f64> = raw.iter().map(|v| a * v + b).collect();
        let z2 = zscore(&ImportanceScores::raw(moved)).unwrap();
        if partition(&z2, tau).unwrap() != sets {
            problems.push(format!("case {case}: partition not affine invariant"));
        }
    }
    outcome(
        problems.is_empty(),
        format!("{} violations over 200 score vectors{}", problems.len(), first(&problems)),
    )
}

/// Merges `r` pairs, cycling over the clusters. Within-cluster pairs join
/// two members of one cluster; cross-cluster pairs join a member of
/// cluster `c` to a member of cluster `c + 1`.
fn forced_plans(k: usize, m: usize, r: usize) -> (MergePlan, MergePlan) {
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for i in 0..r {
        let (c, j) = (i % k, i / k);
        same.push((c * m + 2 * j, c * m + 2 * j + 1));
        cross.push((c * m + 2 * j, ((c + 1) % k) * m + 2 * j + 1));
    }
    (MergePlan { pairs: same }, MergePlan { pairs: cross })
}

fn directional_damage() -> Outcome {
    let (k, m, r) = (3, 16, 12);
    let (same, cross) = forced_plans(k, m, r);
    let mut wins = 0;
    let mut diffs = Vec::new();
    for seed in 0..20 {
        let pop = gen_clusters(&ClusterSpec {
            n_clusters: k,
            tokens_per_cluster: m,
            d: 16,
            center_scale: 5.0,
            within_std: 0.5,
            seed,
        })
        .unwrap();
        let within_off = rho_off(&apply_merge(&pop, &same).unwrap()).unwrap();
        let cross_off = rho_off(&apply_merge(&pop, &cross).unwrap()).unwrap();
        if cross_off > within_off {
            wins += 1;
        }
        diffs.push(cross_off - within_off);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    outcome(
        wins >= 16,
        format!("cross > within in {wins}/20 seeds (need >= 16), mean rho_off difference {mean:+.4}"),
    )
}

fn cfg(pairs: &[(&str, &str)]) -> RunConfig {
    let mut c = RunConfig::new();
    for (k, v) in pairs {
        c.set(k, v);
    }
    c
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let synth = experiment::cmd_synth(&cfg(&[("depth", "4"), ("seed", "3")])).unwrap();
    experiment::write_outputs(dir.path(), &synth).unwrap();
    let trace = dir.path().join("trace.trc");
    let trace = trace.to_str().unwrap();
    let scoring = [("gamma", "0.5"), ("w_cls", "0.5"), ("l_start", "1")];
    let mut reduce = vec![("reducer", "catis"), ("r", "4"), ("tau", "1.0"), ("evict_ratio", "0.3"), ("depth", "4")];
    reduce.extend_from_slice(&scoring);
    let mut diagnose = vec![("trace", trace), ("sigma", "0.05"), ("pool_tau", "1.0"), ("energy_sigma", "0.01")];
    diagnose.extend_from_slice(&scoring);
    let runs: Vec<(&str, RunConfig)> = vec![
        ("diagnose", cfg(&diagnose)),
        ("reduce", cfg(&reduce)),
        (
            "recurrence",
            cfg(&[("epsilon0", "0.1"), ("alpha", "0.5"), ("delta", "0.1"), ("threshold", "1"), ("r_grid", "1,2,4")]),
        ),
        ("energy", cfg(&[("n_mc", "50")])),
    ];
    let mut problems = Vec::new();
    for (name, c) in &runs {
        let spec = experiment::command(name).unwrap();
        match ((spec.run)(c), (spec.run)(c)) {
            (Ok(a), Ok(b)) if a == b => {}
            (Ok(_), Ok(_)) => problems.push(format!("{name} outputs differ")),
            (Err(e), _) | (_, Err(e)) => problems.push(format!("{name} failed: {e}")),
        }
    }
    outcome(
        problems.is_empty(),
        format!("{} of 4 commands non-reproducible{}", problems.len(), first(&problems)),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("closed-form agreement", closed_form_agreement),
        ("super-linearity", super_linearity),
        ("inverse-depth law", inverse_depth_law),
        ("perturbation-energy gap", energy_gap),
        ("diagnostic oracle equivalence", diagnostic_oracles),
        ("budget and protection contracts", budget_and_protection),
        ("triage algebra", triage_algebra),
        ("directional structural damage", directional_damage),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
