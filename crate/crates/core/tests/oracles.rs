use ndarray::{array, Array2};

use tokenlab::diagnostics::{frobenius_distance, pairwise_similarity, ranking_consistency, SimilarityKind};
use tokenlab::recurrence::{r_crit_approx, r_crit_exact, simulate, RecurrenceConfig};
use tokenlab::reduce::{bipartite_match, topk_evict_layer};
use tokenlab::scoring::{catis_score, norm_f, LayerScoringContext, ScoringParams, DEFAULT_SIGMA_FLOOR};
use tokenlab::{ImportanceScores, TokenPopulation};

fn pop(x: Array2<f64>) -> TokenPopulation {
    TokenPopulation::new(x, false).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.outer_iter().map(|r| r.to_vec()).collect()
}

#[test]
fn norm_f_matches_hand_computation() {
    // centered rows (-2,-2), (0,-2), (2,4); column variances 8/3 and 8
    let p = pop(array![[0.0, 0.0], [2.0, 0.0], [4.0, 6.0]]);
    let got = norm_f(&p, DEFAULT_SIGMA_FLOOR).unwrap().values;
    let want = [2f64.sqrt(), 0.5f64.sqrt(), 3.5f64.sqrt()];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn pairwise_cosine_matches_brute_force() {
    let x = array![[1.0, 2.0, 0.5], [-0.3, 1.0, 2.0], [0.7, -1.1, 0.4]];
    let s = pairwise_similarity(&pop(x.clone()), SimilarityKind::Cosine).unwrap();
    let r = rows(&x);
    for i in 0..3 {
        for j in 0..3 {
            assert!((s.values[[i, j]] - cosine(&r[i], &r[j])).abs() < 1e-12);
        }
    }
    let d = pairwise_similarity(&pop(x), SimilarityKind::Dot).unwrap();
    assert!((d.values[[0, 1]] - (-0.3 + 2.0 + 1.0)).abs() < 1e-12);
}

#[test]
fn frobenius_matches_elementwise_sum() {
    let a = pairwise_similarity(&pop(array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), SimilarityKind::Cosine).unwrap();
    let b = pairwise_similarity(&pop(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), SimilarityKind::Cosine).unwrap();
    let mut sum = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            sum += (a.values[[i, j]] - b.values[[i, j]]).powi(2);
        }
    }
    let got = frobenius_distance(&a, &b).unwrap();
    assert!((got - sum.sqrt()).abs() < 1e-12);
    // entries (0,1) and (0,2) each move by 1/sqrt2, on both sides of the diagonal
    assert!((got - 2.0f64.sqrt()).abs() < 1e-12);
}

#[test]
fn reversed_ranking_gives_minus_one() {
    let clean = pairwise_similarity(&pop(array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), SimilarityKind::Dot).unwrap();
    let mut corr = clean.clone();
    corr.values.mapv_inplace(|v| -v);
    assert_eq!(ranking_consistency(&clean, &corr).unwrap(), -1.0);
}

fn bisect_r_crit(cfg: &RecurrenceConfig) -> f64 {
    let (mut lo, mut hi) = (0.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let d = simulate(&RecurrenceConfig { r: mid, ..cfg.clone() }).unwrap().final_delta();
        if d < cfg.threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn r_crit_matches_bisection_on_simulation() {
    let cfg = RecurrenceConfig::linear(0.1, 0.5, 0.1, 1.0, 12, 1.0);
    let oracle = bisect_r_crit(&cfg);
    assert!((oracle - 3.220733).abs() < 1e-6, "{oracle}");
    assert!((r_crit_exact(&cfg).unwrap() - oracle).abs() < 1e-9);
    assert!((r_crit_approx(&cfg).unwrap() - 2.98627).abs() < 1e-5);
}

#[test]
fn bipartite_match_matches_exhaustive_search() {
    let x = array![
        [0.9, 0.1, 0.3],
        [0.2, 1.0, -0.4],
        [0.8, 0.3, 0.2],
        [-0.5, 0.4, 1.1],
        [0.1, 0.9, -0.2],
        [1.0, 0.0, 0.5],
    ];
    let r = rows(&x);
    let p = pop(x);
    let mut links: Vec<(f64, usize, usize)> = [0, 2, 4]
        .iter()
        .map(|&a| {
            [1, 3, 5]
                .iter()
                .map(|&b| (cosine(&r[a], &r[b]), a, b))
                .fold((f64::NEG_INFINITY, 0, 0), |best, c| if c.0 > best.0 { c } else { best })
        })
        .collect();
    links.sort_by(|x, y| y.0.total_cmp(&x.0));
    for r_m in 1..=3 {
        let plan = bipartite_match(&p, &[0, 1, 2, 3, 4, 5], r_m, SimilarityKind::Cosine).unwrap();
        let want: Vec<(usize, usize)> = links[..r_m].iter().map(|l| (l.1, l.2)).collect();
        assert_eq!(plan.pairs, want);
    }
}

#[test]
fn topk_evict_drops_the_lowest_scores() {
    let p = pop(Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64));
    let scores = ImportanceScores::raw(vec![0.5, -1.0, 2.0, 0.1, -0.3, 1.0]);
    let out = topk_evict_layer(&p, &scores, 2).unwrap();
    assert_eq!(out.provenance(), &[vec![0], vec![2], vec![3], vec![5]]);
    assert_eq!(out.row(1).to_vec(), vec![4.0, 5.0]);
}

fn zs(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| (x - m) / sd).collect()
}

#[test]
fn catis_score_matches_composed_oracle() {
    let x = array![[1.0, 0.2], [0.1, 0.9], [-0.4, 0.3], [0.8, -0.7], [0.0, 0.5]];
    let p = pop(x.clone());
    let att = [0.4, 0.1, 0.2, 0.05, 0.25];
    let prev = [0.2, 0.2, 0.2, 0.2, 0.2];
    let (gamma, w) = (0.5, 0.7);
    let ctx = LayerScoringContext {
        population: &p,
        cls_attn: Some(&att),
        prev_cls_attn: Some(&prev),
        layer: 2,
    };
    let got = catis_score(&ctx, &ScoringParams::new(gamma, w, 1)).unwrap();

    let cols: Vec<Vec<f64>> = (0..2).map(|j| x.column(j).to_vec()).collect();
    let nf: Vec<f64> = (0..5)
        .map(|i| {
            cols.iter()
                .map(|c| {
                    let m = c.iter().sum::<f64>() / 5.0;
                    let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 5.0).sqrt();
                    ((c[i] - m) / sd).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mom: Vec<f64> = att.iter().zip(prev).map(|(a, p)| (1.0 + gamma) * a - gamma * p).collect();
    let want: Vec<f64> = zs(&mom).iter().zip(zs(&nf)).map(|(c, n)| w * c + (1.0 - w) * n).collect();
    for (g, w) in got.values.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }

    let early = LayerScoringContext { layer: 0, ..ctx };
    let nf_only = catis_score(&early, &ScoringParams::new(gamma, w, 1)).unwrap();
    for (g, w) in nf_only.values.iter().zip(zs(&nf)) {
        assert!((g - w).abs() < 1e-12);
    }
}
