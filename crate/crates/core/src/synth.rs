//! Synthetic token populations, feature-space corruption and a small
//! random-weight transformer that records layer traces.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::diagnostics::SimilarityKind;
use crate::error::{Error, Result, ResultExt};
use crate::reduce::{reduce_layer, LayerRecord, Reducer};
use crate::rng;
use crate::scoring::{inherit_attention, LayerScoringContext};
use crate::tokens::{LayerTrace, TokenPopulation, TraceLayer};

const TAG_CENTER: u64 = 0;
const TAG_TOKEN: u64 = 1;
const TAG_CORRUPT: u64 = 2;
const TAG_CLS: u64 = 3;
const TAG_WEIGHT: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub n_clusters: usize,
    pub tokens_per_cluster: usize,
    pub d: usize,
    pub center_scale: f64,
    pub within_std: f64,
    pub seed: u64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.tokens_per_cluster == 0 {
            return Err(Error::validation("cluster spec needs at least one cluster and one token"));
        }
        if self.d < 2 {
            return Err(Error::validation("cluster spec needs d >= 2"));
        }
        for (name, v) in [("center_scale", self.center_scale), ("within_std", self.within_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Cluster of each token, in row order.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.n_clusters)
            .flat_map(|c| std::iter::repeat_n(c, self.tokens_per_cluster))
            .collect()
    }
}

/// Gaussian clusters laid out cluster by cluster, without a CLS row.
pub fn gen_clusters(spec: &ClusterSpec) -> Result<TokenPopulation> {
    spec.validate()?;
    let n = spec.n_clusters * spec.tokens_per_cluster;
    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|k| rng::normal_vec(spec.seed, &[TAG_CENTER, k as u64], spec.d))
        .collect();
    let mut x = Array2::zeros((n, spec.d));
    for (t, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let c = &centers[t / spec.tokens_per_cluster];
        let noise = rng::normal_vec(spec.seed, &[TAG_TOKEN, t as u64], spec.d);
        for ((v, ck), e) in row.iter_mut().zip(c).zip(noise) {
            *v = spec.center_scale * ck + spec.within_std * e;
        }
    }
    TokenPopulation::new(x, false)
}

/// Adds i.i.d. `N(0, σ²)` noise to every feature; sizes and provenance are
/// kept.
pub fn corrupt(pop: &TokenPopulation, sigma: f64, seed: u64) -> Result<TokenPopulation> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(pop.clone());
    }
    let mut x = pop.features().clone();
    let mut noise = vec![0.0; pop.dim()];
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        rng::fill_normal(seed, &[TAG_CORRUPT, i as u64], &mut noise);
        row.iter_mut().zip(&noise).for_each(|(v, e)| *v += sigma * e);
    }
    TokenPopulation::from_parts(
        x,
        pop.sizes().to_vec(),
        pop.provenance().to_vec(),
        pop.has_cls(),
        pop.original_patches(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub depth: u32,
    pub d: usize,
    pub n_heads: usize,
    pub seed: u64,
    pub reducer: Reducer,
    pub r: usize,
    pub kind: SimilarityKind,
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::validation("toy model depth must be at least 1"));
        }
        if self.d < 2 {
            return Err(Error::validation("toy model needs d >= 2"));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "n_heads = {} must divide d = {}",
                self.n_heads, self.d
            )));
        }
        Ok(())
    }
}

struct BlockWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    w2: Array2<f64>,
}

fn weight(seed: u64, layer: usize, which: u64, d: usize) -> Array2<f64> {
    let v = rng::normal_vec(seed, &[TAG_WEIGHT, layer as u64, which], d * d);
    let scale = 1.0 / (d as f64).sqrt();
    Array2::from_shape_vec((d, d), v.into_iter().map(|x| x * scale).collect()).expect("d x d")
}

impl BlockWeights {
    fn new(seed: u64, layer: usize, d: usize) -> Self {
        BlockWeights {
            wq: weight(seed, layer, 0, d),
            wk: weight(seed, layer, 1, d),
            wv: weight(seed, layer, 2, d),
            wo: weight(seed, layer, 3, d),
            w1: weight(seed, layer, 4, d),
            w2: weight(seed, layer, 5, d),
        }
    }
}

fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head attention output and the head-averaged CLS-to-patch
/// attention, renormalized over patches.
fn attention(z: &Array2<f64>, w: &BlockWeights, n_heads: usize) -> (Array2<f64>, Vec<f64>) {
    let (n, d) = z.dim();
    let dh = d / n_heads;
    let (q, k, v) = (z.dot(&w.wq), z.dot(&w.wk), z.dot(&w.wv));
    let mut out = Array2::zeros((n, d));
    let mut cls = Array1::<f64>::zeros(n);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        cls += &scores.row(0);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    let patch = cls.slice(s![1..]);
    let total = patch.sum();
    (out.dot(&w.wo), patch.iter().map(|a| a / total).collect())
}

fn with_features(pop: &TokenPopulation, x: Array2<f64>) -> Result<TokenPopulation> {
    TokenPopulation::from_parts(
        x,
        pop.sizes().to_vec(),
        pop.provenance().to_vec(),
        pop.has_cls(),
        pop.original_patches(),
    )
}

fn prepend_cls(input: &TokenPopulation, seed: u64) -> Result<TokenPopulation> {
    if input.has_cls() {
        return Ok(input.clone());
    }
    let d = input.dim();
    let mut x = Array2::zeros((input.n_tokens() + 1, d));
    x.row_mut(0)
        .assign(&Array1::from(rng::normal_vec(seed, &[TAG_CLS], d)));
    x.slice_mut(s![1.., ..]).assign(input.features());
    let mut sizes = vec![1];
    sizes.extend_from_slice(input.sizes());
    let mut prov = vec![Vec::new()];
    prov.extend_from_slice(input.provenance());
    TokenPopulation::from_parts(x, sizes, prov, true, input.original_patches())
}

/// Runs the toy model and records, for every block, the population entering
/// the reducer together with its CLS-to-patch attention.
///
/// Each block applies layer norm, multi-head softmax attention with a
/// residual, the reducer, then a residual `tanh` MLP.
pub fn toy_forward(spec: &ToyModelSpec, input: &TokenPopulation) -> Result<LayerTrace> {
    Ok(toy_forward_with_audit(spec, input)?.0)
}

pub fn toy_forward_with_audit(
    spec: &ToyModelSpec,
    input: &TokenPopulation,
) -> Result<(LayerTrace, Vec<LayerRecord>)> {
    spec.validate()?;
    if input.dim() != spec.d {
        return Err(Error::validation(format!(
            "input has d = {}, model expects {}",
            input.dim(),
            spec.d
        )));
    }
    let depth = spec.depth as usize;
    if spec.reducer.is_active() && input.n_patches() <= depth * spec.r {
        return Err(Error::Capacity(format!(
            "{} patch tokens cannot absorb {depth} layers of r = {}",
            input.n_patches(),
            spec.r
        )));
    }
    let mut x = prepend_cls(input, spec.seed)?;
    let mut layers: Vec<TraceLayer> = Vec::with_capacity(depth);
    let mut records = Vec::with_capacity(depth);
    for l in 0..depth {
        let w = BlockWeights::new(spec.seed, l, spec.d);
        let (attn, cls_att) = attention(&layer_norm(x.features()), &w, spec.n_heads);
        let h = with_features(&x, x.features() + &attn)?;
        let prev = match layers.last() {
            Some(p) => Some(inherit_attention(
                p.cls_attention.as_deref().expect("toy layers record attention"),
                &p.population,
                &h,
            )?),
            None => None,
        };
        let ctx = LayerScoringContext {
            population: &h,
            cls_attn: Some(&cls_att),
            prev_cls_attn: prev.as_deref(),
            layer: l,
        };
        let out = reduce_layer(&spec.reducer, &ctx, spec.r, spec.kind).context(|| format!("layer {l}"))?;
        let record = LayerRecord::new(l, &h, out, spec.r);
        let reduced = &record.reduced;
        let mlp = layer_norm(reduced.features()).dot(&w.w1).mapv(f64::tanh).dot(&w.w2);
        x = with_features(reduced, reduced.features() + &mlp)?;
        records.push(record);
        layers.push(TraceLayer {
            population: h,
            cls_attention: Some(cls_att),
        });
    }
    Ok((LayerTrace::new(layers, spec.depth)?, records))
}
