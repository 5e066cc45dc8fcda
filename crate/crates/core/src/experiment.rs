//! Command implementations behind the `tokenlab` binary.
//!
//! Each command reads a [`RunConfig`], does all of its work in memory and
//! returns the files it would write as [`Outputs`]; nothing touches the
//! output directory until [`write_outputs`]. Every CSV starts with a
//! `# tokenlab <version> config=<hash>` line and every JSON object carries
//! `tool_version` and `config_hash`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    frobenius_distance, pairwise_similarity, perturbation_energy, pool_rho_s, ranking_consistency,
    rho_off, energy_gap_sweep, DiagnosticsReport, EnergySignal, EnergySummary, LayerDiagnostics,
    SimilarityKind,
};
use crate::error::{Error, Result, ResultExt};
use crate::recurrence::{
    closed_form, fit_inverse_depth, r_crit_approx, r_crit_exact, simulate, Coupling,
    RecurrenceConfig,
};
use crate::reduce::{reduce_layer, CatisParams, LayerRecord, Reducer};
use crate::rng;
use crate::scoring::{catis_score, inherit_attention, LayerScoringContext, ScoringParams, DEFAULT_SIGMA_FLOOR};
use crate::synth::{corrupt, gen_clusters, toy_forward_with_audit, ClusterSpec, ToyModelSpec};
use crate::tokens::{LayerTrace, TokenPopulation, TraceLayer};
use crate::triage::{partition, TriagePartition};
use crate::trc;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Keys that select where results go rather than what is computed; they do
/// not enter the config hash.
const UNHASHED_KEYS: &[&str] = &["out", "config"];

/// Flat `key = value` run configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("config line {}: expected key=value", i + 1)))?;
            if k.trim().is_empty() {
                return Err(Error::validation(format!("config line {}: empty key", i + 1)));
            }
            cfg.set(k, v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(normalize_key(key), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::validation(format!("missing required parameter `{key}`")))
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::validation(format!("parameter `{key}` has invalid value {v:?}"))),
        }
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        self.parse_value(key)
    }

    pub fn f64_req(&self, key: &str) -> Result<f64> {
        self.require(key)?;
        Ok(self.parse_value(key)?.expect("present"))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn usize_req(&self, key: &str) -> Result<usize> {
        self.require(key)?;
        Ok(self.parse_value(key)?.expect("present"))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::validation(format!("parameter `{key}` has invalid entry {s:?}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Rejects keys the command does not know.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.values.keys() {
            if !allowed.contains(&k.as_str()) && !UNHASHED_KEYS.contains(&k.as_str()) {
                return Err(Error::validation(format!("unknown parameter `{k}`")));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the sorted `key=value` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if !UNHASHED_KEYS.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize()
            .iter()
            .take(8)
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}

/// Files produced by a command, in write order.
pub type Outputs = Vec<(String, Vec<u8>)>;

pub fn write_outputs(out_dir: impl AsRef<Path>, outputs: &Outputs) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    for (name, bytes) in outputs {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

fn csv_file(cfg: &RunConfig, body: &str) -> Vec<u8> {
    format!("# tokenlab {TOOL_VERSION} config={}\n{body}", cfg.hash()).into_bytes()
}

fn json_file(cfg: &RunConfig, payload: impl Serialize) -> Result<Vec<u8>> {
    let mut obj = serde_json::Map::new();
    obj.insert("tool_version".into(), json!(TOOL_VERSION));
    obj.insert("config_hash".into(), json!(cfg.hash()));
    match serde_json::to_value(payload).map_err(|e| Error::Format(e.to_string()))? {
        Value::Object(m) => obj.extend(m),
        other => {
            obj.insert("data".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(obj)).expect("json value");
    text.push('\n');
    Ok(text.into_bytes())
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn similarity_kind(cfg: &RunConfig) -> Result<SimilarityKind> {
    cfg.get("similarity").unwrap_or("cosine").parse()
}

/// A configuration key and its one-line description.
pub type Param = (&'static str, &'static str);

const SCORING_PARAMS: &[Param] = &[
    ("gamma", "momentum coefficient (>= 0)"),
    ("w_cls", "fusion weight of the attention branch, in [0, 1]"),
    ("l_start", "first layer that uses the attention branch"),
    ("sigma_floor", "floor on per-dimension std in norm_F (default 1e-6)"),
];

const REDUCER_PARAMS: &[Param] = &[
    ("reducer", "none | tome | catis | topk-evict | topk-merge (default none)"),
    ("r", "tokens removed per layer"),
    ("similarity", "cosine | dot (default cosine)"),
    ("tau", "triage threshold (catis)"),
    ("evict_ratio", "share of the budget sent to eviction, in [0, 1] (catis)"),
];

const SYNTH_PARAMS: &[Param] = &[
    ("n_clusters", "number of clusters (default 4)"),
    ("tokens_per_cluster", "tokens per cluster (default 16)"),
    ("d", "feature dimension (default 32)"),
    ("center_scale", "scale of cluster centers (default 1)"),
    ("within_std", "within-cluster std (default 0.5)"),
    ("seed", "seed for data and weights (default 0)"),
    ("depth", "toy model depth (default 8)"),
    ("n_heads", "attention heads, must divide d (default 4)"),
];

const DIAGNOSE_PARAMS: &[Param] = &[
    ("trace", "input trace (TRC)"),
    ("corrupted", "corrupted trace with the same layout"),
    ("sigma", "feature noise std when no corrupted trace is given"),
    ("seed", "seed for noise and energy draws (default 0)"),
    ("similarity", "cosine | dot (default cosine)"),
    ("pool_tau", "triage threshold defining the merge pool for pool rho_s"),
    ("energy_sigma", "perturbation std for the energy measurement"),
    ("energy_n_mc", "Monte-Carlo iterations for energy (default 100)"),
    ("energy_layer", "layer used for energy (default 0)"),
];

const RECURRENCE_PARAMS: &[Param] = &[
    ("epsilon0", "baseline distortion rate"),
    ("alpha", "feedback coupling"),
    ("delta", "damage per operation"),
    ("threshold", "collapse threshold T"),
    ("depths", "comma-separated depths (default 12,24,40)"),
    ("r_grid", "comma-separated reduction rates to simulate"),
    ("coupling", "linear | quadratic | sqrt (default linear)"),
];

const ENERGY_PARAMS: &[Param] = &[
    ("np_list", "population sizes (default 32,64,128,256,512)"),
    ("d", "feature dimension (default 64)"),
    ("sigma", "perturbation std (default 0.01)"),
    ("n_mc", "Monte-Carlo iterations (default 500)"),
    ("seed", "seed (default 0)"),
];

const EXPORT_PARAMS: &[Param] = &[("trace", "input trace (TRC)")];

/// A subcommand: its parameter tables and implementation.
pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub params: &'static [&'static [Param]],
    pub run: fn(&RunConfig) -> Result<Outputs>,
}

impl CommandSpec {
    pub fn keys(&self) -> impl Iterator<Item = &'static Param> + '_ {
        self.params.iter().flat_map(|t| t.iter())
    }

    fn check(&self, cfg: &RunConfig) -> Result<()> {
        let allowed: Vec<&str> = self.keys().map(|p| p.0).collect();
        cfg.check_keys(&allowed)
    }
}

pub const COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "diagnose",
        about: "per-layer rho_s, delta_F, rho_off and pool rho_s of a trace",
        params: &[DIAGNOSE_PARAMS, SCORING_PARAMS],
        run: cmd_diagnose,
    },
    CommandSpec {
        name: "recurrence",
        about: "distortion recurrence sweep, critical rates and inverse-depth fit",
        params: &[RECURRENCE_PARAMS],
        run: cmd_recurrence,
    },
    CommandSpec {
        name: "energy",
        about: "pairwise versus unary perturbation energy over population sizes",
        params: &[ENERGY_PARAMS],
        run: cmd_energy,
    },
    CommandSpec {
        name: "reduce",
        about: "apply a reducer layer by layer to a trace or a synthetic run",
        params: &[&[("trace", "input trace; omit for a synthetic run")], REDUCER_PARAMS, SCORING_PARAMS, SYNTH_PARAMS],
        run: cmd_reduce,
    },
    CommandSpec {
        name: "synth",
        about: "write the trace of a toy model run on synthetic clusters",
        params: &[REDUCER_PARAMS, SCORING_PARAMS, SYNTH_PARAMS],
        run: cmd_synth,
    },
    CommandSpec {
        name: "export-merge-groups",
        about: "token groups of every layer of a trace as CSV",
        params: &[EXPORT_PARAMS],
        run: cmd_export_merge_groups,
    },
];

pub fn command(name: &str) -> Option<&'static CommandSpec> {
    COMMANDS.iter().find(|c| c.name == name)
}

fn check_params(name: &str, cfg: &RunConfig) -> Result<()> {
    command(name).expect("registered command").check(cfg)
}

/// Scoring parameters have no built-in defaults except the variance floor.
fn scoring_params(cfg: &RunConfig) -> Result<ScoringParams> {
    let p = ScoringParams {
        gamma: cfg.f64_req("gamma")?,
        w_cls: cfg.f64_req("w_cls")?,
        l_start: cfg.usize_req("l_start")?,
        sigma_floor: cfg.f64_or("sigma_floor", DEFAULT_SIGMA_FLOOR)?,
    };
    p.validate()?;
    Ok(p)
}

fn reducer(cfg: &RunConfig) -> Result<Reducer> {
    match cfg.get("reducer").unwrap_or("none") {
        "none" => Ok(Reducer::None),
        "tome" => Ok(Reducer::Tome),
        "topk-evict" => Ok(Reducer::TopkEvict(scoring_params(cfg)?)),
        "topk-merge" => Ok(Reducer::TopkMerge(scoring_params(cfg)?)),
        "catis" => {
            let tau = cfg.f64_req("tau")?;
            let evict_ratio = cfg.f64_req("evict_ratio")?;
            if tau.is_nan() || tau < 0.0 {
                return Err(Error::validation("tau must be >= 0"));
            }
            if !(0.0..=1.0).contains(&evict_ratio) {
                return Err(Error::validation("evict_ratio must lie in [0, 1]"));
            }
            Ok(Reducer::Catis(CatisParams {
                scoring: scoring_params(cfg)?,
                tau,
                evict_ratio,
            }))
        }
        other => Err(Error::validation(format!("unknown reducer {other:?}"))),
    }
}

fn load_input_trace(cfg: &RunConfig, key: &str) -> Result<LayerTrace> {
    trc::load_trace(cfg.require(key)?).context(|| format!("loading `{key}`"))
}

/// Per-layer diagnostics of a trace against a corrupted copy (given as a
/// second trace or generated with `sigma` and `seed`).
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<Outputs> {
    check_params("diagnose", cfg)?;
    let kind = similarity_kind(cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let pool_tau = cfg.f64_opt("pool_tau")?;
    let scoring = match pool_tau {
        Some(t) if t.is_nan() || t < 0.0 => return Err(Error::validation("pool_tau must be >= 0")),
        Some(_) => Some(scoring_params(cfg)?),
        None => None,
    };
    let energy_sigma = cfg.f64_opt("energy_sigma")?;
    let energy_n_mc = cfg.usize_or("energy_n_mc", 100)?;
    let energy_layer = cfg.usize_or("energy_layer", 0)?;
    let clean = load_input_trace(cfg, "trace")?;
    let corrupted: Vec<TokenPopulation> = if cfg.contains("corrupted") {
        if cfg.contains("sigma") {
            return Err(Error::validation("give either `corrupted` or `sigma`, not both"));
        }
        let c = load_input_trace(cfg, "corrupted")?;
        if c.layers.len() != clean.layers.len() {
            return Err(Error::validation("clean and corrupted traces differ in layer count"));
        }
        c.layers.into_iter().map(|l| l.population).collect()
    } else {
        let sigma = cfg.f64_req("sigma")?;
        clean
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| corrupt(&layer.population, sigma, rng::mix_key(seed, &[l as u64])))
            .collect::<Result<_>>()?
    };
    if energy_sigma.is_some() && energy_layer >= clean.layers.len() {
        return Err(Error::validation(format!("energy_layer {energy_layer} beyond trace")));
    }

    let mut per_layer = Vec::with_capacity(clean.layers.len());
    let mut prev: Option<&TraceLayer> = None;
    for (l, (layer, corr)) in clean.layers.iter().zip(&corrupted).enumerate() {
        let stats = (|| -> Result<LayerDiagnostics> {
            let pop = &layer.population;
            if corr.features().dim() != pop.features().dim() || corr.has_cls() != pop.has_cls() {
                return Err(Error::validation("clean and corrupted layers differ in shape"));
            }
            let s_clean = pairwise_similarity(pop, kind)?;
            let s_corr = pairwise_similarity(corr, kind)?;
            let pool = match (pool_tau, &scoring) {
                (Some(tau), Some(sp)) => {
                    let prev_att = aligned_prev_attention(prev, pop)?;
                    let ctx = LayerScoringContext {
                        population: pop,
                        cls_attn: layer.cls_attention.as_deref(),
                        prev_cls_attn: prev_att.as_deref(),
                        layer: l,
                    };
                    let sets = partition(&catis_score(&ctx, sp)?, tau)?;
                    match pool_rho_s(pop, corr, &sets.merge_pool, kind) {
                        Ok(v) => Some(v),
                        Err(Error::Degenerate(_) | Error::Undefined(_)) => None,
                        Err(e) => return Err(e),
                    }
                }
                _ => None,
            };
            Ok(LayerDiagnostics {
                layer: l,
                rho_s: ranking_consistency(&s_clean, &s_corr)?,
                delta_f: frobenius_distance(&s_clean, &s_corr)?,
                rho_off: rho_off(pop)?,
                pool_rho_s: pool,
            })
        })()
        .context(|| format!("layer {l}"))?;
        per_layer.push(stats);
        prev = Some(layer);
    }
    let energy = match energy_sigma {
        None => None,
        Some(sigma) => {
            let pop = &clean.layers[energy_layer].population;
            let pair = match kind {
                SimilarityKind::Cosine => EnergySignal::PairwiseCosine,
                SimilarityKind::Dot => EnergySignal::PairwiseDot,
            };
            Some(EnergySummary {
                v_pair: perturbation_energy(pop, pair, sigma, energy_n_mc, seed)?,
                v_unary: perturbation_energy(pop, EnergySignal::UnaryNormF, sigma, energy_n_mc, seed)?,
                np: pop.n_patches(),
            })
        }
    };
    let report = DiagnosticsReport {
        per_layer,
        energy,
        similarity: kind,
        feature_source: "trace features".into(),
    };
    report.validate()?;
    Ok(vec![
        ("diagnostics.csv".into(), csv_file(cfg, &report.to_csv())),
        ("diagnostics.json".into(), json_file(cfg, &report)?),
    ])
}

fn aligned_prev_attention(prev: Option<&TraceLayer>, cur: &TokenPopulation) -> Result<Option<Vec<f64>>> {
    match prev {
        Some(TraceLayer {
            population,
            cls_attention: Some(att),
        }) if population.has_cls() == cur.has_cls() => {
            if population.provenance() == cur.provenance() {
                Ok(Some(att.clone()))
            } else {
                inherit_attention(att, population, cur).map(Some)
            }
        }
        _ => Ok(None),
    }
}

#[derive(Serialize)]
struct FitSummary {
    source: &'static str,
    slope: Option<f64>,
    intercept: Option<f64>,
    r2: Option<f64>,
    n_points: usize,
    underdetermined: bool,
}

/// Recurrence sweep over depths and reduction rates, critical rates per
/// depth and the inverse-depth fit.
pub fn cmd_recurrence(cfg: &RunConfig) -> Result<Outputs> {
    check_params("recurrence", cfg)?;
    let coupling = match cfg.get("coupling").unwrap_or("linear") {
        "linear" => Coupling::Linear,
        "quadratic" => Coupling::quadratic(),
        "sqrt" => Coupling::sqrt(),
        other => return Err(Error::validation(format!("unknown coupling {other:?}"))),
    };
    let base = RecurrenceConfig {
        epsilon0: cfg.f64_req("epsilon0")?,
        alpha: cfg.f64_req("alpha")?,
        delta: cfg.f64_req("delta")?,
        r: 1.0,
        depth: 1,
        threshold: cfg.f64_req("threshold")?,
        coupling,
    };
    base.validate()?;
    let depths: Vec<u32> = cfg.list("depths")?.unwrap_or_else(|| vec![12, 24, 40]);
    if depths.is_empty() || depths.contains(&0) {
        return Err(Error::validation("depths must be a non-empty list of positive integers"));
    }
    let r_grid: Vec<f64> = cfg.list("r_grid")?.unwrap_or_default();
    for &r in &r_grid {
        RecurrenceConfig { r, ..base.clone() }.validate()?;
    }

    let mut sweep = String::from("L,r,delta_L,collapsed,status\n");
    let mut traj = String::from("L,alpha,r,l,simulate,closed_form\n");
    for &depth in &depths {
        for &r in &r_grid {
            let c = RecurrenceConfig { r, depth, ..base.clone() };
            match simulate(&c) {
                Ok(t) => {
                    let last = t.final_delta();
                    let _ = writeln!(sweep, "{depth},{r},{last},{},ok", last >= c.threshold);
                    for (l, d) in t.deltas.iter().enumerate() {
                        let cf = closed_form(&c, l as u32).ok();
                        let _ = writeln!(traj, "{depth},{},{r},{l},{d},{}", c.alpha, opt_num(cf));
                    }
                }
                Err(Error::Divergence { layer }) => {
                    let _ = writeln!(sweep, "{depth},{r},,true,diverged@{layer}");
                }
                Err(e) => return Err(e),
            }
        }
    }

    let mut rcrit = String::from("L,r_crit_exact,r_crit_approx\n");
    let mut points = Vec::new();
    for &depth in &depths {
        let c = RecurrenceConfig { depth, ..base.clone() };
        let exact = match r_crit_exact(&c) {
            Ok(v) => Some(v),
            Err(Error::UseSimulate | Error::Contract(_)) => None,
            Err(e) => return Err(e),
        };
        let approx = match r_crit_approx(&c) {
            Ok(v) => Some(v),
            Err(Error::Contract(_)) => None,
            Err(e) => return Err(e),
        };
        let _ = writeln!(rcrit, "{depth},{},{}", opt_num(exact), opt_num(approx));
        let fit_value = if base.alpha == 0.0 { approx } else { exact };
        if let Some(v) = fit_value {
            points.push((depth, v));
        }
    }
    let fit = match fit_inverse_depth(&points) {
        Ok(f) => FitSummary {
            source: "r_crit_exact",
            slope: Some(f.slope),
            intercept: Some(f.intercept),
            r2: Some(f.r2),
            n_points: f.n_points,
            underdetermined: f.underdetermined,
        },
        Err(Error::Validation(_)) => FitSummary {
            source: "r_crit_exact",
            slope: None,
            intercept: None,
            r2: None,
            n_points: points.len(),
            underdetermined: true,
        },
        Err(e) => return Err(e),
    };
    Ok(vec![
        ("sweep.csv".into(), csv_file(cfg, &sweep)),
        ("trajectories.csv".into(), csv_file(cfg, &traj)),
        ("rcrit.csv".into(), csv_file(cfg, &rcrit)),
        ("fit.json".into(), json_file(cfg, &fit)?),
    ])
}

/// Perturbation-energy sweep over population sizes.
pub fn cmd_energy(cfg: &RunConfig) -> Result<Outputs> {
    check_params("energy", cfg)?;
    let np_list: Vec<usize> = cfg.list("np_list")?.unwrap_or_else(|| vec![32, 64, 128, 256, 512]);
    let d = cfg.usize_or("d", 64)?;
    let sigma = cfg.f64_or("sigma", 0.01)?;
    let n_mc = cfg.usize_or("n_mc", 500)?;
    let seed = cfg.u64_or("seed", 0)?;
    let sweep = energy_gap_sweep(&np_list, d, sigma, n_mc, seed)?;
    let mut csv = String::from("np,v_pair,v_unary,ratio\n");
    for p in &sweep.points {
        let _ = writeln!(csv, "{},{},{},{}", p.np, p.v_pair, p.v_unary, p.ratio);
    }
    let finite = |v: f64| v.is_finite().then_some(v);
    let summary = json!({
        "slope": finite(sweep.slope),
        "intercept": finite(sweep.intercept),
        "r2": finite(sweep.r2),
        "degenerate": sweep.degenerate,
        "d": d,
        "sigma": sigma,
        "n_mc": n_mc,
        "seed": seed,
        "points": sweep.points,
    });
    Ok(vec![
        ("energy_points.csv".into(), csv_file(cfg, &csv)),
        ("energy_summary.json".into(), json_file(cfg, summary)?),
    ])
}

fn toy_spec(cfg: &RunConfig, reducer: Reducer, r: usize, kind: SimilarityKind) -> Result<(ClusterSpec, ToyModelSpec)> {
    let seed = cfg.u64_or("seed", 0)?;
    let clusters = ClusterSpec {
        n_clusters: cfg.usize_or("n_clusters", 4)?,
        tokens_per_cluster: cfg.usize_or("tokens_per_cluster", 16)?,
        d: cfg.usize_or("d", 32)?,
        center_scale: cfg.f64_or("center_scale", 1.0)?,
        within_std: cfg.f64_or("within_std", 0.5)?,
        seed,
    };
    let depth = cfg.usize_or("depth", 8)?;
    let model = ToyModelSpec {
        depth: u32::try_from(depth).map_err(|_| Error::validation("depth too large"))?,
        d: clusters.d,
        n_heads: cfg.usize_or("n_heads", 4)?,
        seed,
        reducer,
        r,
        kind,
    };
    clusters.validate()?;
    model.validate()?;
    Ok((clusters, model))
}

/// Averages the rows of `src` into the token groups of `groups`.
///
/// Every token of `src` must lie inside one group (tokens outside all
/// groups, i.e. evicted patches, are dropped). Groups that match a single
/// `src` token copy its row unchanged.
pub fn regroup(src: &TokenPopulation, groups: &TokenPopulation) -> Result<TokenPopulation> {
    if src.has_cls() != groups.has_cls() || src.dim() != groups.dim() {
        return Err(Error::validation("trace layers differ in layout"));
    }
    let mut owner: HashMap<u32, usize> = HashMap::new();
    for row in src.patch_rows() {
        for &p in &src.provenance()[row] {
            owner.insert(p, row);
        }
    }
    let mut x = Array2::zeros((groups.n_tokens(), groups.dim()));
    if groups.has_cls() {
        x.row_mut(0).assign(&src.row(0));
    }
    for g in groups.patch_rows() {
        let mut members: Vec<usize> = groups.provenance()[g]
            .iter()
            .map(|p| {
                owner
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::validation(format!("patch {p} missing from trace layer")))
            })
            .collect::<Result<_>>()?;
        members.sort_unstable();
        members.dedup();
        let covered: u32 = members.iter().map(|&m| src.sizes()[m]).sum();
        if covered != groups.sizes()[g] {
            return Err(Error::validation("trace tokens straddle reduced token groups"));
        }
        if let [only] = members[..] {
            x.row_mut(g).assign(&src.row(only));
        } else {
            let mut acc = ndarray::Array1::<f64>::zeros(groups.dim());
            for &m in &members {
                acc.scaled_add(f64::from(src.sizes()[m]), &src.row(m));
            }
            acc /= f64::from(covered);
            x.row_mut(g).assign(&acc);
        }
    }
    TokenPopulation::from_parts(
        x,
        groups.sizes().to_vec(),
        groups.provenance().to_vec(),
        groups.has_cls(),
        groups.original_patches(),
    )
}

/// Replays a reducer over a recorded trace: the token grouping produced at
/// layer `l` is imposed on the recorded features of layer `l + 1` before
/// that layer is reduced. Returns the populations entering the reducer and
/// the per-layer records.
pub fn replay_trace(
    trace: &LayerTrace,
    reducer: &Reducer,
    r: usize,
    kind: SimilarityKind,
) -> Result<(LayerTrace, Vec<LayerRecord>)> {
    let mut layers: Vec<TraceLayer> = Vec::with_capacity(trace.layers.len());
    let mut records: Vec<LayerRecord> = Vec::with_capacity(trace.layers.len());
    for (l, layer) in trace.layers.iter().enumerate() {
        let step = (|| -> Result<(TraceLayer, LayerRecord)> {
            let input = match records.last() {
                None => layer.clone(),
                Some(rec) if rec.reduced.provenance() == layer.population.provenance() => layer.clone(),
                Some(rec) => {
                    let population = regroup(&layer.population, &rec.reduced)?;
                    let cls_attention = match &layer.cls_attention {
                        Some(a) => Some(inherit_attention(a, &layer.population, &population)?),
                        None => None,
                    };
                    TraceLayer {
                        population,
                        cls_attention,
                    }
                }
            };
            let pop = &input.population;
            if reducer.is_active() && r >= pop.n_patches() {
                return Err(Error::Capacity(format!(
                    "budget r = {r} exhausts the {} remaining patch tokens",
                    pop.n_patches()
                )));
            }
            let prev = aligned_prev_attention(layers.last(), pop)?;
            let ctx = LayerScoringContext {
                population: pop,
                cls_attn: input.cls_attention.as_deref(),
                prev_cls_attn: prev.as_deref(),
                layer: l,
            };
            let out = reduce_layer(reducer, &ctx, r, kind)?;
            let record = LayerRecord::new(l, pop, out, r);
            Ok((input, record))
        })()
        .context(|| format!("layer {l}"))?;
        layers.push(step.0);
        records.push(step.1);
    }
    Ok((LayerTrace::new(layers, trace.depth)?, records))
}

fn merge_groups_csv(rows: impl IntoIterator<Item = (usize, TokenPopulation)>) -> String {
    let mut csv = String::from("layer,token_index,size,patches\n");
    for (l, pop) in rows {
        for row in pop.patch_rows() {
            let patches: Vec<String> = pop.provenance()[row].iter().map(u32::to_string).collect();
            let _ = writeln!(csv, "{l},{row},{},{}", pop.sizes()[row], patches.join(" "));
        }
    }
    csv
}

fn trace_bytes(trace: &LayerTrace) -> Result<Vec<u8>> {
    trace.validate()?;
    let mut buf = Vec::new();
    trc::write_trace(trace, &mut buf)?;
    Ok(buf)
}

#[derive(Serialize)]
struct LayerPartition<'a> {
    layer: usize,
    #[serde(flatten)]
    partition: &'a TriagePartition,
}

/// Applies a reducer layer by layer to a trace (`trace`) or to a toy model
/// run on synthetic clusters, and writes the reducer inputs as a trace, the
/// triage partitions, the post-reduction token groups and a budget audit.
pub fn cmd_reduce(cfg: &RunConfig) -> Result<Outputs> {
    check_params("reduce", cfg)?;
    let red = reducer(cfg)?;
    let r = if red.is_active() { cfg.usize_req("r")? } else { cfg.usize_or("r", 0)? };
    let kind = similarity_kind(cfg)?;
    let (trace, records) = if cfg.contains("trace") {
        if let Some((k, _)) = SYNTH_PARAMS.iter().find(|(k, _)| cfg.contains(k)) {
            return Err(Error::validation(format!("`{k}` only applies to synthetic runs")));
        }
        let input = load_input_trace(cfg, "trace")?;
        replay_trace(&input, &red, r, kind)?
    } else {
        let (clusters, model) = toy_spec(cfg, red, r, kind)?;
        toy_forward_with_audit(&model, &gen_clusters(&clusters)?)?
    };

    let mut audit = String::from("layer,patches_in,patches_out,r,r_e,r_m,protected,rerouted,total_size\n");
    for rec in &records {
        let a = &rec.audit;
        let o = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            audit,
            "{},{},{},{},{},{},{},{},{}",
            a.layer,
            a.patches_in,
            a.patches_out,
            a.r,
            o(a.r_e),
            o(a.r_m),
            o(a.protected),
            a.rerouted,
            a.total_size
        );
    }
    let partitions: Vec<LayerPartition> = records
        .iter()
        .enumerate()
        .filter_map(|(l, rec)| rec.partition.as_ref().map(|p| LayerPartition { layer: l, partition: p }))
        .collect();
    let groups = merge_groups_csv(records.iter().enumerate().map(|(l, rec)| (l, rec.reduced.clone())));
    Ok(vec![
        ("reduced.trc".into(), trace_bytes(&trace)?),
        (
            "partitions.json".into(),
            json_file(cfg, json!({ "reducer": red.name(), "r": r, "layers": partitions }))?,
        ),
        ("merge_groups.csv".into(), csv_file(cfg, &groups)),
        ("audit.csv".into(), csv_file(cfg, &audit)),
    ])
}

/// Generates synthetic clusters, runs the toy model and writes its trace.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Outputs> {
    check_params("synth", cfg)?;
    let red = reducer(cfg)?;
    let r = if red.is_active() { cfg.usize_req("r")? } else { cfg.usize_or("r", 0)? };
    let (clusters, model) = toy_spec(cfg, red, r, similarity_kind(cfg)?)?;
    let (trace, _) = toy_forward_with_audit(&model, &gen_clusters(&clusters)?)?;
    Ok(vec![("trace.trc".into(), trace_bytes(&trace)?)])
}

/// Token groups (size and patch list) of every layer of a trace.
pub fn cmd_export_merge_groups(cfg: &RunConfig) -> Result<Outputs> {
    check_params("export-merge-groups", cfg)?;
    let trace = load_input_trace(cfg, "trace")?;
    let csv = merge_groups_csv(trace.layers.into_iter().map(|l| l.population).enumerate());
    Ok(vec![("merge_groups.csv".into(), csv_file(cfg, &csv))])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_and_hash() {
        let a = RunConfig::parse("# comment\nalpha = 0.5\n\nnp-list=1,2,3\n").unwrap();
        assert_eq!(a.get("alpha"), Some("0.5"));
        assert_eq!(a.list::<usize>("np_list").unwrap(), Some(vec![1, 2, 3]));
        let mut b = RunConfig::new();
        b.set("np_list", "1,2,3");
        b.set("alpha", "0.5");
        assert_eq!(a.hash(), b.hash());
        b.set("out", "/tmp/x");
        assert_eq!(a.hash(), b.hash());
        b.set("alpha", "0.6");
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        assert!(RunConfig::parse("novalue").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::new();
        c.set("bogus", 1);
        assert!(cmd_energy(&c).is_err());
    }

    #[test]
    fn scoring_params_are_required() {
        let mut c = RunConfig::new();
        c.set("reducer", "catis");
        c.set("tau", 1.0);
        c.set("evict_ratio", 0.5);
        assert!(reducer(&c).is_err());
        c.set("gamma", 0.5);
        c.set("w_cls", 0.5);
        c.set("l_start", 2);
        assert!(matches!(reducer(&c).unwrap(), Reducer::Catis(_)));
    }

    #[test]
    fn single_depth_fit_is_underdetermined() {
        let c = RunConfig::parse("epsilon0=0.1\nalpha=0.5\ndelta=0.1\nthreshold=1\ndepths=12\n").unwrap();
        let out = cmd_recurrence(&c).unwrap();
        let fit: Value = serde_json::from_slice(&out[3].1).unwrap();
        assert_eq!(fit["underdetermined"], json!(true));
        assert!(fit["slope"].is_null());
    }

    #[test]
    fn zero_alpha_leaves_closed_form_empty() {
        let c = RunConfig::parse("epsilon0=0.1\nalpha=0\ndelta=0.1\nthreshold=1\ndepths=4\nr_grid=2\n").unwrap();
        let out = cmd_recurrence(&c).unwrap();
        let traj = String::from_utf8(out[1].1.clone()).unwrap();
        let rows: Vec<&str> = traj.lines().skip(2).collect();
        assert_eq!(rows.len(), 5);
        for (l, row) in rows.iter().enumerate() {
            let f: Vec<&str> = row.split(',').collect();
            assert_eq!(f[5], "");
            let v: f64 = f[4].parse().unwrap();
            assert!((v - 0.02 * l as f64).abs() < 1e-15);
        }
    }
}
