//! The distortion recurrence
//!
//! ```text
//! Δ(l+1) = Δ(l) + ε(Δ(l)) · r · δ,    Δ(0) = 0
//! ```
//!
//! with a monotone coupling `ε`, its closed form under linear coupling
//! `ε = ε0 + αΔ`, the critical reduction rate at which `Δ(L)` reaches the
//! collapse threshold `T`, the dual-channel (merge + evict) variant, and the
//! least-squares fit of `r_crit` against `1/L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::LinearFit;

/// Values beyond this are reported as divergence instead of overflowing.
pub const DIVERGENCE_CUTOFF: f64 = 1e300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Coupling {
    /// `ε0 + αΔ`
    Linear,
    /// `ε0 + αΔ^p` with `p > 0`
    Power { exponent: f64 },
    /// Piecewise-linear `ε(Δ)` through `(Δ, ε)` knots, flat beyond the ends.
    /// `ε0` and `α` are ignored.
    Tabulated { knots: Vec<(f64, f64)> },
}

impl Coupling {
    pub fn quadratic() -> Self {
        Coupling::Power { exponent: 2.0 }
    }

    pub fn sqrt() -> Self {
        Coupling::Power { exponent: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Coupling::Linear => Ok(()),
            Coupling::Power { exponent } => {
                if *exponent > 0.0 && exponent.is_finite() {
                    Ok(())
                } else {
                    Err(Error::validation(format!("coupling exponent must be positive, got {exponent}")))
                }
            }
            Coupling::Tabulated { knots } => {
                if knots.is_empty() {
                    return Err(Error::validation("tabulated coupling needs at least one knot"));
                }
                if knots.iter().any(|(d, e)| !d.is_finite() || !e.is_finite() || *e < 0.0) {
                    return Err(Error::validation("tabulated coupling knots must be finite, ε ≥ 0"));
                }
                for w in knots.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::validation("tabulated Δ knots must be strictly increasing"));
                    }
                    if w[1].1 < w[0].1 {
                        return Err(Error::validation("tabulated coupling is not monotone non-decreasing"));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, eps0: f64, alpha: f64, delta: f64) -> f64 {
        match self {
            Coupling::Linear => eps0 + alpha * delta,
            Coupling::Power { exponent } => eps0 + alpha * delta.powf(*exponent),
            Coupling::Tabulated { knots } => interpolate(knots, delta),
        }
    }
}

fn interpolate(knots: &[(f64, f64)], x: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let i = knots.partition_point(|k| k.0 <= x);
    let (x0, y0) = knots[i - 1];
    let (x1, y1) = knots[i];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceConfig {
    pub epsilon0: f64,
    pub alpha: f64,
    pub delta: f64,
    pub r: f64,
    pub depth: u32,
    pub threshold: f64,
    pub coupling: Coupling,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RecurrenceConfig {
    pub fn linear(epsilon0: f64, alpha: f64, delta: f64, r: f64, depth: u32, threshold: f64) -> Self {
        RecurrenceConfig {
            epsilon0,
            alpha,
            delta,
            r,
            depth,
            threshold,
            coupling: Coupling::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("epsilon0", self.epsilon0)?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        positive("delta", self.delta)?;
        positive("r", self.r)?;
        positive("threshold", self.threshold)?;
        if self.depth == 0 {
            return Err(Error::validation("depth must be at least 1"));
        }
        self.coupling.validate()
    }

    fn require_linear(&self) -> Result<()> {
        self.validate()?;
        if self.coupling != Coupling::Linear {
            return Err(Error::Contract("closed forms require linear coupling".into()));
        }
        if self.alpha == 0.0 {
            return Err(Error::UseSimulate);
        }
        Ok(())
    }
}

/// `deltas[l]` is the distortion after `l` layers; `increments[l]` is the
/// step applied at layer `l`, so `deltas[l + 1] = deltas[l] + increments[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub deltas: Vec<f64>,
    pub increments: Vec<f64>,
}

impl Trajectory {
    pub fn final_delta(&self) -> f64 {
        *self.deltas.last().expect("trajectory has Δ(0)")
    }

    /// First layer at which the distortion reaches `threshold`.
    pub fn crossing_layer(&self, threshold: f64) -> Option<usize> {
        self.deltas.iter().position(|&d| d >= threshold)
    }

    pub fn is_super_linear(&self) -> bool {
        self.increments.windows(2).all(|w| w[1] >= w[0])
    }
}

fn step_all(depth: u32, mut step: impl FnMut(usize, f64) -> (f64, f64)) -> Result<Trajectory> {
    let n = depth as usize;
    let mut deltas = Vec::with_capacity(n + 1);
    let mut increments = Vec::with_capacity(n);
    let mut delta = 0.0;
    deltas.push(delta);
    for l in 0..n {
        let (next, inc) = step(l, delta);
        if !(next.abs() <= DIVERGENCE_CUTOFF) {
            return Err(Error::Divergence { layer: l + 1 });
        }
        delta = next;
        deltas.push(delta);
        increments.push(inc);
    }
    Ok(Trajectory { deltas, increments })
}

pub fn simulate(cfg: &RecurrenceConfig) -> Result<Trajectory> {
    cfg.validate()?;
    step_all(cfg.depth, |_, d| {
        let inc = cfg.coupling.eval(cfg.epsilon0, cfg.alpha, d) * cfg.r * cfg.delta;
        (d + inc, inc)
    })
}

/// `(ε0/α)(β^l − 1)` with `β = 1 + αrδ`.
pub fn closed_form(cfg: &RecurrenceConfig, l: u32) -> Result<f64> {
    cfg.require_linear()?;
    let x = cfg.alpha * cfg.r * cfg.delta;
    Ok(cfg.epsilon0 / cfg.alpha * (f64::from(l) * x.ln_1p()).exp_m1())
}

/// Per-layer reduction at which `Δ(L)` equals `T` exactly: solves
/// `β^L = 1 + αT/ε0` for `β` and returns `(β − 1)/(αδ)`.
pub fn r_crit_exact(cfg: &RecurrenceConfig) -> Result<f64> {
    cfg.require_linear()?;
    let log_beta = (cfg.alpha * cfg.threshold / cfg.epsilon0).ln_1p() / f64::from(cfg.depth);
    Ok(log_beta.exp_m1() / (cfg.alpha * cfg.delta))
}

/// `ln(1 + αT/ε0)/(αδL)`, valid when `αrδ ≪ 1`. At `α = 0` returns the
/// limit `T/(ε0δL)`.
pub fn r_crit_approx(cfg: &RecurrenceConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.coupling != Coupling::Linear {
        return Err(Error::Contract("closed forms require linear coupling".into()));
    }
    let l = f64::from(cfg.depth);
    if cfg.alpha == 0.0 {
        return Ok(cfg.threshold / (cfg.epsilon0 * cfg.delta * l));
    }
    Ok((cfg.alpha * cfg.threshold / cfg.epsilon0).ln_1p() / (cfg.alpha * cfg.delta * l))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub r_m: f64,
    pub r_e: f64,
    /// Protected fraction of the layer's tokens.
    pub f_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualChannelConfig {
    pub eps_m0: f64,
    pub eps_e0: f64,
    pub alpha: f64,
    pub delta_m: f64,
    pub delta_e: f64,
    pub r: f64,
    pub depth: u32,
    pub threshold: f64,
    pub coupling: Coupling,
    pub schedule: Vec<LayerBudget>,
}

/// Tolerance on `r_m + r_e = r(1 − f_p)`.
pub const BUDGET_TOL: f64 = 1e-9;

impl DualChannelConfig {
    /// Same budget split at every layer.
    pub fn uniform_schedule(r: f64, depth: u32, evict_share: f64, f_p: f64) -> Vec<LayerBudget> {
        let avail = r * (1.0 - f_p);
        let r_e = avail * evict_share;
        vec![LayerBudget { r_m: avail - r_e, r_e, f_p }; depth as usize]
    }

    pub fn validate(&self) -> Result<()> {
        positive("eps_m0", self.eps_m0)?;
        positive("eps_e0", self.eps_e0)?;
        positive("delta_m", self.delta_m)?;
        positive("delta_e", self.delta_e)?;
        positive("r", self.r)?;
        positive("threshold", self.threshold)?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation("alpha must be non-negative"));
        }
        if self.delta_e > self.delta_m {
            return Err(Error::validation(format!(
                "delta_e ({}) must not exceed delta_m ({})",
                self.delta_e, self.delta_m
            )));
        }
        if self.depth == 0 {
            return Err(Error::validation("depth must be at least 1"));
        }
        if self.schedule.len() != self.depth as usize {
            return Err(Error::validation(format!(
                "schedule has {} entries for depth {}",
                self.schedule.len(),
                self.depth
            )));
        }
        for (l, b) in self.schedule.iter().enumerate() {
            if !(0.0..=1.0).contains(&b.f_p) || b.r_m < 0.0 || b.r_e < 0.0 {
                return Err(Error::validation(format!("layer {l}: budget out of range")));
            }
            let want = self.r * (1.0 - b.f_p);
            if (b.r_m + b.r_e - want).abs() > BUDGET_TOL {
                return Err(Error::validation(format!(
                    "layer {l}: r_m + r_e = {} but r(1 - f_p) = {want}",
                    b.r_m + b.r_e
                )));
            }
        }
        self.coupling.validate()
    }
}

pub fn simulate_dual(cfg: &DualChannelConfig) -> Result<Trajectory> {
    cfg.validate()?;
    step_all(cfg.depth, |l, d| {
        let b = cfg.schedule[l];
        let merged = d + cfg.coupling.eval(cfg.eps_m0, cfg.alpha, d) * b.r_m * cfg.delta_m;
        let next = merged + cfg.coupling.eval(cfg.eps_e0, cfg.alpha, d) * b.r_e * cfg.delta_e;
        (next, next - d)
    })
}

/// Least-squares fit of `r_crit` against `1/L`.
pub fn fit_inverse_depth(points: &[(u32, f64)]) -> Result<LinearFit> {
    if points.iter().any(|&(l, r)| l == 0 || !r.is_finite()) {
        return Err(Error::validation("inverse-depth points need L > 0 and finite r_crit"));
    }
    let xs: Vec<f64> = points.iter().map(|&(l, _)| 1.0 / f64::from(l)).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, r)| r).collect();
    LinearFit::ols(&xs, &ys)
}
