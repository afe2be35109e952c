//! Global ranking from a preference count matrix.
//!
//! Four aggregators are provided:
//!
//! * [`map_estimate`]: Thurstone Case V log-likelihood plus a ridge prior on
//!   the scale values, maximized on the zero-sum subspace.
//! * [`mle_estimate`]: the same likelihood without the prior. It has no finite
//!   maximizer when some win edge leaves a strongly connected component of the
//!   win graph (e.g. an undefeated item); that case is flagged, not fatal.
//! * [`perron_scores`]: principal eigenvector of a smoothed reciprocal ratio
//!   matrix.
//! * [`trueskill_scores`]: sequential two-player TrueSkill over the ordered
//!   stream of consistent outcomes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Method, PairOutcome, PreferenceMatrix, RankingResult};
use crate::numerics::{log_cdf, mills, mills_w};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Weight λ of the `-λ Σ q²/2` prior; 1.0 is the plain Gaussian prior.
    pub ridge_weight: f64,
    /// Stop once the projected gradient norm is at or below this.
    pub tol: f64,
    pub max_iter: usize,
    /// First trial step; later steps are Barzilai–Borwein estimates, halved
    /// until the ascent test passes.
    pub step: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            ridge_weight: 1.0,
            tol: 1e-8,
            max_iter: 10_000,
            step: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub step: f64,
    /// Iterates with any |q| above this are treated as diverging.
    pub divergence_cap: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            step: 0.1,
            divergence_cap: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerronConfig {
    /// Additive smoothing `a` in `A_ij = (C_ij + a) / (C_ji + a)`.
    pub smoothing: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PerronConfig {
    fn default() -> Self {
        Self {
            smoothing: 0.5,
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrueSkillConfig {
    pub mu0: f64,
    pub sigma0: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for TrueSkillConfig {
    fn default() -> Self {
        Self {
            mu0: 25.0,
            sigma0: 25.0 / 3.0,
            beta: 25.0 / 6.0,
            tau: 25.0 / 300.0,
        }
    }
}

/// Settings for every aggregator, so callers can run any subset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateConfig {
    pub map: MapConfig,
    pub mle: MleConfig,
    pub perron: PerronConfig,
    pub trueskill: TrueSkillConfig,
}

/// Runs one aggregator. `outcomes` is only read by TrueSkill, which consumes
/// it in order.
pub fn run_method(
    method: Method,
    matrix: &PreferenceMatrix,
    outcomes: &[PairOutcome],
    cfg: &AggregateConfig,
) -> Result<RankingResult> {
    match method {
        Method::Map => map_estimate(matrix, &cfg.map),
        Method::Mle => mle_estimate(matrix, &cfg.mle),
        Method::Perron => perron_scores(matrix, &cfg.perron),
        Method::TrueSkill => trueskill_scores(matrix.ids(), outcomes, &cfg.trueskill),
    }
}

/// Thurstone Case V objective `Σ C_ij log Φ(q_i − q_j) − λ Σ q_i²/2`.
pub fn objective(matrix: &PreferenceMatrix, q: &[f64], ridge_weight: f64) -> f64 {
    let edges = matrix.nonzero();
    objective_on(&edges, q, ridge_weight)
}

fn objective_on(edges: &[(usize, usize, u64)], q: &[f64], ridge: f64) -> f64 {
    let ll: f64 = edges
        .iter()
        .map(|&(i, j, c)| c as f64 * log_cdf(q[i] - q[j]))
        .sum();
    let prior: f64 = q.iter().map(|x| x * x).sum::<f64>();
    ll - 0.5 * ridge * prior
}

/// Gradient projected onto the zero-sum subspace.
fn projected_gradient(edges: &[(usize, usize, u64)], q: &[f64], ridge: f64, out: &mut [f64]) {
    for (g, &x) in out.iter_mut().zip(q) {
        *g = -ridge * x;
    }
    for &(i, j, c) in edges {
        let v = c as f64 * mills(q[i] - q[j]);
        out[i] += v;
        out[j] -= v;
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    for g in out.iter_mut() {
        *g -= mean;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Ascent {
    q: Vec<f64>,
    iterations: usize,
    grad_norm: f64,
    converged: bool,
    capped: bool,
}

/// Projected gradient ascent from the origin.
///
/// A trial step is accepted when it gives Armijo sufficient increase, or when
/// the directional derivative at the trial point is still non-negative; along
/// a line a concave function cannot have dropped below its starting value
/// while its slope is still non-negative, so either test keeps the objective
/// non-decreasing. The second test matters once increases fall below the
/// rounding of the objective.
#[allow(clippy::too_many_arguments)]
fn ascend(
    edges: &[(usize, usize, u64)],
    n: usize,
    ridge: f64,
    tol: f64,
    max_iter: usize,
    step0: f64,
    cap: Option<f64>,
    mut trace: Option<&mut Vec<f64>>,
) -> Ascent {
    const ARMIJO: f64 = 1e-4;
    const MIN_STEP: f64 = 1e-20;

    let mut q = vec![0.0; n];
    let mut g = vec![0.0; n];
    projected_gradient(edges, &q, ridge, &mut g);
    let mut f = objective_on(edges, &q, ridge);
    if let Some(t) = trace.as_deref_mut() {
        t.push(f);
    }
    let mut gnorm = dot(&g, &g).sqrt();
    let mut step = step0;
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut iterations = 0;
    let mut capped = false;

    while gnorm > tol && iterations < max_iter {
        iterations += 1;
        let gg = gnorm * gnorm;
        let mut s = step;
        let accepted = loop {
            for k in 0..n {
                trial[k] = q[k] + s * g[k];
            }
            let f_trial = objective_on(edges, &trial, ridge);
            projected_gradient(edges, &trial, ridge, &mut g_trial);
            let sufficient = f_trial - f >= ARMIJO * s * gg;
            let still_rising = dot(&g_trial, &g) >= 0.0 && f_trial >= f - 1e-12 * f.abs().max(1.0);
            if f_trial.is_finite() && (sufficient || still_rising) {
                break Some(f_trial);
            }
            s *= 0.5;
            if s < MIN_STEP {
                break None;
            }
        };
        let Some(f_new) = accepted else { break };

        // Barzilai–Borwein estimate for the next trial step.
        let mut sy = 0.0;
        let mut ss = 0.0;
        for k in 0..n {
            let dq = trial[k] - q[k];
            sy += dq * (g_trial[k] - g[k]);
            ss += dq * dq;
        }
        step = if sy < 0.0 { (ss / -sy).clamp(1e-12, 1e6) } else { (2.0 * s).min(1e6) };

        std::mem::swap(&mut q, &mut trial);
        std::mem::swap(&mut g, &mut g_trial);
        f = f_new;
        if let Some(t) = trace.as_deref_mut() {
            t.push(f);
        }
        gnorm = dot(&g, &g).sqrt();

        if let Some(cap) = cap {
            if q.iter().any(|x| x.abs() > cap) {
                capped = true;
                break;
            }
        }
    }

    // Re-centre to remove floating drift from the zero-sum subspace.
    let mean = q.iter().sum::<f64>() / n as f64;
    for x in q.iter_mut() {
        *x -= mean;
    }
    Ascent {
        converged: gnorm <= tol && !capped,
        q,
        iterations,
        grad_norm: gnorm,
        capped,
    }
}

fn finish(
    method: Method,
    matrix: &PreferenceMatrix,
    scores: Vec<f64>,
    converged: bool,
    iterations: usize,
    grad_norm: Option<f64>,
) -> Result<RankingResult> {
    let scores_0_100 = rescale_to_0_100(&scores)?;
    Ok(RankingResult {
        method,
        ids: matrix.ids().to_vec(),
        scores,
        scores_0_100,
        sigma: None,
        rounds_used: 0,
        converged,
        iterations,
        final_gradient_norm: grad_norm,
    })
}

fn check_map(cfg: &MapConfig) -> Result<()> {
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 || !(cfg.ridge_weight >= 0.0) || !(cfg.step > 0.0) {
        return Err(Error::invalid(format!("bad MAP config {cfg:?}")));
    }
    Ok(())
}

/// MAP scale values under the ridge prior.
pub fn map_estimate(matrix: &PreferenceMatrix, cfg: &MapConfig) -> Result<RankingResult> {
    map_estimate_traced(matrix, cfg, None)
}

/// [`map_estimate`] that also records the objective after every accepted
/// step (the first entry is the value at the origin).
pub fn map_estimate_traced(
    matrix: &PreferenceMatrix,
    cfg: &MapConfig,
    trace: Option<&mut Vec<f64>>,
) -> Result<RankingResult> {
    check_map(cfg)?;
    let edges = matrix.nonzero();
    let run = ascend(&edges, matrix.n(), cfg.ridge_weight, cfg.tol, cfg.max_iter, cfg.step, None, trace);
    finish(Method::Map, matrix, run.q, run.converged, run.iterations, Some(run.grad_norm))
}

/// Maximum-likelihood scale values (no prior).
///
/// `converged` is false when the likelihood is unbounded (some win edge
/// crosses strongly connected components of the win graph), when the iterate
/// passes `divergence_cap`, or when `max_iter` runs out. The returned scores
/// are then the last iterate clamped to `±divergence_cap`.
pub fn mle_estimate(matrix: &PreferenceMatrix, cfg: &MleConfig) -> Result<RankingResult> {
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 || !(cfg.step > 0.0) || !(cfg.divergence_cap > 0.0) {
        return Err(Error::invalid(format!("bad MLE config {cfg:?}")));
    }
    let edges = matrix.nonzero();
    let unbounded = likelihood_unbounded(matrix);
    let run = ascend(
        &edges,
        matrix.n(),
        0.0,
        cfg.tol,
        cfg.max_iter,
        cfg.step,
        Some(cfg.divergence_cap),
        None,
    );
    let cap = cfg.divergence_cap;
    let scores = run.q.iter().map(|x| x.clamp(-cap, cap)).collect();
    let converged = run.converged && !unbounded && !run.capped;
    finish(Method::Mle, matrix, scores, converged, run.iterations, Some(run.grad_norm))
}

/// True when the Thurstone likelihood has no finite maximizer: some win
/// `i → j` has no chain of wins leading from `j` back to `i`.
pub fn likelihood_unbounded(matrix: &PreferenceMatrix) -> bool {
    let n = matrix.n();
    let comp = strong_components(n, &matrix.nonzero());
    matrix.nonzero().iter().any(|&(i, j, _)| comp[i] != comp[j])
}

/// Kosaraju's algorithm; returns a component label per node.
fn strong_components(n: usize, edges: &[(usize, usize, u64)]) -> Vec<usize> {
    let mut fwd = vec![Vec::new(); n];
    let mut rev = vec![Vec::new(); n];
    for &(i, j, _) in edges {
        fwd[i].push(j);
        rev[j].push(i);
    }
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![(start, 0usize)];
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&succ) = fwd[node].get(*next) {
                *next += 1;
                if !seen[succ] {
                    seen[succ] = true;
                    stack.push((succ, 0));
                }
            } else {
                order.push(node);
                stack.pop();
            }
        }
    }
    let mut comp = vec![usize::MAX; n];
    let mut label = 0;
    for &root in order.iter().rev() {
        if comp[root] != usize::MAX {
            continue;
        }
        comp[root] = label;
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            for &pred in &rev[node] {
                if comp[pred] == usize::MAX {
                    comp[pred] = label;
                    stack.push(pred);
                }
            }
        }
        label += 1;
    }
    comp
}

/// Perron eigenvector of `A_ij = (C_ij + a)/(C_ji + a)`, `A_ii = 1`, by power
/// iteration; scores sum to one.
pub fn perron_scores(matrix: &PreferenceMatrix, cfg: &PerronConfig) -> Result<RankingResult> {
    if !(cfg.smoothing > 0.0) || !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(Error::invalid(format!("bad Perron config {cfg:?}")));
    }
    let n = matrix.n();
    let a = cfg.smoothing;
    let mut ratio = vec![1.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                ratio[i * n + j] = (matrix.get(i, j) as f64 + a) / (matrix.get(j, i) as f64 + a);
            }
        }
    }
    let mut x = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        for (i, out) in next.iter_mut().enumerate() {
            *out = dot(&ratio[i * n..(i + 1) * n], &x);
        }
        let total: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= total;
        }
        let delta = x
            .iter()
            .zip(&next)
            .map(|(p, c)| (p - c).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut x, &mut next);
        if delta <= cfg.tol {
            converged = true;
            break;
        }
    }
    finish(Method::Perron, matrix, x, converged, iterations, None)
}

/// Sequential TrueSkill ratings; the internal score is the final mean `μ`.
/// Inconsistent outcomes are skipped.
pub fn trueskill_scores(ids: &[String], outcomes: &[PairOutcome], cfg: &TrueSkillConfig) -> Result<RankingResult> {
    if !(cfg.sigma0 > 0.0) || !(cfg.beta > 0.0) || !(cfg.tau >= 0.0) || !cfg.mu0.is_finite() {
        return Err(Error::invalid(format!("bad TrueSkill config {cfg:?}")));
    }
    if ids.is_empty() {
        return Err(Error::invalid("no items to rate"));
    }
    let index: std::collections::HashMap<&str, usize> =
        ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut mu = vec![cfg.mu0; ids.len()];
    let mut var = vec![cfg.sigma0 * cfg.sigma0; ids.len()];
    let mut updates = 0;
    for o in outcomes {
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownId(id.to_string()));
        let a = lookup(&o.a_id)?;
        let b = lookup(&o.b_id)?;
        let Some((w_id, _)) = o.winner_loser() else { continue };
        let (w, l) = if w_id == o.a_id { (a, b) } else { (b, a) };
        let (vw, vl) = trueskill_update(&mut mu, &mut var, w, l, cfg);
        var[w] = vw;
        var[l] = vl;
        updates += 1;
    }
    let scores_0_100 = rescale_to_0_100(&mu)?;
    Ok(RankingResult {
        method: Method::TrueSkill,
        ids: ids.to_vec(),
        scores: mu,
        scores_0_100,
        sigma: Some(var.iter().map(|v| v.sqrt()).collect()),
        rounds_used: 0,
        converged: true,
        iterations: updates,
        final_gradient_norm: None,
    })
}

/// Two-player, no-draw update; moves the means in place and returns the new
/// variances of winner and loser.
fn trueskill_update(mu: &mut [f64], var: &mut [f64], w: usize, l: usize, cfg: &TrueSkillConfig) -> (f64, f64) {
    let tau2 = cfg.tau * cfg.tau;
    let var_w = var[w] + tau2;
    let var_l = var[l] + tau2;
    let c2 = 2.0 * cfg.beta * cfg.beta + var_w + var_l;
    let c = c2.sqrt();
    let t = (mu[w] - mu[l]) / c;
    let v = mills(t);
    let wf = mills_w(t);
    mu[w] += var_w / c * v;
    mu[l] -= var_l / c * v;
    (var_w * (1.0 - var_w / c2 * wf), var_l * (1.0 - var_l / c2 * wf))
}

/// Affine min–max map onto `[0, 100]`; all-equal input maps to 50.
pub fn rescale_to_0_100(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to rescale"));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(bad));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(vec![50.0; scores.len()]);
    }
    Ok(scores
        .iter()
        .map(|s| (100.0 * (s - lo) / (hi - lo)).clamp(0.0, 100.0))
        .collect())
}
