//! Evaluation criteria for a judge: consistency κ, accuracy α and the
//! correlation ρ between aggregated scores and MOS after a monotone logistic
//! mapping.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{csv_field, pair_outcomes, DatasetManifest, PairOutcome, RankingResult, Response, TrialRecord};

/// Fraction of logical pairs whose verdict flips with the presentation order.
pub fn consistency_kappa(outcomes: &[PairOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::invalid("consistency needs at least one pair"));
    }
    let consistent = outcomes.iter().filter(|o| o.consistent).count();
    Ok(consistent as f64 / outcomes.len() as f64)
}

/// Agreement with the MOS ordering over the consistent pairs only.
///
/// The choice for presentation `(a, b)` is compared with `I[q(a) >= q(b)]`,
/// so a MOS tie credits choosing the first image. Returns `Ok(None)` when no
/// pair is consistent.
pub fn accuracy_alpha(outcomes: &[PairOutcome], mos: &HashMap<String, f64>) -> Result<Option<f64>> {
    let lookup = |id: &str| mos.get(id).copied().ok_or_else(|| Error::MissingMos(id.to_string()));
    let mut total = 0usize;
    let mut correct = 0usize;
    for o in outcomes.iter().filter(|o| o.consistent) {
        let first_not_worse = lookup(&o.a_id)? >= lookup(&o.b_id)?;
        total += 1;
        if (o.forward == Response::First) == first_not_worse {
            correct += 1;
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson linear correlation coefficient.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least 2 points"));
    }
    if let Some(&bad) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(bad));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation undefined for zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Four-parameter logistic `q̂(s) = (β1 − β2) / (1 + exp(−(s − β3)/|β4|)) + β2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    /// Sum of squared errors at the fitted parameters.
    pub residual: f64,
}

impl MappingParams {
    pub fn apply(&self, s: f64) -> f64 {
        logistic(self.beta1, self.beta2, self.beta3, self.beta4, s)
    }
}

#[inline]
fn logistic(b1: f64, b2: f64, b3: f64, b4: f64, s: f64) -> f64 {
    (b1 - b2) / (1.0 + (-(s - b3) / b4.abs()).exp()) + b2
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub params: MappingParams,
    pub mapped: Vec<f64>,
    /// Set when the minimizer failed and `mapped` is the identity.
    pub identity_fallback: bool,
}

/// Least-squares fit of the monotone logistic by Nelder–Mead.
///
/// The fit runs on standardized scores with the usual start (β1 = max MOS,
/// β2 = min MOS, β3 = mean score, β4 = std/4), which makes the mapped values
/// invariant to positive affine changes of the raw scores.
pub fn fit_monotonic_logistic(scores: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    if scores.len() != mos.len() {
        return Err(Error::invalid(format!("length mismatch {} vs {}", scores.len(), mos.len())));
    }
    if scores.len() < 5 {
        return Err(Error::invalid("logistic fit needs at least 5 points"));
    }
    if let Some(&bad) = scores.iter().chain(mos).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(bad));
    }
    let m = mean(scores);
    let sd = (scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / scores.len() as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::invalid("scores are all equal"));
    }
    let z: Vec<f64> = scores.iter().map(|s| (s - m) / sd).collect();
    let sse = |p: &[f64; 4]| -> f64 {
        if p[3] == 0.0 {
            return f64::INFINITY;
        }
        z.iter()
            .zip(mos)
            .map(|(&zi, &y)| {
                let e = logistic(p[0], p[1], p[2], p[3], zi) - y;
                e * e
            })
            .sum()
    };
    let hi = mos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = mos.iter().copied().fold(f64::INFINITY, f64::min);
    let span = (hi - lo).max(1e-6);
    let start = [hi, lo, 0.0, 0.25];
    let scale = [0.1 * span, 0.1 * span, 0.5, 0.25];

    let mut best = nelder_mead(&sse, start, scale, 20_000);
    // restart from the optimum to undo premature simplex collapse
    for _ in 0..4 {
        let again = nelder_mead(&sse, best.0, scale, 20_000);
        let improved = again.1 < best.1 * (1.0 - 1e-12);
        if again.1 <= best.1 {
            best = again;
        }
        if !improved {
            break;
        }
    }
    let (p, residual) = best;
    if !(residual.is_finite() && p.iter().all(|v| v.is_finite()) && p[3] != 0.0) {
        log::warn!("logistic fit failed; using identity mapping");
        return Ok(LogisticFit {
            params: MappingParams {
                beta1: f64::NAN,
                beta2: f64::NAN,
                beta3: f64::NAN,
                beta4: f64::NAN,
                residual: scores.iter().zip(mos).map(|(s, y)| (s - y) * (s - y)).sum(),
            },
            mapped: scores.to_vec(),
            identity_fallback: true,
        });
    }
    let mapped = z.iter().map(|&zi| logistic(p[0], p[1], p[2], p[3], zi)).collect();
    Ok(LogisticFit {
        params: MappingParams {
            beta1: p[0],
            beta2: p[1],
            beta3: m + sd * p[2],
            beta4: sd * p[3].abs(),
            residual,
        },
        mapped,
        identity_fallback: false,
    })
}

/// Plain Nelder–Mead on four parameters. Returns the best vertex and value.
fn nelder_mead(f: &dyn Fn(&[f64; 4]) -> f64, start: [f64; 4], scale: [f64; 4], max_evals: usize) -> ([f64; 4], f64) {
    const N: usize = 4;
    let mut simplex: Vec<([f64; 4], f64)> = Vec::with_capacity(N + 1);
    simplex.push((start, f(&start)));
    for k in 0..N {
        let mut p = start;
        p[k] += scale[k];
        simplex.push((p, f(&p)));
    }
    let mut evals = N + 1;
    let by_value = |a: &([f64; 4], f64), b: &([f64; 4], f64)| a.1.total_cmp(&b.1);
    while evals < max_evals {
        simplex.sort_by(by_value);
        let (best, worst) = (simplex[0].1, simplex[N].1);
        let size = (1..=N)
            .map(|k| {
                (0..N)
                    .map(|d| (simplex[k].0[d] - simplex[0].0[d]).abs() / (1.0 + simplex[0].0[d].abs()))
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-14 * (1.0 + best.abs()) && size < 1e-10 {
            break;
        }
        let mut centroid = [0.0; N];
        for (p, _) in &simplex[..N] {
            for d in 0..N {
                centroid[d] += p[d] / N as f64;
            }
        }
        let along = |t: f64| -> [f64; 4] {
            let mut out = [0.0; N];
            for d in 0..N {
                out[d] = centroid[d] + t * (simplex[N].0[d] - centroid[d]);
            }
            out
        };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            evals += 1;
            simplex[N] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < simplex[N].1 {
                let p = along(-0.5);
                (p, f(&p))
            } else {
                let p = along(0.5);
                (p, f(&p))
            };
            evals += 1;
            if fc < simplex[N].1.min(fr) {
                simplex[N] = (contracted, fc);
            } else {
                let anchor = simplex[0].0;
                for (p, fp) in simplex.iter_mut().skip(1) {
                    for d in 0..N {
                        p[d] = anchor[d] + 0.5 * (p[d] - anchor[d]);
                    }
                    *fp = f(p);
                }
                evals += N;
            }
        }
    }
    simplex.sort_by(by_value);
    simplex[0]
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub group_id: String,
    pub kappa: f64,
    /// `None` when no pair in the group was consistent.
    pub alpha: Option<f64>,
    /// `None` when fewer than 5 scored images or the scores are degenerate.
    pub rho: Option<f64>,
    pub n_pairs: usize,
    pub n_consistent: usize,
    pub bias_first_rate: f64,
    pub bias_second_rate: f64,
    /// Why ρ was omitted, or that the identity mapping was used.
    pub note: Option<String>,
}

/// How trials are split into report groups.
#[derive(Debug, Clone, PartialEq)]
pub enum Grouping {
    /// By `dataset_id`; pairs spanning two datasets go to `"mixed"`.
    Dataset,
    /// Everything in one group with this name.
    Pooled(String),
    /// By plan cell: pair index → cell label.
    Cells(BTreeMap<usize, String>),
}

const MIN_RHO_IMAGES: usize = 5;

/// κ, α and ρ per group.
///
/// ρ uses the ranking's internal scores restricted to the group's images,
/// mapped through [`fit_monotonic_logistic`] before [`plcc`]. Groups are
/// returned sorted by name.
pub fn eval_report(
    trials: &[TrialRecord],
    manifest: &DatasetManifest,
    ranking: &RankingResult,
    grouping: &Grouping,
) -> Result<Vec<EvalReport>> {
    let dataset_of: HashMap<&str, &str> = manifest
        .images
        .iter()
        .map(|img| (img.id.as_str(), img.dataset_id.as_str()))
        .collect();
    let group_of = |t: &TrialRecord| -> Result<String> {
        Ok(match grouping {
            Grouping::Pooled(name) => name.clone(),
            Grouping::Cells(cells) => cells
                .get(&t.pair)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("pair {} has no cell", t.pair)))?,
            Grouping::Dataset => {
                let ds = |id: &str| dataset_of.get(id).copied().ok_or_else(|| Error::UnknownId(id.to_string()));
                let (a, b) = (ds(&t.first_id)?, ds(&t.second_id)?);
                if a == b {
                    a.to_string()
                } else {
                    "mixed".to_string()
                }
            }
        })
    };

    let mut groups: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    for t in trials {
        groups.entry(group_of(t)?).or_default().push(t.clone());
    }

    let mos = manifest.mos_table();
    let score_of: HashMap<&str, f64> = ranking
        .ids
        .iter()
        .map(String::as_str)
        .zip(ranking.scores.iter().copied())
        .collect();

    let mut reports = Vec::with_capacity(groups.len());
    for (name, group_trials) in &groups {
        let outcomes = pair_outcomes(group_trials);
        if outcomes.is_empty() {
            continue;
        }
        let kappa = consistency_kappa(&outcomes)?;
        let n_consistent = outcomes.iter().filter(|o| o.consistent).count();
        // pairs touching an image without MOS are left out of α
        let with_mos: Vec<PairOutcome> = outcomes
            .iter()
            .filter(|o| mos.contains_key(&o.a_id) && mos.contains_key(&o.b_id))
            .cloned()
            .collect();
        let alpha = accuracy_alpha(&with_mos, &mos)?;
        let n_trials = group_trials.len() as f64;
        let rate = |r: Response| group_trials.iter().filter(|t| t.response == r).count() as f64 / n_trials;

        let images: BTreeSet<&str> = match grouping {
            Grouping::Dataset if name != "mixed" => manifest
                .images
                .iter()
                .filter(|img| &img.dataset_id == name)
                .map(|img| img.id.as_str())
                .collect(),
            Grouping::Pooled(_) => manifest.images.iter().map(|img| img.id.as_str()).collect(),
            _ => group_trials
                .iter()
                .flat_map(|t| [t.first_id.as_str(), t.second_id.as_str()])
                .collect(),
        };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for id in images {
            if let (Some(&s), Some(&q)) = (score_of.get(id), mos.get(id)) {
                xs.push(s);
                ys.push(q);
            }
        }
        let (rho, note) = group_rho(&xs, &ys);
        reports.push(EvalReport {
            group_id: name.clone(),
            kappa,
            alpha,
            rho,
            n_pairs: outcomes.len(),
            n_consistent,
            bias_first_rate: rate(Response::First),
            bias_second_rate: rate(Response::Second),
            note,
        });
    }
    Ok(reports)
}

/// Mapped PLCC for one group, or the reason it is omitted.
pub fn group_rho(scores: &[f64], mos: &[f64]) -> (Option<f64>, Option<String>) {
    if scores.len() < MIN_RHO_IMAGES {
        return (None, Some(format!("only {} scored images", scores.len())));
    }
    let fit = match fit_monotonic_logistic(scores, mos) {
        Ok(fit) => fit,
        Err(e) => return (None, Some(e.to_string())),
    };
    match plcc(&fit.mapped, mos) {
        Ok(r) if fit.identity_fallback => (Some(r), Some("identity mapping".into())),
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

pub const REPORT_CSV_HEADER: &str = "group,kappa,alpha,rho,n_pairs,n_consistent,bias_first,bias_second\n";

pub fn report_csv(reports: &[EvalReport]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(REPORT_CSV_HEADER);
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{},{},{:.6},{:.6}",
            csv_field(&r.group_id),
            r.kappa,
            opt(r.alpha),
            opt(r.rho),
            r.n_pairs,
            r.n_consistent,
            r.bias_first_rate,
            r.bias_second_rate
        );
    }
    out
}

/// Fixed-width table with the κ / α / ρ column layout of a results table.
pub fn report_table(reports: &[EvalReport]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let width = reports.iter().map(|r| r.group_id.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7}  {:>7}  {:>7}",
        "group", "kappa", "alpha", "rho", "pairs", "consist", "second%"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.3}  {:>6}  {:>6}  {:>7}  {:>7}  {:>7.1}",
            r.group_id,
            r.kappa,
            opt(r.alpha),
            opt(r.rho),
            r.n_pairs,
            r.n_consistent,
            100.0 * r.bias_second_rate
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(x: &str, y: &str, xy: Response, yx: Response) -> PairOutcome {
        PairOutcome::from_presentations(x, y, xy, yx)
    }

    use Response::{First, Second};

    #[test]
    fn kappa_cases() {
        let always_first: Vec<_> = (0..4).map(|k| outcome(&format!("a{k}"), "z", First, First)).collect();
        assert_eq!(consistency_kappa(&always_first).unwrap(), 0.0);
        let flips: Vec<_> = (0..4).map(|k| outcome(&format!("a{k}"), "z", First, Second)).collect();
        assert_eq!(consistency_kappa(&flips).unwrap(), 1.0);
        let half = vec![flips[0].clone(), flips[1].clone(), always_first[0].clone(), always_first[1].clone()];
        assert_eq!(consistency_kappa(&half).unwrap(), 0.5);
        assert!(consistency_kappa(&[]).is_err());
    }

    #[test]
    fn alpha_cases() {
        let mos: HashMap<String, f64> = [("a", 80.0), ("b", 20.0), ("c", 50.0), ("d", 50.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let right = outcome("a", "b", First, Second);
        assert_eq!(accuracy_alpha(std::slice::from_ref(&right), &mos).unwrap(), Some(1.0));
        let wrong = outcome("a", "c", Second, First);
        assert_eq!(accuracy_alpha(&[right, wrong.clone()], &mos).unwrap(), Some(0.5));
        assert_eq!(accuracy_alpha(&[outcome("a", "b", First, First)], &mos).unwrap(), None);
        // tie: choosing the first of (c, d) counts as correct
        assert_eq!(accuracy_alpha(&[outcome("c", "d", First, Second)], &mos).unwrap(), Some(1.0));
        assert_eq!(accuracy_alpha(&[outcome("c", "d", Second, First)], &mos).unwrap(), Some(0.0));
        let stranger = outcome("a", "q", First, Second);
        assert!(matches!(accuracy_alpha(&[stranger], &mos), Err(Error::MissingMos(_))));
    }

    #[test]
    fn plcc_cases() {
        assert!((plcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // cov 4 / sqrt(5·5)
        assert!((plcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(plcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn logistic_identity_fit() {
        let mos: Vec<f64> = (0..20).map(|k| 5.0 * k as f64).collect();
        let fit = fit_monotonic_logistic(&mos, &mos).unwrap();
        assert!(!fit.identity_fallback);
        assert!(plcc(&fit.mapped, &mos).unwrap() >= 0.9999);
    }

    #[test]
    fn logistic_absorbs_cubic_warp() {
        let grid: Vec<f64> = (0..41).map(|k| -1.0 + 0.05 * k as f64).collect();
        let mos: Vec<f64> = grid.iter().map(|g| 50.0 * (g + 1.0)).collect();
        let cubed: Vec<f64> = grid.iter().map(|g| 50.0 * (g * g * g + 1.0)).collect();
        let fit = fit_monotonic_logistic(&cubed, &mos).unwrap();
        let raw = plcc(&cubed, &mos).unwrap();
        let mapped = plcc(&fit.mapped, &mos).unwrap();
        assert!(mapped >= raw, "{mapped} < {raw}");
    }

    #[test]
    fn logistic_mapping_monotone() {
        let s = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0];
        let y = [30.0, 12.0, 41.0, 9.0, 55.0, 90.0, 25.0, 57.0];
        let fit = fit_monotonic_logistic(&s, &y).unwrap();
        let p = fit.params;
        let increasing = p.beta1 > p.beta2;
        let mut prev = p.apply(0.0);
        for k in 1..=1000 {
            let cur = p.apply(0.01 * k as f64);
            if increasing {
                assert!(cur >= prev);
            } else {
                assert!(cur <= prev);
            }
            prev = cur;
        }
    }

    #[test]
    fn logistic_rejects_degenerate() {
        assert!(fit_monotonic_logistic(&[1.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).is_err());
        assert!(fit_monotonic_logistic(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn report_csv_blank_for_undefined() {
        let r = EvalReport {
            group_id: "g".into(),
            kappa: 0.0,
            alpha: None,
            rho: None,
            n_pairs: 3,
            n_consistent: 0,
            bias_first_rate: 0.0,
            bias_second_rate: 1.0,
            note: None,
        };
        assert_eq!(
            report_csv(&[r]),
            format!("{REPORT_CSV_HEADER}g,0.000000,,,3,0,0.000000,1.000000\n")
        );
    }
}
