//! Group-level Rasch model fitted by penalized joint maximum likelihood.
//!
//! Every student in a skill group shares one ability `β_g`; each item has a
//! difficulty `δ_i`, and `P(correct) = σ(β_g − δ_i)`. The objective is
//!
//! ```text
//! L(β, δ) = Σ_cells [x log p + (1 − x) log(1 − p)] − (λ/2)(‖β‖² + ‖δ‖²)
//! ```
//!
//! Because abilities are pooled per group, the data enter only through the
//! per (group, item) counts of correct and observed cells.
//!
//! Optimization alternates exact one-dimensional Newton steps over the
//! ability block and the difficulty block. Coordinates inside a block are
//! independent given the other block, and each step is halved until the
//! objective does not decrease, so `L` is monotone across sweeps. After each
//! sweep the common shift `β + c, δ + c`, along which only the penalty
//! changes, is set to its closed-form optimum; without it the weak ridge
//! makes that direction converge extremely slowly. On return the
//! difficulties are recentred to mean zero and the abilities shifted by the
//! same amount.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classroom::SkillLevel;
use crate::responses::{GroupCounts, ResponseMatrix};

pub const CONSTRAINT_MEAN_ZERO_DELTA: &str = "mean(delta) = 0; beta shifted by the same constant";

#[derive(Debug, Error, PartialEq)]
pub enum IrtError {
    #[error("non-finite Rasch parameter (beta {beta}, delta {delta})")]
    NonFinite { beta: f64, delta: f64 },
    #[error("response matrix has no observed cells")]
    EmptyMatrix,
    #[error("need at least 2 observed items to fit, found {0}")]
    TooFewItems(usize),
    #[error("invalid fit configuration: {0}")]
    BadConfig(String),
}

/// `σ(β − δ)`, stable for large differences.
pub fn rasch_probability(beta: f64, delta: f64) -> Result<f64, IrtError> {
    if !(beta.is_finite() && delta.is_finite()) {
        return Err(IrtError::NonFinite { beta, delta });
    }
    Ok(sigmoid(beta - delta))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Convergence threshold on the largest gradient component.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Ridge weight on both abilities and difficulties.
    pub lambda: f64,
    /// Step halvings tried before a coordinate is left in place.
    pub max_halvings: u32,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tolerance: 1e-8,
            max_iterations: 500,
            lambda: 1e-3,
            max_halvings: 40,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<(), IrtError> {
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(IrtError::BadConfig("tolerance must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(IrtError::BadConfig("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaschFit {
    pub beta: BTreeMap<SkillLevel, f64>,
    pub delta: BTreeMap<String, f64>,
    /// Unpenalized log-likelihood at the solution.
    pub log_likelihood: f64,
    /// Penalized objective at the optimum, before recentring.
    pub penalized_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_gradient: f64,
    #[serde(rename = "lambda")]
    pub regularization: f64,
    pub constraint: String,
    /// Items without any observed cell.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_items: Vec<String>,
    /// Penalized objective after each sweep.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

/// Penalized log-likelihood over pooled counts, parameterized by a flat
/// vector `[β_0..β_{G−1}, δ_0..δ_{I−1}]`.
#[derive(Debug, Clone)]
pub struct RaschObjective {
    /// Skill groups with at least one observed cell, in skill order.
    pub groups: Vec<SkillLevel>,
    pub items: Vec<String>,
    /// `correct[i][g]`, `total[i][g]` over the retained groups and items.
    correct: Vec<Vec<f64>>,
    total: Vec<Vec<f64>>,
    pub lambda: f64,
    excluded: Vec<String>,
}

impl RaschObjective {
    pub fn from_counts(counts: &GroupCounts, lambda: f64) -> Self {
        let groups: Vec<SkillLevel> = SkillLevel::ALL
            .into_iter()
            .filter(|g| counts.total.iter().any(|t| t[g.index()] > 0))
            .collect();
        let mut items = Vec::new();
        let mut correct = Vec::new();
        let mut total = Vec::new();
        let mut excluded = Vec::new();
        for (i, id) in counts.items.iter().enumerate() {
            if counts.total[i].iter().all(|&t| t == 0) {
                excluded.push(id.clone());
                continue;
            }
            items.push(id.clone());
            correct.push(groups.iter().map(|g| f64::from(counts.correct[i][g.index()])).collect());
            total.push(groups.iter().map(|g| f64::from(counts.total[i][g.index()])).collect());
        }
        RaschObjective {
            groups,
            items,
            correct,
            total,
            lambda,
            excluded,
        }
    }

    pub fn n_params(&self) -> usize {
        self.groups.len() + self.items.len()
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        params.split_at(self.groups.len())
    }

    /// Unpenalized log-likelihood.
    pub fn log_likelihood(&self, params: &[f64]) -> f64 {
        let (beta, delta) = self.split(params);
        let mut ll = 0.0;
        for (i, d) in delta.iter().enumerate() {
            for (g, b) in beta.iter().enumerate() {
                let n = self.total[i][g];
                if n > 0.0 {
                    let x = b - d;
                    // s·log σ(x) + (n − s)·log(1 − σ(x)) = s·x − n·softplus(x)
                    ll += self.correct[i][g] * x - n * softplus(x);
                }
            }
        }
        ll
    }

    pub fn value(&self, params: &[f64]) -> f64 {
        let penalty: f64 = params.iter().map(|v| v * v).sum();
        self.log_likelihood(params) - 0.5 * self.lambda * penalty
    }

    /// Analytic gradient of [`RaschObjective::value`].
    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let (beta, delta) = self.split(params);
        let g_len = beta.len();
        let mut grad: Vec<f64> = params.iter().map(|v| -self.lambda * v).collect();
        for (i, d) in delta.iter().enumerate() {
            for (g, b) in beta.iter().enumerate() {
                let n = self.total[i][g];
                if n > 0.0 {
                    let resid = self.correct[i][g] - n * sigmoid(b - d);
                    grad[g] += resid;
                    grad[g_len + i] -= resid;
                }
            }
        }
        grad
    }

    /// Objective restricted to one ability, the rest held fixed.
    fn beta_terms(&self, g: usize, b: f64, delta: &[f64]) -> (f64, f64, f64) {
        let (mut f, mut grad, mut info) = (-0.5 * self.lambda * b * b, -self.lambda * b, self.lambda);
        for (i, d) in delta.iter().enumerate() {
            let n = self.total[i][g];
            if n > 0.0 {
                let x = b - d;
                let p = sigmoid(x);
                f += self.correct[i][g] * x - n * softplus(x);
                grad += self.correct[i][g] - n * p;
                info += n * p * (1.0 - p);
            }
        }
        (f, grad, info)
    }

    fn delta_terms(&self, i: usize, d: f64, beta: &[f64]) -> (f64, f64, f64) {
        let (mut f, mut grad, mut info) = (-0.5 * self.lambda * d * d, -self.lambda * d, self.lambda);
        for (g, b) in beta.iter().enumerate() {
            let n = self.total[i][g];
            if n > 0.0 {
                let x = b - d;
                let p = sigmoid(x);
                f += self.correct[i][g] * x - n * softplus(x);
                grad += n * p - self.correct[i][g];
                info += n * p * (1.0 - p);
            }
        }
        (f, grad, info)
    }
}

/// Damped Newton step on a concave 1-D function given by `terms`, which
/// returns (value, derivative, negative second derivative).
fn newton_1d(x: f64, max_halvings: u32, terms: impl Fn(f64) -> (f64, f64, f64)) -> f64 {
    let (f0, g0, info) = terms(x);
    if g0 == 0.0 || info <= 0.0 {
        return x;
    }
    let mut step = g0 / info;
    for _ in 0..=max_halvings {
        let candidate = x + step;
        if candidate.is_finite() && terms(candidate).0 >= f0 {
            return candidate;
        }
        step *= 0.5;
    }
    x
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fit the group-level Rasch model to a response matrix.
pub fn fit_rasch(matrix: &ResponseMatrix, config: &FitConfig) -> Result<RaschFit, IrtError> {
    fit_counts(&matrix.group_counts(), config)
}

/// Fit from pooled (group, item) counts.
#[allow(clippy::needless_range_loop)]
pub fn fit_counts(counts: &GroupCounts, config: &FitConfig) -> Result<RaschFit, IrtError> {
    config.validate()?;
    let obj = RaschObjective::from_counts(counts, config.lambda);
    if obj.groups.is_empty() {
        return Err(IrtError::EmptyMatrix);
    }
    if obj.items.len() < 2 {
        return Err(IrtError::TooFewItems(obj.items.len()));
    }
    let n_groups = obj.groups.len();
    let n_items = obj.items.len();

    // Start from smoothed empirical logits.
    let mut beta = vec![0.0; n_groups];
    let mut delta: Vec<f64> = (0..n_items)
        .map(|i| {
            let s: f64 = obj.correct[i].iter().sum();
            let n: f64 = obj.total[i].iter().sum();
            ((n - s + 0.5) / (s + 0.5)).ln()
        })
        .collect();
    let mean = delta.iter().sum::<f64>() / n_items as f64;
    delta.iter_mut().for_each(|d| *d -= mean);

    let params = |beta: &[f64], delta: &[f64]| -> Vec<f64> { beta.iter().chain(delta.iter()).copied().collect() };

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut grad_max = max_abs(&obj.gradient(&params(&beta, &delta)));
    let mut converged = grad_max <= config.tolerance;
    while !converged && iterations < config.max_iterations {
        iterations += 1;
        for g in 0..n_groups {
            beta[g] = newton_1d(beta[g], config.max_halvings, |b| obj.beta_terms(g, b, &delta));
        }
        for i in 0..n_items {
            delta[i] = newton_1d(delta[i], config.max_halvings, |d| obj.delta_terms(i, d, &beta));
        }
        if config.lambda > 0.0 {
            // Likelihood is invariant to a common shift; pick the shift
            // that maximizes the penalty term.
            let shift = -(beta.iter().sum::<f64>() + delta.iter().sum::<f64>()) / (n_groups + n_items) as f64;
            beta.iter_mut().for_each(|b| *b += shift);
            delta.iter_mut().for_each(|d| *d += shift);
        }
        let p = params(&beta, &delta);
        trace.push(obj.value(&p));
        grad_max = max_abs(&obj.gradient(&p));
        converged = grad_max <= config.tolerance;
    }

    let at_optimum = params(&beta, &delta);
    let penalized = obj.value(&at_optimum);
    let log_likelihood = obj.log_likelihood(&at_optimum);

    let center = delta.iter().sum::<f64>() / n_items as f64;
    Ok(RaschFit {
        beta: obj.groups.iter().zip(&beta).map(|(g, b)| (*g, b - center)).collect(),
        delta: obj
            .items
            .iter()
            .zip(&delta)
            .map(|(id, d)| (id.clone(), d - center))
            .collect(),
        log_likelihood,
        penalized_log_likelihood: penalized,
        iterations,
        converged,
        max_gradient: grad_max,
        regularization: config.lambda,
        constraint: CONSTRAINT_MEAN_ZERO_DELTA.to_string(),
        excluded_items: obj.excluded,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAbilityProfile {
    pub levels: Vec<(SkillLevel, f64)>,
    /// True iff abilities strictly increase in skill order.
    pub monotone: bool,
}

pub fn group_ability_profile(fit: &RaschFit) -> GroupAbilityProfile {
    let levels: Vec<(SkillLevel, f64)> = fit.beta.iter().map(|(g, b)| (*g, *b)).collect();
    let monotone = levels.windows(2).all(|w| w[1].1 > w[0].1);
    GroupAbilityProfile { levels, monotone }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    const BETA_STAR: [f64; 4] = [-1.0, -0.3, 0.6, 1.3];

    /// Independent Bernoulli sampler for the generative model.
    fn synth_counts(group_sizes: [u32; 4], beta: &[f64; 4], delta: &[f64], seed: u64) -> GroupCounts {
        let mut rng = SplitMix64::new(seed);
        let mut correct = vec![[0u32; 4]; delta.len()];
        let mut total = vec![[0u32; 4]; delta.len()];
        for (i, d) in delta.iter().enumerate() {
            for g in 0..4 {
                let p = 1.0 / (1.0 + (-(beta[g] - d)).exp());
                for _ in 0..group_sizes[g] {
                    total[i][g] += 1;
                    if rng.next_f64() < p {
                        correct[i][g] += 1;
                    }
                }
            }
        }
        GroupCounts {
            items: (0..delta.len()).map(|i| format!("i{i:03}")).collect(),
            correct,
            total,
        }
    }

    fn centered_deltas(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        let mut d: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let m = d.iter().sum::<f64>() / n as f64;
        d.iter_mut().for_each(|x| *x -= m);
        d
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn probability_values() {
        assert_eq!(rasch_probability(0.0, 0.0).unwrap(), 0.5);
        assert!((rasch_probability(3f64.ln(), 0.0).unwrap() - 0.75).abs() < 1e-15);
        let tiny = rasch_probability(-50.0, 50.0).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-40);
        assert!(rasch_probability(350.0, -350.0).unwrap() <= 1.0);
        assert!(rasch_probability(f64::NAN, 0.0).is_err());
        assert!(rasch_probability(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn recovers_generating_difficulties() {
        let delta_star = centered_deltas(150, 5);
        let counts = synth_counts([75, 105, 75, 45], &BETA_STAR, &delta_star, 17);
        let fit = fit_counts(&counts, &FitConfig::default()).unwrap();
        assert!(fit.converged, "max gradient {}", fit.max_gradient);
        let est: Vec<f64> = counts.items.iter().map(|id| fit.delta[id]).collect();
        assert!(pearson(&est, &delta_star) >= 0.95);
        assert!(group_ability_profile(&fit).monotone);
        let mean: f64 = fit.delta.values().sum::<f64>() / 150.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let delta_star = centered_deltas(12, 8);
        let counts = synth_counts([5, 7, 5, 3], &BETA_STAR, &delta_star, 3);
        let obj = RaschObjective::from_counts(&counts, 1e-3);
        let mut rng = SplitMix64::new(99);
        let h = 1e-5;
        for _ in 0..20 {
            let x: Vec<f64> = (0..obj.n_params()).map(|_| 2.0 * rng.next_normal()).collect();
            let grad = obj.gradient(&x);
            for k in 0..x.len() {
                let mut up = x.clone();
                let mut dn = x.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (obj.value(&up) - obj.value(&dn)) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / grad[k].abs().max(1.0);
                assert!(rel < 1e-6, "param {k}: analytic {} fd {fd}", grad[k]);
            }
        }
    }

    #[test]
    fn objective_never_decreases() {
        let delta_star = centered_deltas(40, 1);
        let counts = synth_counts([10, 14, 10, 6], &BETA_STAR, &delta_star, 2);
        let fit = fit_counts(&counts, &FitConfig::default()).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn all_correct_item_stays_finite_under_ridge() {
        let counts = GroupCounts {
            items: vec!["easy".into(), "mixed".into()],
            correct: vec![[10, 10, 10, 10], [3, 5, 7, 9]],
            total: vec![[10, 10, 10, 10], [10, 10, 10, 10]],
        };
        let fit = fit_counts(&counts, &FitConfig::default()).unwrap();
        assert!(fit.delta["easy"].is_finite());
        assert!(fit.delta["easy"] < fit.delta["mixed"]);
    }

    #[test]
    fn identical_columns_get_identical_difficulties() {
        let counts = GroupCounts {
            items: vec!["a".into(), "b".into()],
            correct: vec![[2, 4, 6, 8], [2, 4, 6, 8]],
            total: vec![[10, 10, 10, 10], [10, 10, 10, 10]],
        };
        let fit = fit_counts(&counts, &FitConfig::default()).unwrap();
        assert_eq!(fit.delta["a"], fit.delta["b"]);
        assert!(fit.delta["a"].abs() < 1e-12);
    }

    #[test]
    fn identical_groups_get_identical_abilities() {
        let counts = GroupCounts {
            items: vec!["a".into(), "b".into(), "c".into()],
            correct: vec![[1, 5, 5, 9], [2, 4, 4, 8], [0, 3, 3, 7]],
            total: vec![[10, 10, 10, 10]; 3],
        };
        let fit = fit_counts(&counts, &FitConfig::default()).unwrap();
        assert_eq!(fit.beta[&SkillLevel::Basic], fit.beta[&SkillLevel::Proficient]);
        assert!(!group_ability_profile(&fit).monotone);
    }

    #[test]
    fn single_group_profile() {
        let counts = GroupCounts {
            items: vec!["a".into(), "b".into()],
            correct: vec![[0, 3, 0, 0], [0, 7, 0, 0]],
            total: vec![[0, 10, 0, 0], [0, 10, 0, 0]],
        };
        let fit = fit_counts(&counts, &FitConfig::default()).unwrap();
        let profile = group_ability_profile(&fit);
        assert_eq!(profile.levels.len(), 1);
        assert!(profile.monotone);
    }

    #[test]
    fn translation_of_generator_does_not_change_fit() {
        let delta_star = centered_deltas(60, 4);
        let shifted_delta: Vec<f64> = delta_star.iter().map(|d| d + 0.75).collect();
        let shifted_beta = BETA_STAR.map(|b| b + 0.75);
        let a = fit_counts(
            &synth_counts([20, 28, 20, 12], &BETA_STAR, &delta_star, 21),
            &FitConfig::default(),
        )
        .unwrap();
        let b = fit_counts(
            &synth_counts([20, 28, 20, 12], &shifted_beta, &shifted_delta, 21),
            &FitConfig::default(),
        )
        .unwrap();
        for (id, d) in &a.delta {
            assert!((d - b.delta[id]).abs() < 1e-6);
        }
        for (g, v) in &a.beta {
            assert!((v - b.beta[g]).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let empty = GroupCounts {
            items: vec!["a".into()],
            correct: vec![[0; 4]],
            total: vec![[0; 4]],
        };
        assert_eq!(fit_counts(&empty, &FitConfig::default()), Err(IrtError::EmptyMatrix));
        let one = GroupCounts {
            items: vec!["a".into(), "b".into()],
            correct: vec![[1, 0, 0, 0], [0; 4]],
            total: vec![[2, 0, 0, 0], [0; 4]],
        };
        assert_eq!(fit_counts(&one, &FitConfig::default()), Err(IrtError::TooFewItems(1)));
        let bad = FitConfig {
            tolerance: 0.0,
            ..FitConfig::default()
        };
        assert!(matches!(fit_counts(&one, &bad), Err(IrtError::BadConfig(_))));
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let counts = GroupCounts {
            items: vec!["a".into(), "b".into()],
            correct: vec![[5, 5, 5, 5], [0, 0, 0, 0]],
            total: vec![[5, 5, 5, 5]; 2],
        };
        let config = FitConfig {
            lambda: 0.0,
            max_iterations: 3,
            ..FitConfig::default()
        };
        let fit = fit_counts(&counts, &config).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 3);
        assert!(fit.max_gradient > config.tolerance);
        assert!(fit.log_likelihood.is_finite());
    }

    #[test]
    fn fit_json_has_declared_fields() {
        let counts = GroupCounts {
            items: vec!["a".into(), "b".into()],
            correct: vec![[2, 4, 6, 8], [1, 2, 3, 4]],
            total: vec![[10, 10, 10, 10]; 2],
        };
        let fit = fit_counts(&counts, &FitConfig::default()).unwrap();
        let v = serde_json::to_value(&fit).unwrap();
        for key in [
            "beta",
            "delta",
            "log_likelihood",
            "iterations",
            "converged",
            "lambda",
            "constraint",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["beta"].get("BelowBasic").is_some());
    }
}
