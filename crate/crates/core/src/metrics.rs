//! Agreement between simulated and real item statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::classroom::{SkillLevel, StudentProfile};
use crate::corpus::{Corpus, DifficultyLabel, Letter};
use crate::responses::{simulated_success_rates, ResponseMatrix};

/// Largest n for which the exact permutation p-value is enumerated.
pub const EXACT_PERMUTATION_MAX_N: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Predicted,
    Real,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Predicted => "predicted",
            Side::Real => "real",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("need at least 3 paired values, got {0}")]
    TooFewPoints(usize),
    #[error("series lengths differ: {0} ids, {1} predicted, {2} real")]
    LengthMismatch(usize, usize, usize),
    #[error("non-finite value for item {0}")]
    NonFinite(String),
    #[error("correlation undefined: {0} values are constant")]
    ZeroVariance(Side),
    #[error("AUC needs both classes; got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("ensemble needs at least one model")]
    EmptyEnsemble,
    #[error("ensemble weights must be non-negative with a positive sum")]
    BadWeights,
}

/// Predicted and real values aligned by item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeries {
    pub item_ids: Vec<String>,
    pub predicted: Vec<f64>,
    pub real: Vec<f64>,
}

impl PairedSeries {
    pub fn new(item_ids: Vec<String>, predicted: Vec<f64>, real: Vec<f64>) -> Result<Self, MetricError> {
        if item_ids.len() != predicted.len() || predicted.len() != real.len() {
            return Err(MetricError::LengthMismatch(item_ids.len(), predicted.len(), real.len()));
        }
        if item_ids.len() < 3 {
            return Err(MetricError::TooFewPoints(item_ids.len()));
        }
        for (i, id) in item_ids.iter().enumerate() {
            if !(predicted[i].is_finite() && real[i].is_finite()) {
                return Err(MetricError::NonFinite(id.clone()));
            }
        }
        Ok(PairedSeries {
            item_ids,
            predicted,
            real,
        })
    }

    /// Align two keyed maps on their shared keys (in key order).
    pub fn align(predicted: &BTreeMap<String, f64>, real: &BTreeMap<String, f64>) -> Result<Self, MetricError> {
        let mut ids = Vec::new();
        let mut p = Vec::new();
        let mut r = Vec::new();
        for (id, v) in predicted {
            if let Some(rv) = real.get(id) {
                ids.push(id.clone());
                p.push(*v);
                r.push(*rv);
            }
        }
        PairedSeries::new(ids, p, r)
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn swapped(&self) -> PairedSeries {
        PairedSeries {
            item_ids: self.item_ids.clone(),
            predicted: self.real.clone(),
            real: self.predicted.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value from the t approximation with n − 2 dof.
    pub p: f64,
    pub n: usize,
}

fn product_moment(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricError::ZeroVariance(Side::Predicted));
    }
    if syy == 0.0 {
        return Err(MetricError::ZeroVariance(Side::Real));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value of a correlation coefficient under the t approximation.
pub fn t_test_p(r: f64, n: usize) -> f64 {
    let dof = n as f64 - 2.0;
    if dof <= 0.0 {
        return f64::NAN;
    }
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (dof / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

pub fn pearson(series: &PairedSeries) -> Result<Correlation, MetricError> {
    let r = product_moment(&series.predicted, &series.real)?;
    Ok(Correlation {
        r,
        p: t_test_p(r, series.len()),
        n: series.len(),
    })
}

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean_rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(series: &PairedSeries) -> Result<Correlation, MetricError> {
    let rx = average_ranks(&series.predicted);
    let ry = average_ranks(&series.real);
    let r = product_moment(&rx, &ry)?;
    Ok(Correlation {
        r,
        p: t_test_p(r, series.len()),
        n: series.len(),
    })
}

/// Exact two-sided permutation p-value for Pearson's r, enumerating all
/// n! pairings. Only for n ≤ [`EXACT_PERMUTATION_MAX_N`].
pub fn permutation_p(series: &PairedSeries) -> Result<Option<f64>, MetricError> {
    let n = series.len();
    if n > EXACT_PERMUTATION_MAX_N {
        return Ok(None);
    }
    let observed = product_moment(&series.predicted, &series.real)?.abs();
    let x = &series.predicted;
    let mut y = series.real.clone();
    let (mut extreme, mut total) = (0u64, 0u64);
    let mut count = |y: &[f64]| {
        total += 1;
        let r = product_moment(x, y).map(f64::abs).unwrap_or(0.0);
        if r >= observed - 1e-12 {
            extreme += 1;
        }
    };
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    count(&y);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                y.swap(0, i);
            } else {
                y.swap(c[i], i);
            }
            count(&y);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(Some(extreme as f64 / total as f64))
}

/// Binary class for AUC scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DifficultyClass {
    Easy,
    Hard,
}

/// Which items form the negative class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucMode {
    /// Hard vs Easy; Medium items are left out.
    #[default]
    EasyVsHard,
    /// Hard vs Easy and Medium together.
    HardVsRest,
}

/// Binary labels from the corpus difficulty labels under `mode`.
pub fn auc_labels(corpus: &Corpus, mode: AucMode) -> BTreeMap<String, DifficultyClass> {
    corpus
        .items()
        .iter()
        .filter_map(|it| {
            let class = match (it.difficulty_label, mode) {
                (DifficultyLabel::Hard, _) => DifficultyClass::Hard,
                (DifficultyLabel::Easy, _) | (DifficultyLabel::Medium, AucMode::HardVsRest) => DifficultyClass::Easy,
                (DifficultyLabel::Medium, AucMode::EasyVsHard) => return None,
            };
            Some((it.item_id.clone(), class))
        })
        .collect()
}

/// Probability that a Hard item scores higher than an Easy one, ties
/// counting one half. Computed from average ranks (Mann-Whitney U), which
/// is what any monotone scoring of the difficulties yields, including a
/// one-feature logistic regression.
pub fn auc_difficulty(
    scores: &BTreeMap<String, f64>,
    labels: &BTreeMap<String, DifficultyClass>,
) -> Result<f64, MetricError> {
    let mut values = Vec::new();
    let mut positive = Vec::new();
    for (id, class) in labels {
        if let Some(s) = scores.get(id) {
            values.push(*s);
            positive.push(*class == DifficultyClass::Hard);
        }
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass {
            positives: n_pos,
            negatives: n_neg,
        });
    }
    let ranks = average_ranks(&values);
    let rank_sum: f64 = ranks.iter().zip(&positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistractorDetail {
    pub item_id: String,
    pub simulated_mode: Letter,
    pub real_mode: Letter,
    pub matched: bool,
    /// The simulated or real mode was decided by letter order.
    pub tie_broken: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorReport {
    pub match_rate: Option<f64>,
    pub n_items: usize,
    /// Mean of 1/(k − 1): a uniform pick among the wrong choices.
    pub chance_wrong_choices: Option<f64>,
    /// Mean of 1/k, the looser reference counting every choice.
    pub chance_all_choices: Option<f64>,
    pub items: Vec<DistractorDetail>,
    pub excluded: Vec<(String, String)>,
}

/// Modal letter; equal counts resolve to the earlier letter.
fn mode_of<V: PartialOrd + Copy>(counts: impl Iterator<Item = (Letter, V)>) -> Option<(Letter, bool)> {
    let mut best: Option<(Letter, V)> = None;
    let mut tied = false;
    for (letter, v) in counts {
        match best {
            None => best = Some((letter, v)),
            Some((_, bv)) if v > bv => {
                best = Some((letter, v));
                tied = false;
            }
            Some((_, bv)) if v == bv => tied = true,
            _ => {}
        }
    }
    best.map(|(l, _)| (l, tied))
}

/// Compare the most common wrong answer among simulated students with the
/// most common wrong answer among real students.
pub fn distractor_match(
    incorrect_counts: &BTreeMap<String, BTreeMap<Letter, usize>>,
    corpus: &Corpus,
) -> DistractorReport {
    let mut items = Vec::new();
    let mut excluded = Vec::new();
    let mut inv_wrong = Vec::new();
    let mut inv_all = Vec::new();
    for item in corpus.items() {
        let Some(real) = &item.real_choice_distribution else {
            excluded.push((item.item_id.clone(), "no real choice distribution".into()));
            continue;
        };
        let sim = incorrect_counts
            .get(&item.item_id)
            .filter(|c| c.iter().any(|(l, n)| *n > 0 && *l != item.correct_key));
        let Some(sim) = sim else {
            excluded.push((item.item_id.clone(), "no simulated incorrect response".into()));
            continue;
        };
        let wrong = item.wrong_letters();
        let sim_mode = mode_of(wrong.iter().map(|l| (*l, sim.get(l).copied().unwrap_or(0))));
        let real_mode = mode_of(wrong.iter().map(|l| (*l, real.get(l).copied().unwrap_or(0.0))));
        let (Some((s, s_tie)), Some((r, r_tie))) = (sim_mode, real_mode) else {
            continue;
        };
        items.push(DistractorDetail {
            item_id: item.item_id.clone(),
            simulated_mode: s,
            real_mode: r,
            matched: s == r,
            tie_broken: s_tie || r_tie,
        });
        let k = item.choices.len() as f64;
        inv_wrong.push(1.0 / (k - 1.0));
        inv_all.push(1.0 / k);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let matched = items.iter().filter(|d| d.matched).count();
    DistractorReport {
        match_rate: (!items.is_empty()).then(|| matched as f64 / items.len() as f64),
        n_items: items.len(),
        chance_wrong_choices: mean(&inv_wrong),
        chance_all_choices: mean(&inv_all),
        items,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillCorrectness {
    pub means: BTreeMap<SkillLevel, f64>,
    /// Strictly increasing over the levels present.
    pub monotone: bool,
    /// Levels without any observed cell.
    pub missing: Vec<SkillLevel>,
}

pub fn skill_correctness(matrix: &ResponseMatrix) -> SkillCorrectness {
    let mut yes = [0usize; 4];
    let mut seen = [0usize; 4];
    for (r, (_, skill)) in matrix.students.iter().enumerate() {
        for c in 0..matrix.n_items() {
            if let Some(bit) = matrix.cell(r, c) {
                seen[skill.index()] += 1;
                yes[skill.index()] += usize::from(bit);
            }
        }
    }
    let mut means = BTreeMap::new();
    let mut missing = Vec::new();
    for level in SkillLevel::ALL {
        let i = level.index();
        if seen[i] == 0 {
            missing.push(level);
        } else {
            means.insert(level, yes[i] as f64 / seen[i] as f64);
        }
    }
    let values: Vec<f64> = means.values().copied().collect();
    SkillCorrectness {
        monotone: values.windows(2).all(|w| w[1] > w[0]),
        means,
        missing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgroupCorrelation {
    pub pearson: Correlation,
    pub spearman: Correlation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub results: BTreeMap<String, SubgroupCorrelation>,
    pub skipped: Vec<(String, String)>,
}

/// Simulated success rates of the students in `subgroup`, paired with the
/// real subgroup percent correct of each item that reports it.
pub fn subgroup_series(
    matrix: &ResponseMatrix,
    classroom: &[StudentProfile],
    corpus: &Corpus,
    subgroup: &str,
) -> Result<PairedSeries, String> {
    let members: HashSet<usize> = classroom
        .iter()
        .filter(|p| p.name_demographics.is_some_and(|d| d.matches_subgroup(subgroup)))
        .map(|p| p.student_index)
        .collect();
    if members.is_empty() {
        return Err("no simulated students in subgroup".into());
    }
    let rates = simulated_success_rates(&matrix.select_rows(|idx, _| members.contains(&idx)));
    let real: BTreeMap<String, f64> = corpus
        .items()
        .iter()
        .filter_map(|it| {
            let stats = it.real_subgroup_percent_correct.as_ref()?;
            let (_, v) = stats.iter().find(|(k, _)| k.eq_ignore_ascii_case(subgroup))?;
            Some((it.item_id.clone(), *v))
        })
        .collect();
    if real.is_empty() {
        return Err("subgroup statistics absent from corpus".into());
    }
    PairedSeries::align(&rates.rates, &real).map_err(|e| e.to_string())
}

pub fn subgroup_correlation(series: &BTreeMap<String, Result<PairedSeries, String>>) -> SubgroupReport {
    let mut report = SubgroupReport::default();
    for (name, s) in series {
        let outcome = s.as_ref().map_err(Clone::clone).and_then(|s| {
            Ok(SubgroupCorrelation {
                pearson: pearson(s).map_err(|e| e.to_string())?,
                spearman: spearman(s).map_err(|e| e.to_string())?,
            })
        });
        match outcome {
            Ok(c) => {
                report.results.insert(name.clone(), c);
            }
            Err(reason) => report.skipped.push((name.clone(), reason)),
        }
    }
    report
}

/// Weighted mean of per-model rates over the items every model covers.
/// Weights are renormalized to sum to one.
pub fn ensemble(
    rates: &BTreeMap<String, BTreeMap<String, f64>>,
    weights: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, MetricError> {
    if rates.is_empty() {
        return Err(MetricError::EmptyEnsemble);
    }
    let w: Vec<f64> = rates.keys().map(|m| weights.get(m).copied().unwrap_or(0.0)).collect();
    let total: f64 = w.iter().sum();
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || total <= 0.0 {
        return Err(MetricError::BadWeights);
    }
    let mut models = rates.values();
    let first = models.next().expect("non-empty");
    let shared: Vec<&String> = first
        .keys()
        .filter(|id| rates.values().all(|m| m.contains_key(*id)))
        .collect();
    Ok(shared
        .into_iter()
        .map(|id| {
            let v: f64 = rates.values().zip(&w).map(|(m, wi)| m[id] * wi).sum::<f64>() / total;
            (id.clone(), v)
        })
        .collect())
}

/// Equal weights over every model.
pub fn ensemble_uniform(rates: &BTreeMap<String, BTreeMap<String, f64>>) -> Result<BTreeMap<String, f64>, MetricError> {
    let weights = rates.keys().map(|k| (k.clone(), 1.0)).collect();
    ensemble(rates, &weights)
}
