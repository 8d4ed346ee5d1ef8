//! Simulated classroom composition.
//!
//! A classroom is a pure function of its size, grade, skill distribution,
//! identifier strategy and seed. Skill counts come from largest-remainder
//! apportionment; names are dealt round-robin across demographic cells so
//! every cell is used ⌊n/cells⌋ or ⌈n/cells⌉ times.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Grade;
use crate::rng::{derive_seed, SplitMix64};

/// Size of the zero-padded student ID space (`STU000000`..`STU999999`).
pub const STUDENT_ID_SPACE: u64 = 1_000_000;

const DEFAULT_NAMES_JSON: &str = include_str!("../data/names.json");

#[derive(Debug, Error)]
pub enum ClassroomError {
    #[error("classroom size must be at least 1")]
    EmptyClassroom,
    #[error("skill weights must be non-negative and sum to 1 (got sum {0})")]
    BadDistribution(f64),
    #[error("name pool is empty")]
    EmptyPool,
    #[error("name pool has duplicate name {0}")]
    DuplicateName(String),
    #[error("{requested} students exceed the {available} available unique identifiers")]
    IdentifierSpaceExhausted { requested: usize, available: u64 },
    #[error("cannot read name pool {path}: {reason}")]
    PoolFile { path: String, reason: String },
    #[error("invalid identifier strategy {0:?}; expected none, ids, single:<name> or diverse")]
    BadStrategy(String),
}

/// NAEP achievement level, ordered from weakest to strongest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SkillLevel {
    BelowBasic,
    Basic,
    Proficient,
    Advanced,
}

impl SkillLevel {
    pub const ALL: [SkillLevel; 4] = [
        SkillLevel::BelowBasic,
        SkillLevel::Basic,
        SkillLevel::Proficient,
        SkillLevel::Advanced,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Phrase used inside prompts ("Below Basic").
    pub fn display_name(self) -> &'static str {
        match self {
            SkillLevel::BelowBasic => "Below Basic",
            SkillLevel::Basic => "Basic",
            SkillLevel::Proficient => "Proficient",
            SkillLevel::Advanced => "Advanced",
        }
    }
}

impl fmt::Display for SkillLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Mixture weights over the four skill levels, indexed in skill order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct SkillDistribution([f64; 4]);

impl SkillDistribution {
    /// 25% Below Basic, 35% Basic, 25% Proficient, 15% Advanced.
    pub const NAEP: SkillDistribution = SkillDistribution([0.25, 0.35, 0.25, 0.15]);

    pub fn new(weights: [f64; 4]) -> Result<Self, ClassroomError> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(ClassroomError::BadDistribution(sum));
        }
        Ok(SkillDistribution(weights))
    }

    pub fn weight(&self, level: SkillLevel) -> f64 {
        self.0[level.index()]
    }

    pub fn weights(&self) -> [f64; 4] {
        self.0
    }
}

impl Default for SkillDistribution {
    fn default() -> Self {
        SkillDistribution::NAEP
    }
}

impl TryFrom<[f64; 4]> for SkillDistribution {
    type Error = ClassroomError;
    fn try_from(w: [f64; 4]) -> Result<Self, Self::Error> {
        SkillDistribution::new(w)
    }
}

impl From<SkillDistribution> for [f64; 4] {
    fn from(d: SkillDistribution) -> Self {
        d.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Race {
    Asian,
    Black,
    Hispanic,
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: Gender,
    pub race: Race,
}

impl Demographics {
    /// True when `subgroup` names this student's gender or race
    /// (case-insensitive; "females"/"males" also accepted).
    pub fn matches_subgroup(&self, subgroup: &str) -> bool {
        let s = subgroup.trim().to_ascii_lowercase();
        let s = s.strip_suffix('s').unwrap_or(&s);
        let gender = match self.gender {
            Gender::Female => "female",
            Gender::Male => "male",
        };
        let race = format!("{:?}", self.race).to_ascii_lowercase();
        s == gender || s == race
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameRecord {
    pub name: String,
    pub gender: Gender,
    pub race: Race,
}

impl NameRecord {
    pub fn demographics(&self) -> Demographics {
        Demographics {
            gender: self.gender,
            race: self.race,
        }
    }
}

/// A non-empty pool of unique first names with associated demographics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct NamePool(Vec<NameRecord>);

impl NamePool {
    pub fn new(records: Vec<NameRecord>) -> Result<Self, ClassroomError> {
        if records.is_empty() {
            return Err(ClassroomError::EmptyPool);
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.name.as_str()) {
                return Err(ClassroomError::DuplicateName(r.name.clone()));
            }
        }
        Ok(NamePool(records))
    }

    /// The 48-name pool: six names per (race, gender) cell.
    pub fn default_pool() -> Self {
        Self::from_json_str(DEFAULT_NAMES_JSON).expect("bundled name pool is valid")
    }

    pub fn from_json_str(text: &str) -> Result<Self, ClassroomError> {
        let records: Vec<NameRecord> = serde_json::from_str(text).map_err(|e| ClassroomError::PoolFile {
            path: "<inline>".into(),
            reason: e.to_string(),
        })?;
        NamePool::new(records)
    }

    pub fn load(path: &Path) -> Result<Self, ClassroomError> {
        let text = std::fs::read_to_string(path).map_err(|e| ClassroomError::PoolFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json_str(&text).map_err(|e| match e {
            ClassroomError::PoolFile { reason, .. } => ClassroomError::PoolFile {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn records(&self) -> &[NameRecord] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&NameRecord> {
        self.0.iter().find(|r| r.name.eq_ignore_ascii_case(name))
    }

    /// Names grouped by demographic cell, cells in (gender, race) order.
    pub fn cells(&self) -> BTreeMap<Demographics, Vec<&NameRecord>> {
        let mut cells: BTreeMap<Demographics, Vec<&NameRecord>> = BTreeMap::new();
        for r in &self.0 {
            cells.entry(r.demographics()).or_default().push(r);
        }
        cells
    }

    /// Same-race subset, for racially homogeneous diverse-name classrooms.
    pub fn restricted_to_race(&self, race: Race) -> Result<Self, ClassroomError> {
        NamePool::new(self.0.iter().filter(|r| r.race == race).cloned().collect())
    }
}

/// How simulated students are identified in their prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdentifierStrategy {
    NoIdentifier,
    StudentIds,
    SingleName(String),
    DiverseNames {
        pool: NamePool,
        /// Reject classrooms larger than the pool instead of repeating names.
        require_unique: bool,
    },
}

impl IdentifierStrategy {
    pub fn kind(&self) -> IdentityKind {
        match self {
            IdentifierStrategy::NoIdentifier => IdentityKind::None,
            IdentifierStrategy::StudentIds => IdentityKind::StudentId,
            IdentifierStrategy::SingleName(_) => IdentityKind::SingleName,
            IdentifierStrategy::DiverseNames { .. } => IdentityKind::DiverseName,
        }
    }

    /// Parse the command-line form (`none`, `ids`, `single:<name>`,
    /// `diverse`); `diverse` draws from `pool`.
    pub fn parse(spec: &str, pool: &NamePool) -> Result<Self, ClassroomError> {
        let s = spec.trim();
        match s {
            "none" => Ok(IdentifierStrategy::NoIdentifier),
            "ids" => Ok(IdentifierStrategy::StudentIds),
            "diverse" => Ok(IdentifierStrategy::DiverseNames {
                pool: pool.clone(),
                require_unique: false,
            }),
            _ => match s.strip_prefix("single:") {
                Some(name) if !name.trim().is_empty() => Ok(IdentifierStrategy::SingleName(name.trim().to_string())),
                _ => Err(ClassroomError::BadStrategy(spec.to_string())),
            },
        }
    }

    /// Inverse of [`IdentifierStrategy::parse`].
    pub fn label(&self) -> String {
        match self {
            IdentifierStrategy::NoIdentifier => "none".into(),
            IdentifierStrategy::StudentIds => "ids".into(),
            IdentifierStrategy::SingleName(n) => format!("single:{n}"),
            IdentifierStrategy::DiverseNames { .. } => "diverse".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityKind {
    None,
    StudentId,
    SingleName,
    DiverseName,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentProfile {
    pub student_index: usize,
    pub grade: Grade,
    pub skill: SkillLevel,
    pub identity: Option<String>,
    pub identity_kind: IdentityKind,
    pub name_demographics: Option<Demographics>,
}

/// Largest-remainder apportionment of `n` seats over the skill weights.
///
/// Remainder seats go to the largest fractional quotas; equal remainders
/// are resolved in skill order, BelowBasic first. Levels receive no seat
/// unless the apportionment grants one.
pub fn allocate_counts(n: usize, dist: &SkillDistribution) -> Result<BTreeMap<SkillLevel, usize>, ClassroomError> {
    if n == 0 {
        return Err(ClassroomError::EmptyClassroom);
    }
    let mut floors = [0usize; 4];
    let mut remainders = [0f64; 4];
    for level in SkillLevel::ALL {
        let mut quota = n as f64 * dist.weight(level);
        // 0.35 * 300 is 104.999..., which must count as exactly 105.
        let nearest = quota.round();
        if (quota - nearest).abs() < 1e-9 * (1.0 + quota) {
            quota = nearest;
        }
        let fl = quota.floor();
        floors[level.index()] = fl as usize;
        remainders[level.index()] = quota - fl;
    }
    let assigned: usize = floors.iter().sum();
    let mut order: Vec<usize> = (0..4).collect();
    // Stable sort keeps skill order among equal remainders.
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        floors[i] += 1;
    }
    Ok(SkillLevel::ALL.into_iter().map(|l| (l, floors[l.index()])).collect())
}

/// Draw a classroom. Deterministic in all arguments.
pub fn sample_classroom(
    n: usize,
    grade: Grade,
    dist: &SkillDistribution,
    strategy: &IdentifierStrategy,
    seed: u64,
) -> Result<Vec<StudentProfile>, ClassroomError> {
    let counts = allocate_counts(n, dist)?;
    let mut skills: Vec<SkillLevel> = counts
        .iter()
        .flat_map(|(level, count)| std::iter::repeat_n(*level, *count))
        .collect();
    SplitMix64::new(derive_seed(seed, "classroom/skills")).shuffle(&mut skills);

    let identities: Vec<(Option<String>, Option<Demographics>)> = match strategy {
        IdentifierStrategy::NoIdentifier => vec![(None, None); n],
        IdentifierStrategy::StudentIds => student_ids(n, seed)?.into_iter().map(|id| (Some(id), None)).collect(),
        IdentifierStrategy::SingleName(name) => vec![(Some(name.clone()), None); n],
        IdentifierStrategy::DiverseNames { pool, require_unique } => {
            if pool.is_empty() {
                return Err(ClassroomError::EmptyPool);
            }
            if *require_unique && n > pool.len() {
                return Err(ClassroomError::IdentifierSpaceExhausted {
                    requested: n,
                    available: pool.len() as u64,
                });
            }
            stratified_names(n, pool, seed)
                .into_iter()
                .map(|r| (Some(r.name.clone()), Some(r.demographics())))
                .collect()
        }
    };

    let kind = strategy.kind();
    Ok(skills
        .into_iter()
        .zip(identities)
        .enumerate()
        .map(
            |(student_index, (skill, (identity, name_demographics)))| StudentProfile {
                student_index,
                grade,
                skill,
                identity,
                identity_kind: kind,
                name_demographics,
            },
        )
        .collect())
}

/// `n` distinct `STU` + six-digit identifiers, sampled without replacement
/// (Floyd's algorithm) in draw order.
fn student_ids(n: usize, seed: u64) -> Result<Vec<String>, ClassroomError> {
    if n as u64 > STUDENT_ID_SPACE {
        return Err(ClassroomError::IdentifierSpaceExhausted {
            requested: n,
            available: STUDENT_ID_SPACE,
        });
    }
    let mut rng = SplitMix64::new(derive_seed(seed, "classroom/ids"));
    let mut chosen = HashSet::with_capacity(n);
    let mut order = Vec::with_capacity(n);
    for j in (STUDENT_ID_SPACE - n as u64)..STUDENT_ID_SPACE {
        let t = rng.below(j + 1);
        let pick = if chosen.contains(&t) { j } else { t };
        chosen.insert(pick);
        order.push(pick);
    }
    Ok(order.into_iter().map(|v| format!("STU{v:06}")).collect())
}

/// Deal names cell by cell: each round visits every demographic cell once
/// (cells in a seed-shuffled order) and takes that cell's next name,
/// wrapping when a cell runs out.
fn stratified_names(n: usize, pool: &NamePool, seed: u64) -> Vec<NameRecord> {
    let mut rng = SplitMix64::new(derive_seed(seed, "classroom/names"));
    let mut cells: Vec<Vec<&NameRecord>> = pool.cells().into_values().collect();
    for cell in cells.iter_mut() {
        rng.shuffle(cell);
    }
    rng.shuffle(&mut cells);
    let mut out = Vec::with_capacity(n);
    let mut round = 0;
    while out.len() < n {
        for cell in &cells {
            if out.len() == n {
                break;
            }
            out.push(cell[round % cell.len()].clone());
        }
        round += 1;
    }
    out
}

impl FromStr for SkillLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match folded.as_str() {
            "belowbasic" => Ok(SkillLevel::BelowBasic),
            "basic" => Ok(SkillLevel::Basic),
            "proficient" => Ok(SkillLevel::Proficient),
            "advanced" => Ok(SkillLevel::Advanced),
            _ => Err(format!("unknown skill level {s:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn counts(n: usize, w: [f64; 4]) -> Vec<usize> {
        allocate_counts(n, &SkillDistribution::new(w).unwrap())
            .unwrap()
            .into_values()
            .collect()
    }

    #[test]
    fn naep_mix_at_300() {
        assert_eq!(counts(300, SkillDistribution::NAEP.weights()), vec![75, 105, 75, 45]);
    }

    #[test]
    fn naep_mix_at_50_uses_tie_order() {
        assert_eq!(counts(50, SkillDistribution::NAEP.weights()), vec![13, 18, 12, 7]);
    }

    #[test]
    fn exact_quarters() {
        assert_eq!(counts(20, [0.25; 4]), vec![5, 5, 5, 5]);
    }

    #[test]
    fn zero_size_rejected() {
        assert!(matches!(
            allocate_counts(0, &SkillDistribution::NAEP),
            Err(ClassroomError::EmptyClassroom)
        ));
    }

    #[test]
    fn no_forced_minimum_seat() {
        // 0.15 * 3 = 0.45 is the smallest remainder; Advanced gets nothing.
        assert_eq!(counts(3, SkillDistribution::NAEP.weights()), vec![1, 1, 1, 0]);
    }

    #[test]
    fn bad_distribution_rejected() {
        assert!(SkillDistribution::new([0.5, 0.5, 0.5, 0.0]).is_err());
        assert!(SkillDistribution::new([1.5, -0.5, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn apportionment_sums_to_n(n in 1usize..=10_000, raw in prop::array::uniform4(0.0f64..1.0)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let mut w = raw.map(|x| x / total);
            // Absorb rounding so the weights pass the 1e-9 sum check.
            w[3] = 1.0 - w[0] - w[1] - w[2];
            prop_assume!(w[3] >= 0.0);
            let c = counts(n, w);
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            for (k, wk) in c.iter().zip(w) {
                // Largest remainder never strays more than one seat from the quota.
                prop_assert!((*k as f64 - n as f64 * wk).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn diverse_48_uses_every_name_once() {
        let pool = NamePool::default_pool();
        let strategy = IdentifierStrategy::DiverseNames {
            pool: pool.clone(),
            require_unique: true,
        };
        let class = sample_classroom(48, Grade::G4, &SkillDistribution::NAEP, &strategy, 3).unwrap();
        let names: HashSet<_> = class.iter().map(|p| p.identity.clone().unwrap()).collect();
        assert_eq!(names.len(), 48);
        let mut per_cell: HashMap<Demographics, usize> = HashMap::new();
        for p in &class {
            *per_cell.entry(p.name_demographics.unwrap()).or_default() += 1;
        }
        assert_eq!(per_cell.len(), 8);
        assert!(per_cell.values().all(|&c| c == 6));
    }

    #[test]
    fn unique_requirement_enforced() {
        let strategy = IdentifierStrategy::DiverseNames {
            pool: NamePool::default_pool(),
            require_unique: true,
        };
        assert!(sample_classroom(49, Grade::G4, &SkillDistribution::NAEP, &strategy, 3).is_err());
    }

    #[test]
    fn diverse_cells_balanced_for_any_size() {
        let strategy = IdentifierStrategy::DiverseNames {
            pool: NamePool::default_pool(),
            require_unique: false,
        };
        for n in [1, 7, 50, 97, 300] {
            let class = sample_classroom(n, Grade::G8, &SkillDistribution::NAEP, &strategy, n as u64).unwrap();
            let mut per_cell: HashMap<Demographics, usize> = HashMap::new();
            for p in &class {
                *per_cell.entry(p.name_demographics.unwrap()).or_default() += 1;
            }
            let max = per_cell.values().max().copied().unwrap_or(0);
            let min = if per_cell.len() < 8 {
                0
            } else {
                *per_cell.values().min().unwrap()
            };
            assert!(max - min <= 1, "n={n}: {per_cell:?}");
        }
    }

    #[test]
    fn student_ids_distinct_and_well_formed() {
        let class = sample_classroom(
            50,
            Grade::G8,
            &SkillDistribution::NAEP,
            &IdentifierStrategy::StudentIds,
            42,
        )
        .unwrap();
        let re = regex::Regex::new(r"^STU\d{6}$").unwrap();
        let ids: HashSet<_> = class.iter().map(|p| p.identity.clone().unwrap()).collect();
        assert_eq!(ids.len(), 50);
        assert!(ids.iter().all(|id| re.is_match(id)));
    }

    #[test]
    fn identity_absent_iff_no_identifier() {
        let class = sample_classroom(
            10,
            Grade::G4,
            &SkillDistribution::NAEP,
            &IdentifierStrategy::NoIdentifier,
            1,
        )
        .unwrap();
        assert!(class.iter().all(|p| p.identity.is_none()));
        let single = sample_classroom(
            10,
            Grade::G4,
            &SkillDistribution::NAEP,
            &IdentifierStrategy::SingleName("Tameka".into()),
            1,
        )
        .unwrap();
        assert!(single.iter().all(|p| p.identity.as_deref() == Some("Tameka")));
    }

    #[test]
    fn sampling_is_deterministic_and_matches_counts() {
        let strategy = IdentifierStrategy::StudentIds;
        let a = sample_classroom(300, Grade::G12, &SkillDistribution::NAEP, &strategy, 9).unwrap();
        let b = sample_classroom(300, Grade::G12, &SkillDistribution::NAEP, &strategy, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_classroom(300, Grade::G12, &SkillDistribution::NAEP, &strategy, 10).unwrap();
        assert_ne!(a, c);
        let mut tally = [0usize; 4];
        for p in &a {
            tally[p.skill.index()] += 1;
        }
        assert_eq!(tally, [75, 105, 75, 45]);
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(matches!(NamePool::new(vec![]), Err(ClassroomError::EmptyPool)));
    }

    #[test]
    fn id_space_exhaustion() {
        assert!(student_ids(1_000_001, 0).is_err());
    }

    #[test]
    fn strategy_labels_round_trip() {
        let pool = NamePool::default_pool();
        for s in ["none", "ids", "single:Aryan", "diverse"] {
            assert_eq!(IdentifierStrategy::parse(s, &pool).unwrap().label(), s);
        }
        assert!(IdentifierStrategy::parse("single:", &pool).is_err());
        assert!(IdentifierStrategy::parse("names", &pool).is_err());
    }

    #[test]
    fn default_pool_shape() {
        let pool = NamePool::default_pool();
        assert_eq!(pool.len(), 48);
        let cells = pool.cells();
        assert_eq!(cells.len(), 8);
        assert!(cells.values().all(|c| c.len() == 6));
        assert_eq!(pool.restricted_to_race(Race::Asian).unwrap().len(), 12);
    }

    #[test]
    fn subgroup_matching() {
        let d = Demographics {
            gender: Gender::Female,
            race: Race::Hispanic,
        };
        assert!(d.matches_subgroup("Females"));
        assert!(d.matches_subgroup("hispanic"));
        assert!(!d.matches_subgroup("male"));
    }
}
