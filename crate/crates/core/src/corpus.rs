//! Item corpus: loading, validation, indexing and slicing.
//!
//! The on-disk format is a single JSON array of item records. Records are
//! validated as a whole so a corpus is either entirely usable or rejected
//! with the offending `item_id` and field named.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

/// Tolerance on the sum of a real answer-choice distribution.
pub const DISTRIBUTION_SUM_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus JSON at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid item {item_id}: field `{field}`: {reason}")]
    Validation {
        item_id: String,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate item_id {0}")]
    DuplicateId(String),
}

impl CorpusError {
    fn invalid(item_id: &str, field: &'static str, reason: impl Into<String>) -> Self {
        CorpusError::Validation {
            item_id: item_id.to_string(),
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Grade {
    G4,
    G8,
    G12,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::G4, Grade::G8, Grade::G12];

    pub fn number(self) -> u8 {
        match self {
            Grade::G4 => 4,
            Grade::G8 => 8,
            Grade::G12 => 12,
        }
    }

    pub fn from_number(n: i64) -> Option<Self> {
        match n {
            4 => Some(Grade::G4),
            8 => Some(Grade::G8),
            12 => Some(Grade::G12),
            _ => None,
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Grade {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .parse::<i64>()
            .ok()
            .and_then(Grade::from_number)
            .ok_or_else(|| format!("grade must be 4, 8 or 12, got {s:?}"))
    }
}

impl Serialize for Grade {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for Grade {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let n = i64::deserialize(d)?;
        Grade::from_number(n).ok_or_else(|| serde::de::Error::custom(format!("grade must be 4, 8 or 12, got {n}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ContentArea {
    Algebra,
    DataAnalysis,
    Geometry,
    Measurement,
    NumberProperties,
}

impl ContentArea {
    pub const ALL: [ContentArea; 5] = [
        ContentArea::Algebra,
        ContentArea::DataAnalysis,
        ContentArea::Geometry,
        ContentArea::Measurement,
        ContentArea::NumberProperties,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContentArea::Algebra => "Algebra",
            ContentArea::DataAnalysis => "DataAnalysis",
            ContentArea::Geometry => "Geometry",
            ContentArea::Measurement => "Measurement",
            ContentArea::NumberProperties => "NumberProperties",
        }
    }

    /// Human phrasing used inside prompts.
    pub fn description(self) -> &'static str {
        match self {
            ContentArea::Algebra => "Algebra",
            ContentArea::DataAnalysis => "Data Analysis, Statistics, and Probability",
            ContentArea::Geometry => "Geometry",
            ContentArea::Measurement => "Measurement",
            ContentArea::NumberProperties => "Number Properties and Operations",
        }
    }
}

impl fmt::Display for ContentArea {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContentArea {
    type Err = String;

    /// Accepts the canonical names as well as NAEP's long-form labels
    /// ("Data Analysis, Statistics, and Probability").
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let area = if folded.starts_with("algebra") {
            ContentArea::Algebra
        } else if folded.starts_with("dataanalysis") {
            ContentArea::DataAnalysis
        } else if folded.starts_with("geometry") {
            ContentArea::Geometry
        } else if folded.starts_with("measurement") {
            ContentArea::Measurement
        } else if folded.starts_with("numberproperties") {
            ContentArea::NumberProperties
        } else {
            return Err(format!("unknown content area {s:?}"));
        };
        Ok(area)
    }
}

impl<'de> Deserialize<'de> for ContentArea {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DifficultyLabel {
    Easy,
    Medium,
    Hard,
}

impl DifficultyLabel {
    pub const ALL: [DifficultyLabel; 3] = [DifficultyLabel::Easy, DifficultyLabel::Medium, DifficultyLabel::Hard];
}

impl fmt::Display for DifficultyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for DifficultyLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "easy" => Ok(DifficultyLabel::Easy),
            "medium" => Ok(DifficultyLabel::Medium),
            "hard" => Ok(DifficultyLabel::Hard),
            _ => Err(format!("unknown difficulty {s:?}")),
        }
    }
}

/// An answer-choice letter, always an uppercase ASCII letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter(char);

impl Letter {
    pub fn new(c: char) -> Option<Self> {
        let c = c.to_ascii_uppercase();
        c.is_ascii_uppercase().then_some(Letter(c))
    }

    /// The i-th letter, 0 => 'A'.
    pub fn from_index(i: usize) -> Option<Self> {
        (i < 26).then(|| Letter((b'A' + i as u8) as char))
    }

    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    pub fn as_char(self) -> char {
        self.0
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Letter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let mut chars = t.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Letter::new(c).ok_or_else(|| format!("not a letter: {s:?}")),
            _ => Err(format!("not a single letter: {s:?}")),
        }
    }
}

impl Serialize for Letter {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Letter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub letter: Letter,
    pub text: String,
}

/// One multiple-choice item with its real-world statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub grade: Grade,
    pub content_area: ContentArea,
    #[serde(rename = "difficulty")]
    pub difficulty_label: DifficultyLabel,
    pub stem: String,
    pub choices: Vec<Choice>,
    pub correct_key: Letter,
    pub real_percent_correct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_choice_distribution: Option<BTreeMap<Letter, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_subgroup_percent_correct: Option<BTreeMap<String, f64>>,
    /// Fields not understood by this crate, kept so a re-serialized corpus
    /// carries them through unchanged.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Item {
    pub fn has_letter(&self, letter: Letter) -> bool {
        self.choices.iter().any(|c| c.letter == letter)
    }

    pub fn letters(&self) -> impl Iterator<Item = Letter> + '_ {
        self.choices.iter().map(|c| c.letter)
    }

    pub fn wrong_letters(&self) -> Vec<Letter> {
        self.letters().filter(|l| *l != self.correct_key).collect()
    }

    /// Check every item invariant, renormalizing the real choice
    /// distribution when its sum is within tolerance of 1.
    pub fn validate(&mut self) -> Result<(), CorpusError> {
        let id = self.item_id.clone();
        if id.trim().is_empty() {
            return Err(CorpusError::invalid(&id, "item_id", "must be non-empty"));
        }
        let k = self.choices.len();
        if !(4..=5).contains(&k) {
            return Err(CorpusError::invalid(
                &id,
                "choices",
                format!("expected 4 or 5 choices, found {k}"),
            ));
        }
        for (i, choice) in self.choices.iter().enumerate() {
            if choice.letter.index() != i {
                return Err(CorpusError::invalid(
                    &id,
                    "choices",
                    format!(
                        "letters must be consecutive from A; position {} has {}",
                        i, choice.letter
                    ),
                ));
            }
        }
        if !self.has_letter(self.correct_key) {
            return Err(CorpusError::invalid(
                &id,
                "correct_key",
                format!("{} is not one of the {k} choices", self.correct_key),
            ));
        }
        if !(0.0..=1.0).contains(&self.real_percent_correct) {
            return Err(CorpusError::invalid(
                &id,
                "real_percent_correct",
                format!("{} is outside [0, 1]", self.real_percent_correct),
            ));
        }
        if let Some(dist) = self.real_choice_distribution.as_mut() {
            for (letter, value) in dist.iter() {
                if !self.choices.iter().any(|c| c.letter == *letter) {
                    return Err(CorpusError::invalid(
                        &id,
                        "real_choice_distribution",
                        format!("letter {letter} is not a choice"),
                    ));
                }
                if !(0.0..=1.0).contains(value) {
                    return Err(CorpusError::invalid(
                        &id,
                        "real_choice_distribution",
                        format!("value {value} for {letter} is outside [0, 1]"),
                    ));
                }
            }
            if !dist.contains_key(&self.correct_key) {
                return Err(CorpusError::invalid(
                    &id,
                    "real_choice_distribution",
                    "does not include the correct key",
                ));
            }
            let total: f64 = dist.values().sum();
            if (total - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
                return Err(CorpusError::invalid(
                    &id,
                    "real_choice_distribution",
                    format!("values sum to {total}, expected 1 ± {DISTRIBUTION_SUM_TOLERANCE}"),
                ));
            }
            for v in dist.values_mut() {
                *v /= total;
            }
        }
        if let Some(sub) = &self.real_subgroup_percent_correct {
            for (name, value) in sub {
                if !(0.0..=1.0).contains(value) {
                    return Err(CorpusError::invalid(
                        &id,
                        "real_subgroup_percent_correct",
                        format!("value {value} for {name} is outside [0, 1]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A validated, immutable collection of items.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    items: Vec<Item>,
    index: HashMap<String, usize>,
    counts: BTreeMap<(Grade, DifficultyLabel), usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl Corpus {
    /// Validate items and build the indexes. Order is preserved.
    pub fn from_items(mut items: Vec<Item>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(items.len());
        let mut counts = BTreeMap::new();
        for (pos, item) in items.iter_mut().enumerate() {
            item.validate()?;
            if index.insert(item.item_id.clone(), pos).is_some() {
                return Err(CorpusError::DuplicateId(item.item_id.clone()));
            }
            *counts.entry((item.grade, item.difficulty_label)).or_insert(0) += 1;
        }
        Ok(Corpus { items, index, counts })
    }

    pub fn from_json_str(text: &str) -> Result<Self, CorpusError> {
        let items: Vec<Item> = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Corpus::from_items(items)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.items).expect("corpus items always serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_json_string() + "\n").map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: &str) -> Option<&Item> {
        self.index.get(item_id).map(|&i| &self.items[i])
    }

    /// Position of an item in file order.
    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn count(&self, grade: Grade, difficulty: DifficultyLabel) -> usize {
        self.counts.get(&(grade, difficulty)).copied().unwrap_or(0)
    }

    pub fn grade_count(&self, grade: Grade) -> usize {
        DifficultyLabel::ALL.iter().map(|d| self.count(grade, *d)).sum()
    }

    pub fn counts(&self) -> &BTreeMap<(Grade, DifficultyLabel), usize> {
        &self.counts
    }

    pub fn grades(&self) -> Vec<Grade> {
        Grade::ALL.into_iter().filter(|g| self.grade_count(*g) > 0).collect()
    }
}

/// Read and validate a corpus file.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Corpus::from_json_str(&text)
}

/// Predicates for [`filter_corpus`]; `None` matches everything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFilter {
    pub grade: Option<Grade>,
    pub content_area: Option<ContentArea>,
    pub difficulty: Option<DifficultyLabel>,
}

impl CorpusFilter {
    pub fn matches(&self, item: &Item) -> bool {
        self.grade.is_none_or(|g| item.grade == g)
            && self.content_area.is_none_or(|c| item.content_area == c)
            && self.difficulty.is_none_or(|d| item.difficulty_label == d)
    }
}

pub fn filter_corpus(
    corpus: &Corpus,
    grade: Option<Grade>,
    content_area: Option<ContentArea>,
    difficulty: Option<DifficultyLabel>,
) -> Corpus {
    let filter = CorpusFilter {
        grade,
        content_area,
        difficulty,
    };
    corpus.filtered(&filter)
}

impl Corpus {
    pub fn filtered(&self, filter: &CorpusFilter) -> Corpus {
        let items: Vec<Item> = self.items.iter().filter(|i| filter.matches(i)).cloned().collect();
        // Items were validated on the way in; re-indexing cannot fail.
        Corpus::from_items(items).expect("subset of a valid corpus is valid")
    }
}
