//! Parsing raw completions into graded responses, the append-only JSONL
//! store, and assembly of the dichotomous response matrix.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classroom::{SkillLevel, StudentProfile};
use crate::corpus::{Corpus, Item, Letter};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("response log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("response log {path} line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("response references unknown student {0}")]
    UnknownStudent(usize),
    #[error("response references unknown item {0}")]
    UnknownItem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseStatus {
    Ok,
    Recovered,
    Failed,
}

fn json_answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)["']\s*answer[\s_-]*key\s*["']\s*:\s*["']?\s*\(?\s*([A-Za-z]?)(?:[^A-Za-z]|$)"#)
            .expect("valid regex")
    })
}

fn marker_answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s*key\s*:\s*[\*\[\(]*\s*([A-Za-z])(?:[^A-Za-z]|$)").expect("valid regex"))
}

fn lone_letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[\*\(\[\s]*([A-Za-z])[\*\)\]\.\s]*$").expect("valid regex"))
}

fn percentage_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)percentage\s+correct\s*:\s*[\*\[\(]*\s*([-+]?\d+(?:\.\d+)?|[-+]?\.\d+)\s*%?")
            .expect("valid regex")
    })
}

fn letter_status(letter: &str, item: &Item, status: ParseStatus) -> (Option<Letter>, ParseStatus) {
    match letter.parse::<Letter>() {
        Ok(l) if item.has_letter(l) => (Some(l), status),
        _ => (None, ParseStatus::Failed),
    }
}

/// Extract the chosen letter from a raw completion.
///
/// Precedence: an `answer key` field of a (possibly single-quoted) JSON
/// object, then the last `Answer Key:` marker, then a lone letter on the
/// final non-empty line (`Recovered`). A letter outside the item's choices
/// fails the parse.
pub fn parse_answer(raw: &str, item: &Item) -> (Option<Letter>, ParseStatus) {
    // Duplicate keys (seen in real transcripts) resolve to the last value,
    // matching dict-literal semantics.
    if let Some(caps) = json_answer_re().captures_iter(raw).last() {
        let value = &caps[1];
        if !value.is_empty() {
            return letter_status(value, item, ParseStatus::Ok);
        }
    }
    if let Some(caps) = marker_answer_re().captures_iter(raw).last() {
        return letter_status(&caps[1], item, ParseStatus::Ok);
    }
    if let Some(last) = raw.lines().rev().find(|l| !l.trim().is_empty()) {
        if let Some(caps) = lone_letter_re().captures(last.trim()) {
            return letter_status(&caps[1], item, ParseStatus::Recovered);
        }
    }
    (None, ParseStatus::Failed)
}

/// Read the last `Percentage Correct:` value as a fraction, clamped to [0, 1].
pub fn parse_percentage(raw: &str) -> Option<f64> {
    let caps = percentage_re().captures_iter(raw).last()?;
    let value: f64 = caps[1].parse().ok()?;
    Some(value.clamp(0.0, 100.0) / 100.0)
}

pub fn grade(chosen: Option<Letter>, item: &Item) -> bool {
    chosen == Some(item.correct_key)
}

fn reasoning_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?s)["']reasoning\w*["']\s*:\s*(?:"((?:[^"\\]|\\.)*)"|'((?:[^'\\]|\\.)*)')"#)
            .expect("valid regex")
    })
}

/// First `reasoning` field of a JSON-ish completion, if non-empty.
pub fn extract_reasoning(raw: &str) -> Option<String> {
    let caps = reasoning_re().captures(raw)?;
    let text = caps.get(1).or_else(|| caps.get(2))?.as_str();
    (!text.trim().is_empty()).then(|| text.to_string())
}

/// One graded (student, item, replicate) outcome; also the JSONL line
/// format of the response log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedResponse {
    pub item_id: String,
    pub student_index: usize,
    pub replicate: u32,
    pub skill: SkillLevel,
    pub raw: String,
    pub chosen: Option<Letter>,
    pub correct: bool,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

impl SimulatedResponse {
    /// Parse and grade a raw completion.
    pub fn from_raw(item: &Item, profile: &StudentProfile, replicate: u32, raw: String) -> Self {
        let (chosen, parse_status) = parse_answer(&raw, item);
        SimulatedResponse {
            item_id: item.item_id.clone(),
            student_index: profile.student_index,
            replicate,
            skill: profile.skill,
            reasoning: extract_reasoning(&raw),
            correct: grade(chosen, item),
            chosen,
            parse_status,
            raw,
        }
    }

    pub fn key(&self) -> (String, usize, u32) {
        (self.item_id.clone(), self.student_index, self.replicate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectVariant {
    Greedy,
    Averaged,
}

impl DirectVariant {
    pub fn default_samples(self) -> usize {
        match self {
            DirectVariant::Greedy => 1,
            DirectVariant::Averaged => 10,
        }
    }

    pub fn temperature(self) -> f64 {
        match self {
            DirectVariant::Greedy => 0.0,
            DirectVariant::Averaged => 0.3,
        }
    }
}

/// A direct percent-correct prediction for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub item_id: String,
    /// Mean of the parsed samples; `None` when no sample parsed.
    pub predicted_percent: Option<f64>,
    pub variant: DirectVariant,
    pub n_samples: usize,
    pub samples: Vec<Option<f64>>,
    pub raw: Vec<String>,
}

impl DirectEstimate {
    pub fn from_raw(item_id: &str, variant: DirectVariant, raw: Vec<String>) -> Self {
        let samples: Vec<Option<f64>> = raw.iter().map(|r| parse_percentage(r)).collect();
        let parsed: Vec<f64> = samples.iter().flatten().copied().collect();
        let predicted_percent = (!parsed.is_empty()).then(|| parsed.iter().sum::<f64>() / parsed.len() as f64);
        DirectEstimate {
            item_id: item_id.to_string(),
            predicted_percent,
            variant,
            n_samples: raw.len(),
            samples,
            raw,
        }
    }
}

/// Append-only JSON-lines file. Writes from several threads are
/// serialized; a torn final line left by a crash is cut off on open.
pub struct JsonlLog<T> {
    path: PathBuf,
    file: Mutex<File>,
    _marker: PhantomData<fn() -> T>,
}

impl<T: Serialize + DeserializeOwned> JsonlLog<T> {
    /// Open (creating if needed) and return the log with every complete
    /// record already in it.
    pub fn open(path: &Path) -> Result<(Self, Vec<T>), StoreError> {
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(path)
            .map_err(io)?;
        let mut records = Vec::new();
        let mut good_len: u64 = 0;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut line_no = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(io)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let complete = line.ends_with('\n');
                if line.trim().is_empty() {
                    good_len += n as u64;
                    continue;
                }
                match serde_json::from_str::<T>(line.trim_end()) {
                    Ok(rec) if complete => {
                        records.push(rec);
                        good_len += n as u64;
                    }
                    // Torn tail: the last write never finished.
                    _ if !complete => break,
                    Ok(_) => unreachable!(),
                    Err(e) => {
                        return Err(StoreError::Corrupt {
                            path: path.display().to_string(),
                            line: line_no,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        file.set_len(good_len).map_err(io)?;
        file.seek(SeekFrom::End(0)).map_err(io)?;
        Ok((
            JsonlLog {
                path: path.to_path_buf(),
                file: Mutex::new(file),
                _marker: PhantomData,
            },
            records,
        ))
    }

    /// Read all records without opening for append.
    pub fn read_all(path: &Path) -> Result<Vec<T>, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// Append records as one write and flush.
    pub fn append(&self, records: &[T]) -> Result<(), StoreError> {
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r).expect("records serialize"));
            buf.push('\n');
        }
        let mut file = self.file.lock().expect("log mutex poisoned");
        file.write_all(buf.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| StoreError::Io {
                path: self.path.display().to_string(),
                source,
            })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// One bit per (student, item), with `None` for cells never observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    pub items: Vec<String>,
    pub students: Vec<(usize, SkillLevel)>,
    /// Row-major, `students.len() * items.len()`.
    cells: Vec<Option<bool>>,
}

impl ResponseMatrix {
    pub fn new(items: Vec<String>, students: Vec<(usize, SkillLevel)>, cells: Vec<Option<bool>>) -> Self {
        assert_eq!(cells.len(), items.len() * students.len(), "matrix shape mismatch");
        ResponseMatrix { items, students, cells }
    }

    pub fn n_students(&self) -> usize {
        self.students.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<bool> {
        self.cells[row * self.items.len() + col]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = Option<bool>> + '_ {
        (0..self.students.len()).map(move |r| self.cell(r, col))
    }

    pub fn covered_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Per (skill group, item) counts of correct and observed cells.
    pub fn group_counts(&self) -> GroupCounts {
        let mut correct = vec![[0u32; 4]; self.items.len()];
        let mut total = vec![[0u32; 4]; self.items.len()];
        for (r, (_, skill)) in self.students.iter().enumerate() {
            for c in 0..self.items.len() {
                if let Some(bit) = self.cell(r, c) {
                    total[c][skill.index()] += 1;
                    correct[c][skill.index()] += u32::from(bit);
                }
            }
        }
        GroupCounts {
            items: self.items.clone(),
            correct,
            total,
        }
    }

    /// Same students and items, restricted to the given rows.
    pub fn select_rows(&self, keep: impl Fn(usize, SkillLevel) -> bool) -> ResponseMatrix {
        let rows: Vec<usize> = self
            .students
            .iter()
            .enumerate()
            .filter(|(_, (idx, skill))| keep(*idx, *skill))
            .map(|(r, _)| r)
            .collect();
        let mut cells = Vec::with_capacity(rows.len() * self.items.len());
        for &r in &rows {
            for c in 0..self.items.len() {
                cells.push(self.cell(r, c));
            }
        }
        ResponseMatrix::new(
            self.items.clone(),
            rows.iter().map(|&r| self.students[r]).collect(),
            cells,
        )
    }

    /// Restrict to a subset of item columns, preserving matrix order.
    pub fn select_items(&self, keep: &HashSet<&str>) -> ResponseMatrix {
        let cols: Vec<usize> = (0..self.items.len())
            .filter(|&c| keep.contains(self.items[c].as_str()))
            .collect();
        let mut cells = Vec::with_capacity(cols.len() * self.students.len());
        for r in 0..self.students.len() {
            for &c in &cols {
                cells.push(self.cell(r, c));
            }
        }
        ResponseMatrix::new(
            cols.iter().map(|&c| self.items[c].clone()).collect(),
            self.students.clone(),
            cells,
        )
    }
}

/// Sufficient statistics of the group-level Rasch model.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCounts {
    pub items: Vec<String>,
    /// `correct[item][skill]`
    pub correct: Vec<[u32; 4]>,
    pub total: Vec<[u32; 4]>,
}

/// Collapse responses into a student × item matrix.
///
/// Rows follow classroom order and columns corpus order. Several replicates
/// of one (student, item) pair are reduced by majority vote, ties counting
/// as incorrect. Cells without responses stay masked.
pub fn build_matrix(
    responses: &[SimulatedResponse],
    classroom: &[StudentProfile],
    corpus: &Corpus,
) -> Result<ResponseMatrix, StoreError> {
    let rows: HashMap<usize, usize> = classroom
        .iter()
        .enumerate()
        .map(|(r, p)| (p.student_index, r))
        .collect();
    let n_items = corpus.len();
    let mut votes: HashMap<(usize, usize), BTreeMap<u32, bool>> = HashMap::new();
    for resp in responses {
        let row = *rows
            .get(&resp.student_index)
            .ok_or(StoreError::UnknownStudent(resp.student_index))?;
        let col = corpus
            .position(&resp.item_id)
            .ok_or_else(|| StoreError::UnknownItem(resp.item_id.clone()))?;
        votes
            .entry((row, col))
            .or_default()
            .insert(resp.replicate, resp.correct);
    }
    let mut cells = vec![None; classroom.len() * n_items];
    for ((row, col), reps) in votes {
        let yes = reps.values().filter(|b| **b).count();
        cells[row * n_items + col] = Some(2 * yes > reps.len());
    }
    Ok(ResponseMatrix::new(
        corpus.items().iter().map(|i| i.item_id.clone()).collect(),
        classroom.iter().map(|p| (p.student_index, p.skill)).collect(),
        cells,
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessRates {
    pub rates: BTreeMap<String, f64>,
    /// Items with no observed cell.
    pub excluded: Vec<String>,
}

/// Fraction correct over the covered cells of each column.
pub fn simulated_success_rates(matrix: &ResponseMatrix) -> SuccessRates {
    let mut out = SuccessRates::default();
    for (c, item) in matrix.items.iter().enumerate() {
        let (mut yes, mut seen) = (0usize, 0usize);
        for bit in matrix.column(c).flatten() {
            seen += 1;
            yes += usize::from(bit);
        }
        if seen == 0 {
            out.excluded.push(item.clone());
        } else {
            out.rates.insert(item.clone(), yes as f64 / seen as f64);
        }
    }
    out
}

/// Counts of each chosen letter among incorrect responses, per item.
pub fn incorrect_choice_counts(responses: &[SimulatedResponse]) -> BTreeMap<String, BTreeMap<Letter, usize>> {
    let mut out: BTreeMap<String, BTreeMap<Letter, usize>> = BTreeMap::new();
    for r in responses {
        if let (false, Some(letter)) = (r.correct, r.chosen) {
            *out.entry(r.item_id.clone()).or_default().entry(letter).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub total: usize,
    pub ok: usize,
    pub recovered: usize,
    pub failed: usize,
}

impl ParseSummary {
    pub fn from_responses(responses: &[SimulatedResponse]) -> Self {
        let mut s = ParseSummary {
            total: responses.len(),
            ..Default::default()
        };
        for r in responses {
            match r.parse_status {
                ParseStatus::Ok => s.ok += 1,
                ParseStatus::Recovered => s.recovered += 1,
                ParseStatus::Failed => s.failed += 1,
            }
        }
        s
    }

    pub fn failure_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.failed as f64 / self.total as f64
        }
    }
}
