//! Prompt rendering from plain-text template fixtures.
//!
//! Templates use `{name}` and `[NAME]`-style placeholders. The bundled set
//! lives in `prompts/`; an alternate directory with the same file names can
//! replace it wholesale.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classroom::{IdentityKind, SkillLevel, StudentProfile};
use crate::corpus::Item;

pub const ANSWER_MARKER: &str = "Answer Key:";
pub const PERCENTAGE_MARKER: &str = "Percentage Correct:";

/// Placeholders that must never survive rendering.
const PLACEHOLDERS: [&str; 8] = [
    "{grade}",
    "{skill level}",
    "{content area of problem}",
    "{Definition of skill level continues}",
    "{stem}",
    "{choices}",
    "[NAME]",
    "[STDID]",
];

const TEMPLATE_FILES: [(&str, &str); 7] = [
    ("knowledge_baseline", include_str!("../prompts/knowledge_baseline.txt")),
    ("direct_percentage", include_str!("../prompts/direct_percentage.txt")),
    ("student", include_str!("../prompts/student.txt")),
    ("student_named", include_str!("../prompts/student_named.txt")),
    ("student_id", include_str!("../prompts/student_id.txt")),
    ("item", include_str!("../prompts/item.txt")),
    ("roleplay_format", include_str!("../prompts/roleplay_format.txt")),
];

const SKILL_FILES: [(SkillLevel, &str, &str); 4] = [
    (
        SkillLevel::BelowBasic,
        "skill_below_basic",
        include_str!("../prompts/skill_below_basic.txt"),
    ),
    (
        SkillLevel::Basic,
        "skill_basic",
        include_str!("../prompts/skill_basic.txt"),
    ),
    (
        SkillLevel::Proficient,
        "skill_proficient",
        include_str!("../prompts/skill_proficient.txt"),
    ),
    (
        SkillLevel::Advanced,
        "skill_advanced",
        include_str!("../prompts/skill_advanced.txt"),
    ),
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot read prompt template {path}: {reason}")]
    Template { path: String, reason: String },
    #[error("no skill-level description for {0}")]
    MissingDescription(SkillLevel),
    #[error("{kind:?} prompt {expectation} a student profile")]
    ProfileMismatch {
        kind: PromptKind,
        expectation: &'static str,
    },
    #[error("placeholder {placeholder} left unresolved in {template} template")]
    UnresolvedPlaceholder {
        template: &'static str,
        placeholder: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    KnowledgeBaseline,
    DirectPercentage,
    StudentRolePlay,
}

impl PromptKind {
    pub fn answer_marker(self) -> &'static str {
        match self {
            PromptKind::DirectPercentage => PERCENTAGE_MARKER,
            PromptKind::KnowledgeBaseline | PromptKind::StudentRolePlay => ANSWER_MARKER,
        }
    }
}

/// How the rendered task is split across chat messages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageLayout {
    /// Task instructions and item together in one user message. Works with
    /// chat templates that reject a system role.
    #[default]
    SingleUser,
    /// Task instructions as the system message, item as the user message.
    SystemSplit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMetadata {
    pub item_id: String,
    pub student_index: Option<usize>,
    pub kind: PromptKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system_text: String,
    pub user_text: String,
    pub expected_answer_marker: String,
    pub metadata: PromptMetadata,
}

/// Descriptor text inserted for each skill level.
pub type SkillLevelDescription = BTreeMap<SkillLevel, String>;

/// A full set of templates plus skill descriptors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<&'static str, String>,
    pub descriptions: SkillLevelDescription,
    pub layout: MessageLayout,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: TEMPLATE_FILES
                .iter()
                .map(|(name, text)| (*name, text.trim_end().to_string()))
                .collect(),
            descriptions: SKILL_FILES
                .iter()
                .map(|(level, _, text)| (*level, text.trim().to_string()))
                .collect(),
            layout: MessageLayout::default(),
        }
    }
}

impl PromptSet {
    /// Load `<name>.txt` for every template from `dir`. Templates are
    /// required; skill descriptor files may be absent, in which case
    /// rendering a student of that level fails.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for (name, _) in TEMPLATE_FILES {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Template {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            templates.insert(name, text.trim_end().to_string());
        }
        let mut descriptions = BTreeMap::new();
        for (level, name, _) in SKILL_FILES {
            let path = dir.join(format!("{name}.txt"));
            if let Ok(text) = std::fs::read_to_string(&path) {
                if !text.trim().is_empty() {
                    descriptions.insert(level, text.trim().to_string());
                }
            }
        }
        Ok(PromptSet {
            templates,
            descriptions,
            layout: MessageLayout::default(),
        })
    }

    pub fn with_layout(mut self, layout: MessageLayout) -> Self {
        self.layout = layout;
        self
    }

    fn template(&self, name: &str) -> &str {
        self.templates
            .get(name)
            .map(String::as_str)
            .expect("every template name is loaded")
    }

    /// SHA-256 of every fixture, keyed by file stem. Any edit to a template
    /// or descriptor changes its entry.
    pub fn fixture_hashes(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = self
            .templates
            .iter()
            .map(|(name, text)| (name.to_string(), sha256_hex(text.as_bytes())))
            .collect();
        for (level, name, _) in SKILL_FILES {
            let text = self.descriptions.get(&level).map(String::as_str).unwrap_or("");
            out.insert(name.to_string(), sha256_hex(text.as_bytes()));
        }
        out
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn render_item(set: &PromptSet, item: &Item) -> String {
    let choices: Vec<String> = item
        .choices
        .iter()
        .map(|c| format!("{}. {}", c.letter, c.text))
        .collect();
    set.template("item")
        .replace("{stem}", &item.stem)
        .replace("{choices}", &choices.join("\n"))
}

fn check_resolved(template: &'static str, text: &str) -> Result<(), PromptError> {
    // Item text is inserted last, so a stem that itself contains "{grade}"
    // would trip this; the check runs on the task part only.
    for placeholder in PLACEHOLDERS {
        if text.contains(placeholder) {
            return Err(PromptError::UnresolvedPlaceholder { template, placeholder });
        }
    }
    Ok(())
}

/// Render one prompt. `profile` must be present exactly for role-play.
pub fn render_prompt(
    kind: PromptKind,
    item: &Item,
    profile: Option<&StudentProfile>,
    set: &PromptSet,
) -> Result<RenderedPrompt, PromptError> {
    let grade = item.grade.to_string();
    let area = item.content_area.description();
    let (template_name, task, extra) = match (kind, profile) {
        (PromptKind::KnowledgeBaseline, None) => (
            "knowledge_baseline",
            set.template("knowledge_baseline").to_string(),
            None,
        ),
        (PromptKind::DirectPercentage, None) => (
            "direct_percentage",
            set.template("direct_percentage").replace("{grade}", &grade),
            None,
        ),
        (PromptKind::StudentRolePlay, Some(p)) => {
            let description = set
                .descriptions
                .get(&p.skill)
                .ok_or(PromptError::MissingDescription(p.skill))?;
            let identity = p.identity.as_deref().unwrap_or("");
            let (name, raw) = match p.identity_kind {
                IdentityKind::None => ("student", set.template("student")),
                IdentityKind::StudentId => ("student_id", set.template("student_id")),
                IdentityKind::SingleName | IdentityKind::DiverseName => {
                    ("student_named", set.template("student_named"))
                }
            };
            let text = raw
                .replace("{skill level}", p.skill.display_name())
                .replace("{grade}", &grade)
                .replace("{content area of problem}", area)
                .replace("{Definition of skill level continues}", description)
                .replace("[NAME]", identity)
                .replace("[STDID]", identity);
            (name, text, Some(set.template("roleplay_format")))
        }
        (PromptKind::StudentRolePlay, None) => {
            return Err(PromptError::ProfileMismatch {
                kind,
                expectation: "requires",
            })
        }
        (_, Some(_)) => {
            return Err(PromptError::ProfileMismatch {
                kind,
                expectation: "does not take",
            })
        }
    };
    check_resolved(template_name, &task)?;
    if let Some(format) = extra {
        check_resolved("roleplay_format", format)?;
    }

    let mut item_part = render_item(set, item);
    if let Some(format) = extra {
        item_part.push_str("\n\n");
        item_part.push_str(format);
    }
    let (system_text, user_text) = match set.layout {
        MessageLayout::SingleUser => (String::new(), format!("{task}\n\n{item_part}")),
        MessageLayout::SystemSplit => (task, item_part),
    };
    Ok(RenderedPrompt {
        system_text,
        user_text,
        expected_answer_marker: kind.answer_marker().to_string(),
        metadata: PromptMetadata {
            item_id: item.item_id.clone(),
            student_index: profile.map(|p| p.student_index),
            kind,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classroom::{Demographics, Gender, Race};
    use crate::corpus::{Choice, ContentArea, DifficultyLabel, Grade, Letter};

    fn item(grade: Grade) -> Item {
        Item {
            item_id: "q1".into(),
            grade,
            content_area: ContentArea::NumberProperties,
            difficulty_label: DifficultyLabel::Easy,
            stem: "Kirstin wants to buy a flute that costs $240. How many more weeks?".into(),
            choices: ["9 weeks", "10 weeks", "11 weeks", "12 weeks"]
                .iter()
                .enumerate()
                .map(|(i, t)| Choice {
                    letter: Letter::from_index(i).unwrap(),
                    text: t.to_string(),
                })
                .collect(),
            correct_key: Letter::new('A').unwrap(),
            real_percent_correct: 0.6,
            real_choice_distribution: None,
            real_subgroup_percent_correct: None,
            extra: Default::default(),
        }
    }

    fn profile(skill: SkillLevel, kind: IdentityKind, identity: Option<&str>) -> StudentProfile {
        StudentProfile {
            student_index: 3,
            grade: Grade::G4,
            skill,
            identity: identity.map(String::from),
            identity_kind: kind,
            name_demographics: (kind == IdentityKind::DiverseName).then_some(Demographics {
                gender: Gender::Female,
                race: Race::Black,
            }),
        }
    }

    #[test]
    fn named_student_prompt() {
        let set = PromptSet::default();
        let p = profile(SkillLevel::Basic, IdentityKind::SingleName, Some("Tameka"));
        let r = render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), Some(&p), &set).unwrap();
        assert!(r.user_text.contains("You are Tameka, a student in the 4th grade"));
        assert!(r.user_text.contains("completely forget that you are an AI model"));
        assert!(r.user_text.contains(set.descriptions[&SkillLevel::Basic].as_str()));
        assert_eq!(r.expected_answer_marker, ANSWER_MARKER);
        assert_eq!(r.metadata.student_index, Some(3));
    }

    #[test]
    fn anonymous_student_mentions_skill_level() {
        let p = profile(SkillLevel::BelowBasic, IdentityKind::None, None);
        let r = render_prompt(
            PromptKind::StudentRolePlay,
            &item(Grade::G12),
            Some(&p),
            &PromptSet::default(),
        )
        .unwrap();
        assert!(r.user_text.contains("You are a Below Basic student in the 12th grade"));
        assert!(r.user_text.contains("Number Properties and Operations"));
    }

    #[test]
    fn student_id_prompt() {
        let p = profile(SkillLevel::Advanced, IdentityKind::StudentId, Some("STU000142"));
        let r = render_prompt(
            PromptKind::StudentRolePlay,
            &item(Grade::G8),
            Some(&p),
            &PromptSet::default(),
        )
        .unwrap();
        assert!(r.user_text.contains("You are STU000142, a student in the 8th grade"));
        assert!(r.user_text.contains("this student STU000142"));
    }

    #[test]
    fn direct_percentage_prompt() {
        let r = render_prompt(
            PromptKind::DirectPercentage,
            &item(Grade::G8),
            None,
            &PromptSet::default(),
        )
        .unwrap();
        assert!(r.user_text.contains("Percentage Correct:"));
        assert!(r.user_text.contains("8th-grade students"));
        assert_eq!(r.expected_answer_marker, PERCENTAGE_MARKER);
    }

    #[test]
    fn item_text_verbatim() {
        let it = item(Grade::G4);
        let r = render_prompt(PromptKind::KnowledgeBaseline, &it, None, &PromptSet::default()).unwrap();
        assert!(r.user_text.contains(&it.stem));
        for c in &it.choices {
            assert!(r.user_text.contains(&format!("{}. {}", c.letter, c.text)));
        }
    }

    #[test]
    fn system_split_layout() {
        let set = PromptSet::default().with_layout(MessageLayout::SystemSplit);
        let p = profile(SkillLevel::Basic, IdentityKind::None, None);
        let r = render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), Some(&p), &set).unwrap();
        assert!(r.system_text.contains("You are a Basic student"));
        assert!(r.user_text.starts_with("Question:"));
        assert!(!r.user_text.contains("You are a Basic student"));
    }

    #[test]
    fn rendering_is_pure() {
        let set = PromptSet::default();
        let p = profile(SkillLevel::Proficient, IdentityKind::DiverseName, Some("Imani"));
        let a = render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), Some(&p), &set).unwrap();
        let b = render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), Some(&p), &set).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_is_the_only_difference() {
        let set = PromptSet::default();
        let a = profile(SkillLevel::Basic, IdentityKind::DiverseName, Some("Imani"));
        let b = profile(SkillLevel::Basic, IdentityKind::DiverseName, Some("Quang"));
        let ra = render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), Some(&a), &set).unwrap();
        let rb = render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), Some(&b), &set).unwrap();
        assert_ne!(ra.user_text, rb.user_text);
        assert_eq!(ra.user_text.replace("Imani", "Quang"), rb.user_text);
    }

    #[test]
    fn no_placeholder_leaks() {
        let set = PromptSet::default();
        for skill in SkillLevel::ALL {
            for (kind, id) in [
                (IdentityKind::None, None),
                (IdentityKind::StudentId, Some("STU000001")),
                (IdentityKind::DiverseName, Some("Eun")),
            ] {
                let p = profile(skill, kind, id);
                let r = render_prompt(PromptKind::StudentRolePlay, &item(Grade::G12), Some(&p), &set).unwrap();
                for ph in PLACEHOLDERS {
                    assert!(!r.user_text.contains(ph), "{ph} leaked");
                }
            }
        }
    }

    #[test]
    fn missing_description_is_a_configuration_error() {
        let mut set = PromptSet::default();
        set.descriptions.remove(&SkillLevel::Advanced);
        let p = profile(SkillLevel::Advanced, IdentityKind::None, None);
        assert!(matches!(
            render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), Some(&p), &set),
            Err(PromptError::MissingDescription(SkillLevel::Advanced))
        ));
    }

    #[test]
    fn profile_presence_must_match_kind() {
        let set = PromptSet::default();
        let p = profile(SkillLevel::Basic, IdentityKind::None, None);
        assert!(render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), None, &set).is_err());
        assert!(render_prompt(PromptKind::KnowledgeBaseline, &item(Grade::G4), Some(&p), &set).is_err());
    }

    #[test]
    fn broken_template_detected() {
        let mut set = PromptSet::default();
        set.templates
            .insert("student", "You are a {skill level} student with {grade} [NAME]".into());
        let p = profile(SkillLevel::Basic, IdentityKind::None, None);
        // [NAME] resolves to the empty identity, so the anonymous template is clean.
        assert!(render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), Some(&p), &set).is_ok());
        set.templates.insert("student", "Hi {grade}{skill level} {stem".into());
        assert!(render_prompt(PromptKind::StudentRolePlay, &item(Grade::G4), Some(&p), &set).is_ok());
        set.templates
            .insert("knowledge_baseline", "Solve for {grade} students".into());
        assert!(matches!(
            render_prompt(PromptKind::KnowledgeBaseline, &item(Grade::G4), None, &set),
            Err(PromptError::UnresolvedPlaceholder { .. })
        ));
    }

    #[test]
    fn fixture_hash_changes_with_content() {
        let a = PromptSet::default();
        let mut b = a.clone();
        b.descriptions.insert(SkillLevel::Basic, "changed".into());
        assert_ne!(a.fixture_hashes(), b.fixture_hashes());
        assert_eq!(a.fixture_hashes().len(), 11);
    }

    #[test]
    fn load_dir_round_trips_bundled_fixtures() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts");
        assert_eq!(PromptSet::load_dir(&dir).unwrap(), PromptSet::default());
    }
}
