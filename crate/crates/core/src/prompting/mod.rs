//! Prompt construction for the four pipeline stages.
//!
//! Template text lives in versioned data files (`templates/` next to the
//! crate manifest) listed in a manifest with a SHA-256 per file. The
//! built-in set is compiled in; [`TemplateSet::load_dir`] reads an
//! alternative set from disk and checks every hash.

mod template;

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use template::{PromptTemplate, Segment, TemplateError};

use crate::model::{option_letter, Problem, Rationale, SubQA};

pub const DECONSTRUCT: &str = "deconstruct";
pub const DECONSTRUCT_REMINDER: &str = "deconstruct_reminder";
pub const JOINT_REASONING: &str = "joint_reasoning";
pub const JOINT_REASONING_PLAIN: &str = "joint_reasoning_plain";
pub const ANSWER: &str = "answer";

const REQUIRED: [&str; 5] = [DECONSTRUCT, DECONSTRUCT_REMINDER, JOINT_REASONING, JOINT_REASONING_PLAIN, ANSWER];

/// Instruction sentences each builder must reproduce verbatim.
pub mod anchors {
    pub const DECONSTRUCT_STEPWISE: &str =
        "please think step-by-step and deconstruct the question down to necessary sub-questions";
    pub const ASSUME_NO_PICTURE: &str = "Assume that you do not have any information about the picture";
    pub const MARK_UNCERTAIN: &str =
        "formulate the corresponding sub-answer as 'Uncertain' if the sub-question cannot be determined";
    pub const STEP_BY_STEP: &str = "think step by step";
    pub const MAY_BE_INVALID: &str = "note that the supplementary information given may not always be valid";
    pub const SELECT_VALID: &str = "select valid information to form the rationale";
    pub const ANSWER_FORMAT: &str = "Answer with the option letter in parentheses, e.g. (A).";

    pub const DECONSTRUCTION: [&str; 3] = [DECONSTRUCT_STEPWISE, ASSUME_NO_PICTURE, MARK_UNCERTAIN];
    pub const JOINT_REASONING: [&str; 3] = [STEP_BY_STEP, MAY_BE_INVALID, SELECT_VALID];
}

const BUILTIN_MANIFEST: &str = include_str!("../../templates/manifest.json");
const BUILTIN_FILES: [(&str, &str); 5] = [
    ("deconstruct.txt", include_str!("../../templates/deconstruct.txt")),
    ("deconstruct_reminder.txt", include_str!("../../templates/deconstruct_reminder.txt")),
    ("joint_reasoning.txt", include_str!("../../templates/joint_reasoning.txt")),
    ("joint_reasoning_plain.txt", include_str!("../../templates/joint_reasoning_plain.txt")),
    ("answer.txt", include_str!("../../templates/answer.txt")),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateManifest {
    pub version: String,
    pub templates: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum TemplateSetError {
    #[error("reading template set: {0}")]
    Io(#[from] std::io::Error),
    #[error("template manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("template file `{path}` not found")]
    MissingFile { path: String },
    #[error("template `{name}` hash mismatch: manifest {expected}, file {actual}")]
    HashMismatch { name: String, expected: String, actual: String },
    #[error("template set lacks `{0}`")]
    MissingTemplate(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A verified set of named templates.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    version: String,
    manifest_hash: String,
    templates: HashMap<String, PromptTemplate>,
}

impl TemplateSet {
    fn from_parts(manifest_text: &str, read: impl Fn(&str) -> Result<String, TemplateSetError>) -> Result<Self, TemplateSetError> {
        let manifest: TemplateManifest = serde_json::from_str(manifest_text)?;
        let mut templates = HashMap::new();
        for entry in &manifest.templates {
            let text = read(&entry.path)?;
            let actual = sha256_hex(text.as_bytes());
            if actual != entry.sha256 {
                return Err(TemplateSetError::HashMismatch {
                    name: entry.name.clone(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            templates.insert(entry.name.clone(), PromptTemplate::parse(&entry.name, &text)?);
        }
        if let Some(missing) = REQUIRED.iter().find(|n| !templates.contains_key(**n)) {
            return Err(TemplateSetError::MissingTemplate(missing.to_string()));
        }
        Ok(TemplateSet {
            version: manifest.version,
            manifest_hash: sha256_hex(manifest_text.as_bytes()),
            templates,
        })
    }

    /// The compiled-in template set.
    pub fn builtin() -> &'static TemplateSet {
        static SET: OnceLock<TemplateSet> = OnceLock::new();
        SET.get_or_init(|| {
            TemplateSet::from_parts(BUILTIN_MANIFEST, |path| {
                BUILTIN_FILES
                    .iter()
                    .find(|(p, _)| *p == path)
                    .map(|(_, t)| t.to_string())
                    .ok_or_else(|| TemplateSetError::MissingFile { path: path.into() })
            })
            .expect("built-in templates are consistent with their manifest")
        })
    }

    /// Loads `manifest.json` and the files it lists from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateSetError> {
        let manifest = std::fs::read_to_string(dir.join("manifest.json"))?;
        TemplateSet::from_parts(&manifest, |path| {
            let full = dir.join(path);
            std::fs::read_to_string(&full).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => TemplateSetError::MissingFile { path: path.into() },
                _ => TemplateSetError::Io(e),
            })
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// SHA-256 of the manifest bytes; pins the whole set.
    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn get(&self, name: &str) -> Option<&PromptTemplate> {
        self.templates.get(name)
    }

    fn required(&self, name: &str) -> &PromptTemplate {
        // presence checked at construction
        &self.templates[name]
    }
}

/// `(A) first (B) second ...`
pub fn render_options(choices: &[String]) -> String {
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("({}) {}", option_letter(i), c))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical sub-question listing, the format the deconstruction parser
/// reads back exactly.
pub fn render_sub_qas(items: &[SubQA]) -> String {
    items
        .iter()
        .map(|s| {
            format!(
                "Sub-question {i}: {q}\nSub-answer {i}: {a}",
                i = s.index,
                q = s.sub_question,
                a = s.sub_answer.as_text()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn context_block(p: &Problem) -> String {
    p.hint.as_deref().map(|h| format!("Context: {h}\n")).unwrap_or_default()
}

fn caption_block(caption: Option<&str>) -> String {
    caption.map(|c| format!("Image caption: {c}\n")).unwrap_or_default()
}

/// Builds prompts from a [`TemplateSet`].
#[derive(Debug, Clone, Copy)]
pub struct Prompter<'a> {
    templates: &'a TemplateSet,
}

impl Default for Prompter<'static> {
    fn default() -> Self {
        Prompter { templates: TemplateSet::builtin() }
    }
}

impl<'a> Prompter<'a> {
    pub fn new(templates: &'a TemplateSet) -> Self {
        Prompter { templates }
    }

    pub fn templates(&self) -> &'a TemplateSet {
        self.templates
    }

    fn render(&self, name: &str, bindings: &HashMap<&str, String>) -> String {
        self.templates
            .required(name)
            .render(bindings)
            .unwrap_or_else(|e| panic!("template set was verified but {e}"))
    }

    fn problem_bindings(p: &Problem) -> HashMap<&'static str, String> {
        HashMap::from([
            ("context_block", context_block(p)),
            ("question", p.question.clone()),
            ("options", render_options(&p.choices)),
        ])
    }

    pub fn deconstruction(&self, p: &Problem, caption: Option<&str>) -> String {
        let mut b = Self::problem_bindings(p);
        b.insert("caption_block", caption_block(caption));
        self.render(DECONSTRUCT, &b)
    }

    /// Text appended to the deconstruction prompt when a reply could not be
    /// parsed.
    pub fn deconstruction_reminder(&self) -> String {
        self.render(DECONSTRUCT_REMINDER, &HashMap::new())
    }

    /// Falls back to plain step-by-step reasoning when there is nothing to
    /// supplement.
    pub fn joint_reasoning(&self, p: &Problem, supplementary: &[SubQA], caption: Option<&str>) -> String {
        let mut b = Self::problem_bindings(p);
        b.insert("caption_block", caption_block(caption));
        if supplementary.is_empty() {
            self.render(JOINT_REASONING_PLAIN, &b)
        } else {
            b.insert("supplementary", render_sub_qas(supplementary));
            self.render(JOINT_REASONING, &b)
        }
    }

    pub fn answer(&self, p: &Problem, r: &Rationale) -> String {
        let mut b = Self::problem_bindings(p);
        b.insert("rationale", r.text.clone());
        self.render(ANSWER, &b)
    }
}

pub fn build_deconstruction_prompt(p: &Problem, caption: Option<&str>) -> String {
    Prompter::default().deconstruction(p, caption)
}

pub fn build_joint_reasoning_prompt(p: &Problem, supplementary: &[SubQA], caption: Option<&str>) -> String {
    Prompter::default().joint_reasoning(p, supplementary, caption)
}

pub fn build_answer_prompt(p: &Problem, r: &Rationale) -> String {
    Prompter::default().answer(p, r)
}
