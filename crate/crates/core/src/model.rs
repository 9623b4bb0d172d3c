//! Domain types shared across the engine.
//!
//! Option letters are never stored: index 0 is `A`, 1 is `B` and so on.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::ErrorClass;

/// Subject partition of ScienceQA. Closed: unknown subjects are load errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Natural,
    Social,
    Language,
}

impl Subject {
    pub const ALL: [Subject; 3] = [Subject::Natural, Subject::Social, Subject::Language];

    /// Parses the long-form subject strings used by ScienceQA.
    pub fn from_scienceqa(s: &str) -> Option<Self> {
        match s.trim() {
            "natural science" => Some(Subject::Natural),
            "social science" => Some(Subject::Social),
            "language science" => Some(Subject::Language),
            _ => None,
        }
    }

    pub fn as_scienceqa(self) -> &'static str {
        match self {
            Subject::Natural => "natural science",
            Subject::Social => "social science",
            Subject::Language => "language science",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::parse(s).ok_or_else(|| format!("unknown split `{s}`"))
    }
}

impl std::str::FromStr for Subject {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "natural" | "nat" | "natural science" => Ok(Subject::Natural),
            "social" | "soc" | "social science" => Ok(Subject::Social),
            "language" | "lan" | "language science" => Ok(Subject::Language),
            _ => Err(format!("unknown subject `{s}`")),
        }
    }
}

/// Opaque reference to an image (filesystem path or URI). Never decoded here.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        ImageRef(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_url(&self) -> bool {
        self.0.starts_with("http://") || self.0.starts_with("https://")
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_index: Option<usize>,
    pub hint: Option<String>,
    pub image: Option<ImageRef>,
    pub subject: Subject,
    pub grade: u8,
    pub topic: Option<String>,
    pub split: Split,
    /// Annotated solution text, used only as a BLEU/ROUGE reference.
    #[serde(default)]
    pub reference_rationale: Option<String>,
}

impl Problem {
    pub fn has_text_context(&self) -> bool {
        self.hint.is_some()
    }

    pub fn has_image_context(&self) -> bool {
        self.image.is_some()
    }

    pub fn has_no_context(&self) -> bool {
        !self.has_text_context() && !self.has_image_context()
    }

    pub fn context_class(&self) -> ContextClass {
        match (self.has_text_context(), self.has_image_context()) {
            (true, true) => ContextClass::TextAndImage,
            (true, false) => ContextClass::TextOnly,
            (false, true) => ContextClass::ImageOnly,
            (false, false) => ContextClass::NoContext,
        }
    }

    pub fn grade_band(&self) -> GradeBand {
        if self.grade <= 6 {
            GradeBand::Lower
        } else {
            GradeBand::Upper
        }
    }
}

/// Mutually exclusive context classes. `TXT` and `IMG` report membership
/// overlap (a `TextAndImage` problem counts for both).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextClass {
    TextOnly,
    ImageOnly,
    TextAndImage,
    NoContext,
}

impl ContextClass {
    pub const ALL: [ContextClass; 4] = [
        ContextClass::TextOnly,
        ContextClass::ImageOnly,
        ContextClass::TextAndImage,
        ContextClass::NoContext,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GradeBand {
    /// Grades 1 to 6.
    Lower,
    /// Grades 7 to 12.
    Upper,
}

/// Letter for a 0-based option index: 0 → `A`.
pub fn option_letter(index: usize) -> char {
    debug_assert!(index < 26);
    (b'A' + (index % 26) as u8) as char
}

/// Inverse of [`option_letter`], case-insensitive.
pub fn letter_index(letter: char) -> Option<usize> {
    let up = letter.to_ascii_uppercase();
    up.is_ascii_uppercase().then(|| (up as u8 - b'A') as usize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldViolation {
    pub field: &'static str,
    pub reason: String,
}

impl fmt::Display for FieldViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid problem `{id}`: {}", .violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct InvalidProblem {
    pub id: String,
    pub violations: Vec<FieldViolation>,
}

impl InvalidProblem {
    pub fn fields(&self) -> Vec<&'static str> {
        self.violations.iter().map(|v| v.field).collect()
    }
}

/// Checks every [`Problem`] invariant and reports each violated field.
pub fn validate_problem(p: Problem) -> Result<Problem, InvalidProblem> {
    let mut violations = Vec::new();
    let mut bad = |field, reason: String| violations.push(FieldViolation { field, reason });

    if p.id.trim().is_empty() {
        bad("id", "empty".into());
    }
    if p.question.trim().is_empty() {
        bad("question", "empty".into());
    }
    if p.choices.len() < 2 {
        bad("choices", format!("need at least 2 choices, got {}", p.choices.len()));
    } else if p.choices.len() > 26 {
        bad("choices", format!("at most 26 choices are letterable, got {}", p.choices.len()));
    }
    if let Some(i) = p.choices.iter().position(|c| c.trim().is_empty()) {
        bad("choices", format!("choice {i} is empty"));
    }
    if let Some(a) = p.answer_index {
        if a >= p.choices.len() {
            bad("answer_index", format!("{a} out of range for {} choices", p.choices.len()));
        }
    }
    if !(1..=12).contains(&p.grade) {
        bad("grade", format!("{} not in 1..=12", p.grade));
    }
    if matches!(&p.hint, Some(h) if h.trim().is_empty()) {
        bad("hint", "present but empty".into());
    }
    if matches!(&p.image, Some(i) if i.0.trim().is_empty()) {
        bad("image", "present but empty".into());
    }

    if violations.is_empty() {
        Ok(p)
    } else {
        Err(InvalidProblem { id: p.id, violations })
    }
}

/// A sub-answer is either known text or the negative-space marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum SubAnswer {
    Known(String),
    Uncertain,
}

impl SubAnswer {
    pub fn is_uncertain(&self) -> bool {
        matches!(self, SubAnswer::Uncertain)
    }

    /// Rendered form used inside prompts.
    pub fn as_text(&self) -> &str {
        match self {
            SubAnswer::Known(t) => t,
            SubAnswer::Uncertain => "Uncertain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubQA {
    pub index: usize,
    pub sub_question: String,
    pub sub_answer: SubAnswer,
}

impl SubQA {
    pub fn new(index: usize, sub_question: impl Into<String>, sub_answer: SubAnswer) -> Self {
        SubQA { index, sub_question: sub_question.into(), sub_answer }
    }
}

/// Checks that indices run 1..=n and known answers are non-blank.
pub fn check_sub_qas(items: &[SubQA]) -> Result<(), String> {
    for (pos, item) in items.iter().enumerate() {
        if item.index != pos + 1 {
            return Err(format!("sub-question at position {pos} has index {}", item.index));
        }
        if let SubAnswer::Known(t) = &item.sub_answer {
            if t.trim().is_empty() {
                return Err(format!("sub-answer {} is blank", item.index));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub text: String,
    pub supplementary: Vec<SubQA>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Deconstruct,
    Recognize,
    JointReason,
    Answer,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Deconstruct => "deconstruct",
            Stage::Recognize => "recognize",
            Stage::JointReason => "joint_reason",
            Stage::Answer => "answer",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub stage: Stage,
    pub prompt: String,
    pub response: String,
    pub cache_hit: bool,
    pub latency_ms: u64,
    /// Number of backend requests folded into this entry (deconstruction
    /// retries are recorded here instead of as repeated entries).
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

/// The optional caption fetch that precedes the staged calls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub image: ImageRef,
    pub caption: String,
    pub cache_hit: bool,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineTranscript {
    #[serde(default)]
    pub caption: Option<CaptionEntry>,
    pub entries: Vec<TranscriptEntry>,
}

impl PipelineTranscript {
    pub fn stages(&self) -> Vec<Stage> {
        self.entries.iter().map(|e| e.stage).collect()
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.entries.iter().filter(|e| e.stage == stage).count()
    }

    /// `Deconstruct → Recognize* → JointReason → Answer`, where every stage
    /// other than `Recognize` appears at most once and any may be missing
    /// after a failure.
    pub fn is_well_ordered(&self) -> bool {
        let mut last: Option<Stage> = None;
        for stage in self.stages() {
            match last {
                Some(prev) if prev > stage => return false,
                Some(prev) if prev == stage && stage != Stage::Recognize => return false,
                _ => {}
            }
            last = Some(stage);
        }
        true
    }

    /// Zeroes every latency field so transcripts can be compared byte-wise.
    pub fn clear_latency(&mut self) {
        for e in &mut self.entries {
            e.latency_ms = 0;
        }
        if let Some(c) = &mut self.caption {
            c.latency_ms = 0;
        }
    }
}

/// Problems recorded on a prediction. The batch never aborts: failures are
/// carried here instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum ErrorTag {
    /// A backend call failed for good (after retries).
    Backend { stage: Stage, class: ErrorClass, message: String },
    /// The caption fetch failed; the pipeline continued without it.
    CaptionUnavailable { class: ErrorClass, message: String },
    /// No sub-questions could be parsed even after the allowed retries.
    DeconstructionUnparsed { attempts: u32 },
    /// A VQA answer for the given sub-question index could not be obtained;
    /// the sub-answer stays `Uncertain`.
    RecognitionFailed { index: usize, class: ErrorClass },
    /// The response hit the token limit.
    Truncated { stage: Stage },
    /// The joint-reasoning response was empty after cleaning.
    EmptyRationale,
    /// No option could be read off the answer text.
    ExtractionFailed,
}

impl ErrorTag {
    pub fn is_extraction_failure(&self) -> bool {
        matches!(self, ErrorTag::ExtractionFailed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub problem_id: String,
    pub chosen_index: Option<usize>,
    pub raw_answer: String,
    pub rationale: Rationale,
    pub transcript: PipelineTranscript,
    pub errors: Vec<ErrorTag>,
}

impl Prediction {
    /// Checks the prediction-level invariants against its problem.
    pub fn check(&self, problem: &Problem) -> Result<(), String> {
        if self.problem_id != problem.id {
            return Err(format!("prediction for `{}` checked against `{}`", self.problem_id, problem.id));
        }
        if let Some(i) = self.chosen_index {
            if i >= problem.choices.len() {
                return Err(format!("chosen index {i} out of range"));
            }
        }
        let flagged = self.errors.iter().any(ErrorTag::is_extraction_failure);
        if self.chosen_index.is_none() != flagged {
            return Err("chosen_index absence must coincide with an extraction_failed tag".into());
        }
        if self.rationale.text.trim().is_empty() {
            return Err("empty rationale".into());
        }
        if !self.transcript.is_well_ordered() {
            return Err(format!("bad stage order {:?}", self.transcript.stages()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> Problem {
        Problem {
            id: "p1".into(),
            question: "Which is bigger?".into(),
            choices: vec!["A".into(), "B".into()],
            answer_index: Some(1),
            hint: None,
            image: None,
            subject: Subject::Natural,
            grade: 3,
            topic: None,
            split: Split::Test,
            reference_rationale: None,
        }
    }

    #[test]
    fn in_range_answer_is_valid() {
        let p = sample();
        assert_eq!(validate_problem(p.clone()).unwrap(), p);
    }

    #[test]
    fn out_of_range_answer_names_field() {
        let mut p = sample();
        p.answer_index = Some(2);
        let err = validate_problem(p).unwrap_err();
        assert_eq!(err.fields(), vec!["answer_index"]);
    }

    #[test]
    fn grade_thirteen_rejected() {
        let mut p = sample();
        p.grade = 13;
        assert_eq!(validate_problem(p).unwrap_err().fields(), vec!["grade"]);
    }

    #[test]
    fn every_violation_reported() {
        let mut p = sample();
        p.grade = 0;
        p.choices = vec!["only".into()];
        p.answer_index = Some(4);
        let fields = validate_problem(p).unwrap_err().fields();
        assert_eq!(fields, vec!["choices", "answer_index", "grade"]);
    }

    #[test]
    fn blank_choice_rejected() {
        let mut p = sample();
        p.choices[1] = "  ".into();
        assert_eq!(validate_problem(p).unwrap_err().fields(), vec!["choices"]);
    }

    #[test]
    fn letters() {
        assert_eq!(option_letter(0), 'A');
        assert_eq!(option_letter(3), 'D');
        assert_eq!(letter_index('c'), Some(2));
        assert_eq!(letter_index('1'), None);
    }

    #[test]
    fn context_classes() {
        let mut p = sample();
        assert_eq!(p.context_class(), ContextClass::NoContext);
        p.hint = Some("h".into());
        p.image = Some(ImageRef::new("x.png"));
        assert_eq!(p.context_class(), ContextClass::TextAndImage);
        assert!(!p.has_no_context());
    }

    #[test]
    fn stage_order_checks() {
        let entry = |stage| TranscriptEntry {
            stage,
            prompt: String::new(),
            response: String::new(),
            cache_hit: false,
            latency_ms: 0,
            attempts: 1,
        };
        let ok = PipelineTranscript {
            caption: None,
            entries: vec![
                entry(Stage::Deconstruct),
                entry(Stage::Recognize),
                entry(Stage::Recognize),
                entry(Stage::JointReason),
                entry(Stage::Answer),
            ],
        };
        assert!(ok.is_well_ordered());
        let twice = PipelineTranscript {
            caption: None,
            entries: vec![entry(Stage::Deconstruct), entry(Stage::Deconstruct)],
        };
        assert!(!twice.is_well_ordered());
        let backwards = PipelineTranscript {
            caption: None,
            entries: vec![entry(Stage::JointReason), entry(Stage::Recognize)],
        };
        assert!(!backwards.is_well_ordered());
    }

    #[test]
    fn sub_answer_serde_shape() {
        let s = serde_json::to_string(&SubAnswer::Known("x".into())).unwrap();
        assert_eq!(s, r#"{"kind":"known","text":"x"}"#);
        let u = serde_json::to_string(&SubAnswer::Uncertain).unwrap();
        assert_eq!(u, r#"{"kind":"uncertain"}"#);
    }
}
