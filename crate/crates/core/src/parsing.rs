//! Reading structure back out of free-text model replies.
//!
//! Deconstruction replies are read line by line with two accepted shapes:
//! labelled (`Sub-question N:` / `Sub-answer N:`, plus common drift such as
//! bold labels, bullets, missing numbers, `Q1:`/`A1:`) and enumerated
//! (`N. question ... Answer: ...`). Anything else is skipped with a warning.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::model::{letter_index, SubAnswer, SubQA};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseDiagnostics {
    pub warnings: Vec<String>,
    /// The reply deviated from the canonical format but was still read.
    pub recovered: bool,
}

impl ParseDiagnostics {
    fn warn(&mut self, msg: String) {
        self.warnings.push(msg);
        self.recovered = true;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no sub-questions found in reply")]
    NoSubQuestionsFound { diagnostics: ParseDiagnostics },
}

static CANONICAL_Q: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Sub-question (\d+): (\S.*)$").unwrap());
static CANONICAL_A: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Sub-answer (\d+): (\S.*)$").unwrap());

static LABEL_Q: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[-*•+]\s+)?\**\s*(?:sub[-_ ]?questions?\s*#?\s*(\d+)?|q(\d+))\s*\**\s*[:.)\-–—]\s*\**\s*(.*)$",
    )
    .unwrap()
});
static LABEL_A: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[-*•+]\s+)?\**\s*(?:sub[-_ ]?answers?\s*#?\s*(\d+)?|a(\d+)|answer\s*(\d+)?)\s*\**\s*[:.)\-–—]\s*\**\s*(.*)$",
    )
    .unwrap()
});
static ENUMERATED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\**\s*(\d+)\s*\**\s*[.)]\s+(.*\S.*)$").unwrap());
static INLINE_ANSWER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:^|\s|[-–—(])\**(?:sub[-_ ]?answer\s*\d*|answer)\s*\**\s*[:\-–—]\s*\**").unwrap()
});

fn strip_decoration(s: &str) -> &str {
    s.trim().trim_matches(|c: char| c == '*' || c == '_' || c == '`').trim()
}

fn split_inline(text: &str) -> (String, Option<String>) {
    match INLINE_ANSWER.find(text) {
        Some(m) => {
            let q = text[..m.start()].trim_end_matches(|c: char| c.is_whitespace() || c == '-' || c == '(');
            (strip_decoration(q).to_string(), Some(strip_decoration(text[m.end()..].trim_end_matches(')')).to_string()))
        }
        None => (strip_decoration(text).to_string(), None),
    }
}

fn classify(answer: &str) -> Option<SubAnswer> {
    let a = strip_decoration(answer);
    if is_uncertain(a) {
        Some(SubAnswer::Uncertain)
    } else if a.is_empty() {
        None
    } else {
        Some(SubAnswer::Known(a.to_string()))
    }
}

enum Line {
    Question { number: Option<usize>, text: String, inline: Option<String>, canonical: bool },
    Answer { number: Option<usize>, text: String, canonical: bool },
    Other,
}

fn number(caps: &regex::Captures<'_>, groups: &[usize]) -> Option<usize> {
    groups.iter().find_map(|g| caps.get(*g)).and_then(|m| m.as_str().parse().ok())
}

fn classify_line(line: &str, expecting_answer: bool) -> Line {
    if let Some(c) = CANONICAL_Q.captures(line) {
        let (text, inline) = split_inline(&c[2]);
        let canonical = inline.is_none();
        return Line::Question { number: c[1].parse().ok(), text, inline, canonical };
    }
    if let Some(c) = CANONICAL_A.captures(line) {
        return Line::Answer { number: c[1].parse().ok(), text: c[2].trim().to_string(), canonical: true };
    }
    if let Some(c) = LABEL_A.captures(line) {
        // A bare `Answer:` line only counts when a question is waiting for it.
        let bare = c.get(1).is_none() && c.get(2).is_none() && !line.to_ascii_lowercase().contains("sub");
        if !bare || expecting_answer {
            return Line::Answer { number: number(&c, &[1, 2, 3]), text: c[4].to_string(), canonical: false };
        }
    }
    if let Some(c) = LABEL_Q.captures(line) {
        let (text, inline) = split_inline(&c[3]);
        return Line::Question { number: number(&c, &[1, 2]), text, inline, canonical: false };
    }
    if let Some(c) = ENUMERATED.captures(line) {
        let (text, inline) = split_inline(&c[2]);
        return Line::Question { number: c[1].parse().ok(), text, inline, canonical: false };
    }
    Line::Other
}

/// Parses a deconstruction reply into sub-question/sub-answer pairs,
/// renumbered `1..=n` in textual order.
pub fn parse_deconstruction(response: &str) -> Result<(Vec<SubQA>, ParseDiagnostics), ParseError> {
    let mut diag = ParseDiagnostics::default();
    let mut out: Vec<SubQA> = Vec::new();
    let mut pending: Option<(String, usize)> = None;

    let push = |out: &mut Vec<SubQA>, q: String, a: SubAnswer| {
        let index = out.len() + 1;
        out.push(SubQA { index, sub_question: q, sub_answer: a });
    };
    let flush_unanswered = |out: &mut Vec<SubQA>, diag: &mut ParseDiagnostics, pending: &mut Option<(String, usize)>| {
        if let Some((q, line_no)) = pending.take() {
            diag.warn(format!("line {line_no}: sub-question has no sub-answer, treating as Uncertain"));
            push(out, q, SubAnswer::Uncertain);
        }
    };

    for (i, raw) in response.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match classify_line(line, pending.is_some()) {
            Line::Question { number, text, inline, canonical } => {
                flush_unanswered(&mut out, &mut diag, &mut pending);
                if text.is_empty() {
                    diag.warn(format!("line {line_no}: empty sub-question skipped"));
                    continue;
                }
                if !canonical {
                    diag.warn(format!("line {line_no}: non-canonical sub-question label"));
                }
                if number != Some(out.len() + 1) {
                    diag.warn(format!("line {line_no}: sub-question numbered {number:?}, renumbered to {}", out.len() + 1));
                }
                match inline {
                    Some(a) => match classify(&a) {
                        Some(ans) => push(&mut out, text, ans),
                        None => {
                            diag.warn(format!("line {line_no}: blank sub-answer, treating as Uncertain"));
                            push(&mut out, text, SubAnswer::Uncertain);
                        }
                    },
                    None => pending = Some((text, line_no)),
                }
            }
            Line::Answer { number, text, canonical } => {
                let Some((q, _)) = pending.take() else {
                    diag.warn(format!("line {line_no}: sub-answer without a preceding sub-question skipped"));
                    continue;
                };
                let expected = out.len() + 1;
                if !canonical {
                    diag.warn(format!("line {line_no}: non-canonical sub-answer label"));
                } else if number != Some(expected) {
                    diag.warn(format!("line {line_no}: sub-answer numbered {number:?}, expected {expected}"));
                }
                match classify(&text) {
                    Some(ans) => push(&mut out, q, ans),
                    None => {
                        diag.warn(format!("line {line_no}: blank sub-answer, treating as Uncertain"));
                        push(&mut out, q, SubAnswer::Uncertain);
                    }
                }
            }
            Line::Other => diag.warn(format!("line {line_no}: not a sub-question or sub-answer, skipped")),
        }
    }
    flush_unanswered(&mut out, &mut diag, &mut pending);

    if out.is_empty() {
        return Err(ParseError::NoSubQuestionsFound { diagnostics: diag });
    }
    Ok((out, diag))
}

/// True for the negative-space marker (`Uncertain`, `uncertainty.`, ...),
/// false for any substantive sentence that merely mentions uncertainty.
pub fn is_uncertain(sub_answer: &str) -> bool {
    let norm = sub_answer
        .trim()
        .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation() || "‘’“”".contains(c))
        .to_lowercase();
    norm == "uncertain" || norm == "uncertainty"
}

static PAREN_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Z])\)").unwrap());
static ANSWER_IS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:answer\s+is|answer\s*:|option\s+is)\s*(?:option\s+)?\(?([A-Z])(?:$|[^A-Za-z0-9])").unwrap()
});

fn in_range(letter: &str, n: usize) -> Option<usize> {
    letter.chars().next().and_then(letter_index).filter(|i| *i < n)
}

fn contains_phrase(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    hay.match_indices(needle).any(|(start, m)| {
        let before = hay[..start].chars().next_back();
        let after = hay[start + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Reads the chosen option off an answer reply.
///
/// In order: the last in-range `(X)`; an `answer is X` phrase or a lone
/// trailing letter; the single choice whose full text appears in the reply.
/// Ambiguous containment yields `None`.
pub fn extract_choice(answer_text: &str, choices: &[String]) -> Option<usize> {
    let n = choices.len();
    if let Some(i) = PAREN_LETTER
        .captures_iter(answer_text)
        .filter_map(|c| in_range(&c[1], n))
        .last()
    {
        return Some(i);
    }

    if let Some(i) = ANSWER_IS.captures_iter(answer_text).filter_map(|c| in_range(&c[1], n)).last() {
        return Some(i);
    }
    let trimmed = answer_text.trim().trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    let last_token = trimmed.rsplit(|c: char| c.is_whitespace() || c == ':').next().unwrap_or("");
    if last_token.len() == 1 && last_token.chars().all(|c| c.is_ascii_uppercase()) {
        if let Some(i) = in_range(last_token, n) {
            return Some(i);
        }
    }

    let hay = answer_text.to_lowercase();
    let mut hits = choices
        .iter()
        .enumerate()
        .filter(|(_, c)| contains_phrase(&hay, &c.trim().to_lowercase()))
        .map(|(i, _)| i);
    match (hits.next(), hits.next()) {
        (Some(i), None) => Some(i),
        _ => None,
    }
}

static PREFIX_ACK: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:sure|certainly|of course|okay|ok|absolutely)\b\s*[,!.:]\s*").unwrap()
});
static PREFIX_HERE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:here\s+is|here's|here\s+are)\b[^\n:]{0,80}:\s*").unwrap()
});
static PREFIX_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\**\s*(?:rationale|reasoning|solution)\s*\**\s*:\s*\**\s*").unwrap());
static ANSWER_DECLARATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\**\s*(?:(?:so|therefore|thus|hence|in conclusion),?\s+)?(?:the\s+)?(?:correct\s+|final\s+)?(?:answer|option)\s*(?:is|:)\s*\S.{0,80}$",
    )
    .unwrap()
});

/// Start of the last sentence, or `None` when the text is a single sentence.
fn last_sentence_start(text: &str) -> Option<usize> {
    let body = text.trim_end();
    let bytes = body.as_bytes();
    let mut start = None;
    for (i, &b) in bytes.iter().enumerate().take(bytes.len().saturating_sub(1)) {
        let boundary = match b {
            b'\n' => true,
            b'.' | b'!' | b'?' => bytes[i + 1].is_ascii_whitespace(),
            _ => false,
        };
        if boundary {
            start = Some(i + 1);
        }
    }
    start.map(|s| s + body[s..].len() - body[s..].trim_start().len())
}

fn clean_once(text: &str) -> String {
    let mut t = text.trim().to_string();
    for re in [&*PREFIX_ACK, &*PREFIX_HERE, &*PREFIX_LABEL] {
        if let Some(m) = re.find(&t) {
            t = t[m.end()..].trim_start().to_string();
        }
    }
    match last_sentence_start(&t) {
        Some(s) if ANSWER_DECLARATION.is_match(t[s..].trim()) => t[..s].trim_end().to_string(),
        None if ANSWER_DECLARATION.is_match(&t) => String::new(),
        _ => t,
    }
}

/// Strips acknowledgement prefixes, rationale labels and trailing answer
/// declarations. Falls back to the raw reply when nothing would remain.
pub fn clean_rationale(response: &str) -> String {
    let mut current = response.trim().to_string();
    loop {
        let next = clean_once(&current);
        if next.is_empty() {
            return response.to_string();
        }
        if next == current {
            return next;
        }
        current = next;
    }
}
