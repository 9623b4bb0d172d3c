//! Accuracy by ScienceQA category and rationale-similarity metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ContextCategory;
use crate::model::{GradeBand, Prediction, Problem, Subject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "NAT")]
    Nat,
    #[serde(rename = "SOC")]
    Soc,
    #[serde(rename = "LAN")]
    Lan,
    #[serde(rename = "TXT")]
    Txt,
    #[serde(rename = "IMG")]
    Img,
    #[serde(rename = "NO")]
    No,
    #[serde(rename = "G1-6")]
    G1To6,
    #[serde(rename = "G7-12")]
    G7To12,
    #[serde(rename = "Avg")]
    Avg,
}

impl Category {
    /// Table column order.
    pub const ALL: [Category; 9] = [
        Category::Nat,
        Category::Soc,
        Category::Lan,
        Category::Txt,
        Category::Img,
        Category::No,
        Category::G1To6,
        Category::G7To12,
        Category::Avg,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Nat => "NAT",
            Category::Soc => "SOC",
            Category::Lan => "LAN",
            Category::Txt => "TXT",
            Category::Img => "IMG",
            Category::No => "NO",
            Category::G1To6 => "G1-6",
            Category::G7To12 => "G7-12",
            Category::Avg => "Avg",
        }
    }

    pub fn contains(self, p: &Problem) -> bool {
        match self {
            Category::Nat => p.subject == Subject::Natural,
            Category::Soc => p.subject == Subject::Social,
            Category::Lan => p.subject == Subject::Language,
            Category::Txt => ContextCategory::Txt.contains(p),
            Category::Img => ContextCategory::Img.contains(p),
            Category::No => ContextCategory::No.contains(p),
            Category::G1To6 => p.grade_band() == GradeBand::Lower,
            Category::G7To12 => p.grade_band() == GradeBand::Upper,
            Category::Avg => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub n: usize,
    pub correct: usize,
    /// Absent when `n = 0`.
    pub accuracy: Option<f64>,
}

/// Mean rationale similarity over problems with a reference solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleScores {
    pub n: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub model: String,
    pub categories: BTreeMap<Category, CategoryScore>,
    pub per_problem: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<RationaleScores>,
}

impl CategoryReport {
    pub fn get(&self, c: Category) -> &CategoryScore {
        &self.categories[&c]
    }

    pub fn accuracy(&self, c: Category) -> Option<f64> {
        self.get(c).accuracy
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("prediction refers to unknown problem `{0}`")]
    UnknownProblemId(String),
    #[error("problem `{0}` has no ground-truth answer")]
    MissingGroundTruth(String),
    #[error("problem `{0}` has more than one prediction")]
    DuplicatePrediction(String),
}

/// Default model tag in reports.
pub const DEFAULT_MODEL_TAG: &str = "DDCoT";

/// Scores each prediction against its problem. A missing choice is wrong.
pub fn score(predictions: &[Prediction], problems: &[Problem]) -> Result<CategoryReport, EvalError> {
    let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut seen = HashSet::new();
    let mut categories: BTreeMap<Category, CategoryScore> =
        Category::ALL.iter().map(|c| (*c, CategoryScore { n: 0, correct: 0, accuracy: None })).collect();
    let mut per_problem = BTreeMap::new();
    let mut sims = Vec::new();
    for pred in predictions {
        let p = by_id.get(pred.problem_id.as_str()).ok_or_else(|| EvalError::UnknownProblemId(pred.problem_id.clone()))?;
        let truth = p.answer_index.ok_or_else(|| EvalError::MissingGroundTruth(p.id.clone()))?;
        if !seen.insert(p.id.as_str()) {
            return Err(EvalError::DuplicatePrediction(p.id.clone()));
        }
        let ok = pred.chosen_index == Some(truth);
        per_problem.insert(p.id.clone(), ok);
        for c in Category::ALL {
            if c.contains(p) {
                let s = categories.get_mut(&c).expect("all categories present");
                s.n += 1;
                s.correct += usize::from(ok);
            }
        }
        if let Some(reference) = &p.reference_rationale {
            let cand = &pred.rationale.text;
            sims.push((bleu_n(cand, reference, 1), bleu_n(cand, reference, 4), rouge_l(cand, reference)));
        }
    }
    for s in categories.values_mut() {
        s.accuracy = (s.n > 0).then(|| s.correct as f64 / s.n as f64);
    }
    let rationale = (!sims.is_empty()).then(|| {
        let n = sims.len() as f64;
        RationaleScores {
            n: sims.len(),
            bleu1: sims.iter().map(|s| s.0).sum::<f64>() / n,
            bleu4: sims.iter().map(|s| s.1).sum::<f64>() / n,
            rouge_l: sims.iter().map(|s| s.2).sum::<f64>() / n,
        }
    });
    Ok(CategoryReport { model: DEFAULT_MODEL_TAG.into(), categories, per_problem, rationale })
}

/// Lowercased whitespace tokens with edge punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= k {
        for w in tokens.windows(k) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with uniform weights over orders `1..=n`, clipped counts
/// and brevity penalty. An order with no k-grams on either side counts as
/// matched; with k-grams only in the reference it scores zero.
pub fn bleu_n(candidate: &str, reference: &str, n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = ngram_counts(&c, k);
        let total: usize = cand.values().sum();
        if total == 0 {
            if r.len() >= k {
                return 0.0;
            }
            continue; // precision 1
        }
        let refc = ngram_counts(&r, k);
        let clipped: usize = cand.iter().map(|(g, cnt)| (*cnt).min(refc.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let bp = if c.len() < r.len() { (1.0 - r.len() as f64 / c.len() as f64).exp() } else { 1.0 };
    bp * (log_sum / n as f64).exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure over tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Markdown, ReportFormat::Csv];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown report format `{s}` (json, md, csv)")),
        }
    }
}

fn percent(s: &CategoryScore) -> String {
    match s.accuracy {
        Some(a) => format!("{:.2}", a * 100.0),
        None => "—".into(),
    }
}

pub fn emit_report(report: &CategoryReport, format: ReportFormat) -> String {
    emit_reports(std::slice::from_ref(report), format)
}

/// Renders one or more reports. Markdown has one row per model.
pub fn emit_reports(reports: &[CategoryReport], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            let v = if reports.len() == 1 {
                serde_json::to_value(&reports[0])
            } else {
                serde_json::to_value(reports)
            };
            out = serde_json::to_string_pretty(&v.expect("reports serialize")).expect("reports serialize");
            out.push('\n');
        }
        ReportFormat::Markdown => {
            out.push_str("| Model |");
            for c in Category::ALL {
                let _ = write!(out, " {} |", c.label());
            }
            out.push_str("\n|---|");
            out.push_str(&"---:|".repeat(Category::ALL.len()));
            out.push('\n');
            for r in reports {
                let _ = write!(out, "| {} |", r.model);
                for c in Category::ALL {
                    let _ = write!(out, " {} |", percent(r.get(c)));
                }
                out.push('\n');
            }
        }
        ReportFormat::Csv => {
            out.push_str("model,category,n,correct,accuracy\n");
            for r in reports {
                for c in Category::ALL {
                    let s = r.get(c);
                    let acc = s.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
                    let _ = writeln!(out, "{},{},{},{},{}", csv_field(&r.model), c.label(), s.n, s.correct, acc);
                }
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_brevity_case() {
        let b = bleu_n("the cat", "the cat sat", 1);
        assert!((b - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn identical_strings() {
        for s in ["the cat", "a", "Birds have wings, so they can fly."] {
            for n in 1..=4 {
                assert_eq!(bleu_n(s, s, n), 1.0, "{s} n={n}");
            }
            assert_eq!(rouge_l(s, s), 1.0);
        }
    }

    #[test]
    fn disjoint_and_empty() {
        assert_eq!(bleu_n("dog", "cat", 1), 0.0);
        assert_eq!(bleu_n("", "cat", 1), 0.0);
        assert_eq!(rouge_l("", "cat"), 0.0);
    }

    #[test]
    fn rouge_lcs_case() {
        assert!((rouge_l("a b c", "a x c") - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_rule() {
        assert_eq!(tokenize("  Hello, WORLD! (it's) -- ok."), ["hello", "world", "it's", "ok"]);
    }

    #[test]
    fn markdown_dash_for_empty() {
        let r = score(&[], &[]).unwrap();
        let md = emit_report(&r, ReportFormat::Markdown);
        assert!(md.lines().nth(2).unwrap().contains("| — |"));
        assert_eq!(md.lines().next().unwrap(), "| Model | NAT | SOC | LAN | TXT | IMG | NO | G1-6 | G7-12 | Avg |");
    }
}
