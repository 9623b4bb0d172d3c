//! ScienceQA ingestion, filtering and sampling.
//!
//! `problems.json` maps problem ids to records. Images live under
//! `<image_root>/<split>/<id>/<file>`, where the root defaults to an
//! `images` directory next to the problems file.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::model::{validate_problem, ContextClass, GradeBand, ImageRef, Problem, Split, Subject};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed record `{id}`, field `{field}`: {reason}")]
pub struct MalformedRecord {
    pub id: String,
    pub field: String,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} is not valid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0} must be a JSON object mapping problem ids to records")]
    NotAnObject(PathBuf),
    #[error(transparent)]
    Malformed(#[from] MalformedRecord),
    #[error("line {line}: {source}")]
    Line { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Root of the `<split>/<id>/<file>` image tree.
    pub image_root: Option<PathBuf>,
    /// Skip malformed records with a warning instead of failing.
    pub lenient: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub problems: Vec<Problem>,
    /// Records dropped under `lenient`.
    pub skipped: Vec<MalformedRecord>,
}

/// Numeric ids in numeric order, then the rest lexicographically.
fn id_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

pub fn default_image_root(problems_path: &Path) -> PathBuf {
    problems_path.parent().unwrap_or(Path::new("")).join("images")
}

pub fn image_path(root: &Path, split: Split, id: &str, file: &str) -> PathBuf {
    root.join(split.as_str()).join(id).join(file)
}

/// Loads with default options: strict, sibling `images/` root.
pub fn load_scienceqa(path: &Path) -> Result<Vec<Problem>, DatasetError> {
    Ok(load_scienceqa_with(path, &LoadOptions::default())?.problems)
}

pub fn load_scienceqa_with(path: &Path, opts: &LoadOptions) -> Result<Loaded, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.into(), source })?;
    let value: Value = serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.into(), source })?;
    let Value::Object(map) = value else {
        return Err(DatasetError::NotAnObject(path.into()));
    };
    let root = opts.image_root.clone().unwrap_or_else(|| default_image_root(path));
    parse_records(&map, &root, opts.lenient)
}

/// Parses an in-memory `id -> record` object.
pub fn parse_records(map: &Map<String, Value>, image_root: &Path, lenient: bool) -> Result<Loaded, DatasetError> {
    let mut ids: Vec<&String> = map.keys().collect();
    ids.sort_by(|a, b| id_order(a, b));
    let mut out = Loaded::default();
    for id in ids {
        match parse_record(id, &map[id.as_str()], image_root) {
            Ok(p) => out.problems.push(p),
            Err(e) if lenient => {
                tracing::warn!("skipping {e}");
                out.skipped.push(e);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn parse_record(id: &str, rec: &Value, image_root: &Path) -> Result<Problem, MalformedRecord> {
    let bad = |field: &str, reason: String| MalformedRecord { id: id.into(), field: field.into(), reason };
    let obj = rec.as_object().ok_or_else(|| bad("record", "not an object".into()))?;
    let string = |field: &str| -> Result<Option<String>, MalformedRecord> {
        match obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(bad(field, format!("expected a string, got {other}"))),
        }
    };
    let required = |field: &str| string(field)?.ok_or_else(|| bad(field, "missing".into()));
    let non_empty = |s: Option<String>| s.filter(|s| !s.trim().is_empty());

    let question = required("question")?;
    let choices = match obj.get("choices") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|c| c.as_str().map(str::to_string).ok_or_else(|| bad("choices", format!("non-string choice {c}"))))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad("choices", "expected an array of strings".into())),
    };
    let answer_index = match obj.get("answer") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| bad("answer", format!("expected a non-negative integer, got {v}")))? as usize),
    };
    let grade_text = required("grade")?;
    let grade = grade_text
        .strip_prefix("grade")
        .and_then(|k| k.parse::<u8>().ok())
        .filter(|k| (1..=12).contains(k))
        .ok_or_else(|| bad("grade", format!("`{grade_text}` is not grade1..grade12")))?;
    let subject_text = required("subject")?;
    let subject = Subject::from_scienceqa(&subject_text).ok_or_else(|| bad("subject", format!("unknown subject `{subject_text}`")))?;
    let split_text = required("split")?;
    let split = Split::parse(&split_text).ok_or_else(|| bad("split", format!("unknown split `{split_text}`")))?;
    let image = non_empty(string("image")?).map(|file| {
        if file.contains("://") {
            ImageRef::new(file)
        } else {
            ImageRef::new(image_path(image_root, split, id, &file).to_string_lossy().into_owned())
        }
    });

    let problem = Problem {
        id: id.into(),
        question,
        choices,
        answer_index,
        hint: non_empty(string("hint")?),
        image,
        subject,
        grade,
        topic: non_empty(string("topic")?),
        split,
        reference_rationale: non_empty(string("solution")?),
    };
    validate_problem(problem).map_err(|e| {
        let v = &e.violations[0];
        bad(v.field, v.reason.clone())
    })
}

/// Inverse of the loader, for images stored under `image_root`.
pub fn to_scienceqa(problems: &[Problem], image_root: &Path) -> Value {
    let mut map = Map::new();
    for p in problems {
        let image = p.image.as_ref().map(|img| {
            let dir = image_root.join(p.split.as_str()).join(&p.id);
            Path::new(img.as_str())
                .strip_prefix(&dir)
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_else(|_| img.as_str().to_string())
        });
        map.insert(
            p.id.clone(),
            json!({
                "question": p.question,
                "choices": p.choices,
                "answer": p.answer_index,
                "hint": p.hint.clone().unwrap_or_default(),
                "image": image,
                "grade": format!("grade{}", p.grade),
                "subject": p.subject.as_scienceqa(),
                "topic": p.topic,
                "split": p.split.as_str(),
                "solution": p.reference_rationale.clone().unwrap_or_default(),
            }),
        );
    }
    Value::Object(map)
}

/// One normalized problem per line.
pub fn export_jsonl<W: Write>(problems: &[Problem], mut out: W) -> std::io::Result<()> {
    for p in problems {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn import_jsonl<R: BufRead>(input: R) -> Result<Vec<Problem>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io { path: PathBuf::from("<jsonl>"), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(&line).map_err(|source| DatasetError::Line { line: i + 1, source })?;
        let p = validate_problem(p).map_err(|e| MalformedRecord {
            id: e.id.clone(),
            field: e.violations[0].field.into(),
            reason: e.violations[0].reason.clone(),
        })?;
        out.push(p);
    }
    Ok(out)
}

/// Overlapping context categories: a problem with both a hint and an image
/// is in `Txt` and `Img`; `No` excludes both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContextCategory {
    Txt,
    Img,
    No,
}

impl ContextCategory {
    pub fn contains(self, p: &Problem) -> bool {
        match self {
            ContextCategory::Txt => p.has_text_context(),
            ContextCategory::Img => p.has_image_context(),
            ContextCategory::No => p.has_no_context(),
        }
    }
}

impl std::str::FromStr for ContextCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "txt" | "text" => Ok(ContextCategory::Txt),
            "img" | "image" => Ok(ContextCategory::Img),
            "no" | "none" => Ok(ContextCategory::No),
            _ => Err(format!("unknown context `{s}` (txt, img, no)")),
        }
    }
}

/// Stable-order subset satisfying every given predicate.
pub fn filter(problems: &[Problem], split: Option<Split>, subject: Option<Subject>, context: Option<ContextCategory>) -> Vec<Problem> {
    problems
        .iter()
        .filter(|p| split.is_none_or(|s| p.split == s))
        .filter(|p| subject.is_none_or(|s| p.subject == s))
        .filter(|p| context.is_none_or(|c| c.contains(p)))
        .cloned()
        .collect()
}

/// Largest-remainder allocation of `n` over stratum sizes; ties in the
/// remainder go to the earlier stratum.
pub fn allocate(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let n = n.min(total);
    let mut quota: Vec<usize> = sizes.iter().map(|s| s * n / total).collect();
    let mut left = n - quota.iter().sum::<usize>();
    // remainders compared exactly as s·n mod total
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| ((sizes[b] * n) % total).cmp(&((sizes[a] * n) % total)).then(a.cmp(&b)));
    for i in order {
        if left == 0 {
            break;
        }
        if quota[i] < sizes[i] {
            quota[i] += 1;
            left -= 1;
        }
    }
    quota
}

/// Seeded sample stratified by subject × context class. The result keeps
/// input order. `n` above the population size returns everything.
pub fn stratified_sample(problems: &[Problem], n: usize, seed: u64) -> Vec<Problem> {
    let keys: Vec<(Subject, ContextClass)> =
        Subject::ALL.iter().flat_map(|s| ContextClass::ALL.iter().map(move |c| (*s, *c))).collect();
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); keys.len()];
    for (i, p) in problems.iter().enumerate() {
        let k = keys.iter().position(|k| *k == (p.subject, p.context_class())).expect("all strata enumerated");
        strata[k].push(i);
    }
    let quota = allocate(&strata.iter().map(Vec::len).collect::<Vec<_>>(), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (members, q) in strata.iter_mut().zip(quota) {
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..q]);
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| problems[i].clone()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub per_subject: BTreeMap<Subject, usize>,
    pub per_context: BTreeMap<ContextCategory, usize>,
    pub per_grade_band: BTreeMap<GradeBand, usize>,
}

impl DatasetStats {
    pub fn of(problems: &[Problem]) -> Self {
        let mut s = DatasetStats { total: problems.len(), ..Default::default() };
        for p in problems {
            *s.per_split.entry(p.split).or_default() += 1;
            *s.per_subject.entry(p.subject).or_default() += 1;
            for c in [ContextCategory::Txt, ContextCategory::Img, ContextCategory::No] {
                if c.contains(p) {
                    *s.per_context.entry(c).or_default() += 1;
                }
            }
            *s.per_grade_band.entry(p.grade_band()).or_default() += 1;
        }
        s
    }
}
