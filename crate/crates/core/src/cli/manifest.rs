use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{BackendConfig, GenerationParams};
use crate::model::Prediction;
use crate::pipeline::PipelineConfig;
use crate::prompting::sha256_hex;

/// Which problems a run covered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub split: String,
    pub subject: Option<String>,
    pub sample: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub backends: BackendConfig,
    pub generation: GenerationParams,
    pub pipeline: PipelineConfig,
    pub selection: Selection,
    pub transcripts: bool,
    pub templates_version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub problems: usize,
    pub predictions: usize,
    pub cache_hits: u64,
    pub backend_calls: u64,
    /// Predictions carrying at least one error tag.
    pub failures: usize,
    pub extraction_failures: usize,
}

impl RunCounts {
    pub fn tally(predictions: &[Prediction]) -> Self {
        RunCounts {
            problems: predictions.len(),
            predictions: predictions.len(),
            failures: predictions.iter().filter(|p| !p.errors.is_empty()).count(),
            extraction_failures: predictions.iter().filter(|p| p.chosen_index.is_none()).count(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dataset: String,
    /// sha256 of the dataset file bytes.
    pub dataset_digest: String,
    pub template_manifest_hash: String,
    pub config: ConfigSnapshot,
    pub started_at: String,
    pub finished_at: String,
    pub counts: RunCounts,
}

/// Same inputs, same id: a digest of the configuration, the dataset and the
/// templates.
pub fn run_id(config: &ConfigSnapshot, dataset_digest: &str, template_hash: &str) -> String {
    let snapshot = serde_json::to_string(config).expect("config snapshot serializes");
    let digest = sha256_hex(format!("{snapshot}\n{dataset_digest}\n{template_hash}").as_bytes());
    digest[..16].to_string()
}

/// Checks the manifest counts against the predictions it describes.
pub fn check_counts(manifest: &RunManifest, predictions: &[Prediction]) -> Result<(), String> {
    let expect = RunCounts::tally(predictions);
    let got = &manifest.counts;
    if (got.problems, got.predictions, got.failures, got.extraction_failures)
        != (expect.problems, expect.predictions, expect.failures, expect.extraction_failures)
    {
        return Err(format!("manifest counts {got:?} disagree with predictions {expect:?}"));
    }
    Ok(())
}

fn scrub(v: &mut Value, fields: &[&str]) {
    match v {
        Value::Object(map) => {
            for (k, x) in map.iter_mut() {
                if fields.contains(&k.as_str()) {
                    *x = match x {
                        Value::Bool(_) => Value::Bool(false),
                        _ => Value::from(0),
                    };
                } else {
                    scrub(x, fields);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|x| scrub(x, fields)),
        _ => {}
    }
}

fn canonicalize_with(jsonl: &str, fields: &[&str]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let mut v: Value = serde_json::from_str(line)?;
        scrub(&mut v, fields);
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}

/// Zeroes every `latency_ms` in a predictions file so runs compare
/// byte-wise.
pub fn canonicalize_predictions(jsonl: &str) -> Result<String, serde_json::Error> {
    canonicalize_with(jsonl, &["latency_ms"])
}

/// Also resets `cache_hit` flags, for comparing a cold run with a warm one.
pub fn canonicalize_telemetry(jsonl: &str) -> Result<String, serde_json::Error> {
    canonicalize_with(jsonl, &["latency_ms", "cache_hit"])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_scrubbed_everywhere() {
        let line = r#"{"a":{"latency_ms":12,"cache_hit":true},"b":[{"latency_ms":3}],"c":"latency_ms"}"#;
        let out = canonicalize_predictions(line).unwrap();
        assert_eq!(out, "{\"a\":{\"cache_hit\":true,\"latency_ms\":0},\"b\":[{\"latency_ms\":0}],\"c\":\"latency_ms\"}\n");
        let out = canonicalize_telemetry(line).unwrap();
        assert!(out.contains("\"cache_hit\":false"));
    }
}
