//! The staged DDCoT run for one problem, and batches of them.
//!
//! Every stage is an independent, stateless request. Only sub-questions the
//! language model marked `Uncertain` reach the vision model, and only when the
//! problem actually has an image.

use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{llm_complete, vqa_answer, BackendError, Backends, ChatMessage, ChatRequest, ChatResponse, VisionRequest};
use crate::model::{
    CaptionEntry, ErrorTag, PipelineTranscript, Prediction, Problem, Rationale, Stage, SubAnswer, SubQA, TranscriptEntry,
};
use crate::parsing::{clean_rationale, extract_choice, parse_deconstruction};
use crate::prompting::Prompter;

/// Rationale text used when joint reasoning produced nothing usable.
pub const RATIONALE_UNAVAILABLE: &str = "(rationale unavailable)";

/// Sub-answer substituted for `Uncertain` on imageless problems when
/// `keep_uncertain_when_no_image` is off.
pub const UNKNOWN_ANSWER: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_parallel_problems: usize,
    pub max_parallel_vqa: usize,
    pub deconstruction_retries: u32,
    pub include_caption: bool,
    pub keep_uncertain_when_no_image: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_parallel_problems: 4,
            max_parallel_vqa: 4,
            deconstruction_retries: 1,
            include_caption: true,
            keep_uncertain_when_no_image: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid pipeline config: {0}")]
pub struct PipelineConfigError(pub String);

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineConfigError> {
        if self.max_parallel_problems == 0 {
            return Err(PipelineConfigError("max_parallel_problems must be at least 1".into()));
        }
        if self.max_parallel_vqa == 0 {
            return Err(PipelineConfigError("max_parallel_vqa must be at least 1".into()));
        }
        Ok(())
    }
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// A configured pipeline: backends, settings and the template set.
#[derive(Clone)]
pub struct Pipeline<'a> {
    backends: Backends,
    cfg: PipelineConfig,
    prompter: Prompter<'a>,
}

impl Pipeline<'static> {
    pub fn new(backends: Backends, cfg: PipelineConfig) -> Result<Self, PipelineConfigError> {
        Pipeline::with_prompter(backends, cfg, Prompter::default())
    }
}

impl<'a> Pipeline<'a> {
    pub fn with_prompter(backends: Backends, cfg: PipelineConfig, prompter: Prompter<'a>) -> Result<Self, PipelineConfigError> {
        cfg.validate()?;
        Ok(Pipeline { backends, cfg, prompter })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn chat(&self, prompt: String) -> ChatRequest {
        let g = &self.backends.generation;
        ChatRequest {
            model: g.model.clone(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: g.temperature,
            max_tokens: g.max_tokens,
            seed: g.seed,
        }
    }

    async fn ask(&self, prompt: &str) -> (Result<ChatResponse, BackendError>, u64) {
        let start = Instant::now();
        let r = llm_complete(self.backends.llm.as_ref(), &self.chat(prompt.to_string())).await;
        (r, elapsed_ms(start))
    }

    /// Runs all stages for one problem. Failures become error tags; this
    /// never aborts.
    pub async fn run(&self, p: &Problem) -> Prediction {
        let mut transcript = PipelineTranscript::default();
        let mut errors = Vec::new();

        // Stage 0: caption, gated on image presence.
        let caption = match (&p.image, self.cfg.include_caption) {
            (Some(image), true) => {
                let start = Instant::now();
                let req = VisionRequest::caption(&self.backends.caption_model, image.clone(), &self.backends.caption_prompt);
                match vqa_answer(self.backends.captioner.as_ref(), &req).await {
                    Ok(r) => {
                        transcript.caption = Some(CaptionEntry {
                            image: image.clone(),
                            caption: r.text.clone(),
                            cache_hit: r.cache_hit,
                            latency_ms: elapsed_ms(start),
                        });
                        Some(r.text)
                    }
                    Err(e) => {
                        errors.push(ErrorTag::CaptionUnavailable { class: e.class, message: e.message });
                        None
                    }
                }
            }
            _ => None,
        };
        let caption = caption.as_deref();

        // Stage 1: deconstruction with the negative-space instruction.
        let sub_qas = self.deconstruct(p, caption, &mut transcript, &mut errors).await;

        // Stage 2: recognition, only for what the LLM could not determine.
        let supplementary = self.recognize(p, sub_qas, &mut transcript, &mut errors).await;

        // Stage 3: joint reasoning.
        let prompt = self.prompter.joint_reasoning(p, &supplementary, caption);
        let (resp, latency_ms) = self.ask(&prompt).await;
        let resp = match resp {
            Ok(r) => r,
            Err(e) => {
                errors.push(ErrorTag::Backend { stage: Stage::JointReason, class: e.class, message: e.message });
                errors.push(ErrorTag::ExtractionFailed);
                return Prediction {
                    problem_id: p.id.clone(),
                    chosen_index: None,
                    raw_answer: String::new(),
                    rationale: Rationale { text: RATIONALE_UNAVAILABLE.into(), supplementary },
                    transcript,
                    errors,
                };
            }
        };
        if resp.truncated() {
            errors.push(ErrorTag::Truncated { stage: Stage::JointReason });
        }
        let mut text = clean_rationale(&resp.text);
        if text.trim().is_empty() {
            errors.push(ErrorTag::EmptyRationale);
            text = RATIONALE_UNAVAILABLE.into();
        }
        transcript.entries.push(TranscriptEntry {
            stage: Stage::JointReason,
            prompt,
            response: resp.text,
            cache_hit: resp.cache_hit,
            latency_ms,
            attempts: 1,
        });
        let rationale = Rationale { text, supplementary };

        // Stage 4: zero-shot answer selection from the rationale.
        let prompt = self.prompter.answer(p, &rationale);
        let (resp, latency_ms) = self.ask(&prompt).await;
        let (chosen_index, raw_answer) = match resp {
            Ok(r) => {
                if r.truncated() {
                    errors.push(ErrorTag::Truncated { stage: Stage::Answer });
                }
                let chosen = extract_choice(&r.text, &p.choices);
                transcript.entries.push(TranscriptEntry {
                    stage: Stage::Answer,
                    prompt,
                    response: r.text.clone(),
                    cache_hit: r.cache_hit,
                    latency_ms,
                    attempts: 1,
                });
                (chosen, r.text)
            }
            Err(e) => {
                errors.push(ErrorTag::Backend { stage: Stage::Answer, class: e.class, message: e.message });
                (None, String::new())
            }
        };
        if chosen_index.is_none() {
            errors.push(ErrorTag::ExtractionFailed);
        }
        Prediction { problem_id: p.id.clone(), chosen_index, raw_answer, rationale, transcript, errors }
    }

    async fn deconstruct(
        &self,
        p: &Problem,
        caption: Option<&str>,
        transcript: &mut PipelineTranscript,
        errors: &mut Vec<ErrorTag>,
    ) -> Vec<SubQA> {
        let base = self.prompter.deconstruction(p, caption);
        let mut prompt = base.clone();
        let mut attempts = 0u32;
        let mut latency_ms = 0;
        loop {
            attempts += 1;
            let (resp, ms) = self.ask(&prompt).await;
            latency_ms += ms;
            let resp = match resp {
                Ok(r) => r,
                Err(e) => {
                    errors.push(ErrorTag::Backend { stage: Stage::Deconstruct, class: e.class, message: e.message });
                    return Vec::new();
                }
            };
            let parsed = parse_deconstruction(&resp.text);
            let done = parsed.is_ok() || attempts > self.cfg.deconstruction_retries;
            if done {
                if resp.truncated() {
                    errors.push(ErrorTag::Truncated { stage: Stage::Deconstruct });
                }
                transcript.entries.push(TranscriptEntry {
                    stage: Stage::Deconstruct,
                    prompt,
                    response: resp.text,
                    cache_hit: resp.cache_hit,
                    latency_ms,
                    attempts,
                });
                return match parsed {
                    Ok((items, diag)) => {
                        for w in &diag.warnings {
                            tracing::debug!(problem = %p.id, "deconstruction: {w}");
                        }
                        items
                    }
                    Err(_) => {
                        errors.push(ErrorTag::DeconstructionUnparsed { attempts });
                        Vec::new()
                    }
                };
            }
            tracing::debug!(problem = %p.id, attempt = attempts, "deconstruction unparsed, retrying with reminder");
            prompt = format!("{base}{}", self.prompter.deconstruction_reminder());
        }
    }

    async fn recognize(
        &self,
        p: &Problem,
        mut items: Vec<SubQA>,
        transcript: &mut PipelineTranscript,
        errors: &mut Vec<ErrorTag>,
    ) -> Vec<SubQA> {
        let uncertain: Vec<usize> = (0..items.len()).filter(|&i| items[i].sub_answer.is_uncertain()).collect();
        let Some(image) = &p.image else {
            if !self.cfg.keep_uncertain_when_no_image {
                for i in uncertain {
                    items[i].sub_answer = SubAnswer::Known(UNKNOWN_ANSWER.into());
                }
            }
            return items;
        };
        let calls = uncertain.iter().map(|&i| {
            let req = VisionRequest::vqa(&self.backends.vqa_model, image.clone(), &items[i].sub_question);
            async move {
                let start = Instant::now();
                let r = vqa_answer(self.backends.vqa.as_ref(), &req).await;
                (i, req.question, r, elapsed_ms(start))
            }
        });
        // `buffered` keeps results in sub-question order.
        let results: Vec<_> = stream::iter(calls).buffered(self.cfg.max_parallel_vqa).collect().await;
        for (i, question, r, latency_ms) in results {
            match r {
                Ok(resp) => {
                    transcript.entries.push(TranscriptEntry {
                        stage: Stage::Recognize,
                        prompt: question,
                        response: resp.text.clone(),
                        cache_hit: resp.cache_hit,
                        latency_ms,
                        attempts: 1,
                    });
                    items[i].sub_answer = SubAnswer::Known(resp.text);
                }
                Err(e) => errors.push(ErrorTag::RecognitionFailed { index: items[i].index, class: e.class }),
            }
        }
        items
    }

    /// Runs problems with at most `max_parallel_problems` in flight; the
    /// output order matches the input.
    pub async fn run_batch(&self, problems: &[Problem]) -> Vec<Prediction> {
        stream::iter(problems.iter().map(|p| self.run(p))).buffered(self.cfg.max_parallel_problems).collect().await
    }
}

/// One problem through the built-in templates.
pub async fn run_ddcot(p: &Problem, backends: &Backends, cfg: &PipelineConfig) -> Result<Prediction, PipelineConfigError> {
    Ok(Pipeline::new(backends.clone(), cfg.clone())?.run(p).await)
}

pub async fn run_batch(problems: &[Problem], backends: &Backends, cfg: &PipelineConfig) -> Result<Vec<Prediction>, PipelineConfigError> {
    Ok(Pipeline::new(backends.clone(), cfg.clone())?.run_batch(problems).await)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::mock::{LlmScript, ScriptedLlm, ScriptedVision, VisionScript};
    use crate::backends::ErrorClass;
    use crate::model::{ImageRef, Split, Subject};

    fn problem(image: bool) -> Problem {
        Problem {
            id: "q".into(),
            question: "Which animal can fly?".into(),
            choices: vec!["dog".into(), "bird".into()],
            answer_index: Some(1),
            hint: None,
            image: image.then(|| ImageRef::new("img.png")),
            subject: Subject::Natural,
            grade: 2,
            topic: None,
            split: Split::Test,
            reference_rationale: None,
        }
    }

    fn backends(llm: LlmScript, vision: VisionScript) -> Backends {
        let v = Arc::new(ScriptedVision::new(vision));
        Backends::new(Arc::new(ScriptedLlm::new(llm)), v.clone(), v)
    }

    fn script(decon: &str) -> LlmScript {
        LlmScript::default()
            .rule(&["deconstruct"], decon)
            .rule(&["Based on the rationale"], "The answer is (B).")
            .rule(&["step by step"], "Birds have wings, so a bird can fly.")
    }

    #[tokio::test]
    async fn gating_without_image() {
        let b = backends(script("Sub-question 1: Does a bird have wings?\nSub-answer 1: Yes"), VisionScript::new());
        let pred = run_ddcot(&problem(false), &b, &PipelineConfig::default()).await.unwrap();
        assert_eq!(pred.transcript.stages(), vec![Stage::Deconstruct, Stage::JointReason, Stage::Answer]);
        assert_eq!(pred.chosen_index, Some(1));
        assert!(pred.errors.is_empty(), "{:?}", pred.errors);
        pred.check(&problem(false)).unwrap();
    }

    #[tokio::test]
    async fn uncertain_routes_to_vqa() {
        let decon = "Sub-question 1: What animal is in the picture?\nSub-answer 1: Uncertain\nSub-question 2: Can birds fly?\nSub-answer 2: Yes";
        let vis = VisionScript::new().answer("img.png", "What animal is in the picture?", "a bird").caption("img.png", "a bird on a branch");
        let pred = run_ddcot(&problem(true), &backends(script(decon), vis), &PipelineConfig::default()).await.unwrap();
        assert_eq!(pred.transcript.count(Stage::Recognize), 1);
        assert_eq!(pred.rationale.supplementary[0].sub_answer, SubAnswer::Known("a bird".into()));
        assert_eq!(pred.rationale.supplementary[1].sub_answer, SubAnswer::Known("Yes".into()));
        assert_eq!(pred.transcript.caption.as_ref().unwrap().caption, "a bird on a branch");
    }

    #[tokio::test]
    async fn imageless_uncertain_policy() {
        let decon = "Sub-question 1: What is shown?\nSub-answer 1: Uncertain";
        let b = backends(script(decon), VisionScript::new());
        let kept = run_ddcot(&problem(false), &b, &PipelineConfig::default()).await.unwrap();
        assert!(kept.rationale.supplementary[0].sub_answer.is_uncertain());
        let cfg = PipelineConfig { keep_uncertain_when_no_image: false, ..Default::default() };
        let filled = run_ddcot(&problem(false), &b, &cfg).await.unwrap();
        assert_eq!(filled.rationale.supplementary[0].sub_answer, SubAnswer::Known(UNKNOWN_ANSWER.into()));
    }

    #[tokio::test]
    async fn unparsable_deconstruction_degrades() {
        let b = backends(script("I cannot help with that."), VisionScript::new());
        let pred = run_ddcot(&problem(false), &b, &PipelineConfig::default()).await.unwrap();
        assert!(pred.errors.contains(&ErrorTag::DeconstructionUnparsed { attempts: 2 }));
        assert!(pred.rationale.supplementary.is_empty());
        assert_eq!(pred.transcript.entries[0].attempts, 2);
        assert!(pred.transcript.entries[0].prompt.ends_with(&Prompter::default().deconstruction_reminder()));
        assert_eq!(pred.chosen_index, Some(1));
    }

    #[tokio::test]
    async fn joint_reasoning_failure_yields_no_choice() {
        let mut s = LlmScript::default().rule(&["deconstruct"], "Sub-question 1: Can birds fly?\nSub-answer 1: Yes");
        s.rules.push(crate::backends::mock::Rule {
            all_of: vec!["step by step".into()],
            response: String::new(),
            finish_reason: None,
            error: Some(ErrorClass::ServerError),
        });
        let pred = run_ddcot(&problem(false), &backends(s, VisionScript::new()), &PipelineConfig::default()).await.unwrap();
        assert_eq!(pred.chosen_index, None);
        assert!(pred.errors.iter().any(|e| matches!(e, ErrorTag::Backend { stage: Stage::JointReason, .. })));
        pred.check(&problem(false)).unwrap();
    }

    #[tokio::test]
    async fn failed_vqa_keeps_uncertain() {
        let decon = "Sub-question 1: What animal is in the picture?\nSub-answer 1: Uncertain";
        let b = backends(script(decon), VisionScript::new());
        let cfg = PipelineConfig { include_caption: false, ..Default::default() };
        let pred = run_ddcot(&problem(true), &b, &cfg).await.unwrap();
        assert!(pred.rationale.supplementary[0].sub_answer.is_uncertain());
        assert!(pred.errors.contains(&ErrorTag::RecognitionFailed { index: 1, class: ErrorClass::ImageNotFound }));
    }

    #[test]
    fn config_bounds() {
        assert!(PipelineConfig { max_parallel_vqa: 0, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig::default().validate().is_ok());
    }
}
