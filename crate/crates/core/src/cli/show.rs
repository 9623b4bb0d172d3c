use std::fmt::Write;

use crate::model::{option_letter, Prediction, Problem, Stage};
use crate::prompting::render_options;

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("    {l}\n")).collect()
}

fn heading(stage: Stage) -> &'static str {
    match stage {
        Stage::Deconstruct => "Stage 1 · deconstruct",
        Stage::Recognize => "Stage 2 · recognize",
        Stage::JointReason => "Stage 3 · joint reasoning",
        Stage::Answer => "Stage 4 · answer",
    }
}

/// Human-readable staged transcript. Latency is left out so the output is
/// stable across runs.
pub fn render(problem: &Problem, pred: &Prediction, prompts: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "problem:  {}", problem.id);
    let _ = writeln!(s, "question: {}", problem.question);
    let _ = writeln!(s, "options:  {}", render_options(&problem.choices));
    if let Some(h) = &problem.hint {
        let _ = writeln!(s, "context:  {h}");
    }
    let _ = writeln!(s, "image:    {}", problem.image.as_ref().map_or("none", |i| i.as_str()));

    if let Some(c) = &pred.transcript.caption {
        let _ = writeln!(s, "\n== caption{}", if c.cache_hit { " (cached)" } else { "" });
        s.push_str(&indent(&c.caption));
    }
    let mut recognized = 0;
    for e in &pred.transcript.entries {
        let mut notes = Vec::new();
        if e.attempts > 1 {
            notes.push(format!("{} attempts", e.attempts));
        }
        if e.cache_hit {
            notes.push("cached".to_string());
        }
        let notes = if notes.is_empty() { String::new() } else { format!(" ({})", notes.join(", ")) };
        if e.stage == Stage::Recognize {
            recognized += 1;
            let _ = writeln!(s, "\n== {} #{recognized}{notes}", heading(e.stage));
            let _ = writeln!(s, "    Q: {}", e.prompt);
            let _ = writeln!(s, "    A: {}", e.response);
            continue;
        }
        let _ = writeln!(s, "\n== {}{notes}", heading(e.stage));
        if prompts {
            s.push_str("  -- prompt\n");
            s.push_str(&indent(&e.prompt));
            s.push_str("  -- response\n");
        }
        s.push_str(&indent(&e.response));
    }

    if !pred.rationale.supplementary.is_empty() {
        s.push_str("\n== supplementary\n");
        for q in &pred.rationale.supplementary {
            let _ = writeln!(s, "    {}. {} -> {}", q.index, q.sub_question, q.sub_answer.as_text());
        }
    }
    s.push_str("\n== rationale\n");
    s.push_str(&indent(&pred.rationale.text));
    s.push_str("\n== answer\n");
    match pred.chosen_index {
        Some(i) => {
            let _ = writeln!(s, "    ({}) {}", option_letter(i), problem.choices[i]);
        }
        None => s.push_str("    (none)\n"),
    }
    if let Some(truth) = problem.answer_index {
        let verdict = if pred.chosen_index == Some(truth) { "correct" } else { "incorrect" };
        let _ = writeln!(s, "    ground truth ({}): {verdict}", option_letter(truth));
    }
    if !pred.errors.is_empty() {
        s.push_str("\n== errors\n");
        for e in &pred.errors {
            let _ = writeln!(s, "    {}", serde_json::to_string(e).expect("error tags serialize"));
        }
    }
    s
}
