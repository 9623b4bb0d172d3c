mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ddcot_core::dataset::stratified_sample;
use ddcot_core::eval::{bleu_n, rouge_l};
use ddcot_core::model::{option_letter, ImageRef, Problem, Split, SubAnswer, SubQA, Subject};
use ddcot_core::parsing::{extract_choice, parse_deconstruction};
use ddcot_core::prompting::render_sub_qas;
use ddcot_core::rcve::{cross_attention, dlp_inject, softmax_rows, AttentionParams, DlpConfig, Matrix};

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,8}|[0-9]{1,3}|[A-Z][a-z]{0,6}", 1..8).prop_map(|w| w.join(" "))
}

fn sub_qas() -> impl Strategy<Value = Vec<SubQA>> {
    prop::collection::vec((words(), prop::option::of(words())), 1..8).prop_map(|pairs| {
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (q, a))| {
                let a = match a {
                    Some(t) => SubAnswer::Known(format!("{t}.")),
                    None => SubAnswer::Uncertain,
                };
                SubQA::new(i + 1, format!("{q}?"), a)
            })
            .collect()
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_listing_round_trips(items in sub_qas()) {
        let (got, diag) = parse_deconstruction(&render_sub_qas(&items)).unwrap();
        prop_assert_eq!(got, items);
        prop_assert!(!diag.recovered);
    }

    #[test]
    fn attention_matches_oracle(seed in any::<u64>(), heads in 1usize..=2, n_q in 1usize..=6, n_k in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::random(3, 5, 2 * heads, 4, heads, 1.0, &mut rng).unwrap();
        let q = Matrix::random_uniform(n_q, 3, 1.0, &mut rng);
        let kv = Matrix::random_uniform(n_k, 5, 1.0, &mut rng);
        let out = cross_attention(&q, &kv, &p).unwrap();
        prop_assert!(common::max_gap(&out, &common::attention(&q.to_rows(), &kv.to_rows(), &p)) <= 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(m in matrix(4, 7)) {
        let s = softmax_rows(&m.scale(20.0));
        for row in s.to_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn dlp_keeps_visual_block(seed in any::<u64>(), layers in 1usize..=4, n_p in 1usize..=5, n_v in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DlpConfig::random(layers, n_p, 2, 1.0, &mut rng).unwrap();
        let v = Matrix::random_uniform(n_v, 2, 1.0, &mut rng);
        let out = dlp_inject(layers - 1, &v, &cfg).unwrap();
        prop_assert_eq!(out.rows(), n_v + 2 * n_p);
        for i in 0..n_v {
            prop_assert_eq!(out.row(n_p + i), v.row(i));
        }
        prop_assert!(dlp_inject(layers, &v, &cfg).is_err());
    }

    #[test]
    fn similarity_metrics_bounded(a in words(), b in words(), n in 1usize..=4) {
        for x in [bleu_n(&a, &b, n), rouge_l(&a, &b)] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert_eq!(bleu_n(&a, &a, n), 1.0);
        prop_assert_eq!(rouge_l(&a, &a), 1.0);
    }

    #[test]
    fn parenthesized_letter_is_extracted(n in 2usize..=6, pick in 0usize..6) {
        let i = pick % n;
        let choices: Vec<String> = (0..n).map(|k| format!("option number {k}")).collect();
        let text = format!("Therefore the answer is ({}).", option_letter(i));
        prop_assert_eq!(extract_choice(&text, &choices), Some(i));
    }

    #[test]
    fn sample_is_deterministic_and_sized(n in 0usize..30, seed in any::<u64>()) {
        let problems = pool();
        let a = stratified_sample(&problems, n, seed);
        let b = stratified_sample(&problems, n, seed);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n.min(problems.len()));
    }
}

fn pool() -> Vec<Problem> {
    (0..24)
        .map(|k| Problem {
            id: k.to_string(),
            question: format!("Question {k}?"),
            choices: vec!["yes".into(), "no".into()],
            answer_index: Some(0),
            hint: (k % 2 == 0).then(|| "A hint.".to_string()),
            image: (k % 3 == 0).then(|| ImageRef::new(format!("images/test/{k}/image.png"))),
            subject: [Subject::Natural, Subject::Social, Subject::Language][k % 3],
            grade: (k % 12 + 1) as u8,
            topic: None,
            split: Split::Test,
            reference_rationale: None,
        })
        .collect()
}
