"""Exercises the Python bindings against the offline fixtures.

    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/ddcot-*.whl
    python python/smoke_test.py
"""

import os
import random
import sys

import ddcot

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MINI = os.path.join(ROOT, "crates", "core", "fixtures", "mini")


def check(name, cond):
    print(f"{'ok ' if cond else 'FAIL'} {name}")
    return bool(cond)


def main():
    results = []

    pairs = ddcot.parse_deconstruction(
        "Sub-question 1: What is shown?\nSub-answer 1: Two magnets.\n"
        "Sub-question 2: Which pole faces left?\nSub-answer 2: Uncertain\n"
    )
    results.append(check("parse_deconstruction", pairs == [("What is shown?", "Two magnets."), ("Which pole faces left?", None)]))
    results.append(check("is_uncertain", ddcot.is_uncertain("Uncertain") and not ddcot.is_uncertain("North.")))
    results.append(check("extract_choice", ddcot.extract_choice("The answer is (B).", ["repel", "attract"]) == 1))
    results.append(check("bleu/rouge", ddcot.bleu("a b c d", "a b c d") == 1.0 and ddcot.rouge_l("a b", "c d") == 0.0))

    os.chdir(MINI)
    problems = ddcot.load_problems("problems.json")
    results.append(check("load_problems", len(problems) == 6))
    by_id = {p["id"]: p for p in problems}
    pred = ddcot.run_problem(by_id["1"], "backends.json")
    results.append(check("run_problem", pred["problem_id"] == "1" and pred["chosen_index"] == by_id["1"]["answer_index"]))

    report = ddcot.score("golden/predictions.jsonl", "problems.json")
    avg = report["categories"]["Avg"]
    results.append(check("score", (avg["n"], avg["correct"]) == (6, 4)))

    rng = random.Random(0)
    rows = lambda n, c: [[rng.uniform(-1, 1) for _ in range(c)] for _ in range(n)]
    m = ddcot.Rcve(8, 3, 5, n_r=16, c_r=4, seed=1)
    out = m.forward(rows(1, 8), rows(3, 8), rows(5, 8))
    results.append(check("rcve forward shape", len(out) == 16 and all(len(r) == 8 for r in out)))
    worst = max(m.grad_check(p) for p in ddcot.Rcve.parameters())
    results.append(check(f"rcve grad_check ({worst:.1e})", worst < 1e-4))

    visual = rows(7, 4)
    injected = ddcot.dlp_inject(visual, layers=2, prompts_per_layer=3, layer=1)
    results.append(check("dlp_inject", len(injected) == 13 and injected[3:10] == visual))

    try:
        ddcot.dlp_inject(visual, layers=2, prompts_per_layer=3, layer=2)
        results.append(check("dlp layer bound", False))
    except ddcot.DdcotError:
        results.append(check("dlp layer bound", True))

    checks = ddcot.selftest(quick=True)
    results.append(check("selftest", all(c["passed"] for c in checks)))

    print(f"{sum(results)}/{len(results)} passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
