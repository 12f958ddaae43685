"""Regenerate the synthetic corpora bundled under src/kcforge/data/.

The 12-question bank uses three disjoint letter vocabularies whose stems
start and end with a per-group anchor byte, so the offline bigram mock
(with an empty separator) sees strong within-group lift. The step log is
sampled from a known 3-KC AFM over those groups. Deterministic; run from
the repository root:

    python scripts/gen_bundled_data.py
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from kcforge import (
    KCModel,
    Question,
    QuestionBank,
    StepLog,
    StudentStep,
    save_kc_model,
    save_question_bank,
    save_step_log,
)

DATA_DIR = Path(__file__).resolve().parent.parent / "src" / "kcforge" / "data"

GROUPS = {
    "a": ["abead decade fgha", "acha bechad gaffa", "add fade cabbage ha",
          "agade hedba cafa"],
    "i": ["ijmon klimp nopli", "imjo ponkli mnoji", "ikkol monplo jini",
          "inol jompli kmi"],
    "q": ["qrstu vwxst urq", "quvx swqrt xrq", "qswx turvs wvq", "qxvt ruwst sq"],
}

BANK6 = [
    Question("m1", "What is cognitive task analysis?",
             ("A way to elicit expert knowledge", "A grading rubric")),
    Question("m2", "Which feedback arrives soonest?",
             ("Immediate feedback", "Delayed feedback", "No feedback")),
    Question("m3", "Name the spacing effect."),
    Question("m4", "What does a Q-matrix map?",
             ("Questions to knowledge components", "Students to grades")),
    Question("m5", "Define an opportunity count."),
    Question("m6", "Which model predicts first-attempt correctness?",
             ("An additive factors model", "A random walk")),
]


def build_bank12() -> tuple[QuestionBank, KCModel, str]:
    questions = []
    assignment = {}
    for anchor, stems in GROUPS.items():
        for n, stem in enumerate(stems, start=1):
            qid = f"{anchor}{n}"
            questions.append(Question(qid, stem))
            assignment[qid] = frozenset({f"vocab_{anchor}"})
    corpus = "\n".join("".join(stems) for stems in GROUPS.values())
    bank = QuestionBank(tuple(questions))
    expert = KCModel("expert12", assignment)
    return bank, expert, corpus


def sample_step_log(bank: QuestionBank, expert: KCModel, seed: int = 11,
                    n_students: int = 30) -> StepLog:
    rng = np.random.default_rng(seed)
    labels = expert.labels
    kc_of = {qid: labels.index(next(iter(expert.assignment[qid]))) for qid in bank.ids}
    theta = rng.normal(0.0, 1.0, size=n_students)
    beta = rng.uniform(-1.0, 1.0, size=len(labels))
    gamma = rng.uniform(0.0, 0.3, size=len(labels))
    rows = []
    for s in range(n_students):
        order = rng.permutation(len(bank))
        practice = np.zeros(len(labels), dtype=np.int64)
        for pos, j in enumerate(order):
            qid = bank.ids[j]
            kc = kc_of[qid]
            z = theta[s] + beta[kc] + gamma[kc] * practice[kc]
            y = int(rng.random() < 1.0 / (1.0 + np.exp(-z)))
            rows.append(StudentStep(f"st{s:02d}", qid, pos, y))
            practice[kc] += 1
    return StepLog(tuple(rows))


PIPELINE_CONFIG = """\
# End-to-end demo over the bundled synthetic corpus (offline bigram mock).
# Relative paths resolve against this file's directory.
bank: bank12.yaml
steps: steps12.csv
kc_models: [expert12.csv]
mock_corpus: mock_corpus.txt
sep: ""
k_range: [2, 5]
k_policy: silhouette
folds: 5
seed: 7
lambda_theta: 0.1
"""


def main() -> None:
    DATA_DIR.mkdir(parents=True, exist_ok=True)
    bank, expert, corpus = build_bank12()
    save_question_bank(bank, DATA_DIR / "bank12.yaml")
    save_kc_model(expert, DATA_DIR / "expert12.csv")
    (DATA_DIR / "mock_corpus.txt").write_text(corpus, encoding="utf-8")
    save_step_log(sample_step_log(bank, expert), DATA_DIR / "steps12.csv")
    save_question_bank(QuestionBank(tuple(BANK6)), DATA_DIR / "bank6.yaml")
    (DATA_DIR / "pipeline12.yaml").write_text(PIPELINE_CONFIG, encoding="utf-8")
    print(f"wrote bundled data to {DATA_DIR}")


if __name__ == "__main__":
    main()
