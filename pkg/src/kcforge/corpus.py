"""Question banks, KC models, and student-step logs: types, loaders, writers.

File formats are deliberately plain so researchers can hand-edit and diff
them: the question bank is a YAML document, KC models and step logs are
small CSV files.
"""

from __future__ import annotations

import csv
import io
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import yaml

from .errors import InputError
from .fileio import atomic_write_text


@dataclass(frozen=True)
class Question:
    """A single assessment item: stem plus optional answer options."""

    id: str
    stem: str
    options: tuple[str, ...] = ()
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise InputError("question id must be non-empty")
        if any(ch.isspace() for ch in self.id) or "," in self.id:
            raise InputError(
                f"question id {self.id!r} may not contain whitespace or commas"
            )
        if not self.stem.strip():
            raise InputError(f"question {self.id!r} has an empty stem")


def _option_letter(index: int) -> str:
    """Spreadsheet-style option letters: A..Z, AA, AB, ..."""
    letters = []
    n = index + 1
    while n > 0:
        n, rem = divmod(n - 1, 26)
        letters.append(string.ascii_uppercase[rem])
    return "".join(reversed(letters))


def canonical_text(q: Question) -> str:
    """Render the text of a question that scoring backends see.

    The stem comes first, then one line per option ("A. ...", "B. ...").
    Answer keys or other metadata are never included, so similarity always
    reflects question content only.
    """
    lines = [q.stem]
    lines.extend(f"{_option_letter(i)}. {opt}" for i, opt in enumerate(q.options))
    return "\n".join(lines)


@dataclass(frozen=True)
class QuestionBank:
    """An ordered collection of questions with unique ids."""

    questions: tuple[Question, ...]

    def __post_init__(self) -> None:
        index: dict[str, int] = {}
        for i, q in enumerate(self.questions):
            if q.id in index:
                raise InputError(f"duplicate question id {q.id!r}")
            index[q.id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.questions)

    def __iter__(self) -> Iterator[Question]:
        return iter(self.questions)

    def __contains__(self, qid: str) -> bool:
        return qid in self._index

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.questions)

    def question(self, qid: str) -> Question:
        try:
            return self.questions[self._index[qid]]
        except KeyError:
            raise InputError(f"unknown question id {qid!r}") from None


@dataclass(frozen=True)
class KCModel:
    """Assignment of questions to knowledge-component labels (one or more each)."""

    name: str
    assignment: Mapping[str, frozenset[str]]

    def __post_init__(self) -> None:
        for qid, labels in self.assignment.items():
            if not labels:
                raise InputError(f"question {qid!r} has no KC labels")
            if any(not lab for lab in labels):
                raise InputError(f"question {qid!r} has an empty KC label")

    @property
    def labels(self) -> tuple[str, ...]:
        """Sorted distinct KC labels used by this model."""
        out: set[str] = set()
        for labs in self.assignment.values():
            out.update(labs)
        return tuple(sorted(out))


@dataclass(frozen=True)
class StudentStep:
    """One first-attempt response: student, question, chronological position, 0/1."""

    student_id: str
    question_id: str
    position: int
    correct: int

    def __post_init__(self) -> None:
        if not self.student_id:
            raise InputError("student_id must be non-empty")
        if not self.question_id:
            raise InputError("question_id must be non-empty")
        if self.position < 0:
            raise InputError(f"position must be nonnegative, got {self.position}")
        if self.correct not in (0, 1):
            raise InputError(f"correct must be 0 or 1, got {self.correct!r}")


@dataclass(frozen=True)
class StepLog:
    """Chronological response records plus per-student and per-question indices."""

    rows: tuple[StudentStep, ...]

    def __post_init__(self) -> None:
        student_index: dict[str, list[int]] = {}
        question_index: dict[str, list[int]] = {}
        last_pos: dict[str, int] = {}
        for i, row in enumerate(self.rows):
            prev = last_pos.get(row.student_id)
            if prev is not None and row.position <= prev:
                raise InputError(
                    f"positions for student {row.student_id!r} must strictly "
                    f"increase in file order ({prev} then {row.position})"
                )
            last_pos[row.student_id] = row.position
            student_index.setdefault(row.student_id, []).append(i)
            question_index.setdefault(row.question_id, []).append(i)
        object.__setattr__(
            self, "student_index", {k: tuple(v) for k, v in student_index.items()}
        )
        object.__setattr__(
            self, "question_index", {k: tuple(v) for k, v in question_index.items()}
        )

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def student_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.student_index))

    @property
    def question_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.question_index))


@dataclass(frozen=True)
class EvalReport:
    """Fitted-model quality metrics for one KC model."""

    model_name: str
    n_kcs: int
    n_params: int
    train_rmse: float
    cv_rmse: float
    fold_rmses: tuple[float, ...]
    log_likelihood: float
    aic: float
    bic: float

    def __post_init__(self) -> None:
        if self.n_kcs < 1 or self.n_params < 1:
            raise InputError("n_kcs and n_params must be positive")
        for label, value in (("train_rmse", self.train_rmse), ("cv_rmse", self.cv_rmse)):
            if not 0.0 <= value <= 1.0:
                raise InputError(f"{label} must lie in [0, 1], got {value}")


# ---------------------------------------------------------------------------
# Question bank file (YAML)
# ---------------------------------------------------------------------------


def load_question_bank(path: str | Path) -> QuestionBank:
    """Load a YAML question bank; ordering follows the file."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise InputError(f"cannot read question bank {path}: {e}") from e
    except yaml.YAMLError as e:
        raise InputError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(doc, dict) or "questions" not in doc:
        raise InputError(f"{path}: expected a top-level 'questions' list")
    raw = doc["questions"]
    if raw is None:
        raw = []
    if not isinstance(raw, list):
        raise InputError(f"{path}: 'questions' must be a list")

    questions = []
    for i, rec in enumerate(raw):
        where = f"{path}: questions[{i}]"
        if not isinstance(rec, dict):
            raise InputError(f"{where}: expected a mapping")
        for key in ("id", "stem"):
            if key not in rec:
                raise InputError(f"{where}: missing required field {key!r}")
        unknown = set(rec) - {"id", "stem", "options", "meta"}
        if unknown:
            raise InputError(f"{where}: unknown fields {sorted(unknown)}")
        qid, stem = rec["id"], rec["stem"]
        if not isinstance(qid, str) or not isinstance(stem, str):
            raise InputError(f"{where}: 'id' and 'stem' must be strings")
        options = rec.get("options") or []
        if not isinstance(options, list) or any(not isinstance(o, str) for o in options):
            raise InputError(f"{where}: 'options' must be a list of strings")
        meta = rec.get("meta") or {}
        if not isinstance(meta, dict) or any(
            not isinstance(k, str) or not isinstance(v, str) for k, v in meta.items()
        ):
            raise InputError(f"{where}: 'meta' must map strings to strings")
        try:
            questions.append(Question(qid, stem, tuple(options), dict(meta)))
        except InputError as e:
            raise InputError(f"{where}: {e}") from None
    try:
        return QuestionBank(tuple(questions))
    except InputError as e:
        raise InputError(f"{path}: {e}") from None


def save_question_bank(bank: QuestionBank, path: str | Path) -> None:
    records = []
    for q in bank:
        rec: dict = {"id": q.id, "stem": q.stem}
        if q.options:
            rec["options"] = list(q.options)
        if q.meta:
            rec["meta"] = dict(q.meta)
        records.append(rec)
    text = yaml.safe_dump({"questions": records}, sort_keys=False, allow_unicode=True)
    atomic_write_text(path, text)


# ---------------------------------------------------------------------------
# KC model file (CSV: question_id,kc_label)
# ---------------------------------------------------------------------------

_KC_HEADER = ["question_id", "kc_label"]


def load_kc_model(path: str | Path, bank: QuestionBank, name: str | None = None) -> KCModel:
    """Load a KC model CSV and check it covers the whole bank."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as e:
        raise InputError(f"cannot read KC model {path}: {e}") from e
    reader = csv.reader(io.StringIO(text, newline=""))
    rows = list(reader)
    if not rows or rows[0] != _KC_HEADER:
        raise InputError(f"{path}: expected header {','.join(_KC_HEADER)}")
    assignment: dict[str, set[str]] = {}
    for lineno, rec in enumerate(rows[1:], start=2):
        if len(rec) != 2:
            raise InputError(f"{path}:{lineno}: expected 2 fields, got {len(rec)}")
        qid, label = rec
        if qid not in bank:
            raise InputError(f"{path}:{lineno}: unknown question id {qid!r}")
        if not label:
            raise InputError(f"{path}:{lineno}: empty KC label for question {qid!r}")
        assignment.setdefault(qid, set()).add(label)
    missing = [qid for qid in bank.ids if qid not in assignment]
    if missing:
        raise InputError(f"{path}: questions without KC labels: {missing}")
    return KCModel(
        name=name if name is not None else path.stem,
        assignment={qid: frozenset(labs) for qid, labs in assignment.items()},
    )


def save_kc_model(model: KCModel, path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_KC_HEADER)
    for qid in sorted(model.assignment):
        for label in sorted(model.assignment[qid]):
            writer.writerow([qid, label])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Step log file (CSV: student_id,question_id,position,correct)
# ---------------------------------------------------------------------------

_STEP_HEADER = ["student_id", "question_id", "position", "correct"]


def load_step_log(path: str | Path) -> StepLog:
    """Load a student-step CSV; row order is preserved."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as e:
        raise InputError(f"cannot read step log {path}: {e}") from e
    reader = csv.reader(io.StringIO(text, newline=""))
    rows = list(reader)
    if not rows:
        raise InputError(f"{path}: missing header row")
    header = rows[0]
    unknown = [col for col in header if col not in _STEP_HEADER]
    if unknown:
        raise InputError(f"{path}: unknown columns {unknown}")
    if sorted(header) != sorted(_STEP_HEADER):
        raise InputError(f"{path}: expected columns {_STEP_HEADER}, got {header}")
    col = {name: header.index(name) for name in _STEP_HEADER}

    steps = []
    for lineno, rec in enumerate(rows[1:], start=2):
        if len(rec) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields")
        try:
            position = int(rec[col["position"]])
        except ValueError:
            raise InputError(
                f"{path}:{lineno}: position {rec[col['position']]!r} is not an integer"
            ) from None
        raw_correct = rec[col["correct"]]
        if raw_correct not in ("0", "1"):
            raise InputError(f"{path}:{lineno}: correct must be 0 or 1, got {raw_correct!r}")
        try:
            steps.append(
                StudentStep(
                    student_id=rec[col["student_id"]],
                    question_id=rec[col["question_id"]],
                    position=position,
                    correct=int(raw_correct),
                )
            )
        except InputError as e:
            raise InputError(f"{path}:{lineno}: {e}") from None
    try:
        return StepLog(tuple(steps))
    except InputError as e:
        raise InputError(f"{path}: {e}") from None


def save_step_log(log: StepLog, path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_STEP_HEADER)
    for row in log.rows:
        writer.writerow([row.student_id, row.question_id, row.position, row.correct])
    atomic_write_text(path, buf.getvalue())
