"""Pairwise question congruity: symmetric, length-normalized PMI under a scorer.

The directed ingredient compares how likely a question's text is after
another question versus on its own. If seeing question i raises the
probability of question j, the two are congruent and plausibly exercise the
same knowledge component.
"""

from __future__ import annotations

import csv
import io
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Question, QuestionBank, canonical_text
from .errors import InputError, KCForgeError, ScoringError
from .fileio import atomic_write_text, fmt17
from .scoring import Scorer, ScoreRequest, ScoreResult

logger = logging.getLogger(__name__)

DEFAULT_SEP = "\n\n"


@dataclass(frozen=True)
class CongruityMatrix:
    """Symmetric off-diagonal congruity values in bank order (diagonal undefined)."""

    ids: tuple[str, ...]
    values: np.ndarray  # (n, n) float64, NaN on the diagonal
    scorer_model_id: str
    sep: str = DEFAULT_SEP

    def __post_init__(self) -> None:
        n = len(self.ids)
        if self.values.shape != (n, n):
            raise InputError(f"matrix shape {self.values.shape} does not match {n} ids")
        if n < 2:
            raise InputError("congruity needs at least 2 questions")
        if len(set(self.ids)) != n:
            raise InputError("duplicate ids in congruity matrix")
        if not self.scorer_model_id:
            raise InputError("scorer_model_id must be non-empty")
        for i in range(n):
            for j in range(i + 1, n):
                a, b = self.values[i, j], self.values[j, i]
                if not (a == b or (np.isnan(a) and np.isnan(b))):
                    raise InputError(
                        f"asymmetric congruity between {self.ids[i]!r} and {self.ids[j]!r}"
                    )

    def index(self, qid: str) -> int:
        try:
            return self.ids.index(qid)
        except ValueError:
            raise InputError(f"unknown question id {qid!r}") from None

    def value(self, id_i: str, id_j: str) -> float:
        i, j = self.index(id_i), self.index(id_j)
        if i == j:
            raise InputError("congruity is undefined on the diagonal")
        return float(self.values[i, j])


def _pmi(conditional_logprob: float, unconditional: ScoreResult) -> float:
    return (conditional_logprob - unconditional.logprob) / unconditional.token_count


def _score_unconditional(scorer: Scorer, q: Question, text: str) -> ScoreResult:
    try:
        result = scorer.score(ScoreRequest("", text))
    except ScoringError as e:
        raise type(e)(f"scoring question {q.id!r}: {e}") from e
    if result.token_count == 0:
        raise InputError(f"question {q.id!r} scored to zero tokens; cannot normalize")
    return result


def directed_pmi(qi: Question, qj: Question, scorer: Scorer, sep: str = DEFAULT_SEP) -> float:
    """Length-normalized log-probability lift of question j given question i.

    Positive values mean i raises the likelihood of j. The result is the
    conditional-minus-unconditional log probability of j's canonical text,
    divided by j's unconditional token count.
    """
    text_j = canonical_text(qj)
    unconditional = _score_unconditional(scorer, qj, text_j)
    conditional = _score_conditional(scorer, qi, qj, canonical_text(qi) + sep, text_j, unconditional)
    return _pmi(conditional, unconditional)


def _score_conditional(
    scorer: Scorer,
    qi: Question,
    qj: Question,
    context: str,
    text_j: str,
    unconditional: ScoreResult,
) -> float:
    try:
        result = scorer.score(ScoreRequest(context, text_j))
    except ScoringError as e:
        raise type(e)(f"scoring pair ({qi.id}, {qj.id}): {e}") from e
    except Exception as e:
        raise KCForgeError(f"scoring pair ({qi.id}, {qj.id}): {e}") from e
    if result.token_count != unconditional.token_count:
        logger.info(
            "token count mismatch for pair (%s, %s): conditional %d vs unconditional %d; "
            "normalizing by the unconditional count",
            qi.id, qj.id, result.token_count, unconditional.token_count,
        )
    return result.logprob


def congruity_matrix(
    bank: QuestionBank,
    scorer: Scorer,
    sep: str = DEFAULT_SEP,
    parallelism: int = 1,
) -> CongruityMatrix:
    """Assemble the symmetric congruity matrix over a question bank.

    Unconditional scores are issued once per question and reused, so a size-n
    bank costs exactly n unconditional plus n*(n-1) conditional scoring calls.
    Pairs may be scored concurrently; assembly is keyed by (i, j) and the
    result does not depend on completion order.
    """
    n = len(bank)
    if n < 2:
        raise InputError(f"congruity needs a bank of at least 2 questions, got {n}")
    questions = list(bank)
    texts = [canonical_text(q) for q in questions]
    unconditional = [
        _score_unconditional(scorer, q, text) for q, text in zip(questions, texts)
    ]

    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]

    def conditional(pair: tuple[int, int]) -> float:
        i, j = pair
        return _score_conditional(
            scorer, questions[i], questions[j], texts[i] + sep, texts[j], unconditional[j]
        )

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            cond_logprobs = list(pool.map(conditional, pairs))
    else:
        cond_logprobs = [conditional(p) for p in pairs]
    logprob_of = dict(zip(pairs, cond_logprobs))

    values = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i + 1, n):
            pmi_ij = _pmi(logprob_of[(i, j)], unconditional[j])
            pmi_ji = _pmi(logprob_of[(j, i)], unconditional[i])
            values[i, j] = values[j, i] = (pmi_ij + pmi_ji) / 2.0
    return CongruityMatrix(bank.ids, values, scorer.model_id, sep)


# ---------------------------------------------------------------------------
# Persistence (CSV with a leading metadata comment)
# ---------------------------------------------------------------------------

_META_RE = re.compile(r"^#\s*model_id=(\S+)\s+sep=(.*)$")


def save_congruity(matrix: CongruityMatrix, path: str | Path) -> None:
    if any(ch.isspace() for ch in matrix.scorer_model_id):
        raise InputError("scorer model_id may not contain whitespace")
    sep_escaped = matrix.sep.encode("unicode_escape").decode("ascii")
    buf = io.StringIO()
    buf.write(f"# model_id={matrix.scorer_model_id} sep={sep_escaped}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", *matrix.ids])
    n = len(matrix.ids)
    for i in range(n):
        cells = ["" if i == j else fmt17(matrix.values[i, j]) for j in range(n)]
        writer.writerow([matrix.ids[i], *cells])
    atomic_write_text(path, buf.getvalue())


def load_congruity(path: str | Path) -> CongruityMatrix:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read congruity matrix {path}: {e}") from e
    lines = text.splitlines()
    if not lines:
        raise InputError(f"{path}: empty file")
    meta = _META_RE.match(lines[0])
    if not meta:
        raise InputError(f"{path}: missing '# model_id=... sep=...' metadata line")
    model_id = meta.group(1)
    sep = meta.group(2).encode("ascii", errors="backslashreplace").decode("unicode_escape")

    reader = csv.reader(io.StringIO("\n".join(lines[1:]), newline=""))
    rows = list(reader)
    if not rows or rows[0][:1] != ["id"]:
        raise InputError(f"{path}: missing 'id,...' header row")
    ids = tuple(rows[0][1:])
    n = len(ids)
    if len(rows) != n + 1:
        raise InputError(f"{path}: expected {n} data rows, got {len(rows) - 1}")
    values = np.full((n, n), np.nan)
    for i, rec in enumerate(rows[1:]):
        lineno = i + 3  # metadata + header precede the data rows
        if len(rec) != n + 1:
            raise InputError(f"{path}:{lineno}: expected {n + 1} cells")
        if rec[0] != ids[i]:
            raise InputError(f"{path}:{lineno}: row id {rec[0]!r} does not match header order")
        for j, cell in enumerate(rec[1:]):
            if i == j:
                if cell != "":
                    raise InputError(f"{path}:{lineno}: diagonal cell must be empty")
                continue
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad value {cell!r}") from None
    return CongruityMatrix(ids, values, model_id, sep)
