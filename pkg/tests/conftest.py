"""Shared test helpers: counting/context-blind scorers and tiny corpus builders."""

from __future__ import annotations

import pytest

from kcforge import BigramScorer, Question, QuestionBank, ScoreRequest, Scorer


class CountingScorer(Scorer):
    """Wraps a scorer and tallies unconditional vs conditional calls."""

    def __init__(self, inner: Scorer):
        self.inner = inner
        self.unconditional_calls = 0
        self.conditional_calls = 0

    @property
    def model_id(self) -> str:
        return self.inner.model_id

    @property
    def total_calls(self) -> int:
        return self.unconditional_calls + self.conditional_calls

    def score(self, req: ScoreRequest):
        if req.context == "":
            self.unconditional_calls += 1
        else:
            self.conditional_calls += 1
        return self.inner.score(req)


class ContextBlindScorer(Scorer):
    """Scores every request as if the context were empty; PMI must vanish."""

    def __init__(self, inner: Scorer):
        self.inner = inner

    @property
    def model_id(self) -> str:
        return "blind:" + self.inner.model_id

    def score(self, req: ScoreRequest):
        result = self.inner.score(ScoreRequest("", req.continuation))
        return type(result)(result.logprob, result.token_count, self.model_id)


def make_bank(n: int, prefix: str = "q") -> QuestionBank:
    """A bank of n distinct single-stem questions."""
    return QuestionBank(
        tuple(
            Question(f"{prefix}{i}", f"What does concept number {i} of {prefix} mean?")
            for i in range(n)
        )
    )


@pytest.fixture
def trained_mock() -> BigramScorer:
    return BigramScorer("the quick brown fox jumps over the lazy dog " * 3)
