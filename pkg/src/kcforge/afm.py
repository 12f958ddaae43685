"""Additive Factors Model: Q-matrix, opportunity counts, fitting, evaluation.

First-attempt correctness is modeled as sigma(theta_i + sum_k q_jk * (beta_k
+ gamma_k * t_ik)) with student proficiency theta, KC easiness beta, and a
nonnegative per-KC learning rate gamma applied to the opportunity count t.
Fitting minimizes the negative log likelihood with an L2 penalty on theta,
using deterministic full-batch projected gradient descent so identical
inputs always reproduce identical parameters.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import EvalReport, KCModel, QuestionBank, StepLog
from .errors import InputError
from .fileio import atomic_write_text, fmt17

_CLAMP = 1e-12  # probabilities move this far from {0,1} before taking logs


@dataclass(frozen=True)
class QMatrix:
    """Binary question-by-KC incidence; columns are the sorted distinct labels."""

    question_ids: tuple[str, ...]
    kc_labels: tuple[str, ...]
    values: np.ndarray  # (n_questions, n_kcs) int8

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.question_ids), len(self.kc_labels)):
            raise InputError("Q-matrix shape does not match ids/labels")
        if not np.all((self.values == 0) | (self.values == 1)):
            raise InputError("Q-matrix entries must be 0/1")
        if np.any(self.values.sum(axis=1) == 0):
            bad = self.question_ids[int(np.argmin(self.values.sum(axis=1)))]
            raise InputError(f"question {bad!r} has no KCs in the Q-matrix")
        object.__setattr__(
            self, "_row_of", {qid: i for i, qid in enumerate(self.question_ids)}
        )

    def kcs_of(self, question_id: str) -> np.ndarray:
        """KC column indices for a question."""
        try:
            row = self._row_of[question_id]
        except KeyError:
            raise InputError(f"question {question_id!r} not in Q-matrix") from None
        return np.flatnonzero(self.values[row])


def build_q_matrix(model: KCModel, bank: QuestionBank) -> QMatrix:
    """Q-matrix over the bank's questions (rows in bank order)."""
    extra = sorted(set(model.assignment) - set(bank.ids))
    if extra:
        raise InputError(f"KC model {model.name!r} labels unknown questions: {extra}")
    uncovered = [qid for qid in bank.ids if qid not in model.assignment]
    if uncovered:
        raise InputError(f"KC model {model.name!r} does not cover questions: {uncovered}")
    labels = model.labels
    col = {lab: i for i, lab in enumerate(labels)}
    values = np.zeros((len(bank), len(labels)), dtype=np.int8)
    for r, qid in enumerate(bank.ids):
        for lab in model.assignment[qid]:
            values[r, col[lab]] = 1
    return QMatrix(bank.ids, labels, values)


@dataclass(frozen=True)
class OpportunityTable:
    """Prior-practice counts per (row, KC) incidence of the step log.

    For each log row and each KC of its question, `t` is the number of the
    same student's earlier rows whose question shares that KC. Counts come
    from the full chronological log and never depend on train/test splits.
    """

    kc_labels: tuple[str, ...]
    n_rows: int
    row_idx: np.ndarray  # incidence -> log row index
    kc_idx: np.ndarray  # incidence -> KC column index
    t: np.ndarray  # incidence -> opportunity count (float64)

    def counts_for(self, row: int) -> dict[str, int]:
        """KC label -> opportunity count for one log row."""
        sel = self.row_idx == row
        return {
            self.kc_labels[k]: int(c) for k, c in zip(self.kc_idx[sel], self.t[sel])
        }


def opportunities(log: StepLog, q: QMatrix) -> OpportunityTable:
    """Count prior same-KC practice for every row of the log."""
    kcs_cache: dict[str, np.ndarray] = {}
    seen: dict[str, np.ndarray] = {}
    rows: list[int] = []
    kcs: list[np.ndarray] = []
    ts: list[np.ndarray] = []
    n_kcs = len(q.kc_labels)
    for i, step in enumerate(log.rows):
        kc_of_q = kcs_cache.get(step.question_id)
        if kc_of_q is None:
            kc_of_q = q.kcs_of(step.question_id)
            kcs_cache[step.question_id] = kc_of_q
        counter = seen.get(step.student_id)
        if counter is None:
            counter = np.zeros(n_kcs, dtype=np.int64)
            seen[step.student_id] = counter
        rows.append(i)
        kcs.append(kc_of_q)
        ts.append(counter[kc_of_q].copy())
        counter[kc_of_q] += 1
    lengths = np.array([len(a) for a in kcs], dtype=np.int64)
    return OpportunityTable(
        kc_labels=q.kc_labels,
        n_rows=len(log.rows),
        row_idx=np.repeat(np.array(rows, dtype=np.int64), lengths),
        kc_idx=np.concatenate(kcs) if kcs else np.zeros(0, dtype=np.int64),
        t=(np.concatenate(ts) if ts else np.zeros(0)).astype(np.float64),
    )


@dataclass(frozen=True)
class AFMData:
    """Assembled design for fitting: rows, labels, and flattened KC incidences.

    The student and KC index spaces always cover the full log, even when
    `subset` narrows the rows; entities absent from a subset simply receive
    no gradient and stay at their zero initialization.
    """

    student_ids: tuple[str, ...]
    kc_labels: tuple[str, ...]
    student_idx: np.ndarray  # (n_rows,)
    y: np.ndarray  # (n_rows,) float64 in {0,1}
    row_idx: np.ndarray  # incidence -> row
    kc_idx: np.ndarray  # incidence -> KC
    t: np.ndarray  # incidence -> opportunity count

    @property
    def n_rows(self) -> int:
        return len(self.y)

    def subset(self, mask: np.ndarray) -> "AFMData":
        """Restrict to rows where mask is True, keeping the parameter spaces."""
        sel = np.flatnonzero(mask)
        row_map = np.full(self.n_rows, -1, dtype=np.int64)
        row_map[sel] = np.arange(len(sel))
        keep = mask[self.row_idx]
        return AFMData(
            student_ids=self.student_ids,
            kc_labels=self.kc_labels,
            student_idx=self.student_idx[sel],
            y=self.y[sel],
            row_idx=row_map[self.row_idx[keep]],
            kc_idx=self.kc_idx[keep],
            t=self.t[keep],
        )


def assemble(log: StepLog, q: QMatrix, opp: OpportunityTable) -> AFMData:
    """Bundle a step log, Q-matrix, and opportunity table for fitting."""
    if opp.n_rows != len(log.rows):
        raise InputError("opportunity table does not match the log")
    students = tuple(sorted(log.student_index))
    s_of = {sid: i for i, sid in enumerate(students)}
    return AFMData(
        student_ids=students,
        kc_labels=q.kc_labels,
        student_idx=np.array([s_of[r.student_id] for r in log.rows], dtype=np.int64),
        y=np.array([r.correct for r in log.rows], dtype=np.float64),
        row_idx=opp.row_idx,
        kc_idx=opp.kc_idx,
        t=opp.t,
    )


@dataclass(frozen=True)
class AFMParams:
    """Fitted parameters: per-student theta, per-KC beta and gamma (gamma >= 0)."""

    student_ids: tuple[str, ...]
    kc_labels: tuple[str, ...]
    theta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    converged: bool = True
    objective_history: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if np.any(self.gamma < 0):
            raise InputError("gamma must be nonnegative")
        object.__setattr__(self, "_s_of", {s: i for i, s in enumerate(self.student_ids)})
        object.__setattr__(self, "_k_of", {k: i for i, k in enumerate(self.kc_labels)})


@dataclass(frozen=True)
class AFMGradient:
    theta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings; `seed` only affects cross-validation fold dealing."""

    lambda_theta: float = 0.1
    max_iter: int = 500
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda_theta < 0:
            raise InputError("lambda_theta must be nonnegative")
        if self.max_iter < 1 or self.tol <= 0:
            raise InputError("max_iter must be >= 1 and tol > 0")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0, e) / (1.0 + e)


def _forward(w: np.ndarray, data: AFMData) -> np.ndarray:
    ns, nk = len(data.student_ids), len(data.kc_labels)
    theta, beta, gamma = w[:ns], w[ns : ns + nk], w[ns + nk :]
    z = theta[data.student_idx].astype(np.float64, copy=True)
    if len(data.row_idx):
        vals = beta[data.kc_idx] + gamma[data.kc_idx] * data.t
        z += np.bincount(data.row_idx, weights=vals, minlength=data.n_rows)
    return _sigmoid(z)


def _value_from(p: np.ndarray, w: np.ndarray, data: AFMData, lam: float) -> float:
    theta = w[: len(data.student_ids)]
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    chosen = np.where(data.y == 1.0, pc, 1.0 - pc)
    f = -float(np.sum(np.log(chosen)))
    return f + 0.5 * lam * float(theta @ theta)


def _grad_from(p: np.ndarray, w: np.ndarray, data: AFMData, lam: float) -> np.ndarray:
    ns, nk = len(data.student_ids), len(data.kc_labels)
    resid = p - data.y
    g = np.zeros_like(w)
    g[:ns] = np.bincount(data.student_idx, weights=resid, minlength=ns) + lam * w[:ns]
    if len(data.row_idx):
        rflat = resid[data.row_idx]
        g[ns : ns + nk] = np.bincount(data.kc_idx, weights=rflat, minlength=nk)
        g[ns + nk :] = np.bincount(data.kc_idx, weights=rflat * data.t, minlength=nk)
    return g


def _objective(w: np.ndarray, data: AFMData, lam: float, want_grad: bool):
    p = _forward(w, data)
    f = _value_from(p, w, data, lam)
    if not want_grad:
        return f, None
    return f, _grad_from(p, w, data, lam)


def _pack(params: AFMParams) -> np.ndarray:
    return np.concatenate([params.theta, params.beta, params.gamma])


def nll_and_gradient(
    params: AFMParams, data: AFMData, lambda_theta: float
) -> tuple[float, AFMGradient]:
    """Penalized negative log likelihood and its analytic gradient."""
    if params.student_ids != data.student_ids or params.kc_labels != data.kc_labels:
        raise InputError("parameter and data index spaces differ")
    f, g = _objective(_pack(params), data, lambda_theta, want_grad=True)
    ns, nk = len(data.student_ids), len(data.kc_labels)
    assert g is not None
    return f, AFMGradient(theta=g[:ns], beta=g[ns : ns + nk], gamma=g[ns + nk :])


def _project(w: np.ndarray, ns: int, nk: int) -> np.ndarray:
    out = w.copy()
    np.maximum(out[ns + nk :], 0.0, out=out[ns + nk :])
    return out


def _fit_assembled(data: AFMData, cfg: FitConfig) -> AFMParams:
    ns, nk = len(data.student_ids), len(data.kc_labels)
    lam = cfg.lambda_theta
    w = np.zeros(ns + 2 * nk)
    p = _forward(w, data)
    f = _value_from(p, w, data, lam)
    g = _grad_from(p, w, data, lam)
    history = [f]
    prev_w: np.ndarray | None = None
    prev_g: np.ndarray | None = None
    last_step = 1.0
    converged = False

    for _ in range(cfg.max_iter):
        # Barzilai-Borwein proposal for the step, validated by backtracking
        if prev_w is not None:
            s = w - prev_w
            yv = g - prev_g
            sy = float(s @ yv)
            proposal = float(s @ s) / sy if sy > 0 else last_step * 2.0
        else:
            proposal = last_step
        trial = min(max(proposal, 1e-12), 1e6)

        accepted = False
        w_new = p_new = None
        f_new = f
        for _ in range(60):
            w_new = _project(w - trial * g, ns, nk)
            delta = w_new - w
            if not delta.any():
                break  # projected step is zero at this scale: stationary
            descent = float(g @ delta)
            p_new = _forward(w_new, data)
            f_new = _value_from(p_new, w_new, data, lam)
            if f_new <= f + 1e-4 * descent:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            converged = True  # no decrease found at any step size
            break

        prev_w, prev_g = w, g
        last_step = trial
        rel_drop = (f - f_new) / max(1.0, abs(f))
        w, f, p = w_new, f_new, p_new
        g = _grad_from(p, w, data, lam)
        history.append(f)
        if rel_drop <= cfg.tol:
            converged = True
            break

    return AFMParams(
        student_ids=data.student_ids,
        kc_labels=data.kc_labels,
        theta=w[:ns],
        beta=w[ns : ns + nk],
        gamma=w[ns + nk :],
        converged=converged,
        objective_history=tuple(history),
    )


def fit(log: StepLog, q: QMatrix, opp: OpportunityTable, cfg: FitConfig = FitConfig()) -> AFMParams:
    """Fit AFM parameters to a step log by penalized maximum likelihood.

    Starts from all zeros and runs projected gradient descent (gamma clipped
    to stay nonnegative) with a backtracking line search, so the objective
    never increases across accepted iterations and reruns are bitwise
    reproducible. Non-convergence within max_iter clears `converged`.
    """
    if not log.rows:
        raise InputError("cannot fit an empty step log")
    return _fit_assembled(assemble(log, q, opp), cfg)


def predict(
    params: AFMParams, student_id: str, kc_opportunities: Mapping[str, float]
) -> float:
    """Predicted probability of a correct first attempt.

    `kc_opportunities` maps the question's KC labels to prior-practice
    counts. Unknown students contribute theta = 0 and unknown KCs beta =
    gamma = 0, so held-out entities still get a defined prediction.
    """
    s = params._s_of.get(student_id)
    z = 0.0 if s is None else float(params.theta[s])
    for label, t in kc_opportunities.items():
        if t < 0:
            raise InputError(f"opportunity count for {label!r} must be nonnegative")
        k = params._k_of.get(label)
        if k is not None:
            z += float(params.beta[k]) + float(params.gamma[k]) * t
    return float(_sigmoid(np.array([z]))[0])


def rmse(predictions: Sequence[float], labels: Sequence[int]) -> float:
    """Root mean square error of probabilistic predictions against 0/1 labels."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1 or len(p) == 0:
        raise InputError("predictions and labels must be equal-length, non-empty vectors")
    if np.any((p < 0) | (p > 1)):
        raise InputError("predictions must lie in [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be binary")
    return float(np.sqrt(np.mean((y - p) ** 2)))


def fold_assignment(log: StepLog, folds: int, seed: int) -> np.ndarray:
    """Deterministic fold index per row, stratified per student.

    Students are visited in sorted id order; each student's rows are
    shuffled with the seeded generator and dealt round-robin onto a global
    fold counter, so every student spreads as evenly as possible across
    folds and every fold is non-empty whenever rows >= folds.
    """
    if folds < 2:
        raise InputError(f"folds must be >= 2, got {folds}")
    if len(log.rows) < folds:
        raise InputError(f"log has {len(log.rows)} rows, fewer than {folds} folds")
    rng = np.random.default_rng(seed)
    assign = np.empty(len(log.rows), dtype=np.int64)
    counter = 0
    for sid in sorted(log.student_index):
        idxs = log.student_index[sid]
        for pos in rng.permutation(len(idxs)):
            assign[idxs[pos]] = counter % folds
            counter += 1
    return assign


def _log_likelihood(p: np.ndarray, y: np.ndarray) -> float:
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    return float(np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))


def cross_validate(
    log: StepLog,
    kc_model: KCModel,
    bank: QuestionBank,
    folds: int = 10,
    cfg: FitConfig = FitConfig(),
) -> EvalReport:
    """Stratified k-fold evaluation of one KC model.

    Opportunities are computed once from the full log. Each fold fits on the
    complement and predicts the held-out rows; cv_rmse pools all held-out
    predictions (it is not the mean of the per-fold RMSEs, which are also
    reported). Train RMSE, log likelihood, AIC, and BIC come from a fit on
    the full log with p = #students + 2 * #KCs parameters.
    """
    q = build_q_matrix(kc_model, bank)
    opp = opportunities(log, q)
    data = assemble(log, q, opp)
    assign = fold_assignment(log, folds, cfg.seed)

    pooled = np.empty(data.n_rows)
    fold_rmses = []
    for f in range(folds):
        test = assign == f
        params = _fit_assembled(data.subset(~test), cfg)
        p_test = _forward(_pack(params), data)[test]
        pooled[test] = p_test
        fold_rmses.append(rmse(p_test, data.y[test]))

    full = _fit_assembled(data, cfg)
    p_train = _forward(_pack(full), data)
    ll = _log_likelihood(p_train, data.y)
    n_params = len(data.student_ids) + 2 * len(data.kc_labels)
    n = data.n_rows
    return EvalReport(
        model_name=kc_model.name,
        n_kcs=len(data.kc_labels),
        n_params=n_params,
        train_rmse=rmse(p_train, data.y),
        cv_rmse=rmse(pooled, data.y),
        fold_rmses=tuple(fold_rmses),
        log_likelihood=ll,
        aic=2 * n_params - 2 * ll,
        bic=n_params * math.log(n) - 2 * ll,
    )


def compare(
    models: Sequence[KCModel],
    log: StepLog,
    bank: QuestionBank,
    folds: int = 10,
    cfg: FitConfig = FitConfig(),
) -> list[EvalReport]:
    """Cross-validate several KC models with identical folds; best cv_rmse first.

    The fold assignment depends only on (log, folds, seed), so every model is
    scored on exactly the same splits and the comparison is paired. Sorting
    is stable: models with equal cv_rmse keep their input order.
    """
    if not models:
        raise InputError("compare needs at least one KC model")
    reports = [cross_validate(log, m, bank, folds, cfg) for m in models]
    return sorted(reports, key=lambda r: r.cv_rmse)


def save_reports(reports: Sequence[EvalReport], path: str | Path) -> None:
    """Write evaluation reports as CSV with one fold_rmse_<i> column per fold."""
    if not reports:
        raise InputError("no reports to save")
    n_folds = len(reports[0].fold_rmses)
    if any(len(r.fold_rmses) != n_folds for r in reports):
        raise InputError("reports have inconsistent fold counts")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["model", "n_kcs", "n_params", "train_rmse", "cv_rmse", "log_likelihood", "aic", "bic"]
        + [f"fold_rmse_{i + 1}" for i in range(n_folds)]
    )
    for r in reports:
        writer.writerow(
            [r.model_name, r.n_kcs, r.n_params, fmt17(r.train_rmse), fmt17(r.cv_rmse),
             fmt17(r.log_likelihood), fmt17(r.aic), fmt17(r.bic)]
            + [fmt17(x) for x in r.fold_rmses]
        )
    atomic_write_text(path, buf.getvalue())
