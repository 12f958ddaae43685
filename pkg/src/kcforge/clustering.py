"""Deterministic average-linkage clustering of questions plus K selection.

Congruity becomes a distance by subtracting from the maximum off-diagonal
value; UPGMA then builds a dendrogram with fully documented tie-breaking so
identical inputs always produce identical merge sequences. Cutting the tree
and naming each cluster after its medoid yields a KC model.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .congruity import CongruityMatrix
from .corpus import KCModel, QuestionBank
from .errors import InputError
from .fileio import atomic_write_text, fmt17


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric nonnegative distances with a zero diagonal, in bank order."""

    ids: tuple[str, ...]
    values: np.ndarray  # (n, n) float64

    def __post_init__(self) -> None:
        n = len(self.ids)
        if self.values.shape != (n, n):
            raise InputError(f"distance shape {self.values.shape} does not match {n} ids")
        if not np.all(np.isfinite(self.values)):
            raise InputError("distances must be finite")
        if np.any(self.values < 0):
            raise InputError("distances must be nonnegative")
        if np.any(np.diagonal(self.values) != 0.0):
            raise InputError("distance diagonal must be zero")
        if not np.array_equal(self.values, self.values.T):
            raise InputError("distance matrix must be symmetric")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Merge:
    """One agglomeration step: clusters `a` and `b` joined at `height` into `new_id`."""

    a: int
    b: int
    height: float
    new_id: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge history over leaves 0..n-1 (leaf i is question leaf_ids[i])."""

    leaf_ids: tuple[str, ...]
    merges: tuple[Merge, ...]

    def __post_init__(self) -> None:
        n = len(self.leaf_ids)
        if len(self.merges) != max(n - 1, 0):
            raise InputError(f"dendrogram needs {n - 1} merges for {n} leaves")

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids)


@dataclass(frozen=True)
class Partition:
    """Assignment of every question to one of k clusters indexed 0..k-1."""

    k: int
    label_of: dict[str, int]

    def __post_init__(self) -> None:
        if self.k < 1:
            raise InputError("partition needs k >= 1")
        used = set(self.label_of.values())
        if used != set(range(self.k)):
            raise InputError(f"cluster indices must cover 0..{self.k - 1}")

    def clusters(self) -> list[list[str]]:
        """Members per cluster index, each list sorted by question id."""
        out: list[list[str]] = [[] for _ in range(self.k)]
        for qid in sorted(self.label_of):
            out[self.label_of[qid]].append(qid)
        return out


def to_distance(matrix: CongruityMatrix) -> DistanceMatrix:
    """Distance = (max off-diagonal congruity) - congruity, with a zero diagonal."""
    n = len(matrix.ids)
    off = ~np.eye(n, dtype=bool)
    bad = off & ~np.isfinite(matrix.values)
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        raise InputError(
            f"non-finite congruity between {matrix.ids[i]!r} and {matrix.ids[j]!r}"
        )
    c_max = float(matrix.values[off].max())
    values = c_max - matrix.values
    values[~off] = 0.0
    return DistanceMatrix(matrix.ids, values)


def agglomerate(dist: DistanceMatrix) -> Dendrogram:
    """Average-linkage (UPGMA) agglomeration with deterministic tie-breaking.

    Each step merges the active pair at minimal average inter-cluster
    distance. Exact ties are broken by the lexicographically smallest
    (min member id, max member id) over the united pair, then by the full
    sorted member union. Recorded heights are clamped to be nondecreasing;
    average-linkage reducibility makes any clamp at most a rounding artifact.
    """
    n = len(dist)
    work = dist.values.astype(np.float64).copy()
    np.fill_diagonal(work, np.inf)
    members: list[tuple[str, ...] | None] = [(qid,) for qid in dist.ids]
    sizes = np.ones(n)
    cluster_id = list(range(n))
    merges: list[Merge] = []
    last_height = -np.inf

    for step in range(n - 1):
        dmin = work.min()
        cand = np.argwhere(work == dmin)
        best_key = None
        best_pair = (-1, -1)
        for si, sj in cand:
            if si >= sj:
                continue
            mi, mj = members[si], members[sj]
            assert mi is not None and mj is not None
            union = tuple(sorted(mi + mj))
            key = (min(mi[0], mj[0]), max(mi[-1], mj[-1]), union)
            if best_key is None or key < best_key:
                best_key = key
                best_pair = (int(si), int(sj))
        si, sj = best_pair

        height = float(max(dmin, last_height))
        last_height = height
        new_id = n + step
        a, b = cluster_id[si], cluster_id[sj]
        merges.append(Merge(min(a, b), max(a, b), height, new_id))

        merged_row = (sizes[si] * work[si] + sizes[sj] * work[sj]) / (sizes[si] + sizes[sj])
        work[si, :] = merged_row
        work[:, si] = merged_row
        work[si, si] = np.inf
        work[sj, :] = np.inf
        work[:, sj] = np.inf
        mi, mj = members[si], members[sj]
        members[si] = tuple(sorted(mi + mj))  # type: ignore[operator]
        members[sj] = None
        sizes[si] += sizes[sj]
        cluster_id[si] = new_id

    return Dendrogram(dist.ids, tuple(merges))


def cut(dend: Dendrogram, k: int) -> Partition:
    """Partition into k clusters by undoing the last k-1 merges."""
    n = dend.n_leaves
    if not 1 <= k <= n:
        raise InputError(f"k must be in [1, {n}], got {k}")
    parent = list(range(2 * n - 1))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for merge in dend.merges[: n - k]:
        parent[find(merge.a)] = merge.new_id
        parent[find(merge.b)] = merge.new_id

    groups: dict[int, list[str]] = {}
    for leaf, qid in enumerate(dend.leaf_ids):
        groups.setdefault(find(leaf), []).append(qid)
    ordered = sorted(groups.values(), key=lambda g: min(g))
    label_of = {qid: idx for idx, group in enumerate(ordered) for qid in group}
    return Partition(k, label_of)


def _cluster_index_arrays(dist: DistanceMatrix, part: Partition) -> list[np.ndarray]:
    pos = {qid: i for i, qid in enumerate(dist.ids)}
    missing = set(dist.ids) ^ set(part.label_of)
    if missing:
        raise InputError(f"partition and distance ids differ: {sorted(missing)}")
    return [np.array([pos[qid] for qid in group]) for group in part.clusters()]


def silhouette_samples(dist: DistanceMatrix, part: Partition) -> np.ndarray:
    """Per-question silhouette values against precomputed distances.

    Uses the usual convention that a question alone in its cluster scores 0;
    when both the intra and inter means are 0 the score is also 0.
    """
    n = len(dist)
    if not 2 <= part.k <= n - 1:
        raise InputError(f"silhouette needs 2 <= k <= {n - 1}, got k={part.k}")
    groups = _cluster_index_arrays(dist, part)
    sums = np.stack([dist.values[:, g].sum(axis=1) for g in groups], axis=1)
    sizes = np.array([len(g) for g in groups])
    own = np.empty(n, dtype=int)
    for c, g in enumerate(groups):
        own[g] = c

    scores = np.zeros(n)
    for i in range(n):
        c = own[i]
        if sizes[c] == 1:
            continue
        a = sums[i, c] / (sizes[c] - 1)
        other = [sums[i, d] / sizes[d] for d in range(part.k) if d != c]
        b = min(other)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return scores


def silhouette(dist: DistanceMatrix, part: Partition) -> float:
    """Mean silhouette value over all questions."""
    return float(silhouette_samples(dist, part).mean())


def select_k(dist: DistanceMatrix, k_min: int, k_max: int) -> int:
    """Silhouette-maximizing cluster count over [k_min, k_max]; ties pick the smallest."""
    n = len(dist)
    if not 2 <= k_min <= k_max <= n - 1:
        raise InputError(
            f"k range must satisfy 2 <= k_min <= k_max <= n-1 (n={n}), got [{k_min}, {k_max}]"
        )
    dend = agglomerate(dist)
    best_k, best_score = None, None
    for k in range(k_min, k_max + 1):
        score = silhouette(dist, cut(dend, k))
        if best_score is None or score > best_score:
            best_k, best_score = k, score
    assert best_k is not None
    return best_k


def to_kc_model(
    part: Partition,
    bank: QuestionBank,
    dist: DistanceMatrix,
    name: str | None = None,
) -> KCModel:
    """Label every cluster "kc_<medoid id>" and assign each question its cluster label.

    The medoid is the member with the smallest total distance to its own
    cluster; ties go to the smallest question id.
    """
    if set(part.label_of) != set(bank.ids):
        missing = sorted(set(bank.ids) ^ set(part.label_of))
        raise InputError(f"partition does not cover the bank: {missing}")
    groups = _cluster_index_arrays(dist, part)
    pos_to_id = dist.ids
    assignment: dict[str, frozenset[str]] = {}
    for g in groups:
        totals = dist.values[np.ix_(g, g)].sum(axis=1)
        candidates = sorted(
            (float(totals[i]), pos_to_id[g[i]]) for i in range(len(g))
        )
        medoid = candidates[0][1]
        label = frozenset({f"kc_{medoid}"})
        for i in g:
            assignment[pos_to_id[i]] = label
    return KCModel(name=name if name is not None else f"upgma_k{part.k}", assignment=assignment)


def save_dendrogram(dend: Dendrogram, path: str | Path) -> None:
    """One merge per line: `a b height new_id`."""
    buf = io.StringIO()
    for m in dend.merges:
        buf.write(f"{m.a} {m.b} {fmt17(m.height)} {m.new_id}\n")
    atomic_write_text(path, buf.getvalue())
