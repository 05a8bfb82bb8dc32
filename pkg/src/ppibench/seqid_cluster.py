"""Pairwise sequence identity and greedy representative clustering.

Local alignment is Smith-Waterman with affine gaps (Gotoh recurrences). A gap
of length ``k`` costs ``gap_open + (k - 1) * gap_extend``, so equal open and
extend collapse to a linear penalty per gap column. Identity is the number of
identical (non-'X') columns divided by the alignment length, gap columns
included. An empty local alignment has identity 0.

Short local hits between unrelated sequences routinely exceed 30% identity,
so pairwise identity used for clustering and leakage checks is gated on
coverage: the aligned span must cover ``min_coverage`` of the shorter
sequence, otherwise the pair counts as identity 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numba
import numpy as np

from .blosum62 import BLOSUM62, encode

DEFAULT_THRESHOLD = 0.30

# traceback codes
_DIAG, _UP, _LEFT = 0, 1, 2


@dataclass(frozen=True)
class AlignParams:
    matrix: np.ndarray = field(default_factory=lambda: BLOSUM62)
    gap_open: int = 11
    gap_extend: int = 1
    min_coverage: float = 0.8

    def __post_init__(self):
        if self.gap_open < 0 or self.gap_extend < 0:
            raise ValueError("gap penalties must be non-negative")
        if not 0.0 <= self.min_coverage <= 1.0:
            raise ValueError("min_coverage must lie in [0, 1]")

    def __hash__(self):
        return hash((self.gap_open, self.gap_extend, self.min_coverage, self.matrix.tobytes()))

    def __eq__(self, other):
        return (
            isinstance(other, AlignParams)
            and self.gap_open == other.gap_open
            and self.gap_extend == other.gap_extend
            and self.min_coverage == other.min_coverage
            and np.array_equal(self.matrix, other.matrix)
        )


DEFAULT_PARAMS = AlignParams()


@dataclass(frozen=True)
class AlignmentResult:
    score: int
    matches: int
    alignment_length: int
    aligned_a: str = ""
    aligned_b: str = ""
    coverage: float = 0.0

    @property
    def identity(self) -> float:
        if self.alignment_length == 0:
            return 0.0
        return self.matches / self.alignment_length


@numba.njit(cache=True)
def _sw_kernel(a, b, sub, gap_open, gap_extend):
    n = a.shape[0]
    m = b.shape[0]
    neg = -(1 << 30)
    H = np.zeros((n + 1, m + 1), dtype=np.int64)
    E = np.full((n + 1, m + 1), neg, dtype=np.int64)  # gap in a (consumes b)
    F = np.full((n + 1, m + 1), neg, dtype=np.int64)  # gap in b (consumes a)
    best = 0
    bi = 0
    bj = 0
    for i in range(1, n + 1):
        ai = a[i - 1]
        for j in range(1, m + 1):
            e = max(H[i, j - 1] - gap_open, E[i, j - 1] - gap_extend)
            f = max(H[i - 1, j] - gap_open, F[i - 1, j] - gap_extend)
            E[i, j] = e
            F[i, j] = f
            h = H[i - 1, j - 1] + sub[ai, b[j - 1]]
            if e > h:
                h = e
            if f > h:
                h = f
            if h < 0:
                h = 0
            H[i, j] = h
            if h > best:
                best = h
                bi = i
                bj = j

    # traceback: ops are emitted end-to-start
    ops = np.empty(n + m, dtype=np.int64)
    k = 0
    i = bi
    j = bj
    state = 0
    while i > 0 and j > 0:
        if state == 0:
            h = H[i, j]
            if h == 0:
                break
            if h == H[i - 1, j - 1] + sub[a[i - 1], b[j - 1]]:
                ops[k] = 0
                k += 1
                i -= 1
                j -= 1
            elif h == F[i, j]:
                state = 1
            else:
                state = 2
        elif state == 1:
            ops[k] = 1
            k += 1
            if F[i, j] == H[i - 1, j] - gap_open:
                state = 0
            i -= 1
        else:
            ops[k] = 2
            k += 1
            if E[i, j] == H[i, j - 1] - gap_open:
                state = 0
            j -= 1
    return best, bi, bj, ops[:k][::-1].copy()


def _render(a: str, b: str, end_i: int, end_j: int, ops: np.ndarray):
    start_i = end_i - int(np.sum(ops != _LEFT))
    start_j = end_j - int(np.sum(ops != _UP))
    i, j = start_i, start_j
    out_a, out_b = [], []
    for op in ops:
        if op == _DIAG:
            out_a.append(a[i])
            out_b.append(b[j])
            i += 1
            j += 1
        elif op == _UP:
            out_a.append(a[i])
            out_b.append("-")
            i += 1
        else:
            out_a.append("-")
            out_b.append(b[j])
            j += 1
    return "".join(out_a), "".join(out_b)


def smith_waterman(a: str, b: str, params: AlignParams = DEFAULT_PARAMS) -> AlignmentResult:
    """Optimal local alignment of ``a`` and ``b`` with affine gaps.

    The pair is put in a canonical order before aligning, which makes the
    result (including traceback tie-breaks) symmetric in its arguments.
    """
    if not a or not b:
        raise ValueError("smith_waterman requires non-empty sequences")
    swapped = b < a
    x, y = (b, a) if swapped else (a, b)
    score, end_i, end_j, ops = _sw_kernel(
        encode(x), encode(y), params.matrix, params.gap_open, params.gap_extend
    )
    ax, ay = _render(x, y, end_i, end_j, ops)
    matches = sum(1 for p, q in zip(ax, ay) if p == q and p not in "-X")
    if len(x) <= len(y):
        coverage = (len(ax) - ax.count("-")) / len(x)
    else:
        coverage = (len(ay) - ay.count("-")) / len(y)
    if swapped:
        ax, ay = ay, ax
    return AlignmentResult(int(score), matches, len(ax), ax, ay, coverage)


@lru_cache(maxsize=1 << 18)
def _cached_identity(a: str, b: str, params: AlignParams) -> float:
    res = smith_waterman(a, b, params)
    if res.coverage < params.min_coverage:
        return 0.0
    return res.identity


def identity(a: str, b: str, params: AlignParams = DEFAULT_PARAMS) -> float:
    """Coverage-gated identity used by clustering and leakage checks."""
    if b < a:
        a, b = b, a
    return _cached_identity(a, b, params)


def kmers(seq: str, k: int) -> set[str]:
    return {seq[i : i + k] for i in range(len(seq) - k + 1)}


def kmer_prefilter(a: str, b: str, k: int = 5, min_shared: int = 1) -> bool:
    """True iff ``a`` and ``b`` share at least ``min_shared`` distinct k-mers."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return len(kmers(a, k) & kmers(b, k)) >= min_shared


def any_above(
    query: str,
    targets: Sequence[str],
    threshold: float,
    *,
    strict: bool = True,
    params: AlignParams = DEFAULT_PARAMS,
    exact: bool = False,
    k: int = 5,
):
    """Return the index of some target whose identity to ``query`` passes.

    ``strict`` selects ``>`` rather than ``>=``. Unless ``exact``, targets that
    share a k-mer with the query are tried first; every target is still
    checked before None is returned, so the answer never depends on the filter.
    """
    order: Iterable[int] = range(len(targets))
    if not exact:
        q = kmers(query, k)
        hits = [i for i, t in enumerate(targets) if q & kmers(t, k)]
        hit_set = set(hits)
        order = hits + [i for i in range(len(targets)) if i not in hit_set]
    for i in order:
        ident = identity(query, targets[i], params)
        if ident > threshold or (not strict and ident >= threshold):
            return i
    return None


@dataclass
class Cluster:
    representative: int
    members: list[int]


def greedy_cluster(
    seqs: Sequence[str],
    threshold: float = DEFAULT_THRESHOLD,
    params: AlignParams = DEFAULT_PARAMS,
) -> list[Cluster]:
    """Greedy representative clustering in (length desc, sequence asc) order.

    Each sequence joins the first cluster, in creation order, whose
    representative has identity >= ``threshold`` with it, otherwise it founds
    a new cluster.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    order = sorted(range(len(seqs)), key=lambda i: (-len(seqs[i]), seqs[i], i))
    clusters: list[Cluster] = []
    for idx in order:
        for cl in clusters:
            if identity(seqs[cl.representative], seqs[idx], params) >= threshold:
                cl.members.append(idx)
                break
        else:
            clusters.append(Cluster(idx, [idx]))
    return clusters
