"""Leakage-controlled train/val/test assignment.

Stage one assigns whole sequence clusters to train, largest first, until the
target fraction is reached. Stage two repeatedly pulls into train every
held-out entry with identity above the threshold to some train entry. The
held-out remainder is then re-clustered and balanced between val and test.
Entries sharing a PDB id always share a split.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .curation import CuratedEntry
from .seqid_cluster import AlignParams, Cluster, greedy_cluster, identity, kmers

TRAIN, VAL, TEST, POOL = "train", "val", "test", "pool"


@dataclass
class SplitConfig:
    identity_threshold: float = 0.30
    train_target_fraction: float = 0.75
    seed: int = 0
    min_coverage: float = 0.8
    exact: bool = False

    def __post_init__(self):
        if not 0 < self.train_target_fraction < 1:
            raise ValueError("train_target_fraction must lie in (0, 1)")

    @property
    def align_params(self) -> AlignParams:
        return AlignParams(min_coverage=self.min_coverage)


@dataclass
class SplitAssignment:
    assignment: dict[str, str]
    purge_moves: int = 0
    n_clusters: int = 0

    @property
    def stats(self) -> dict[str, float]:
        """Fraction of entries per split; ``pool`` appears only while unassigned entries remain."""
        counts = Counter(self.assignment.values())
        total = len(self.assignment) or 1
        keys = [TRAIN, VAL, TEST] + ([POOL] if counts[POOL] else [])
        return {k: counts[k] / total for k in keys}

    def ids(self, split: str) -> list[str]:
        return sorted(e for e, s in self.assignment.items() if s == split)

    def to_json(self) -> str:
        return json.dumps(
            {"assignment": self.assignment, "stats": self.stats,
             "purge_moves": self.purge_moves, "n_clusters": self.n_clusters},
            indent=1, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> SplitAssignment:
        d = json.loads(text)
        return cls(d["assignment"], d.get("purge_moves", 0), d.get("n_clusters", 0))


def entry_representative_sequence(e: CuratedEntry) -> str:
    return "".join(e.ligand_seqs) + "".join(e.receptor_seqs)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def coherency_components(entries: Sequence[CuratedEntry], clusters: Sequence[Cluster]) -> list[list[int]]:
    """Merge clusters linked by shared PDB ids; ordered by (size desc, smallest entry_id)."""
    uf = _UnionFind(len(entries))
    for cl in clusters:
        for m in cl.members:
            uf.union(cl.representative, m)
    first_by_pdb: dict[str, int] = {}
    for i, e in enumerate(entries):
        uf.union(first_by_pdb.setdefault(e.pdb_id, i), i)
    comps: dict[int, list[int]] = {}
    for i in range(len(entries)):
        comps.setdefault(uf.find(i), []).append(i)
    return sorted(
        comps.values(), key=lambda c: (-len(c), min(entries[i].entry_id for i in c))
    )


def initial_split(entries: Sequence[CuratedEntry], clusters: Sequence[Cluster], cfg: SplitConfig) -> SplitAssignment:
    assignment = {e.entry_id: POOL for e in entries}
    n_train = 0
    for comp in coherency_components(entries, clusters):
        if n_train / len(entries) >= cfg.train_target_fraction:
            break
        for i in comp:
            assignment[entries[i].entry_id] = TRAIN
        n_train += len(comp)
    return SplitAssignment(assignment, n_clusters=len(clusters))


def leakage_purge(assignment: SplitAssignment, entries: Sequence[CuratedEntry], cfg: SplitConfig) -> SplitAssignment:
    """Move held-out entries above the identity threshold (strict) into train.

    Each held-out entry is compared only against train sequences added since
    its previous check, so every pair is aligned at most once.
    """
    params = cfg.align_params
    split = dict(assignment.assignment)
    by_pdb: dict[str, list[CuratedEntry]] = {}
    for e in entries:
        by_pdb.setdefault(e.pdb_id, []).append(e)
    rep = {e.entry_id: entry_representative_sequence(e) for e in entries}

    frontier = sorted({rep[e.entry_id] for e in entries if split[e.entry_id] == TRAIN})
    moved = 0
    while frontier:
        frontier_kmers = None if cfg.exact else [kmers(s, 5) for s in frontier]
        to_move: list[CuratedEntry] = []
        for e in entries:
            if split[e.entry_id] == TRAIN:
                continue
            query = rep[e.entry_id]
            order = range(len(frontier))
            if frontier_kmers is not None:
                qk = kmers(query, 5)
                order = sorted(order, key=lambda i: not (qk & frontier_kmers[i]))
            if any(identity(query, frontier[i], params) > cfg.identity_threshold for i in order):
                to_move.append(e)
        new_seqs = set()
        for e in to_move:
            for sib in by_pdb[e.pdb_id]:
                if split[sib.entry_id] != TRAIN:
                    split[sib.entry_id] = TRAIN
                    moved += 1
                    new_seqs.add(rep[sib.entry_id])
        frontier = sorted(new_seqs)
    return SplitAssignment(split, assignment.purge_moves + moved, assignment.n_clusters)


def final_partition(remainder: Sequence[CuratedEntry], cfg: SplitConfig) -> dict[str, str]:
    """Re-cluster the held-out entries and balance components between val and test."""
    seqs = [entry_representative_sequence(e) for e in remainder]
    clusters = greedy_cluster(seqs, cfg.identity_threshold, cfg.align_params)
    out: dict[str, str] = {}
    sizes = {VAL: 0, TEST: 0}
    for comp in coherency_components(remainder, clusters):
        side = VAL if sizes[VAL] <= sizes[TEST] else TEST
        for i in comp:
            out[remainder[i].entry_id] = side
        sizes[side] += len(comp)
    return out


def split_entries(entries: Sequence[CuratedEntry], cfg: SplitConfig | None = None) -> SplitAssignment:
    cfg = cfg or SplitConfig()
    entries = sorted(entries, key=lambda e: e.entry_id)
    seqs = [entry_representative_sequence(e) for e in entries]
    clusters = greedy_cluster(seqs, cfg.identity_threshold, cfg.align_params)
    assignment = initial_split(entries, clusters, cfg)
    assignment = leakage_purge(assignment, entries, cfg)
    remainder = [e for e in entries if assignment.assignment[e.entry_id] != TRAIN]
    assignment.assignment.update(final_partition(remainder, cfg))
    return assignment


@dataclass
class LeakageReport:
    violations: list[tuple[str, str, float]] = field(default_factory=list)
    max_identity: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_no_leakage(assignment: SplitAssignment, entries: Sequence[CuratedEntry], cfg: SplitConfig) -> LeakageReport:
    """Exhaustively align every val/test entry against every train entry."""
    params = cfg.align_params
    split = assignment.assignment
    train = [e for e in entries if split.get(e.entry_id) == TRAIN]
    held = [e for e in entries if split.get(e.entry_id) in (VAL, TEST)]
    report = LeakageReport()
    for h in held:
        hs = entry_representative_sequence(h)
        for t in train:
            ident = identity(hs, entry_representative_sequence(t), params)
            report.max_identity = max(report.max_identity, ident)
            if ident > cfg.identity_threshold:
                report.violations.append((h.entry_id, t.entry_id, ident))
    return report


def pdb_coherent(assignment: SplitAssignment, entries: Sequence[CuratedEntry]) -> bool:
    seen: dict[str, str] = {}
    for e in entries:
        s = assignment.assignment[e.entry_id]
        if seen.setdefault(e.pdb_id, s) != s:
            return False
    return True
