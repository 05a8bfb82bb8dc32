"""Entry-table curation: validation, correction, sequence reconstruction, dedup.

The pipeline runs per entry in this order:

1. chain existence check (with the lowercase duplicate-chain fix),
2. rule-table mutation renumbering (the 3QIB/ATLAS chain C shift),
3. wild-type check of every mutation against the ATOM residues,
4. missing-residue recovery from SEQRES and mutation application,
5. Kd to pKd conversion,

followed by the short-chain filter and deduplication over all survivors.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Literal, NamedTuple, Sequence

import numba
import numpy as np

from .pdb_ingest import ChainData, PdbStructure, RESIDUE_ALPHABET

log = logging.getLogger(__name__)

CANONICAL = frozenset("ACDEFGHIKLMNPQRSTVWY")
UNRELIABLE_METHODS = frozenset({"Unknown", "Other"})
MIN_CHAIN_LENGTH = 40
RECOVERY_MIN_IDENTITY = 0.9

REQUIRED_COLUMNS = ("entry_id", "pdb_id", "ligand_chains", "receptor_chains", "mutations", "method", "source_db")

_MUTATION_RE = re.compile(r"^([A-Za-z0-9])_([A-Z])(-?\d+)([A-Z])$")


class CurationError(ValueError):
    pass


class MutationError(CurationError):
    pass


@dataclass(frozen=True)
class MutationSpec:
    chain_id: str
    wild_aa: str
    position: int
    mutant_aa: str

    def __post_init__(self):
        if self.wild_aa not in CANONICAL or self.mutant_aa not in CANONICAL:
            raise MutationError(f"non-canonical residue in {self}")
        if self.wild_aa == self.mutant_aa:
            raise MutationError(f"silent mutation {self}")

    @classmethod
    def parse(cls, token: str) -> MutationSpec:
        m = _MUTATION_RE.match(token.strip())
        if m is None:
            raise MutationError(f"unparseable mutation token {token!r}")
        chain, wild, pos, mut = m.groups()
        return cls(chain, wild, int(pos), mut)

    def __str__(self):
        return f"{self.chain_id}_{self.wild_aa}{self.position}{self.mutant_aa}"


@dataclass
class RawEntry:
    entry_id: str
    pdb_id: str
    ligand_chains: list[str]
    receptor_chains: list[str]
    mutations: list[MutationSpec] = field(default_factory=list)
    affinity_kd: float | None = None
    affinity_pkd: float | None = None
    method: str = "Unknown"
    source_db: str = ""
    # set when the mutations field could not be parsed
    mutation_error: str | None = None

    @property
    def chains(self) -> list[str]:
        return self.ligand_chains + self.receptor_chains


@dataclass(frozen=True)
class CuratedEntry:
    entry_id: str
    pdb_id: str
    ligand_seqs: tuple[str, ...]
    receptor_seqs: tuple[str, ...]
    pkd: float
    method: str

    def to_json(self) -> str:
        d = asdict(self)
        d["ligand_seqs"] = list(self.ligand_seqs)
        d["receptor_seqs"] = list(self.receptor_seqs)
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> CuratedEntry:
        d = json.loads(line)
        return cls(
            d["entry_id"], d["pdb_id"], tuple(d["ligand_seqs"]), tuple(d["receptor_seqs"]),
            float(d["pkd"]), d["method"],
        )


@dataclass
class CurationReport:
    input_count: int = 0
    removed_bad_mutation: list[str] = field(default_factory=list)
    removed_missing_chain: list[str] = field(default_factory=list)
    removed_missing_structure: list[str] = field(default_factory=list)
    removed_unmappable_mutation: list[str] = field(default_factory=list)
    removed_short: list[str] = field(default_factory=list)
    case_fixed: list[str] = field(default_factory=list)
    off_by_one_fixed: list[str] = field(default_factory=list)
    chains_recovered: int = 0
    merged_duplicates: int = 0
    final_count: int = 0
    warnings: list[str] = field(default_factory=list)

    def removed_total(self) -> int:
        return sum(len(v) for k, v in asdict(self).items() if k.startswith("removed_"))

    def is_consistent(self) -> bool:
        return self.final_count == self.input_count - self.removed_total() - self.merged_duplicates


# ---------------------------------------------------------------------------
# table ingest


def _split_chains(field_value: str) -> list[str]:
    return [c.strip() for c in field_value.split(",") if c.strip()]


def parse_entry_table(source: str | Path | Iterable[str]) -> list[RawEntry]:
    """Read a binding-affinity CSV into :class:`RawEntry` objects.

    ``source`` is a path or an iterable of CSV lines. A missing column raises;
    an unparseable mutation token is kept on the entry as ``mutation_error``.
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        with open(source, newline="", encoding="utf-8") as fh:
            return parse_entry_table(fh.readlines())
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.DictReader(source)
    columns = set(reader.fieldnames or ())
    missing = [c for c in REQUIRED_COLUMNS if c not in columns]
    if not ({"kd_molar", "pkd"} & columns):
        missing.append("kd_molar|pkd")
    if missing:
        raise CurationError(f"entry table missing columns: {', '.join(missing)}")

    entries = []
    for row in reader:
        mutations, error = [], None
        for token in filter(None, (t.strip() for t in (row["mutations"] or "").split(";"))):
            try:
                mutations.append(MutationSpec.parse(token))
            except MutationError as exc:
                error = str(exc)
        kd = (row.get("kd_molar") or "").strip()
        pkd = (row.get("pkd") or "").strip()
        if bool(kd) == bool(pkd):
            raise CurationError(f"{row['entry_id']}: exactly one of kd_molar/pkd required")
        entries.append(
            RawEntry(
                entry_id=row["entry_id"].strip(),
                pdb_id=row["pdb_id"].strip().upper(),
                ligand_chains=_split_chains(row["ligand_chains"]),
                receptor_chains=_split_chains(row["receptor_chains"]),
                mutations=mutations,
                affinity_kd=float(kd) if kd else None,
                affinity_pkd=float(pkd) if pkd else None,
                method=(row["method"] or "").strip() or "Unknown",
                source_db=(row["source_db"] or "").strip(),
                mutation_error=error,
            )
        )
    return entries


def kd_to_pkd(kd: float) -> float:
    if not kd > 0:
        raise CurationError(f"Kd must be positive, got {kd}")
    return -math.log10(kd)


# ---------------------------------------------------------------------------
# preprocessing checks


class Check(NamedTuple):
    status: Literal["pass", "fixed", "fail"]
    entry: RawEntry
    reason: str = ""


def validate_chains(entry: RawEntry, structure: PdbStructure) -> Check:
    """Check that every listed chain exists, dropping phantom lowercase twins.

    A lowercase chain that is absent from the structure is dropped when its
    uppercase twin is both listed and present.
    """
    present = structure.chains
    listed = set(entry.chains)
    drop = {
        c for c in listed
        if c.islower() and c not in present and c.upper() in present and c.upper() in listed
    }
    lig = [c for c in entry.ligand_chains if c not in drop]
    rec = [c for c in entry.receptor_chains if c not in drop]
    absent = [c for c in lig + rec if c not in present]
    if absent or not lig or not rec:
        return Check("fail", entry, f"missing chain(s) {','.join(absent) or '(empty partner)'}")
    if drop:
        return Check("fixed", replace(entry, ligand_chains=lig, receptor_chains=rec))
    return Check("pass", entry)


@dataclass(frozen=True)
class RenumberRule:
    pdb_id: str
    source_db: str
    chain_id: str
    delta: int


DEFAULT_RENUMBER_RULES = (RenumberRule("3QIB", "ATLAS", "C", 1),)


def apply_off_by_one_correction(
    entry: RawEntry, rules: Sequence[RenumberRule] = DEFAULT_RENUMBER_RULES
) -> RawEntry:
    """Shift mutation positions matched by a (pdb_id, source_db, chain) rule."""
    shifted = []
    for mut in entry.mutations:
        for rule in rules:
            if (entry.pdb_id.upper(), entry.source_db, mut.chain_id) == (
                rule.pdb_id.upper(), rule.source_db, rule.chain_id
            ):
                mut = replace(mut, position=mut.position + rule.delta)
                break
        shifted.append(mut)
    if shifted == entry.mutations:
        return entry
    return replace(entry, mutations=shifted)


def validate_mutation(entry: RawEntry, structure: PdbStructure) -> Check:
    for mut in entry.mutations:
        chain = structure.chains.get(mut.chain_id)
        if chain is None:
            return Check("fail", entry, f"missing_chain: {mut}")
        res = next(
            (r for r in chain.atom_residues if r.res_seq == mut.position and not r.insertion_code),
            None,
        )
        if res is None:
            return Check("fail", entry, f"missing_position: {mut}")
        if res.aa != mut.wild_aa:
            return Check("fail", entry, f"wild_type_mismatch: {mut} but structure has {res.aa}")
    return Check("pass", entry)


# ---------------------------------------------------------------------------
# residue recovery


@numba.njit(cache=True)
def _global_align(a, b, x_code):
    """Needleman-Wunsch with linear gaps; returns op codes start-to-end.

    0 = aligned pair, 1 = residue of ``a`` against a gap, 2 = residue of ``b``
    against a gap. ``x_code`` pairs with anything at score 0.
    """
    n = a.shape[0]
    m = b.shape[0]
    S = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(1, n + 1):
        S[i, 0] = i * -2
    for j in range(1, m + 1):
        S[0, j] = j * -2
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if a[i - 1] == x_code or b[j - 1] == x_code:
                s = 0
            elif a[i - 1] == b[j - 1]:
                s = 1
            else:
                s = -1
            best = S[i - 1, j - 1] + s
            up = S[i - 1, j] - 2
            left = S[i, j - 1] - 2
            if up > best:
                best = up
            if left > best:
                best = left
            S[i, j] = best
    ops = np.empty(n + m, dtype=np.int64)
    k = 0
    i = n
    j = m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            if a[i - 1] == x_code or b[j - 1] == x_code:
                s = 0
            elif a[i - 1] == b[j - 1]:
                s = 1
            else:
                s = -1
            if S[i, j] == S[i - 1, j - 1] + s:
                ops[k] = 0
                i -= 1
                j -= 1
                k += 1
                continue
        if j > 0 and S[i, j] == S[i, j - 1] - 2:
            ops[k] = 2
            j -= 1
        else:
            ops[k] = 1
            i -= 1
        k += 1
    return ops[:k][::-1].copy()


def _codes(seq: str) -> np.ndarray:
    return np.frombuffer(seq.encode("ascii"), dtype=np.uint8).astype(np.int64)


class Recovery(NamedTuple):
    sequence: str
    pos_map: dict[tuple[int, str], int]
    warning: str | None = None


def recover_missing_residues(chain: ChainData) -> Recovery:
    """Fill residues missing from ATOM records using the SEQRES sequence.

    The ATOM sequence is globally aligned to SEQRES. When every ATOM residue
    lands on a SEQRES position and identity over aligned pairs is at least
    0.9, the result is the SEQRES frame with observed residues kept and the
    unobserved ones taken from SEQRES. Otherwise the ATOM sequence is returned
    with a warning. ``pos_map`` maps ``(res_seq, insertion_code)`` of each
    ATOM residue to its index in the returned sequence.
    """
    atom_seq = chain.atom_seq
    if not atom_seq:
        raise CurationError(f"chain {chain.chain_id} has no ATOM residues")
    identity_map = {r.key[1:]: i for i, r in enumerate(chain.atom_residues)}
    seqres = chain.seqres_seq
    if not seqres or seqres == atom_seq:
        return Recovery(atom_seq, identity_map)

    ops = _global_align(_codes(atom_seq), _codes(seqres), ord("X"))
    out = list(seqres)
    pos_map: dict[tuple[int, str], int] = {}
    ai = si = 0
    pairs = matches = 0
    for op in ops:
        if op == 0:
            a, s = atom_seq[ai], seqres[si]
            pairs += 1
            matches += a == s or a == "X" or s == "X"
            out[si] = a
            pos_map[chain.atom_residues[ai].key[1:]] = si
            ai += 1
            si += 1
        elif op == 1:
            return Recovery(
                atom_seq, identity_map,
                f"chain {chain.chain_id}: ATOM residue {ai} has no SEQRES counterpart",
            )
        else:
            si += 1
    ident = matches / pairs if pairs else 0.0
    if ident < RECOVERY_MIN_IDENTITY:
        return Recovery(
            atom_seq, identity_map,
            f"chain {chain.chain_id}: ATOM/SEQRES identity {ident:.2f} below {RECOVERY_MIN_IDENTITY}",
        )
    return Recovery("".join(out), pos_map)


def apply_mutations(
    recovered: str, pos_map: dict, specs: Sequence[MutationSpec]
) -> str:
    """Substitute each mutant residue at its mapped index.

    ``pos_map`` keys may be plain residue numbers or ``(res_seq, icode)``
    tuples; mutations always refer to residues without insertion code.
    """
    seq = list(recovered)
    touched: set[int] = set()
    for spec in specs:
        idx = pos_map.get((spec.position, ""), pos_map.get(spec.position))
        if idx is None:
            raise MutationError(f"{spec}: position not in residue map")
        if idx in touched:
            raise MutationError(f"{spec}: collides with another mutation")
        touched.add(idx)
        seq[idx] = spec.mutant_aa
    return "".join(seq)


# ---------------------------------------------------------------------------
# postprocessing


def filter_short_chains(
    entries: Iterable[CuratedEntry], min_length: int = MIN_CHAIN_LENGTH
) -> tuple[list[CuratedEntry], list[CuratedEntry]]:
    """Split entries into (kept, removed) by the shortest chain of either partner."""
    kept, removed = [], []
    for e in entries:
        shortest = min(len(s) for s in e.ligand_seqs + e.receptor_seqs)
        (removed if shortest < min_length else kept).append(e)
    return kept, removed


def dedup_key(e: CuratedEntry) -> tuple[tuple[str, ...], tuple[str, ...]]:
    return tuple(sorted(e.ligand_seqs)), tuple(sorted(e.receptor_seqs))


def deduplicate_entries(
    entries: Iterable[CuratedEntry], average_space: Literal["pkd", "kd"] = "pkd"
) -> tuple[list[CuratedEntry], int]:
    """Collapse entries with identical partner sequences into one.

    Returns the representatives (sorted by entry_id) and the number of
    entries absorbed. When a group mixes reliable and Unknown/Other methods,
    the latter are dropped before averaging.
    """
    groups: dict[tuple, list[CuratedEntry]] = defaultdict(list)
    for e in entries:
        groups[dedup_key(e)].append(e)
    out, merged = [], 0
    for members in groups.values():
        merged += len(members) - 1
        if len(members) == 1:
            out.append(members[0])
            continue
        reliable = [m for m in members if m.method not in UNRELIABLE_METHODS]
        survivors = reliable or members
        if average_space == "pkd":
            pkd = math.fsum(m.pkd for m in survivors) / len(survivors)
        else:
            pkd = -math.log10(math.fsum(10.0 ** -m.pkd for m in survivors) / len(survivors))
        # id and pdb come from the smallest member id overall; sequences agree across the group
        lead = min(members, key=lambda m: m.entry_id)
        methods = ";".join(sorted({m.method for m in survivors}))
        out.append(replace(lead, pkd=pkd, method=methods))
    out.sort(key=lambda e: e.entry_id)
    return out, merged


# ---------------------------------------------------------------------------
# driver


@dataclass
class CurationConfig:
    min_chain_length: int = MIN_CHAIN_LENGTH
    average_space: Literal["pkd", "kd"] = "pkd"
    renumber_rules: tuple[RenumberRule, ...] = DEFAULT_RENUMBER_RULES


def curate(
    raw: Sequence[RawEntry],
    load_structure: Callable[[str], PdbStructure],
    config: CurationConfig | None = None,
) -> tuple[list[CuratedEntry], CurationReport]:
    """Run the full curation pipeline over ``raw`` entries.

    ``load_structure`` maps a PDB id to its parsed structure and may raise
    ``FileNotFoundError``; structures are cached per id.
    """
    cfg = config or CurationConfig()
    report = CurationReport(input_count=len(raw))
    structures: dict[str, PdbStructure | None] = {}
    recoveries: dict[tuple[str, str], Recovery] = {}
    candidates: list[CuratedEntry] = []

    def structure_for(pdb_id: str) -> PdbStructure | None:
        if pdb_id not in structures:
            try:
                structures[pdb_id] = load_structure(pdb_id)
            except (FileNotFoundError, ValueError) as exc:
                log.warning("structure %s unavailable: %s", pdb_id, exc)
                structures[pdb_id] = None
        return structures[pdb_id]

    for entry in sorted(raw, key=lambda e: e.entry_id):
        if entry.mutation_error:
            report.removed_bad_mutation.append(entry.entry_id)
            continue
        structure = structure_for(entry.pdb_id)
        if structure is None:
            report.removed_missing_structure.append(entry.entry_id)
            continue

        check = validate_chains(entry, structure)
        if check.status == "fail":
            report.removed_missing_chain.append(entry.entry_id)
            continue
        if check.status == "fixed":
            report.case_fixed.append(entry.entry_id)
        entry = check.entry

        corrected = apply_off_by_one_correction(entry, cfg.renumber_rules)
        if corrected is not entry:
            report.off_by_one_fixed.append(entry.entry_id)
        entry = corrected

        if validate_mutation(entry, structure).status == "fail":
            report.removed_bad_mutation.append(entry.entry_id)
            continue

        seqs: dict[str, str] = {}
        try:
            for cid in entry.chains:
                key = (entry.pdb_id, cid)
                if key not in recoveries:
                    rec = recover_missing_residues(structure.chains[cid])
                    recoveries[key] = rec
                    if rec.warning:
                        report.warnings.append(f"{entry.pdb_id}: {rec.warning}")
                rec = recoveries[key]
                specs = [m for m in entry.mutations if m.chain_id == cid]
                seqs[cid] = apply_mutations(rec.sequence, rec.pos_map, specs)
        except MutationError as exc:
            log.warning("%s: %s", entry.entry_id, exc)
            report.removed_unmappable_mutation.append(entry.entry_id)
            continue

        pkd = entry.affinity_pkd if entry.affinity_pkd is not None else kd_to_pkd(entry.affinity_kd)
        candidates.append(
            CuratedEntry(
                entry.entry_id, entry.pdb_id,
                tuple(seqs[c] for c in entry.ligand_chains),
                tuple(seqs[c] for c in entry.receptor_chains),
                pkd, entry.method,
            )
        )

    report.chains_recovered = sum(
        1 for (pdb_id, cid), rec in recoveries.items()
        if len(rec.sequence) > len(structures[pdb_id].chains[cid].atom_seq)
    )
    kept, short = filter_short_chains(candidates, cfg.min_chain_length)
    report.removed_short = [e.entry_id for e in short]
    final, merged = deduplicate_entries(kept, cfg.average_space)
    report.merged_duplicates = merged
    report.final_count = len(final)
    return final, report


def check_curated(entries: Iterable[CuratedEntry], min_length: int = MIN_CHAIN_LENGTH) -> list[str]:
    """Dataset invariants over curated entries; returns human-readable violations."""
    problems = []
    seen = {}
    for e in entries:
        for s in e.ligand_seqs + e.receptor_seqs:
            if len(s) < min_length:
                problems.append(f"{e.entry_id}: chain shorter than {min_length}")
            if not set(s) <= RESIDUE_ALPHABET:
                problems.append(f"{e.entry_id}: residue outside alphabet")
        key = dedup_key(e)
        if key in seen:
            problems.append(f"{e.entry_id}: duplicates {seen[key]}")
        seen[key] = e.entry_id
    return problems
