"""Per-chain sequences from PDB fixed-column text.

Only ATOM, SEQRES, TER and ENDMDL records are interpreted. Parsing stops at
the first ENDMDL, so multi-model files contribute their first model only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

THREE_TO_ONE = {
    "ALA": "A", "ARG": "R", "ASN": "N", "ASP": "D", "CYS": "C",
    "GLN": "Q", "GLU": "E", "GLY": "G", "HIS": "H", "ILE": "I",
    "LEU": "L", "LYS": "K", "MET": "M", "PHE": "F", "PRO": "P",
    "SER": "S", "THR": "T", "TRP": "W", "TYR": "Y", "VAL": "V",
    "MSE": "M",
}
ONE_TO_THREE = {v: k for k, v in THREE_TO_ONE.items() if k != "MSE"}
ONE_TO_THREE["X"] = "UNK"

RESIDUE_ALPHABET = frozenset("ACDEFGHIKLMNPQRSTVWYX")


class PdbParseError(ValueError):
    pass


def three_to_one(code: str) -> str:
    """One-letter code for a residue name; anything unrecognised is 'X'."""
    return THREE_TO_ONE.get(code.strip().upper(), "X")


@dataclass(frozen=True)
class ResidueRecord:
    chain_id: str
    res_seq: int
    insertion_code: str
    aa: str

    @property
    def key(self) -> tuple[str, int, str]:
        return self.chain_id, self.res_seq, self.insertion_code


@dataclass
class ChainData:
    chain_id: str
    atom_residues: list[ResidueRecord] = field(default_factory=list)
    seqres_seq: str | None = None

    @property
    def atom_seq(self) -> str:
        return "".join(r.aa for r in self.atom_residues)


@dataclass
class PdbStructure:
    pdb_id: str
    chains: dict[str, ChainData]
    parse_report: list[str] = field(default_factory=list, compare=False)


def _iter_lines(data: bytes | str) -> Iterator[str]:
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    return iter(data.splitlines())


def parse_pdb(data: bytes | str, pdb_id: str) -> PdbStructure:
    """Parse PDB text into ATOM-derived and SEQRES sequences per chain.

    Malformed ATOM lines (e.g. a non-numeric residue number) are skipped and
    noted in ``parse_report``; a structure with no ATOM residues raises
    :class:`PdbParseError`.
    """
    residues: dict[str, list[ResidueRecord]] = {}
    seen: set[tuple[str, int, str]] = set()
    seqres: dict[str, list[str]] = {}
    report: list[str] = []

    for lineno, line in enumerate(_iter_lines(data), start=1):
        record = line[:6]
        if record.startswith("ENDMDL"):
            break
        if record.startswith("SEQRES"):
            chain_id = line[11:12]
            names = line[19:].split()
            seqres.setdefault(chain_id, []).extend(three_to_one(n) for n in names)
        elif record.startswith("ATOM"):
            if len(line) < 27:
                report.append(f"line {lineno}: truncated ATOM record")
                continue
            res_name = line[17:20]
            chain_id = line[21]
            try:
                res_seq = int(line[22:26])
            except ValueError:
                report.append(f"line {lineno}: non-numeric residue number {line[22:26]!r}")
                continue
            icode = line[26].strip()
            key = (chain_id, res_seq, icode)
            # first altloc / first atom of a residue wins
            if key in seen:
                continue
            seen.add(key)
            residues.setdefault(chain_id, []).append(
                ResidueRecord(chain_id, res_seq, icode, three_to_one(res_name))
            )
        # TER and every other record: nothing to extract

    if not residues:
        raise PdbParseError(f"{pdb_id}: no ATOM residues found")

    chains = {
        cid: ChainData(cid, recs, "".join(seqres[cid]) if seqres.get(cid) else None)
        for cid, recs in residues.items()
    }
    return PdbStructure(pdb_id.upper(), chains, report)


def find_pdb_file(pdb_dir: str | Path, pdb_id: str) -> Path:
    pdb_dir = Path(pdb_dir)
    for name in (f"{pdb_id}.pdb", f"{pdb_id.lower()}.pdb", f"{pdb_id.upper()}.pdb"):
        path = pdb_dir / name
        if path.is_file():
            return path
    target = f"{pdb_id.lower()}.pdb"
    for path in pdb_dir.iterdir():
        if path.name.lower() == target:
            return path
    raise FileNotFoundError(f"no PDB file for {pdb_id} in {pdb_dir}")


def load_pdb(pdb_dir: str | Path, pdb_id: str) -> PdbStructure:
    path = find_pdb_file(pdb_dir, pdb_id)
    return parse_pdb(path.read_bytes(), pdb_id)


def format_pdb(structure: PdbStructure) -> str:
    """Write the columns the parser reads back out as SEQRES + CA-only ATOM lines."""
    lines = []
    for chain in structure.chains.values():
        if not chain.seqres_seq:
            continue
        names = [ONE_TO_THREE.get(aa, "UNK") for aa in chain.seqres_seq]
        for serial, start in enumerate(range(0, len(names), 13), start=1):
            chunk = " ".join(names[start : start + 13])
            lines.append(f"SEQRES {serial:3d} {chain.chain_id} {len(names):4d}  {chunk}")
    atom_serial = 1
    for chain in structure.chains.values():
        for res in chain.atom_residues:
            name = ONE_TO_THREE.get(res.aa, "UNK")
            lines.append(
                f"ATOM  {atom_serial:5d}  CA  {name} {res.chain_id}{res.res_seq:4d}"
                f"{res.insertion_code or ' ':1s}   {0.0:8.3f}{0.0:8.3f}{0.0:8.3f}"
                f"{1.0:6.2f}{0.0:6.2f}           C"
            )
            atom_serial += 1
        lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


def dump_chains(structures: Iterable[PdbStructure]) -> Iterator[str]:
    """JSON lines ``{pdb_id, chain_id, atom_seq, seqres_seq}``, one per chain."""
    for st in structures:
        for chain in st.chains.values():
            yield json.dumps(
                {
                    "pdb_id": st.pdb_id,
                    "chain_id": chain.chain_id,
                    "atom_seq": chain.atom_seq,
                    "seqres_seq": chain.seqres_seq,
                }
            )
