"""A 12-entry corpus in which every curation rule fires a known number of times.

    E01  3QIW analogue: C_K8E but residue C8 is L          -> removed (wild-type mismatch)
    E02  5KVE analogue: ligand lists chain H, file has none -> removed (missing chain)
    E03  lists chains A and a, file has only A              -> case fix, kept
    E04  3QIB / ATLAS, C_K8E where K sits at C9              -> off-by-one fix, kept
    E05  both chains miss internal residues in ATOM          -> 2 chains recovered, kept
    E06  39-residue ligand chain                             -> removed (short)
    E07  20-residue receptor chain                           -> removed (short)
    E08  duplicate of E09 sequences, pkd 8.0 (SPR)           -> merged
    E09  pkd 9.0 (ITC)                                       -> merged into E08, pkd 8.5
    E10  plain wild-type entry                               -> kept
    E11  A_M1K, residue A1 is M                              -> kept, mutated
    E12  Kd given in molar (5e-8)                            -> kept, pkd -log10(5e-8)

Expected: 7 final entries.
"""

from pathlib import Path

import numpy as np

from pdb_text import structure

EXPECTED = {
    "input_count": 12,
    "removed_bad_mutation": ["E01"],
    "removed_missing_chain": ["E02"],
    "case_fixed": ["E03"],
    "off_by_one_fixed": ["E04"],
    "chains_recovered": 2,
    "removed_short": ["E06", "E07"],
    "merged_duplicates": 1,
    "final_count": 7,
    "final_ids": ["E03", "E04", "E05", "E08", "E10", "E11", "E12"],
}

HEADER = "entry_id,pdb_id,ligand_chains,receptor_chains,mutations,kd_molar,pkd,method,source_db"


def _seqs(seed):
    rng = np.random.default_rng(seed)
    return lambda n: "".join(rng.choice(list("ACDEFGHIKLMNPQRSTVWY"), n))


def _set(seq, pos1, aa):
    return seq[: pos1 - 1] + aa + seq[pos1:]


def build(root: Path) -> tuple[Path, Path, dict]:
    """Write ``entries.csv`` and ``pdb/*.pdb`` under ``root``; returns paths and the sequences used."""
    rand = _seqs(2024)
    pdb = root / "pdb"
    pdb.mkdir(parents=True, exist_ok=True)
    seqs = {}

    def write(pdb_id, chains, seqres=None, skip=None):
        (pdb / f"{pdb_id.lower()}.pdb").write_text(structure(chains, seqres, skip))

    c = _set(rand(50), 8, "L")
    seqs["3QIW"] = {"C": c, "A": rand(60)}
    write("3QIW", seqs["3QIW"])

    seqs["5KVE"] = {"L": rand(45), "A": rand(55)}
    write("5KVE", seqs["5KVE"])

    seqs["1CAS"] = {"A": rand(48), "B": rand(52)}
    write("1CAS", seqs["1CAS"])

    c = _set(_set(rand(50), 8, "G"), 9, "K")
    seqs["3QIB"] = {"C": c, "A": rand(58)}
    write("3QIB", seqs["3QIB"])

    full = {"A": rand(50), "B": rand(47)}
    seqs["2REC"] = full
    write("2REC", full, seqres=full, skip={"A": (10, 11, 12), "B": (30,)})

    seqs["1SHA"] = {"A": rand(39), "B": rand(60)}
    write("1SHA", seqs["1SHA"])
    seqs["1SHB"] = {"A": rand(60), "B": rand(20)}
    write("1SHB", seqs["1SHB"])

    seqs["4DUP"] = {"A": rand(44), "B": rand(46)}
    write("4DUP", seqs["4DUP"])
    write("4DUQ", seqs["4DUP"])

    seqs["1WTE"] = {"A": rand(41), "B": rand(43)}
    write("1WTE", seqs["1WTE"])

    seqs["1MUT"] = {"A": _set(rand(42), 1, "M"), "B": rand(44)}
    write("1MUT", seqs["1MUT"])

    seqs["1KDM"] = {"A": rand(40), "B": rand(40)}
    write("1KDM", seqs["1KDM"])

    rows = [
        "E01,3QIW,C,A,C_K8E,,7.5,SPR,SKEMPI2",
        "E02,5KVE,\"H,L\",A,,,8.1,SPR,SAbDab",
        "E03,1CAS,\"A,a\",B,,,6.2,ITC,PDBbind",
        "E04,3QIB,C,A,C_K8E,,5.9,SPR,ATLAS",
        "E05,2REC,A,B,,,7.0,FP,PDBbind",
        "E06,1SHA,A,B,,,6.6,SPR,PDBbind",
        "E07,1SHB,A,B,,,6.7,SPR,PDBbind",
        "E08,4DUP,A,B,,,8.0,SPR,SKEMPI2",
        "E09,4DUQ,A,B,,,9.0,ITC,PDBbind",
        "E10,1WTE,A,B,,,7.7,BLI,PDBbind",
        "E11,1MUT,A,B,A_M1K,,6.9,SPR,SKEMPI2",
        "E12,1KDM,A,B,,5e-8,,SPR,Affinity Benchmark",
    ]
    entries = root / "entries.csv"
    entries.write_text(HEADER + "\n" + "\n".join(rows) + "\n")
    return entries, pdb, seqs
