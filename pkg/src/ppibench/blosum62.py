"""BLOSUM62 substitution matrix as a static table.

Rows follow the NCBI ordering of the 20 canonical residues. 'X' is appended
as index 20 and scores 0 against every residue (including itself).
"""

import hashlib

import numpy as np

ALPHABET = "ARNDCQEGHILKMFPSTWYV"
ALPHABET_X = ALPHABET + "X"

_TABLE = """\
A  4 -1 -2 -2  0 -1 -1  0 -2 -1 -1 -1 -1 -2 -1  1  0 -3 -2  0
R -1  5  0 -2 -3  1  0 -2  0 -3 -2  2 -1 -3 -2 -1 -1 -3 -2 -3
N -2  0  6  1 -3  0  0  0  1 -3 -3  0 -2 -3 -2  1  0 -4 -2 -3
D -2 -2  1  6 -3  0  2 -1 -1 -3 -4 -1 -3 -3 -1  0 -1 -4 -3 -3
C  0 -3 -3 -3  9 -3 -4 -3 -3 -1 -1 -3 -1 -2 -3 -1 -1 -2 -2 -1
Q -1  1  0  0 -3  5  2 -2  0 -3 -2  1  0 -3 -1  0 -1 -2 -1 -2
E -1  0  0  2 -4  2  5 -2  0 -3 -3  1 -2 -3 -1  0 -1 -3 -2 -2
G  0 -2  0 -1 -3 -2 -2  6 -2 -4 -4 -2 -3 -3 -2  0 -2 -2 -3 -3
H -2  0  1 -1 -3  0  0 -2  8 -3 -3 -1 -2 -1 -2 -1 -2 -2  2 -3
I -1 -3 -3 -3 -1 -3 -3 -4 -3  4  2 -3  1  0 -3 -2 -1 -3 -1  3
L -1 -2 -3 -4 -1 -2 -3 -4 -3  2  4 -2  2  0 -3 -2 -1 -2 -1  1
K -1  2  0 -1 -3  1  1 -2 -1 -3 -2  5 -1 -3 -1  0 -1 -3 -2 -2
M -1 -1 -2 -3 -1  0 -2 -3 -2  1  2 -1  5  0 -2 -1 -1 -1 -1  1
F -2 -3 -3 -3 -2 -3 -3 -3 -1  0  0 -3  0  6 -4 -2 -2  1  3 -1
P -1 -2 -2 -1 -3 -1 -1 -2 -2 -3 -3 -1 -2 -4  7 -1 -1 -4 -3 -2
S  1 -1  1  0 -1  0  0  0 -1 -2 -2  0 -1 -2 -1  4  1 -3 -2 -2
T  0 -1  0 -1 -1 -1 -1 -2 -2 -1 -1 -1 -1 -2 -1  1  5 -2 -2  0
W -3 -3 -4 -4 -2 -2 -3 -2 -2 -3 -2 -3 -1  1 -4 -3 -2 11  2 -3
Y -2 -2 -2 -3 -2 -1 -2 -3  2 -1 -1 -2 -1  3 -3 -2 -2  2  7 -1
V  0 -3 -3 -3 -1 -2 -2 -3 -3  3  1 -2  1 -1 -2 -2  0 -3 -1  4
"""

# sha256 of _TABLE; guards against accidental edits of the matrix text.
CHECKSUM = "6a4ba34f5a8a780fbb31c7fa853ff6d5c2f5c45e7ba3b2b1a5a7fdaef6a09c46"


def table_checksum() -> str:
    return hashlib.sha256(_TABLE.encode("ascii")).hexdigest()


def _build() -> np.ndarray:
    mat = np.zeros((21, 21), dtype=np.int32)
    for i, line in enumerate(_TABLE.splitlines()):
        fields = line.split()
        if fields[0] != ALPHABET[i]:
            raise ValueError(f"row {i} labelled {fields[0]!r}, expected {ALPHABET[i]!r}")
        mat[i, :20] = [int(v) for v in fields[1:]]
    return mat


BLOSUM62 = _build()
BLOSUM62.setflags(write=False)

INDEX = {aa: i for i, aa in enumerate(ALPHABET_X)}


def encode(seq: str) -> np.ndarray:
    """Map a one-letter sequence to matrix indices; unknown letters become 'X'."""
    return np.fromiter((INDEX.get(c, 20) for c in seq), dtype=np.int64, count=len(seq))
