"""Architectures adapting a per-residue embedder to two-partner regression.

* EC  - embed each partner's EOS-joined chains, pool each, concatenate, MLP.
* SC  - embed all chains of both partners as one EOS-joined sequence, pool, MLP.
* HP  - embed every chain alone, pool per chain, pool across chains, concatenate, MLP.
* PAD - as EC up to the embeddings, then cross-attention with residual add,
  pool each partner, sum the two vectors, MLP.

All blocks are shared between the ligand and receptor pathways. The embedder
is either a small trainable transformer-style mock or a lookup into
precomputed per-residue embeddings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

RESIDUES = "ACDEFGHIKLMNPQRSTVWYX"
EOS = len(RESIDUES)
PAD = EOS + 1
VOCAB_SIZE = PAD + 1
_TOKEN = {aa: i for i, aa in enumerate(RESIDUES)}

ARCHITECTURES = ("EC", "SC", "HP", "PAD")


class ConfigError(ValueError):
    pass


def tokenize(seq: str) -> np.ndarray:
    try:
        return np.array([_TOKEN[c] for c in seq], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"unknown residue token {exc.args[0]!r}") from None


def with_eos(chains: Sequence[np.ndarray]) -> np.ndarray:
    """``c1 EOS c2 EOS ... cL EOS``."""
    parts = []
    for c in chains:
        parts.append(c)
        parts.append(np.array([EOS], dtype=np.int64))
    return np.concatenate(parts)


@dataclass
class TokenizedPartner:
    chains: list[np.ndarray]
    # "<entry_id>/<lig|rec>", used to look up precomputed embeddings
    key: str | None = None

    @classmethod
    def from_sequences(cls, seqs: Sequence[str], key: str | None = None) -> TokenizedPartner:
        return cls([tokenize(s) for s in seqs], key)

    @property
    def concat_with_eos(self) -> np.ndarray:
        return with_eos(self.chains)


@dataclass
class EmbedderConfig:
    e_dim: int = 32
    mode: Literal["trainable_mock", "frozen_file"] = "trainable_mock"
    l2_normalize_rows: bool = False
    context_layers: int = 1
    attention_heads: int = 4
    position_signal: bool = True

    def __post_init__(self):
        if self.e_dim % self.attention_heads:
            raise ConfigError(f"e_dim {self.e_dim} not divisible by {self.attention_heads} heads")


@dataclass
class ArchitectureConfig:
    arch: str = "EC"
    mha_heads: int = 4
    mlp_hidden: int | None = None
    training_paradigm: Literal["finetune", "frozen"] = "finetune"

    def __post_init__(self):
        self.arch = self.arch.upper()
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.arch == "PAD" and self.mha_heads < 1:
            raise ConfigError("PAD needs at least one attention head")
        if self.training_paradigm not in ("finetune", "frozen"):
            raise ConfigError(f"unknown paradigm {self.training_paradigm!r}")


# ---------------------------------------------------------------------------
# building blocks


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def attention_pool(h: Tensor, w: Tensor) -> Tensor:
    """Softmax-weighted sum of the rows of ``h`` (n x e) with scores ``h @ w``."""
    if h.ndim != 2 or h.shape[0] == 0:
        raise ShapeError(f"attention_pool needs a non-empty (n, e) input, got {h.shape}")
    alpha = T.softmax(h @ w, axis=0)
    return T.sum(alpha * h, axis=0)


def pool_weights(h: Tensor, w: Tensor) -> np.ndarray:
    """The attention weights ``attention_pool`` would use, as a flat array."""
    return T.softmax(h @ w, axis=0).data[:, 0]


def mha_cross_attention(q_seq: Tensor, kv_seq: Tensor, params: Mapping[str, Tensor], heads: int, prefix: str = "mha") -> Tensor:
    n, e = q_seq.shape
    m = kv_seq.shape[0]
    if kv_seq.shape[1] != e:
        raise ShapeError(f"query width {e} != key/value width {kv_seq.shape[1]}")
    if e % heads:
        raise ConfigError(f"width {e} not divisible by {heads} heads")
    d = e // heads
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731

    def split(x: Tensor, rows: int) -> Tensor:
        return T.transpose(T.reshape(x, (rows, heads, d)), (1, 0, 2))

    q = split(q_seq @ p("wq") + p("bq"), n)
    k = split(kv_seq @ p("wk") + p("bk"), m)
    v = split(kv_seq @ p("wv") + p("bv"), m)
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(d))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, e))
    return merged @ p("wo") + p("bo")


def mlp_forward(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    w1 = params["mlp.w1"]
    if x.shape != (w1.shape[0],):
        raise ShapeError(f"MLP expects input width {w1.shape[0]}, got shape {x.shape}")
    hidden = T.relu(T.reshape(x, (1, -1)) @ w1 + params["mlp.b1"])
    return T.reshape(hidden @ params["mlp.w2"] + params["mlp.b2"], ())


def l2_normalize_rows(h: Tensor, eps: float = 1e-12) -> Tensor:
    return h / T.sqrt(T.sum(h * h, axis=1, keepdims=True) + eps)


def mock_embed(tokens: np.ndarray, cfg: EmbedderConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Token embedding + sinusoidal positions, then residual self-attention layers."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= VOCAB_SIZE):
        raise ValueError("token outside vocabulary")
    table = params["embedder.tokens"]
    h = T.take_rows(table, tokens)
    if cfg.position_signal:
        h = h + Tensor(sinusoidal_positions(len(tokens), cfg.e_dim).astype(table.dtype))
    for layer in range(cfg.context_layers):
        h = h + mha_cross_attention(h, h, params, cfg.attention_heads, prefix=f"embedder.attn{layer}")
    if cfg.l2_normalize_rows:
        h = l2_normalize_rows(h)
    return h


# ---------------------------------------------------------------------------
# model state


def _mha_params(prefix: str, e: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name in ("q", "k", "v", "o"):
        out[f"{prefix}.w{name}"] = rng.normal(0.0, 1.0 / np.sqrt(e), (e, e))
        out[f"{prefix}.b{name}"] = np.zeros(e)
    return out


@dataclass
class ModelState:
    embedder_cfg: EmbedderConfig
    arch_cfg: ArchitectureConfig
    params: dict[str, Tensor]
    # precomputed embeddings for frozen_file mode, keyed by sequence id
    embedding_table: Mapping[str, np.ndarray] | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(
        cls,
        embedder_cfg: EmbedderConfig,
        arch_cfg: ArchitectureConfig,
        seed: int = 0,
        embedding_table: Mapping[str, np.ndarray] | None = None,
        dtype=np.float32,
    ) -> ModelState:
        rng = np.random.default_rng(seed)
        e = embedder_cfg.e_dim
        hidden = arch_cfg.mlp_hidden or e
        width = 2 * e if arch_cfg.arch in ("EC", "HP") else e
        raw: dict[str, np.ndarray] = {}
        if embedder_cfg.mode == "trainable_mock":
            raw["embedder.tokens"] = rng.normal(0.0, 1.0, (VOCAB_SIZE, e))
            for layer in range(embedder_cfg.context_layers):
                raw.update(_mha_params(f"embedder.attn{layer}", e, rng))
        elif embedding_table is None:
            raise ConfigError("frozen_file mode needs an embedding table")
        raw["pool1.w"] = rng.normal(0.0, 0.1 / np.sqrt(e), (e, 1))
        raw["pool2.w"] = rng.normal(0.0, 0.1 / np.sqrt(e), (e, 1))
        if arch_cfg.arch == "PAD":
            if e % arch_cfg.mha_heads:
                raise ConfigError(f"e_dim {e} not divisible by {arch_cfg.mha_heads} heads")
            raw.update(_mha_params("mha", e, rng))
        raw["mlp.w1"] = rng.normal(0.0, np.sqrt(2.0 / width), (width, hidden))
        raw["mlp.b1"] = np.zeros(hidden)
        raw["mlp.w2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 1))
        raw["mlp.b2"] = np.zeros(1)
        state = cls(embedder_cfg, arch_cfg, {}, embedding_table)
        state.load({k: v for k, v in raw.items()}, dtype=dtype)
        return state

    @property
    def embedder_trainable(self) -> bool:
        return self.embedder_cfg.mode == "trainable_mock" and self.arch_cfg.training_paradigm == "finetune"

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load(self, arrays: Mapping[str, np.ndarray], dtype=None) -> None:
        self.params = {}
        for name, arr in arrays.items():
            arr = np.array(arr, dtype=dtype or np.float32)
            grad = not name.startswith("embedder.") or self.embedder_trainable
            self.params[name] = Tensor(arr, requires_grad=grad, name=name)
        self._cache.clear()

    def astype(self, dtype) -> ModelState:
        clone = ModelState(self.embedder_cfg, self.arch_cfg, {}, self.embedding_table)
        clone.load(self.snapshot(), dtype=dtype)
        return clone

    @property
    def dtype(self):
        return self.params["mlp.w1"].dtype

    def embed(self, tokens: np.ndarray, key: str | None = None) -> Tensor:
        if self.embedder_cfg.mode == "frozen_file":
            if key is None:
                raise KeyError("frozen_file embedder needs a sequence id")
            cached = self._cache.get(key)
            if cached is None:
                arr = self.embedding_table[key]
                if arr.shape != (len(tokens), self.embedder_cfg.e_dim):
                    raise ShapeError(f"{key}: stored embedding {arr.shape} vs {len(tokens)} tokens")
                h = Tensor(arr.astype(self.dtype))
                if self.embedder_cfg.l2_normalize_rows:
                    h = l2_normalize_rows(h)
                cached = self._cache[key] = Tensor(h.data)
            return cached
        if self.embedder_trainable:
            return mock_embed(tokens, self.embedder_cfg, self.params)
        cache_key = tokens.tobytes()
        cached = self._cache.get(cache_key)
        if cached is None:
            cached = self._cache[cache_key] = Tensor(mock_embed(tokens, self.embedder_cfg, self.params).data)
        return cached


# ---------------------------------------------------------------------------
# architectures


def _key(partner: TokenizedPartner, form: str) -> str | None:
    return f"{partner.key}/{form}" if partner.key else None


def _pair_key(lig: TokenizedPartner) -> str | None:
    return f"{lig.key.rsplit('/', 1)[0]}/pair/concat" if lig.key else None


def _check_partners(lig: TokenizedPartner, rec: TokenizedPartner) -> None:
    if not lig.chains or not rec.chains:
        raise ValueError("both partners need at least one chain")


def embed_partner_concat(partner: TokenizedPartner, state: ModelState) -> Tensor:
    return state.embed(partner.concat_with_eos, _key(partner, "concat"))


def forward_ec(lig: TokenizedPartner, rec: TokenizedPartner, state: ModelState) -> Tensor:
    _check_partners(lig, rec)
    w = state.params["pool1.w"]
    pooled_l = attention_pool(embed_partner_concat(lig, state), w)
    pooled_r = attention_pool(embed_partner_concat(rec, state), w)
    return mlp_forward(T.concat([pooled_l, pooled_r], axis=0), state.params)


def forward_sc(lig: TokenizedPartner, rec: TokenizedPartner, state: ModelState) -> Tensor:
    _check_partners(lig, rec)
    tokens = with_eos(lig.chains + rec.chains)
    h = state.embed(tokens, _pair_key(lig))
    return mlp_forward(attention_pool(h, state.params["pool1.w"]), state.params)


def hierarchical_partner(partner: TokenizedPartner, state: ModelState) -> Tensor:
    w1, w2 = state.params["pool1.w"], state.params["pool2.w"]
    per_chain = [
        attention_pool(state.embed(with_eos([c]), _key(partner, f"chain{i}")), w1)
        for i, c in enumerate(partner.chains)
    ]
    return attention_pool(T.stack(per_chain, axis=0), w2)


def forward_hp(lig: TokenizedPartner, rec: TokenizedPartner, state: ModelState) -> Tensor:
    _check_partners(lig, rec)
    pooled = T.concat([hierarchical_partner(lig, state), hierarchical_partner(rec, state)], axis=0)
    return mlp_forward(pooled, state.params)


def forward_pad(lig: TokenizedPartner, rec: TokenizedPartner, state: ModelState) -> Tensor:
    _check_partners(lig, rec)
    heads = state.arch_cfg.mha_heads
    e_lig = embed_partner_concat(lig, state)
    e_rec = embed_partner_concat(rec, state)
    a_lig = mha_cross_attention(e_lig, e_rec, state.params, heads)
    a_rec = mha_cross_attention(e_rec, e_lig, state.params, heads)
    w = state.params["pool1.w"]
    pooled = attention_pool(e_lig + a_lig, w) + attention_pool(e_rec + a_rec, w)
    return mlp_forward(pooled, state.params)


FORWARDS = {"EC": forward_ec, "SC": forward_sc, "HP": forward_hp, "PAD": forward_pad}


def forward(lig: TokenizedPartner, rec: TokenizedPartner, state: ModelState) -> Tensor:
    return FORWARDS[state.arch_cfg.arch](lig, rec, state)


def sequence_ids(entry_id: str, n_lig: int, n_rec: int) -> list[str]:
    """Every embedding id the four architectures may request for one entry."""
    ids = [f"{entry_id}/pair/concat"]
    for partner, n in (("lig", n_lig), ("rec", n_rec)):
        ids.append(f"{entry_id}/{partner}/concat")
        ids.extend(f"{entry_id}/{partner}/chain{i}" for i in range(n))
    return ids


# ---------------------------------------------------------------------------
# embedding interchange file: b"PPIE", u32 version=1, u32 e_dim, u64 count;
# per record: u32 id length, utf-8 id, u32 seq_len, seq_len*e_dim f32 (LE, row-major)

EMBEDDING_MAGIC = b"PPIE"
EMBEDDING_VERSION = 1


class EmbeddingFileError(ValueError):
    pass


def write_embeddings(path: str | Path, table: Mapping[str, np.ndarray]) -> None:
    dims = {np.asarray(a).shape[1] for a in table.values()}
    if len(dims) > 1:
        raise EmbeddingFileError(f"inconsistent e_dim across records: {sorted(dims)}")
    e_dim = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<IIQ", EMBEDDING_VERSION, e_dim, len(table)))
        for key, arr in table.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = key.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.shape[0]))
            fh.write(arr.tobytes())


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != EMBEDDING_MAGIC:
        raise EmbeddingFileError("bad magic")
    if len(data) < 20:
        raise EmbeddingFileError("truncated header")
    version, e_dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != EMBEDDING_VERSION:
        raise EmbeddingFileError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 20
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            key = data[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (seq_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            size = seq_len * e_dim * 4
            if pos + size > len(data):
                raise EmbeddingFileError(f"truncated payload for {key}")
            out[key] = np.frombuffer(data, dtype="<f4", count=seq_len * e_dim, offset=pos).reshape(seq_len, e_dim).copy()
            pos += size
    except struct.error:
        raise EmbeddingFileError("truncated record header") from None
    if pos != len(data):
        raise EmbeddingFileError("trailing bytes after last record (inconsistent e_dim?)")
    return out
