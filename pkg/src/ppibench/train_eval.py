"""Training harness and regression metrics.

Training minimises per-entry squared error with Adam, a linear warmup/decay
schedule and gradient accumulation. After every epoch the model is scored on
validation Spearman; the best epoch so far is kept and the run stops once
``patience`` epochs pass without a strict improvement.

Undefined correlations (fewer than two points, or no variance) come back as
NaN rather than raising, so a degenerate early epoch never kills a run.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .curation import CuratedEntry
from .heads import ArchitectureConfig, EmbedderConfig, ModelState, TokenizedPartner, forward
from .optim import AdamState, adam_step, write_checkpoint

UNDEFINED = float("nan")


def is_undefined(value: float) -> bool:
    return isinstance(value, float) and math.isnan(value)


# ---------------------------------------------------------------------------
# metrics


def _paired(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    return p, t


def mse_loss(pred, target) -> float:
    p, t = _paired(pred, target)
    if p.size == 0:
        raise ValueError("mse_loss needs at least one value")
    return float(np.mean((p - t) ** 2))


def rmse(pred, target) -> float:
    return math.sqrt(mse_loss(pred, target))


def pearson(x, y) -> float:
    """Sample correlation from centred 64-bit sums; NaN when undefined."""
    x, y = _paired(x, y)
    if x.size < 2:
        return UNDEFINED
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return UNDEFINED
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    x, y = _paired(x, y)
    if x.size < 2:
        return UNDEFINED
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


@dataclass
class MetricsReport:
    spearman: float
    pearson: float
    rmse: float
    n: int

    @property
    def undefined(self) -> list[str]:
        return [k for k in ("spearman", "pearson") if is_undefined(getattr(self, k))]

    def to_dict(self) -> dict:
        # JSON has no NaN; undefined correlations are written as null
        d = asdict(self)
        for k in self.undefined:
            d[k] = None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> MetricsReport:
        def opt(v):
            return UNDEFINED if v is None else float(v)

        return cls(opt(d["spearman"]), opt(d["pearson"]), float(d["rmse"]), int(d["n"]))


def metrics(pred, target) -> MetricsReport:
    p, t = _paired(pred, target)
    if p.size == 0:
        raise ValueError("cannot score an empty split")
    return MetricsReport(spearman(p, t), pearson(p, t), rmse(p, t), int(p.size))


def aggregate(reports: Sequence[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Per metric (mean, sample sd) across runs; sd is NaN for a single run."""
    if not reports:
        raise ValueError("nothing to aggregate")
    out = {}
    for key in ("spearman", "pearson", "rmse"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else UNDEFINED
        out[key] = (float(np.mean(vals)), sd)
    return out


# ---------------------------------------------------------------------------
# data


@dataclass
class Example:
    entry_id: str
    lig: TokenizedPartner
    rec: TokenizedPartner
    pkd: float

    @classmethod
    def from_entry(cls, e: CuratedEntry) -> Example:
        return cls(
            e.entry_id,
            TokenizedPartner.from_sequences(e.ligand_seqs, f"{e.entry_id}/lig"),
            TokenizedPartner.from_sequences(e.receptor_seqs, f"{e.entry_id}/rec"),
            float(e.pkd),
        )


def examples_from_entries(entries: Iterable[CuratedEntry]) -> list[Example]:
    return [Example.from_entry(e) for e in entries]


HYDROPHOBIC = "AILMFVW"
_POLAR = "CDEGHKNPQRSTY"


def synthetic_target(ligand_seqs: Sequence[str], receptor_seqs: Sequence[str]) -> float:
    """Smooth function of composition: hydrophobic fraction of the complex through tanh."""
    s = "".join(ligand_seqs) + "".join(receptor_seqs)
    frac = sum(c in HYDROPHOBIC for c in s) / len(s)
    return 6.0 + 2.5 * math.tanh(4.0 * (frac - 0.4))


def synthetic_entries(
    n: int,
    seed: int = 0,
    chain_length: tuple[int, int] = (12, 24),
    max_chains: int = 2,
) -> list[CuratedEntry]:
    """Random complexes whose pkd is ``synthetic_target`` of their sequences.

    Every chain of an entry has the same length and both partners have the
    same number of chains, so the per-partner, per-chain and whole-complex
    averages the four architectures compute all see the same composition.
    Each partner draws its own hydrophobic propensity to spread the targets.
    """
    rng = np.random.default_rng(seed)
    hyd = np.array(list(HYDROPHOBIC))
    pol = np.array(list(_POLAR))

    def chain(p: float, length: int) -> str:
        is_h = rng.random(length) < p
        return "".join(np.where(is_h, rng.choice(hyd, length), rng.choice(pol, length)))

    out = []
    for i in range(n):
        length = int(rng.integers(chain_length[0], chain_length[1] + 1))
        n_chains = int(rng.integers(1, max_chains + 1))
        partners = []
        for _ in range(2):
            p = float(rng.uniform(0.05, 0.75))
            partners.append(tuple(chain(p, length) for _ in range(n_chains)))
        lig, rec = partners
        out.append(CuratedEntry(f"SYN{i:05d}", f"S{i:05d}", lig, rec, synthetic_target(lig, rec), "synthetic"))
    return out


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 30
    patience: int = 5
    base_lr: float = 5e-4
    warmup_steps: int = 1000
    grad_accum: int = 32
    per_step_batch: int = 1
    seeds: tuple[int, ...] = (7, 8, 9)
    # start the output bias at the mean training target
    init_output_bias: bool = True

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("need 0 < patience < max_epochs")
        if self.grad_accum < 1 or self.per_step_batch < 1:
            raise ValueError("grad_accum and per_step_batch must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.per_step_batch * self.grad_accum


@dataclass
class Checkpoint:
    epoch: int
    snapshot: dict[str, np.ndarray]
    val_spearman: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_spearman: float
    val_pearson: float
    val_rmse: float
    lr: float
    steps: int

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("val_spearman", "val_pearson"):
            if is_undefined(d[k]):
                d[k] = None
        return json.dumps(d)


class EarlyStopper:
    """Best-so-far tracking with strict improvement; NaN never improves."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch: int | None = None
        self.stale = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        s = -math.inf if is_undefined(score) else score
        if self.best_epoch is None or s > self.best:
            self.best, self.best_epoch, self.stale = s, epoch, 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False


def predict(state: ModelState, examples: Sequence[Example]) -> np.ndarray:
    return np.array([float(forward(ex.lig, ex.rec, state).data) for ex in examples], dtype=np.float64)


def evaluate(state: ModelState, examples: Sequence[Example]) -> MetricsReport:
    if not examples:
        raise ValueError("cannot evaluate an empty split")
    return metrics(predict(state, examples), [ex.pkd for ex in examples])


def build_model(
    embedder_cfg: EmbedderConfig,
    arch_cfg: ArchitectureConfig,
    cfg: TrainConfig,
    seed: int,
    train: Sequence[Example],
    embedding_table: Mapping[str, np.ndarray] | None = None,
) -> ModelState:
    state = ModelState.init(embedder_cfg, arch_cfg, seed=seed, embedding_table=embedding_table)
    if cfg.init_output_bias and train:
        state.params["mlp.b2"].data[...] = np.mean([ex.pkd for ex in train])
    return state


def train_loop(
    state: ModelState,
    train: Sequence[Example],
    val: Sequence[Example],
    cfg: TrainConfig,
    seed: int,
    validate: Callable[[ModelState, Sequence[Example]], MetricsReport] = evaluate,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    if not train or not val:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(seed)
    params = state.trainable()
    micro_per_epoch = math.ceil(len(train) / cfg.per_step_batch)
    steps_per_epoch = math.ceil(micro_per_epoch / cfg.grad_accum)
    opt = AdamState(
        base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps, total_steps=steps_per_epoch * cfg.max_epochs
    )
    stopper = EarlyStopper(cfg.patience)
    result: TrainResult | None = None
    history: list[EpochRecord] = []
    lr = 0.0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        accum: dict[str, np.ndarray] = {}
        pending = 0
        total_loss = 0.0
        for start in range(0, len(order), cfg.per_step_batch):
            batch = [train[i] for i in order[start : start + cfg.per_step_batch]]
            with T.Tape() as tape:
                loss = None
                for ex in batch:
                    d = forward(ex.lig, ex.rec, state) - ex.pkd
                    loss = d * d if loss is None else loss + d * d
                loss = loss * (1.0 / len(batch))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, step {opt.step}, entry {batch[0].entry_id}"
                )
            total_loss += value * len(batch)
            grads = T.backward(tape, loss, params)
            for k, g in grads.items():
                if k in accum:
                    accum[k] += g
                else:
                    accum[k] = g.astype(np.float64)
            pending += 1
            if pending == cfg.grad_accum:
                lr = adam_step(opt, params, accum, pending)
                accum, pending = {}, 0
        if pending:
            lr = adam_step(opt, params, accum, pending)

        report = validate(state, val)
        rec = EpochRecord(
            epoch, total_loss / len(train), report.spearman, report.pearson, report.rmse, lr, opt.step
        )
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        improved, stop = stopper.update(epoch, report.spearman)
        if improved:
            result = TrainResult(Checkpoint(epoch, state.snapshot(), report.spearman))
        if stop:
            result.stopped_early = True
            break

    result.history = history
    return result


def restore(state: ModelState, ckpt: Checkpoint) -> ModelState:
    state.load(ckpt.snapshot, dtype=state.dtype)
    return state


def write_run(
    run_dir: str | Path,
    result: TrainResult,
    reports: Mapping[str, MetricsReport],
    extra: Mapping | None = None,
) -> None:
    """``history.jsonl``, ``checkpoint.ppib`` and ``report.json`` under ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "history.jsonl").write_text("".join(r.to_json() + "\n" for r in result.history))
    write_checkpoint(run_dir / "checkpoint.ppib", result.best.snapshot)
    body = {
        "best_epoch": result.best.epoch,
        "best_val_spearman": None if is_undefined(result.best.val_spearman) else result.best.val_spearman,
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
        "splits": {k: r.to_dict() for k, r in reports.items()},
    }
    if extra:
        body.update(extra)
    (run_dir / "report.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
