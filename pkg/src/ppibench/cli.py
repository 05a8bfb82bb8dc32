"""``ppibench`` command line: curate | cluster | split | embed-mock | train | eval | verify.

Every stage reads its inputs from, and writes its outputs to, a work
directory by fixed file names, so the stages chain without extra flags:

    curated.jsonl, curation_report.json      <- curate
    clusters.json                            <- cluster
    splits.json, {train,val,test}.jsonl      <- split
    embeddings.ppie                          <- embed-mock
    runs/<arch>-<paradigm>-seed<k>/          <- train
    eval/<arch>-<paradigm>.json              <- eval

Settings come from dataclass defaults, then an optional TOML file, then
command-line flags. Logs are JSON lines on stderr; a failure ends with one
JSON error line and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .curation import CuratedEntry, CurationConfig, check_curated, curate, parse_entry_table
from .heads import (
    ARCHITECTURES,
    ArchitectureConfig,
    EmbedderConfig,
    ModelState,
    load_embeddings,
    mock_embed,
    sequence_ids,
    tokenize,
    with_eos,
    write_embeddings,
)
from .optim import read_checkpoint
from .pdb_ingest import dump_chains, load_pdb
from .seqid_cluster import greedy_cluster
from .splitting import (
    TEST,
    TRAIN,
    VAL,
    SplitAssignment,
    SplitConfig,
    entry_representative_sequence,
    pdb_coherent,
    split_entries,
    verify_no_leakage,
)
from .train_eval import (
    MetricsReport,
    TrainConfig,
    aggregate,
    build_model,
    evaluate,
    examples_from_entries,
    restore,
    synthetic_entries,
    train_loop,
    write_run,
)

CURATED = "curated.jsonl"
CURATION_REPORT = "curation_report.json"
CLUSTERS = "clusters.json"
SPLITS = "splits.json"
EMBEDDINGS = "embeddings.ppie"
RESOLVED = "resolved_config.json"


class PipelineError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Paths:
    entries: str = "entries.csv"
    pdb_dir: str = "pdb"
    workdir: str = "work"
    embeddings: str = ""


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["seeds"] = list(self.train.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        cfg = cls()
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise PipelineError(f"unknown config section(s): {sorted(unknown)}")
        for section, values in d.items():
            cfg = override(cfg, section, values)
        return cfg

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)


def override(cfg: PipelineConfig, section: str, values: dict[str, Any]) -> PipelineConfig:
    """A copy of ``cfg`` with ``values`` replacing fields of one section; None values are skipped."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    current = getattr(cfg, section)
    known = {f.name for f in fields(current)}
    bad = set(values) - known
    if bad:
        raise PipelineError(f"unknown key(s) in [{section}]: {sorted(bad)}")
    try:
        return replace(cfg, **{section: replace(current, **values)})
    except (TypeError, ValueError) as exc:
        raise PipelineError(f"[{section}]: {exc}") from None


def load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise PipelineError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            cfg = PipelineConfig.from_dict(tomllib.load(fh))
    cfg = override(cfg, "paths", {"workdir": args.workdir})
    for section, keys in _FLAG_TARGETS.items():
        cfg = override(cfg, section, {key: getattr(args, dest, None) for dest, key in keys.items()})
    return cfg


# flag dest -> (config section, field); flags left at None do not override
_FLAG_TARGETS = {
    "paths": {"entries": "entries", "pdb_dir": "pdb_dir", "embeddings": "embeddings"},
    "split": {"threshold": "identity_threshold", "train_fraction": "train_target_fraction",
              "min_coverage": "min_coverage", "exact": "exact"},
    "train": {"accum": "grad_accum", "max_epochs": "max_epochs", "patience": "patience",
              "lr": "base_lr", "warmup": "warmup_steps"},
    "embedder": {"e_dim": "e_dim", "embedder_mode": "mode", "l2_normalize": "l2_normalize_rows"},
}


# ---------------------------------------------------------------------------
# logging and files


class Log:
    def __init__(self, stage: str):
        self.stage = stage
        self.t0 = time.monotonic()

    def __call__(self, msg: str, level: str = "info", **extra) -> None:
        rec = {"level": level, "stage": self.stage, "elapsed": round(time.monotonic() - self.t0, 3), "msg": msg}
        rec.update(extra)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr, flush=True)


def require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {path}: run {stage} first")
    return path


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_entries(path: Path) -> list[CuratedEntry]:
    return [CuratedEntry.from_json(line) for line in path.read_text().splitlines() if line.strip()]


def write_entries(path: Path, entries: Sequence[CuratedEntry]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(e.to_json() + "\n" for e in entries))


def write_resolved(cfg: PipelineConfig, dest: Path) -> None:
    write_json(dest / RESOLVED, cfg.to_dict())


# ---------------------------------------------------------------------------
# stages


def cmd_curate(cfg: PipelineConfig, args, log: Log) -> int:
    entries_path, pdb_dir = Path(cfg.paths.entries), Path(cfg.paths.pdb_dir)
    if not entries_path.is_file():
        raise PipelineError(f"entry table not found: {entries_path}")
    if not pdb_dir.is_dir():
        raise PipelineError(f"PDB directory not found: {pdb_dir}")
    raw = parse_entry_table(entries_path)
    log("parsed entry table", rows=len(raw))
    loaded = {}

    def load(pdb_id):
        if pdb_id not in loaded:
            loaded[pdb_id] = load_pdb(pdb_dir, pdb_id)
        return loaded[pdb_id]

    final, report = curate(raw, load, CurationConfig())
    out = cfg.workdir
    write_entries(out / CURATED, final)
    write_json(out / CURATION_REPORT, asdict(report))
    if args.dump_chains:
        (out / "chains.jsonl").write_text("".join(line + "\n" for line in dump_chains(loaded.values())))
    write_resolved(cfg, out)
    for w in report.warnings:
        log(w, level="warning")
    log("curated", final=report.final_count, removed=report.removed_total(), merged=report.merged_duplicates)
    return 0


def cmd_synth(cfg: PipelineConfig, args, log: Log) -> int:
    entries = synthetic_entries(args.n, seed=args.seed)
    write_entries(cfg.workdir / CURATED, entries)
    write_resolved(cfg, cfg.workdir)
    log("wrote synthetic corpus", entries=len(entries))
    return 0


def cmd_cluster(cfg: PipelineConfig, args, log: Log) -> int:
    entries = sorted(read_entries(require(cfg.workdir / CURATED, "curate")), key=lambda e: e.entry_id)
    seqs = [entry_representative_sequence(e) for e in entries]
    clusters = greedy_cluster(seqs, cfg.split.identity_threshold, cfg.split.align_params)
    body = [
        {"representative_id": entries[c.representative].entry_id,
         "member_ids": [entries[m].entry_id for m in c.members]}
        for c in clusters
    ]
    write_json(cfg.workdir / CLUSTERS, body)
    write_resolved(cfg, cfg.workdir)
    log("clustered", entries=len(entries), clusters=len(clusters))
    return 0


def cmd_split(cfg: PipelineConfig, args, log: Log) -> int:
    curated = Path(args.curated) if args.curated else require(cfg.workdir / CURATED, "curate")
    if not curated.is_file():
        raise PipelineError(f"missing {curated}: run curate first")
    entries = read_entries(curated)
    assignment = split_entries(entries, cfg.split)
    out = Path(args.out) if args.out else cfg.workdir / SPLITS
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(assignment.to_json() + "\n")
    by_id = {e.entry_id: e for e in entries}
    for split in (TRAIN, VAL, TEST):
        write_entries(out.parent / f"{split}.jsonl", [by_id[i] for i in assignment.ids(split)])
    write_resolved(cfg, out.parent)
    log("split", purge_moves=assignment.purge_moves, **{k: round(v, 4) for k, v in assignment.stats.items()})
    return 0


def partner_tokens(e: CuratedEntry) -> dict[str, np.ndarray]:
    """Token arrays for every embedding id of one entry."""
    lig = [tokenize(s) for s in e.ligand_seqs]
    rec = [tokenize(s) for s in e.receptor_seqs]
    out = {f"{e.entry_id}/pair/concat": with_eos(lig + rec)}
    for name, chains in (("lig", lig), ("rec", rec)):
        out[f"{e.entry_id}/{name}/concat"] = with_eos(chains)
        for i, c in enumerate(chains):
            out[f"{e.entry_id}/{name}/chain{i}"] = with_eos([c])
    return out


def cmd_embed_mock(cfg: PipelineConfig, args, log: Log) -> int:
    entries = read_entries(require(cfg.workdir / CURATED, "curate"))
    ecfg = replace(cfg.embedder, mode="trainable_mock", l2_normalize_rows=False)
    state = ModelState.init(ecfg, ArchitectureConfig("EC"), seed=args.seed)
    table = {}
    for e in entries:
        toks = partner_tokens(e)
        assert list(toks) == sequence_ids(e.entry_id, len(e.ligand_seqs), len(e.receptor_seqs))
        for key, t in toks.items():
            table[key] = mock_embed(t, ecfg, state.params).data
    dest = Path(cfg.paths.embeddings) if cfg.paths.embeddings else cfg.workdir / EMBEDDINGS
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(dest, table)
    log("wrote embeddings", records=len(table), e_dim=ecfg.e_dim, path=str(dest))
    return 0


def run_name(arch: str, paradigm: str, seed: int) -> str:
    return f"{arch.lower()}-{paradigm}-seed{seed}"


def _embedding_table(cfg: PipelineConfig):
    if cfg.embedder.mode != "frozen_file":
        return None
    path = Path(cfg.paths.embeddings) if cfg.paths.embeddings else cfg.workdir / EMBEDDINGS
    return load_embeddings(require(path, "embed-mock"))


def _split_examples(cfg: PipelineConfig):
    return {
        s: examples_from_entries(read_entries(require(cfg.workdir / f"{s}.jsonl", "split")))
        for s in (TRAIN, VAL, TEST)
    }


def train_one(cfg_dict: dict, arch: str, paradigm: str, seed: int) -> dict:
    """One (arch, paradigm, seed) run; top-level so worker processes can pickle it."""
    cfg = PipelineConfig.from_dict(cfg_dict)
    cfg = override(cfg, "arch", {"arch": arch, "training_paradigm": paradigm})
    log = Log(f"train:{run_name(arch, paradigm, seed)}")
    data = _split_examples(cfg)
    state = build_model(cfg.embedder, cfg.arch, cfg.train, seed, data[TRAIN], _embedding_table(cfg))

    def on_epoch(rec):
        log("epoch", epoch=rec.epoch, train_loss=round(rec.train_loss, 6),
            val_spearman=None if rec.val_spearman != rec.val_spearman else round(rec.val_spearman, 6))

    result = train_loop(state, data[TRAIN], data[VAL], cfg.train, seed, on_epoch=on_epoch)
    restore(state, result.best)
    reports = {s: evaluate(state, ex) for s, ex in data.items() if ex}
    run_dir = cfg.workdir / "runs" / run_name(arch, paradigm, seed)
    write_run(run_dir, result, reports, extra={"arch": cfg.arch.arch, "paradigm": paradigm, "seed": seed})
    write_resolved(cfg, run_dir)
    log("finished", best_epoch=result.best.epoch, epochs=len(result.history))
    return {"run": run_dir.name, "best_epoch": result.best.epoch}


def _runs(cfg: PipelineConfig, args) -> list[tuple[str, str, int]]:
    arches = [a.upper() for a in args.arch] if args.arch else [cfg.arch.arch]
    paradigms = args.paradigm or [cfg.arch.training_paradigm]
    seeds = args.seed or list(cfg.train.seeds)
    for a in arches:
        if a not in ARCHITECTURES:
            raise PipelineError(f"unknown architecture {a!r}")
    return [(a, p, s) for a in arches for p in paradigms for s in seeds]


def cmd_train(cfg: PipelineConfig, args, log: Log) -> int:
    runs = _runs(cfg, args)
    _split_examples(cfg)  # fail before spawning workers
    _embedding_table(cfg)
    write_resolved(cfg, cfg.workdir)
    cfg_dict = cfg.to_dict()
    if args.jobs > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(train_one, *zip(*[(cfg_dict, *r) for r in runs])))
    else:
        results = [train_one(cfg_dict, *r) for r in runs]
    log("trained", runs=[r["run"] for r in results])
    return 0


def cmd_eval(cfg: PipelineConfig, args, log: Log) -> int:
    data = _split_examples(cfg)
    table = _embedding_table(cfg)
    by_group: dict[tuple[str, str], list[tuple[int, dict[str, MetricsReport]]]] = {}
    for arch, paradigm, seed in _runs(cfg, args):
        run_dir = require(cfg.workdir / "runs" / run_name(arch, paradigm, seed), "train")
        run_cfg = PipelineConfig.from_dict(json.loads(require(run_dir / RESOLVED, "train").read_text()))
        state = ModelState(run_cfg.embedder, run_cfg.arch, {}, table)
        state.load(read_checkpoint(require(run_dir / "checkpoint.ppib", "train")))
        reports = {s: evaluate(state, ex) for s, ex in data.items() if ex}
        by_group.setdefault((arch, paradigm), []).append((seed, reports))
    for (arch, paradigm), runs in by_group.items():
        body = {"arch": arch, "paradigm": paradigm, "seeds": [s for s, _ in runs], "per_seed": {}, "aggregate": {}}
        for seed, reports in runs:
            body["per_seed"][str(seed)] = {k: r.to_dict() for k, r in reports.items()}
        for split in runs[0][1]:
            agg = aggregate([r[split] for _, r in runs])
            body["aggregate"][split] = {
                k: {"mean": None if m != m else m, "sd": None if sd != sd else sd} for k, (m, sd) in agg.items()
            }
        write_json(cfg.workdir / "eval" / f"{arch.lower()}-{paradigm}.json", body)
        test = body["aggregate"].get(TEST, {}).get("spearman", {})
        log("evaluated", arch=arch, paradigm=paradigm, test_spearman=test)
    return 0


def cmd_verify(cfg: PipelineConfig, args, log: Log) -> int:
    entries = read_entries(require(cfg.workdir / CURATED, "curate"))
    assignment = SplitAssignment.from_json(require(cfg.workdir / SPLITS, "split").read_text())
    rows: list[tuple[str, bool, str]] = []
    problems = check_curated(entries, args.min_length)
    rows.append(("dataset invariants", not problems, f"{len(problems)} violation(s)"))
    ids = {e.entry_id for e in entries}
    missing = ids - set(assignment.assignment)
    rows.append(("every entry assigned", not missing and set(assignment.assignment) <= ids,
                 f"{len(missing)} unassigned"))
    if not missing:
        rows.append(("pdb coherency", pdb_coherent(assignment, entries), ""))
    leak = verify_no_leakage(assignment, entries, cfg.split)
    rows.append(("no leakage", leak.ok, f"{len(leak.violations)} pair(s), max identity {leak.max_identity:.3f}"))
    frac = assignment.stats.get(TRAIN, 0.0)
    rows.append(("train fraction", frac >= cfg.split.train_target_fraction,
                 f"{frac:.3f} vs target {cfg.split.train_target_fraction}"))
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    for p in problems[:20]:
        log(p, level="warning")
    for h, t, ident in leak.violations[:20]:
        log("leak", level="warning", held_out=h, train=t, identity=round(ident, 4))
    failed = [r[0] for r in rows if not r[1]]
    log("verified", failed=failed)
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing


def _csv(kind):
    def parse(text: str):
        return [kind(x) for x in text.split(",") if x]

    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [paths] [split] [train] [embedder] [arch] sections")
    common.add_argument("--workdir", help="directory for stage inputs and outputs")

    parser = argparse.ArgumentParser(prog="ppibench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(fn=fn)
        return p

    p = add("curate", cmd_curate, "curate the entry table against a PDB directory")
    p.add_argument("--entries", dest="entries")
    p.add_argument("--pdb-dir", dest="pdb_dir")
    p.add_argument("--dump-chains", action="store_true", help="also write chains.jsonl")

    p = add("synth", cmd_synth, "write a synthetic curated corpus (for smoke runs)")
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)

    for name, fn, text in (("cluster", cmd_cluster, "greedy identity clustering"),
                           ("split", cmd_split, "leakage-controlled train/val/test split")):
        p = add(name, fn, text)
        p.add_argument("--threshold", type=float)
        p.add_argument("--min-coverage", dest="min_coverage", type=float)
        p.add_argument("--exact", action="store_true", default=None, help="disable k-mer ordering")
        if name == "split":
            p.add_argument("--train-fraction", dest="train_fraction", type=float)
            p.add_argument("--curated", help=f"input JSONL (default workdir/{CURATED})")
            p.add_argument("--out", help=f"output path (default workdir/{SPLITS})")

    p = add("embed-mock", cmd_embed_mock, "precompute mock per-residue embeddings")
    p.add_argument("--e-dim", dest="e_dim", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embeddings", help=f"output path (default workdir/{EMBEDDINGS})")

    for name, fn, text in (("train", cmd_train, "train (arch x paradigm x seed) runs"),
                           ("eval", cmd_eval, "evaluate trained runs, aggregate over seeds")):
        p = add(name, fn, text)
        p.add_argument("--arch", type=_csv(str), help="comma list of ec, sc, hp, pad")
        p.add_argument("--paradigm", type=_csv(str), help="comma list of finetune, frozen")
        p.add_argument("--seed", type=_csv(int), help="comma list of seeds (default from config)")
        p.add_argument("--e-dim", dest="e_dim", type=int)
        p.add_argument("--embedder-mode", dest="embedder_mode", choices=["trainable_mock", "frozen_file"])
        p.add_argument("--l2-normalize", dest="l2_normalize", action="store_true", default=None)
        p.add_argument("--embeddings", help="embedding file for frozen_file mode")
        if name == "train":
            p.add_argument("--accum", type=int, help="gradient accumulation steps")
            p.add_argument("--max-epochs", dest="max_epochs", type=int)
            p.add_argument("--patience", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--warmup", type=int)
            p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")

    p = add("verify", cmd_verify, "check dataset invariants and split leakage")
    p.add_argument("--min-length", dest="min_length", type=int, default=40)
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-coverage", dest="min_coverage", type=float)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log = Log(args.command)
    try:
        cfg = load_config(args)
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        return args.fn(cfg, args, log)
    except (PipelineError, ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(json.dumps({"level": "error", "stage": args.command, "error": msg}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
