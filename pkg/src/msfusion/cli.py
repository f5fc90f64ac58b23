"""Command-line entry point.

Every numeric setting lives in a JSON config file; flags only pick the
command, paths, seed, worker count and strategy. Each run writes the fully
resolved config next to its outputs so it can be replayed exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .data import (
    ArrayDataset,
    Study,
    SynthParams,
    load_studies,
    read_manifest,
    read_mvol,
    stratified_kfold,
    synth_dataset,
    write_manifest,
    write_mvol,
    write_synth,
)
from .errors import ConfigError, DataError, FusionError
from .eval import FoldResult, Schedule, compare_models, cross_validate, dumps, grid_search, metrics_csv, train_model
from .fusiongraph import enumerate_fusions, verify_against_network
from .nets import ModelConfig, build_network, save_checkpoint
from .preprocess import TARGET_SPACING, preprocess_study

log = logging.getLogger("msfusion")

RESOLVED_NAME = "config.resolved.json"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    manifest: str | None = None
    preprocessed: bool = False
    synth: SynthParams | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    grid: dict = field(default_factory=lambda: {"stages": [1, 2, 3, 4, 5], "blocks_per_stage": [1, 2, 3, 4, 5]})
    k: int = 5
    fold_seed: int | None = None
    fold: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    target_spacing: tuple[float, float, float] = TARGET_SPACING
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "manifest": self.manifest,
            "preprocessed": self.preprocessed,
            "synth": None if self.synth is None else self.synth.to_dict(),
            "model": self.model.to_dict(),
            "grid": {k: list(v) for k, v in self.grid.items()},
            "k": self.k,
            "fold_seed": self.fold_seed,
            "fold": self.fold,
            "schedule": self.schedule.to_dict(),
            "target_spacing": list(self.target_spacing),
            "workers": self.workers,
        }


_TOP_KEYS = set(ExperimentConfig.__dataclass_fields__)


def _section(raw: dict, key: str, cls):
    d = raw.get(key)
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {key!r} section: {exc}") from exc


def resolve_config(raw: dict, base_dir: Path, seed=None, workers=None, strategy=None) -> ExperimentConfig:
    """Expand defaults and apply flag overrides. A seed is mandatory."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = raw.get("seed") if seed is None else seed
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    model_raw = dict(raw.get("model") or {})
    model_raw.setdefault("seed", seed)
    if strategy is not None:
        model_raw["strategy"] = strategy
    model = _section({"model": model_raw}, "model", ModelConfig)
    synth = None
    if raw.get("synth") is not None:
        synth_raw = dict(raw["synth"])
        synth_raw.setdefault("seed", seed)
        synth = _section({"synth": synth_raw}, "synth", SynthParams)
    manifest = raw.get("manifest")
    if manifest is not None:
        manifest = str((base_dir / manifest).resolve())
    schedule = _section(raw, "schedule", Schedule) or Schedule()
    grid = raw.get("grid") or ExperimentConfig.__dataclass_fields__["grid"].default_factory()
    if set(grid) != {"stages", "blocks_per_stage"}:
        raise ConfigError("grid needs exactly 'stages' and 'blocks_per_stage' lists")
    cfg = ExperimentConfig(
        seed=seed,
        manifest=manifest,
        preprocessed=bool(raw.get("preprocessed", False)),
        synth=synth,
        model=model,
        grid={k: [int(v) for v in grid[k]] for k in ("stages", "blocks_per_stage")},
        k=int(raw.get("k", 5)),
        fold_seed=int(raw["fold_seed"]) if raw.get("fold_seed") is not None else seed,
        fold=int(raw.get("fold", 0)),
        schedule=schedule,
        target_spacing=tuple(float(s) for s in raw.get("target_spacing", TARGET_SPACING)),
        workers=int(raw.get("workers", 1) if workers is None else workers),
    )
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if not 0 <= cfg.fold < cfg.k:
        raise ConfigError(f"fold {cfg.fold} outside [0, {cfg.k})")
    return cfg


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    return resolve_config(raw, path.parent, **overrides)


def _need_source(cfg: ExperimentConfig) -> None:
    if (cfg.manifest is None) == (cfg.synth is None):
        raise ConfigError("config needs exactly one dataset source: 'manifest' or 'synth'")
    if cfg.manifest is not None and not Path(cfg.manifest).exists():
        raise ConfigError(f"manifest not found: {cfg.manifest}")


def load_dataset(cfg: ExperimentConfig) -> ArrayDataset:
    _need_source(cfg)
    shape = cfg.model.input_shape
    if cfg.synth is not None:
        return synth_dataset(cfg.synth, shape)
    return load_studies(read_manifest(cfg.manifest), shape, preprocessed=cfg.preprocessed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _freeze(cfg: ExperimentConfig, out: Path) -> None:
    (out / RESOLVED_NAME).write_text(dumps(cfg.to_dict()))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, out: Path, args) -> int:
    if cfg.synth is None:
        raise ConfigError("synth needs a 'synth' section in the config")
    studies = write_synth(cfg.synth, out)
    log.info("wrote %d synthetic studies to %s", len(studies), out)
    return 0


def cmd_preprocess(cfg: ExperimentConfig, out: Path, args) -> int:
    if cfg.manifest is None:
        raise ConfigError("preprocess needs a 'manifest' in the config")
    _need_source(cfg)
    vol_dir = out / "volumes"
    vol_dir.mkdir(exist_ok=True)
    written = []
    for s in read_manifest(cfg.manifest):
        if s.mask_path is None:
            raise DataError(f"study {s.id}: no mask_path in manifest")
        pair = preprocess_study(
            read_mvol(s.ct_path), read_mvol(s.pet_path), read_mvol(s.mask_path), s.meta, cfg.model.input_shape, cfg.target_spacing
        )
        paths = {}
        for kind, v in (("ct", pair.ct), ("pet", pair.pet), ("mask", pair.mask)):
            paths[kind] = f"volumes/{s.id}_{kind}.mvol"
            write_mvol(v, out / paths[kind])
        written.append(Study(s.id, s.label, paths["ct"], paths["pet"], paths["mask"], s.meta))
    write_manifest(written, out / "manifest.json")
    log.info("preprocessed %d studies into %s", len(written), out)
    return 0


def _plan(cfg: ExperimentConfig, ds: ArrayDataset):
    plan = stratified_kfold(ds.all_labels(), cfg.k, cfg.fold_seed)
    return plan


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    ds = load_dataset(cfg)
    plan = _plan(cfg, ds)
    net, res = train_model(cfg.model, ds, plan.splits(cfg.fold), cfg.schedule, cfg.fold)
    save_checkpoint(net, out / f"fold{cfg.fold}.fnet")
    (out / f"fold{cfg.fold}.json").write_text(dumps(res.to_dict()))
    (out / "folds.json").write_text(dumps(plan.to_dict()))
    print(f"fold {cfg.fold}: auc {res.metrics.auc:.4f} gmean {res.metrics.gmean:.4f} accuracy {res.metrics.accuracy:.4f}")
    return 0


def write_cv_outputs(cv, plan, out: Path) -> None:
    for i, (net, res) in enumerate(zip(cv.nets, cv.folds)):
        save_checkpoint(net, out / f"fold{i}.fnet")
    summary = {m: {"mean": s[0], "std": s[1]} for m, s in cv.summary().items()}
    results = {
        "model": cv.cfg.to_dict(),
        "folds": [f.to_dict() for f in cv.folds],
        "summary": summary,
        "plan": plan.to_dict(),
    }
    (out / "results.json").write_text(dumps(results))
    rows = [(cv.cfg.strategy, f) for f in cv.folds]
    if cv.cfg.strategy == "late":
        rows += [(f"late/{b}", f.branch(b)) for f in cv.folds for b in ("ct", "pet")]
    (out / "metrics.csv").write_text(metrics_csv(rows))


def cmd_cv(cfg: ExperimentConfig, out: Path, args) -> int:
    ds = load_dataset(cfg)
    plan = _plan(cfg, ds)
    cv = cross_validate(cfg.model, ds, plan, cfg.schedule, cfg.workers)
    write_cv_outputs(cv, plan, out)
    for m, (mean, std) in cv.summary().items():
        print(f"{m}: {mean:.4f} ({std:.4f})")
    return 0


def cmd_gridsearch(cfg: ExperimentConfig, out: Path, args) -> int:
    ds = load_dataset(cfg)
    plan = _plan(cfg, ds)
    ranked = grid_search(ds, plan, cfg.grid["blocks_per_stage"], cfg.grid["stages"], cfg.model, cfg.schedule, cfg.workers)
    (out / "ranking.json").write_text(dumps([e.to_dict() for e in ranked]))
    for r, e in enumerate(ranked, 1):
        print(f"{r}. L={e.stages} N={e.blocks_per_stage} val auc {e.val_auc:.4f} val gmean {e.val_gmean:.4f} params {e.parameters}")
    return 0


def _load_results(spec: str) -> tuple[str, list[FoldResult]]:
    """``run_dir`` or ``run_dir#ct`` / ``run_dir#pet`` for one late-fusion branch."""
    path, _, branch = spec.partition("#")
    f = Path(path) / "results.json"
    if not f.exists():
        raise ConfigError(f"no results.json in {path}")
    d = json.loads(f.read_text())
    folds = [FoldResult.from_dict(x) for x in d["folds"]]
    name = d["model"]["strategy"]
    if branch:
        if branch not in ("ct", "pet") or not folds[0].branch_probs:
            raise ConfigError(f"{spec}: branch selection needs a late-fusion run and 'ct' or 'pet'")
        folds = [x.branch(branch) for x in folds]
        name = f"unimodal_{branch}"
    return name, folds


def cmd_compare(args) -> int:
    if not args.a or not args.b:
        raise ConfigError("compare needs --a and --b run directories")
    name_a, a = _load_results(args.a)
    name_b, b = _load_results(args.b)
    if [f.ids for f in a] != [f.ids for f in b]:
        raise DataError("the two runs were not evaluated on the same fold plan")
    rep = compare_models(a, b, name_a, name_b)
    print(rep.table())
    if args.out:
        out = _out_dir(args)
        (out / "comparison.json").write_text(dumps(rep.to_dict()))
        (out / "comparison.txt").write_text(rep.table() + "\n")
    return 0


def cmd_verify_graph(cfg: ExperimentConfig, out: Path, args) -> int:
    model = cfg.model.replace(strategy="multistage")
    g = enumerate_fusions(model.stages, model.blocks_per_stage)
    report = verify_against_network(g, build_network(model))
    (out / "graph.json").write_text(g.to_json())
    (out / "verification.json").write_text(dumps(report.to_dict()))
    print(f"{report.observed_events} events traced, {len(report.mismatches)} mismatches")
    for m in report.mismatches:
        print("  " + m)
    return 0 if report.ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "cv": cmd_cv,
    "gridsearch": cmd_gridsearch,
    "verify-graph": cmd_verify_graph,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msfusion", description="Multi-stage fusion CNN experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--workers", type=int, help="parallel folds")
        sp.add_argument("--strategy", help="overrides model.strategy")
        sp.add_argument("-v", "--verbose", action="store_true")
    sp = sub.add_parser("compare")
    sp.add_argument("--a", required=True, help="run directory (append #ct or #pet for a late-fusion branch)")
    sp.add_argument("--b", required=True)
    sp.add_argument("--out", help="directory for comparison.json")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return 0 if exc.code in (0, None) else ConfigError.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "compare":
            return cmd_compare(args)
        cfg = load_config(args.config, seed=args.seed, workers=args.workers, strategy=args.strategy)
        out = _out_dir(args)
        _freeze(cfg, out)
        return COMMANDS[args.command](cfg, out, args)
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
