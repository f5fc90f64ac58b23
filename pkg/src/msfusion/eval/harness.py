"""Training loop, cross-validation, grid search and model comparison."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import Adam, lr_at_epoch, no_grad, softmax, weighted_cross_entropy
from ..data import ArrayDataset, FoldPlan, class_weights
from ..errors import ConfigError, DataError, NumericError
from ..nets import ModelConfig, Network, build_network, parameter_count
from .metrics import MetricsRecord, mean_std, wilcoxon_signed_rank

log = logging.getLogger(__name__)

METRICS = ("accuracy", "auc", "gmean")


@dataclass(frozen=True)
class Schedule:
    epochs: int = 100
    lr: float = 1e-3
    decay_step: int = 25
    decay_factor: float = 0.1
    batch_size: int = 8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.decay_step < 1:
            raise ConfigError(f"invalid schedule {self}")
        if not self.lr > 0 or not 0 < self.decay_factor <= 1:
            raise ConfigError(f"invalid learning-rate settings in {self}")

    def lr_at(self, epoch: int) -> float:
        return lr_at_epoch(self.lr, epoch, self.decay_step, self.decay_factor)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FoldResult:
    fold: int
    ids: list[str]
    labels: list[int]
    probs: list[float]
    metrics: MetricsRecord | None
    val_metrics: MetricsRecord
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    # late fusion keeps each sub-network's own test probabilities
    branch_probs: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = None if self.metrics is None else self.metrics.to_dict()
        d["val_metrics"] = self.val_metrics.to_dict()
        d["predictions"] = [
            {"id": i, "label": y, "prob": p} for i, y, p in zip(self.ids, self.labels, self.probs)
        ]
        for k in ("ids", "labels", "probs"):
            d.pop(k)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        preds = d["predictions"]
        return cls(
            fold=d["fold"],
            ids=[p["id"] for p in preds],
            labels=[p["label"] for p in preds],
            probs=[p["prob"] for p in preds],
            metrics=None if d["metrics"] is None else MetricsRecord(**d["metrics"]),
            val_metrics=MetricsRecord(**d["val_metrics"]),
            curve=d.get("curve", []),
            best_epoch=d.get("best_epoch", 0),
            branch_probs=d.get("branch_probs", {}),
        )

    def branch(self, name: str) -> "FoldResult":
        """Test-split view of one late-fusion sub-network as a standalone result."""
        probs = self.branch_probs[name]
        return FoldResult(
            self.fold,
            list(self.ids),
            list(self.labels),
            list(probs),
            MetricsRecord.from_predictions(probs, self.labels),
            self.val_metrics,
        )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, *keys])


def predict(net: Network, dataset: ArrayDataset, idx, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray, dict]:
    """Class-1 probabilities, argmax predictions and (late fusion) per-branch probabilities."""
    net.eval()
    probs, preds = [], []
    branch: dict[str, list[np.ndarray]] = {"ct": [], "pet": []}
    idx = list(idx)
    with no_grad():
        for start in range(0, len(idx), batch_size):
            ct, pet, _ = dataset.batch(idx[start : start + batch_size])
            if net.strategy == "late":
                l_ct, l_pet = net.branch_logits(ct, pet)
                p_ct = softmax(l_ct.data.astype(np.float64))
                p_pet = softmax(l_pet.data.astype(np.float64))
                p = 0.5 * (p_ct + p_pet)
                branch["ct"].append(p_ct[:, 1])
                branch["pet"].append(p_pet[:, 1])
            else:
                p = softmax(net.forward(ct, pet).data.astype(np.float64))
            probs.append(p[:, 1])
            preds.append(np.argmax(p, axis=1))
    extra = {k: np.concatenate(v) for k, v in branch.items() if v}
    return np.concatenate(probs), np.concatenate(preds), extra


def _losses(net: Network, ct, pet, y, weights) -> list:
    if net.strategy == "late":
        l_ct, l_pet = net.branch_logits(ct, pet)
        return [weighted_cross_entropy(l_ct, y, weights), weighted_cross_entropy(l_pet, y, weights)]
    return [weighted_cross_entropy(net.forward(ct, pet), y, weights)]


def _optimizers(net: Network, schedule: Schedule, weights) -> list[Adam]:
    # late fusion: each sub-network gets its own optimizer
    parts = [net.ct, net.pet] if net.strategy == "late" else [net]
    return [Adam(m.parameters(), lr=schedule.lr, class_weights=weights) for m in parts]


def train_model(
    cfg: ModelConfig,
    dataset: ArrayDataset,
    split: tuple[Sequence[int], Sequence[int], Sequence[int]],
    schedule: Schedule = Schedule(),
    fold: int = 0,
    evaluate_test: bool = True,
) -> tuple[Network, FoldResult]:
    """Train on ``split[0]``, track ``split[1]`` each epoch, score ``split[2]`` once at the end.

    The test indices are withheld from the dataset for the whole training
    phase. With ``evaluate_test=False`` they are never touched.
    """
    train_idx, val_idx, test_idx = (list(map(int, s)) for s in split)
    if set(train_idx) & set(val_idx) or set(train_idx) & set(test_idx) or set(val_idx) & set(test_idx):
        raise DataError("train, validation and test splits overlap")
    if not train_idx or not val_idx:
        raise DataError("training and validation splits must be non-empty (use k >= 3)")
    if dataset.volume_shape != tuple(cfg.input_shape):
        raise ConfigError(f"dataset volumes {dataset.volume_shape} != model input {tuple(cfg.input_shape)}")
    net = build_network(cfg)
    rng = _rng(cfg.seed, fold)
    curve = []
    with dataset.withheld(test_idx):
        weights = class_weights(dataset.labels(train_idx))
        opts = _optimizers(net, schedule, weights)
        val_labels = dataset.labels(val_idx)
        for epoch in range(schedule.epochs):
            lr = schedule.lr_at(epoch)
            for opt in opts:
                opt.lr = lr
            net.train()
            order = rng.permutation(train_idx)
            total = 0.0
            for b, start in enumerate(range(0, len(order), schedule.batch_size)):
                idx = order[start : start + schedule.batch_size]
                ct, pet, y = dataset.batch(idx)
                try:
                    losses = _losses(net, ct, pet, y, weights)
                    for loss in losses:
                        loss.backward()
                except NumericError as exc:
                    raise NumericError(f"fold {fold} epoch {epoch} batch {b}: {exc}") from exc
                value = sum(loss.item() for loss in losses) / len(losses)
                if not np.isfinite(value):
                    raise NumericError(f"fold {fold} epoch {epoch} batch {b}: loss is {value}")
                for opt in opts:
                    opt.step()
                    opt.zero_grad()
                total += value * len(idx)
            probs, preds, _ = predict(net, dataset, val_idx, schedule.batch_size)
            vm = MetricsRecord.from_predictions(probs, val_labels, preds)
            curve.append(
                {"epoch": epoch, "lr": lr, "loss": total / len(order), "val_auc": vm.auc, "val_gmean": vm.gmean, "val_accuracy": vm.accuracy}
            )
            log.info("fold %d epoch %d loss %.4f val auc %.3f", fold, epoch, total / len(order), vm.auc)
    best = max(range(len(curve)), key=lambda e: (curve[e]["val_auc"], -e))
    result = FoldResult(fold, [], [], [], None, vm, curve, best)
    if evaluate_test:
        probs, preds, extra = predict(net, dataset, test_idx, schedule.batch_size)
        labels = dataset.labels(test_idx)
        result.ids = [dataset.ids[i] for i in test_idx]
        result.labels = [int(v) for v in labels]
        result.probs = [float(p) for p in probs]
        result.metrics = MetricsRecord.from_predictions(probs, labels, preds)
        result.branch_probs = {k: [float(p) for p in v] for k, v in extra.items()}
    return net, result


# ---------------------------------------------------------------------------
# cross-validation and grid search
# ---------------------------------------------------------------------------


@dataclass
class CVResult:
    cfg: ModelConfig
    folds: list[FoldResult]
    nets: list[Network] = field(default_factory=list, repr=False)

    def summary(self, split: str = "test") -> dict[str, tuple[float, float]]:
        """Per-metric (mean, sample std) over folds in ascending fold order."""
        recs = [f.metrics if split == "test" else f.val_metrics for f in self.folds]
        if any(r is None for r in recs):
            raise DataError(f"no {split} metrics recorded")
        return {m: mean_std([getattr(r, m) for r in recs]) for m in METRICS}

    def branch(self, name: str) -> "CVResult":
        return CVResult(self.cfg.replace(strategy=f"unimodal_{name}"), [f.branch(name) for f in self.folds])


def _fold_job(args):
    cfg, dataset, split, schedule, fold, evaluate_test = args
    return train_model(cfg, dataset, split, schedule, fold, evaluate_test)


def _run_folds(jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) == 1:
        return [_fold_job(j) for j in jobs]
    # each fold owns its network and RNG, so results do not depend on scheduling
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fold_job, jobs))


def cross_validate(
    cfg: ModelConfig,
    dataset: ArrayDataset,
    plan: FoldPlan,
    schedule: Schedule = Schedule(),
    workers: int = 1,
    evaluate_test: bool = True,
) -> CVResult:
    if len(dataset) != sum(len(g) for g in plan.groups):
        raise DataError("fold plan does not match the dataset size")
    jobs = [(cfg, dataset, plan.splits(i), schedule, i, evaluate_test) for i in range(plan.k)]
    out = _run_folds(jobs, workers)
    return CVResult(cfg, [r for _, r in out], [n for n, _ in out])


@dataclass(frozen=True)
class GridEntry:
    stages: int
    blocks_per_stage: int
    val_auc: float
    val_gmean: float
    parameters: int

    def to_dict(self) -> dict:
        return asdict(self)


def grid_search(
    dataset: ArrayDataset,
    plan: FoldPlan,
    n_range: Sequence[int],
    l_range: Sequence[int],
    base: ModelConfig,
    schedule: Schedule = Schedule(),
    workers: int = 1,
) -> list[GridEntry]:
    """Rank every (L, N) by mean validation AUC, then Gmean, then fewer parameters.

    Runs on validation splits only; the per-fold test groups stay withheld.
    """
    for v in list(n_range) + list(l_range):
        if not 1 <= v <= 5:
            raise ConfigError(f"grid values must lie in [1, 5], got {v}")
    entries = []
    for stages in l_range:
        for blocks in n_range:
            cfg = base.replace(stages=stages, blocks_per_stage=blocks)
            cv = cross_validate(cfg, dataset, plan, schedule, workers, evaluate_test=False)
            s = cv.summary("validation")
            entries.append(GridEntry(stages, blocks, s["auc"][0], s["gmean"][0], parameter_count(build_network(cfg))))
    return sorted(entries, key=lambda e: (-e.val_auc, -e.val_gmean, e.parameters, e.stages, e.blocks_per_stage))


# ---------------------------------------------------------------------------
# comparison and reporting
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    name_a: str
    name_b: str
    per_fold: dict[str, list[tuple[float, float]]]
    summary_a: dict[str, tuple[float, float]]
    summary_b: dict[str, tuple[float, float]]
    tests: dict[str, dict]

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        """Mean (std) per model and metric, then the paired test per metric."""
        rows = [f"{'Model':<20}" + "".join(f"{m.capitalize():>16}" for m in METRICS)]
        for name, s in ((self.name_a, self.summary_a), (self.name_b, self.summary_b)):
            cells = "".join(f"{_fmt(*s[m]):>16}" for m in METRICS)
            rows.append(f"{name:<20}{cells}")
        for m, t in self.tests.items():
            rows.append(f"Wilcoxon {m}: W = {t['statistic']:g}, p = {t['p_value']:.4f} (n = {t['n']})")
        return "\n".join(rows)


def _fmt(mean: float, std: float) -> str:
    return f"{mean:.3f} ({std:.3f})".replace("0.", ".")


def compare_models(a: Sequence[FoldResult], b: Sequence[FoldResult], name_a: str = "A", name_b: str = "B") -> ComparisonReport:
    if len(a) != len(b):
        raise DataError(f"fold counts differ: {len(a)} vs {len(b)}")
    if [f.fold for f in a] != [f.fold for f in b]:
        raise DataError("fold indices differ between the two result sets")
    if any(f.metrics is None for f in list(a) + list(b)):
        raise DataError("comparison needs test metrics for every fold")
    per_fold, tests = {}, {}
    for m in METRICS:
        pairs = [(getattr(fa.metrics, m), getattr(fb.metrics, m)) for fa, fb in zip(a, b)]
        per_fold[m] = pairs
        if m != "accuracy":
            w = wilcoxon_signed_rank([p[0] for p in pairs], [p[1] for p in pairs])
            tests[m] = asdict(w)
    sa = {m: mean_std([getattr(f.metrics, m) for f in a]) for m in METRICS}
    sb = {m: mean_std([getattr(f.metrics, m) for f in b]) for m in METRICS}
    return ComparisonReport(name_a, name_b, per_fold, sa, sb, tests)


def dumps(obj) -> str:
    """Deterministic JSON text."""
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj))


def metrics_csv(rows: Sequence[tuple[str, FoldResult]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "fold", *METRICS])
    for model, f in rows:
        if f.metrics is None:
            continue
        w.writerow([model, f.fold, *(repr(float(getattr(f.metrics, m))) for m in METRICS)])
    return buf.getvalue()
