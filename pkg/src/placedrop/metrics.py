"""Accuracy, penultimate features and domain discrepancy statistics

The two discrepancy measures summarize how a feature space arranges the source
domains:

- inter-domain distance: the mean Euclidean distance between the feature means of
  every unordered pair of domains.
- intra-class distance: the mean distance from each class-in-domain feature mean to
  the mean of its domain.

Features are used raw, without normalization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from itertools import combinations
from logging import getLogger
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from placedrop.core.network import Network
from placedrop.core.tensor import Tensor, no_grad
from placedrop.domains import CLASSES, DOMAINS, Dataset
from placedrop.errors import ContractError, ShapeError


logger = getLogger(__name__)

EVAL_BATCH_SIZE = 256


def top1_accuracy(logits: Union[Tensor, np.ndarray], labels: Sequence[int]) -> float:
    """Fraction of rows whose largest logit is the label; ties go to the lowest class"""
    scores = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    targets = np.asarray(labels)
    if scores.ndim != 2 or targets.shape != (scores.shape[0],):
        raise ShapeError(f"Logits {scores.shape} do not match labels {targets.shape}")
    if len(targets) == 0:
        raise ContractError("Accuracy of an empty set is undefined")
    return float((scores.argmax(axis=1) == targets).mean())


def predict(
    net: Network,
    dataset: Dataset,
    batch_size: int = EVAL_BATCH_SIZE,
    features_only: bool = False,
) -> np.ndarray:
    """Logits (or penultimate features) of every sample, computed in evaluation mode

    The network's previous mode is restored afterwards.
    """
    was_training = net.training
    net.eval()
    outputs = []
    try:
        with no_grad():
            for batch in dataset.batches(batch_size):
                x = Tensor(batch.images)
                out = net.features(x) if features_only else net(x)
                outputs.append(out.data)
    finally:
        net.training = was_training
    return np.concatenate(outputs)


def evaluate(net: Network, dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> float:
    """Top-1 accuracy of ``net`` on ``dataset``"""
    return top1_accuracy(predict(net, dataset, batch_size), dataset.labels)


def extract_features(
    net: Network, dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE
) -> np.ndarray:
    """The globally pooled block-4 output of every sample, shape ``(N, 128)``"""
    return predict(net, dataset, batch_size, features_only=True)


@dataclass(frozen=True)
class DomainFeatureSummary:
    """Feature means per domain and per (domain, class) cell

    Attributes:
        domain_means: ``(K, D)`` mean feature of each domain.
        cell_means: ``(K, C, D)`` mean feature of each cell, NaN where a cell is empty.
        counts: ``(K, C)`` number of samples in each cell.
        domains: The domain id of each row of ``domain_means``.
    """

    domain_means: np.ndarray
    cell_means: np.ndarray
    counts: np.ndarray
    domains: Tuple[int, ...]

    def __post_init__(self) -> None:
        k, d = self.domain_means.shape
        if self.cell_means.shape[0] != k or self.cell_means.shape[2] != d:
            raise ShapeError(
                f"Cell means {self.cell_means.shape} do not match domain means {(k, d)}"
            )
        if self.counts.shape != self.cell_means.shape[:2]:
            raise ShapeError(f"Counts {self.counts.shape} do not match cells")

    @property
    def K(self) -> int:
        return int(self.domain_means.shape[0])

    @property
    def C(self) -> int:
        return int(self.cell_means.shape[1])

    @classmethod
    def from_features(
        cls,
        features: np.ndarray,
        labels: Sequence[int],
        domains: Sequence[int],
        num_classes: Optional[int] = None,
    ) -> "DomainFeatureSummary":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        domains = np.asarray(domains)
        if (
            features.ndim != 2
            or labels.shape != (len(features),)
            or domains.shape != labels.shape
        ):
            raise ShapeError("Need one label and one domain per feature row")
        present = tuple(int(k) for k in np.unique(domains))
        num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
        dim = features.shape[1]
        domain_means = np.empty((len(present), dim))
        cell_means = np.full((len(present), num_classes, dim), np.nan)
        counts = np.zeros((len(present), num_classes), dtype=np.int64)
        for row, domain in enumerate(present):
            in_domain = domains == domain
            domain_means[row] = features[in_domain].mean(axis=0)
            for label in range(num_classes):
                cell = in_domain & (labels == label)
                counts[row, label] = int(cell.sum())
                if counts[row, label]:
                    cell_means[row, label] = features[cell].mean(axis=0)
        return cls(domain_means, cell_means, counts, present)


def inter_domain_distance(summary: DomainFeatureSummary) -> float:
    """Mean distance between the feature means of all unordered domain pairs"""
    if summary.K < 2:
        raise ContractError(
            f"Inter-domain distance needs at least 2 domains, not {summary.K}"
        )
    distances = [
        float(np.linalg.norm(summary.domain_means[m] - summary.domain_means[n]))
        for m, n in combinations(range(summary.K), 2)
    ]
    return sum(distances) / len(distances)


def intra_class_distance(summary: DomainFeatureSummary) -> float:
    """Mean distance from each (domain, class) mean to its domain mean"""
    empty = np.argwhere(summary.counts == 0)
    if len(empty):
        row, label = (int(i) for i in empty[0])
        raise ContractError(
            f"Cell (domain={_domain_name(summary.domains[row])}, class={_class_name(label)}) "
            "has no samples"
        )
    offsets = summary.cell_means - summary.domain_means[:, None, :]
    distances = np.linalg.norm(offsets, axis=2)
    return float(distances.sum() / distances.size)


def _domain_name(domain: int) -> str:
    return DOMAINS[domain] if 0 <= domain < len(DOMAINS) else str(domain)


def _class_name(label: int) -> str:
    return CLASSES[label] if 0 <= label < len(CLASSES) else str(label)


# --- reports ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    """One (seed, target, method) run of an experiment"""

    run_id: str
    seed: int
    method: str
    target_domain: str
    test_acc: float
    inter_domain: float
    intra_class: float
    p_max: float
    layers: str

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def sort_key(self) -> Tuple[str, float, str, int, str]:
        return (self.method, self.p_max, self.layers, self.seed, self.target_domain)


def write_report(rows: Iterable[ReportRow], path: Union[str, Path]) -> Path:
    """Write rows as CSV through a temporary file so readers never see half a report"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ReportRow.columns(), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format(v) for k, v in asdict(row).items()})
    tmp.replace(path)
    return path


def read_report(path: Union[str, Path]) -> List[ReportRow]:
    with Path(path).open(newline="") as f:
        return [
            ReportRow(
                run_id=record["run_id"],
                seed=int(record["seed"]),
                method=record["method"],
                target_domain=record["target_domain"],
                test_acc=float(record["test_acc"]),
                inter_domain=float(record["inter_domain"]),
                intra_class=float(record["intra_class"]),
                p_max=float(record["p_max"]),
                layers=record["layers"],
            )
            for record in csv.DictReader(f)
        ]


def _format(value: object) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def method_means(rows: Iterable[ReportRow]) -> Dict[str, float]:
    """Mean test accuracy of each method over all its targets and seeds"""
    grouped: Dict[str, List[float]] = {}
    for row in rows:
        grouped.setdefault(row.method, []).append(row.test_acc)
    return {method: sum(accs) / len(accs) for method, accs in sorted(grouped.items())}


@dataclass(frozen=True)
class TrendCheck:
    name: str
    passed: bool
    detail: str
    warning: bool = False


LADDER_GAPS = (
    ("deepall", "strong_baseline", 2.0),
    ("strong_baseline", "strong_baseline+place", 1.0),
)
"""``(lower, higher, minimum gap in accuracy points)``"""

SEED_FRACTION = 0.8
ONE_STAGE_TOLERANCE = 0.5


def _per_seed(rows: Sequence[ReportRow], method: str, column: str) -> Dict[int, float]:
    grouped: Dict[int, List[float]] = {}
    for row in rows:
        if row.method == method:
            grouped.setdefault(row.seed, []).append(getattr(row, column))
    return {seed: sum(values) / len(values) for seed, values in grouped.items()}


def _seed_wins(lower: Dict[int, float], higher: Dict[int, float]) -> Tuple[int, int]:
    seeds = sorted(set(lower) & set(higher))
    return sum(lower[s] < higher[s] for s in seeds), len(seeds)


def _enough(wins: int, total: int) -> bool:
    return total > 0 and wins >= math.ceil(SEED_FRACTION * total)


def check_trends(rows: Sequence[ReportRow]) -> List[TrendCheck]:
    """Directional checks of the method ladder, discrepancies and two-stage training

    A check is only made when the report holds every method it compares.
    """
    checks: List[TrendCheck] = []
    accuracy = {m: 100 * mean for m, mean in method_means(rows).items()}

    for lower, higher, gap in LADDER_GAPS:
        if lower not in accuracy or higher not in accuracy:
            continue
        wins, total = _seed_wins(
            _per_seed(rows, lower, "test_acc"), _per_seed(rows, higher, "test_acc")
        )
        difference = accuracy[higher] - accuracy[lower]
        checks.append(
            TrendCheck(
                f"{lower} < {higher}",
                difference >= gap and _enough(wins, total),
                f"gap {difference:+.2f} points (need {gap:+.2f}), "
                f"ordered in {wins} of {total} seeds",
            )
        )

    if "strong_baseline" in accuracy and "strong_baseline+place" in accuracy:
        for column in ("inter_domain", "intra_class"):
            wins, total = _seed_wins(
                _per_seed(rows, "strong_baseline+place", column),
                _per_seed(rows, "strong_baseline", column),
            )
            checks.append(
                TrendCheck(
                    f"{column} lower with place",
                    _enough(wins, total),
                    f"lower in {wins} of {total} seeds",
                )
            )

    if "strong_baseline+place" in accuracy and "one_stage_place" in accuracy:
        shortfall = accuracy["one_stage_place"] - accuracy["strong_baseline+place"]
        detail = f"two-stage leads one-stage by {-shortfall:+.2f} points"
        if shortfall <= 0:
            checks.append(TrendCheck("two-stage >= one-stage", True, detail))
        elif shortfall < ONE_STAGE_TOLERANCE:
            checks.append(TrendCheck("two-stage >= one-stage", True, detail, warning=True))
        else:
            checks.append(TrendCheck("two-stage >= one-stage", False, detail))

    for check in checks:
        if not check.passed:
            logger.error(f"Trend check failed: {check.name} - {check.detail}")
        elif check.warning:
            logger.warning(f"Trend check within tolerance: {check.name} - {check.detail}")
        else:
            logger.info(f"Trend check passed: {check.name} - {check.detail}")
    return checks
