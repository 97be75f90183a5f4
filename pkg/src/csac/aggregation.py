"""Layer-wise parameter fusion rules and the per-layer weight report."""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SchemaError
from .models import ParameterTree

logger = logging.getLogger(__name__)

METRICS = ("l2", "l1", "cosine")
STRATEGIES = ("divergence", "similarity", "average")
EPS = 1e-12


@dataclass
class FusionReport:
    """Per-layer fusion weights over the source models, plus their distances to the average."""

    metric: str
    strategy: str
    domains: list
    weights: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    distances: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    # weighting rule is a reconstruction from prose, not a published formula
    reconstructed: bool = False

    def rows(self, round_index: int = 0) -> list:
        out = []
        for layer, w in self.weights.items():
            for h, name in enumerate(self.domains):
                out.append({
                    "round": round_index,
                    "layer": layer,
                    "domain": name,
                    "distance": float(self.distances[layer][h]),
                    "weight": float(w[h]),
                })
        return out


FUSION_CSV_FIELDS = ("round", "layer", "domain", "distance", "weight")


def write_fusion_csv(path, reports: Sequence[tuple]) -> Path:
    """Write ``(round, FusionReport)`` pairs as one CSV table."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FUSION_CSV_FIELDS)
        writer.writeheader()
        for r, report in reports:
            writer.writerows(report.rows(r))
    return path


def _check(trees: Sequence[ParameterTree], minimum: int = 1) -> None:
    if len(trees) < minimum:
        raise SchemaError(f"need at least {minimum} parameter trees, got {len(trees)}")
    for t in trees[1:]:
        trees[0].check_schema(t)


def _combine(tensors: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    first = tensors[0]
    if all(np.array_equal(first, t) for t in tensors[1:]):
        return first.copy()
    acc = np.zeros(first.shape, dtype=np.float64)
    for w, t in zip(weights, tensors):
        acc += w * t.astype(np.float64)
    return acc.astype(first.dtype)


def _weighted_tree(trees, layer_weights) -> ParameterTree:
    groups = OrderedDict()
    for g in trees[0]:
        groups[g] = OrderedDict(
            (n, _combine([t[g][n] for t in trees], layer_weights[g])) for n in trees[0][g]
        )
    return ParameterTree(groups)


def average_parameters(trees: Sequence[ParameterTree]) -> ParameterTree:
    _check(trees)
    uniform = np.full(len(trees), 1.0 / len(trees))
    return _weighted_tree(trees, {g: uniform for g in trees[0]})


def layer_distance(a, b, metric: str = "l2") -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise SchemaError(f"layer vectors differ in length: {a.size} vs {b.size}")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    if np.array_equal(a, b):
        return 0.0
    if metric == "l2":
        return float(np.linalg.norm(a - b))
    if metric == "l1":
        return float(np.abs(a - b).sum())
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        logger.warning("cosine distance with a zero vector; treating as no divergence")
        return 0.0
    cos = float(a @ b) / (na * nb)
    return float(max(0.0, 1.0 - min(1.0, cos)))


def distances_to_average(trees: Sequence[ParameterTree], metric: str = "l2"):
    """Per layer group, the distance of every model to the layer-wise average."""
    avg = average_parameters(trees)
    return OrderedDict(
        (g, np.array([layer_distance(t.flatten(g), avg.flatten(g), metric) for t in trees]))
        for g in trees[0]
    )


def divergence_weights(d: np.ndarray) -> np.ndarray:
    total = d.sum()
    if total < EPS:
        return np.full(len(d), 1.0 / len(d))
    return d / total


def similarity_weights(d: np.ndarray) -> np.ndarray:
    H, total = len(d), d.sum()
    if total < EPS:
        return np.full(H, 1.0 / H)
    w = (total - d) / ((H - 1) * total)
    return w / w.sum()


def _fuse(trees, metric, strategy, weight_fn, domains, minimum=2, reconstructed=False):
    _check(trees, minimum)
    domains = list(domains) if domains is not None else [f"client{h}" for h in range(len(trees))]
    dists = distances_to_average(trees, metric)
    weights = OrderedDict((g, weight_fn(d)) for g, d in dists.items())
    report = FusionReport(metric, strategy, domains, weights, dists, reconstructed)
    return _weighted_tree(trees, weights), report


def fuse_divergence_weighted(trees, metric: str = "l2", domains=None):
    """Per layer, weight each model by its share of the total distance to the average.

    Models far from the average get larger weights. A total distance below
    ``EPS`` falls back to uniform weights.
    """
    return _fuse(trees, metric, "divergence", divergence_weights, domains)


def fuse_similarity_weighted(trees, metric: str = "l2", domains=None):
    """Inverse of :func:`fuse_divergence_weighted`: models closer to the average weigh more.

    ``w_h = (sum(d) - d_h) / ((H - 1) * sum(d))``.
    """
    return _fuse(trees, metric, "similarity", similarity_weights, domains, reconstructed=True)


def fuse_average(trees, metric: str = "l2", domains=None):
    """Equal weights, with distances still reported."""
    return _fuse(trees, metric, "average", lambda d: np.full(len(d), 1.0 / len(d)), domains, minimum=1)


def fuse(trees, strategy: str = "divergence", metric: str = "l2", domains=None):
    rules = {
        "divergence": fuse_divergence_weighted,
        "similarity": fuse_similarity_weighted,
        "average": fuse_average,
    }
    if strategy not in rules:
        raise ValueError(f"unknown fusion strategy {strategy!r}; choose from {STRATEGIES}")
    if len(trees) == 1:
        return fuse_average(trees, metric, domains)
    return rules[strategy](trees, metric, domains)


def fuse_fedavg(trees: Sequence[ParameterTree], sizes: Sequence[int]) -> ParameterTree:
    """Data-size weighted average ``sum_h n_h / sum(n) * tree_h``."""
    _check(trees)
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(sizes) != len(trees):
        raise SchemaError(f"{len(trees)} trees but {len(sizes)} sizes")
    if (sizes <= 0).any():
        raise ValueError(f"client sizes must be positive: {sizes.tolist()}")
    w = sizes / sizes.sum()
    return _weighted_tree(trees, {g: w for g in trees[0]})
