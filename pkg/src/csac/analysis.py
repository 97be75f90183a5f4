"""Parameter-distance study, gap ratios and ablation sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregation import layer_distance
from .datasets import Domain, DomainSplit
from .errors import ConfigError, DataError
from .federation import SWITCHES, TrainingConfig, _order_seed, local_acquisition, run_csac, evaluate
from .models import build_mnist_cnn, export_parameters

logger = logging.getLogger(__name__)

STUDY_NOTE = (
    "desk-scale study: MNIST CNN, few models per domain; distances are L2 over the "
    "flattened weight+bias vector of each layer"
)


@dataclass
class DistanceStudyReport:
    layers: list
    domains: list
    models_per_domain: int
    # layer -> list of (domain_a, model_a, domain_b, model_b, distance)
    pairs: "OrderedDict[str, list]" = field(default_factory=OrderedDict)
    note: str = STUDY_NOTE

    def _split(self, layer):
        intra = [p[4] for p in self.pairs[layer] if p[0] == p[2]]
        inter = [p[4] for p in self.pairs[layer] if p[0] != p[2]]
        return intra, inter

    def mean_intra(self, layer) -> float:
        return float(np.mean(self._split(layer)[0]))

    def mean_inter(self, layer) -> float:
        return float(np.mean(self._split(layer)[1]))

    def counts(self, layer) -> tuple[int, int]:
        intra, inter = self._split(layer)
        return len(intra), len(inter)

    def summary_rows(self) -> list:
        rows = []
        gaps = gap_ratio_by_layer(self)
        for layer in self.layers:
            n_intra, n_inter = self.counts(layer)
            rows.append({
                "layer": layer,
                "mean_intra": self.mean_intra(layer),
                "mean_inter": self.mean_inter(layer),
                "gap_ratio": gaps[layer],
                "n_intra": n_intra,
                "n_inter": n_inter,
                "models_per_domain": self.models_per_domain,
            })
        return rows

    def pair_rows(self) -> list:
        return [
            {"layer": layer, "kind": "intra" if a == b else "inter",
             "domain_a": a, "model_a": i, "domain_b": b, "model_b": j, "distance": d}
            for layer in self.layers for a, i, b, j, d in self.pairs[layer]
        ]

    def histograms(self, bins: int = 20) -> dict:
        """Plot data: per layer, intra and inter histograms on shared bin edges."""
        out = {}
        for layer in self.layers:
            intra, inter = self._split(layer)
            edges = np.histogram_bin_edges(intra + inter, bins=bins)
            out[layer] = {
                "edges": edges.tolist(),
                "intra": np.histogram(intra, edges)[0].tolist(),
                "inter": np.histogram(inter, edges)[0].tolist(),
            }
        return out


def parameter_distance_study(domains: Sequence[Domain], models_per_domain: int = 5,
                             layers: Sequence[str] | None = None, cfg: TrainingConfig | None = None,
                             shared_init: bool = True) -> DistanceStudyReport:
    """Train several models per domain and compare layer parameters pairwise.

    Each model gets its own data-order seed. With ``shared_init`` all models
    start from one initialisation (the role a pretrained backbone plays);
    otherwise every model is also initialised from its own seed.
    """
    if models_per_domain < 2:
        raise DataError(f"models_per_domain must be >= 2, got {models_per_domain}", code="E_CONFIG")
    cfg = cfg or TrainingConfig(acquisition_epochs=10)
    layers = list(layers or build_mnist_cnn(2).layer_groups)
    first = domains[0].train
    h, w, ch = first.image_shape
    init = export_parameters(build_mnist_cnn(first.num_classes, cfg.seed, (ch, h, w)))
    trees = []
    for hi, d in enumerate(domains):
        for k in range(models_per_domain):
            seed = _order_seed(cfg.seed, 100_000 + 1000 * hi + k)
            start = init if shared_init else export_parameters(
                build_mnist_cnn(first.num_classes, seed, (ch, h, w)))
            model = local_acquisition(d.train, cfg, start, seed)
            trees.append((d.domain_id, k, export_parameters(model)))
    unknown = [l for l in layers if l not in trees[0][2]]
    if unknown:
        raise ConfigError(f"unknown layers {unknown}; available: {list(trees[0][2])}")
    report = DistanceStudyReport(layers, [d.domain_id for d in domains], models_per_domain)
    for layer in layers:
        flat = [(dom, k, t.flatten(layer)) for dom, k, t in trees]
        report.pairs[layer] = [
            (a, i, b, j, layer_distance(va, vb, "l2"))
            for (a, i, va), (b, j, vb) in itertools.combinations(flat, 2)
        ]
    return report


def gap_ratio_by_layer(report: DistanceStudyReport) -> "OrderedDict[str, float]":
    """``(inter - intra) / inter`` per layer."""
    out = OrderedDict()
    for layer in report.layers:
        inter = report.mean_inter(layer)
        if inter == 0:
            raise DataError(f"layer {layer}: mean inter-domain distance is zero")
        out[layer] = (inter - report.mean_intra(layer)) / inter
    return out


def is_monotone_decreasing(values) -> bool:
    values = list(values)
    return all(a >= b for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# Ablations


def _coerce(name: str, value, template: TrainingConfig):
    current = getattr(template, name)
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "on", "yes"):
            return True
        if text in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"switch {name} expects a boolean, got {value!r}")
    if isinstance(current, float):
        return float(value)
    if isinstance(current, int):
        return int(value)
    return str(value).lower() if isinstance(value, str) else value


def resolve_setting(base: TrainingConfig, setting: dict) -> TrainingConfig:
    unknown = [k for k in setting if k not in SWITCHES]
    if unknown:
        raise ConfigError(f"unknown switch(es) {unknown}; valid switches: {list(SWITCHES)}")
    return base.replace(**{k: _coerce(k, v, base) for k, v in setting.items()})


def setting_label(setting: dict) -> str:
    if not setting:
        return "csac"
    return ";".join(f"{k}={v}" for k, v in setting.items())


def ablation_sweep(split: DomainSplit, base_cfg: TrainingConfig, axes: Sequence[dict],
                   seeds: Sequence[int] | None = None) -> list:
    """One CSAC run per switch setting (per seed); an empty axis list gives the baseline row."""
    settings = list(axes) or [{}]
    configs = [resolve_setting(base_cfg, s) for s in settings]
    seeds = list(seeds) if seeds else [base_cfg.seed]
    rows = []
    for setting, cfg in zip(settings, configs):
        accs = []
        for seed in seeds:
            model, logs = run_csac(split, cfg.replace(seed=seed))
            accs.append(logs[-1].target_acc)
        accs = np.asarray(accs, dtype=float)
        rows.append({
            "setting": setting_label(setting),
            "target": split.target.domain_id,
            "seeds": " ".join(str(s) for s in seeds),
            "accuracy_mean": float(accs.mean()),
            "accuracy_stderr": stderr(accs),
            "finite": bool(np.isfinite(accs).all()),
            "config": json.dumps(cfg.to_dict(), sort_keys=True),
        })
    return rows


def stderr(values) -> float:
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(len(values)))


def write_csv(path, rows: Sequence[dict], fields: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(fields or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path
