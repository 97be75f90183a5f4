"""Command-line entry points: ``prepare-data``, ``run``, ``ablate``, ``analyze``.

Option precedence is flags > config file > defaults. Every command exits
non-zero on failure and prints ``error[CODE]: message`` on stderr.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .aggregation import write_fusion_csv
from .datasets import (
    ROTATED_MNIST_ANGLES,
    build_rotated_mnist,
    data_root,
    leave_one_domain_out,
    load_domains,
    save_domains,
    synthetic_domains,
)
from .errors import CSACError, ConfigError, DataError
from .federation import METHODS, ROUNDS_CSV_FIELDS, SWITCHES, TrainingConfig, flatten_logs

logger = logging.getLogger("csac")

DATASET_DEFAULTS = {
    "rotated-mnist": {
        "kind": "rotated-mnist",
        "angles": list(ROTATED_MNIST_ANGLES),
        "per_class": 100,
        "test_per_class": 100,
        "seed": 0,
    },
    "synthetic": {
        "kind": "synthetic",
        "H": 3,
        "C": 4,
        "shift": 2.0,
        "seed": 0,
        "n_train_per_class": 50,
        "n_test_per_class": 50,
        "size": 20,
    },
}

ANALYSIS_DEFAULTS = {"models_per_domain": 5, "layers": None, "shared_init": True}


@dataclass
class ExperimentSpec:
    dataset: dict = field(default_factory=lambda: dict(DATASET_DEFAULTS["rotated-mnist"]))
    target: str | None = None
    method: str = "csac"
    training: dict = field(default_factory=dict)
    out: str = "runs"
    seeds: list = field(default_factory=lambda: [0])
    axes: list = field(default_factory=list)
    analysis: dict = field(default_factory=dict)
    checkpoints: bool = False

    def __post_init__(self):
        kind = self.dataset.get("kind", "rotated-mnist")
        if kind not in DATASET_DEFAULTS:
            raise ConfigError(f"unknown dataset kind {kind!r}; choose from {list(DATASET_DEFAULTS)}")
        self.dataset = {**DATASET_DEFAULTS[kind], **self.dataset}
        self.analysis = {**ANALYSIS_DEFAULTS, **self.analysis}
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {list(METHODS)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        self.seeds = [int(s) for s in self.seeds]
        self.training_config()  # validates overrides early

    def training_config(self, seed: int | None = None) -> TrainingConfig:
        base = TrainingConfig()
        overrides = dict(self.training)
        if seed is not None:
            overrides["seed"] = seed
        if "kernel_multipliers" in overrides:
            overrides["kernel_multipliers"] = tuple(overrides["kernel_multipliers"])
        return base.replace(**overrides)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "target": self.target,
            "method": self.method,
            "training": self.training_config().to_dict(),
            "out": self.out,
            "seeds": self.seeds,
            "axes": self.axes,
            "analysis": self.analysis,
            "checkpoints": self.checkpoints,
        }

    @property
    def data_hash(self) -> str:
        blob = json.dumps(self.dataset, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def data_dir(self) -> Path:
        return data_root() / "prepared" / f"{self.dataset['kind']}-{self.data_hash}"


def load_spec(path=None, **flags) -> ExperimentSpec:
    """Merge defaults, the JSON config file and non-``None`` flag overrides."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    known = set(ExperimentSpec.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}; valid: {sorted(known)}")
    raw = copy.deepcopy(raw)
    training = raw.setdefault("training", {})
    for key in ("target", "method", "out", "seeds"):
        if flags.get(key) is not None:
            raw[key] = flags[key]
    if flags.get("rounds") is not None:
        training["rounds"] = flags["rounds"]
    if flags.get("lam") is not None:
        training["lam"] = flags["lam"]
    if flags.get("checkpoints"):
        raw["checkpoints"] = True
    return ExperimentSpec(**raw)


# ---------------------------------------------------------------------------
# Commands


def _build_domains(dataset: dict):
    if dataset["kind"] == "rotated-mnist":
        return build_rotated_mnist(dataset["angles"], dataset["per_class"],
                                   dataset["test_per_class"], dataset["seed"])
    return synthetic_domains(dataset["seed"], dataset["H"], dataset["C"], dataset["shift"],
                             dataset["n_train_per_class"], dataset["n_test_per_class"], dataset["size"])


def cmd_prepare_data(spec: ExperimentSpec) -> Path:
    """Materialise one directory per domain; a no-op when the stored spec matches."""
    root = spec.data_dir()
    index = root / "index.json"
    if index.exists():
        stored = json.loads(index.read_text())
        if stored.get("spec") == spec.dataset:
            logger.info("dataset up to date at %s", root)
            return root
    domains = _build_domains(spec.dataset)
    save_domains(domains, root, {"spec": spec.dataset, "data_hash": spec.data_hash})
    logger.info("prepared %d domains at %s", len(domains), root)
    return root


def _prepared(spec: ExperimentSpec):
    root = spec.data_dir()
    if not (root / "index.json").exists():
        raise DataError(f"dataset not prepared at {root}; run `csac prepare-data` first",
                        code="E_DATA_MISSING")
    return load_domains(root)


def _split(spec: ExperimentSpec):
    domains = _prepared(spec)
    target = spec.target or domains[0].domain_id
    return leave_one_domain_out(domains, target)


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def cmd_run(spec: ExperimentSpec) -> Path:
    """Run the chosen method once per seed; write ``results.json`` and ``rounds.csv``."""
    split = _split(spec)
    run_fn = METHODS[spec.method]
    out = Path(spec.out) / f"{spec.method}-{split.target.domain_id}"
    out.mkdir(parents=True, exist_ok=True)
    rows, fusion, per_seed = [], [], []
    started = time.time()
    for seed in spec.seeds:
        cfg = spec.training_config(seed)
        ckpt = out / f"checkpoints-seed{seed}" if spec.checkpoints else None
        _, logs = run_fn(split, cfg, checkpoint_dir=ckpt)
        acc = logs[-1].target_acc
        per_seed.append({"seed": seed, "accuracy": acc, "source_accuracy": logs[-1].source_acc})
        rows += flatten_logs(logs, seed, spec.method)
        fusion += [(log.round, log.fusion) for log in logs if log.fusion is not None]
        logger.info("%s seed=%d target=%s accuracy=%.4f", spec.method, seed, split.target.domain_id, acc)
    accs = np.array([p["accuracy"] for p in per_seed])
    analysis.write_csv(out / "rounds.csv", rows, ROUNDS_CSV_FIELDS)
    if fusion:
        write_fusion_csv(out / "fusion_weights.csv", fusion)
    results = {
        "method": spec.method,
        "target": split.target.domain_id,
        "sources": [d.domain_id for d in split.sources],
        "seeds": spec.seeds,
        "accuracies": accs.tolist(),
        "mean": float(accs.mean()),
        "stderr": analysis.stderr(accs),
        "per_seed": per_seed,
        "data_hash": spec.data_hash,
        "elapsed_sec": time.time() - started,
        "config": spec.to_dict(),
    }
    return _write_json(out / "results.json", results)


def cmd_ablate(spec: ExperimentSpec, axes=None) -> Path:
    """One CSAC row per switch setting; no settings gives the single baseline row."""
    settings = list(spec.axes if axes is None else axes)
    for s in settings:
        analysis.resolve_setting(spec.training_config(), s)
    split = _split(spec)
    rows = analysis.ablation_sweep(split, spec.training_config(spec.seeds[0]), settings, spec.seeds)
    out = Path(spec.out) / f"ablation-{split.target.domain_id}.csv"
    analysis.write_csv(out, rows)
    _write_json(out.with_suffix(".json"), {"config": spec.to_dict(), "axes": settings,
                                           "data_hash": spec.data_hash})
    return out


def cmd_analyze(spec: ExperimentSpec) -> Path:
    """Parameter-distance study over all prepared domains."""
    domains = _prepared(spec)
    opts = spec.analysis
    report = analysis.parameter_distance_study(
        domains, int(opts["models_per_domain"]), opts["layers"],
        spec.training_config(spec.seeds[0]), bool(opts["shared_init"]))
    out = Path(spec.out)
    summary = analysis.write_csv(out / "distance_study.csv", report.summary_rows())
    analysis.write_csv(out / "distance_pairs.csv", report.pair_rows())
    gaps = analysis.gap_ratio_by_layer(report)
    _write_json(out / "distance_study.json", {
        "note": report.note,
        "gap_ratio": gaps,
        "gap_ratio_monotone_decreasing": analysis.is_monotone_decreasing(gaps.values()),
        "histograms": report.histograms(),
        "data_hash": spec.data_hash,
        "config": spec.to_dict(),
    })
    return summary


# ---------------------------------------------------------------------------
# Argument parsing


def _parse_seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}") from exc


def _parse_setting(text: str) -> dict:
    out = {}
    for pair in text.split(","):
        if "=" not in pair:
            raise ConfigError(f"expected key=value in {text!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _expand_axis(text: str) -> list:
    if "=" not in text:
        raise ConfigError(f"expected switch=v1,v2,... in {text!r}")
    k, values = text.split("=", 1)
    return [{k.strip(): v.strip()} for v in values.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment JSON file")
        p.add_argument("--target", help="held-out domain id")
        p.add_argument("--method", choices=sorted(METHODS))
        p.add_argument("--seeds", type=_parse_seeds, help="comma-separated, e.g. 0,1,2")
        p.add_argument("--out", help="output directory")
        p.add_argument("--rounds", type=int)
        p.add_argument("--lambda", dest="lam", type=float)
        return p

    common(sub.add_parser("prepare-data", help="materialise domain directories"))
    run = common(sub.add_parser("run", help="train and evaluate one method"))
    run.add_argument("--checkpoints", action="store_true", help="save the fused model every round")
    ablate = common(sub.add_parser("ablate", help="CSAC ablation sweep"))
    ablate.add_argument("--set", dest="settings", action="append", default=[],
                        help="one row: switch=value[,switch=value...]")
    ablate.add_argument("--axis", dest="axes", action="append", default=[],
                        help="one row per value: switch=v1,v2,...")
    analyze = common(sub.add_parser("analyze", help="parameter-distance study"))
    analyze.add_argument("--models-per-domain", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = load_spec(args.config, target=args.target, method=args.method, seeds=args.seeds,
                         out=args.out, rounds=args.rounds, lam=args.lam,
                         checkpoints=getattr(args, "checkpoints", False))
        if args.command == "prepare-data":
            result = cmd_prepare_data(spec)
        elif args.command == "run":
            result = cmd_run(spec)
        elif args.command == "ablate":
            axes = None
            if args.settings or args.axes:
                axes = [_parse_setting(s) for s in args.settings]
                for a in args.axes:
                    axes += _expand_axis(a)
            result = cmd_ablate(spec, axes)
        else:
            if args.models_per_domain is not None:
                spec.analysis["models_per_domain"] = args.models_per_domain
            result = cmd_analyze(spec)
    except CSACError as exc:
        print(f"error[{exc.code}]: {exc.args[0]}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error[E_VALUE]: {exc}", file=sys.stderr)
        return 2
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
