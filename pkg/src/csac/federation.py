"""Federated orchestration: local acquisition, aggregation/calibration rounds, baselines.

The orchestrator talks to clients only through :class:`Client` methods that
accept and return parameter trees, loss scalars and accuracies. Every read of
a dataset goes through :class:`AuditedDomain`, which records who read what so a
run can be checked for cross-client access afterwards.
"""

from __future__ import annotations

import dataclasses
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .aggregation import STRATEGIES, METRICS, FusionReport, fuse, fuse_fedavg
from .datasets import Domain, DomainDataset, DomainSplit
from .errors import ConfigError, DataError
from .models import (
    ParameterTree,
    build_mnist_cnn,
    build_projection,
    clone_model,
    export_parameters,
    images_to_tensor,
    import_parameters,
    save_checkpoint,
    architecture,
)

logger = logging.getLogger(__name__)

EVALUATOR = "evaluator"


@dataclass
class TrainingConfig:
    acquisition_epochs: int = 30
    rounds: int = 40
    calibration_epochs: int = 5
    lam: float = L.DEFAULT_LAMBDA
    smoothing: float = L.DEFAULT_SMOOTHING
    lr: float = 0.01
    momentum: float = 0.5
    batch_size: int = 64
    metric: str = "l2"
    seed: int = 0
    # ablation switches
    fusion: str = "divergence"
    alignment: bool = True
    same_layer_only: bool = False
    attention: str = "full"
    label_smoothing: bool = True
    retrain_ce: bool = True
    discrepancy: str = "mmd"
    detach_attention: bool = True
    refresh_local_each_round: bool = False
    kernel_multipliers: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    # execution
    max_workers: int = 1
    eval_every: int = 1
    eval_sources: bool = True

    def __post_init__(self):
        self.kernel_multipliers = tuple(float(m) for m in self.kernel_multipliers)
        self.validate()

    def validate(self) -> None:
        counts = ("acquisition_epochs", "rounds", "calibration_epochs")
        for name in counts:
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "max_workers", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        choices = {
            "metric": METRICS,
            "fusion": STRATEGIES,
            "attention": L.ATTENTION_VARIANTS,
            "discrepancy": L.DISCREPANCIES,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r}; choose from {allowed}")

    @property
    def kernel(self) -> L.KernelConfig:
        return L.KernelConfig(self.kernel_multipliers)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kernel_multipliers"] = list(self.kernel_multipliers)
        return d

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in dataclasses.fields(cls))

    def replace(self, **overrides) -> "TrainingConfig":
        unknown = set(overrides) - set(self.field_names())
        if unknown:
            raise ConfigError(f"unknown training option(s) {sorted(unknown)}; valid: {list(self.field_names())}")
        return dataclasses.replace(self, **overrides)


# switches accepted by ablation sweeps
SWITCHES = (
    "fusion", "metric", "alignment", "same_layer_only", "attention", "label_smoothing",
    "retrain_ce", "discrepancy", "detach_attention", "refresh_local_each_round", "lam",
)


@dataclass
class RoundLog:
    round: int
    phase: str
    losses: dict = field(default_factory=dict)
    fusion: FusionReport | None = None
    source_acc: dict = field(default_factory=dict)
    target_acc: float | None = None
    target_acc_after: float | None = None
    client_target_acc: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Access audit


@dataclass(frozen=True)
class AccessRecord:
    owner: str
    reader: str
    split: str


class AccessAudit:
    """Append-only log of dataset reads."""

    def __init__(self):
        self.records: list[AccessRecord] = []
        self._lock = threading.Lock()

    def record(self, owner: str, reader: str, split: str) -> None:
        with self._lock:
            self.records.append(AccessRecord(owner, reader, split))

    def cross_client_reads(self) -> list[AccessRecord]:
        return [r for r in self.records if r.reader != r.owner]


class AuditedDomain:
    def __init__(self, domain: Domain, owner: str, audit: AccessAudit):
        self._domain = domain
        self.owner = owner
        self.audit = audit

    def read(self, reader: str, split: str = "train") -> DomainDataset:
        self.audit.record(self.owner, reader, split)
        return getattr(self._domain, split)


# ---------------------------------------------------------------------------
# Core training steps


def _tensors(ds: DomainDataset):
    return images_to_tensor(ds.images), torch.from_numpy(ds.labels)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _order_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _sgd(params, cfg: TrainingConfig):
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)


def _new_model(ds: DomainDataset, cfg: TrainingConfig, init: ParameterTree | None = None):
    model = build_mnist_cnn(ds.num_classes, cfg.seed, _input_shape(ds))
    if init is not None:
        import_parameters(model, init)
    return model


def _input_shape(ds) -> tuple:
    h, w, ch = ds.image_shape
    return (ch, h, w)


def train_epochs(model, ds: DomainDataset, epochs: int, cfg: TrainingConfig, seed: int,
                 smoothing: float = 0.0) -> list:
    """SGD with momentum on (smoothed) cross-entropy; returns mean loss per epoch."""
    x, y = _tensors(ds)
    gen = torch.Generator().manual_seed(seed)
    opt = _sgd(model.parameters(), cfg)
    model.train()
    history = []
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(y), cfg.batch_size, gen):
            logits = model(x[idx])
            if smoothing > 0:
                loss = L.smoothed_ce(logits, L.smooth_labels(y[idx], ds.num_classes, smoothing))
            else:
                loss = L.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
    return history


def local_acquisition(client_data: DomainDataset, cfg: TrainingConfig,
                      init: ParameterTree | None = None, seed: int | None = None):
    """Train one model on one domain with label-smoothed cross-entropy."""
    if len(client_data) == 0:
        raise DataError("empty training split")
    model = _new_model(client_data, cfg, init)
    smoothing = cfg.smoothing if cfg.label_smoothing else 0.0
    train_epochs(model, client_data, cfg.acquisition_epochs, cfg,
                 cfg.seed if seed is None else seed, smoothing)
    model.eval()
    return model


def calibration_step_loss(model, frozen_local, proj, xb, yb, cfg: TrainingConfig):
    """Return ``(lam * L_AL + L_AR, L_AL, L_AR)`` for one batch."""
    logits, taps = model.forward_with_features(xb)
    zero = logits.new_zeros(())
    l_ar = L.cross_entropy(logits, yb) if cfg.retrain_ce else zero
    l_al = zero
    if cfg.alignment and cfg.lam > 0:
        with torch.no_grad():
            _, local_taps = frozen_local.forward_with_features(xb)
        pf, pl = proj(taps), proj(local_taps)
        if cfg.same_layer_only:
            l_al = L.alignment_loss(pf, pl, None, None, cfg.kernel, cfg.discrepancy, same_layer_only=True)
        else:
            att = L.attention_weights(pf, pl, cfg.attention, detach=cfg.detach_attention)
            l_al = L.alignment_loss(pf, pl, None, att, cfg.kernel, cfg.discrepancy)
    return L.calibration_loss(l_al, l_ar, cfg.lam), l_al, l_ar


def calibration_round(client_data: DomainDataset, fused: ParameterTree, frozen_local, proj,
                      cfg: TrainingConfig, model=None, seed: int | None = None):
    """Load ``fused`` into the trainable model and minimise the calibration loss.

    The projection head is trained jointly and updated in place; the frozen
    local model is only read. Returns the updated tree and mean losses.
    """
    model = model if model is not None else _new_model(client_data, cfg)
    import_parameters(model, fused)
    frozen_local.eval()
    for p in frozen_local.parameters():
        p.requires_grad_(False)
    x, y = _tensors(client_data)
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    opt = _sgd(list(model.parameters()) + list(proj.parameters()), cfg)
    model.train()
    sums = {"align": 0.0, "retrain": 0.0}
    count = 0
    for _ in range(cfg.calibration_epochs):
        for idx in _batches(len(y), cfg.batch_size, gen):
            loss, l_al, l_ar = calibration_step_loss(model, frozen_local, proj, x[idx], y[idx], cfg)
            if loss.requires_grad:
                opt.zero_grad()
                loss.backward()
                opt.step()
            sums["align"] += float(l_al.detach()) * len(idx)
            sums["retrain"] += float(l_ar.detach()) * len(idx)
            count += len(idx)
    model.eval()
    mean = {k: v / count for k, v in sums.items()} if count else {k: 0.0 for k in sums}
    return export_parameters(model), mean


@torch.no_grad()
def evaluate(model, ds: DomainDataset, batch_size: int = 1000) -> float:
    """Fraction of argmax-correct predictions."""
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    model.eval()
    x, y = _tensors(ds)
    dtype = next(model.parameters()).dtype
    correct = 0
    for start in range(0, len(y), batch_size):
        pred = model(x[start:start + batch_size].to(dtype)).argmax(1)
        correct += int((pred == y[start:start + batch_size]).sum())
    return correct / len(y)


# ---------------------------------------------------------------------------
# Clients


class Client:
    """One source domain. Holds its data, trainable model, frozen local model and projector."""

    def __init__(self, domain: Domain, cfg: TrainingConfig, index: int, audit: AccessAudit):
        self.client_id = domain.domain_id
        self.index = index
        self.cfg = cfg
        self._data = AuditedDomain(domain, self.client_id, audit)
        self._num_train = len(domain.train)
        self.model = None
        self.frozen = None
        self.proj = None
        self._round = 0

    @property
    def num_train(self) -> int:
        return self._num_train

    def _seed(self) -> int:
        self._round += 1
        return _order_seed(self.cfg.seed, 1000 * self.index + self._round)

    def _train(self) -> DomainDataset:
        return self._data.read(self.client_id, "train")

    def acquire(self, init: ParameterTree) -> ParameterTree:
        self.model = local_acquisition(self._train(), self.cfg, init, self._seed())
        self.frozen = clone_model(self.model)
        return export_parameters(self.model)

    def calibrate(self, fused: ParameterTree):
        if self.proj is None:
            self.proj = build_projection(self.model.tap_shapes, _order_seed(self.cfg.seed, 7919 + self.index))
        tree, losses = calibration_round(self._train(), fused, self.frozen, self.proj, self.cfg,
                                         self.model, self._seed())
        if self.cfg.refresh_local_each_round:
            self.frozen = clone_model(self.model)
        return tree, losses

    def train_plain(self, start: ParameterTree, epochs: int) -> tuple:
        ds = self._train()
        if self.model is None:
            self.model = _new_model(ds, self.cfg)
        import_parameters(self.model, start)
        hist = train_epochs(self.model, ds, epochs, self.cfg, self._seed())
        return export_parameters(self.model), {"retrain": hist[-1] if hist else 0.0, "align": 0.0}

    def evaluate(self, tree: ParameterTree) -> float:
        ds = self._data.read(self.client_id, "test")
        model = _new_model(ds, self.cfg, tree)
        return evaluate(model, ds)


def _map(fn: Callable, clients: Sequence[Client], workers: int) -> list:
    if workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


class _Run:
    """Shared plumbing for the federated runners."""

    def __init__(self, split: DomainSplit, cfg: TrainingConfig, audit: AccessAudit | None,
                 checkpoint_dir=None, min_sources: int = 1):
        if len(split.sources) < min_sources:
            raise DataError(f"need at least {min_sources} source domains, got {len(split.sources)}")
        cfg.validate()
        self.cfg = cfg
        self.audit = audit if audit is not None else AccessAudit()
        self.clients = [Client(d, cfg, i, self.audit) for i, d in enumerate(split.sources)]
        self.target = AuditedDomain(split.target, EVALUATOR, self.audit)
        self.shape = (split.num_classes, _input_shape(split.target.test))
        self.template = build_mnist_cnn(split.num_classes, cfg.seed, self.shape[1])
        self.checkpoint_dir = checkpoint_dir
        self.domains = [c.client_id for c in self.clients]

    def init_tree(self) -> ParameterTree:
        return export_parameters(self.template)

    def model_from(self, tree: ParameterTree):
        return import_parameters(clone_model(self.template), tree)

    def target_acc(self, tree: ParameterTree) -> float:
        return evaluate(self.model_from(tree), self.target.read(EVALUATOR, "test"))

    def due(self, r: int, final: bool = False) -> bool:
        return final or r % self.cfg.eval_every == 0

    def log_fusion_point(self, log: RoundLog, tree: ParameterTree) -> None:
        log.target_acc = self.target_acc(tree)
        if self.cfg.eval_sources:
            accs = _map(lambda c: c.evaluate(tree), self.clients, self.cfg.max_workers)
            log.source_acc = dict(zip(self.domains, accs))

    def checkpoint(self, r: int, tree: ParameterTree) -> None:
        if self.checkpoint_dir is not None:
            meta = {"round": r, "seed": self.cfg.seed, "architecture": architecture(self.template)}
            save_checkpoint(tree, f"{self.checkpoint_dir}/round_{r:03d}", meta)


def run_csac(split: DomainSplit, cfg: TrainingConfig, audit: AccessAudit | None = None,
             checkpoint_dir=None):
    """Acquisition, then ``cfg.rounds`` of fuse -> broadcast -> calibrate, then a final fusion.

    Returns the final fused model and one :class:`RoundLog` per phase: round 0
    is acquisition, rounds ``1..R`` are calibration rounds (``target_acc`` is the
    fused model entering the round, ``target_acc_after`` the fusion of its
    calibrated clients), round ``R + 1`` is the final fusion.
    """
    run = _Run(split, cfg, audit, checkpoint_dir, min_sources=2)
    init = run.init_tree()
    trees = _map(lambda c: c.acquire(init), run.clients, cfg.max_workers)
    logs = [RoundLog(0, "acquisition")]
    if run.due(0):
        logs[0].client_target_acc = dict(zip(run.domains, [run.target_acc(t) for t in trees]))

    prev = None
    for r in range(1, cfg.rounds + 1):
        fused, report = fuse(trees, cfg.fusion, cfg.metric, run.domains)
        log = RoundLog(r, "calibration", fusion=report)
        if run.due(r):
            run.log_fusion_point(log, fused)
        if prev is not None:
            prev.target_acc_after = log.target_acc
        run.checkpoint(r, fused)
        results = _map(lambda c: c.calibrate(fused), run.clients, cfg.max_workers)
        trees = [t for t, _ in results]
        log.losses = {d: l for d, (_, l) in zip(run.domains, results)}
        logs.append(log)
        prev = log

    final, report = fuse(trees, cfg.fusion, cfg.metric, run.domains)
    last = RoundLog(cfg.rounds + 1, "final", fusion=report)
    run.log_fusion_point(last, final)
    if prev is not None:
        prev.target_acc_after = last.target_acc
    run.checkpoint(cfg.rounds + 1, final)
    logs.append(last)
    return run.model_from(final), logs


def run_fedavg(split: DomainSplit, cfg: TrainingConfig, audit: AccessAudit | None = None,
               checkpoint_dir=None):
    """FedAvg on the CSAC schedule: a long first local phase, then short rounds.

    Every client starts from the shared initialisation, trains
    ``acquisition_epochs`` with plain cross-entropy, then each of ``rounds``
    rounds broadcasts the size-weighted average and trains
    ``calibration_epochs`` locally.
    """
    run = _Run(split, cfg, audit, checkpoint_dir, min_sources=1)
    sizes = [c.num_train for c in run.clients]
    current = run.init_tree()
    logs = []
    for r in range(0, cfg.rounds + 1):
        epochs = cfg.acquisition_epochs if r == 0 else cfg.calibration_epochs
        log = RoundLog(r, "acquisition" if r == 0 else "local")
        if r > 0 and run.due(r):
            run.log_fusion_point(log, current)
        results = _map(lambda c: c.train_plain(current, epochs), run.clients, cfg.max_workers)
        log.losses = {d: l for d, (_, l) in zip(run.domains, results)}
        current = fuse_fedavg([t for t, _ in results], sizes)
        run.checkpoint(r, current)
        logs.append(log)
    last = RoundLog(cfg.rounds + 1, "final")
    run.log_fusion_point(last, current)
    logs.append(last)
    return run.model_from(current), logs


def run_deepall(split: DomainSplit, cfg: TrainingConfig, audit: AccessAudit | None = None,
                checkpoint_dir=None):
    """Centralised plain cross-entropy on the pooled sources, same total epoch budget."""
    if not split.sources:
        raise DataError("need at least one source domain")
    audit = audit if audit is not None else AccessAudit()
    parts = [AuditedDomain(d, d.domain_id, audit).read("central", "train") for d in split.sources]
    pooled = DomainDataset(
        "pooled",
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        split.num_classes,
    )
    target = AuditedDomain(split.target, EVALUATOR, audit)
    model = build_mnist_cnn(split.num_classes, cfg.seed, _input_shape(pooled))
    epochs = cfg.acquisition_epochs + cfg.rounds * cfg.calibration_epochs
    # same data-order stream as the first client's first phase
    seed = _order_seed(cfg.seed, 1)
    gen = torch.Generator().manual_seed(seed)
    x, y = _tensors(pooled)
    opt = _sgd(model.parameters(), cfg)
    logs = []
    for e in range(1, epochs + 1):
        model.train()
        total = 0.0
        for idx in _batches(len(y), cfg.batch_size, gen):
            loss = L.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log = RoundLog(e, "epoch", losses={"pooled": {"retrain": total / len(y), "align": 0.0}})
        if e % cfg.eval_every == 0 or e == epochs:
            log.target_acc = evaluate(model, target.read(EVALUATOR, "test"))
            if cfg.eval_sources:
                log.source_acc = {d.domain_id: evaluate(model, d.test) for d in split.sources}
        logs.append(log)
    if not logs:
        logs.append(RoundLog(0, "final", target_acc=evaluate(model, target.read(EVALUATOR, "test"))))
    if checkpoint_dir is not None:
        save_checkpoint(export_parameters(model), f"{checkpoint_dir}/final",
                        {"seed": cfg.seed, "architecture": architecture(model)})
    model.eval()
    return model, logs


METHODS = {"csac": run_csac, "fedavg": run_fedavg, "deepall": run_deepall}


ROUNDS_CSV_FIELDS = ("seed", "method", "round", "phase", "domain", "role", "align_loss",
                     "retrain_loss", "accuracy", "accuracy_after", "client_target_accuracy")


def flatten_logs(logs: Sequence[RoundLog], seed: int = 0, method: str = "csac") -> list:
    """One row per (round, source domain) plus one target row per round.

    Source rows: losses, the fused model's accuracy on that domain's test split,
    and the client model's accuracy on the target. Target rows: the fused
    model's target accuracy entering the round and after it.
    """
    rows = []
    for log in logs:
        base = {"seed": seed, "method": method, "round": log.round, "phase": log.phase}
        domains = dict.fromkeys(list(log.losses) + list(log.source_acc) + list(log.client_target_acc))
        for d in domains:
            loss = log.losses.get(d, {})
            rows.append({
                **base, "domain": d, "role": "source",
                "align_loss": loss.get("align", ""), "retrain_loss": loss.get("retrain", ""),
                "accuracy": log.source_acc.get(d, ""), "accuracy_after": "",
                "client_target_accuracy": log.client_target_acc.get(d, ""),
            })
        rows.append({
            **base, "domain": "target", "role": "target", "align_loss": "", "retrain_loss": "",
            "accuracy": "" if log.target_acc is None else log.target_acc,
            "accuracy_after": "" if log.target_acc_after is None else log.target_acc_after,
            "client_target_accuracy": "",
        })
    return rows
