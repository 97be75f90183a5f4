"""Training objectives: label smoothing, MMD, cross-layer attention and calibration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from .errors import ShapeError

DEFAULT_SMOOTHING = 0.1
DEFAULT_LAMBDA = 0.6
ATTENTION_VARIANTS = ("full", "position", "channel", "uniform")
DISCREPANCIES = ("mmd", "mse")


def smooth_labels(y, C: int, alpha: float = DEFAULT_SMOOTHING, dtype=torch.float32) -> torch.Tensor:
    """``(1 - alpha) * onehot(y) + alpha / C``; ``y`` may be an int or an index tensor."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {alpha}")
    y = torch.as_tensor(y, dtype=torch.long)
    if (y < 0).any() or (y >= C).any():
        raise ValueError(f"label outside [0, {C})")
    onehot = F.one_hot(y, C).to(dtype)
    return (1.0 - alpha) * onehot + alpha / C


def smoothed_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def cross_entropy(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, y)


# ---------------------------------------------------------------------------
# MMD


@dataclass(frozen=True)
class KernelConfig:
    """Bank of Gaussian kernels ``exp(-|x - y|^2 / (2 * s2))``.

    Each kernel's ``s2`` is a multiplier times a base bandwidth. The base is the
    median pairwise squared distance of the pooled sample, or ``sigma**2`` when
    ``sigma`` is fixed. A zero median falls back to ``fallback``.
    """

    multipliers: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    sigma: float | None = None
    fallback: float = 1.0

    def __post_init__(self):
        if not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ValueError(f"kernel multipliers must be positive and non-empty: {self.multipliers}")


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = (a * a).sum(1, keepdim=True) + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return d.clamp_min(0.0)


def median_bandwidth(X: torch.Tensor, Y: torch.Tensor, fallback: float = 1.0) -> float:
    with torch.no_grad():
        Z = torch.cat([X, Y]).reshape(len(X) + len(Y), -1)
        d = _sq_dists(Z, Z)
        iu = torch.triu_indices(len(Z), len(Z), offset=1)
        med = torch.quantile(d[iu[0], iu[1]].double(), 0.5).item()
    return med if med > 0 else fallback


def mmd(X: torch.Tensor, Y: torch.Tensor, k: KernelConfig = KernelConfig()) -> torch.Tensor:
    """Biased squared MMD summed over the kernel bank. Rows are samples."""
    X, Y = X.reshape(len(X), -1), Y.reshape(len(Y), -1)
    if len(X) < 1 or len(Y) < 1:
        raise ShapeError("mmd needs at least one sample on each side")
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"mmd dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    base = k.sigma**2 if k.sigma is not None else median_bandwidth(X, Y, k.fallback)
    dxx, dyy, dxy = _sq_dists(X, X), _sq_dists(Y, Y), _sq_dists(X, Y)
    total = X.new_zeros(())
    for m in k.multipliers:
        g = -1.0 / (2.0 * m * base)
        total = total + torch.exp(g * dxx).mean() + torch.exp(g * dyy).mean() \
            - 2.0 * torch.exp(g * dxy).mean()
    return total


def mse_discrepancy(X: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    X, Y = X.reshape(len(X), -1), Y.reshape(len(Y), -1)
    if X.shape != Y.shape:
        raise ShapeError(f"mse needs paired samples: {tuple(X.shape)} vs {tuple(Y.shape)}")
    return F.mse_loss(X, Y)


# ---------------------------------------------------------------------------
# Cross-layer attention


@dataclass
class AttentionMatrix:
    """Row-stochastic ``|R| x |R|`` pair weights; rows index fused layers, columns local layers."""

    alpha: torch.Tensor
    position: torch.Tensor
    channel: torch.Tensor
    layers: tuple = ()


def _as_list(taps) -> list:
    return list(taps.values()) if isinstance(taps, Mapping) else list(taps)


def attention_scores(fused, local):
    """Batch-mean of ``avg(A_l^T B_m)`` and ``avg(A_l B_m^T)`` for every layer pair.

    With ``A, B`` of shape ``(c, d)``, ``avg(A^T B)`` over the ``d x d`` map equals
    ``rowsum(A) . rowsum(B) / d^2`` and ``avg(A B^T)`` over the ``c x c`` map
    equals ``colsum(A) . colsum(B) / c^2``, so neither map is materialised.
    """
    fused, local = _as_list(fused), _as_list(local)
    shape = fused[0].shape
    for t in fused + local:
        if t.shape != shape:
            raise ShapeError(f"projected features must share one shape, got {tuple(t.shape)} vs {tuple(shape)}")
    b, c = shape[0], shape[1]
    d = shape[2] * shape[3]
    fa = torch.stack([t.reshape(b, c, d) for t in fused])   # (R, b, c, d)
    lb = torch.stack([t.reshape(b, c, d) for t in local])
    pos = torch.einsum("lbk,mbk->lm", fa.sum(3), lb.sum(3)) / (b * d * d)
    chan = torch.einsum("lbi,mbi->lm", fa.sum(2), lb.sum(2)) / (b * c * c)
    return pos, chan


def attention_weights(fused, local, variant: str = "full", detach: bool = True) -> AttentionMatrix:
    if variant not in ATTENTION_VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}; choose from {ATTENTION_VARIANTS}")
    layers = tuple(fused) if isinstance(fused, Mapping) else ()
    with torch.set_grad_enabled(torch.is_grad_enabled() and not detach):
        pos, chan = attention_scores(fused, local)
        # softmax subtracts the row max internally
        ap, ac = torch.softmax(pos, dim=1), torch.softmax(chan, dim=1)
        if variant == "full":
            alpha = 0.5 * (ap + ac)
        elif variant == "position":
            alpha = ap
        elif variant == "channel":
            alpha = ac
        else:
            alpha = torch.full_like(ap, 1.0 / ap.shape[1])
    return AttentionMatrix(alpha, ap, ac, layers)


# ---------------------------------------------------------------------------
# Alignment and calibration


def pairwise_discrepancy(fused, local, k: KernelConfig = KernelConfig(), discrepancy: str = "mmd",
                         same_layer_only: bool = False) -> torch.Tensor:
    """``|R| x |R|`` table of ``D(fused_l, local_m)``; off-diagonal left at zero when ``same_layer_only``."""
    if discrepancy not in DISCREPANCIES:
        raise ValueError(f"unknown discrepancy {discrepancy!r}; choose from {DISCREPANCIES}")
    fused, local = _as_list(fused), _as_list(local)
    if len(fused) != len(local):
        raise ShapeError(f"{len(fused)} fused layers vs {len(local)} local layers")
    D = mmd if discrepancy == "mmd" else mse_discrepancy
    kwargs = {"k": k} if discrepancy == "mmd" else {}
    n = len(fused)
    rows = []
    for l in range(n):
        row = []
        for m in range(n):
            if same_layer_only and l != m:
                row.append(fused[l].new_zeros(()))
            else:
                row.append(D(fused[l].flatten(1), local[m].flatten(1), **kwargs))
        rows.append(torch.stack(row))
    return torch.stack(rows)


def alignment_loss(fused_taps, local_taps, proj=None, alpha=None, k: KernelConfig = KernelConfig(),
                   discrepancy: str = "mmd", same_layer_only: bool = False) -> torch.Tensor:
    """Attention-weighted sum of discrepancies over every (fused layer, local layer) pair.

    ``proj`` (a :class:`~csac.models.ProjectionHead`) is applied to both tap sets;
    pass ``None`` when the taps are already projected. ``same_layer_only`` keeps
    only the diagonal pairs with unit weight.
    """
    if proj is not None:
        fused_taps, local_taps = proj(fused_taps), proj(local_taps)
    table = pairwise_discrepancy(fused_taps, local_taps, k, discrepancy, same_layer_only)
    if same_layer_only:
        return torch.diagonal(table).sum()
    if alpha is None:
        raise ValueError("alpha is required unless same_layer_only is set")
    weights = alpha.alpha if isinstance(alpha, AttentionMatrix) else torch.as_tensor(alpha)
    return (weights.to(table.dtype) * table).sum()


def calibration_loss(l_al, l_ar, lam: float = DEFAULT_LAMBDA):
    return lam * l_al + l_ar
