"""MNIST CNN backbone, feature taps, projection heads and parameter trees."""

from __future__ import annotations

import copy
import json
import math
from collections import OrderedDict
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import SchemaError, ShapeError


class ParameterTree(Mapping):
    """Ordered map ``layer group -> {tensor name -> array}``.

    This is the unit that is fused and transmitted between clients. Tensor
    order inside a group is fixed (weight before bias), so flattening a group
    gives a deterministic vector.
    """

    def __init__(self, groups):
        self._groups = OrderedDict(
            (g, OrderedDict((n, np.asarray(t)) for n, t in tensors.items()))
            for g, tensors in groups.items()
        )

    def __getitem__(self, group):
        return self._groups[group]

    def __iter__(self):
        return iter(self._groups)

    def __len__(self):
        return len(self._groups)

    def __repr__(self):
        parts = ", ".join(
            f"{g}: {{{', '.join(f'{n}{tuple(t.shape)}' for n, t in ts.items())}}}"
            for g, ts in self._groups.items()
        )
        return f"ParameterTree({parts})"

    @property
    def schema(self):
        return tuple(
            (g, tuple((n, tuple(t.shape)) for n, t in ts.items())) for g, ts in self._groups.items()
        )

    def check_schema(self, other: "ParameterTree") -> None:
        if self.schema != other.schema:
            raise SchemaError(f"parameter schemas differ:\n  {self.schema}\n  {other.schema}")

    def flatten(self, group: str) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self._groups[group].values()])

    def unflatten(self, group: str, vector) -> "OrderedDict[str, np.ndarray]":
        vector = np.asarray(vector)
        out, start = OrderedDict(), 0
        for name, t in self._groups[group].items():
            stop = start + t.size
            out[name] = vector[start:stop].reshape(t.shape).astype(t.dtype, copy=False)
            start = stop
        if start != vector.size:
            raise ShapeError(f"group {group!r} expects {start} values, got {vector.size}")
        return out

    def replace(self, group: str, tensors) -> "ParameterTree":
        groups = OrderedDict(self._groups)
        groups[group] = tensors
        return ParameterTree(groups)

    def copy(self) -> "ParameterTree":
        return ParameterTree({g: {n: t.copy() for n, t in ts.items()} for g, ts in self._groups.items()})

    def equals(self, other: "ParameterTree") -> bool:
        """Bitwise equality of schema and every tensor."""
        if self.schema != other.schema:
            return False
        return all(
            np.array_equal(t, other[g][n]) for g, ts in self._groups.items() for n, t in ts.items()
        )


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(N, H, W, Ch)`` numpy images to an ``(N, Ch, H, W)`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(images, -1, 1))).to(dtype)


def _init_layer(layer: nn.Module, gen: torch.Generator) -> None:
    # same scheme as torch's default Conv2d/Linear init, driven by an explicit generator
    nn.init.kaiming_uniform_(layer.weight, a=math.sqrt(5), generator=gen)
    fan_in = layer.weight[0].numel()
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.bias.uniform_(-bound, bound, generator=gen)


class MnistCNN(nn.Module):
    """conv(5x5, 32) -> pool -> conv(5x5, 64) -> pool -> fc(128) -> fc(C).

    Feature taps for calibration are the post-pool outputs of ``conv1`` and
    ``conv2``. The input size is configurable so the same architecture runs on
    small synthetic images.
    """

    layer_groups = ("conv1", "conv2", "fc1", "fc2")

    def __init__(self, num_classes: int = 10, input_shape=(1, 28, 28), hidden: int = 128,
                 channels=(32, 64), activation: str = "relu"):
        super().__init__()
        ch, h, w = input_shape
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.calibration_layers = ("conv1", "conv2")
        self.activation = activation
        self.conv1 = nn.Conv2d(ch, channels[0], 5)
        self.conv2 = nn.Conv2d(channels[0], channels[1], 5)
        h1, w1 = (h - 4) // 2, (w - 4) // 2
        h2, w2 = (h1 - 4) // 2, (w1 - 4) // 2
        if h2 < 1 or w2 < 1:
            raise ShapeError(f"input {input_shape} too small for two 5x5 conv + pool stages")
        self.tap_shapes = OrderedDict(conv1=(channels[0], h1, w1), conv2=(channels[1], h2, w2))
        self.fc1 = nn.Linear(channels[1] * h2 * w2, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def _act(self, x):
        return torch.relu(x) if self.activation == "relu" else torch.tanh(x)

    def _pool(self, x):
        if self.activation == "relu":
            return F.max_pool2d(x, 2)
        return F.avg_pool2d(x, 2)

    def forward_with_features(self, x: torch.Tensor):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected batch of {self.input_shape}, got {tuple(x.shape[1:])}")
        a = self._pool(self._act(self.conv1(x)))
        b = self._pool(self._act(self.conv2(a)))
        logits = self.fc2(self._act(self.fc1(b.flatten(1))))
        return logits, OrderedDict(conv1=a, conv2=b)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[0]


def build_mnist_cnn(C: int = 10, seed: int = 0, input_shape=(1, 28, 28), **kwargs) -> MnistCNN:
    """Build the CNN with a deterministic initialisation for ``seed``.

    ``activation="tanh"`` swaps rectifier and max-pool for tanh and average
    pooling (smooth variant used for finite-difference checks).
    """
    if C < 2:
        raise ValueError(f"need at least 2 classes, got {C}")
    model = MnistCNN(C, input_shape, **kwargs)
    gen = torch.Generator().manual_seed(int(seed))
    for name in model.layer_groups:
        _init_layer(getattr(model, name), gen)
    return model


class ProjectionHead(nn.Module):
    """One single-convolution projector per calibration layer.

    Every projector maps its layer's tap ``(c_l, h_l, w_l)`` to the tap shape of
    the last calibration layer. The last layer's projector is the identity.
    Kernel and stride are chosen so the spatial size lands exactly on the
    target: ``stride = h_l // h_t`` and ``kernel = h_l - stride * (h_t - 1)``.
    """

    def __init__(self, shapes):
        super().__init__()
        shapes = OrderedDict((k, tuple(v)) for k, v in shapes.items())
        if not shapes:
            raise ShapeError("projection needs at least one calibration layer")
        self.layers = tuple(shapes)
        self.target_shape = shapes[self.layers[-1]]
        tc, th, tw = self.target_shape
        projectors = OrderedDict()
        for name, (c, h, w) in shapes.items():
            if name == self.layers[-1]:
                projectors[name] = nn.Identity()
                continue
            if h < th or w < tw:
                raise ShapeError(f"layer {name} ({h}x{w}) is smaller than target ({th}x{tw})")
            sh, sw = h // th, w // tw
            kh, kw = h - sh * (th - 1), w - sw * (tw - 1)
            projectors[name] = nn.Conv2d(c, tc, (kh, kw), stride=(sh, sw))
        self.projectors = nn.ModuleDict(projectors)

    def forward(self, taps):
        return OrderedDict((k, self.projectors[k](taps[k])) for k in self.layers)


def build_projection(shapes, seed: int = 0) -> ProjectionHead:
    head = ProjectionHead(shapes)
    gen = torch.Generator().manual_seed(int(seed))
    for name in head.layers:
        proj = head.projectors[name]
        if isinstance(proj, nn.Conv2d):
            _init_layer(proj, gen)
    return head


def export_parameters(model: nn.Module) -> ParameterTree:
    groups = OrderedDict()
    for g in model.layer_groups:
        layer = getattr(model, g)
        groups[g] = OrderedDict(
            (n, p.detach().cpu().numpy().copy()) for n, p in layer.named_parameters()
        )
    return ParameterTree(groups)


def import_parameters(model: nn.Module, tree: ParameterTree) -> nn.Module:
    export_parameters(model).check_schema(tree)
    with torch.no_grad():
        for g in model.layer_groups:
            layer = getattr(model, g)
            for n, p in layer.named_parameters():
                p.copy_(torch.from_numpy(np.asarray(tree[g][n])).to(p.dtype))
    return model


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)


def architecture(model: MnistCNN) -> dict:
    return {
        "name": "mnist-cnn",
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "hidden": model.fc1.out_features,
        "channels": [model.conv1.out_channels, model.conv2.out_channels],
        "activation": model.activation,
        "calibration_layers": list(model.calibration_layers),
    }


# ---------------------------------------------------------------------------
# Checkpoints: raw little-endian float32 tensors plus a JSON manifest


def save_checkpoint(tree: ParameterTree, directory, meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    schema = []
    for g, tensors in tree.items():
        entries = []
        for n, t in tensors.items():
            fname = f"{g}.{n}.f32"
            np.asarray(t, dtype="<f4").tofile(directory / fname)
            entries.append({"name": n, "shape": list(t.shape), "file": fname})
        schema.append({"group": g, "tensors": entries})
    manifest = {"format": "raw-le-float32", "schema": schema, **(meta or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    groups = OrderedDict()
    for entry in manifest["schema"]:
        groups[entry["group"]] = OrderedDict(
            (t["name"], np.fromfile(directory / t["file"], dtype="<f4").reshape(t["shape"]))
            for t in entry["tensors"]
        )
    return ParameterTree(groups), manifest
