"""Multi-domain datasets: Rotated MNIST, synthetic toy domains, splits and on-disk layout.

Images are stored as ``(N, H, W, Ch)`` float32 arrays in ``[0, 1]`` and labels as
int64 class indices. A :class:`Domain` bundles the train and test parts of one
named domain; :func:`leave_one_domain_out` turns a list of domains into sources
and a held-out target.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import struct
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError

logger = logging.getLogger(__name__)

ROTATED_MNIST_ANGLES = (0, 15, 30, 45, 60, 75)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)

SPLITS = ("train", "test")


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """Labeled images from one domain and one split."""

    domain_id: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim == 3:
            images = images[..., None]
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataError(f"images must be (N, H, W, Ch), got shape {images.shape}")
        if len(images) != len(labels) or len(labels) == 0:
            raise DataError(
                f"domain {self.domain_id!r}: {len(images)} images vs {len(labels)} labels"
            )
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DataError(
                f"domain {self.domain_id!r}: labels outside [0, {self.num_classes})"
            )
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, index) -> "DomainDataset":
        return DomainDataset(
            self.domain_id, self.images[index], self.labels[index], self.num_classes, self.split
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.domain_id.encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Domain:
    """Train and test parts of one named domain."""

    domain_id: str
    train: DomainDataset
    test: DomainDataset
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for part in (self.train, self.test):
            if part.domain_id != self.domain_id:
                raise DataError(f"part {part.domain_id!r} filed under {self.domain_id!r}")
        if self.train.num_classes != self.test.num_classes:
            raise DataError(f"domain {self.domain_id!r}: train/test class counts differ")
        if self.train.image_shape != self.test.image_shape:
            raise DataError(f"domain {self.domain_id!r}: train/test image shapes differ")

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def image_shape(self):
        return self.train.image_shape


@dataclass(frozen=True, eq=False)
class DomainSplit:
    sources: list
    target: Domain

    def __post_init__(self):
        ids = [d.domain_id for d in self.sources]
        if self.target.domain_id in ids:
            raise DataError(f"target {self.target.domain_id!r} is also a source")
        for d in self.sources:
            if d.num_classes != self.target.num_classes or d.image_shape != self.target.image_shape:
                raise DataError(f"domain {d.domain_id!r} is incompatible with the target")

    @property
    def num_classes(self) -> int:
        return self.target.num_classes

    @property
    def image_shape(self):
        return self.target.image_shape


# ---------------------------------------------------------------------------
# Rotation


def rotate_images(images: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a stack of ``(N, H, W[, Ch])`` images clockwise by ``angle`` degrees.

    Bilinear resampling about the image centre, zero fill outside the canvas,
    output clamped to ``[0, 1]``.
    """
    images = np.asarray(images, dtype=np.float32)
    if float(angle) % 360.0 == 0.0:
        return images.copy()
    # ndimage.rotate turns counter-clockwise on the (row, col) grid
    out = ndimage.rotate(images, -float(angle), axes=(2, 1), reshape=False, order=1,
                         mode="constant", cval=0.0, prefilter=False)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_rotated_domains(base_images, base_labels, angles: Sequence[float],
                             num_classes: int = 10, split: str = "train") -> list[DomainDataset]:
    """One dataset per angle, named ``M{angle}``; labels are carried over unchanged."""
    if len(angles) == 0:
        raise DataError("angle list is empty")
    base = np.asarray(base_images, dtype=np.float32)
    if base.ndim == 4:
        if base.shape[-1] != 1:
            raise DataError(f"expected single-channel images, got {base.shape[-1]} channels")
        base = base[..., 0]
    if base.ndim != 3 or base.shape[1] != base.shape[2]:
        raise DataError(f"expected square single-channel images, got shape {base.shape}")
    out = []
    for angle in angles:
        name = f"M{angle:g}" if isinstance(angle, float) else f"M{angle}"
        rotated = rotate_images(base, angle)
        out.append(DomainDataset(name, rotated[..., None], base_labels, num_classes, split))
    return out


# ---------------------------------------------------------------------------
# Sampling and splitting


def subsample_per_class(ds: DomainDataset, n: int, seed: int) -> DomainDataset:
    """Pick exactly ``n`` items of every class without replacement, shuffled."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < n:
            raise DataError(
                f"domain {ds.domain_id!r}: class {c} has {len(idx)} items, need {n}"
            )
        picked.append(rng.choice(idx, size=n, replace=False))
    index = np.concatenate(picked)
    return ds.subset(index[rng.permutation(len(index))])


def leave_one_domain_out(domains: Sequence[Domain], target_id: str) -> DomainSplit:
    if len(domains) < 2:
        raise DataError(f"need at least 2 domains, got {len(domains)}")
    ids = [d.domain_id for d in domains]
    if target_id not in ids:
        raise DataError(f"unknown target domain {target_id!r}; available: {ids}")
    target = domains[ids.index(target_id)]
    sources = [d for d in domains if d.domain_id != target_id]
    return DomainSplit(sources=sources, target=target)


# ---------------------------------------------------------------------------
# Synthetic domains


def _class_prototypes(rng, num_classes, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    protos = np.zeros((num_classes, size, size))
    for c in range(num_classes):
        for _ in range(3):
            r0, c0 = rng.uniform(0.2 * size, 0.8 * size, size=2)
            r1, c1 = rng.uniform(0.2 * size, 0.8 * size, size=2)
            # a thick stroke from (r0, c0) to (r1, c1)
            for t in np.linspace(0.0, 1.0, 12):
                rc, cc = r0 + t * (r1 - r0), c0 + t * (c1 - c0)
                protos[c] += np.exp(-((yy - rc) ** 2 + (xx - cc) ** 2) / (2 * 1.2**2))
        protos[c] /= protos[c].max()
    return protos


def synthetic_domains(seed: int, H: int, C: int, shift: float, n_train_per_class: int = 40,
                      n_test_per_class: int = 40, size: int = 20, noise: float = 0.08) -> list[Domain]:
    """Small-image toy domains sharing class prototypes.

    Every domain draws samples from the same class-conditional generator
    (jittered prototype plus pixel noise). Domain ``h`` then overlays its own
    fixed stroke texture ``T_h``: ``(x + shift * T_h) / (1 + shift)``. ``shift=0``
    leaves all domains identically distributed; larger shifts let the texture
    dominate while the class signal stays recoverable.
    """
    if H < 2 or C < 2:
        raise DataError(f"synthetic domains need H >= 2 and C >= 2, got H={H}, C={C}")
    if shift < 0:
        raise DataError(f"shift must be >= 0, got {shift}")
    if n_train_per_class < 1 or n_test_per_class < 1 or size < 8:
        raise DataError("invalid synthetic dataset sizes")
    rng = np.random.default_rng(seed)
    protos = _class_prototypes(rng, C, size)
    textures = _class_prototypes(rng, H, size)

    def draw(gen, n_per_class):
        labels = np.repeat(np.arange(C), n_per_class)
        imgs = np.empty((len(labels), size, size))
        for i, c in enumerate(labels):
            dr, dc = gen.integers(-1, 2, size=2)
            img = np.roll(protos[c], (dr, dc), axis=(0, 1))
            imgs[i] = img * gen.uniform(0.7, 1.0) + noise * gen.standard_normal((size, size))
        order = gen.permutation(len(labels))
        return np.clip(imgs[order], 0.0, 1.0), labels[order]

    domains = []
    for h in range(H):
        gen = np.random.default_rng([seed, h])
        name = f"S{h}"
        parts = {}
        for split, n in (("train", n_train_per_class), ("test", n_test_per_class)):
            x, y = draw(gen, n)
            x = (x + shift * textures[h]) / (1.0 + shift)
            parts[split] = DomainDataset(name, x[..., None].astype(np.float32), y, C, split)
        domains.append(Domain(name, parts["train"], parts["test"],
                              meta={"kind": "synthetic", "seed": seed, "shift": shift}))
    return domains


# ---------------------------------------------------------------------------
# IDX files and MNIST


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into a numpy array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: not an IDX file")
    dtype_code, ndim = raw[2], raw[3]
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if dtype_code not in dtypes:
        raise DataError(f"{path}: unknown IDX dtype 0x{dtype_code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=dtypes[dtype_code], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: payload size does not match header {dims}")
    return data.reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used for fixtures and round-trips)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def data_root(data_dir=None) -> Path:
    if data_dir is not None:
        return Path(data_dir)
    return Path(os.environ.get("CSAC_DATA_DIR", Path.home() / ".cache" / "csac"))


def _find_idx(directory: Path, stem: str):
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    return None


def fetch_mnist(dest=None, mirrors=MNIST_MIRRORS, timeout: float = 30.0) -> Path:
    """Download the four MNIST IDX files into ``dest/mnist``, skipping any already cached."""
    target = data_root(dest) / "mnist"
    target.mkdir(parents=True, exist_ok=True)
    for stem in MNIST_FILES.values():
        if _find_idx(target, stem) is not None:
            continue
        last_err = None
        for mirror in mirrors:
            try:
                with urllib.request.urlopen(mirror + stem + ".gz", timeout=timeout) as resp:
                    payload = resp.read()
                (target / (stem + ".gz")).write_bytes(payload)
                break
            except OSError as exc:
                last_err = exc
        else:
            raise DataError(f"could not download {stem}: {last_err}", code="E_DATA_MISSING")
    return target


def _load_mnist_subset():
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise DataError(
            "MNIST IDX files not found and the bundled fallback needs mlxtend "
            "(pip install mlxtend, or place the IDX files under $CSAC_DATA_DIR/mnist)",
            code="E_DATA_MISSING",
        ) from exc
    x, y = mnist_data()
    x = (x.reshape(-1, 28, 28) / 255.0).astype(np.float32)
    y = y.astype(np.int64)
    # disjoint halves of every class: first half train pool, second half test pool
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        half = len(idx) // 2
        train_idx.append(idx[:half])
        test_idx.append(idx[half:])
    tr, te = np.concatenate(train_idx), np.concatenate(test_idx)
    return x[tr], y[tr], x[te], y[te]


def load_mnist(data_dir=None, allow_fallback: bool = True):
    """Return ``(train_x, train_y, test_x, test_y)`` with images in ``[0, 1]``.

    Reads the IDX files under ``<data_root>/mnist``. Without them, falls back to
    the 5000-image MNIST subset bundled with mlxtend, split per class into
    disjoint train and test pools.
    """
    directory = data_root(data_dir) / "mnist"
    paths = {k: _find_idx(directory, v) for k, v in MNIST_FILES.items()}
    if all(paths.values()):
        out = []
        for kind in ("train", "test"):
            imgs = read_idx(paths[f"{kind}_images"]).astype(np.float32) / 255.0
            labels = read_idx(paths[f"{kind}_labels"]).astype(np.int64)
            out += [imgs, labels]
        return tuple(out)
    if not allow_fallback:
        raise DataError(f"MNIST IDX files not found under {directory}", code="E_DATA_MISSING")
    logger.warning("MNIST IDX files not found under %s; using the 5k mlxtend subset", directory)
    return _load_mnist_subset()


def build_rotated_mnist(angles=ROTATED_MNIST_ANGLES, per_class: int = 100,
                        test_per_class: int = 100, seed: int = 0, data_dir=None) -> list[Domain]:
    """Rotated MNIST: the same per-class subsample rotated into one domain per angle.

    Train and test images come from disjoint base pools and are rotated separately.
    """
    train_x, train_y, test_x, test_y = load_mnist(data_dir)
    base_train = subsample_per_class(DomainDataset("base", train_x, train_y, 10, "train"),
                                     per_class, seed)
    base_test = subsample_per_class(DomainDataset("base", test_x, test_y, 10, "test"),
                                    test_per_class, seed + 1)
    trains = generate_rotated_domains(base_train.images, base_train.labels, angles, 10, "train")
    tests = generate_rotated_domains(base_test.images, base_test.labels, angles, 10, "test")
    return [Domain(tr.domain_id, tr, te, meta={"kind": "rotated-mnist", "angle": a, "seed": seed})
            for tr, te, a in zip(trains, tests, angles)]


# ---------------------------------------------------------------------------
# On-disk layout: one directory per domain plus an index


def _domain_manifest(domain: Domain) -> dict:
    return {
        "domain_id": domain.domain_id,
        "image_shape": list(domain.image_shape),
        "num_classes": domain.num_classes,
        "split_sizes": {"train": len(domain.train), "test": len(domain.test)},
        "angle": domain.meta.get("angle"),
        "seed": domain.meta.get("seed"),
        "meta": domain.meta,
        "sha256": {"train": domain.train.content_hash(), "test": domain.test.content_hash()},
    }


def save_domains(domains: Sequence[Domain], root, extra: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for d in domains:
        ddir = root / d.domain_id
        ddir.mkdir(exist_ok=True)
        for part in (d.train, d.test):
            np.save(ddir / f"{part.split}_images.npy", part.images)
            np.save(ddir / f"{part.split}_labels.npy", part.labels)
        (ddir / "manifest.json").write_text(json.dumps(_domain_manifest(d), indent=2))
    index = {"domains": [d.domain_id for d in domains], **(extra or {})}
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return root


def load_domains(root) -> list[Domain]:
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.exists():
        raise DataError(f"no prepared dataset at {root}", code="E_DATA_MISSING")
    index = json.loads(index_path.read_text())
    domains = []
    for name in index["domains"]:
        ddir = root / name
        manifest = json.loads((ddir / "manifest.json").read_text())
        parts = {}
        for split in SPLITS:
            parts[split] = DomainDataset(
                name,
                np.load(ddir / f"{split}_images.npy"),
                np.load(ddir / f"{split}_labels.npy"),
                manifest["num_classes"],
                split,
            )
        domains.append(Domain(name, parts["train"], parts["test"], meta=manifest.get("meta", {})))
    return domains
