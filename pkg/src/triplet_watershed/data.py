"""Image cubes on disk, a synthetic generator, patches and train/test splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EXCLUDED, TRAIN, TEST = 0, 1, 2


class DatasetError(ValueError):
    pass


@dataclass
class HsiDataset:
    """Image cube ``(H, W, B)`` with ground truth ``(H, W)``; label 0 = ignore."""

    cube: np.ndarray
    labels: np.ndarray
    n_classes: int = None

    def __post_init__(self):
        self.cube = np.asarray(self.cube)
        self.labels = np.asarray(self.labels)
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) if self.labels.size else 0
        self.validate()

    @property
    def height(self):
        return self.cube.shape[0]

    @property
    def width(self):
        return self.cube.shape[1]

    @property
    def bands(self):
        return self.cube.shape[2]

    def validate(self):
        if self.cube.ndim != 3:
            raise DatasetError(f"cube must be (H, W, B), got shape {self.cube.shape}")
        if self.labels.shape != self.cube.shape[:2]:
            raise DatasetError(
                f"labels shape {self.labels.shape} does not match cube {self.cube.shape[:2]}")
        if not np.all(np.isfinite(self.cube)):
            raise DatasetError("cube contains non-finite values")
        if self.labels.min() < 0 or self.labels.max() > self.n_classes:
            raise DatasetError(
                f"label values must lie in [0, {self.n_classes}], "
                f"got [{self.labels.min()}, {self.labels.max()}]")
        if not np.any(self.labels != 0):
            raise DatasetError("no labeled pixels")

    def class_sizes(self):
        return {c: int((self.labels == c).sum()) for c in range(1, self.n_classes + 1)}


def save_dataset(ds: HsiDataset, directory, extra=None):
    """Write ``cube.json``, ``cube.f32`` and ``labels.u16`` into ``directory``.

    ``extra`` entries are added to the JSON header.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = {"height": ds.height, "width": ds.width, "bands": ds.bands,
              "classes": ds.n_classes, "dtype": "f32le", "order": "row-major HWB",
              "labels_dtype": "u16le", "format_version": 1}
    header.update(extra or {})
    (d / "cube.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    (d / "cube.f32").write_bytes(np.ascontiguousarray(ds.cube, dtype="<f4").tobytes())
    (d / "labels.u16").write_bytes(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
    return d


def _read_exact(path, expected, what):
    if not path.exists():
        raise DatasetError(f"missing {path.name}")
    raw = path.read_bytes()
    if len(raw) != expected:
        raise DatasetError(
            f"{what} size mismatch in {path.name}: expected {expected} bytes, got {len(raw)}")
    return raw


def load_dataset(directory) -> HsiDataset:
    d = Path(directory)
    if not (d / "cube.json").exists():
        raise DatasetError(f"{d} has no cube.json")
    header = json.loads((d / "cube.json").read_text())
    try:
        h, w, b = int(header["height"]), int(header["width"]), int(header["bands"])
    except KeyError as exc:
        raise DatasetError(f"cube.json lacks field {exc}") from None
    if header.get("dtype", "f32le") != "f32le":
        raise DatasetError(f"unsupported cube dtype {header['dtype']!r}")
    cube = np.frombuffer(_read_exact(d / "cube.f32", 4 * h * w * b, "cube"), dtype="<f4")
    labels = np.frombuffer(_read_exact(d / "labels.u16", 2 * h * w, "labels"), dtype="<u2")
    cube = cube.reshape(h, w, b).astype(np.float32)
    labels = labels.reshape(h, w).astype(np.int64)
    n_classes = header.get("classes")
    if n_classes is None:
        n_classes = int(labels.max())
    return HsiDataset(cube, labels, int(n_classes))


def make_synthetic(h, w, bands, classes, noise_sigma, rng=None, separation=3.0,
                   unlabeled_frac=0.0):
    """Piecewise-constant cube on Voronoi regions plus Gaussian noise.

    Class means are a shared random baseline spectrum plus ``separation``
    times an orthonormal direction per class (random unit directions when
    ``classes > bands``).
    """
    if classes < 2:
        raise DatasetError("need at least 2 classes")
    if h < 1 or w < 1 or bands < 1 or h * w < classes:
        raise DatasetError(f"invalid dimensions h={h} w={w} bands={bands} classes={classes}")
    if noise_sigma < 0 or not 0 <= unlabeled_frac < 1:
        raise DatasetError("noise_sigma must be >= 0 and unlabeled_frac in [0, 1)")
    rng = np.random.default_rng(rng)
    sites = rng.choice(h * w, classes, replace=False)
    sr, sc = np.divmod(sites, w)
    rr, cc = np.mgrid[0:h, 0:w]
    d2 = (rr[..., None] - sr) ** 2 + (cc[..., None] - sc) ** 2
    labels = np.argmin(d2, axis=-1).astype(np.int64) + 1

    if classes <= bands:
        q, _ = np.linalg.qr(rng.normal(size=(bands, classes)))
        directions = q.T
    else:
        directions = rng.normal(size=(classes, bands))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    baseline = rng.uniform(0.5, 1.5, bands)
    means = baseline + separation * directions
    cube = means[labels - 1] + noise_sigma * rng.normal(size=(h, w, bands))

    n_drop = int(round(unlabeled_frac * h * w))
    if n_drop:
        drop = rng.choice(h * w, n_drop, replace=False)
        labels.reshape(-1)[drop] = 0
    ds = HsiDataset(cube.astype(np.float32), labels, classes)
    ds.class_means = means
    return ds


def extract_patch(cube, pixel, size=11):
    """``size x size x k`` window centered on ``pixel``, zero outside the image."""
    if size % 2 != 1:
        raise ValueError("patch size must be odd")
    cube = np.asarray(cube)
    r, c = pixel
    half = size // 2
    out = np.zeros((size, size, cube.shape[2]), dtype=cube.dtype)
    r0, r1 = max(r - half, 0), min(r + half + 1, cube.shape[0])
    c0, c1 = max(c - half, 0), min(c + half + 1, cube.shape[1])
    out[r0 - r + half:r1 - r + half, c0 - c + half:c1 - c + half] = cube[r0:r1, c0:c1]
    return out


class PatchSource:
    """Batched patch access for a fixed list of pixel coordinates.

    ``layout="flat"`` yields ``(n, size*size*k)`` rows for the MLP,
    ``layout="chw"`` yields ``(n, k, size, size)`` for the conv net.
    """

    def __init__(self, cube, coords, size=11, layout="flat", dtype=np.float64):
        if size % 2 != 1:
            raise ValueError("patch size must be odd")
        if layout not in ("flat", "chw"):
            raise ValueError(f"unknown layout {layout!r}")
        cube = np.asarray(cube, dtype=dtype)
        half = size // 2
        self.padded = np.pad(cube, ((half, half), (half, half), (0, 0)))
        self.windows = sliding_window_view(self.padded, (size, size), axis=(0, 1))
        self.coords = np.asarray(coords, dtype=np.int64)
        self.size = size
        self.layout = layout
        self.bands = cube.shape[2]

    def __len__(self):
        return len(self.coords)

    @property
    def sample_shape(self):
        if self.layout == "flat":
            return (self.size * self.size * self.bands,)
        return (self.bands, self.size, self.size)

    def __call__(self, idx):
        rc = self.coords[np.asarray(idx, dtype=np.int64)]
        # windows[r, c] has shape (k, size, size)
        p = self.windows[rc[:, 0], rc[:, 1]]
        if self.layout == "chw":
            return np.ascontiguousarray(p)
        return p.transpose(0, 2, 3, 1).reshape(len(rc), -1)


@dataclass
class SplitMask:
    """Per-pixel ``EXCLUDED`` / ``TRAIN`` / ``TEST`` flags with per-class counts."""

    mask: np.ndarray
    train_counts: dict = field(default_factory=dict)
    test_counts: dict = field(default_factory=dict)

    @property
    def train(self):
        return self.mask == TRAIN

    @property
    def test(self):
        return self.mask == TEST

    def training_target(self, labels):
        """Label map for ``TripletWatershed.fit``: class at train pixels,
        -1 at other labeled pixels, 0 outside the graph."""
        labels = np.asarray(labels)
        y = np.where(labels != 0, -1, 0)
        y[self.train] = labels[self.train]
        return y

    def save(self, path):
        Path(path).write_bytes(np.ascontiguousarray(self.mask, dtype=np.uint8).tobytes())

    @classmethod
    def load(cls, path, shape, labels=None):
        raw = Path(path).read_bytes()
        if len(raw) != shape[0] * shape[1]:
            raise DatasetError(
                f"split size mismatch: expected {shape[0] * shape[1]} bytes, got {len(raw)}")
        mask = np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()
        split = cls(mask)
        if labels is not None:
            split.train_counts, split.test_counts = _counts(mask, labels)
        return split


def _counts(mask, labels):
    classes = np.unique(labels[labels != 0]).tolist()
    train = {int(c): int(((labels == c) & (mask == TRAIN)).sum()) for c in classes}
    test = {int(c): int(((labels == c) & (mask == TEST)).sum()) for c in classes}
    return train, test


def _ceil(x):
    # guards against 0.1 * 30 == 3.0000000000000004
    return math.ceil(round(x, 9))


def split(labels, fraction=None, per_class=None, rng=None):
    """Stratified train/test split of the labeled pixels.

    Give either ``fraction`` (rounded up, at least one train pixel per class)
    or ``per_class=(n, n_small)``: ``n`` train pixels for classes larger than
    ``n``, else ``n_small``, always leaving one test pixel.
    """
    if (fraction is None) == (per_class is None):
        raise ValueError("give exactly one of fraction or per_class")
    labels = np.asarray(labels)
    rng = np.random.default_rng(rng)
    mask = np.full(labels.shape, EXCLUDED, dtype=np.uint8)
    flat_labels = labels.reshape(-1)
    flat_mask = mask.reshape(-1)
    for c in np.unique(flat_labels[flat_labels != 0]).tolist():
        members = np.flatnonzero(flat_labels == c)
        size = len(members)
        if size < 2:
            raise DatasetError(f"class {c} has {size} labeled pixel(s); need at least 2")
        if fraction is not None:
            if not 0 < fraction <= 1:
                raise ValueError("fraction must be in (0, 1]")
            n_train = min(max(1, _ceil(fraction * size)), size)
        else:
            big, small = per_class
            n_train = big if size > big else small
            n_train = min(n_train, size - 1)
        chosen = rng.permutation(members)[:n_train]
        flat_mask[members] = TEST
        flat_mask[chosen] = TRAIN
    train_counts, test_counts = _counts(mask, labels)
    return SplitMask(mask, train_counts, test_counts)
