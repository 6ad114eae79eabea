"""Dataset synthesis, the IDX image-file codec, and split utilities.

Three low-dimensional generators (two Gaussians, two moons, concentric
rings) cover fast property tests.  For image-scale experiments there are
two synthesizers: a striped-grating family and a prototype-cluster family
whose per-cluster contrasts control when each subpopulation becomes
learnable.  Both are written and read through the standard IDX binary
format (big-endian magic, u32 dimension sizes, u8 payload), the same
container used by classic digit datasets.

All features land in [0, 1]; attack budgets quoted as k/255 refer to this
range.  Every constructor is pure given its spec and seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DegenerateInputError, FormatError
from .tensor_core import make_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SYNTH_KINDS = ("two_gaussians", "two_moons", "concentric_rings")



@dataclass(frozen=True)
class Dataset:
    """Immutable design matrix plus integer labels.

    warnings carries non-fatal loader notes (e.g. a limit larger than the
    stored sample count).
    """

    xs: np.ndarray
    ys: np.ndarray
    feature_range: tuple[float, float] = (0.0, 1.0)
    name: str = ""
    split: str = ""
    num_classes: int | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64)
        ys = np.asarray(self.ys, dtype=np.int64)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        if xs.ndim != 2 or xs.shape[0] < 1:
            raise ContractError(f"xs must be a nonempty [N, d] matrix, got {xs.shape}")
        if ys.shape != (xs.shape[0],):
            raise ContractError(f"ys shape {ys.shape} does not match {xs.shape[0]} samples")
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", int(ys.max()) + 1)
        if ys.min() < 0 or ys.max() >= self.num_classes:
            raise ContractError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{ys.min()}, {ys.max()}]"
            )
        lo, hi = self.feature_range
        if xs.min() < lo or xs.max() > hi:
            raise ContractError(
                f"features outside declared range [{lo}, {hi}]: "
                f"[{xs.min()}, {xs.max()}]"
            )

    @property
    def n_samples(self) -> int:
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the 2-D synthetic families."""

    kind: str
    n_per_class: int
    noise_std: float = 0.1
    separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ContractError(f"unknown kind {self.kind!r}, expected one of {SYNTH_KINDS}")
        if self.n_per_class < 1:
            raise ContractError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.noise_std < 0:
            raise ContractError(f"noise_std must be >= 0, got {self.noise_std}")


def _rescale01(xs: np.ndarray) -> np.ndarray:
    lo = xs.min(axis=0)
    hi = xs.max(axis=0)
    span = hi - lo
    flat = span <= 0
    span = np.where(flat, 1.0, span)
    out = (xs - lo) / span
    out[:, flat] = 0.5
    return out


def generate(spec: SynthSpec) -> Dataset:
    """Seeded 2-class point clouds, affinely rescaled into [0, 1]^2."""
    rng = make_rng(spec.seed)
    n = spec.n_per_class
    if spec.kind == "two_gaussians":
        half = spec.separation / 2.0
        a = np.column_stack([np.full(n, -half), np.zeros(n)])
        b = np.column_stack([np.full(n, half), np.zeros(n)])
        pts = np.vstack([a, b]) + spec.noise_std * rng.standard_normal((2 * n, 2))
    elif spec.kind == "two_moons":
        th0 = rng.uniform(0.0, np.pi, n)
        th1 = rng.uniform(0.0, np.pi, n)
        a = np.column_stack([np.cos(th0), np.sin(th0)])
        b = np.column_stack([1.0 - np.cos(th1), spec.separation / 4.0 - np.sin(th1)])
        pts = np.vstack([a, b]) + spec.noise_std * rng.standard_normal((2 * n, 2))
    else:
        ph0 = rng.uniform(0.0, 2.0 * np.pi, n)
        ph1 = rng.uniform(0.0, 2.0 * np.pi, n)
        r0, r1 = 1.0, 1.0 + spec.separation
        a = np.column_stack([r0 * np.cos(ph0), r0 * np.sin(ph0)])
        b = np.column_stack([r1 * np.cos(ph1), r1 * np.sin(ph1)])
        pts = np.vstack([a, b]) + spec.noise_std * rng.standard_normal((2 * n, 2))
    ys = np.repeat(np.array([0, 1], dtype=np.int64), n)
    return Dataset(xs=_rescale01(pts), ys=ys, name=spec.kind, num_classes=2)


STRIPE_LAYOUTS = ("half_pairs", "orientations")
STRIPE_LAYOUT_CLASSES = {"half_pairs": 5, "orientations": 4}


@dataclass(frozen=True)
class StripeSpec:
    """Striped-grating images, in one of two layouts.

    half_pairs is five classes with separate gratings in the top and
    bottom image halves: classes 1 and 2 are (horizontal, vertical) and
    (vertical, horizontal), class 0 alternates between (H, H) and (V, V)
    so it encodes agreement of the two halves, and classes 3 and 4 are
    whole-image diagonal and anti-diagonal gratings.  The agreement class
    makes a faint sample's ambiguity collapse onto a single rival class.
    orientations is four classes of whole-image gratings (horizontal,
    vertical, diagonal, anti-diagonal); the patterns are mutually
    orthogonal, so a faint sample's ambiguity spreads over every class
    instead of concentrating on one rival.

    Every grating has a random phase, which zeroes its mean and hides it
    from purely linear readouts.  A small per-class brightness step with
    larger per-sample jitter gives linear models a weak, noisy cue.
    amplitude_spread grades sample difficulty: each image's grating
    contrast is drawn uniformly from amplitude +- spread (floored at 0),
    so a single dataset spans near-invisible to strong patterns.
    amplitude_scales grades difficulty per class instead: entry c
    multiplies the contrast of every class-c image, so classes become
    learnable one after another rather than sample by sample.
    cycles may also be a per-class tuple under the orientations layout;
    higher spatial frequency takes longer to learn, which staggers the
    classes in time the same way amplitude_scales does.
    """

    n_per_class: int
    image_size: int = 12
    cycles: int | tuple[int, ...] = 4
    amplitude: float = 0.30
    amplitude_spread: float = 0.0
    amplitude_scales: tuple[float, ...] | None = None
    brightness_step: float = 0.025
    brightness_jitter: float = 0.035
    noise_std: float = 0.06
    layout: str = "half_pairs"
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ContractError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.image_size < 2 or self.image_size % 2 != 0:
            raise ContractError(f"image_size must be even and >= 2, got {self.image_size}")
        if self.noise_std < 0 or self.amplitude < 0 or self.amplitude_spread < 0:
            raise ContractError("amplitude, amplitude_spread and noise_std must be >= 0")
        if self.layout not in STRIPE_LAYOUTS:
            raise ContractError(
                f"unknown layout {self.layout!r}, expected one of {STRIPE_LAYOUTS}")
        if self.amplitude_scales is not None:
            scales = tuple(float(s) for s in self.amplitude_scales)
            if len(scales) != self.num_classes:
                raise ContractError(
                    f"amplitude_scales needs {self.num_classes} entries for layout "
                    f"{self.layout!r}, got {len(scales)}")
            if any(s < 0 for s in scales):
                raise ContractError("amplitude_scales entries must be >= 0")
            object.__setattr__(self, "amplitude_scales", scales)
        if not isinstance(self.cycles, int):
            cyc = tuple(int(c) for c in self.cycles)
            if self.layout != "orientations":
                raise ContractError("per-class cycles need the orientations layout")
            if len(cyc) != self.num_classes:
                raise ContractError(
                    f"cycles needs {self.num_classes} entries, got {len(cyc)}")
            if any(c < 1 for c in cyc):
                raise ContractError("cycles entries must be >= 1")
            object.__setattr__(self, "cycles", cyc)
        elif self.cycles < 1:
            raise ContractError(f"cycles must be >= 1, got {self.cycles}")

    @property
    def num_classes(self) -> int:
        return STRIPE_LAYOUT_CLASSES[self.layout]


def _grating(size: int, cycles: int, orientation: str, phase: float) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if orientation == "h":
        u = rr
    elif orientation == "v":
        u = cc
    elif orientation == "diag":
        u = rr + cc
    else:
        u = rr - cc
    return np.cos(2.0 * np.pi * cycles * u / size + phase)


def make_stripe_images(spec: StripeSpec) -> tuple[np.ndarray, np.ndarray]:
    """(u8 images [N, S, S], labels [N]) with N = 5 * n_per_class."""
    rng = make_rng(spec.seed)
    s = spec.image_size
    half = s // 2
    k = spec.num_classes
    images = np.empty((k * spec.n_per_class, s, s), dtype=np.uint8)
    labels = np.repeat(np.arange(k, dtype=np.int64), spec.n_per_class)
    row = 0
    for c in range(k):
        for i in range(spec.n_per_class):
            base = (0.5 + spec.brightness_step * (c - (k - 1) / 2)
                    + spec.brightness_jitter * rng.standard_normal())
            amp = spec.amplitude
            if spec.amplitude_scales is not None:
                amp *= spec.amplitude_scales[c]
            if spec.amplitude_spread > 0:
                amp = max(0.0, amp + rng.uniform(-spec.amplitude_spread,
                                                 spec.amplitude_spread))
            img = np.full((s, s), base)
            if spec.layout == "orientations":
                kind = ("h", "v", "diag", "anti")[c]
                cyc = spec.cycles if isinstance(spec.cycles, int) else spec.cycles[c]
                img += amp * _grating(
                    s, cyc, kind, rng.uniform(0.0, 2.0 * np.pi))
            elif c <= 2:
                if c == 0:
                    top = bot = "h" if i % 2 == 0 else "v"
                elif c == 1:
                    top, bot = "h", "v"
                else:
                    top, bot = "v", "h"
                img[:half] += amp * _grating(
                    s, spec.cycles, top, rng.uniform(0.0, 2.0 * np.pi))[:half]
                img[half:] += amp * _grating(
                    s, spec.cycles, bot, rng.uniform(0.0, 2.0 * np.pi))[half:]
            else:
                kind = "diag" if c == 3 else "anti"
                img += amp * _grating(
                    s, spec.cycles, kind, rng.uniform(0.0, 2.0 * np.pi))
            img += spec.noise_std * rng.standard_normal((s, s))
            images[row] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
            row += 1
    return images, labels


def make_stripe_dataset(spec: StripeSpec) -> Dataset:
    """Striped-grating images as a flattened [N, S*S] dataset in [0, 1]."""
    images, labels = make_stripe_images(spec)
    xs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(xs=xs, ys=labels, name="stripe_images",
                   num_classes=spec.num_classes)


@dataclass(frozen=True)
class ProtoSpec:
    """Images built from per-cluster random prototype patterns.

    Each class is a union of clusters_per_class clusters.  A cluster has a
    fixed random zero-mean pattern (unit RMS over pixels), and its samples
    are mid-gray plus contrast times that pattern plus pixel noise.  The
    patterns are mutually near-orthogonal, so the network learns each
    cluster on its own: a cluster's contrast sets when, if ever, it is
    picked up during training.  contrasts is one row per class with one
    entry per cluster; entries at or below the noise floor leave that
    cluster at chance level for good.

    sign_flip multiplies each sample's pattern by a random sign.  The
    cluster mean then carries no trace of the pattern, so a purely linear
    readout cannot separate sign-flipped clusters; one rectifying layer
    recovers them through the magnitude of the template response.
    """

    n_per_class: int
    contrasts: tuple[tuple[float, ...], ...]
    image_size: int = 12
    noise_std: float = 0.10
    brightness_jitter: float = 0.02
    sign_flip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ContractError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.image_size < 2:
            raise ContractError(f"image_size must be >= 2, got {self.image_size}")
        if self.noise_std < 0 or self.brightness_jitter < 0:
            raise ContractError("noise_std and brightness_jitter must be >= 0")
        rows = tuple(tuple(float(c) for c in row) for row in self.contrasts)
        if len(rows) < 2:
            raise ContractError("contrasts needs at least two classes")
        width = len(rows[0])
        if width < 1 or any(len(r) != width for r in rows):
            raise ContractError("contrasts rows must be nonempty and equal-length")
        if any(c < 0 for r in rows for c in r):
            raise ContractError("contrasts entries must be >= 0")
        if self.n_per_class % width != 0:
            raise ContractError(
                f"n_per_class must be divisible by {width} clusters, "
                f"got {self.n_per_class}")
        object.__setattr__(self, "contrasts", rows)

    @property
    def num_classes(self) -> int:
        return len(self.contrasts)

    @property
    def clusters_per_class(self) -> int:
        return len(self.contrasts[0])


def make_proto_images(spec: ProtoSpec) -> tuple[np.ndarray, np.ndarray]:
    """(u8 images [N, S, S], labels [N]) with N = num_classes * n_per_class."""
    rng = make_rng(spec.seed)
    s = spec.image_size
    k = spec.num_classes
    m = spec.clusters_per_class
    per_cluster = spec.n_per_class // m
    protos = rng.standard_normal((k, m, s, s))
    protos -= protos.mean(axis=(2, 3), keepdims=True)
    protos /= np.sqrt((protos ** 2).mean(axis=(2, 3), keepdims=True))
    images = np.empty((k * spec.n_per_class, s, s), dtype=np.uint8)
    labels = np.repeat(np.arange(k, dtype=np.int64), spec.n_per_class)
    row = 0
    for c in range(k):
        for j in range(m):
            contrast = spec.contrasts[c][j]
            for _ in range(per_cluster):
                base = 0.5 + spec.brightness_jitter * rng.standard_normal()
                sign = 1.0
                if spec.sign_flip:
                    sign = 1.0 if rng.uniform() < 0.5 else -1.0
                img = base + sign * contrast * protos[c, j]
                img += spec.noise_std * rng.standard_normal((s, s))
                images[row] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
                row += 1
    return images, labels


def make_proto_dataset(spec: ProtoSpec) -> Dataset:
    """Prototype-cluster images as a flattened [N, S*S] dataset in [0, 1]."""
    images, labels = make_proto_images(spec)
    xs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(xs=xs, ys=labels, name="prototype_clusters",
                   num_classes=spec.num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write u8 images [N, H, W] and labels [N] as an IDX file pair."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3:
        raise ContractError(f"images must be [N, H, W], got {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ContractError(f"labels shape {labels.shape} does not match {images.shape[0]}")
    if images.dtype != np.uint8:
        raise ContractError(f"images must be u8, got dtype {images.dtype}")
    if labels.min() < 0 or labels.max() > 255:
        raise ContractError("labels must fit in a byte")
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


def _read_exact(fh, count: int, path, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(
            f"{path}: truncated {what} at offset {offset} "
            f"(wanted {count} bytes, file had {len(data)})"
        )
    return data


def load_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Parse an IDX image/label file pair into a flattened [0, 1] dataset.

    limit keeps the first `limit` samples; a limit beyond the stored count
    returns everything and records a warning on the dataset.
    """
    with open(images_path, "rb") as fh:
        magic, n_img, h, w = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(fh, n_img * h * w, images_path, "image payload")
    with open(labels_path, "rb") as fh:
        magic, n_lab = struct.unpack(">II", _read_exact(fh, 8, labels_path, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        raw_labels = _read_exact(fh, n_lab, labels_path, "label payload")
    if n_img != n_lab:
        raise FormatError(
            f"sample count mismatch: {images_path} stores {n_img}, "
            f"{labels_path} stores {n_lab}"
        )
    warnings = ()
    take = n_img
    if limit is not None:
        if limit < 1:
            raise ContractError(f"limit must be >= 1, got {limit}")
        if limit > n_img:
            warnings = (f"limit {limit} exceeds stored count {n_img}; returning all",)
        take = min(limit, n_img)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n_img, h * w)[:take]
    ys = np.frombuffer(raw_labels, dtype=np.uint8)[:take].astype(np.int64)
    xs = images.astype(np.float64) / 255.0
    return Dataset(xs=xs, ys=ys, name=str(images_path), warnings=warnings)


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle and partition; both sides must keep >= 2 classes."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = make_rng(seed)
    perm = rng.permutation(ds.n_samples)
    n_train = int(round(train_fraction * ds.n_samples))
    if n_train < 1 or n_train >= ds.n_samples:
        raise DegenerateInputError(
            f"train_fraction {train_fraction} leaves an empty split "
            f"for {ds.n_samples} samples"
        )
    tr_idx, te_idx = perm[:n_train], perm[n_train:]
    for tag, idx in (("train", tr_idx), ("test", te_idx)):
        if np.unique(ds.ys[idx]).size < 2:
            raise DegenerateInputError(
                f"{tag} split would hold fewer than 2 classes; "
                "cross-label statistics need at least 2"
            )
    train = replace(ds, xs=ds.xs[tr_idx], ys=ds.ys[tr_idx], split="train")
    test = replace(ds, xs=ds.xs[te_idx], ys=ds.ys[te_idx], split="test")
    return train, test
