"""Synthetic volumes, preprocessing, augmentation, Dice and the on-disk format.

Volumes are written as a JSON header plus one raw little-endian payload file
per array (see ``docs/FORMATS.md``). Raw intensities are CT-like Hounsfield
units so the clip-then-percentile normalization runs on realistic ranges.
"""

from __future__ import annotations

import json
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .tensor import generator

VOLUME_FORMAT = "deformux-volume"
VOLUME_VERSION = 1
AXIS_ORDER = "NCDHW"
_ALLOWED_DTYPES = {"<f4", "<f8", "|u1", "<i4"}


class VolumeFormatError(ValueError):
    pass


class SynthError(RuntimeError):
    pass


@dataclass
class SegmentationSample:
    image: np.ndarray  # (1, D, H, W) float
    labels: np.ndarray  # (D, H, W) integer
    classes: int = 2
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    @property
    def spatial(self) -> Tuple[int, int, int]:
        return self.labels.shape


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    clip_min: float = -175.0
    clip_max: float = 250.0
    percentile_lo: float = 1.0
    percentile_hi: float = 99.0

    def __post_init__(self):
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        if not 0 < self.percentile_lo < self.percentile_hi < 100:
            raise ValueError("percentiles must satisfy 0 < lo < hi < 100")


def preprocess(raw: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Clip to the intensity window, then ``(X - X_lo) / (X_hi - X_lo)``.

    Percentiles are taken on the clipped volume with linear interpolation
    between order statistics. The result is not re-clipped to [0, 1]. A volume
    whose two percentiles coincide maps to all zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("preprocess: raw volume contains NaN or Inf")
    x = np.clip(raw, cfg.clip_min, cfg.clip_max)
    lo, hi = np.percentile(x, [cfg.percentile_lo, cfg.percentile_hi])
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "spheres"  # spheres | tubes | mixed
    shape: Tuple[int, int, int] = (32, 32, 32)
    count: Tuple[int, int] = (1, 3)
    radius: Tuple[float, float] = (4.0, 7.0)
    elongation: float = 0.25
    centered: bool = False
    tube_count: Tuple[int, int] = (1, 2)
    tube_radius: Tuple[float, float] = (1.0, 2.5)
    curvature: float = 0.5
    noise: float = 25.0
    background_hu: float = 30.0
    organ_hu: float = 150.0
    vessel_hu: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("spheres", "tubes", "mixed"):
            raise ValueError(f"unknown synth kind {self.kind!r}")
        if any(s <= 0 for s in self.shape):
            raise ValueError("shape extents must be positive")
        if self.radius[0] > self.radius[1] or self.count[0] > self.count[1]:
            raise ValueError("ranges must be (low, high)")
        if 2 * self.radius[0] * (1 + self.elongation) > min(self.shape):
            raise ValueError(f"radius range {self.radius} does not fit in {self.shape}")

    @property
    def classes(self) -> int:
        return 3 if self.kind == "mixed" else 2

    def to_dict(self) -> dict:
        return asdict(self)


def _grid(shape):
    return np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"), axis=-1)


def _try_place(spec, rng, shape, n, max_tries):
    placed = []
    for _ in range(n):
        for _attempt in range(max_tries):
            r = rng.uniform(spec.radius[0], spec.radius[1])
            axes = r * (1.0 + rng.uniform(-spec.elongation, spec.elongation, 3))
            lo, hi = axes + 1.0, shape - axes - 2.0
            if np.any(hi < lo):
                continue
            center = (shape - 1.0) / 2.0 if spec.centered and not placed else rng.uniform(lo, hi)
            if all(np.linalg.norm(center - c) > a.max() + axes.max() + 1.0 for c, a in placed):
                placed.append((center, axes))
                break
        else:
            return None  # an early placement left no room; start over
    return placed


def _place_ellipsoids(spec: SynthSpec, rng, coords, max_tries=200, restarts=20):
    shape = np.array(spec.shape, dtype=np.float64)
    n = int(rng.integers(spec.count[0], spec.count[1] + 1))
    for _restart in range(restarts):
        placed = _try_place(spec, rng, shape, n, max_tries)
        if placed is not None:
            break
    else:
        raise SynthError(f"could not place {n} non-overlapping ellipsoids in {spec.shape} "
                         f"after {restarts} restarts of {max_tries} tries each")
    mask = np.zeros(spec.shape, dtype=bool)
    for center, axes in placed:
        mask |= (((coords - center) / axes) ** 2).sum(axis=-1) <= 1.0
    return mask, [{"center": c.tolist(), "axes": a.tolist()} for c, a in placed]


def _tube_centerline(spec: SynthSpec, rng):
    shape = np.array(spec.shape, dtype=np.float64)
    axis = int(rng.integers(0, 3))
    others = [a for a in range(3) if a != axis]
    length = shape[axis]
    t = np.linspace(0.0, 1.0, int(length * 10) + 1)
    pts = np.zeros((t.size, 3))
    pts[:, axis] = -0.5 + t * length
    for a in others:
        amp = spec.curvature * shape[a] / 4.0
        base = rng.uniform(amp + 3.0, shape[a] - amp - 4.0) if shape[a] - 2 * amp > 7.0 else shape[a] / 2
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pts[:, a] = base + amp * np.sin(2.0 * np.pi * freq * t + phase)
    return pts


def synth_generate(spec: SynthSpec) -> SegmentationSample:
    """Raw CT-like volume (Hounsfield units) and exact labels for ``spec``.

    Spheres are bright ellipsoids (label 1); tubes are curved cylinders of
    radius ``tube_radius`` around a stored centerline (label 1, or 2 in
    ``mixed``). Voxels outside an inscribed body cylinder are air (-1000 HU),
    below the clip window.
    """
    rng = generator(spec.seed)
    coords = _grid(spec.shape)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    image = np.full(spec.shape, spec.background_hu)
    prov = {"generator": spec.kind, "spec": spec.to_dict()}
    if spec.kind in ("spheres", "mixed"):
        mask, objs = _place_ellipsoids(spec, rng, coords)
        labels[mask] = 1
        image[mask] = spec.organ_hu
        prov["ellipsoids"] = objs
    if spec.kind in ("tubes", "mixed"):
        tree_pts, tubes = [], []
        tube_mask = np.zeros(spec.shape, dtype=bool)
        n = int(rng.integers(spec.tube_count[0], spec.tube_count[1] + 1))
        for _ in range(n):
            line = _tube_centerline(spec, rng)
            r = float(rng.uniform(*spec.tube_radius))
            dist, _ = cKDTree(line).query(coords.reshape(-1, 3))
            tube_mask |= dist.reshape(spec.shape) <= r
            tubes.append({"radius": r, "centerline": line.tolist()})
        labels[tube_mask] = 1 if spec.kind == "tubes" else 2
        image[tube_mask] = spec.vessel_hu
        prov["tubes"] = tubes
    d, h, w = spec.shape
    body = ((coords[..., 1] - (h - 1) / 2) / (h / 2)) ** 2 + ((coords[..., 2] - (w - 1) / 2) / (w / 2)) ** 2 > 1.0
    image[body & (labels == 0)] = -1000.0
    if spec.noise > 0:
        image = image + rng.standard_normal(spec.shape) * spec.noise
    return SegmentationSample(image[None].astype(np.float32), labels, spec.classes, prov)


# ---------------------------------------------------------------------------
# augmentation and cropping


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.5
    intensity_offset: float = 0.1
    rotation_degrees: float = 30.0
    scale: float = 0.1


def augment(sample: SegmentationSample, seed: int, cfg: AugmentConfig = AugmentConfig()) -> SegmentationSample:
    """Random intensity shift, axis-pair rotation and per-axis scaling.

    Each transform fires independently with ``cfg.probability``. Geometric
    transforms are combined into one affine resampling (trilinear for the
    image, nearest for labels); when neither fires nothing is resampled.
    """
    rng = generator(seed)
    image, labels = sample.image, sample.labels
    if rng.uniform() < cfg.probability:
        image = image + np.float32(rng.uniform(-cfg.intensity_offset, cfg.intensity_offset))
    matrix = np.eye(3)
    geometric = False
    if rng.uniform() < cfg.probability:
        a, b = [(0, 1), (0, 2), (1, 2)][int(rng.integers(0, 3))]
        theta = np.deg2rad(rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees))
        rot = np.eye(3)
        rot[a, a] = rot[b, b] = np.cos(theta)
        rot[a, b], rot[b, a] = -np.sin(theta), np.sin(theta)
        matrix = rot @ matrix
        geometric = True
    if rng.uniform() < cfg.probability:
        matrix = np.diag(rng.uniform(1.0 - cfg.scale, 1.0 + cfg.scale, 3)) @ matrix
        geometric = True
    if geometric:
        center = (np.array(labels.shape, dtype=np.float64) - 1.0) / 2.0
        offset = center - matrix @ center
        image = ndimage.affine_transform(image[0], matrix, offset, order=1, mode="nearest")[None]
        labels = ndimage.affine_transform(labels, matrix, offset, order=0, mode="constant", cval=0)
    return SegmentationSample(image.astype(sample.image.dtype), labels.astype(sample.labels.dtype),
                              sample.classes, dict(sample.provenance, augment_seed=int(seed)))


def crop_patches(sample: SegmentationSample, patch_size: Sequence[int], count: int, seed: int) -> List[SegmentationSample]:
    """``count`` patches, each containing a randomly chosen foreground voxel.

    The chosen voxel sits at the patch center unless the volume border forces
    a shift. Samples without foreground get uniformly placed patches.
    """
    patch = tuple(int(p) for p in patch_size)
    shape = sample.spatial
    if any(p > s for p, s in zip(patch, shape)):
        raise ValueError(f"patch {patch} larger than volume {shape}")
    rng = generator(seed)
    fg = np.argwhere(sample.labels > 0)
    out = []
    for _ in range(count):
        if len(fg):
            c = fg[int(rng.integers(0, len(fg)))]
            start = [min(max(int(ci) - p // 2, 0), s - p) for ci, p, s in zip(c, patch, shape)]
        else:
            start = [int(rng.integers(0, s - p + 1)) for p, s in zip(patch, shape)]
        sl = tuple(slice(st, st + p) for st, p in zip(start, patch))
        out.append(SegmentationSample(sample.image[(slice(None),) + sl].copy(), sample.labels[sl].copy(),
                                      sample.classes, dict(sample.provenance, crop_start=start)))
    return out


# ---------------------------------------------------------------------------
# metrics


def dice(pred: np.ndarray, gt: np.ndarray, cls: int, num_classes: Optional[int] = None) -> float:
    """``2|A & B| / (|A| + |B|)`` for class ``cls``; 1.0 when both are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if cls < 0 or (num_classes is not None and cls >= num_classes):
        raise ValueError(f"class {cls} out of range")
    a, b = pred == cls, gt == cls
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    """(N, D, H, W) labels -> (N, classes, D, H, W)."""
    return (labels[:, None] == np.arange(classes).reshape(1, -1, 1, 1, 1)).astype(dtype)


def dice_loss(probs: np.ndarray, onehot: np.ndarray, eps: float = 1e-5) -> float:
    from .autograd import soft_dice_loss

    return float(soft_dice_loss(probs, onehot, eps).value)


# ---------------------------------------------------------------------------
# volume files


def _payload_path(header: Path, key: str) -> Path:
    return header.with_name(f"{header.stem}.{key}.raw")


def save_volume(sample: SegmentationSample, path) -> Path:
    """Write ``<path>`` (JSON header) plus ``<stem>.image.raw`` and ``<stem>.labels.raw``."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    d, h, w = sample.spatial
    header = {"format": VOLUME_FORMAT, "version": VOLUME_VERSION, "axis_order": AXIS_ORDER,
              "classes": int(sample.classes), "provenance": sample.provenance}
    for key, arr in (("image", sample.image), ("labels", sample.labels)):
        a = np.ascontiguousarray(arr.reshape(1, 1, d, h, w))
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        payload = _payload_path(path, key)
        payload.write_bytes(a.tobytes())
        header[key] = {"file": payload.name, "dtype": a.dtype.str, "shape": list(a.shape)}
    path.write_text(json.dumps(header, indent=1, sort_keys=True))
    return path


def load_volume(path) -> SegmentationSample:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{path}: header is not valid JSON ({e})") from None
    if header.get("format") != VOLUME_FORMAT or header.get("version") != VOLUME_VERSION:
        raise VolumeFormatError(f"{path}: not a {VOLUME_FORMAT} v{VOLUME_VERSION} header")
    if header.get("axis_order") != AXIS_ORDER:
        raise VolumeFormatError(f"{path}: axis order {header.get('axis_order')!r} is not {AXIS_ORDER!r}")
    arrays = {}
    for key in ("image", "labels"):
        entry = header.get(key)
        if not isinstance(entry, dict) or not {"file", "dtype", "shape"} <= set(entry):
            raise VolumeFormatError(f"{path}: missing or malformed {key!r} entry")
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise VolumeFormatError(f"{path}: unsupported {key} dtype {entry['dtype']!r}")
        shape = tuple(int(s) for s in entry["shape"])
        if len(shape) != 5 or shape[:2] != (1, 1):
            raise VolumeFormatError(f"{path}: {key} shape {shape} is not (1, 1, D, H, W)")
        dt = np.dtype(entry["dtype"])
        raw = (path.parent / entry["file"]).read_bytes()
        expected = int(np.prod(shape)) * dt.itemsize
        if len(raw) != expected:
            raise VolumeFormatError(f"{path}: {key} payload has {len(raw)} bytes, expected {expected}")
        arrays[key] = np.frombuffer(raw, dtype=dt).reshape(shape)
    if arrays["image"].shape != arrays["labels"].shape:
        raise VolumeFormatError(f"{path}: image and labels shapes differ")
    image = arrays["image"][0].astype(arrays["image"].dtype.newbyteorder("="))
    labels = arrays["labels"][0, 0].astype(arrays["labels"].dtype.newbyteorder("="))
    return SegmentationSample(image, labels, int(header.get("classes", 2)), header.get("provenance", {}))


# ---------------------------------------------------------------------------
# datasets


SPLITS = ("train", "val", "test")


def split_names(count: int, fractions=(0.8, 0.1, 0.1)) -> List[str]:
    n_train = int(round(count * fractions[0]))
    n_val = int(round(count * fractions[1]))
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (count - n_train - n_val)


def generate_dataset(out_dir, spec: SynthSpec, count: int, fractions=(0.8, 0.1, 0.1)) -> Path:
    """Write ``count`` volumes and ``manifest.json`` (a list of {path, split})."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, split in enumerate(split_names(count, fractions)):
        sample = synth_generate(replace(spec, seed=spec.seed * 100003 + i))
        p = save_volume(sample, out / f"{spec.kind}_{i:03d}.json")
        entries.append({"path": p.name, "split": split})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


def read_manifest(path) -> Dict[str, List[Path]]:
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise VolumeFormatError(f"{path}: manifest must be a JSON list")
    out = {s: [] for s in SPLITS}
    for e in entries:
        if e.get("split") not in out:
            raise VolumeFormatError(f"{path}: unknown split {e.get('split')!r}")
        out[e["split"]].append(path.parent / e["path"])
    return out


def load_samples(paths: Iterable, workers: int = 2,
                 pre: PreprocessConfig = PreprocessConfig()) -> Iterator[SegmentationSample]:
    """Load and preprocess volumes with at most ``workers`` in flight, in request order."""

    def work(p):
        s = load_volume(p)
        return replace(s, image=preprocess(s.image, pre).astype(np.float32))

    paths = list(paths)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pending = deque()
        it = iter(paths)
        for p in it:
            pending.append(pool.submit(work, p))
            if len(pending) >= workers:
                break
        for p in it:
            yield pending.popleft().result()
            pending.append(pool.submit(work, p))
        while pending:
            yield pending.popleft().result()
