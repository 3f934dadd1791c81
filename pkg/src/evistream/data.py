"""Volumes: synthetic generation, on-disk layout, slice ordering."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import ConfigError


class DataError(ValueError):
    pass


@dataclass
class VolumeSample:
    subject_id: str
    slices: np.ndarray  # (n, H, W) float32 in [0, 1]
    label: int

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        if self.slices.ndim == 2:
            self.slices = self.slices[None]
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise DataError(f"{self.subject_id}: need at least one (H, W) slice, got {self.slices.shape}")
        if self.label not in (0, 1):
            raise DataError(f"{self.subject_id}: label {self.label} not in {{0, 1}}")

    @property
    def n(self):
        return self.slices.shape[0]


@dataclass
class SyntheticSpec:
    subjects: int = 120
    min_slices: int = 10
    max_slices: int = 30
    image_size: int = 32
    amplitude: tuple[float, float] = (-0.25, 0.25)
    sigma: float = 2.0
    noise: float = 0.1
    blob_radius: float = 4.0
    jitter: int = 3
    seed: int = 0

    def __post_init__(self):
        self.amplitude = tuple(float(a) for a in self.amplitude)
        self.validate()

    def validate(self):
        if self.subjects < 2:
            raise ConfigError("need at least two subjects")
        if self.min_slices < 1 or self.min_slices > self.max_slices:
            raise ConfigError(f"bad slice range [{self.min_slices}, {self.max_slices}]")
        if len(self.amplitude) != 2 or self.amplitude[0] == self.amplitude[1]:
            raise ConfigError("class amplitudes must be two different values")
        if self.sigma <= 0 or self.noise < 0 or self.image_size < 1:
            raise ConfigError("sigma must be positive, noise non-negative")

    def to_dict(self):
        d = asdict(self)
        d["amplitude"] = list(self.amplitude)
        return d


def slice_envelope(n, sigma):
    """Per-slice signal scale, peaking at the volume centre."""
    k = np.arange(n)
    mid = (n - 1) / 2.0
    return np.exp(-((k - mid) ** 2) / (2.0 * sigma ** 2))


def quantize(images):
    """Clip to [0, 1] and snap to the 8-bit grid used on disk."""
    pix = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pix.astype(np.float32) / 255.0


def generate_synthetic(spec, seed=None):
    """Balanced synthetic cohort with a centre-peaked class signal.

    Each slice is a uniform grey background plus pixel noise plus a Gaussian
    blob whose signed amplitude depends on the class and decays away from the
    central slice.  Values are clipped to [0, 1] and quantised to 8 bits so a
    round trip through the on-disk format is exact.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    labels = np.array([i % 2 for i in range(spec.subjects)])
    rng.shuffle(labels)
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    out = []
    for i, label in enumerate(labels):
        n = int(rng.integers(spec.min_slices, spec.max_slices + 1))
        cy, cx = (s - 1) / 2 + rng.integers(-spec.jitter, spec.jitter + 1, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * spec.blob_radius ** 2))
        env = slice_envelope(n, spec.sigma)
        amp = spec.amplitude[int(label)]
        vol = 0.5 + amp * env[:, None, None] * blob[None] + spec.noise * rng.standard_normal((n, s, s))
        out.append(VolumeSample(f"s{i:04d}", quantize(vol), int(label)))
    return out


def class_counts(samples):
    labels = [s.label for s in samples]
    return labels.count(0), labels.count(1)


# ----------------------------------------------------------------------
# slice order
# ----------------------------------------------------------------------

ORDER_POLICIES = ("left_to_right", "center_out")


def order_slices(n, policy="left_to_right"):
    """Visiting order of slice indices under ``policy``.

    ``center_out`` starts at ``n // 2`` and alternates right then left
    neighbours, moving outward.
    """
    if n < 1:
        raise DataError(f"cannot order {n} slices")
    if policy == "left_to_right":
        return list(range(n))
    if policy != "center_out":
        raise ConfigError(f"unknown slice order {policy!r}")
    mid = n // 2
    order = [mid]
    for d in range(1, n):
        for k in (mid + d, mid - d):
            if 0 <= k < n:
                order.append(k)
    return order


# ----------------------------------------------------------------------
# on-disk layout: manifest.csv + <subject>/slice_000.pgm ...
# ----------------------------------------------------------------------

MANIFEST_FIELDS = ("subject_id", "label", "n_slices", "directory")


def write_dataset(samples, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        d = root / s.subject_id
        d.mkdir(exist_ok=True)
        for k, img in enumerate(s.slices):
            pix = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
            Image.fromarray(pix).save(d / f"slice_{k:03d}.pgm")
        rows.append({"subject_id": s.subject_id, "label": s.label,
                     "n_slices": s.n, "directory": s.subject_id})
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return root / "manifest.csv"


def load_dataset(path):
    """Read a manifest (file or its directory) and every referenced slice."""
    path = Path(path)
    manifest = path / "manifest.csv" if path.is_dir() else path
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    root = manifest.parent
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"empty manifest: {manifest}")
    samples = []
    for row in rows:
        try:
            label = int(row["label"])
            n = int(row["n_slices"])
            sid = row["subject_id"]
            folder = root / row["directory"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest row {row}: {exc}") from None
        if label not in (0, 1):
            raise DataError(f"{sid}: label {label} not in {{0, 1}}")
        if n < 1:
            raise DataError(f"{sid}: slice count {n} < 1")
        files = sorted(folder.glob("slice_*.pgm"))
        expected = [folder / f"slice_{k:03d}.pgm" for k in range(n)]
        for f in expected:
            if not f.exists():
                raise FileNotFoundError(f"missing slice file: {f}")
        if len(files) != n:
            raise DataError(f"{sid}: manifest says {n} slices, found {len(files)}")
        imgs = [np.asarray(Image.open(f), dtype=np.float32) / 255.0 for f in expected]
        shapes = {im.shape for im in imgs}
        if len(shapes) != 1:
            raise DataError(f"{sid}: slices have differing shapes {sorted(shapes)}")
        samples.append(VolumeSample(sid, np.stack(imgs), label))
    return samples
