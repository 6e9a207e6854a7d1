"""Samples, EPA classes, manifests, preprocessing, augmentation and the synthetic corpus.

Manifest layout (UTF-8, comma separated, ``.`` decimal point)::

    id,image_path,aqi,pm25,pm10,no2,so2,co,o3

``image_path`` is relative to the manifest's directory and points at a PNG or
binary PPM (P6).  An empty pollutant field marks that reading as missing.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, ParameterError
from .rng import Rng

log = logging.getLogger(__name__)

POLLUTANTS = ("pm25", "pm10", "no2", "so2", "co", "o3")
POLLUTANT_LABELS = ("PM2.5", "PM10", "NO2", "SO2", "CO", "O3")
POLLUTANT_UNITS = ("ug/m3", "ug/m3", "ppb", "ppb", "ppb", "ppb")
MANIFEST_HEADER = ("id", "image_path", "aqi") + POLLUTANTS

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

AQI_MAX = 500.0
SPLITS = ("train", "val", "test")


class AqiClass(enum.IntEnum):
    Good = 0
    Moderate = 1
    UnhealthySensitive = 2
    Unhealthy = 3
    VeryUnhealthy = 4
    Hazardous = 5

    @property
    def label(self) -> str:
        return _CLASS_LABELS[self]

    @property
    def bounds(self) -> tuple[float, float]:
        """(exclusive low, inclusive high); Good includes 0 and Hazardous is unbounded."""
        return CLASS_BOUNDS[self]


_CLASS_LABELS = ("Good", "Moderate", "Unhealthy for Sensitive Groups", "Unhealthy",
                 "Very Unhealthy", "Hazardous")
_UPPER = (50.0, 100.0, 150.0, 200.0, 300.0)
CLASS_BOUNDS = {
    AqiClass.Good: (0.0, 50.0),
    AqiClass.Moderate: (50.0, 100.0),
    AqiClass.UnhealthySensitive: (100.0, 150.0),
    AqiClass.Unhealthy: (150.0, 200.0),
    AqiClass.VeryUnhealthy: (200.0, 300.0),
    AqiClass.Hazardous: (300.0, math.inf),
}


def classify_aqi(aqi: float) -> AqiClass:
    """EPA category of a (real-valued) AQI; a boundary value belongs to the lower class."""
    if not aqi >= 0:
        raise ParameterError(f"AQI must be non-negative, got {aqi}")
    for cls, hi in zip(AqiClass, _UPPER):
        if aqi <= hi:
            return cls
    return AqiClass.Hazardous


def classify_many(aqi: np.ndarray) -> np.ndarray:
    """Vectorised :func:`classify_aqi`, returning integer class indices."""
    a = np.asarray(aqi, dtype=float)
    if np.any(~(a >= 0)):
        raise ParameterError("AQI values must be non-negative")
    return np.searchsorted(np.array(_UPPER), a, side="left")


@dataclass
class Sample:
    image: np.ndarray                 # 3 x S x S, values in [0, 1]
    sensors: np.ndarray               # (6,) physical units
    aqi: float
    id: str = ""
    sensor_mask: np.ndarray = None    # (6,) True where the reading is available
    split: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sensors = np.asarray(self.sensors, dtype=np.float64)
        if self.sensor_mask is None:
            self.sensor_mask = np.ones(self.sensors.shape, dtype=bool)
        else:
            self.sensor_mask = np.asarray(self.sensor_mask, dtype=bool)

    @property
    def aqi_class(self) -> AqiClass:
        return classify_aqi(self.aqi)


# -------------------------------------------------------------------- scalers
@dataclass
class ScalerStats:
    sensor_mean: np.ndarray
    sensor_std: np.ndarray
    aqi_mean: float
    aqi_std: float
    image_mean: np.ndarray = field(default_factory=lambda: IMAGENET_MEAN.copy())
    image_std: np.ndarray = field(default_factory=lambda: IMAGENET_STD.copy())

    def to_dict(self) -> dict:
        return {
            "sensor_mean": [float(v) for v in self.sensor_mean],
            "sensor_std": [float(v) for v in self.sensor_std],
            "aqi_mean": float(self.aqi_mean),
            "aqi_std": float(self.aqi_std),
            "image_mean": [float(v) for v in self.image_mean],
            "image_std": [float(v) for v in self.image_std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerStats":
        return cls(np.array(d["sensor_mean"]), np.array(d["sensor_std"]), d["aqi_mean"], d["aqi_std"],
                   np.array(d["image_mean"]), np.array(d["image_std"]))


STD_FLOOR = 1e-8


def fit_scalers(train: Sequence[Sample]) -> ScalerStats:
    """Sensor and AQI z-score statistics from the training split only.

    Missing readings are excluded per channel.  A zero-variance channel gets
    its std clamped to 1e-8.
    """
    if not train:
        raise ParameterError("cannot fit scalers on an empty split")
    bad = [s.id for s in train if s.split not in (None, "train")]
    if bad:
        raise ParameterError(f"fit_scalers got non-training samples: {bad[:5]}")
    x = np.stack([s.sensors for s in train])
    m = np.stack([s.sensor_mask for s in train])
    mean = np.zeros(x.shape[1])
    std = np.ones(x.shape[1])
    for j in range(x.shape[1]):
        col = x[m[:, j], j]
        if col.size:
            mean[j] = col.mean()
            std[j] = col.std()
        if std[j] < STD_FLOOR:
            log.warning("sensor channel %s has zero variance; std clamped to %g", POLLUTANTS[j], STD_FLOOR)
            std[j] = STD_FLOOR
    y = np.array([s.aqi for s in train])
    ystd = y.std()
    if ystd < STD_FLOOR:
        log.warning("AQI has zero variance in the training split; std clamped to %g", STD_FLOOR)
        ystd = STD_FLOOR
    return ScalerStats(mean, std, float(y.mean()), float(ystd))


def standardize_sensors(x: np.ndarray, stats: ScalerStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.sensor_mean) / stats.sensor_std


def destandardize_sensors(z: np.ndarray, stats: ScalerStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.sensor_std + stats.sensor_mean


def normalize_image(image: np.ndarray, stats: ScalerStats | None = None) -> np.ndarray:
    """Per-channel ImageNet normalisation of a 3 x H x W (or N x 3 x H x W) image."""
    mean = IMAGENET_MEAN if stats is None else stats.image_mean
    std = IMAGENET_STD if stats is None else stats.image_std
    return (image - mean[:, None, None]) / std[:, None, None]


def standardize(sample: Sample, stats: ScalerStats) -> Sample:
    """Copy of ``sample`` with normalised image and z-scored sensors; missing readings set to 0."""
    z = np.where(sample.sensor_mask, standardize_sensors(sample.sensors, stats), 0.0)
    return dataclasses.replace(sample, image=normalize_image(sample.image, stats), sensors=z,
                               sensor_mask=sample.sensor_mask.copy(), meta=dict(sample.meta))


@dataclass
class Arrays:
    """Column-stacked, model-ready view of a list of samples."""
    images: np.ndarray        # N x 3 x S x S, raw [0, 1]
    sensors: np.ndarray       # N x 6, standardized, missing = 0
    mask: np.ndarray          # N x 6 bool
    aqi: np.ndarray           # N, raw index units
    ids: list

    def __len__(self):
        return len(self.aqi)

    def subset(self, idx) -> "Arrays":
        idx = np.asarray(idx)
        return Arrays(self.images[idx], self.sensors[idx], self.mask[idx], self.aqi[idx],
                      [self.ids[i] for i in idx])


def to_arrays(samples: Sequence[Sample], stats: ScalerStats) -> Arrays:
    mask = np.stack([s.sensor_mask for s in samples])
    sensors = np.where(mask, standardize_sensors(np.stack([s.sensors for s in samples]), stats), 0.0)
    return Arrays(np.stack([s.image for s in samples]).astype(np.float32), sensors, mask,
                  np.array([s.aqi for s in samples], dtype=np.float64), [s.id for s in samples])


# ------------------------------------------------------------------ splitting
def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    ideal = [total * f for f in fractions]
    counts = [int(math.floor(v)) for v in ideal]
    order = sorted(range(len(ideal)), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(samples: Sequence[Sample], fractions=(0.70, 0.15, 0.15), seed: int = 42) -> list[Sample]:
    """Tag every sample train/val/test, preserving AQI-class proportions.

    Overall split sizes are the largest-remainder rounding of ``fractions``.
    Within each class, counts are the floor or ceiling of the ideal share, so
    class proportions hold to within one sample.  Returns copies in input
    order with ``split`` set.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(samples)
    targets = _largest_remainder(n, fractions)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(int(s.aqi_class), []).append(i)
    classes = sorted(by_class)

    ideal = {c: [len(by_class[c]) * f for f in fractions] for c in classes}
    alloc = {c: [int(math.floor(v)) for v in ideal[c]] for c in classes}
    row_need = {c: len(by_class[c]) - sum(alloc[c]) for c in classes}
    col_need = [targets[s] - sum(alloc[c][s] for c in classes) for s in range(3)]
    # Gale-Ryser style fill: each (class, split) cell receives at most one extra sample.
    for c in sorted(classes, key=lambda c: (-row_need[c], c)):
        for _ in range(row_need[c]):
            cands = [s for s in range(3) if col_need[s] > 0 and alloc[c][s] == math.floor(ideal[c][s])]
            s = max(cands, key=lambda s: (col_need[s], ideal[c][s] - math.floor(ideal[c][s]), -s))
            alloc[c][s] += 1
            col_need[s] -= 1

    rng = Rng(seed).split("stratified_split")
    tags = [None] * n
    for c in classes:
        members = np.array(by_class[c])[rng.split(f"class{c}").permutation(len(by_class[c]))]
        start = 0
        for s, name in enumerate(SPLITS):
            for i in members[start: start + alloc[c][s]]:
                tags[i] = name
            start += alloc[c][s]
    return [dataclasses.replace(s, split=t) for s, t in zip(samples, tags)]


def by_split(samples: Sequence[Sample], split: str) -> list[Sample]:
    return [s for s in samples if s.split == split]


# ---------------------------------------------------------------- augmentation
def augment(image: np.ndarray, rng: Rng, *, flip: bool | None = None, brightness: float | None = None,
            contrast: float | None = None, angle: float | None = None) -> np.ndarray:
    """Random flip, brightness/contrast jitter and rotation of a 3 x S x S image.

    Factors are uniform in [0.8, 1.2] and the angle uniform in [-15, 15]
    degrees (bilinear, zero fill).  Any keyword fixes that component.  The
    output is clamped to [0, 1].
    """
    draws = rng.random(4)
    flip = bool(draws[0] < 0.5) if flip is None else flip
    brightness = 0.8 + 0.4 * draws[1] if brightness is None else brightness
    contrast = 0.8 + 0.4 * draws[2] if contrast is None else contrast
    angle = -15.0 + 30.0 * draws[3] if angle is None else angle

    out = np.asarray(image, dtype=np.float64)
    if flip:
        out = out[:, :, ::-1]
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        gray = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]).mean()
        out = np.clip(contrast * out + (1.0 - contrast) * gray, 0.0, 1.0)
    if angle != 0.0:
        out = ndimage.rotate(out, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.asarray(image).dtype)


# ----------------------------------------------------------------- image files
def read_image(path, size: int | None = None) -> np.ndarray:
    """Decode a PNG/PPM into a float32 3 x S x S array in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


# -------------------------------------------------------------------- manifest
@dataclass
class LoadReport:
    rows: int = 0
    loaded: int = 0
    errors: list = field(default_factory=list)   # (line number, id, reason)

    @property
    def skipped(self) -> int:
        return len(self.errors)

    def __str__(self):
        lines = [f"{self.loaded}/{self.rows} rows loaded, {self.skipped} skipped"]
        lines += [f"  line {ln} ({sid or '?'}): {why}" for ln, sid, why in self.errors]
        return "\n".join(lines)


def load_manifest(path, image_size: int = 64) -> tuple[list[Sample], LoadReport]:
    """Read a manifest and decode its images.

    Rows with a missing id/image/AQI, an AQI outside [0, 500], a negative or
    non-numeric reading, or an undecodable image are skipped and itemised in
    the returned :class:`LoadReport`.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open manifest {path}: {exc}") from exc
    report = LoadReport()
    samples: list[Sample] = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return samples, report
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            report.rows += 1
            line = reader.line_num
            sid = row[0].strip() if row else ""
            try:
                samples.append(_parse_row(row, path.parent, image_size))
            except (ValueError, OSError) as exc:
                report.errors.append((line, sid, str(exc)))
    report.loaded = len(samples)
    if report.errors:
        log.warning("%s: skipped %d of %d rows", path, report.skipped, report.rows)
    return samples, report


def _parse_row(row, root: Path, image_size: int) -> Sample:
    if len(row) != len(MANIFEST_HEADER):
        raise ValueError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
    sid, img, aqi_s = (c.strip() for c in row[:3])
    if not sid or not img or not aqi_s:
        raise ValueError("missing required field (id, image_path or aqi)")
    aqi = float(aqi_s)
    if not 0.0 <= aqi <= AQI_MAX:
        raise ValueError(f"aqi {aqi} outside [0, {AQI_MAX:g}]")
    vals, mask = [], []
    for name, cell in zip(POLLUTANTS, row[3:]):
        cell = cell.strip()
        if not cell:
            vals.append(0.0)
            mask.append(False)
            continue
        v = float(cell)
        if not v >= 0.0:
            raise ValueError(f"{name} reading {v} is negative or not a number")
        vals.append(v)
        mask.append(True)
    try:
        image = read_image(root / img, image_size)
    except Exception as exc:
        raise OSError(f"cannot decode image {img}: {exc}") from exc
    return Sample(image, np.array(vals), aqi, sid, np.array(mask))


def write_manifest(samples: Sequence[Sample], out_dir, image_dir: str = "images") -> Path:
    """Write PNG images plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / image_dir).mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in samples:
            rel = f"{image_dir}/{s.id}.png"
            write_png(out_dir / rel, s.image)
            cells = [repr(float(v)) if m else "" for v, m in zip(s.sensors, s.sensor_mask)]
            w.writerow([s.id, rel, repr(float(s.aqi))] + cells)
    return path


# ----------------------------------------------------------- synthetic corpus
# True pollutant level as an affine map of AQI: concentration = offset + slope * AQI.
POLLUTANT_MAP = {
    "pm25": (0.0, 0.45),      # ug/m3; 500 AQI -> 225, i.e. haze opacity 0.9
    "pm10": (0.0, 0.90),      # ug/m3
    "no2": (5.0, 0.25),       # ppb
    "so2": (2.0, 0.04),       # ppb
    "co": (300.0, 8.0),       # ppb
    "o3": (20.0, 0.08),       # ppb
}
# Multiplicative log-normal measurement noise (sigma of log) per pollutant.
SENSOR_NOISE = {"pm25": 0.15, "pm10": 0.25, "no2": 0.35, "so2": 0.45, "co": 0.35, "o3": 0.45}
PM10_DIM = 0.4          # brightness loss at PM10 = PM10_REF
PM10_REF = 450.0
HAZE_TEXTURE = 0.35     # relative amplitude of the spatial haze texture


def true_concentrations(aqi: float) -> np.ndarray:
    return np.array([POLLUTANT_MAP[p][0] + POLLUTANT_MAP[p][1] * aqi for p in POLLUTANTS])


def haze_opacity(pm25: float) -> float:
    return float(np.clip(pm25 / 250.0, 0.0, 0.9))


def _smooth_field(rng: Rng, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.normal(size=(cells + 1, cells + 1))
    f = ndimage.zoom(coarse, size / (cells + 1), order=1, mode="nearest")[:size, :size]
    f = f - f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def render_scene(rng: Rng, size: int) -> np.ndarray:
    """Clear-air scene: graded sky, skyline of box buildings, ground; 3 x S x S."""
    y = (np.arange(size) + 0.5)[:, None] / size
    x = (np.arange(size) + 0.5)[None, :] / size
    top = np.array([0.20, 0.42, 0.85]) + rng.uniform(-0.05, 0.05, 3)
    low = np.array([0.62, 0.78, 0.96]) + rng.uniform(-0.05, 0.04, 3)
    horizon = rng.uniform(0.55, 0.78)
    t = np.clip(y / horizon, 0.0, 1.0)[None]
    img = top[:, None, None] * (1 - t) + low[:, None, None] * t
    img = np.broadcast_to(img, (3, size, size)).copy()

    ground = np.array([0.30, 0.36, 0.22]) + rng.uniform(-0.08, 0.08, 3)
    below = (y >= horizon)[:, 0]
    img[:, below, :] = ground[:, None, None] * (1.0 - 0.3 * (y[below] - horizon))[None]

    for _ in range(int(rng.integers(4, 9))):
        x0 = rng.uniform(-0.05, 0.95)
        w = rng.uniform(0.06, 0.2)
        h = rng.uniform(0.1, 0.4)
        shade = rng.uniform(0.15, 0.55)
        col = np.clip(shade + rng.uniform(-0.06, 0.06, 3), 0, 1)
        box = (x >= x0) & (x < x0 + w) & (y >= horizon - h) & (y < horizon + 0.02)
        img[:, box] = col[:, None]
    return np.clip(img, 0.0, 1.0)


def apply_pollution(scene: np.ndarray, pm25: float, pm10: float, rng: Rng,
                    region: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Composite haze over ``scene``; returns (image, per-pixel opacity).

    Opacity is ``clamp(pm25 / 250, 0, 0.9)`` modulated by a smooth random
    texture; brightness drops in proportion to PM10.  ``region`` (S x S bool)
    confines both effects.
    """
    size = scene.shape[-1]
    base = haze_opacity(pm25)
    alpha = np.clip(base * (1.0 + HAZE_TEXTURE * _smooth_field(rng.split("texture"), size)), 0.0, 1.0)
    dim = 1.0 - PM10_DIM * min(pm10 / PM10_REF, 1.0)
    gain = np.full((size, size), dim)
    if region is not None:
        alpha = np.where(region, alpha, 0.0)
        gain = np.where(region, gain, 1.0)
    haze = np.array([0.86, 0.86, 0.83]) + rng.uniform(-0.03, 0.03, 3)
    out = scene * (1 - alpha)[None] + haze[:, None, None] * alpha[None]
    return np.clip(out * gain[None], 0.0, 1.0), alpha


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def _draw_aqi(rng: Rng, cls: int) -> float:
    lo, hi = CLASS_BOUNDS[AqiClass(cls)]
    hi = min(hi, AQI_MAX)
    return float(rng.uniform(lo, hi))


def synthetic_sample(i: int, image_size: int, seed: int, aqi: float | None = None,
                     half_haze: str | None = None, prefix: str = "syn") -> Sample:
    rng = Rng(seed).split(f"{prefix}/{i}")
    if aqi is None:
        aqi = _draw_aqi(rng.split("aqi"), int(rng.split("class").integers(0, 6)))
    true = true_concentrations(aqi)
    noise = np.array([SENSOR_NOISE[p] for p in POLLUTANTS])
    sensors = true * np.exp(noise * rng.split("noise").normal(size=6))
    scene = render_scene(rng.split("scene"), image_size)
    region = None
    if half_haze is not None:
        region = half_region(half_haze, image_size)
    image, alpha = apply_pollution(scene, true[0], true[1], rng.split("haze"), region)
    meta = {"pm25_true": float(true[0]), "haze_opacity": float(alpha.mean())}
    if half_haze is not None:
        meta["hazed_half"] = half_haze
    return Sample(_quantize(image), sensors, float(aqi), f"{prefix}{i:05d}", meta=meta)


def generate_synthetic(n: int, image_size: int = 64, seed: int = 42) -> list[Sample]:
    """Synthetic haze-scene corpus with a cross-modal signal.

    Each sample draws its EPA class uniformly, then an AQI uniformly inside
    the class (Hazardous capped at 500).  True pollutant levels follow
    :data:`POLLUTANT_MAP`; the reported readings carry independent
    log-normal noise (:data:`SENSOR_NOISE`).  The image is rendered from the
    *true* PM2.5/PM10, so it holds information the noisy readings lack.
    Images are quantised to 8 bits so they survive a PNG round trip exactly.
    """
    if n <= 0:
        raise ParameterError("n must be positive")
    return [synthetic_sample(i, image_size, seed) for i in range(n)]


HALVES = ("top", "bottom", "left", "right")


def half_region(half: str, size: int) -> np.ndarray:
    """Boolean S x S mask of one half of the frame."""
    if half not in HALVES:
        raise ParameterError(f"half must be one of {HALVES}, got {half!r}")
    region = np.zeros((size, size), dtype=bool)
    h = size // 2
    sl = {"top": np.s_[:h], "bottom": np.s_[h:], "left": np.s_[:, :h], "right": np.s_[:, h:]}[half]
    region[sl] = True
    return region


def half_haze_probes(n: int, image_size: int = 64, seed: int = 7, aqi_range=(150.0, 500.0),
                     half: str = "top") -> list[Sample]:
    """High-AQI samples whose haze and dimming are confined to one half of the frame."""
    rng = Rng(seed).split("probe_aqi")
    aqis = rng.uniform(aqi_range[0], aqi_range[1], size=n)
    return [synthetic_sample(i, image_size, seed, aqi=float(a), half_haze=half, prefix=f"probe_{half}_")
            for i, a in enumerate(aqis)]


def corpus_hash(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        h.update(np.asarray(s.sensors, dtype=np.float64).tobytes())
        h.update(np.float64(s.aqi).tobytes())
        h.update(np.asarray(s.sensor_mask).tobytes())
    return h.hexdigest()


def class_histogram(samples: Sequence[Sample]) -> list[int]:
    counts = [0] * len(AqiClass)
    for s in samples:
        counts[int(s.aqi_class)] += 1
    return counts


def env_output_root() -> Path:
    return Path(os.environ.get("AQFUSION_OUTPUT_ROOT", "runs"))
