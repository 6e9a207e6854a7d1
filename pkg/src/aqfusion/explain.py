"""Grad-CAM heatmaps over the last convolutional feature maps.

For a regression output there is no class logit, so the backward target is
the raw scalar itself: the AQI prediction, or one entry of the sensor-head
estimate.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .model import ModelConfig, ParameterStore, forward


@dataclass
class Heatmap:
    values: np.ndarray     # S x S in [0, 1]
    target: str            # "aqi" or "sensor_<j>"
    sample_id: str = ""


def parse_target(target, sensor_dim: int = 6) -> tuple[str, int | None]:
    """Normalise ``"aqi"``, ``"sensor_3"`` or an int 3 to ``(name, index)``."""
    if isinstance(target, str) and target == "aqi":
        return "aqi", None
    if isinstance(target, str) and target.startswith("sensor_"):
        try:
            j = int(target[len("sensor_"):])
        except ValueError:
            raise ParameterError(f"bad target {target!r}") from None
    elif isinstance(target, (int, np.integer)) and not isinstance(target, bool):
        j = int(target)
    else:
        raise ParameterError(f"target must be 'aqi' or 'sensor_<j>', got {target!r}")
    if not 0 <= j < sensor_dim:
        raise ParameterError(f"sensor index {j} out of range [0, {sensor_dim})")
    return f"sensor_{j}", j


def cam_from_maps(maps: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU of the feature maps weighted by their spatially averaged gradients."""
    weights = grads.mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, maps, axes=1), 0.0)


def upsample_bilinear(a: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a 2-D map to ``size x size`` (pixel-centre aligned, edge clamped)."""
    h, w = a.shape

    def coords(n_in):
        c = (np.arange(size) + 0.5) * n_in / size - 0.5
        c = np.clip(c, 0.0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    r0, r1, fr = coords(h)
    c0, c1, fc = coords(w)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def normalize_max(a: np.ndarray) -> np.ndarray:
    m = a.max()
    return a / m if m > 0 else np.zeros_like(a)


def grad_cam(params: ParameterStore, config: ModelConfig, image, sensors, target="aqi",
             sample_id: str = "", normalize: bool = True) -> Heatmap:
    """Heatmap for one sample.

    ``image`` is a normalised 3 x S x S array and ``sensors`` the standardized
    reading vector, as fed to :func:`forward`.  Parameter gradients produced
    on the way are cleared before returning.
    """
    name, j = parse_target(target, config.sensor_dim)
    out = forward(np.asarray(image)[None], np.asarray(sensors)[None], params, config, "eval")
    scalar = out.y_hat if j is None else out.x_hat_S[:, j]
    maps = out.conv_maps
    try:
        if scalar.requires_grad:
            scalar.sum().backward()
        grads = np.zeros_like(maps.data[0]) if maps.grad is None else maps.grad[0]
    finally:
        params.zero_grad()
    cam = upsample_bilinear(cam_from_maps(maps.data[0].astype(np.float64), grads.astype(np.float64)),
                            config.image_size)
    cam = np.maximum(cam, 0.0)
    return Heatmap(normalize_max(cam) if normalize else cam, name, sample_id)


def half_mass(values: np.ndarray, region: np.ndarray) -> tuple[float, float]:
    """Heatmap mass inside ``region`` and outside it."""
    region = np.asarray(region, dtype=bool)
    if region.shape != values.shape:
        raise ParameterError(f"region {region.shape} does not match heatmap {values.shape}")
    return float(values[region].sum()), float(values[~region].sum())


# ---------------------------------------------------------------- file output
def _warm_colormap() -> np.ndarray:
    # black -> red -> yellow -> white, 256 entries, values in [0, 1]
    t = np.arange(256) / 255.0
    return np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], axis=1)


WARM_COLORMAP = _warm_colormap()
OVERLAY_OPACITY = 0.5


def quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def overlay(values: np.ndarray, base_image: np.ndarray) -> np.ndarray:
    """``(1 - a) * base + a * colormap(values)`` as an H x W x 3 float array."""
    colors = WARM_COLORMAP[quantize(values)]
    base = np.asarray(base_image, dtype=np.float64).transpose(1, 2, 0)
    return (1 - OVERLAY_OPACITY) * base + OVERLAY_OPACITY * colors


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None or m.group(1) != magic or m.group(4) != b"255":
        raise DataError(f"{path}: not an 8-bit {magic.decode()} file")
    w, h = int(m.group(2)), int(m.group(3))
    pix = np.frombuffer(blob, dtype=np.uint8, count=w * h * channels, offset=m.end())
    return pix.reshape((h, w, channels) if channels > 1 else (h, w))


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def export_heatmap(heatmap: Heatmap, base_image: np.ndarray, out_dir) -> tuple[Path, Path]:
    """Write ``{sample_id}_{target}.pgm`` (raw map) and ``.ppm`` (overlay on the base image).

    ``base_image`` is the un-normalised 3 x S x S image in [0, 1].
    """
    out_dir = Path(out_dir)
    stem = f"{heatmap.sample_id}_{heatmap.target}"
    pgm, ppm = out_dir / f"{stem}.pgm", out_dir / f"{stem}.ppm"
    if np.asarray(base_image).shape[1:] != heatmap.values.shape:
        raise ParameterError(f"base image {np.asarray(base_image).shape} does not match heatmap {heatmap.values.shape}")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_pgm(pgm, quantize(heatmap.values))
        write_ppm(ppm, quantize(overlay(heatmap.values, base_image)))
    except OSError as exc:
        raise DataError(f"cannot write heatmap to {out_dir}: {exc}") from exc
    return pgm, ppm
