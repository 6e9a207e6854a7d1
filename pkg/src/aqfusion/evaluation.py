"""Metrics, ROC analysis, uncertainty and robustness evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .data import (AqiClass, Arrays, POLLUTANT_LABELS, POLLUTANT_UNITS, ScalerStats, classify_many,
                   destandardize_sensors, normalize_image)
from .errors import ParameterError
from .model import ModelConfig, ParameterStore, forward
from .rng import Rng

log = logging.getLogger(__name__)

N_CLASSES = len(AqiClass)
# (midpoint, halfwidth) per class for the regression -> class-score map
CLASS_CENTERS = np.array([25.0, 75.0, 125.0, 175.0, 250.0, 400.0])
CLASS_HALFWIDTHS = np.array([25.0, 25.0, 25.0, 25.0, 50.0, 100.0])


def _pair(y_hat, y):
    a = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.size == 0 or a.size != b.size:
        raise ParameterError(f"need equal non-empty inputs, got {a.size} and {b.size}")
    return a, b


def regression_metrics(y_hat, y) -> tuple[float, float]:
    """Return ``(rmse, mse)``."""
    a, b = _pair(y_hat, y)
    mse = float(np.mean((a - b) ** 2))
    return math.sqrt(mse), mse


def _clamp(a: np.ndarray) -> tuple[np.ndarray, int]:
    neg = int(np.count_nonzero(a < 0))
    return (np.maximum(a, 0.0), neg) if neg else (a, 0)


def classification_accuracy(y_hat, y, return_clamped: bool = False):
    """Fraction of samples whose predicted EPA class matches the true one.

    Negative predictions are clamped to 0 before binning; the number clamped
    is logged, and returned as a second value with ``return_clamped``.
    """
    a, b = _pair(y_hat, y)
    a, neg = _clamp(a)
    if neg:
        log.info("clamped %d negative AQI predictions to 0 before binning", neg)
    acc = float(np.mean(classify_many(a) == classify_many(b)))
    return (acc, neg) if return_clamped else acc


def confusion_matrix(y_hat, y) -> np.ndarray:
    """6 x 6 counts, rows = true class, columns = predicted class."""
    a, b = _pair(y_hat, y)
    a, _ = _clamp(a)
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (classify_many(b), classify_many(a)), 1)
    return cm


def class_scores(y_hat) -> np.ndarray:
    """Per-class scores ``exp(-|y_hat - mid_c| / half_c)`` normalised to sum 1.

    Accepts a scalar (returns shape (6,)) or a vector (returns N x 6).
    Negative inputs are clamped to 0.
    """
    a = np.maximum(np.asarray(y_hat, dtype=np.float64), 0.0)
    # shift each row by its smallest distance so the exponentials never all underflow
    d = np.abs(a[..., None] - CLASS_CENTERS) / CLASS_HALFWIDTHS
    e = np.exp(-(d - d.min(axis=-1, keepdims=True)))
    return e / e.sum(axis=-1, keepdims=True)


def binary_auc(scores, positive) -> float:
    """One-vs-rest AUC by the Mann-Whitney rank statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, true_class) -> tuple[list[float], float]:
    """Per-class one-vs-rest AUCs and their macro mean.

    A class with no positives or no negatives gets NaN and is left out of the
    macro mean (a warning is logged).  If every class is undefined a
    :class:`ParameterError` is raised.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(true_class).reshape(-1)
    if s.ndim != 2 or s.shape[0] != t.size:
        raise ParameterError(f"scores must be N x C with N = {t.size}, got {s.shape}")
    per = [binary_auc(s[:, c], t == c) for c in range(s.shape[1])]
    defined = [a for a in per if not math.isnan(a)]
    if not defined:
        raise ParameterError("AUC undefined for every class (single-class input)")
    if len(defined) < len(per):
        log.warning("AUC undefined for classes %s; excluded from macro mean",
                    [c for c, a in enumerate(per) if math.isnan(a)])
    return per, float(np.mean(defined))


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (descending, starting at +inf) with matching FPR and TPR."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(pos)[distinct]
    fp = (distinct + 1) - tp
    n_pos, n_neg = max(int(pos.sum()), 1), max(int((~pos).sum()), 1)
    thr = np.r_[np.inf, s[distinct]]
    return thr, np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def write_roc_csv(path, scores, true_class) -> None:
    """Rows ``class,threshold,fpr,tpr`` for every class with both labels present."""
    s = np.asarray(scores)
    t = np.asarray(true_class)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "threshold", "fpr", "tpr"])
        for c in range(s.shape[1]):
            pos = t == c
            if pos.all() or not pos.any():
                continue
            for th, f, r in zip(*roc_curve(s[:, c], pos)):
                w.writerow([AqiClass(c).name, repr(float(th)), repr(float(f)), repr(float(r))])


def sensor_standard_errors(x_hat_std, x_std, scalers: ScalerStats, mask=None) -> np.ndarray:
    """Per-pollutant standard error of the sensor-head residual in physical units.

    Both arguments are in standardized space and are mapped back with
    ``scalers`` before differencing; ``SE_j = std(residual_j, ddof=1) / sqrt(n)``.
    ``mask`` (N x d) drops missing ground-truth readings per channel.
    """
    p = destandardize_sensors(np.atleast_2d(x_hat_std), scalers)
    g = destandardize_sensors(np.atleast_2d(x_std), scalers)
    if p.shape != g.shape:
        raise ParameterError(f"prediction shape {p.shape} differs from truth {g.shape}")
    resid = p - g
    m = np.ones(resid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = np.empty(resid.shape[1])
    for j in range(resid.shape[1]):
        r = resid[m[:, j], j]
        if r.size < 2:
            raise ParameterError(f"standard error needs n >= 2 residuals (channel {j} has {r.size})")
        out[j] = r.std(ddof=1) / math.sqrt(r.size)
    return out


def bootstrap_rmse_ci(y_hat, y, resamples: int = 1000, level: float = 0.95, seed: int = 42) -> tuple[float, float]:
    """Percentile-bootstrap interval for RMSE, resampling sample indices."""
    a, b = _pair(y_hat, y)
    if a.size < 2:
        raise ParameterError("bootstrap needs at least two samples")
    if not 0.0 < level < 1.0:
        raise ParameterError("level must lie in (0, 1)")
    sq = (a - b) ** 2
    idx = Rng(seed).split("bootstrap").integers(0, a.size, size=(resamples, a.size))
    stats = np.sqrt(sq[idx].mean(axis=1))
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return float(lo), float(hi)


# ------------------------------------------------------------------ prediction
def destandardize_aqi(z, scalers: ScalerStats, config: ModelConfig) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z * scalers.aqi_std + scalers.aqi_mean if config.target_standardized else z


def standardize_aqi(y, scalers: ScalerStats, config: ModelConfig) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return (y - scalers.aqi_mean) / scalers.aqi_std if config.target_standardized else y


def predict(params: ParameterStore, config: ModelConfig, arrays: Arrays, scalers: ScalerStats,
            mask=None, fill: str = "zero", batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions: AQI in index units and the standardized sensor estimate.

    ``mask`` (N x d, True = available) is combined with the samples' own
    availability masks; missing readings are filled per ``fill``.
    """
    avail = arrays.mask if mask is None else (arrays.mask & np.asarray(mask, dtype=bool))
    use_mask = None if avail.all() else avail
    ys, xs = [], []
    with T.no_grad():
        for start in range(0, len(arrays), batch_size):
            sl = slice(start, start + batch_size)
            img = normalize_image(arrays.images[sl], scalers)
            m = None if use_mask is None else use_mask[sl]
            out = forward(img, arrays.sensors[sl], params, config, "eval", sensor_mask=m, fill=fill)
            ys.append(out.y_hat.data.astype(np.float64))
            xs.append(out.x_hat_S.data.astype(np.float64))
    return destandardize_aqi(np.concatenate(ys), scalers, config), np.concatenate(xs)


# --------------------------------------------------------------------- reports
@dataclass
class MetricsReport:
    n: int
    rmse: float
    mse: float
    accuracy: float
    per_class_auc: list
    macro_auc: float
    sensor_se: list
    rmse_ci: tuple | None
    confusion: list
    clamped_predictions: int = 0
    pollutants: list = field(default_factory=lambda: [f"{p} ({u})" for p, u in zip(POLLUTANT_LABELS, POLLUTANT_UNITS)])

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_auc"] = {c.name: (None if math.isnan(a) else a) for c, a in zip(AqiClass, self.per_class_auc)}
        d["sensor_se"] = dict(zip(self.pollutants, self.sensor_se))
        d.pop("pollutants")
        return json.dumps(d, indent=2, sort_keys=True)

    def se_table(self) -> str:
        lines = ["pollutant,unit,standard_error"]
        lines += [f"{p},{u},{se!r}" for p, u, se in zip(POLLUTANT_LABELS, POLLUTANT_UNITS, self.sensor_se)]
        return "\n".join(lines) + "\n"


def build_report(y_hat, y, x_hat_std, x_std, scalers: ScalerStats, sensor_mask=None,
                 bootstrap: int = 0, seed: int = 42) -> MetricsReport:
    rmse, mse = regression_metrics(y_hat, y)
    acc, neg = classification_accuracy(y_hat, y, return_clamped=True)
    true_cls = classify_many(y)
    try:
        per, macro = roc_auc(class_scores(y_hat), true_cls)
    except ParameterError:
        per, macro = [math.nan] * N_CLASSES, math.nan
    se = sensor_standard_errors(x_hat_std, x_std, scalers, sensor_mask)
    ci = bootstrap_rmse_ci(y_hat, y, bootstrap, seed=seed) if bootstrap else None
    return MetricsReport(len(np.asarray(y)), rmse, mse, acc, per, macro, [float(v) for v in se], ci,
                         confusion_matrix(y_hat, y).tolist(), neg)


def evaluate(params: ParameterStore, config: ModelConfig, arrays: Arrays, scalers: ScalerStats,
             bootstrap: int = 0, seed: int = 42) -> tuple[MetricsReport, np.ndarray]:
    """Full report for one split; also returns the N x 6 class scores."""
    y_hat, x_hat = predict(params, config, arrays, scalers)
    rep = build_report(y_hat, arrays.aqi, x_hat, arrays.sensors, scalers, arrays.mask, bootstrap, seed)
    return rep, class_scores(y_hat)


# ------------------------------------------------------------------ robustness
@dataclass
class RobustnessRow:
    strategy: str        # "zero" (A) or "head" (B)
    k: int
    rmse: float          # mean over mask draws
    rmse_std: float
    accuracy: float


def random_masks(n: int, d: int, k: int, rng: Rng) -> np.ndarray:
    """N x d availability masks with exactly ``k`` readings hidden per row."""
    mask = np.ones((n, d), dtype=bool)
    if k:
        order = np.argsort(rng.random((n, d)), axis=1)
        np.put_along_axis(mask, order[:, :k], False, axis=1)
    return mask


def robustness_sweep(params: ParameterStore, config: ModelConfig, arrays: Arrays, scalers: ScalerStats,
                     draws: int = 10, seed: int = 42, ks: Sequence[int] | None = None) -> list[RobustnessRow]:
    """Metrics with k = 0..d readings hidden, under zero fill (A) and sensor-head fill (B).

    Each k uses ``draws`` random mask sets; the same masks serve both
    strategies.
    """
    d = config.sensor_dim
    ks = range(d + 1) if ks is None else ks
    rows = []
    for k in ks:
        masks = [random_masks(len(arrays), d, k, Rng(seed).split(f"mask/{k}/{i}")) for i in range(draws if k else 1)]
        for strategy in ("zero", "head"):
            rm, ac = [], []
            for m in masks:
                y_hat, _ = predict(params, config, arrays, scalers, mask=m, fill=strategy)
                rm.append(regression_metrics(y_hat, arrays.aqi)[0])
                ac.append(classification_accuracy(y_hat, arrays.aqi))
            rows.append(RobustnessRow(strategy, int(k), float(np.mean(rm)), float(np.std(rm)), float(np.mean(ac))))
    return rows


def write_robustness_csv(path, rows: Sequence[RobustnessRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "k", "rmse", "rmse_std", "accuracy"])
        for r in rows:
            w.writerow([r.strategy, r.k, repr(r.rmse), repr(r.rmse_std), repr(r.accuracy)])
