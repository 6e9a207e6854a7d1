"""Training loop: AdamW, cosine learning-rate schedule, early stopping, checkpoints.

Checkpoint container (all integers little-endian)::

    8 bytes   magic  b"AQFNCKPT"
    uint32    format version (1)
    uint32    header length H
    H bytes   UTF-8 JSON header: configs, scaler stats, epoch, best_val_loss,
              history, and the ordered tensor index [{"name", "shape"}, ...]
    ...       tensor payloads in index order, raw float32 ("<f4"), row-major

A ``<checkpoint>.meta`` sidecar carries a ``key=value`` text summary.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Arrays, Sample, ScalerStats, augment, by_split, fit_scalers, normalize_image, to_arrays
from .errors import ContractError, DataError, DivergenceError, ParameterError
from .evaluation import classification_accuracy, predict, regression_metrics, standardize_aqi
from .model import ModelConfig, ParameterStore, composite_loss, forward, init_params, param_shapes
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"AQFNCKPT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 35
    patience: int = 7
    alpha: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    augment: bool = True
    min_delta: float = 1e-6
    # False keeps the last epoch's parameters instead of the best-validation ones
    restore_best: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError("lr must be positive")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ParameterError("patience must be non-negative and below max_epochs")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ------------------------------------------------------------------- optimizer
@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: ParameterStore, state: AdamState, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One AdamW update in place, with weight decay decoupled from the moments.

    ``theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``
    where ``m_hat``, ``v_hat`` are the bias-corrected moment estimates.
    """
    missing = [k for k, p in params.items() if p.requires_grad and p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameters: {missing[:5]}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def cosine_lr(t: float, t_max: float, lr: float) -> float:
    """Cosine annealing from ``lr`` at t=0 to 0 at ``t_max``; clamps past the end."""
    if t < 0:
        raise ParameterError("epoch index must be non-negative")
    if t > t_max:
        log.warning("epoch %s beyond schedule length %s; learning rate clamped to 0", t, t_max)
        return 0.0
    return 0.5 * lr * (1.0 + math.cos(math.pi * t / t_max))


class EarlyStopping:
    """Track validation loss; stop after ``patience`` epochs without improvement.

    Improvement means dropping below the best loss by more than ``min_delta``.
    """

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; return True if it is a new best."""
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ------------------------------------------------------------------ checkpoint
HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_rmse", "val_acc", "lr")


@dataclass
class Checkpoint:
    params: ParameterStore
    scalers: ScalerStats
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int                 # epoch whose parameters are stored
    best_val_loss: float
    history: list = field(default_factory=list)   # dicts keyed by HISTORY_FIELDS
    stop_epoch: int = 0        # last epoch actually run

    def header(self) -> dict:
        return {
            "format": "aqfusion-checkpoint",
            "version": FORMAT_VERSION,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "scalers": self.scalers.to_dict(),
            "epoch": self.epoch,
            "stop_epoch": self.stop_epoch,
            "best_val_loss": self.best_val_loss,
            "history": self.history,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + self.params.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise DataError("not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", blob[8:16])
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        head = json.loads(blob[16:16 + hlen].decode("utf-8"))
        off = 16 + hlen
        params = ParameterStore()
        for entry in head["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            params[entry["name"]] = Tensor(arr.copy(), requires_grad=True, name=entry["name"])
        if off != len(blob):
            raise DataError(f"checkpoint has {len(blob) - off} trailing bytes")
        return cls(params, ScalerStats.from_dict(head["scalers"]), ModelConfig.from_dict(head["model_config"]),
                   TrainConfig.from_dict(head["train_config"]), head["epoch"], head["best_val_loss"],
                   head["history"], head.get("stop_epoch", head["epoch"]))

    def save(self, path) -> Path:
        path = Path(path)
        blob = self.to_bytes()
        path.write_bytes(blob)
        meta = {
            "format_version": FORMAT_VERSION,
            "backbone_profile": self.model_config.backbone_profile,
            "image_size": self.model_config.image_size,
            "num_params": self.params.num_params(),
            "epoch": self.epoch,
            "stop_epoch": self.stop_epoch,
            "best_val_loss": repr(self.best_val_loss),
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
        Path(str(path) + ".meta").write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(blob)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# ------------------------------------------------------------------- training
def evaluate_epoch(params: ParameterStore, split: Arrays | Sequence[Sample], model_config: ModelConfig,
                   scalers: ScalerStats, alpha: float) -> tuple[float, float, float]:
    """Eval-mode ``(L_total, rmse, accuracy)`` on one split; RMSE in AQI units."""
    arrays = split if isinstance(split, Arrays) else to_arrays(split, scalers)
    if len(arrays) == 0:
        raise ParameterError("cannot evaluate an empty split")
    y_hat, x_hat = predict(params, model_config, arrays, scalers)
    z_hat = standardize_aqi(y_hat, scalers, model_config)
    z = standardize_aqi(arrays.aqi, scalers, model_config)
    l_aqi = float(np.mean((z_hat - z) ** 2))
    resid = np.where(arrays.mask, x_hat - arrays.sensors, 0.0)
    l_sensor = float(np.sum(resid ** 2) / len(arrays))
    loss = (1.0 - alpha) * l_aqi + alpha * l_sensor
    rmse, _ = regression_metrics(y_hat, arrays.aqi)
    return loss, rmse, classification_accuracy(y_hat, arrays.aqi)


def _batch_images(arrays: Arrays, idx: np.ndarray, rng: Rng | None, scalers: ScalerStats) -> np.ndarray:
    imgs = arrays.images[idx]
    if rng is not None:
        imgs = np.stack([augment(im, rng.split(arrays.ids[i])) for im, i in zip(imgs, idx)])
    return normalize_image(imgs, scalers).astype(T.default_dtype())


def train_step(params, state, images, sensors, targets, mask, model_config, cfg: TrainConfig, lr, rng):
    """One forward/backward/AdamW step; returns the three loss values."""
    out = forward(images, sensors, params, model_config, "train", rng)
    total, l_aqi, l_sensor = composite_loss(out, targets, sensors, cfg.alpha,
                                            None if mask.all() else mask)
    params.zero_grad()
    total.backward()
    value = total.item()
    if math.isfinite(value):
        adamw_step(params, state, lr, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps)
    return value, l_aqi.item(), l_sensor.item()


def train(dataset: Sequence[Sample], model_config: ModelConfig, train_config: TrainConfig, *,
          scalers: ScalerStats | None = None,
          on_epoch_end: Callable[[int, ParameterStore, dict], None] | None = None) -> Checkpoint:
    """Fit the network on the ``train`` split, early-stopping on ``val``.

    Each epoch shuffles the training split, augments every image afresh,
    and runs mini-batch AdamW at the cosine-scheduled learning rate for that
    epoch.  The returned checkpoint holds the parameters of the epoch with
    the lowest validation loss.

    Raises:
        ParameterError: if the train or val split is empty.
        DivergenceError: on a non-finite training loss.
    """
    cfg = train_config
    train_s, val_s = by_split(dataset, "train"), by_split(dataset, "val")
    if not train_s or not val_s:
        raise ParameterError(f"need non-empty train and val splits, got {len(train_s)} and {len(val_s)}")
    scalers = scalers or fit_scalers(train_s)
    tr, va = to_arrays(train_s, scalers), to_arrays(val_s, scalers)
    targets = standardize_aqi(tr.aqi, scalers, model_config)

    root = Rng(cfg.seed)
    params = init_params(model_config, root.split("init"))
    state = AdamState()
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    best_state = params.state()
    history: list[dict] = []
    epoch = 0

    for epoch in range(1, cfg.max_epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.max_epochs, cfg.lr)
        order = root.split(f"shuffle/{epoch}").permutation(len(tr))
        aug = root.split(f"augment/{epoch}") if cfg.augment else None
        seen, running = 0, 0.0
        for b, start in enumerate(range(0, len(tr), cfg.batch_size)):
            idx = order[start: start + cfg.batch_size]
            loss, _, _ = train_step(params, state, _batch_images(tr, idx, aug, scalers),
                                    tr.sensors[idx].astype(T.default_dtype()), targets[idx], tr.mask[idx],
                                    model_config, cfg, lr, root.split(f"dropout/{epoch}/{b}"))
            if not math.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            running += loss * len(idx)
            seen += len(idx)
        val_loss, val_rmse, val_acc = evaluate_epoch(params, va, model_config, scalers, cfg.alpha)
        record = {"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss,
                  "val_rmse": val_rmse, "val_acc": val_acc, "lr": lr}
        history.append(record)
        if stopper.step(epoch, val_loss):
            best_state = params.state()
        log.info("epoch %d lr=%.3g train=%.4f val=%.4f rmse=%.2f acc=%.3f", epoch, lr,
                 record["train_loss"], val_loss, val_rmse, val_acc)
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, record)
        if stopper.should_stop:
            log.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    if not cfg.restore_best:
        return Checkpoint(params, scalers, model_config, cfg, epoch, history[-1]["val_loss"], history, epoch)
    params.load_state(best_state)
    return Checkpoint(params, scalers, model_config, cfg, stopper.best_epoch, stopper.best, history, epoch)


# Package-level alias: ``aqfusion.train`` names this module, so the top-level
# namespace exports the training entry point as ``fit``.
fit = train


def write_history_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(HISTORY_FIELDS) + "\n")
        for row in history:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in HISTORY_FIELDS) + "\n")
