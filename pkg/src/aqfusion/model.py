"""The fusion network: image encoder, sensor encoder, fusion layer and two heads.

Data flow for a batch::

    x_I --backbone--> conv_maps --GAP--> z --projection--> h_I --+--> sensor head --> x_hat_S
                                                                 |
    x_S --sensor encoder--> h_S ---------------------------------+--> fusion --> AQI head --> y_hat

The sensor head reads only the image embedding, so it can stand in for
missing pollutant readings at inference time.

Backbones are small CPU-scale profiles that keep the block structure of the
three families the architecture was designed around:

* ``micro_plain``      four strided/plain 3x3 convolution stages
* ``micro_residual``   three conv stages followed by a two-conv residual block
* ``micro_depthwise``  depthwise-separable stages and an inverted residual
                       block with a linear bottleneck, then a 1x1 head conv
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .rng import Rng
from .tensor import Tensor

PROFILES = ("micro_plain", "micro_residual", "micro_depthwise")


@dataclass(frozen=True)
class ModelConfig:
    backbone_profile: str = "micro_depthwise"
    image_size: int = 64
    sensor_dim: int = 6
    embed_dim: int = 128
    fusion_dim: int = 128
    proj_hidden: int = 256
    dropout_rate: float = 0.3
    base_width: int = 16
    # True trains the AQI head on z-scored AQI; evaluation maps back through ScalerStats.
    target_standardized: bool = False
    # False gives the sensor-only ablation: h_I is replaced by zeros before fusion.
    image_branch: bool = True

    def __post_init__(self):
        if self.backbone_profile not in PROFILES:
            raise ParameterError(f"unknown backbone profile {self.backbone_profile!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for name in ("embed_dim", "fusion_dim", "proj_hidden", "base_width", "sensor_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.image_size < 8:
            raise ParameterError("image_size must be at least 8")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------- backbone layout
@dataclass(frozen=True)
class _Layer:
    kind: str          # conv | dw | res | ir
    name: str
    cin: int
    cout: int
    k: int = 3
    stride: int = 1
    relu: bool = True
    expand: int = 2


def backbone_layers(config: ModelConfig) -> list[_Layer]:
    w = config.base_width
    p = config.backbone_profile
    if p == "micro_plain":
        return [
            _Layer("conv", "c1", 3, w, stride=2),
            _Layer("conv", "c2", w, 2 * w, stride=2),
            _Layer("conv", "c3", 2 * w, 4 * w, stride=2),
            _Layer("conv", "c4", 4 * w, 4 * w),
        ]
    if p == "micro_residual":
        return [
            _Layer("conv", "c1", 3, w, stride=2),
            _Layer("conv", "c2", w, 2 * w, stride=2),
            _Layer("conv", "c3", 2 * w, 4 * w, stride=2),
            _Layer("res", "res1", 4 * w, 4 * w),
        ]
    return [
        _Layer("conv", "stem", 3, w, stride=2),
        _Layer("dw", "ds1_dw", w, w, stride=2),
        _Layer("conv", "ds1_pw", w, 2 * w, k=1),
        _Layer("dw", "ds2_dw", 2 * w, 2 * w, stride=2),
        _Layer("conv", "ds2_pw", 2 * w, 4 * w, k=1),
        _Layer("ir", "ir1", 4 * w, 4 * w, expand=2),
        _Layer("conv", "head_pw", 4 * w, 4 * w, k=1),
    ]


def feature_channels(config: ModelConfig) -> int:
    return backbone_layers(config)[-1].cout


def feature_size(config: ModelConfig) -> int:
    s = config.image_size
    for layer in backbone_layers(config):
        s = T.conv_output_size(s, layer.k, layer.stride, layer.k // 2)
    return s


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for L in backbone_layers(config):
        pre = f"backbone.{L.name}"
        if L.kind == "conv":
            shapes[f"{pre}.w"] = (L.cout, L.cin, L.k, L.k)
            shapes[f"{pre}.b"] = (L.cout,)
        elif L.kind == "dw":
            shapes[f"{pre}.w"] = (L.cin, 1, L.k, L.k)
            shapes[f"{pre}.b"] = (L.cin,)
        elif L.kind == "res":
            for sub in ("a", "b"):
                shapes[f"{pre}.{sub}.w"] = (L.cout, L.cin, L.k, L.k)
                shapes[f"{pre}.{sub}.b"] = (L.cout,)
        elif L.kind == "ir":
            hid = L.cin * L.expand
            shapes[f"{pre}.expand.w"] = (hid, L.cin, 1, 1)
            shapes[f"{pre}.expand.b"] = (hid,)
            shapes[f"{pre}.dw.w"] = (hid, 1, L.k, L.k)
            shapes[f"{pre}.dw.b"] = (hid,)
            shapes[f"{pre}.project.w"] = (L.cout, hid, 1, 1)
            shapes[f"{pre}.project.b"] = (L.cout,)
    fc, e, fd, d = feature_channels(config), config.embed_dim, config.fusion_dim, config.sensor_dim
    shapes.update({
        "proj.W1": (config.proj_hidden, fc), "proj.b1": (config.proj_hidden,),
        "proj.W2": (e, config.proj_hidden), "proj.b2": (e,),
        "sensor_enc.W_S": (e, d), "sensor_enc.b_S": (e,),
        "fusion.W_F": (fd, 2 * e), "fusion.b_F": (fd,),
        "aqi_head.w_AQI": (1, fd), "aqi_head.b_AQI": (1,),
        "sensor_head.W_sensor": (d, e), "sensor_head.b_sensor": (d,),
    })
    return shapes


def _fan_in(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[1:]))


class ParameterStore(dict):
    """Ordered mapping of parameter name -> :class:`Tensor`."""

    def tensors(self) -> Iterator[Tensor]:
        return iter(self.values())

    def num_params(self) -> int:
        return sum(t.size for t in self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self[k].data = np.ascontiguousarray(v, dtype=self[k].data.dtype).copy()

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                               for k, v in self.items()})

    def tobytes(self) -> bytes:
        return b"".join(v.data.astype("<f4").tobytes() for v in self.values())


def init_params(config: ModelConfig, rng: Rng) -> ParameterStore:
    """He-uniform weights (variance 2 / fan_in), zero biases.

    Each tensor draws from its own named child stream, so adding a parameter
    never perturbs the others.
    """
    store = ParameterStore()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / _fan_in(shape))
            data = rng.split(name).uniform(-bound, bound, size=shape)
        store[name] = Tensor(data, requires_grad=True, name=name)
    return store


def zero_params(config: ModelConfig) -> ParameterStore:
    return ParameterStore({n: Tensor(np.zeros(s), requires_grad=True, name=n)
                           for n, s in param_shapes(config).items()})


# --------------------------------------------------------------------- forward
@dataclass
class ForwardOutput:
    y_hat: Tensor        # (N,)
    x_hat_S: Tensor      # (N, d)
    h_I: Tensor          # (N, embed_dim)
    h_S: Tensor          # (N, embed_dim)
    h_fused: Tensor      # (N, fusion_dim)
    conv_maps: Tensor    # (N, C, s, s), last conv stage


def _conv(x, params, pre, layer: _Layer, relu=True):
    pad = layer.k // 2
    if layer.kind == "dw":
        y = T.depthwise_conv2d(x, params[f"{pre}.w"], layer.stride, pad)
    else:
        y = T.conv2d(x, params[f"{pre}.w"], layer.stride, pad)
    y = T.channel_bias(y, params[f"{pre}.b"])
    return T.relu(y) if relu else y


def run_backbone(x: Tensor, params: ParameterStore, config: ModelConfig) -> Tensor:
    for L in backbone_layers(config):
        pre = f"backbone.{L.name}"
        if L.kind in ("conv", "dw"):
            x = _conv(x, params, pre, L, L.relu)
        elif L.kind == "res":
            a = _conv(x, params, f"{pre}.a", _Layer("conv", "", L.cin, L.cout, L.k))
            b = _conv(a, params, f"{pre}.b", _Layer("conv", "", L.cout, L.cout, L.k), relu=False)
            x = T.relu(T.add(x, b))
        elif L.kind == "ir":
            hid = L.cin * L.expand
            e = _conv(x, params, f"{pre}.expand", _Layer("conv", "", L.cin, hid, 1))
            dw = _conv(e, params, f"{pre}.dw", _Layer("dw", "", hid, hid, L.k))
            p = _conv(dw, params, f"{pre}.project", _Layer("conv", "", hid, L.cout, 1), relu=False)
            x = T.add(x, p)
    return x


def _batch_image(x_I, config: ModelConfig) -> Tensor:
    x = x_I if isinstance(x_I, Tensor) else Tensor(x_I)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    s = config.image_size
    if x.ndim != 4 or x.shape[1:] != (3, s, s):
        raise ShapeError(f"image must be 3x{s}x{s} (optionally batched), got {tuple(x.shape)}")
    return x


def _batch_sensors(x_S, config: ModelConfig) -> Tensor:
    x = x_S if isinstance(x_S, Tensor) else Tensor(x_S)
    if x.ndim == 1:
        x = T.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != config.sensor_dim:
        raise ShapeError(f"sensor vector must have length {config.sensor_dim}, got shape {tuple(x.shape)}")
    return x


def encode_image(x_I, params: ParameterStore, config: ModelConfig, mode: str = "eval"):
    """Backbone, global average pool and the two-layer ReLU projection.

    Returns ``(h_I, conv_maps)``.  ``mode`` is accepted for symmetry; the
    image branch has no stochastic layers.
    """
    x = _batch_image(x_I, config)
    maps = run_backbone(x, params, config)
    z = T.global_avg_pool(maps)
    hidden = T.relu(T.linear(z, params["proj.W1"], params["proj.b1"]))
    h_I = T.relu(T.linear(hidden, params["proj.W2"], params["proj.b2"]))
    return h_I, maps


def encode_sensors(x_S, params: ParameterStore, config: ModelConfig, mode: str = "eval",
                   rng: Rng | None = None) -> Tensor:
    x = _batch_sensors(x_S, config)
    h = T.relu(T.linear(x, params["sensor_enc.W_S"], params["sensor_enc.b_S"]))
    return T.dropout(h, config.dropout_rate, mode, _dropout_rng(rng, mode, "sensor_enc"))


def fuse(h_I: Tensor, h_S: Tensor, params: ParameterStore, config: ModelConfig,
         mode: str = "eval", rng: Rng | None = None) -> Tensor:
    """Dropout(ReLU(W_F [h_I; h_S] + b_F)), image block first."""
    if h_I.shape[-1] != config.embed_dim or h_S.shape[-1] != config.embed_dim:
        raise ShapeError(f"fusion inputs must have width {config.embed_dim}, got {h_I.shape} and {h_S.shape}")
    h = T.concat([h_I, h_S], axis=-1)
    h = T.relu(T.linear(h, params["fusion.W_F"], params["fusion.b_F"]))
    return T.dropout(h, config.dropout_rate, mode, _dropout_rng(rng, mode, "fusion"))


def _dropout_rng(rng, mode, name):
    if mode == "eval":
        return None
    if rng is None:
        raise ParameterError("train mode needs an rng for dropout")
    return rng.split(name)


def sensor_head(h_I: Tensor, params: ParameterStore) -> Tensor:
    return T.linear(h_I, params["sensor_head.W_sensor"], params["sensor_head.b_sensor"])


def aqi_head(h_fused: Tensor, params: ParameterStore) -> Tensor:
    y = T.linear(h_fused, params["aqi_head.w_AQI"], params["aqi_head.b_AQI"])
    return T.reshape(y, (y.shape[0],))


def forward(x_I, x_S, params: ParameterStore, config: ModelConfig, mode: str = "eval",
            rng: Rng | None = None, sensor_mask=None, fill: str = "zero") -> ForwardOutput:
    """Full forward pass on a batch (single samples are promoted to batch 1).

    ``sensor_mask`` (N x d, True = reading available) marks missing readings.
    Missing entries are replaced before the sensor encoder, by 0 (the
    standardized mean) when ``fill="zero"`` or by the sensor head's estimate
    from the image when ``fill="head"``.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    h_I, maps = encode_image(x_I, params, config, mode)
    x_hat = sensor_head(h_I, params)
    xs = _batch_sensors(x_S, config)
    if xs.shape[0] != h_I.shape[0]:
        raise ShapeError(f"batch sizes differ: {h_I.shape[0]} images, {xs.shape[0]} sensor rows")
    if sensor_mask is not None:
        mask = np.asarray(sensor_mask, dtype=bool).reshape(xs.shape)
        if fill == "zero":
            filler = np.zeros_like(xs.data)
        elif fill == "head":
            filler = x_hat.data
        else:
            raise ParameterError(f"fill must be 'zero' or 'head', got {fill!r}")
        xs = Tensor(np.where(mask, xs.data, filler))
    h_S = encode_sensors(xs, params, config, mode, rng)
    h_img = h_I if config.image_branch else Tensor(np.zeros(h_I.shape))
    h_f = fuse(h_img, h_S, params, config, mode, rng)
    return ForwardOutput(aqi_head(h_f, params), x_hat, h_I, h_S, h_f, maps)


def composite_loss(output: ForwardOutput, y, x_S, alpha: float, sensor_mask=None):
    """Return ``(L_total, L_AQI, L_sensor)``.

    ``L_AQI`` is the batch mean squared AQI error, ``L_sensor`` the batch mean
    of per-sample squared L2 norms of the sensor residual, and
    ``L_total = (1 - alpha) L_AQI + alpha L_sensor``.  Entries with
    ``sensor_mask`` False are excluded from the sensor residual.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    y = y if isinstance(y, Tensor) else Tensor(y)
    y = T.reshape(y, (-1,))
    xs = x_S if isinstance(x_S, Tensor) else Tensor(x_S)
    if xs.ndim == 1:
        xs = T.reshape(xs, (1, -1))
    if y.shape != output.y_hat.shape or xs.shape != output.x_hat_S.shape:
        raise ShapeError(f"targets {y.shape}/{xs.shape} do not match predictions "
                         f"{output.y_hat.shape}/{output.x_hat_S.shape}")
    n = y.shape[0]
    l_aqi = T.mse(output.y_hat, y)
    resid = T.sub(output.x_hat_S, xs)
    if sensor_mask is not None:
        resid = T.mul(resid, Tensor(np.asarray(sensor_mask, dtype=bool).reshape(xs.shape)))
    l_sensor = T.scale(T.tsum(T.square(resid)), 1.0 / n)
    total = T.add(T.scale(l_aqi, 1.0 - alpha), T.scale(l_sensor, alpha))
    return total, l_aqi, l_sensor
