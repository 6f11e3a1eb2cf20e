"""Declarative layer stacks with static shape inference.

A NetworkSpec is an ordered list of LayerSpec rows plus a width-scale
factor applied to every channel count (minimum 1 channel).  Shapes are
inferable without running data, and the builder turns a spec into live
layer objects with stable parameter names of the form
``{index:02d}_{kind}.{param}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch
from .layers import (
    BatchNorm,
    Conv3x3,
    Dense,
    Dropout,
    GlobalAvgPool,
    Layer,
    MaxPool3x3s2,
    ReLU,
    Sigmoid,
)

KINDS = ("conv3", "bn", "relu", "maxpool3", "gap", "dense", "dropout", "sigmoid")

MIN_WIDTH_SCALE = 1.0 / 32.0


@dataclass(frozen=True)
class LayerSpec:
    """One architecture row: kind plus the hyperparameter it needs.

    ``channels`` is the pre-scaling width for conv3/dense rows; dense rows
    with ``scale_width=False`` (score heads) keep their exact width.
    """

    kind: str
    channels: int | None = None
    rate: float | None = None
    scale_width: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3", "dense") and not self.channels:
            raise ValueError(f"{self.kind} needs a channel count")
        if self.kind == "dropout" and self.rate is None:
            raise ValueError("dropout needs a rate")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers plus input geometry and the width-scale factor."""

    name: str
    in_channels: int
    in_hw: tuple[int, int] | None  # None for flat (N, in_channels) input
    layers: tuple[LayerSpec, ...]
    width_scale: float = 1.0

    def __post_init__(self):
        if self.width_scale < MIN_WIDTH_SCALE:
            raise ValueError(
                f"width scale {self.width_scale} below minimum {MIN_WIDTH_SCALE}")

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_scale)))

    def shapes(self) -> list[tuple[int, ...]]:
        """Static output shape after each layer, excluding the batch axis."""
        if self.in_hw is None:
            shape: tuple[int, ...] = (self.in_channels,)
        else:
            shape = (self.in_channels, self.in_hw[0], self.in_hw[1])
        out = []
        for spec in self.layers:
            if spec.kind == "conv3":
                if len(shape) != 3:
                    raise ShapeMismatch(f"conv3 needs CHW input, have {shape}")
                shape = (self.scaled(spec.channels), shape[1], shape[2])
            elif spec.kind == "maxpool3":
                if len(shape) != 3 or shape[1] < 3 or shape[2] < 3:
                    raise ShapeMismatch(f"maxpool3 needs H,W >= 3, have {shape}")
                shape = (shape[0], (shape[1] - 3) // 2 + 1, (shape[2] - 3) // 2 + 1)
            elif spec.kind == "gap":
                if len(shape) != 3:
                    raise ShapeMismatch(f"gap needs CHW input, have {shape}")
                shape = (shape[0],)
            elif spec.kind == "dense":
                if len(shape) != 1:
                    raise ShapeMismatch(f"dense needs flat input, have {shape}")
                width = self.scaled(spec.channels) if spec.scale_width else spec.channels
                shape = (width,)
            elif spec.kind == "bn" and len(shape) != 3:
                raise ShapeMismatch(f"bn needs CHW input, have {shape}")
            # relu / dropout / sigmoid / bn keep the shape
            out.append(shape)
        return out

    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]


@dataclass
class Network:
    """Live layers built from a spec; owns forward/backward orchestration."""

    spec: NetworkSpec
    layers: list[Layer]
    layer_names: list[str]
    dtype: type = np.float64
    _train_order: list[int] = field(default_factory=list)

    @classmethod
    def build(cls, spec: NetworkSpec, rng: np.random.Generator,
              dtype=np.float64) -> "Network":
        shapes = spec.shapes()
        if spec.in_hw is None:
            prev: tuple[int, ...] = (spec.in_channels,)
        else:
            prev = (spec.in_channels, *spec.in_hw)
        layers: list[Layer] = []
        names: list[str] = []
        for i, (ls, shape) in enumerate(zip(spec.layers, shapes)):
            if ls.kind == "conv3":
                layers.append(Conv3x3(prev[0], shape[0], rng, dtype))
            elif ls.kind == "bn":
                layers.append(BatchNorm(prev[0], dtype))
            elif ls.kind == "relu":
                layers.append(ReLU())
            elif ls.kind == "maxpool3":
                layers.append(MaxPool3x3s2())
            elif ls.kind == "gap":
                layers.append(GlobalAvgPool())
            elif ls.kind == "dense":
                layers.append(Dense(prev[0], shape[0], rng, dtype))
            elif ls.kind == "dropout":
                layers.append(Dropout(ls.rate, rng))
            elif ls.kind == "sigmoid":
                layers.append(Sigmoid())
            names.append(f"{i:02d}_{ls.kind}")
            prev = shape
        return cls(spec=spec, layers=layers, layer_names=names, dtype=dtype)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in zip(self.layer_names, self.layers):
            for pname, arr in layer.params().items():
                out[f"{name}.{pname}"] = arr
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in zip(self.layer_names, self.layers):
            for pname, arr in layer.grads().items():
                out[f"{name}.{pname}"] = arr
        return out

    def named_state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in zip(self.layer_names, self.layers):
            for sname, arr in layer.state().items():
                out[f"{name}.{sname}"] = arr
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values into parameters and state buffers, shape-checked."""
        own = {**self.named_params(), **self.named_state()}
        for name, value in arrays.items():
            if name not in own:
                raise ShapeMismatch(f"{self.spec.name}: unknown tensor {name}")
            if own[name].shape != value.shape:
                raise ShapeMismatch(
                    f"{self.spec.name}.{name}: shape {value.shape} != {own[name].shape}")
            own[name][...] = value

    def set_dropout_frozen(self, frozen: bool) -> None:
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.freeze_mask = frozen
                if not frozen:
                    layer._mask = None
