"""
======
Models
======

The plain and dilated U-Net segmentation networks.

A network is described by a :class:`ModelConfig` and realized as a *plan*: an
ordered list of layers, each of which declares its parameters, its effect on
the receptive field and how it transforms the running activation. The same
plan drives parameter creation, :meth:`Model.forward` and
:func:`receptive_field_table`, so the three can never disagree.

The plan is a small stack machine. :class:`MaxPool` pushes the activation it
receives onto a skip stack before pooling and :class:`Merge` pops it again on
the way up, which is how the long skip connections join equal resolutions.

With the defaults (three pooling levels, two 3x3 convolutions per level, two
bottleneck convolutions) the innermost receptive field of the plain U-Net is
68 pixels:

.. code-block:: text

    r = 1 -> 3 -> 5 | pool 6, j=2 -> 10 -> 14 | pool 16, j=4 -> 24 -> 32
      | pool 36, j=8 -> 52 -> 68

Dilated 3x3 convolutions with dilation 2 and 4 after the bottleneck add
2 * 2 * 8 = 32 and 2 * 4 * 8 = 64, giving 164, which covers a 128x128 input.

"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Optional

import numpy as np

from nerveseg.autograd import (
    Graph,
    Variable,
    bilinear_upsample2d,
    concat_channels,
    conv2d,
    maxpool2d,
    prelu,
    residual_add,
    transposed_conv2d,
)
from nerveseg.exceptions import ConfigurationError, ShapeError
from nerveseg.tensor import DEFAULT_DTYPE, check_tensor, he_normal_init, make_rng
from nerveseg.types import ParamDict, Rng, Tensor

PRELU_INIT = 0.25


class Architecture(str, Enum):
    PLAIN = "plain"
    DILATED = "dilated"


class UpsampleMode(str, Enum):
    TRANSPOSED = "transposed"
    BILINEAR = "bilinear"


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of a U-Net.

    Attributes
    ----------
    arch
        ``plain`` or ``dilated``.
    depth
        Number of 2x2 max-pool levels.
    convs_per_level
        3x3 convolutions in every block.
    base_channels
        Output channels of the first level; level ``l`` has
        ``base_channels * channel_growth ** (l - 1)``.
    channel_growth
        Channel multiplier per level.
    residual_blocks
        Add a short skip connection around every block.
    deep_supervision
        Attach a 1x1 logit head after every max pool.
    upsample_mode
        ``transposed`` (learned 2x2 stride-2) or ``bilinear``.
    dilations
        Dilation of each extra bottleneck convolution of the dilated network.
    input_size
        Nominal (H, W) of the input images.

    """

    arch: Architecture = Architecture.PLAIN
    depth: int = 3
    convs_per_level: int = 2
    base_channels: int = 16
    channel_growth: int = 2
    residual_blocks: bool = True
    deep_supervision: bool = True
    upsample_mode: UpsampleMode = UpsampleMode.TRANSPOSED
    dilations: tuple[int, ...] = (2, 4)
    input_size: tuple[int, int] = (128, 128)

    def __post_init__(self) -> None:
        # Accept plain strings and lists, e.g. from YAML or checkpoint headers
        try:
            object.__setattr__(self, "arch", Architecture(self.arch))
        except ValueError:
            raise ConfigurationError(f"Unknown architecture {self.arch!r}.", "arch") from None
        try:
            object.__setattr__(self, "upsample_mode", UpsampleMode(self.upsample_mode))
        except ValueError:
            raise ConfigurationError(
                f"Unknown upsample mode {self.upsample_mode!r}.", "upsample_mode"
            ) from None
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        self.validate()

    def validate(self) -> None:
        """Raises :class:`ConfigurationError` naming the first invalid field."""
        for name in ("depth", "convs_per_level", "base_channels", "channel_growth"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"Model {name} must be at least 1.", name)
        if len(self.input_size) != 2:
            raise ConfigurationError("Model input_size must be (H, W).", "input_size")
        step = 2**self.depth
        if any(s % step for s in self.input_size):
            raise ConfigurationError(
                f"Input size {self.input_size} is not divisible by 2**depth = {step}.",
                "input_size",
            )
        if self.arch is Architecture.DILATED:
            if not self.dilations:
                raise ConfigurationError("The dilated network needs dilations.", "dilations")
            if self.dilations[0] < 2 or any(
                b <= a for a, b in zip(self.dilations, self.dilations[1:])
            ):
                raise ConfigurationError(
                    f"Dilations must be strictly increasing and at least 2, got {self.dilations}.",
                    "dilations",
                )

    def channels(self, level: int) -> int:
        """Channels at ``level`` (1-based); ``depth + 1`` is the bottleneck."""
        return self.base_channels * self.channel_growth ** (level - 1)

    def to_pairs(self) -> list[tuple[str, str]]:
        """Flattens the config to ordered ``key=value`` string pairs."""
        pairs = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                text = value.value
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = str(value)
            pairs.append((f.name, text))
        return pairs

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> ModelConfig:
        """Rebuilds a config from :meth:`to_pairs` output."""
        known = {f.name for f in fields(cls)}
        values: dict[str, object] = {}
        for key, text in pairs:
            if key not in known:
                raise ConfigurationError(f"Unknown model config key {key}.", key)
            try:
                if key in ("residual_blocks", "deep_supervision"):
                    values[key] = text == "true"
                elif key in ("dilations", "input_size"):
                    values[key] = tuple(int(v) for v in text.split(",") if v)
                elif key in ("arch", "upsample_mode"):
                    values[key] = text
                else:
                    values[key] = int(text)
            except ValueError:
                raise ConfigurationError(f"Bad value {text!r} for model {key}.", key) from None
        return cls(**values)  # type: ignore[arg-type]


@dataclass(frozen=True)
class ParamSpec:
    name: str
    dims: tuple[int, ...]
    fan_in: Optional[int] = None
    fill: float = 0.0

    def initialize(self, rng: Rng) -> Tensor:
        if self.fan_in is None:
            return np.full(self.dims, self.fill, dtype=DEFAULT_DTYPE)
        return he_normal_init(self.dims, self.fan_in, rng)


@dataclass(frozen=True)
class RFStep:
    name: str
    kernel: int
    stride: int = 1
    dilation: int = 1


@dataclass(frozen=True)
class RFRow:
    """Receptive field ``r`` and jump ``j`` after one layer of the shrinking path."""

    layer: str
    receptive_field: int
    jump: int
    extent: tuple[int, int]


@dataclass
class ForwardState:
    graph: Graph
    params: dict[str, Variable]
    skips: list[Variable] = field(default_factory=list)
    aux: list[Variable] = field(default_factory=list)


def _conv_params(name: str, c_in: int, c_out: int, k: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{name}.weight", (c_out, c_in, k, k), fan_in=c_in * k * k),
        ParamSpec(f"{name}.bias", (c_out,)),
    ]


def _slope_params(name: str, channels: int) -> list[ParamSpec]:
    return [ParamSpec(f"{name}.slope", (channels,), fill=PRELU_INIT)]


def _conv(
    state: ForwardState, name: str, x: Variable, padding: int = 0, dilation: int = 1
) -> Variable:
    p = state.params
    return conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], padding=padding, dilation=dilation)


class Layer:
    """One step of a network plan."""

    def __init__(self, name: str):
        self.name = name

    def param_specs(self) -> list[ParamSpec]:
        return []

    def rf_steps(self) -> list[RFStep]:
        return []

    def __call__(self, state: ForwardState, x: Variable) -> Variable:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name})"


class ConvBlock(Layer):
    """3x3 padded convolutions each followed by PReLU, with an optional short skip.

    The skip is an identity add, or a 1x1 projection when the block changes
    the channel count.

    """

    def __init__(self, name: str, c_in: int, c_out: int, convs: int, residual: bool):
        super().__init__(name)
        self.c_in, self.c_out, self.convs, self.residual = c_in, c_out, convs, residual

    @property
    def projects(self) -> bool:
        return self.residual and self.c_in != self.c_out

    def param_specs(self) -> list[ParamSpec]:
        specs = []
        for i in range(1, self.convs + 1):
            c_in = self.c_in if i == 1 else self.c_out
            specs += _conv_params(f"{self.name}.conv{i}", c_in, self.c_out, 3)
            specs += _slope_params(f"{self.name}.act{i}", self.c_out)
        if self.projects:
            specs += _conv_params(f"{self.name}.skip", self.c_in, self.c_out, 1)
        return specs

    def rf_steps(self) -> list[RFStep]:
        return [RFStep(f"{self.name}.conv{i}", 3) for i in range(1, self.convs + 1)]

    def __call__(self, state: ForwardState, x: Variable) -> Variable:
        out = x
        for i in range(1, self.convs + 1):
            out = _conv(state, f"{self.name}.conv{i}", out, padding=1)
            out = prelu(out, state.params[f"{self.name}.act{i}.slope"])
        if not self.residual:
            return out
        shortcut = _conv(state, f"{self.name}.skip", x) if self.projects else x
        return residual_add(out, shortcut)


class MaxPool(Layer):
    def rf_steps(self) -> list[RFStep]:
        return [RFStep(self.name, 2, stride=2)]

    def __call__(self, state: ForwardState, x: Variable) -> Variable:
        state.skips.append(x)
        return maxpool2d(x)


class AuxHead(Layer):
    """1x1 logit head on a pooled tensor; its output joins the auxiliary losses."""

    def __init__(self, name: str, c_in: int):
        super().__init__(name)
        self.c_in = c_in

    def param_specs(self) -> list[ParamSpec]:
        return _conv_params(self.name, self.c_in, 1, 1)

    def __call__(self, state: ForwardState, x: Variable) -> Variable:
        state.aux.append(_conv(state, self.name, x))
        return x


class DilatedConv(Layer):
    """3x3 convolution with ``dilation`` and matching same-padding."""

    def __init__(self, name: str, channels: int, dilation: int):
        super().__init__(name)
        self.channels, self.dilation = channels, dilation

    def param_specs(self) -> list[ParamSpec]:
        return _conv_params(f"{self.name}.conv", self.channels, self.channels, 3)

    def rf_steps(self) -> list[RFStep]:
        return [RFStep(f"{self.name}.conv", 3, dilation=self.dilation)]

    def __call__(self, state: ForwardState, x: Variable) -> Variable:
        return _conv(state, f"{self.name}.conv", x, padding=self.dilation, dilation=self.dilation)


class Upsample(Layer):
    def __init__(self, name: str, c_in: int, c_out: int, mode: UpsampleMode):
        super().__init__(name)
        self.c_in, self.c_out, self.mode = c_in, c_out, mode

    def param_specs(self) -> list[ParamSpec]:
        if self.mode is UpsampleMode.BILINEAR:
            return []
        return [
            ParamSpec(f"{self.name}.weight", (self.c_in, self.c_out, 2, 2), fan_in=self.c_in),
            ParamSpec(f"{self.name}.bias", (self.c_out,)),
        ]

    def __call__(self, state: ForwardState, x: Variable) -> Variable:
        if self.mode is UpsampleMode.BILINEAR:
            return bilinear_upsample2d(x)
        p = state.params
        return transposed_conv2d(x, p[f"{self.name}.weight"], p[f"{self.name}.bias"])


class Merge(Layer):
    """Concatenates the upsampled tensor with the shrinking-path tensor of equal size."""

    def __call__(self, state: ForwardState, x: Variable) -> Variable:
        return concat_channels(x, state.skips.pop())


class Head(Layer):
    def __init__(self, name: str, c_in: int):
        super().__init__(name)
        self.c_in = c_in

    def param_specs(self) -> list[ParamSpec]:
        return _conv_params(self.name, self.c_in, 1, 1)

    def __call__(self, state: ForwardState, x: Variable) -> Variable:
        return _conv(state, self.name, x)


def build_plan(cfg: ModelConfig) -> list[Layer]:
    """Lays out the layers of the network described by ``cfg``."""
    plan: list[Layer] = []
    c_in = 1
    for level in range(1, cfg.depth + 1):
        c = cfg.channels(level)
        plan.append(ConvBlock(f"down{level}", c_in, c, cfg.convs_per_level, cfg.residual_blocks))
        plan.append(MaxPool(f"down{level}.pool"))
        if cfg.deep_supervision:
            plan.append(AuxHead(f"aux{level}", c))
        c_in = c

    bottom = cfg.channels(cfg.depth + 1)
    plan.append(ConvBlock("bottleneck", c_in, bottom, cfg.convs_per_level, cfg.residual_blocks))
    if cfg.arch is Architecture.DILATED:
        for i, dilation in enumerate(cfg.dilations, start=1):
            plan.append(DilatedConv(f"dilated{i}", bottom, dilation))

    c_in = bottom
    for level in range(cfg.depth, 0, -1):
        c = cfg.channels(level)
        if cfg.upsample_mode is UpsampleMode.TRANSPOSED:
            plan.append(Upsample(f"up{level}.upsample", c_in, c, cfg.upsample_mode))
            merged = 2 * c
        else:
            plan.append(Upsample(f"up{level}.upsample", c_in, c_in, cfg.upsample_mode))
            merged = c_in + c
        plan.append(Merge(f"up{level}.merge"))
        plan.append(ConvBlock(f"up{level}", merged, c, cfg.convs_per_level, cfg.residual_blocks))
        c_in = c
    plan.append(Head("head", c_in))
    return plan


class Model:
    """A realized network: its config, plan and named parameter tensors."""

    def __init__(self, config: ModelConfig, params: ParamDict):
        self.config = config
        self.plan = build_plan(config)
        expected = {spec.name: spec.dims for layer in self.plan for spec in layer.param_specs()}
        actual = {name: tuple(value.shape) for name, value in params.items()}
        if expected != actual:
            missing = sorted(set(expected) - set(actual))
            extra = sorted(set(actual) - set(expected))
            raise ShapeError(
                f"Parameters do not match the {config.arch.value} plan "
                f"(missing {missing}, unexpected {extra}, or mismatched dims)."
            )
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> Model:
        rng = make_rng(seed)
        params = {
            spec.name: spec.initialize(rng)
            for layer in build_plan(config)
            for spec in layer.param_specs()
        }
        return cls(config, params)

    def forward(self, batch: Tensor, graph: Graph) -> tuple[Variable, list[Variable]]:
        """Runs the network on ``batch`` [N, 1, H, W].

        Returns
        -------
            The main logits [N, 1, H, W] and one auxiliary logit map per max pool
            (empty without deep supervision), finest first.

        Raises
        ------
        ShapeError
            If the input is not single-channel or H, W are not divisible by 2**depth.

        """
        check_tensor(batch, "batch")
        step = 2**self.config.depth
        if batch.shape[1] != 1:
            raise ShapeError(f"Input must have one channel, got {batch.shape[1]}.", "batch")
        if batch.shape[2] % step or batch.shape[3] % step:
            raise ShapeError(
                f"Input extent {batch.shape[2:]} is not divisible by 2**depth = {step}.", "batch"
            )
        params = {name: graph.parameter(value, name) for name, value in self.params.items()}
        state = ForwardState(graph=graph, params=params)
        x = graph.constant(batch)
        for layer in self.plan:
            x = layer(state, x)
        return x, state.aux


def build_unet(cfg: ModelConfig, seed: int = 0) -> Model:
    """Builds the plain U-Net."""
    if cfg.arch is not Architecture.PLAIN:
        raise ConfigurationError(f"build_unet needs arch=plain, got {cfg.arch.value}.", "arch")
    return Model.initialize(cfg, seed)


def build_dilated_unet(cfg: ModelConfig, seed: int = 0) -> Model:
    """Builds the U-Net with dilated bottleneck convolutions."""
    if cfg.arch is not Architecture.DILATED:
        raise ConfigurationError(
            f"build_dilated_unet needs arch=dilated, got {cfg.arch.value}.", "arch"
        )
    return Model.initialize(cfg, seed)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    if cfg.arch is Architecture.DILATED:
        return build_dilated_unet(cfg, seed)
    return build_unet(cfg, seed)


def forward(model: Model, batch: Tensor, graph: Graph) -> tuple[Variable, list[Variable]]:
    return model.forward(batch, graph)


def walk_receptive_field(steps: Sequence[RFStep], input_size: tuple[int, int]) -> list[RFRow]:
    """Applies ``r' = r + (k - 1) * d * j`` and ``j' = j * s`` to each step.

    Convolutions are assumed same-padded, so only stride changes the extent.

    """
    r, j = 1, 1
    h, w = input_size
    rows = []
    for step in steps:
        r += (step.kernel - 1) * step.dilation * j
        j *= step.stride
        h, w = h // step.stride, w // step.stride
        rows.append(RFRow(step.name, r, j, (h, w)))
    return rows


def receptive_field_table(cfg: ModelConfig) -> list[RFRow]:
    """Receptive field of every shrinking-path and bottleneck layer of ``cfg``."""
    steps = []
    for layer in build_plan(cfg):
        if isinstance(layer, Upsample):
            break
        steps += layer.rf_steps()
    return walk_receptive_field(steps, cfg.input_size)


def covers_input(cfg: ModelConfig, rows: Optional[Sequence[RFRow]] = None) -> bool:
    """Whether the innermost receptive field spans the whole nominal input."""
    rows = receptive_field_table(cfg) if rows is None else rows
    return rows[-1].receptive_field >= max(cfg.input_size)


def parameter_count(model: Model) -> int:
    return sum(int(value.size) for value in model.params.values())


def parameter_table(model: Model) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, dims, element count) of every parameter in plan order."""
    return [
        (name, tuple(value.shape), math.prod(value.shape)) for name, value in model.params.items()
    ]
