"""Compound-scaled EfficientNet-family networks built on :mod:`gplab.tensor`."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUM_CLASSES = 6


@dataclass(frozen=True)
class ScalingCoefficients:
    depth_multiplier: float = 1.0
    width_multiplier: float = 1.0
    input_resolution: int = 224

    def __post_init__(self):
        if self.depth_multiplier <= 0 or self.width_multiplier <= 0 or self.input_resolution <= 0:
            raise ValueError(f"scaling coefficients must be strictly positive: {self}")


@dataclass(frozen=True)
class StageSpec:
    kernel_size: int
    stride: int
    expand_ratio: int
    out_channels: int
    repeats: int
    se_ratio: float = 0.25


# (kernel, stride, expansion, base channels, base repeats)
_B0_STAGES = (
    StageSpec(3, 1, 1, 16, 1),
    StageSpec(3, 2, 6, 24, 2),
    StageSpec(5, 2, 6, 40, 2),
    StageSpec(3, 2, 6, 80, 3),
    StageSpec(5, 1, 6, 112, 3),
    StageSpec(5, 2, 6, 192, 4),
    StageSpec(3, 1, 6, 320, 1),
)

# first three B0 stages; the desk-scale family
_TOY_STAGES = _B0_STAGES[:3]

# name suffix -> (width, depth, resolution) of the canonical family
_COEFFICIENTS = {
    "B0": (1.0, 1.0, 224),
    "B1": (1.0, 1.1, 240),
    "B2": (1.1, 1.2, 260),
    "B3": (1.2, 1.4, 300),
    "B4": (1.4, 1.8, 380),
}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    coefficients: ScalingCoefficients
    stages: tuple = _B0_STAGES
    stem_channels: int = 32
    head_channels: int = 1280
    head_classes: int = NUM_CLASSES
    channel_divisor: int = 8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if not self.stages:
            raise ValueError("stage table is empty")
        for i, s in enumerate(self.stages):
            if s.kernel_size < 1 or s.kernel_size % 2 == 0:
                raise ValueError(f"stage {i}: kernel size must be odd and positive, got {s.kernel_size}")
            if s.stride not in (1, 2):
                raise ValueError(f"stage {i}: stride must be 1 or 2, got {s.stride}")
            if s.expand_ratio < 1 or s.out_channels < 1 or s.repeats < 1:
                raise ValueError(f"stage {i}: expansion, channels and repeats must be >= 1")
            if not 0 < s.se_ratio <= 1:
                raise ValueError(f"stage {i}: se_ratio must lie in (0, 1]")
        if self.head_classes < 1 or self.channel_divisor < 1:
            raise ValueError("head_classes and channel_divisor must be >= 1")

    def round_filters(self, channels: int) -> int:
        return round_filters(channels, self.coefficients.width_multiplier, self.channel_divisor)

    def resolved_stages(self) -> list[StageSpec]:
        depth = self.coefficients.depth_multiplier
        return [replace(s, out_channels=self.round_filters(s.out_channels),
                        repeats=round_repeats(s.repeats, depth)) for s in self.stages]

    @property
    def total_stride(self) -> int:
        return 2 * math.prod(s.stride for s in self.stages)


def round_filters(base_channels: int, width_multiplier: float, divisor: int = 8) -> int:
    """Scale a channel count and snap it to a multiple of ``divisor``.

    Never returns less than ``divisor`` and never rounds down by more than 10%.
    """
    if base_channels < 1:
        raise ValueError("base_channels must be >= 1")
    scaled = base_channels * width_multiplier
    out = max(divisor, int(scaled + divisor / 2) // divisor * divisor)
    if out < 0.9 * scaled:
        out += divisor
    return int(out)


def round_repeats(base_repeats: int, depth_multiplier: float) -> int:
    if base_repeats < 1:
        raise ValueError("base_repeats must be >= 1")
    return int(math.ceil(depth_multiplier * base_repeats))


def _spec(name: str, suffix: str, toy: bool) -> ModelSpec:
    width, depth, res = _COEFFICIENTS[suffix]
    if toy:
        return ModelSpec(name, ScalingCoefficients(depth, width, round(64 * res / 224)),
                         stages=_TOY_STAGES, head_channels=256)
    return ModelSpec(name, ScalingCoefficients(depth, width, res))


MODEL_SPECS: dict[str, ModelSpec] = {}
for _suffix in _COEFFICIENTS:
    MODEL_SPECS[_suffix] = _spec(_suffix, _suffix, toy=False)
    MODEL_SPECS[f"toy-{_suffix}"] = _spec(f"toy-{_suffix}", _suffix, toy=True)


def get_spec(name: str) -> ModelSpec:
    try:
        return MODEL_SPECS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_SPECS)}") from None


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter/buffer container with dotted, stable names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, groups: int = 1):
        super().__init__()
        self.stride, self.padding, self.groups = stride, k // 2, groups
        fan_in = (cin // groups) * k * k
        self.weight = self.add_param("weight", _he_normal(rng, (cout, cin // groups, k, k), fan_in))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding, self.groups)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = self.add_param("weight", np.ones(channels))
        self.bias = self.add_param("bias", np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm2d(x, self.weight, self.bias, self._buffers["running_mean"],
                              self._buffers["running_var"], training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, rng, fin: int, fout: int, gain: float = 1.0):
        super().__init__()
        self.weight = self.add_param("weight", rng.normal(0.0, math.sqrt(gain / fin), size=(fout, fin)))
        self.bias = self.add_param("bias", np.zeros(fout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ConvBN(Module):
    def __init__(self, rng, cin, cout, k, stride=1, groups=1, momentum=0.1, eps=1e-5):
        super().__init__()
        self.conv = self.add_child("conv", Conv(rng, cin, cout, k, stride, groups))
        self.bn = self.add_child("bn", BatchNorm(cout, momentum, eps))

    def __call__(self, x: Tensor, training: bool, act: bool = True) -> Tensor:
        y = self.bn(self.conv(x), training)
        return T.silu(y) if act else y


class SqueezeExcite(Module):
    """Channel gate: pool -> reduce -> SiLU -> expand -> sigmoid -> scale."""

    def __init__(self, rng, channels: int, reduced: int):
        super().__init__()
        self.reduce = self.add_child("reduce", Linear(rng, channels, reduced, gain=2.0))
        self.expand = self.add_child("expand", Linear(rng, reduced, channels, gain=2.0))

    def gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        pooled = T.reshape(T.adaptive_avg_pool2d(x, 1), (n, c))
        g = T.sigmoid(self.expand(T.silu(self.reduce(pooled))))
        return T.reshape(g, (n, c, 1, 1))

    def __call__(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class MBConv(Module):
    def __init__(self, rng, cin: int, cout: int, stage: StageSpec, stride: int,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.in_channels, self.out_channels, self.stride = cin, cout, stride
        mid = cin * stage.expand_ratio
        self.expand = None
        if stage.expand_ratio != 1:
            self.expand = self.add_child("expand", ConvBN(rng, cin, mid, 1, momentum=momentum, eps=eps))
        self.depthwise = self.add_child(
            "depthwise", ConvBN(rng, mid, mid, stage.kernel_size, stride, groups=mid, momentum=momentum, eps=eps))
        self.se = self.add_child("se", SqueezeExcite(rng, mid, max(1, int(cin * stage.se_ratio))))
        self.project = self.add_child("project", ConvBN(rng, mid, cout, 1, momentum=momentum, eps=eps))
        self.residual = stride == 1 and cin == cout

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"MBConv expects {self.in_channels} input channels, got {x.shape[1]}")
        h = self.expand(x, training) if self.expand is not None else x
        h = self.depthwise(h, training)
        h = self.se(h)
        h = self.project(h, training, act=False)
        return h + x if self.residual else h


def mbconv_forward(x: Tensor, block: MBConv, mode: str = "train") -> Tensor:
    return block(x, _training(mode))


def _training(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


class Network(Module):
    """stem -> MBConv stages -> head conv/BN/SiLU -> global average pool -> linear."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        m, eps = spec.bn_momentum, spec.bn_eps
        stem = spec.round_filters(spec.stem_channels)
        self.stem = self.add_child("stem", ConvBN(rng, 3, stem, 3, stride=2, momentum=m, eps=eps))
        self.blocks: list[MBConv] = []
        cin = stem
        for si, stage in enumerate(spec.resolved_stages()):
            for r in range(stage.repeats):
                stride = stage.stride if r == 0 else 1
                block = MBConv(rng, cin, stage.out_channels, stage, stride, m, eps)
                self.add_child(f"blocks.{si}.{r}", block)
                self.blocks.append(block)
                cin = stage.out_channels
        head = spec.round_filters(spec.head_channels)
        self.head = self.add_child("head", ConvBN(rng, cin, head, 1, momentum=m, eps=eps))
        self.classifier = self.add_child("classifier", Linear(rng, head, spec.head_classes))

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return forward(self, x, mode)

    def astype(self, dtype) -> "Network":
        """Cast parameters and buffers in place (64-bit for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in _walk(self):
            for k, b in mod._buffers.items():
                mod._buffers[k] = b.astype(dtype)
        return self

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.named_parameters()}
        out.update({f"buffer/{k}": b for k, b in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.state()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"parameter registry mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, v in own.items():
            if v.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: expected {v.shape}, got {state[k].shape}")
        params = dict(self.named_parameters())
        for k, p in params.items():
            p.data = np.array(state[f"param/{k}"], dtype=p.data.dtype)
        for mod, prefix in _walk_prefixed(self):
            for k in mod._buffers:
                mod._buffers[k] = np.array(state[f"buffer/{prefix}{k}"], dtype=mod._buffers[k].dtype)

    def registry(self) -> list[tuple[str, tuple]]:
        return [(k, v.shape) for k, v in self.state().items()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(mod: Module):
    yield mod
    for child in mod._children.values():
        yield from _walk(child)


def _walk_prefixed(mod: Module, prefix: str = ""):
    yield mod, prefix
    for name, child in mod._children.items():
        yield from _walk_prefixed(child, f"{prefix}{name}.")


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Deterministic initialization: identical seeds give bit-identical parameters."""
    net = Network(spec, np.random.default_rng(seed))
    return net.astype(dtype)


def forward(net: Network, batch: Tensor, mode: str = "train") -> Tensor:
    training = _training(mode)
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected a (N, 3, H, W) batch, got shape {batch.shape}")
    minimum = net.spec.total_stride
    if batch.shape[2] < minimum or batch.shape[3] < minimum:
        raise ValueError(f"spatial size {batch.shape[2]}x{batch.shape[3]} too small; "
                         f"minimum is {minimum}x{minimum}")
    x = net.stem(batch, training)
    for block in net.blocks:
        x = block(x, training)
    x = net.head(x, training)
    x = T.adaptive_avg_pool2d(x, 1)
    x = T.flatten(x)
    return net.classifier(x)

