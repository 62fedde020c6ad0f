"""Encoder networks: backbone + projector, one student and two EMA teachers.

The backbone is pluggable: a small two-block convnet with global average
pooling for image batches, or a flat MLP used by the gradient-check suites.
The projector is two affine layers with a ReLU between them. All parameters
are initialized with uniform fan-in scaling from a seeded stream so that
runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .numcore import Variable
from .rng import RngKey


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture description shared by the student and both teachers."""

    kind: str = "conv"                     # "conv" | "mlp"
    in_channels: int = 3
    image_size: tuple[int, int] = (16, 16)
    conv_channels: tuple[int, int] = (32, 64)
    mlp_hidden: int = 32
    feat_dim: int = 64
    proj_hidden: int = 128
    embed_dim: int = 64

    def validate(self) -> None:
        if self.kind not in ("conv", "mlp"):
            raise ConfigError(f"encoder.kind: unknown backbone '{self.kind}'")
        if self.kind == "conv" and self.feat_dim != self.conv_channels[-1]:
            raise ConfigError(
                "encoder.feat_dim: conv backbone emits its last channel count "
                f"({self.conv_channels[-1]}), got feat_dim={self.feat_dim}"
            )
        if self.kind == "conv":
            h, w = self.image_size
            if h % 4 or w % 4:
                raise ConfigError(
                    f"encoder.image_size: conv backbone pools twice, needs "
                    f"multiples of 4, got {self.image_size}"
                )
        for field in ("proj_hidden", "embed_dim", "feat_dim"):
            if getattr(self, field) < 1:
                raise ConfigError(f"encoder.{field}: must be >= 1")


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                  fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype):
        self.weight = Variable(_uniform_init(rng, (in_dim, out_dim), in_dim, dtype),
                               requires_grad=True)
        self.bias = Variable(_uniform_init(rng, (out_dim,), in_dim, dtype),
                             requires_grad=True)

    def forward(self, x: Variable) -> Variable:
        return nc.add(nc.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, ksize: int,
                 rng: np.random.Generator, dtype, padding: int = 1):
        fan_in = in_ch * ksize * ksize
        self.weight = Variable(
            _uniform_init(rng, (out_ch, in_ch, ksize, ksize), fan_in, dtype),
            requires_grad=True)
        self.bias = Variable(_uniform_init(rng, (out_ch,), fan_in, dtype),
                             requires_grad=True)
        self.padding = padding

    def forward(self, x: Variable) -> Variable:
        return nc.conv2d(x, self.weight, self.bias, padding=self.padding)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class ConvBackbone:
    """conv3x3 -> relu -> pool2 -> conv3x3 -> relu -> pool2 -> global avg pool."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator, dtype):
        ch1, ch2 = spec.conv_channels
        self.conv1 = Conv2d(spec.in_channels, ch1, 3, rng, dtype)
        self.conv2 = Conv2d(ch1, ch2, 3, rng, dtype)
        self.spec = spec
        self.feat_dim = ch2

    def forward(self, x: Variable) -> Variable:
        n, c, h, w = x.shape
        if (c, (h, w)) != (self.spec.in_channels, self.spec.image_size):
            raise ShapeError(
                f"backbone expects {self.spec.in_channels}x{self.spec.image_size}, "
                f"got {c}x{(h, w)}"
            )
        x = nc.avg_pool2d(nc.relu(self.conv1.forward(x)), 2)
        x = nc.avg_pool2d(nc.relu(self.conv2.forward(x)), 2)
        return nc.global_avg_pool(x)

    def named_parameters(self, prefix: str):
        return (self.conv1.named_parameters(f"{prefix}.conv1")
                + self.conv2.named_parameters(f"{prefix}.conv2"))


class MLPBackbone:
    """Flatten -> linear -> relu -> linear; cheap enough for gradient checks."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator, dtype):
        h, w = spec.image_size
        in_dim = spec.in_channels * h * w
        self.fc1 = Linear(in_dim, spec.mlp_hidden, rng, dtype)
        self.fc2 = Linear(spec.mlp_hidden, spec.feat_dim, rng, dtype)
        self.spec = spec
        self.feat_dim = spec.feat_dim

    def forward(self, x: Variable) -> Variable:
        n = x.shape[0]
        flat = nc.reshape(x, (n, int(np.prod(x.shape[1:]))))
        return self.fc2.forward(nc.relu(self.fc1.forward(flat)))

    def named_parameters(self, prefix: str):
        return (self.fc1.named_parameters(f"{prefix}.fc1")
                + self.fc2.named_parameters(f"{prefix}.fc2"))


class Projector:
    def __init__(self, feat_dim: int, hidden: int, embed_dim: int,
                 rng: np.random.Generator, dtype):
        self.fc1 = Linear(feat_dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, embed_dim, rng, dtype)

    def forward(self, x: Variable) -> Variable:
        return self.fc2.forward(nc.relu(self.fc1.forward(x)))

    def named_parameters(self, prefix: str):
        return (self.fc1.named_parameters(f"{prefix}.fc1")
                + self.fc2.named_parameters(f"{prefix}.fc2"))


class Network:
    """Backbone plus projector; forward yields un-normalized embeddings."""

    def __init__(self, spec: EncoderSpec, key: RngKey, dtype=np.float32):
        spec.validate()
        rng = key.generator()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        if spec.kind == "conv":
            self.backbone = ConvBackbone(spec, rng, self.dtype)
        else:
            self.backbone = MLPBackbone(spec, rng, self.dtype)
        self.projector = Projector(self.backbone.feat_dim, spec.proj_hidden,
                                   spec.embed_dim, rng, self.dtype)

    def forward(self, x: Variable | np.ndarray) -> Variable:
        x = nc.as_variable(x)
        return self.projector.forward(self.backbone.forward(x))

    def backbone_features(self, x: Variable | np.ndarray) -> Variable:
        return self.backbone.forward(nc.as_variable(x))

    def named_parameters(self) -> list[tuple[str, Variable]]:
        return (self.backbone.named_parameters("backbone")
                + self.projector.named_parameters("projector"))

    def parameters(self) -> list[Variable]:
        return [p for _, p in self.named_parameters()]


def init_teachers(tri: "TriNetwork") -> None:
    """Make both teachers exact parameter copies of the student."""
    for teacher in (tri.teacher1, tri.teacher2):
        for (_, pt), (_, ps) in zip(teacher.named_parameters(),
                                    tri.student.named_parameters()):
            pt.value[...] = ps.value


def ema_update(teacher: Network, student: Network, m: float) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum coefficient m={m} outside [0, 1]")
    for (name_t, pt), (name_s, ps) in zip(teacher.named_parameters(),
                                          student.named_parameters()):
        if pt.value.shape != ps.value.shape or name_t != name_s:
            raise ShapeError(
                f"ema_update: mismatched parameters {name_t}{pt.value.shape} "
                f"vs {name_s}{ps.value.shape}"
            )
        pt.value *= m
        pt.value += (1.0 - m) * ps.value


class TriNetwork:
    """Gradient-trained student plus two EMA teachers with momenta m1 != m2."""

    def __init__(self, spec: EncoderSpec, key: RngKey, m1: float, m2: float,
                 dtype=np.float32):
        self.student = Network(spec, key.child("student"), dtype)
        # Teachers start as exact copies; their init stream never matters.
        self.teacher1 = Network(spec, key.child("teacher1"), dtype)
        self.teacher2 = Network(spec, key.child("teacher2"), dtype)
        self.m1 = m1
        self.m2 = m2
        init_teachers(self)

    def ema_step(self) -> None:
        ema_update(self.teacher1, self.student, self.m1)
        ema_update(self.teacher2, self.student, self.m2)
