"""A small convolutional encoder with a projection head.

Each stage is conv3x3 -> (group norm) -> relu -> 2x2 max pool, followed
by global average pooling and a linear projection to D dimensions, with
the output rows normalized to unit length.  The architecture is the
desk-scale stand-in for a full residual network: big enough to separate
the synthetic classes, small enough for CPU training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as N
from .numerics import Tensor
from .rng import RngStream


@dataclass(frozen=True)
class EncoderConfig:
    input_size: tuple = (64, 64)
    channels_per_stage: tuple = (8, 16, 32)
    feature_dim: int = 128
    normalization: str = "group_norm"
    groups: int = 4

    def __post_init__(self):
        h, w = self.input_size
        stages = len(self.channels_per_stage)
        if stages < 1:
            raise ValueError("need at least one stage")
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if h % (1 << stages) or w % (1 << stages):
            raise ValueError(
                f"input size {self.input_size} not divisible by 2^{stages}")
        if self.normalization not in ("none", "group_norm"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.normalization == "group_norm":
            for c in self.channels_per_stage:
                if c % self.groups:
                    raise ValueError(
                        f"{c} channels not divisible by {self.groups} norm groups")
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "channels_per_stage",
                           tuple(int(c) for c in self.channels_per_stage))

    def to_dict(self):
        return {
            "input_size": list(self.input_size),
            "channels_per_stage": list(self.channels_per_stage),
            "feature_dim": self.feature_dim,
            "normalization": self.normalization,
            "groups": self.groups,
        }

    @staticmethod
    def from_dict(d):
        return EncoderConfig(
            input_size=tuple(d["input_size"]),
            channels_per_stage=tuple(d["channels_per_stage"]),
            feature_dim=int(d["feature_dim"]),
            normalization=d["normalization"],
            groups=int(d["groups"]),
        )


class NetworkParams:
    """Named, ordered parameter tensors for one network instance."""

    def __init__(self, params, role, config):
        if role not in ("student", "teacher"):
            raise ValueError(f"role must be student or teacher, got {role!r}")
        self._params = dict(params)
        self.role = role
        self.config = config
        if role == "teacher":
            for t in self._params.values():
                t.requires_grad = False
                t.grad = None

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def __repr__(self):
        return f"NetworkParams(role={self.role}, tensors={len(self._params)})"


def _param_shapes(config):
    """Ordered (name, shape, init) triples; init is 'he', 'ones' or 'zeros'."""
    shapes = []
    in_ch = 1
    for s, out_ch in enumerate(config.channels_per_stage):
        shapes.append((f"stage{s}.conv.w", (out_ch, in_ch, 3, 3), "he"))
        if config.normalization == "group_norm":
            shapes.append((f"stage{s}.norm.gamma", (out_ch,), "ones"))
            shapes.append((f"stage{s}.norm.beta", (out_ch,), "zeros"))
        in_ch = out_ch
    shapes.append(("head.w", (in_ch, config.feature_dim), "he"))
    shapes.append(("head.b", (config.feature_dim,), "zeros"))
    return shapes


def parameter_count(config):
    return sum(int(np.prod(shape)) for _, shape, _ in _param_shapes(config))


def init_params(config, seed, dtype=np.float32):
    """He-initialized student parameters, deterministic per seed.

    Weight tensors draw from a stream keyed by (seed, 'init', name), so
    the values do not depend on initialization order.
    """
    root = RngStream(seed, "init")
    params = {}
    for name, shape, kind in _param_shapes(config):
        if kind == "he":
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            scale = np.sqrt(2.0 / fan_in)
            data = root.child(name).normal(0.0, scale, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return NetworkParams(params, role="student", config=config)


def clone_params(src, role):
    """Deep copy; teacher clones drop gradient tracking."""
    copies = {name: Tensor(t.data.copy(), requires_grad=(role == "student"))
              for name, t in src.items()}
    return NetworkParams(copies, role=role, config=src.config)


def encoder_forward(params, batch):
    """Map an image batch to unit-norm feature rows [Z, D]."""
    config = params.config
    images = batch.images if hasattr(batch, "images") else np.asarray(batch)
    dtype = params["head.w"].dtype
    h, w = config.input_size
    if images.shape[2:] != (h, w):
        raise N.ShapeError(
            f"batch spatial size {images.shape[2:]} does not match config {config.input_size}")
    x = Tensor(np.ascontiguousarray(images, dtype=dtype))
    for s in range(len(config.channels_per_stage)):
        x = N.conv2d(x, params[f"stage{s}.conv.w"], stride=1, padding=1)
        if config.normalization == "group_norm":
            x = N.group_norm(x, params[f"stage{s}.norm.gamma"],
                             params[f"stage{s}.norm.beta"], groups=config.groups)
        x = N.relu(x)
        x = N.max_pool_2x2(x)
    x = N.global_avg_pool(x)
    x = N.linear(x, params["head.w"], params["head.b"])
    return N.l2_normalize(x)
