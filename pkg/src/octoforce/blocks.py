"""Pre-activation residual bottleneck blocks (3D and 2D).

Block body: BN -> ReLU -> 1-conv squeeze -> BN -> ReLU -> k-conv (carries
the stride) -> BN -> ReLU -> 1-conv expand. The skip is the identity when
shape is preserved, otherwise a stride-matched 1-conv projection applied
to the pre-activated input. Convolutions inside blocks carry no bias; the
surrounding batch norms absorb it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor, add


@dataclass(frozen=True)
class BlockSpec:
    """One residual block: output channels, spatial stride, squeeze divisor."""

    f_out: int
    stride: int = 1
    bottleneck_ratio: int = 4

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"BlockSpec: stride must be 1 or 2, got {self.stride}")
        if self.f_out % self.bottleneck_ratio != 0:
            raise ValueError(
                f"BlockSpec: f_out={self.f_out} not divisible by ratio {self.bottleneck_ratio}")

    @property
    def squeeze(self) -> int:
        return self.f_out // self.bottleneck_ratio

    def to_dict(self) -> dict:
        return {"f_out": self.f_out, "stride": self.stride,
                "bottleneck_ratio": self.bottleneck_ratio}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(int(d["f_out"]), int(d.get("stride", 1)), int(d.get("bottleneck_ratio", 4)))


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_block_params(name: str, c_in: int, spec: BlockSpec, ndim: int,
                      rng: np.random.Generator,
                      params: dict[str, Tensor], bn_states: dict[str, ops.BNState]) -> None:
    """Create and register the tensors for one block under `name.*`."""
    if c_in <= 0:
        raise ShapeError(f"{name}: input channel count must be positive, got {c_in}")
    c_mid = spec.squeeze
    kshape1 = (1,) * ndim
    kshape3 = (3,) * ndim

    def bn(suffix: str, channels: int) -> None:
        params[f"{name}.{suffix}.gamma"] = Tensor(np.ones(channels, np.float32), requires_grad=True)
        params[f"{name}.{suffix}.beta"] = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        bn_states[f"{name}.{suffix}"] = ops.BNState.create(channels)

    bn("bn1", c_in)
    params[f"{name}.squeeze.w"] = Tensor(
        he_normal(rng, kshape1 + (c_in, c_mid), c_in), requires_grad=True)
    bn("bn2", c_mid)
    params[f"{name}.conv.w"] = Tensor(
        he_normal(rng, kshape3 + (c_mid, c_mid), c_mid * 3 ** ndim), requires_grad=True)
    bn("bn3", c_mid)
    params[f"{name}.expand.w"] = Tensor(
        he_normal(rng, kshape1 + (c_mid, spec.f_out), c_mid), requires_grad=True)
    if spec.stride != 1 or c_in != spec.f_out:
        params[f"{name}.proj.w"] = Tensor(
            he_normal(rng, kshape1 + (c_in, spec.f_out), c_in), requires_grad=True)


def bottleneck_block(x: Tensor, name: str, spec: BlockSpec,
                     params: dict[str, Tensor], bn_states: dict[str, ops.BNState],
                     mode: str) -> Tensor:
    """Apply one pre-activation bottleneck block registered under `name`."""
    ndim = x.ndim - 2
    conv = ops.conv3d if ndim == 3 else ops.conv2d

    def bn(t: Tensor, suffix: str) -> Tensor:
        return ops.batch_norm(t, params[f"{name}.{suffix}.gamma"],
                              params[f"{name}.{suffix}.beta"],
                              bn_states[f"{name}.{suffix}"], mode=mode)

    pre = ops.relu(bn(x, "bn1"))
    h = conv(pre, params[f"{name}.squeeze.w"])
    h = ops.relu(bn(h, "bn2"))
    h = conv(h, params[f"{name}.conv.w"], stride=spec.stride)
    h = ops.relu(bn(h, "bn3"))
    h = conv(h, params[f"{name}.expand.w"])

    proj = params.get(f"{name}.proj.w")
    skip = x if proj is None else conv(pre, proj, stride=spec.stride)
    return add(h, skip)
