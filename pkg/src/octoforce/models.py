"""Builders for the evaluated model families.

Five families share one construction: an initial 3-conv, a stack of
weight-shared path blocks, a fusion point, a stack of joint blocks,
global average pooling, and a dense head with no output activation.

  siamcnn       two volumes, shared 3D paths, channel concatenation
  diffcnn-      voxel-wise sample - reference, single 3D path
  diffcnn+      voxel-wise sample + reference, single 3D path
  surfcnn-mip   two max-intensity maps, shared 2D paths, concatenation
  surfcnn-depth two surface depth maps, shared 2D paths, concatenation
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .blocks import BlockSpec, bottleneck_block, he_normal, init_block_params
from .errors import ConfigError, ShapeError
from .tensor import Tensor, make_op_output

MODEL_FAMILIES = ("siamcnn", "diffcnn-", "diffcnn+", "surfcnn-mip", "surfcnn-depth")

VOLUMETRIC_SIAMESE = "volumetric-siamese"
VOLUMETRIC_SINGLE = "volumetric-single"
PLANAR_SIAMESE = "planar-siamese"


@dataclass(frozen=True)
class ArchSpec:
    """Network schedule: input extent, initial channels, block lists."""

    mode: str
    input_extent: int
    init_channels: int
    path_blocks: tuple[BlockSpec, ...]
    joint_blocks: tuple[BlockSpec, ...]
    output_dim: int = 3
    combine: Optional[str] = None         # volumetric-single: "subtract" | "add"
    representation: Optional[str] = None  # planar: "mip" | "depth"
    share_weights: bool = True
    init_stride: int = 1

    def __post_init__(self):
        if self.mode not in (VOLUMETRIC_SIAMESE, VOLUMETRIC_SINGLE, PLANAR_SIAMESE):
            raise ConfigError(f"arch.mode: unknown mode {self.mode!r}")
        if self.mode == VOLUMETRIC_SINGLE and self.combine not in ("subtract", "add"):
            raise ConfigError("arch.combine: volumetric-single needs 'subtract' or 'add'")
        if self.mode == PLANAR_SIAMESE and self.representation not in ("mip", "depth"):
            raise ConfigError("arch.representation: planar-siamese needs 'mip' or 'depth'")
        if self.init_stride not in (1, 2):
            raise ConfigError(f"arch.init_stride: must be 1 or 2, got {self.init_stride}")

    @property
    def ndim(self) -> int:
        return 2 if self.mode == PLANAR_SIAMESE else 3

    @property
    def family(self) -> str:
        if self.mode == VOLUMETRIC_SIAMESE:
            return "siamcnn"
        if self.mode == VOLUMETRIC_SINGLE:
            return "diffcnn-" if self.combine == "subtract" else "diffcnn+"
        return f"surfcnn-{self.representation}"

    def extent_schedule(self) -> list[int]:
        """Spatial extent after the init conv and after each block."""
        e = -(-self.input_extent // self.init_stride)
        out = [e]
        for b in self.path_blocks + self.joint_blocks:
            e = -(-e // b.stride)
            out.append(e)
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "input_extent": self.input_extent,
            "init_channels": self.init_channels,
            "path_blocks": [b.to_dict() for b in self.path_blocks],
            "joint_blocks": [b.to_dict() for b in self.joint_blocks],
            "output_dim": self.output_dim, "combine": self.combine,
            "representation": self.representation, "share_weights": self.share_weights,
            "init_stride": self.init_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            mode=d["mode"], input_extent=int(d["input_extent"]),
            init_channels=int(d["init_channels"]),
            path_blocks=tuple(BlockSpec.from_dict(b) for b in d["path_blocks"]),
            joint_blocks=tuple(BlockSpec.from_dict(b) for b in d["joint_blocks"]),
            output_dim=int(d.get("output_dim", 3)), combine=d.get("combine"),
            representation=d.get("representation"),
            share_weights=bool(d.get("share_weights", True)),
            init_stride=int(d.get("init_stride", 1)),
        )


# Default nine-block schedule for 64-extent inputs. Path extents run
# 64 -> 32 -> 16, the fusion doubles channels to 128, and the first joint
# block keeps channels constant while halving to 8; joints continue 4 -> 2.
DEFAULT_PATH_BLOCKS = (BlockSpec(32, 2), BlockSpec(32, 1), BlockSpec(64, 2))
DEFAULT_JOINT_BLOCKS = (BlockSpec(128, 2), BlockSpec(128, 1), BlockSpec(256, 2),
                        BlockSpec(256, 1), BlockSpec(256, 2), BlockSpec(256, 1))
DEFAULT_INIT_CHANNELS = 16


def default_arch_spec(family: str, input_extent: int = 64) -> ArchSpec:
    """Paper-faithful nine-block spec for any of the five families."""
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"model: unknown family {family!r}; valid: {', '.join(MODEL_FAMILIES)}")
    kw = dict(input_extent=input_extent, init_channels=DEFAULT_INIT_CHANNELS,
              path_blocks=DEFAULT_PATH_BLOCKS, joint_blocks=DEFAULT_JOINT_BLOCKS)
    if family == "siamcnn":
        return ArchSpec(mode=VOLUMETRIC_SIAMESE, **kw)
    if family in ("diffcnn-", "diffcnn+"):
        return ArchSpec(mode=VOLUMETRIC_SINGLE,
                        combine="subtract" if family == "diffcnn-" else "add", **kw)
    return ArchSpec(mode=PLANAR_SIAMESE, representation=family.split("-", 1)[1], **kw)


def _combine_inputs(reference: Tensor, sample: Tensor, combine: str) -> Tensor:
    if reference.shape != sample.shape:
        raise ShapeError(f"combine: shape mismatch {reference.shape} vs {sample.shape}")
    sign = -1.0 if combine == "subtract" else 1.0

    def backward(out: Tensor) -> None:
        sample.accumulate_grad(out.grad)
        reference.accumulate_grad(sign * out.grad)

    return make_op_output(sample.data + sign * reference.data, (reference, sample), backward)


class ModelGraph:
    """A built network: named parameters, BN state, and a forward function."""

    def __init__(self, spec: ArchSpec, params: dict[str, Tensor],
                 bn_states: dict[str, ops.BNState], path_param_names: tuple[str, ...]):
        self.spec = spec
        self.params = params
        self.bn_states = bn_states
        self.path_param_names = path_param_names
        self.family = spec.family

    # -- forward -------------------------------------------------------------

    def _check_input(self, t: Tensor, role: str) -> None:
        nd = self.spec.ndim
        expect = (self.spec.input_extent,) * nd + (1,)
        if t.ndim != nd + 2 or t.shape[1:] != expect:
            raise ShapeError(
                f"{self.family}: {role} must be [N,{','.join(map(str, expect))}], got {t.shape}")

    def _run_path(self, x: Tensor, mode: str, side: str) -> Tensor:
        p = self.params
        prefix = "" if (self.spec.share_weights or side == "a") else "b:"
        conv = ops.conv3d if self.spec.ndim == 3 else ops.conv2d
        h = conv(x, p[f"{prefix}init.w"], stride=self.spec.init_stride)
        for i, b in enumerate(self.spec.path_blocks):
            h = bottleneck_block(h, f"{prefix}path.{i}", b, p, self.bn_states, mode)
        return h

    def forward(self, reference: Tensor, sample: Tensor, mode: str = "infer",
                features: Optional[dict] = None) -> Tensor:
        """Map a (reference, sample) pair batch to [N, output_dim] outputs.

        ``features``, when given, collects named intermediate tensors for
        inspection in tests and diagnostics.
        """
        self._check_input(reference, "reference")
        self._check_input(sample, "sample")
        p = self.params
        if self.spec.mode == VOLUMETRIC_SINGLE:
            combined = _combine_inputs(reference, sample, self.spec.combine)
            fused = self._run_path(combined, mode, "a")
            if features is not None:
                features["combined_input"] = combined
        else:
            fa = self._run_path(reference, mode, "a")
            fb = self._run_path(sample, mode, "b")
            fused = ops.concat_channels(fa, fb)
            if features is not None:
                features["path_reference"] = fa
                features["path_sample"] = fb
        if features is not None:
            features["fused"] = fused

        h = fused
        for i, b in enumerate(self.spec.joint_blocks):
            h = bottleneck_block(h, f"joint.{i}", b, p, self.bn_states, mode)
        h = ops.relu(ops.batch_norm(h, p["head.gamma"], p["head.beta"],
                                    self.bn_states["head"], mode=mode))
        pooled = ops.gap(h)
        out = ops.dense(pooled, p["head.w"], p["head.b"])
        if features is not None:
            features["pooled"] = pooled
        return out

    # -- bookkeeping ---------------------------------------------------------

    def count_params(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    def state_copy(self) -> tuple[dict[str, np.ndarray], dict[str, ops.BNState]]:
        return ({k: p.data.copy() for k, p in self.params.items()},
                {k: s.copy() for k, s in self.bn_states.items()})

    def load_state(self, params: dict[str, np.ndarray], bn: dict[str, ops.BNState]) -> None:
        for k, arr in params.items():
            self.params[k].data = arr.copy()
        for k, s in bn.items():
            self.bn_states[k] = s.copy()


def build_model(spec: ArchSpec, seed: int = 0) -> ModelGraph:
    """Instantiate parameters for ``spec`` and verify its extent schedule."""
    rng = np.random.default_rng(seed)
    ndim = spec.ndim
    params: dict[str, Tensor] = {}
    bn_states: dict[str, ops.BNState] = {}

    def build_path(prefix: str) -> int:
        params[f"{prefix}init.w"] = Tensor(
            he_normal(rng, (3,) * ndim + (1, spec.init_channels), 3 ** ndim),
            requires_grad=True)
        c = spec.init_channels
        for i, b in enumerate(spec.path_blocks):
            init_block_params(f"{prefix}path.{i}", c, b, ndim, rng, params, bn_states)
            c = b.f_out
        return c

    c = build_path("")
    path_names = tuple(params)
    if spec.mode in (VOLUMETRIC_SIAMESE, PLANAR_SIAMESE):
        if not spec.share_weights:
            build_path("b:")
        c = 2 * c  # concatenation: F1 + F2, reference channels first

    for i, b in enumerate(spec.joint_blocks):
        init_block_params(f"joint.{i}", c, b, ndim, rng, params, bn_states)
        c = b.f_out

    params["head.gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True)
    params["head.beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True)
    bn_states["head"] = ops.BNState.create(c)
    params["head.w"] = Tensor(he_normal(rng, (c, spec.output_dim), c), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(spec.output_dim, np.float32), requires_grad=True)

    return ModelGraph(spec, params, bn_states, path_names)


def build_siamcnn(spec: ArchSpec, seed: int = 0) -> ModelGraph:
    if spec.mode != VOLUMETRIC_SIAMESE:
        raise ConfigError(f"build_siamcnn: spec mode is {spec.mode!r}")
    return build_model(spec, seed)


def build_diffcnn(spec: ArchSpec, seed: int = 0) -> ModelGraph:
    if spec.mode != VOLUMETRIC_SINGLE:
        raise ConfigError(f"build_diffcnn: spec mode is {spec.mode!r}")
    return build_model(spec, seed)


def build_surfcnn(spec: ArchSpec, seed: int = 0) -> ModelGraph:
    if spec.mode != PLANAR_SIAMESE:
        raise ConfigError(f"build_surfcnn: spec mode is {spec.mode!r}")
    return build_model(spec, seed)


def count_params(model: ModelGraph) -> int:
    return model.count_params()
