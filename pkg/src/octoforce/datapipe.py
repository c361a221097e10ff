"""Volume type, downsampling, surface extraction, label scaling, splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class Volume:
    """A 3D intensity grid with physical voxel spacing.

    ``data`` is float32 in [0,1], indexed [x, y, z] with z the axial
    (depth) axis. ``spacing_mm`` is per-axis mm/voxel, so extents times
    spacing recover the field of view.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"Volume: expected 3 axes, got {self.data.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def fov_mm(self) -> tuple[float, float, float]:
        return tuple(e * s for e, s in zip(self.data.shape, self.spacing_mm))


@dataclass
class SurfaceMaps:
    """Per-pixel maximum intensity and normalized first-argmax depth."""

    mip: np.ndarray    # [W, H] float32
    depth: np.ndarray  # [W, H] float32 in [0,1]


def downsample(v: Volume, target: tuple[int, int, int]) -> Volume:
    """Block-average pooling to `target` extents; spacing is scaled up."""
    src = v.extents
    if any(s % t != 0 for s, t in zip(src, target)):
        raise ShapeError(f"downsample: target {target} does not divide extents {src}")
    fx, fy, fz = (s // t for s, t in zip(src, target))
    d = v.data.reshape(target[0], fx, target[1], fy, target[2], fz)
    pooled = d.mean(axis=(1, 3, 5)).astype(np.float32)
    spacing = (v.spacing_mm[0] * fx, v.spacing_mm[1] * fy, v.spacing_mm[2] * fz)
    return Volume(pooled, spacing)


def extract_surfaces(v: Volume) -> SurfaceMaps:
    """MIP along the axial axis plus its first-argmax depth map.

    Ties break to the shallowest index (argmax convention), so a constant
    column maps to depth 0.
    """
    mip = v.data.max(axis=2).astype(np.float32)
    idx = v.data.argmax(axis=2)
    denom = max(v.extents[2] - 1, 1)
    return SurfaceMaps(mip, (idx / denom).astype(np.float32))


@dataclass
class LabelScaler:
    """Per-component min-max map of force labels onto [0,1].

    Fit on the training split only. A degenerate component (min == max)
    maps to the constant 0.5 and inverts back to the constant.
    """

    mins: np.ndarray
    maxs: np.ndarray

    @classmethod
    def fit(cls, labels: np.ndarray) -> "LabelScaler":
        labels = np.asarray(labels, dtype=np.float64)
        if labels.ndim != 2 or labels.shape[0] < 1:
            raise ShapeError(f"LabelScaler.fit: expected [N,d] labels, got {labels.shape}")
        return cls(labels.min(axis=0), labels.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        return self.maxs - self.mins

    def apply(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.float64)
        span = self.span
        safe = np.where(span > 0, span, 1.0)
        scaled = (labels - self.mins) / safe
        return np.where(span > 0, scaled, 0.5)

    def invert(self, scaled: np.ndarray) -> np.ndarray:
        scaled = np.asarray(scaled, dtype=np.float64)
        span = self.span
        return np.where(span > 0, self.mins + scaled * span, self.mins)

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelScaler":
        return cls(np.asarray(d["mins"], np.float64), np.asarray(d["maxs"], np.float64))


@dataclass(frozen=True)
class SplitSpec:
    """Shuffled train/val/test fractions; optionally keeps ROIs intact."""

    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    group_aware: bool = True

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split.fractions: must sum to 1, got {self.fractions}")
        if any(f < 0 for f in self.fractions):
            raise ConfigError(f"split.fractions: must be non-negative, got {self.fractions}")

    def to_dict(self) -> dict:
        return {"fractions": list(self.fractions), "seed": self.seed,
                "group_aware": self.group_aware}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(tuple(d.get("fractions", (0.8, 0.1, 0.1))), int(d.get("seed", 0)),
                   bool(d.get("group_aware", True)))


def split_indices(n: int, spec: SplitSpec,
                  groups: list[int] | None = None) -> dict[str, list[int]]:
    """Partition range(n) into train/val/test index lists.

    With ``groups`` (one id per item, e.g. the ROI index) and
    ``group_aware``, whole groups are assigned to splits so no group
    straddles a boundary.
    """
    rng = np.random.default_rng(spec.seed)
    f_tr, f_va, _ = spec.fractions
    n_tr = int(np.floor(n * f_tr))
    n_va = int(np.floor(n * f_va))

    if groups is not None and spec.group_aware:
        if len(groups) != n:
            raise ShapeError(f"split: {len(groups)} group ids for {n} items")
        by_group: dict[int, list[int]] = {}
        for i, gid in enumerate(groups):
            by_group.setdefault(gid, []).append(i)
        gids = sorted(by_group)
        rng.shuffle(gids)
        out = {"train": [], "val": [], "test": []}
        for gid in gids:
            members = by_group[gid]
            if len(out["train"]) < n_tr:
                out["train"].extend(members)
            elif len(out["val"]) < n_va:
                out["val"].extend(members)
            else:
                out["test"].extend(members)
        return out

    perm = rng.permutation(n).tolist()
    return {"train": perm[:n_tr], "val": perm[n_tr:n_tr + n_va], "test": perm[n_tr + n_va:]}


def check_split_disjoint(splits: dict[str, list[int]], n: int) -> None:
    """Raise if the splits are not a disjoint cover of range(n)."""
    all_idx = sorted(i for part in splits.values() for i in part)
    if all_idx != list(range(n)):
        raise ConfigError("split: indices are not a disjoint cover of the dataset")
