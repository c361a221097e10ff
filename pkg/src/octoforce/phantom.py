"""Synthetic OCT-like phantom generator with an analytic force oracle.

The phantom is a procedural medium defined over global lateral
coordinates: a smooth relief surface, an exponentially decaying
scattering body, and a buried layer whose brightness encodes a
piecewise-constant stiffness field. A tool pose indents the surface,
compresses the material below it (brightness-preserving axial remap),
and casts a conical occlusion shadow. Ground-truth forces come from a
Hertz-like contact model, not from the images.

Two invariants are built in rather than hoped for:

* Surface blindness to stiffness: every voxel that depends on the
  stiffness field is capped strictly below the surface-interface voxel
  (even under maximum shadow and speckle), so max-intensity and depth
  maps are bit-identical between phantoms that differ only in stiffness.
* Reproducibility: every volume derives its randomness from
  (seed, roi index, pose index) streams, so parallel and serial
  generation agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datapipe import Volume
from .errors import ConfigError

POSE_BOUNDS = {
    "theta_x_deg": (-30.0, 30.0),
    "theta_y_deg": (0.0, 10.0),
    "theta_z_deg": (-10.0, 10.0),
    "depth_mm": (0.5, 1.5),
}

# rendering constants; material voxels are capped strictly below the
# interface value so the surface always wins the axial argmax
INTERFACE_VALUE = 0.98
MATERIAL_CAP = 0.80
AIR_LEVEL = 0.02
SURFACE_PEAK = 0.70
SURFACE_SIGMA_MM = 0.10
BODY_GAIN = 0.22
BODY_TAU_MM = 0.8
BAND_SUPPORT_SIGMAS = 3.0
FRICTION_MU = 0.2


@dataclass(frozen=True)
class ToolPose:
    """Tool orientation (degrees) and indentation depth (mm)."""

    theta_x_deg: float
    theta_y_deg: float
    theta_z_deg: float
    depth_mm: float

    def __post_init__(self):
        for name, (lo, hi) in POSE_BOUNDS.items():
            v = getattr(self, name)
            if not (lo <= v <= hi) or not math.isfinite(v):
                raise ConfigError(f"pose.{name}: {v} outside [{lo}, {hi}]")

    def axis(self) -> np.ndarray:
        """Unit tool-axis direction in the OCT frame (z points into tissue)."""
        tx, ty, tz = (math.radians(getattr(self, n))
                      for n in ("theta_x_deg", "theta_y_deg", "theta_z_deg"))
        # Rz(tz) @ Ry(ty) @ Rx(tx) applied to (0, 0, 1)
        u = math.sin(ty) * math.cos(tx)
        v = -math.sin(tx)
        w = math.cos(ty) * math.cos(tx)
        return np.array([math.cos(tz) * u - math.sin(tz) * v,
                         math.sin(tz) * u + math.cos(tz) * v, w], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"theta_x_deg": self.theta_x_deg, "theta_y_deg": self.theta_y_deg,
                "theta_z_deg": self.theta_z_deg, "depth_mm": self.depth_mm}

    @classmethod
    def from_dict(cls, d: dict) -> "ToolPose":
        return cls(float(d["theta_x_deg"]), float(d["theta_y_deg"]),
                   float(d["theta_z_deg"]), float(d["depth_mm"]))


@dataclass(frozen=True)
class ForceVector:
    """Force acting on the tissue, newtons, OCT frame."""

    fx: float
    fy: float
    fz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.fz], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "ForceVector":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, optics, and stiffness layout of one synthetic phantom."""

    grid: tuple[int, int, int] = (64, 64, 64)
    lateral_fov_mm: float = 10.0
    axial_fov_mm: float = 2.66
    seed: int = 0
    # surface relief
    base_depth_mm: float = 0.55
    relief_amp_mm: float = 0.15
    relief_waves: int = 3
    # buried stiffness layer
    k_values: tuple[float, ...] = (0.6, 1.8)   # N / mm^1.5
    k_cell_mm: float = 4.0
    band_depth_mm: float = 0.40
    band_sigma_mm: float = 0.10
    # tool interaction
    indent_sigma_mm: float = 1.1
    friction_mu: float = 0.2
    shadow_strength: float = 0.55
    shadow_radius_mm: float = 0.8
    shadow_slope: float = 0.35
    shadow_ramp_mm: float = 0.25
    # speckle
    noise_level: float = 0.05

    def __post_init__(self):
        if len(self.grid) != 3 or any(g < 4 for g in self.grid):
            raise ConfigError(f"phantom.grid: need three extents >= 4, got {self.grid}")
        if not 0.0 <= self.noise_level <= 0.10:
            raise ConfigError(
                f"phantom.noise_level: {self.noise_level} outside [0, 0.1] "
                "(larger speckle would defeat the surface-brightness cap)")
        if any(k <= 0 for k in self.k_values) or len(self.k_values) == 0:
            raise ConfigError(f"phantom.k_values: need positive stiffness values, got {self.k_values}")
        if self.base_depth_mm + self.relief_amp_mm + POSE_BOUNDS["depth_mm"][1] >= self.axial_fov_mm:
            raise ConfigError("phantom.base_depth_mm: deepest indentation would leave the FOV")

    @property
    def spacing_mm(self) -> tuple[float, float, float]:
        return (self.lateral_fov_mm / self.grid[0], self.lateral_fov_mm / self.grid[1],
                self.axial_fov_mm / self.grid[2])

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid), "lateral_fov_mm": self.lateral_fov_mm,
            "axial_fov_mm": self.axial_fov_mm, "seed": self.seed,
            "base_depth_mm": self.base_depth_mm, "relief_amp_mm": self.relief_amp_mm,
            "relief_waves": self.relief_waves, "k_values": list(self.k_values),
            "k_cell_mm": self.k_cell_mm, "band_depth_mm": self.band_depth_mm,
            "band_sigma_mm": self.band_sigma_mm, "indent_sigma_mm": self.indent_sigma_mm,
            "friction_mu": self.friction_mu, "shadow_strength": self.shadow_strength,
            "shadow_radius_mm": self.shadow_radius_mm, "shadow_slope": self.shadow_slope,
            "shadow_ramp_mm": self.shadow_ramp_mm, "noise_level": self.noise_level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        kw = dict(d)
        kw["grid"] = tuple(int(g) for g in kw.get("grid", (64, 64, 64)))
        if "k_values" in kw:
            kw["k_values"] = tuple(float(k) for k in kw["k_values"])
        return cls(**kw)

    # -- procedural fields ---------------------------------------------------

    def relief_params(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Sinusoid components of the undeformed surface height field."""
        rng = np.random.default_rng([self.seed, 101])
        n = self.relief_waves
        amp = self.relief_amp_mm / n * rng.uniform(0.5, 1.0, n)
        freq_u = rng.uniform(0.05, 0.22, n)
        freq_v = rng.uniform(0.05, 0.22, n)
        phase = rng.uniform(0.0, 2.0 * np.pi, n)
        return amp, freq_u, freq_v, phase

    def surface_height(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Undeformed surface depth h0 (mm below the top of the FOV)."""
        amp, fu, fv, ph = self.relief_params()
        h = np.full(np.broadcast_shapes(u.shape, v.shape), self.base_depth_mm, np.float64)
        for a, cu, cv, p in zip(amp, fu, fv, ph):
            h = h + a * np.sin(2.0 * np.pi * (cu * u + cv * v) + p)
        return h

    def stiffness_at(self, u: float, v: float) -> float:
        """Checkerboard stiffness (N/mm^1.5) at a global lateral position."""
        cell = int(np.floor(u / self.k_cell_mm) + np.floor(v / self.k_cell_mm))
        return float(self.k_values[cell % len(self.k_values)])

    def stiffness_field(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        cells = (np.floor(u / self.k_cell_mm) + np.floor(v / self.k_cell_mm)).astype(np.int64)
        values = np.asarray(self.k_values, dtype=np.float64)
        return values[np.mod(cells, len(values))]


def force_oracle(pose: ToolPose, k_local: float, mu: float = FRICTION_MU) -> ForceVector:
    """Hertz-like contact force: k * d^1.5 along the tool axis plus friction.

    The tangential term is mu-scaled along the lateral tilt direction;
    with no tilt it vanishes, leaving a pure axial force.
    """
    a = pose.axis()
    f_n = k_local * pose.depth_mm ** 1.5
    lat = math.hypot(a[0], a[1])
    force = f_n * a
    if lat > 0.0:
        force[0] += mu * f_n * a[0] / lat
        force[1] += mu * f_n * a[1] / lat
    return ForceVector.from_array(force)


def contact_center(pose: ToolPose, roi_offset_mm: tuple[float, float]) -> tuple[float, float]:
    """Global lateral position where the tilted tool meets the surface."""
    a = pose.axis()
    return (roi_offset_mm[0] + 0.5 * pose.depth_mm * a[0] / a[2],
            roi_offset_mm[1] + 0.5 * pose.depth_mm * a[1] / a[2])


@dataclass(frozen=True)
class AcquisitionPlan:
    """Protocol shape: L deformations per ROI across M ROI relocations."""

    deformations_per_roi: int = 50     # L
    roi_relocations: int = 20          # M
    seed: int = 0
    move_range_mm: float = 2.0
    pose_ranges: dict = field(default_factory=lambda: {k: list(v) for k, v in POSE_BOUNDS.items()})

    def __post_init__(self):
        if self.deformations_per_roi < 0 or self.roi_relocations < 0:
            raise ConfigError("plan: L and M must be non-negative")
        for name, rng in self.pose_ranges.items():
            if name not in POSE_BOUNDS:
                raise ConfigError(f"plan.pose_ranges.{name}: unknown pose field")
            lo, hi = POSE_BOUNDS[name]
            if not (lo <= rng[0] <= rng[1] <= hi):
                raise ConfigError(
                    f"plan.pose_ranges.{name}: [{rng[0]}, {rng[1]}] outside [{lo}, {hi}]")

    @property
    def total_pairs(self) -> int:
        return self.deformations_per_roi * self.roi_relocations

    def to_dict(self) -> dict:
        return {"deformations_per_roi": self.deformations_per_roi,
                "roi_relocations": self.roi_relocations, "seed": self.seed,
                "move_range_mm": self.move_range_mm,
                "pose_ranges": {k: list(v) for k, v in self.pose_ranges.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionPlan":
        kw = dict(d)
        if "pose_ranges" in kw:
            kw["pose_ranges"] = {k: list(v) for k, v in kw["pose_ranges"].items()}
        return cls(**kw)


@dataclass
class SamplePair:
    """One training example: shared reference, deformed sample, oracle label."""

    reference: Volume
    sample: Volume
    label: ForceVector
    pose: ToolPose
    roi: int
    roi_offset_mm: tuple[float, float]


@dataclass
class PairDataset:
    """All pairs produced by one protocol run."""

    phantom: PhantomSpec
    plan: AcquisitionPlan
    pairs: list[SamplePair]

    def __len__(self) -> int:
        return len(self.pairs)

    def labels(self) -> np.ndarray:
        return np.stack([p.label.as_array() for p in self.pairs]) if self.pairs else \
            np.zeros((0, 3), np.float64)

    def rois(self) -> list[int]:
        return [p.roi for p in self.pairs]


def _compute_surfaces(spec: PhantomSpec, roi_offset, pose: Optional[ToolPose]):
    """Deformed surface h, undeformed h0, and contact tip depth (all mm)."""
    w_ext, h_ext, _ = spec.grid
    sx, sy, _ = spec.spacing_mm
    xl = (np.arange(w_ext) + 0.5) * sx - spec.lateral_fov_mm / 2.0
    yl = (np.arange(h_ext) + 0.5) * sy - spec.lateral_fov_mm / 2.0
    ug = xl[:, None] + roi_offset[0]
    vg = yl[None, :] + roi_offset[1]
    h0 = spec.surface_height(ug, vg)

    if pose is None:
        return h0, h0, None

    a = pose.axis()
    az = a[2]
    lat = math.hypot(a[0], a[1])
    # indentation bump: tilted tools shift the footprint and stretch it
    # along the lateral tilt azimuth
    cx, cy = contact_center(pose, tuple(roi_offset))
    if lat > 1e-12:
        ca, sa = a[0] / lat, a[1] / lat
    else:
        ca, sa = 1.0, 0.0
    du = ug - cx
    dv = vg - cy
    along = ca * du + sa * dv
    across = -sa * du + ca * dv
    sig_along = spec.indent_sigma_mm * (1.0 + 1.5 * lat / az)
    sig_across = spec.indent_sigma_mm
    bump = pose.depth_mm * np.exp(-0.5 * ((along / sig_along) ** 2 + (across / sig_across) ** 2))
    h = h0 + bump
    tip_depth = float(spec.surface_height(np.asarray([[cx]]), np.asarray([[cy]]))[0, 0]
                      + pose.depth_mm)
    return h, h0, (cx, cy, tip_depth)


def render_volume(spec: PhantomSpec, roi_offset_mm: tuple[float, float] = (0.0, 0.0),
                  pose: Optional[ToolPose] = None,
                  rng: Optional[np.random.Generator] = None) -> Volume:
    """Render one volume; ``pose=None`` gives the undeformed reference.

    Deterministic for fixed (spec, roi_offset, pose, rng stream); callers
    that omit ``rng`` get a stream derived from the phantom seed.
    """
    if rng is None:
        rng = np.random.default_rng([spec.seed, 0])
    w_ext, h_ext, d_ext = spec.grid
    _, _, sz = spec.spacing_mm
    bottom = spec.axial_fov_mm

    h, h0, tip = _compute_surfaces(spec, roi_offset_mm, pose)
    zc = (np.arange(d_ext) + 0.5) * sz                      # voxel-center depths
    z = zc[None, None, :]
    hh = h[:, :, None]

    # brightness-preserving axial remap: material below the indented
    # surface is compressed into [h, bottom]
    stretch = (bottom - h0[:, :, None]) / (bottom - hh)
    w_mat = (z - hh) * stretch

    sx_, sy_, _ = spec.spacing_mm
    xl = (np.arange(w_ext) + 0.5) * sx_ - spec.lateral_fov_mm / 2.0
    yl = (np.arange(h_ext) + 0.5) * sy_ - spec.lateral_fov_mm / 2.0
    kmap = spec.stiffness_field(xl[:, None] + roi_offset_mm[0],
                                yl[None, :] + roi_offset_mm[1])
    kmax = max(spec.k_values)
    band_gain = (0.25 + 0.25 * kmap / kmax)[:, :, None]

    surf = SURFACE_PEAK * np.exp(-0.5 * ((z - hh) / SURFACE_SIGMA_MM) ** 2)
    body = BODY_GAIN * np.exp(-np.maximum(w_mat, 0.0) / BODY_TAU_MM)
    wdist = w_mat - spec.band_depth_mm
    band = band_gain * np.exp(-0.5 * (wdist / spec.band_sigma_mm) ** 2)
    band[np.abs(wdist) > BAND_SUPPORT_SIGMAS * spec.band_sigma_mm] = 0.0

    inside = z >= hh
    vol = np.where(inside,
                   np.minimum(surf + body + band, MATERIAL_CAP),
                   np.minimum(AIR_LEVEL + surf, MATERIAL_CAP))

    # the interface voxel outshines every material voxel by construction
    iz = np.clip(np.rint(h / sz - 0.5).astype(np.int64), 0, d_ext - 1)
    np.put_along_axis(vol, iz[:, :, None], INTERFACE_VALUE, axis=2)

    if tip is not None:
        cx, cy, tip_depth = tip
        du = (xl[:, None] + roi_offset_mm[0]) - cx
        dv = (yl[None, :] + roi_offset_mm[1]) - cy
        rho2 = (du * du + dv * dv)[:, :, None]
        radius = spec.shadow_radius_mm + spec.shadow_slope * np.maximum(z - tip_depth, 0.0)
        ramp = np.clip((z - tip_depth + spec.shadow_ramp_mm) / spec.shadow_ramp_mm, 0.0, 1.0)
        vol = vol * (1.0 - spec.shadow_strength * ramp * np.exp(-0.5 * rho2 / radius ** 2))

    if spec.noise_level > 0.0:
        vol = vol * (1.0 + spec.noise_level * math.sqrt(3.0)
                     * rng.uniform(-1.0, 1.0, size=vol.shape))

    return Volume(np.clip(vol, 0.0, 1.0).astype(np.float32), spec.spacing_mm)


def _roi_offset(plan: AcquisitionPlan, m: int) -> tuple[float, float]:
    """Cumulative lateral walk of the support stage after m relocations."""
    u = v = 0.0
    for i in range(1, m + 1):
        rng = np.random.default_rng([plan.seed, 4000 + i])
        du, dv = rng.uniform(-plan.move_range_mm, plan.move_range_mm, 2)
        u += du
        v += dv
    return u, v


def draw_pose(plan: AcquisitionPlan, rng: np.random.Generator) -> ToolPose:
    r = plan.pose_ranges
    return ToolPose(
        theta_x_deg=rng.uniform(*r["theta_x_deg"]),
        theta_y_deg=rng.uniform(*r["theta_y_deg"]),
        theta_z_deg=rng.uniform(*r["theta_z_deg"]),
        depth_mm=rng.uniform(*r["depth_mm"]),
    )


def run_protocol(spec: PhantomSpec, plan: AcquisitionPlan) -> PairDataset:
    """Replay the acquisition protocol: one reference per ROI, L poses each.

    Every pair's randomness comes from its own (seed, roi, pose-index)
    stream, so generation order cannot change the result.
    """
    pairs: list[SamplePair] = []
    for m in range(plan.roi_relocations):
        offset = _roi_offset(plan, m)
        reference = render_volume(spec, offset, None,
                                  rng=np.random.default_rng([plan.seed, m, 0]))
        for el in range(plan.deformations_per_roi):
            rng = np.random.default_rng([plan.seed, m, el + 1])
            pose = draw_pose(plan, rng)
            sample = render_volume(spec, offset, pose, rng=rng)
            k_local = spec.stiffness_at(*contact_center(pose, offset))
            label = force_oracle(pose, k_local, mu=spec.friction_mu)
            pairs.append(SamplePair(reference, sample, label, pose, m, offset))
    return PairDataset(spec, plan, pairs)
