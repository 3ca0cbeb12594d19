"""Voxel grids, coordinate normalisation and C-arm pose construction.

Conventions
-----------
* Volumes are stored as numpy arrays of shape ``(nz, ny, nx)`` in C order, so
  the flat layout is x-fastest.
* Voxel indices handed to :func:`normalize_coords` are 1-based ``(x, y, z)``
  triples. Everything else in the package indexes 0-based.
* The C-arm frame: at zero angles the source sits on ``-y`` and the detector
  on ``+y``, detector u-axis is ``+x`` and v-axis is ``+z``. The primary angle
  rotates the source/detector assembly about ``+z``; the secondary angle then
  rotates it about the rotated ``+x`` axis.
* Projection images have shape ``(det_v, det_u)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "VolumeGrid",
    "ProjectionGeometry",
    "Pose",
    "GeometryError",
    "normalize_coords",
    "normalize_indices",
    "build_pose",
    "ray_through_pixel",
    "pixel_centers",
    "clinical_range_warnings",
    "geometry_from_dict",
    "geometry_to_dict",
]


class GeometryError(ValueError):
    """Raised for invalid grids, geometries or out-of-range indices."""


@dataclass
class VolumeGrid:
    """A regular voxel grid with physical spacing and a scalar payload.

    ``data`` has shape ``(nz, ny, nx)``. When omitted a zero volume is created.
    """

    nx: int
    ny: int
    nz: int
    sx: float = 1.0
    sy: float = 1.0
    sz: float = 1.0
    data: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise GeometryError(f"{name} must be a positive integer, got {v!r}")
            setattr(self, name, int(v))
        for name in ("sx", "sy", "sz"):
            v = float(getattr(self, name))
            if not (v > 0 and math.isfinite(v)):
                raise GeometryError(f"{name} must be a positive finite spacing, got {v!r}")
            setattr(self, name, v)
        if self.data is None:
            self.data = np.zeros(self.shape, dtype=np.float32)
        else:
            data = np.asarray(self.data)
            if data.size != self.nx * self.ny * self.nz:
                raise GeometryError(
                    f"data has {data.size} elements, expected {self.nx * self.ny * self.nz}"
                )
            self.data = data.reshape(self.shape)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def counts(self) -> np.ndarray:
        return np.array([self.nx, self.ny, self.nz])

    @property
    def spacing(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.sz], dtype=np.float64)

    @property
    def half_extent(self) -> np.ndarray:
        """Largest normalised voxel-centre coordinate per axis, ``(n*s - s) / 2``."""
        return (self.counts * self.spacing - self.spacing) / 2.0

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical bounding box (voxel faces, not centres)."""
        h = self.counts * self.spacing / 2.0
        return -h, h

    @property
    def voxel_volume(self) -> float:
        return self.sx * self.sy * self.sz

    def like(self, data: np.ndarray) -> "VolumeGrid":
        """Same grid, new payload."""
        return VolumeGrid(self.nx, self.ny, self.nz, self.sx, self.sy, self.sz, data=data)

    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0) | (self.data == 1)))

    def voxel_indices(self) -> np.ndarray:
        """All 1-based ``(x, y, z)`` index triples in x-fastest order, shape (N, 3)."""
        z, y, x = np.meshgrid(
            np.arange(1, self.nz + 1),
            np.arange(1, self.ny + 1),
            np.arange(1, self.nx + 1),
            indexing="ij",
        )
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    def voxel_centers(self) -> np.ndarray:
        """Normalised physical coordinates of every voxel, x-fastest, shape (N, 3)."""
        return normalize_indices(self.voxel_indices(), self)


def normalize_indices(idx: np.ndarray, grid: VolumeGrid) -> np.ndarray:
    """Vectorised :func:`normalize_coords` for an ``(N, 3)`` array of 1-based indices."""
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[1] != 3:
        raise GeometryError(f"expected (N, 3) index array, got shape {idx.shape}")
    if np.any(idx < 1) or np.any(idx > grid.counts):
        raise GeometryError("voxel index out of range")
    return -grid.half_extent + (idx - 1) * grid.spacing


def normalize_coords(idx: Sequence[int], grid: VolumeGrid) -> np.ndarray:
    """Map a 1-based voxel index ``(x, y, z)`` to origin-centred millimetres.

    ``x' = -n'_x + (x - 1) * s_x`` with ``n'_x = (n_x * s_x - s_x) / 2``, and
    likewise for y and z.
    """
    idx = np.asarray(idx)
    if idx.shape != (3,):
        raise GeometryError(f"expected an index triple, got {idx!r}")
    if np.any(idx != np.round(idx)):
        raise GeometryError(f"voxel indices must be integers, got {idx!r}")
    return normalize_indices(idx[None, :].astype(np.int64), grid)[0]


@dataclass(frozen=True)
class ProjectionGeometry:
    """Cone-beam parameters of a single view. Distances in mm, angles in degrees."""

    dsd: float
    dso: float
    primary_angle: float = 0.0
    secondary_angle: float = 0.0
    det_u: int = 512
    det_v: int = 512
    du: float = 0.2769
    dv: float = 0.2769

    def __post_init__(self):
        if not (self.dso > 0):
            raise GeometryError(f"dso must be positive, got {self.dso}")
        if not (self.dsd > self.dso):
            raise GeometryError(
                f"dsd ({self.dsd}) must exceed dso ({self.dso}): the detector sits behind the origin"
            )
        if int(self.det_u) != self.det_u or int(self.det_v) != self.det_v:
            raise GeometryError("detector pixel counts must be integers")
        if self.det_u < 1 or self.det_v < 1:
            raise GeometryError(f"detector must have at least one pixel, got {self.det_u}x{self.det_v}")
        if not (self.du > 0 and self.dv > 0):
            raise GeometryError(f"detector spacing must be positive, got ({self.du}, {self.dv})")
        if not (math.isfinite(self.primary_angle) and math.isfinite(self.secondary_angle)):
            raise GeometryError("angles must be finite")


@dataclass(frozen=True)
class Pose:
    """Source position, detector centre and detector axes in world mm."""

    source_pos: np.ndarray
    det_center: np.ndarray
    det_u_axis: np.ndarray
    det_v_axis: np.ndarray


def _rotation(primary_deg: float, secondary_deg: float) -> np.ndarray:
    p = math.radians(primary_deg)
    s = math.radians(secondary_deg)
    rz = np.array([[math.cos(p), -math.sin(p), 0.0], [math.sin(p), math.cos(p), 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(s), -math.sin(s)], [0.0, math.sin(s), math.cos(s)]])
    # intrinsic: about z first, then about the rotated x
    return rz @ rx


def build_pose(g: ProjectionGeometry) -> Pose:
    r = _rotation(g.primary_angle, g.secondary_angle)
    return Pose(
        source_pos=r @ np.array([0.0, -g.dso, 0.0]),
        det_center=r @ np.array([0.0, g.dsd - g.dso, 0.0]),
        det_u_axis=r @ np.array([1.0, 0.0, 0.0]),
        det_v_axis=r @ np.array([0.0, 0.0, 1.0]),
    )


def pixel_centers(pose: Pose, g: ProjectionGeometry) -> np.ndarray:
    """World positions of all detector pixel centres, shape ``(det_v, det_u, 3)``."""
    uu = (np.arange(g.det_u) - (g.det_u - 1) / 2.0) * g.du
    vv = (np.arange(g.det_v) - (g.det_v - 1) / 2.0) * g.dv
    return (
        pose.det_center[None, None, :]
        + uu[None, :, None] * pose.det_u_axis[None, None, :]
        + vv[:, None, None] * pose.det_v_axis[None, None, :]
    )


def ray_through_pixel(pose: Pose, g: ProjectionGeometry, u: int, v: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(origin, unit_direction)`` of the ray from the source to pixel ``(u, v)``."""
    if not (0 <= u < g.det_u and 0 <= v < g.det_v):
        raise GeometryError(f"pixel ({u}, {v}) outside {g.det_u}x{g.det_v} detector")
    center = (
        pose.det_center
        + (u - (g.det_u - 1) / 2.0) * g.du * pose.det_u_axis
        + (v - (g.det_v - 1) / 2.0) * g.dv * pose.det_v_axis
    )
    d = center - pose.source_pos
    return pose.source_pos.copy(), d / np.linalg.norm(d)


# Table 1 clinical ranges, (primary, secondary) per view.
_CLINICAL_ANGLES = {
    "RCA": [((18.0, 42.0), (-8.0, 8.0)), ((-8.0, 8.0), (18.0, 42.0))],
    "LAD": [((-8.0, 8.0), (18.0, 42.0)), ((-47.0, -23.0), (21.0, 45.0))],
}


def clinical_range_warnings(geoms: Sequence[ProjectionGeometry], anatomy: str = "RCA") -> list[str]:
    """Compare a two-view setup against the clinical angle ranges; emit warnings, never fail."""
    msgs = []
    ranges = _CLINICAL_ANGLES[anatomy]
    for i, (g, (pr, sr)) in enumerate(zip(geoms, ranges)):
        if not pr[0] <= g.primary_angle <= pr[1]:
            msgs.append(f"view {i}: primary angle {g.primary_angle} outside clinical {anatomy} range {pr}")
        if not sr[0] <= g.secondary_angle <= sr[1]:
            msgs.append(f"view {i}: secondary angle {g.secondary_angle} outside clinical {anatomy} range {sr}")
    for m in msgs:
        warnings.warn(m, stacklevel=2)
    return msgs


_VIEW_KEYS = {"dsd_mm", "dso_mm", "primary_deg", "secondary_deg", "det_pixels", "det_spacing_mm"}


def geometry_from_dict(d: dict) -> ProjectionGeometry:
    """Build a view from its JSON object (keys ``dsd_mm``, ``dso_mm``, ...)."""
    unknown = set(d) - _VIEW_KEYS
    if unknown:
        raise GeometryError(f"unknown view keys: {sorted(unknown)}")
    missing = {"dsd_mm", "dso_mm", "det_pixels", "det_spacing_mm"} - set(d)
    if missing:
        raise GeometryError(f"missing view keys: {sorted(missing)}")
    du, dv = d["det_spacing_mm"]
    nu, nv = d["det_pixels"]
    return ProjectionGeometry(
        dsd=float(d["dsd_mm"]),
        dso=float(d["dso_mm"]),
        primary_angle=float(d.get("primary_deg", 0.0)),
        secondary_angle=float(d.get("secondary_deg", 0.0)),
        det_u=int(nu),
        det_v=int(nv),
        du=float(du),
        dv=float(dv),
    )


def geometry_to_dict(g: ProjectionGeometry) -> dict:
    return {
        "dsd_mm": g.dsd,
        "dso_mm": g.dso,
        "primary_deg": g.primary_angle,
        "secondary_deg": g.secondary_angle,
        "det_pixels": [g.det_u, g.det_v],
        "det_spacing_mm": [g.du, g.dv],
    }
