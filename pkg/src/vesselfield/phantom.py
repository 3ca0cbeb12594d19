"""Synthetic vessel-tree phantoms.

A root vessel crosses the volume along a smooth Catmull-Rom centreline.
Further vessels branch off points of existing ones at a random angle to the
parent tangent, each level thinner by ``radius_taper``. Tubes are rasterised
by distance to the centreline with flat free ends, and the centreline is
kept far enough inside the grid that nothing touches the boundary faces.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import VolumeGrid

__all__ = ["PhantomSpec", "PhantomError", "generate_phantom", "catmull_rom"]


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_branches: int = 3
    radius_root_mm: float = 2.0
    radius_taper: float = 0.8
    branch_angle_range_deg: tuple[float, float] = (30.0, 70.0)
    n_control_points: int = 5
    bend_fraction: float = 0.12  # lateral control-point jitter relative to vessel length

    def __post_init__(self):
        if self.n_branches < 1:
            raise PhantomError(f"n_branches must be >= 1, got {self.n_branches}")
        if not self.radius_root_mm > 0:
            raise PhantomError(f"radius_root_mm must be positive, got {self.radius_root_mm}")
        if not 0 < self.radius_taper <= 1:
            raise PhantomError(f"radius_taper must lie in (0, 1], got {self.radius_taper}")
        if self.n_control_points < 2:
            raise PhantomError("need at least two control points")
        lo, hi = self.branch_angle_range_deg
        if not 0 <= lo <= hi <= 180:
            raise PhantomError(f"bad branch angle range {self.branch_angle_range_deg}")


def catmull_rom(points: np.ndarray, samples_per_segment: int = 16) -> np.ndarray:
    """Dense points on the centripetal-free (uniform) Catmull-Rom spline through ``points``."""
    p = np.asarray(points, dtype=np.float64)
    if len(p) == 2:
        t = np.linspace(0.0, 1.0, samples_per_segment + 1)[:, None]
        return p[0] + t * (p[1] - p[0])
    ext = np.vstack([2 * p[0] - p[1], p, 2 * p[-1] - p[-2]])
    t = np.linspace(0.0, 1.0, samples_per_segment, endpoint=False)[:, None]
    t2, t3 = t * t, t * t * t
    out = []
    for i in range(1, len(ext) - 2):
        p0, p1, p2, p3 = ext[i - 1], ext[i], ext[i + 1], ext[i + 2]
        out.append(0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2
                          + (-p0 + 3 * p1 - 3 * p2 + p3) * t3))
    out.append(p[-1][None, :])
    return np.vstack(out)


def _unit(v):
    return v / np.linalg.norm(v)


def _perpendicular_basis(d):
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = _unit(np.cross(d, a))
    return e1, np.cross(d, e1)


def _centreline(rng, start, direction, length, spec, lo, hi):
    n = spec.n_control_points
    e1, e2 = _perpendicular_basis(direction)
    ts = np.linspace(0.0, length, n)
    ctrl = start[None, :] + ts[:, None] * direction[None, :]
    if n > 2:
        jitter = rng.normal(0.0, spec.bend_fraction * length, size=(n, 2))
        jitter[0] = 0.0
        ctrl = ctrl + jitter[:, :1] * e1 + jitter[:, 1:] * e2
    ctrl = np.clip(ctrl, lo, hi)
    return np.clip(catmull_rom(ctrl), lo, hi)


def _rasterize(mask, coords, line, radius):
    """Set voxels within ``radius`` of the polyline, with flat caps at both free ends."""
    a, b = line[:-1], line[1:]
    ab = b - a
    ab2 = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-18)
    lo = line.min(axis=0) - radius
    hi = line.max(axis=0) + radius
    sel = np.nonzero(np.all((coords >= lo) & (coords <= hi), axis=1))[0]
    if sel.size == 0:
        return
    pts = coords[sel]
    best = np.full(sel.size, np.inf)
    for i in range(len(a)):
        t = (pts - a[i]) @ ab[i] / ab2[i]
        if i == 0:
            beyond = t < 0
        else:
            beyond = np.zeros(t.shape, bool)
        if i == len(a) - 1:
            beyond |= t > 1
        tc = np.clip(t, 0.0, 1.0)
        d = pts - (a[i] + tc[:, None] * ab[i])
        d2 = np.einsum("ij,ij->i", d, d)
        d2[beyond] = np.inf
        best = np.minimum(best, d2)
    mask.ravel()[sel[best <= radius * radius]] = True


def generate_phantom(spec: PhantomSpec, grid: VolumeGrid) -> VolumeGrid:
    """Rasterise a random branching tube tree into a binary volume on ``grid``."""
    rng = np.random.default_rng(spec.seed)
    radii = [spec.radius_root_mm * spec.radius_taper ** k for k in range(spec.n_branches)]
    if min(radii) < float(grid.spacing.max()):
        raise PhantomError(
            f"vessel radius {min(radii):.3g} mm is below the voxel spacing {grid.spacing.max():.3g} mm"
        )
    h = grid.half_extent
    coords = grid.voxel_centers()
    mask = np.zeros(grid.shape, dtype=bool)

    size = 2 * h
    # root: enters near one face and runs across the volume
    margin0 = radii[0] + 1.5 * grid.spacing
    lo0, hi0 = -h + margin0, h - margin0
    if np.any(lo0 >= hi0):
        raise PhantomError("grid too small for the requested vessel radius")
    axis = rng.integers(3)
    start = rng.uniform(0.6 * lo0, 0.6 * hi0)
    start[axis] = lo0[axis]
    direction = rng.normal(size=3) * 0.35
    direction[axis] = 1.0
    direction = _unit(direction)
    length = 0.9 * float(size[axis]) / abs(direction[axis])
    vessels = [(_centreline(rng, start, direction, length, spec, lo0, hi0), 0)]
    _rasterize(mask, coords, vessels[0][0], radii[0])

    amin, amax = np.radians(spec.branch_angle_range_deg)
    for _ in range(1, spec.n_branches):
        parent_idx = int(rng.integers(len(vessels)))
        line, level = vessels[parent_idx]
        level += 1
        r = radii[min(level, len(radii) - 1)]
        margin = r + 1.5 * grid.spacing
        lo, hi = -h + margin, h - margin
        k = int(rng.integers(int(0.25 * len(line)), max(int(0.75 * len(line)), int(0.25 * len(line)) + 1)))
        k = min(k, len(line) - 2)
        tangent = _unit(line[k + 1] - line[k])
        e1, e2 = _perpendicular_basis(tangent)
        ang = rng.uniform(amin, amax)
        phi = rng.uniform(0, 2 * np.pi)
        d = _unit(np.cos(ang) * tangent + np.sin(ang) * (np.cos(phi) * e1 + np.sin(phi) * e2))
        blen = 0.55 * float(size.min())
        child = _centreline(rng, line[k], d, blen, spec, lo, hi)
        vessels.append((child, level))
        _rasterize(mask, coords, child, r)

    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    if n > 1:
        sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
    return grid.like(mask.astype(np.uint8))
