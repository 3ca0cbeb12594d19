"""Cone-beam line-integral projector and its matched backprojector.

Rays are marched from the volume entry point to the exit point (slab test
against the voxel-face bounding box) with a fixed number of evenly spaced
midpoint samples; each sample reads the volume by trilinear interpolation
with zero padding outside the grid. The backprojector scatters through the
exact same samples and weights, so the pair is adjoint to rounding error.

Two execution paths share the sampler:

* :func:`forward_project` / :func:`backproject` stream rays in chunks and
  never materialise the operator;
* :class:`ProjectionOperator` assembles the sampled weights once into sparse
  matrices, which is what the training loop uses since the geometry is fixed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import GeometryError, ProjectionGeometry, VolumeGrid, build_pose, pixel_centers

__all__ = [
    "ProjectorConfig",
    "ProjectionImage",
    "ProjectionOperator",
    "forward_project",
    "backproject",
    "ray_box_intersection",
]


@dataclass(frozen=True)
class ProjectorConfig:
    """``step_mm=None`` means half the smallest voxel spacing."""

    step_mm: float | None = None
    chunk_rays: int = 2048

    def step_for(self, grid: VolumeGrid) -> float:
        step = self.step_mm if self.step_mm is not None else 0.5 * float(grid.spacing.min())
        if not step > 0:
            raise ValueError(f"step_mm must be positive, got {step}")
        return step


@dataclass
class ProjectionImage:
    view_id: int
    data: np.ndarray  # (det_v, det_u)
    geometry: ProjectionGeometry

    def __post_init__(self):
        g = self.geometry
        self.data = np.asarray(self.data)
        if self.data.shape != (g.det_v, g.det_u):
            raise GeometryError(
                f"projection shape {self.data.shape} does not match detector ({g.det_v}, {g.det_u})"
            )


def ray_box_intersection(origins, dirs, lo, hi):
    """Slab test. Returns ``(t_near, t_far)``; a miss gives ``t_far <= t_near``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    near = np.minimum(t0, t1)
    far = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    par = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    near = np.where(par, np.where(inside, -np.inf, np.inf), near)
    far = np.where(par, np.where(inside, np.inf, -np.inf), far)
    tmin = near.max(axis=1)
    tmax = far.min(axis=1)
    return np.maximum(tmin, 0.0), tmax


def _view_rays(g: ProjectionGeometry):
    pose = build_pose(g)
    centers = pixel_centers(pose, g).reshape(-1, 3)
    d = centers - pose.source_pos
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return pose.source_pos, d


def _ray_samples(grid: VolumeGrid, g: ProjectionGeometry, step: float, chunk: int
                 ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(pixel_index, flat_voxel_index, weight)`` triplets chunk by chunk.

    ``weight`` already includes the sample length, so a pixel value is
    ``sum(weight * vol.flat[voxel])`` over its triplets.
    """
    src, dirs = _view_rays(g)
    lo, hi = grid.box
    t_in, t_out = ray_box_intersection(src[None, :], dirs, lo, hi)
    length = np.clip(t_out - t_in, 0.0, None)
    nsamp = np.ceil(length / step).astype(np.int64)
    nsamp[length <= 0] = 0
    counts = grid.counts
    spacing = grid.spacing
    offset = grid.half_extent
    strides = np.array([1, grid.nx, grid.nx * grid.ny], dtype=np.int64)
    corners = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.int64)
    offs = corners @ strides

    hit = np.nonzero(nsamp > 0)[0]
    for start in range(0, hit.size, chunk):
        rays = hit[start:start + chunk]
        ns = nsamp[rays]
        kmax = int(ns.max())
        k = np.arange(kmax)
        valid = k[None, :] < ns[:, None]
        ray_id = np.broadcast_to(rays[:, None], valid.shape)[valid]
        dt = (length[rays] / ns)[:, None]
        t = (t_in[rays][:, None] + (k[None, :] + 0.5) * dt)[valid]
        dt = np.broadcast_to(dt, valid.shape)[valid]
        pos = src[None, :] + t[:, None] * dirs[ray_id]
        fidx = (pos + offset) / spacing  # continuous 0-based index, centres on integers
        base = np.floor(fidx).astype(np.int64)
        frac = fidx - base
        # per axis: weight and in-range flag of the lower (0) and upper (1) neighbour
        axw = [(1.0 - frac[:, a], frac[:, a]) for a in range(3)]
        axok = [((base[:, a] >= 0) & (base[:, a] < counts[a]),
                 (base[:, a] >= -1) & (base[:, a] < counts[a] - 1)) for a in range(3)]
        lin = base[:, 0] + base[:, 1] * strides[1] + base[:, 2] * strides[2]
        n = lin.size
        w = np.empty((n, 8))
        ok = np.empty((n, 8), dtype=bool)
        for c, (cx, cy, cz) in enumerate(corners):
            np.multiply(axw[0][cx] * axw[1][cy], axw[2][cz] * dt, out=w[:, c])
            np.logical_and(axok[0][cx] & axok[1][cy], axok[2][cz], out=ok[:, c])
        ok &= w != 0
        vox = lin[:, None] + offs[None, :]
        # rows stay in ray order so pixel indices come out sorted
        yield np.repeat(ray_id, ok.sum(axis=1)), vox[ok], w[ok]


def forward_project(vol: VolumeGrid, geoms: Sequence[ProjectionGeometry],
                    cfg: ProjectorConfig = ProjectorConfig()) -> list[ProjectionImage]:
    """Line integrals of ``vol`` along every source-to-pixel ray of every view."""
    step = cfg.step_for(vol)
    flat = np.asarray(vol.data, dtype=np.float64).ravel()
    out = []
    for vid, g in enumerate(geoms):
        acc = np.zeros(g.det_u * g.det_v)
        for pix, vox, w in _ray_samples(vol, g, step, cfg.chunk_rays):
            acc += np.bincount(pix, weights=w * flat[vox], minlength=acc.size)
        out.append(ProjectionImage(vid, acc.reshape(g.det_v, g.det_u).astype(np.float32), g))
    return out


def backproject(imgs: Sequence[ProjectionImage | np.ndarray], grid: VolumeGrid,
                geoms: Sequence[ProjectionGeometry],
                cfg: ProjectorConfig = ProjectorConfig(), dtype=np.float32) -> VolumeGrid:
    """Adjoint of :func:`forward_project` for the same grid, geometries and config."""
    if len(imgs) != len(geoms):
        raise GeometryError(f"{len(imgs)} images for {len(geoms)} geometries")
    step = cfg.step_for(grid)
    acc = np.zeros(grid.nx * grid.ny * grid.nz)
    for img, g in zip(imgs, geoms):
        arr = np.asarray(img.data if isinstance(img, ProjectionImage) else img, dtype=np.float64)
        if arr.shape != (g.det_v, g.det_u):
            raise GeometryError(f"image shape {arr.shape} does not match detector ({g.det_v}, {g.det_u})")
        flat = arr.ravel()
        for pix, vox, w in _ray_samples(grid, g, step, cfg.chunk_rays):
            acc += np.bincount(vox, weights=w * flat[pix], minlength=acc.size)
    return grid.like(acc.reshape(grid.shape).astype(dtype))


class ProjectionOperator:
    """Sparse-matrix form of the projector for a fixed grid and set of views.

    ``forward`` maps a flat (x-fastest) volume to a list of ``(det_v, det_u)``
    images, one per view; ``adjoint`` is the exact transpose.
    """

    def __init__(self, grid: VolumeGrid, geoms: Sequence[ProjectionGeometry],
                 cfg: ProjectorConfig = ProjectorConfig()):
        self.grid = grid
        self.geoms = list(geoms)
        self.cfg = cfg
        step = cfg.step_for(grid)
        nvox = grid.nx * grid.ny * grid.nz
        self.matrices = []
        for g in self.geoms:
            parts = list(_ray_samples(grid, g, step, cfg.chunk_rays))
            if parts:
                pix, vox, w = (np.concatenate(p) for p in zip(*parts))
            else:
                pix = vox = np.zeros(0, dtype=np.int64)
                w = np.zeros(0)
            npix = g.det_u * g.det_v
            indptr = np.concatenate([[0], np.cumsum(np.bincount(pix, minlength=npix))])
            m = sp.csr_matrix((w, vox, indptr), shape=(npix, nvox))
            m.sum_duplicates()
            self.matrices.append(m)
        self._transposes = [m.T.tocsr() for m in self.matrices]

    @property
    def n_pixels(self) -> int:
        return sum(m.shape[0] for m in self.matrices)

    def forward(self, vol_flat: np.ndarray) -> list[np.ndarray]:
        vol_flat = np.asarray(vol_flat).ravel()
        return [(m @ vol_flat).reshape(g.det_v, g.det_u) for m, g in zip(self.matrices, self.geoms)]

    def adjoint(self, imgs: Sequence[np.ndarray]) -> np.ndarray:
        if len(imgs) != len(self.matrices):
            raise GeometryError(f"{len(imgs)} images for {len(self.matrices)} views")
        out = np.zeros(self.matrices[0].shape[1])
        for mt, img in zip(self._transposes, imgs):
            out += mt @ np.asarray(img, dtype=np.float64).ravel()
        return out
