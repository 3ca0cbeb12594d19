"""Reconstruction quality metrics for binary vessel volumes.

Values that are undefined for a given pair (an empty skeleton, an empty
point set, an all-zero reference) are reported as ``None`` rather than a
number.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize

from .geometry import VolumeGrid

__all__ = [
    "MetricsReport",
    "SKELETON_METHOD",
    "overlap_metrics",
    "skeletonize_3d",
    "cl_dice",
    "chamfer_l2",
    "chamfer_l2_points",
    "chamfer_l2_bruteforce",
    "nearest_sq_dist",
    "re_error",
    "re_mse",
    "evaluate_case",
    "GroundTruthCache",
]

SKELETON_METHOD = "lee94-26/6"


@dataclass
class MetricsReport:
    cl_dice: float | None
    dice: float
    iou: float
    re_error: float | None
    chamfer_l2: float | None
    re_mse: float
    threshold: float
    iteration: int | None = None
    re_error_continuous: float | None = None
    re_mse_continuous: float | None = None
    skeleton_method: str = SKELETON_METHOD

    def as_row(self) -> dict:
        return asdict(self)


def _as_mask(v) -> np.ndarray:
    a = np.asarray(v.data if isinstance(v, VolumeGrid) else v)
    return a.astype(bool)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def overlap_metrics(R, G) -> tuple[float, float]:
    """Dice and IoU of two binary volumes; both are 1 when both volumes are empty."""
    r, g = _as_mask(R), _as_mask(G)
    _same_shape(r, g)
    inter = np.count_nonzero(r & g)
    nr, ng = np.count_nonzero(r), np.count_nonzero(g)
    if nr + ng == 0:
        return 1.0, 1.0
    return 2.0 * inter / (nr + ng), inter / (nr + ng - inter)


_CONN26 = np.ones((3, 3, 3), dtype=bool)


def _thin_odd(comp: np.ndarray) -> np.ndarray:
    """Thin a 2x upsampled copy eroded by one voxel, which makes every width odd."""
    up = comp.repeat(2, 0).repeat(2, 1).repeat(2, 2)
    up = ndimage.binary_erosion(np.pad(up, 1), np.ones((2, 2, 2), bool))[1:-1, 1:-1, 1:-1]
    if not up.any():
        return np.zeros_like(comp)
    sk = skeletonize(up.astype(np.uint8)).astype(bool)
    out = np.zeros_like(comp)
    out[tuple(np.array(np.nonzero(sk)) // 2)] = True
    return out & comp


def skeletonize_3d(V) -> np.ndarray:
    """Topology-preserving 3D thinning (Lee et al. 1994; 26-connected foreground).

    Returns a boolean array contained in the input with at least one voxel per
    26-connected component. Lee thinning deletes components whose cross section
    is an even number of voxels wide; those are thinned again from a
    resampled copy, and failing that reduced to their deepest voxel.
    """
    m = _as_mask(V)
    if not m.any():
        return np.zeros_like(m)
    sk = skeletonize(m.astype(np.uint8)).astype(bool) & m
    labels, n = ndimage.label(m, structure=_CONN26)
    hit = np.zeros(n + 1, dtype=bool)
    hit[labels[sk]] = True
    for lab, box in enumerate(ndimage.find_objects(labels), start=1):
        if hit[lab]:
            continue
        comp = labels[box] == lab
        fix = _thin_odd(comp)
        if not fix.any():
            depth = ndimage.distance_transform_edt(np.pad(comp, 1))[1:-1, 1:-1, 1:-1]
            fix = np.zeros_like(comp)
            fix[np.unravel_index(np.argmax(depth), comp.shape)] = True
        sk[box] |= fix
    return sk


def _cl_dice_from(r, g, sr, sg) -> float | None:
    nsr, nsg = np.count_nonzero(sr), np.count_nonzero(sg)
    if nsr == 0 or nsg == 0:
        return None
    tprec = np.count_nonzero(sr & g) / nsr
    tsens = np.count_nonzero(sg & r) / nsg
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def cl_dice(R, G) -> float | None:
    """Centreline Dice: harmonic mean of topology precision and sensitivity.

    ``None`` when either skeleton is empty.
    """
    r, g = _as_mask(R), _as_mask(G)
    _same_shape(r, g)
    return _cl_dice_from(r, g, skeletonize_3d(r), skeletonize_3d(g))


def _sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one fixed formula shared by the fast path and the brute-force oracle
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    dz = a[..., 2] - b[..., 2]
    return dx * dx + dy * dy + dz * dz


def _bruteforce_nn(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return _sq(q[:, None, :], p[None, :, :]).min(axis=1)


def nearest_sq_dist(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Squared distance from each query to its nearest point.

    Candidates come from a KD-tree; distances are recomputed with the
    brute-force formula so the result matches it bit for bit.
    """
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    if p.shape[0] == 0:
        raise ValueError("empty point set")
    if q.shape[0] == 0:
        return np.zeros(0)
    k = min(2, p.shape[0])  # second candidate guards against last-bit near ties
    _, idx = cKDTree(p).query(q, k=k)
    idx = idx.reshape(q.shape[0], k)
    d = np.stack([_sq(q, p[idx[:, j]]) for j in range(k)], axis=1)
    return d.min(axis=1)


def chamfer_l2_points(A: np.ndarray, B: np.ndarray, fast: bool = True) -> float:
    """Half the sum of the two directed mean squared nearest-neighbour distances."""
    if len(A) == 0 or len(B) == 0:
        raise ValueError("Chamfer distance needs two nonempty point sets")
    nn = nearest_sq_dist if fast else _bruteforce_nn
    return 0.5 * (float(np.mean(nn(A, B))) + float(np.mean(nn(B, A))))


def chamfer_l2_bruteforce(A: np.ndarray, B: np.ndarray) -> float:
    return chamfer_l2_points(np.asarray(A, float), np.asarray(B, float), fast=False)


def _foreground_points(mask: np.ndarray, spacing) -> np.ndarray:
    z, y, x = np.nonzero(mask)
    s = np.asarray(spacing, dtype=np.float64)
    return np.stack([x * s[0], y * s[1], z * s[2]], axis=1)


def chamfer_l2(R, G, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """Chamfer distance (mm^2) between foreground voxel centres; ``None`` if either is empty."""
    r, g = _as_mask(R), _as_mask(G)
    _same_shape(r, g)
    if not r.any() or not g.any():
        return None
    return chamfer_l2_points(_foreground_points(r, spacing), _foreground_points(g, spacing))


def re_error(R, G) -> float | None:
    """Relative squared error ``sum((R-G)^2) / sum(G^2)``; ``None`` for an all-zero reference."""
    r = np.asarray(R.data if isinstance(R, VolumeGrid) else R, dtype=np.float64)
    g = np.asarray(G.data if isinstance(G, VolumeGrid) else G, dtype=np.float64)
    _same_shape(r, g)
    den = float(np.sum(g * g))
    if den == 0:
        return None
    return float(np.sum((r - g) ** 2)) / den


def re_mse(R, G) -> float:
    r = np.asarray(R.data if isinstance(R, VolumeGrid) else R, dtype=np.float64)
    g = np.asarray(G.data if isinstance(G, VolumeGrid) else G, dtype=np.float64)
    _same_shape(r, g)
    return float(np.mean((r - g) ** 2))


class GroundTruthCache:
    """Ground truth with its skeleton and point set precomputed for repeated scoring."""

    def __init__(self, gt: VolumeGrid):
        self.grid = gt
        self.mask = _as_mask(gt)
        self.skeleton = skeletonize_3d(self.mask)
        self.points = _foreground_points(self.mask, gt.spacing)
        self.values = self.mask.astype(np.float64)

    def report(self, recon: VolumeGrid, threshold: float = 0.5, iteration: int | None = None) -> MetricsReport:
        cont = np.asarray(recon.data, dtype=np.float64)
        _same_shape(cont, self.mask)
        rb = cont >= threshold
        dice, iou = overlap_metrics(rb, self.mask)
        cld = _cl_dice_from(rb, self.mask, skeletonize_3d(rb), self.skeleton)
        if rb.any() and self.mask.any():
            cd = chamfer_l2_points(_foreground_points(rb, recon.spacing), self.points)
        else:
            cd = None
        rbf = rb.astype(np.float64)
        return MetricsReport(
            cl_dice=cld,
            dice=dice,
            iou=iou,
            re_error=re_error(rbf, self.values),
            chamfer_l2=cd,
            re_mse=re_mse(rbf, self.values),
            threshold=threshold,
            iteration=iteration,
            re_error_continuous=re_error(cont, self.values),
            re_mse_continuous=re_mse(cont, self.values),
        )


def evaluate_case(recon: VolumeGrid, gt: VolumeGrid, threshold: float = 0.5,
                  iteration: int | None = None) -> MetricsReport:
    """All six metrics of a continuous reconstruction against a binary reference."""
    return GroundTruthCache(gt).report(recon, threshold, iteration)
