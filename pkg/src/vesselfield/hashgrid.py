"""Multiresolution hash encoding of 3D coordinates.

Each of ``L`` levels overlays a lattice of resolution ``N_l = floor(N_min * b**l)``
on the unit cube. A query is located in its lattice cell, the cell's eight
vertices are mapped to rows of the level's table (densely while the whole
lattice fits, by spatial hashing otherwise), and the rows are blended with
trilinear weights. Level outputs are concatenated in level order.

The trainable state is the ``(L, T, F)`` array of tables. For a fixed query
set (the voxel centres of a grid) the encoding is a fixed sparse linear map
of the tables; :class:`HashGridPlan` precomputes it.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .geometry import VolumeGrid

__all__ = [
    "HashEncoderConfig",
    "PRIMES",
    "level_resolution",
    "is_dense_level",
    "spatial_hash",
    "vertex_entry_index",
    "to_unit_cube",
    "init_tables",
    "encode",
    "encode_batch",
    "encode_backward",
    "encode_backward_batch",
    "SparseGrad",
    "HashGridPlan",
    "save_tables",
    "load_tables",
]

PRIMES = (1, 2654435761, 805459861)

# 8 cell corners as offsets, ordered with the first axis fastest
_CORNERS = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.int64)


@dataclass(frozen=True)
class HashEncoderConfig:
    levels: int = 16
    table_size: int = 2 ** 19
    features: int = 2
    base_resolution: int = 16
    growth: float = 2.0
    dim: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ValueError(f"table_size must be a power of two, got {t}")
        if self.features < 1:
            raise ValueError(f"features must be >= 1, got {self.features}")
        if self.base_resolution < 1:
            raise ValueError(f"base_resolution must be >= 1, got {self.base_resolution}")
        if not self.growth > 1:
            raise ValueError(f"growth must be > 1, got {self.growth}")
        if self.dim != 3:
            raise ValueError(f"only 3D inputs are supported, got dim={self.dim}")

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    @property
    def n_params(self) -> int:
        return self.levels * self.table_size * self.features


def level_resolution(cfg: HashEncoderConfig, level: int) -> int:
    if not 0 <= level < cfg.levels:
        raise IndexError(f"level {level} outside [0, {cfg.levels})")
    return int(math.floor(cfg.base_resolution * cfg.growth ** level))


def is_dense_level(cfg: HashEncoderConfig, level: int) -> bool:
    return (level_resolution(cfg, level) + 1) ** cfg.dim <= cfg.table_size


def spatial_hash(vertex, table_size: int):
    """XOR of per-axis products with :data:`PRIMES`, reduced modulo ``table_size``.

    Accepts one integer triple or an ``(N, 3)`` integer array. Arithmetic is
    done in uint64; wrap-around is harmless because the table size is a power
    of two dividing 2**64.
    """
    v = np.asarray(vertex)
    if np.any(v < 0):
        raise ValueError("hash vertices must be nonnegative")
    v = v.astype(np.uint64)
    p = np.array(PRIMES, dtype=np.uint64)
    h = (v[..., 0] * p[0]) ^ (v[..., 1] * p[1]) ^ (v[..., 2] * p[2])
    h = h & np.uint64(table_size - 1)
    return int(h) if h.ndim == 0 else h.astype(np.int64)


def _entry_index(cfg: HashEncoderConfig, level: int, vertices: np.ndarray) -> np.ndarray:
    n1 = level_resolution(cfg, level) + 1
    if n1 ** 3 <= cfg.table_size:
        return (vertices[..., 0] * n1 + vertices[..., 1]) * n1 + vertices[..., 2]
    return spatial_hash(vertices, cfg.table_size)


def vertex_entry_index(cfg: HashEncoderConfig, level: int, vertex) -> int:
    """Table row for an integer lattice vertex of ``level``.

    Coarse levels whose full lattice fits in the table use a collision-free
    row-major index; finer levels fall back to :func:`spatial_hash`.
    """
    v = np.asarray(vertex, dtype=np.int64)
    n = level_resolution(cfg, level)
    if v.shape != (3,) or np.any(v < 0) or np.any(v > n):
        raise ValueError(f"vertex {vertex!r} outside level {level} lattice [0, {n}]^3")
    return int(_entry_index(cfg, level, v))


def to_unit_cube(x_norm: np.ndarray, grid: VolumeGrid, tol: float = 1e-9) -> np.ndarray:
    """Affinely map origin-centred coordinates on ``[-n', n']`` to ``[0, 1]``.

    Degenerate axes (a single voxel) map to 0.5.
    """
    x = np.asarray(x_norm, dtype=np.float64)
    h = grid.half_extent
    if np.any(np.abs(x) > h + tol * np.maximum(h, 1.0)):
        raise ValueError("coordinate outside the grid's normalised bounding box")
    safe = np.where(h > 0, h, 1.0)
    u = np.where(h > 0, (x + h) / (2.0 * safe), 0.5)
    return np.clip(u, 0.0, 1.0)


def _cell_lookup(cfg: HashEncoderConfig, level: int, x_unit: np.ndarray):
    """Entry rows (N, 8) and trilinear weights (N, 8) of each query's cell."""
    n = level_resolution(cfg, level)
    pos = x_unit * n
    cell = np.clip(np.floor(pos).astype(np.int64), 0, n - 1)
    frac = pos - cell
    verts = cell[:, None, :] + _CORNERS[None, :, :]
    rows = _entry_index(cfg, level, verts)
    w = np.prod(np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
    return rows, w


def init_tables(cfg: HashEncoderConfig, rng: np.random.Generator, scale: float = 1e-4,
                dtype=np.float32) -> np.ndarray:
    """Tables drawn from U(-scale, scale), shape ``(L, T, F)``."""
    return rng.uniform(-scale, scale, size=(cfg.levels, cfg.table_size, cfg.features)).astype(dtype)


def encode_batch(cfg: HashEncoderConfig, tables: np.ndarray, x_norm: np.ndarray,
                 grid: VolumeGrid) -> np.ndarray:
    """Encode ``(N, 3)`` normalised points into ``(N, L*F)`` features."""
    x_unit = to_unit_cube(np.atleast_2d(x_norm), grid)
    out = np.empty((x_unit.shape[0], cfg.levels, cfg.features), dtype=tables.dtype)
    for lvl in range(cfg.levels):
        rows, w = _cell_lookup(cfg, lvl, x_unit)
        out[:, lvl, :] = np.einsum("nc,ncf->nf", w, tables[lvl][rows])
    return out.reshape(x_unit.shape[0], -1)


def encode(cfg: HashEncoderConfig, tables: np.ndarray, x_norm, grid: VolumeGrid) -> np.ndarray:
    """Feature vector of length ``L*F`` for a single normalised point."""
    return encode_batch(cfg, tables, np.asarray(x_norm, dtype=np.float64)[None, :], grid)[0]


class SparseGrad(NamedTuple):
    """Gradient restricted to the touched rows: ``values[k]`` belongs to ``tables[level[k], entry[k]]``."""

    level: np.ndarray
    entry: np.ndarray
    values: np.ndarray

    def to_dense(self, cfg: HashEncoderConfig, dtype=np.float64) -> np.ndarray:
        g = np.zeros((cfg.levels, cfg.table_size, cfg.features), dtype=dtype)
        np.add.at(g, (self.level, self.entry), self.values)
        return g


def encode_backward(cfg: HashEncoderConfig, x_norm, grid: VolumeGrid, upstream) -> SparseGrad:
    """Gradient of ``<encode(x), upstream>`` with respect to the tables.

    Vertices of one cell that hash to the same row accumulate additively,
    so at most ``8 * L`` distinct rows appear.
    """
    upstream = np.asarray(upstream, dtype=np.float64).reshape(cfg.levels, cfg.features)
    x_unit = to_unit_cube(np.asarray(x_norm, dtype=np.float64)[None, :], grid)
    levels, entries, values = [], [], []
    for lvl in range(cfg.levels):
        rows, w = _cell_lookup(cfg, lvl, x_unit)
        uniq, inv = np.unique(rows[0], return_inverse=True)
        acc = np.zeros((uniq.size, cfg.features))
        np.add.at(acc, inv, w[0][:, None] * upstream[lvl][None, :])
        levels.append(np.full(uniq.size, lvl))
        entries.append(uniq)
        values.append(acc)
    return SparseGrad(np.concatenate(levels), np.concatenate(entries), np.concatenate(values))


def encode_backward_batch(cfg: HashEncoderConfig, x_norm: np.ndarray, grid: VolumeGrid,
                          upstream: np.ndarray) -> np.ndarray:
    """Dense ``(L, T, F)`` gradient for a batch; accumulation order is fixed."""
    x_unit = to_unit_cube(np.atleast_2d(x_norm), grid)
    up = np.asarray(upstream, dtype=np.float64).reshape(x_unit.shape[0], cfg.levels, cfg.features)
    grad = np.zeros((cfg.levels, cfg.table_size, cfg.features))
    for lvl in range(cfg.levels):
        rows, w = _cell_lookup(cfg, lvl, x_unit)
        for f in range(cfg.features):
            grad[lvl, :, f] = np.bincount(
                rows.ravel(), weights=(w * up[:, lvl, f][:, None]).ravel(), minlength=cfg.table_size
            )
    return grad


class HashGridPlan:
    """Precomputed encoding for a fixed set of query points.

    Only the table rows that some query touches can ever receive gradient,
    so the plan works on a compact ``(K, F)`` parameter block gathered from
    those rows (``active`` holds their flat ``level * T + row`` indices).
    """

    def __init__(self, cfg: HashEncoderConfig, x_norm: np.ndarray, grid: VolumeGrid, dtype=np.float32):
        self.cfg = cfg
        x_unit = to_unit_cube(np.atleast_2d(x_norm), grid)
        n = x_unit.shape[0]
        self.n_points = n
        cols, wts = [], []
        for lvl in range(cfg.levels):
            rows, w = _cell_lookup(cfg, lvl, x_unit)
            cols.append(rows + lvl * cfg.table_size)
            wts.append(w)
        cols = np.concatenate(cols)  # (L*n, 8), row r = lvl * n + point
        wts = np.concatenate(wts)
        self.active, compact = np.unique(cols, return_inverse=True)
        compact = compact.reshape(cols.shape)
        indptr = np.arange(0, cols.size + 1, 8, dtype=np.int64)
        self.matrix = sp.csr_matrix(
            (wts.ravel().astype(dtype), compact.ravel(), indptr),
            shape=(cfg.levels * n, self.active.size),
        )
        self.matrix.sum_duplicates()
        self._transpose = self.matrix.T.tocsr()

    @property
    def n_active(self) -> int:
        return int(self.active.size)

    def gather(self, tables: np.ndarray) -> np.ndarray:
        """Compact ``(K, F)`` parameter block from full tables."""
        return tables.reshape(-1, self.cfg.features)[self.active].copy()

    def scatter(self, tables: np.ndarray, compact: np.ndarray) -> np.ndarray:
        """Write a compact block back into (a copy of) the full tables."""
        out = tables.copy()
        out.reshape(-1, self.cfg.features)[self.active] = compact
        return out

    def encode(self, compact: np.ndarray) -> np.ndarray:
        y = self.matrix @ compact  # (L*n, F)
        L, F = self.cfg.levels, self.cfg.features
        return np.ascontiguousarray(y.reshape(L, self.n_points, F).transpose(1, 0, 2)).reshape(self.n_points, L * F)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        L, F = self.cfg.levels, self.cfg.features
        g = np.ascontiguousarray(upstream.reshape(self.n_points, L, F).transpose(1, 0, 2)).reshape(L * self.n_points, F)
        return self._transpose @ g


_TABLE_MAGIC = b"VFHT"
_TABLE_VERSION = 1
_TABLE_HEADER = struct.Struct("<4sIIIIIdI")


def save_tables(path, cfg: HashEncoderConfig, tables: np.ndarray) -> None:
    """Little-endian float32 tables behind a fixed header recording the config."""
    if tables.shape != (cfg.levels, cfg.table_size, cfg.features):
        raise ValueError(f"tables shape {tables.shape} does not match config")
    with open(path, "wb") as fh:
        fh.write(_TABLE_HEADER.pack(_TABLE_MAGIC, _TABLE_VERSION, cfg.levels, cfg.table_size,
                                    cfg.features, cfg.base_resolution, cfg.growth, cfg.dim))
        fh.write(np.ascontiguousarray(tables, dtype="<f4").tobytes())


def load_tables(path) -> tuple[HashEncoderConfig, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _TABLE_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, L, T, F, nmin, b, d = _TABLE_HEADER.unpack_from(raw)
    if magic != _TABLE_MAGIC:
        raise ValueError(f"{path}: not a hash-table checkpoint")
    if version != _TABLE_VERSION:
        raise ValueError(f"{path}: unknown format version {version}")
    cfg = HashEncoderConfig(levels=L, table_size=T, features=F, base_resolution=nmin, growth=b, dim=d)
    payload = raw[_TABLE_HEADER.size:]
    if len(payload) != cfg.n_params * 4:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {cfg.n_params * 4}")
    return cfg, np.frombuffer(payload, dtype="<f4").reshape(L, T, F).astype(np.float32)
