"""Self-supervised fitting of the occupancy field to two (or more) projections.

One iteration renders the occupancy of every voxel, projects it, scores the
projections against the measured ones with a pixel-averaged squared error,
and pushes the residual back through projector, MLP and encoder to take an
Adam step on the hash tables and the MLP weights together.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from .field import MlpConfig, MlpParams, frequency_encode_batch, init_mlp, mlp_backward, mlp_forward
from .geometry import ProjectionGeometry, VolumeGrid
from .hashgrid import HashEncoderConfig, HashGridPlan, init_tables
from .projector import ProjectionOperator, ProjectorConfig

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainRecord",
    "TrainResult",
    "NumericalFailure",
    "OccupancyModel",
    "mse_loss",
    "adam_step",
    "render_volume",
    "binarize",
    "train",
    "save_snapshot",
    "load_snapshot",
]


class NumericalFailure(FloatingPointError):
    """Non-finite loss or gradient. ``snapshot`` holds the last good state, if any."""

    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 100
    binarize_thresholds: tuple[float, ...] = (0.4, 0.5, 0.6)
    log_threshold: float = 0.5
    # "pixels": divide by the true pixel count; "per512": N * 512 (fixed 512-pixel detector side)
    loss_normalization: Literal["pixels", "per512"] = "pixels"
    chunk_size: int = 262144

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")
        for t in self.binarize_thresholds + (self.log_threshold,):
            if not 0 < t < 1:
                raise ValueError(f"thresholds must lie in (0, 1), got {t}")
        if self.loss_normalization not in ("pixels", "per512"):
            raise ValueError(f"unknown loss normalization {self.loss_normalization!r}")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    metrics: object | None = None  # MetricsReport


@dataclass
class TrainResult:
    tables: np.ndarray | None
    mlp: MlpParams
    records: list[TrainRecord]
    volume: VolumeGrid
    model: "OccupancyModel"
    adam: AdamState


def mse_loss(P, G, normalization: Literal["pixels", "per512"] = "pixels") -> float:
    """Mean squared projection error over all pixels of all views.

    ``normalization="per512"`` divides by ``N * 512`` instead of the pixel count.
    """
    P = [np.asarray(p, dtype=np.float64) for p in P]
    G = [np.asarray(g, dtype=np.float64) for g in G]
    if len(P) != len(G) or len(P) < 1:
        raise ValueError(f"need matching nonempty view lists, got {len(P)} and {len(G)}")
    total = 0.0
    for p, g in zip(P, G):
        if p.shape != g.shape:
            raise ValueError(f"projection shape mismatch {p.shape} vs {g.shape}")
        total += float(np.sum((p - g) ** 2))
    return total / _loss_denominator([p.shape for p in P], normalization)


def _loss_denominator(shapes, normalization) -> float:
    if normalization == "per512":
        return len(shapes) * 512.0
    return float(sum(int(np.prod(s)) for s in shapes))


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place and returned."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalFailure(f"parameter block {i}: {bad} non-finite gradient entries")
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.lr
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class OccupancyModel:
    """Encoder plus MLP evaluated on the voxel centres of a fixed grid.

    ``encoder="hash"`` keeps only the touched table rows as a compact
    trainable block (rows never touched get zero gradient forever, so Adam
    would leave them unchanged anyway). ``encoder="frequency"`` has no
    trainable encoder state.
    """

    def __init__(self, grid: VolumeGrid, mlp_cfg: MlpConfig, mlp: MlpParams,
                 enc_cfg: HashEncoderConfig | None = None, tables: np.ndarray | None = None,
                 encoder: Literal["hash", "frequency"] = "hash", n_frequencies: int = 8,
                 chunk_size: int = 262144):
        self.grid = grid
        self.encoder = encoder
        self.mlp_cfg = mlp_cfg
        self.mlp = mlp
        self.enc_cfg = enc_cfg
        self.chunk_size = chunk_size
        self.dtype = mlp.weights[0].dtype
        x = grid.voxel_centers()
        if encoder == "hash":
            if enc_cfg is None or tables is None:
                raise ValueError("hash encoder needs a config and tables")
            self.plan = HashGridPlan(enc_cfg, x, grid, dtype=self.dtype)
            self.tables = tables
            self.compact = self.plan.gather(tables)
            self._features = None
        elif encoder == "frequency":
            self.plan = None
            self.tables = None
            self.compact = None
            self._features = frequency_encode_batch(x, n_frequencies, grid).astype(self.dtype)
        else:
            raise ValueError(f"unknown encoder {encoder!r}")
        if (self._features is None and enc_cfg.out_dim != mlp_cfg.in_dim) or (
                self._features is not None and self._features.shape[1] != mlp_cfg.in_dim):
            raise ValueError("encoder output size does not match MLP in_dim")
        self._tapes = None

    @property
    def n_points(self) -> int:
        return self.grid.nx * self.grid.ny * self.grid.nz

    def parameters(self) -> list[np.ndarray]:
        arrays = self.mlp.arrays()
        return ([self.compact] + arrays) if self.compact is not None else arrays

    def full_tables(self) -> np.ndarray | None:
        if self.compact is None:
            return None
        return self.plan.scatter(self.tables, self.compact)

    def features(self) -> np.ndarray:
        if self._features is not None:
            return self._features
        return self.plan.encode(self.compact).astype(self.dtype, copy=False)

    def forward(self, keep_tape: bool = True) -> np.ndarray:
        """Occupancy of all voxels, flat x-fastest."""
        feats = self.features()
        n = self.n_points
        out = np.empty(n, dtype=self.dtype)
        tapes = []
        for s in range(0, n, self.chunk_size):
            y, tape = mlp_forward(self.mlp_cfg, self.mlp, feats[s:s + self.chunk_size])
            out[s:s + self.chunk_size] = y
            # a single chunk keeps its tape; several chunks recompute in backward
            tapes.append(tape if n <= self.chunk_size else None)
        self._feats = feats
        self._tapes = tapes if keep_tape else None
        return out

    def backward(self, d_occ: np.ndarray) -> list[np.ndarray]:
        """Gradients matching :meth:`parameters` for upstream dLoss/dOccupancy."""
        if self._tapes is None:
            raise RuntimeError("backward needs a preceding forward(keep_tape=True)")
        d_occ = np.asarray(d_occ, dtype=self.dtype).ravel()
        feats = self._feats
        gw = [np.zeros_like(a) for a in self.mlp.arrays()]
        d_feat = np.empty_like(feats) if self.compact is not None else None
        for k, s in enumerate(range(0, self.n_points, self.chunk_size)):
            tape = self._tapes[k]
            if tape is None:
                tape = mlp_forward(self.mlp_cfg, self.mlp, feats[s:s + self.chunk_size])[1]
            g, d_in = mlp_backward(self.mlp_cfg, self.mlp, tape, d_occ[s:s + self.chunk_size])
            for acc, gi in zip(gw, g.arrays()):
                acc += gi
            if d_feat is not None:
                d_feat[s:s + self.chunk_size] = d_in
        self._tapes = None
        if self.compact is None:
            return gw
        g_tab = self.plan.backward(d_feat).astype(self.dtype, copy=False)
        return [g_tab] + gw

    def render(self) -> VolumeGrid:
        return self.grid.like(self.forward(keep_tape=False).reshape(self.grid.shape))


def render_volume(model: OccupancyModel, grid: VolumeGrid | None = None) -> VolumeGrid:
    """Continuous occupancy of every voxel of the model's grid."""
    if grid is not None and (grid.shape != model.grid.shape or not np.allclose(grid.spacing, model.grid.spacing)):
        raise ValueError("grid does not match the model's grid")
    return model.render()


def binarize(vol: VolumeGrid, threshold: float = 0.5) -> VolumeGrid:
    """Voxels ``>= threshold`` become 1, others 0."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return vol.like((np.asarray(vol.data) >= threshold).astype(np.uint8))


def save_snapshot(path, model: OccupancyModel, adam: AdamState, iteration: int,
                  records: Sequence[TrainRecord] = ()) -> None:
    """Resumable state: parameters, Adam moments and the loss history."""
    arrays = {f"p{i}": p for i, p in enumerate(model.parameters())}
    arrays.update({f"m{i}": m for i, m in enumerate(adam.m)})
    arrays.update({f"v{i}": v for i, v in enumerate(adam.v)})
    with open(path, "wb") as fh:
        np.savez(
            fh,
            adam_t=np.array(adam.t),
            iteration=np.array(iteration),
            n_params=np.array(len(adam.m)),
            loss_iter=np.array([r.iteration for r in records], dtype=np.int64),
            loss_val=np.array([r.loss for r in records], dtype=np.float64),
            **arrays,
        )


def load_snapshot(path, model: OccupancyModel) -> tuple[AdamState, int, list[TrainRecord]]:
    """Load a snapshot into ``model`` (in place). Returns Adam state, iteration and records."""
    with np.load(path) as z:
        n = int(z["n_params"])
        params = model.parameters()
        if n != len(params):
            raise ValueError(f"snapshot holds {n} parameter blocks, model has {len(params)}")
        for i, p in enumerate(params):
            src = z[f"p{i}"]
            if src.shape != p.shape:
                raise ValueError(f"parameter block {i}: snapshot shape {src.shape} != {p.shape}")
            p[...] = src
        adam = AdamState([z[f"m{i}"].copy() for i in range(n)], [z[f"v{i}"].copy() for i in range(n)],
                         int(z["adam_t"]))
        records = [TrainRecord(int(i), float(v)) for i, v in zip(z["loss_iter"], z["loss_val"])]
        return adam, int(z["iteration"]), records


def train(G: Sequence[np.ndarray], geoms: Sequence[ProjectionGeometry], grid: VolumeGrid,
          mlp_cfg: MlpConfig, train_cfg: TrainConfig,
          enc_cfg: HashEncoderConfig | None = None,
          encoder: Literal["hash", "frequency"] = "hash", n_frequencies: int = 8,
          ground_truth: VolumeGrid | None = None,
          projector_cfg: ProjectorConfig = ProjectorConfig(),
          operator: ProjectionOperator | None = None,
          resume: str | None = None, table_init_scale: float = 1e-4,
          callback: Callable[[TrainRecord], None] | None = None,
          dtype=np.float32, snapshot_every: int = 0, snapshot_path: str | None = None) -> TrainResult:
    """Fit the occupancy field to measured projections ``G``.

    Records the loss of the current parameters at every iteration ``0..iterations``
    (iteration ``k`` = after ``k`` updates). With ground truth, a metrics report at
    ``log_threshold`` is attached every ``log_every`` iterations. With
    ``snapshot_every > 0`` a resumable snapshot is written to ``snapshot_path``
    at that cadence; a :class:`NumericalFailure` carries the last one written.
    """
    from .metrics import GroundTruthCache

    if len(G) != len(geoms) or len(G) < 1:
        raise ValueError(f"{len(G)} projections for {len(geoms)} geometries")
    G = [np.asarray(g, dtype=np.float64) for g in G]
    for g, geo in zip(G, geoms):
        if g.shape != (geo.det_v, geo.det_u):
            raise ValueError(f"projection shape {g.shape} does not match detector ({geo.det_v}, {geo.det_u})")

    rng = np.random.default_rng(train_cfg.seed)
    tables = init_tables(enc_cfg, rng, table_init_scale, dtype) if encoder == "hash" else None
    mlp = init_mlp(mlp_cfg, rng, dtype)
    model = OccupancyModel(grid, mlp_cfg, mlp, enc_cfg, tables, encoder, n_frequencies, train_cfg.chunk_size)
    op = operator if operator is not None else ProjectionOperator(grid, geoms, projector_cfg)
    denom = _loss_denominator([g.shape for g in G], train_cfg.loss_normalization)
    gt = GroundTruthCache(ground_truth) if ground_truth is not None else None

    adam = AdamState.zeros_like(model.parameters())
    start = 0
    records: list[TrainRecord] = []
    if resume is not None:
        adam, start, records = load_snapshot(resume, model)
        records = [r for r in records if r.iteration < start]

    if snapshot_every and snapshot_path is None:
        raise ValueError("snapshot_every needs a snapshot_path")
    last_good = None
    for it in range(start, train_cfg.iterations + 1):
        occ = model.forward(keep_tape=it < train_cfg.iterations)
        resid = [p - g for p, g in zip(op.forward(occ), G)]
        loss = sum(float(np.sum(r * r)) for r in resid) / denom
        if not math.isfinite(loss):
            raise NumericalFailure(f"non-finite loss at iteration {it}", snapshot=last_good)
        rec = TrainRecord(it, loss)
        if gt is not None and it > 0 and it % train_cfg.log_every == 0:
            rec.metrics = gt.report(grid.like(occ.reshape(grid.shape)), train_cfg.log_threshold, iteration=it)
        records.append(rec)
        if callback is not None:
            callback(rec)
        if it % max(1, train_cfg.log_every) == 0:
            log.info("iteration %d loss %.6g", it, loss)
        if it == train_cfg.iterations:
            break
        if snapshot_every and it % snapshot_every == 0:
            save_snapshot(snapshot_path, model, adam, it, records)
            last_good = snapshot_path
        d_occ = op.adjoint([r * (2.0 / denom) for r in resid])
        grads = model.backward(d_occ)
        try:
            adam_step(model.parameters(), grads, adam, train_cfg)
        except NumericalFailure as e:
            raise NumericalFailure(f"iteration {it}: {e}", snapshot=last_good) from None

    volume = grid.like(occ.reshape(grid.shape))
    return TrainResult(model.full_tables(), model.mlp, records, volume, model, adam)
