"""Residual MLP occupancy predictor and the encoders that feed it.

The MLP has ``n_layers`` affine layers. All but the last are followed by a
LeakyReLU, the last by a sigmoid. Halfway through, the network re-injects
earlier information: with ``skip="concat"`` the raw encoder features are
concatenated onto the activations entering layer ``n_layers // 2 + 1``
(layer 5 of 8); with ``skip="add"`` the first hidden activation is added
there instead.

Forward and backward passes are written out by hand for this fixed graph.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .geometry import VolumeGrid, normalize_indices
from .hashgrid import HashEncoderConfig, encode_batch, init_tables, to_unit_cube

__all__ = [
    "MlpConfig",
    "MlpParams",
    "Tape",
    "leaky_relu",
    "sigmoid",
    "mlp_forward",
    "mlp_backward",
    "init_mlp",
    "init_params",
    "field_evaluate",
    "frequency_encode",
    "frequency_encode_batch",
    "save_mlp",
    "load_mlp",
]


@dataclass(frozen=True)
class MlpConfig:
    n_layers: int = 8
    hidden_width: int = 256
    in_dim: int = 32
    out_dim: int = 1
    leaky_slope: float = 0.01
    skip: Literal["concat", "add", "none"] = "concat"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.hidden_width < 1 or self.in_dim < 1:
            raise ValueError("hidden_width and in_dim must be positive")
        if self.out_dim != 1:
            raise ValueError(f"occupancy output is scalar, got out_dim={self.out_dim}")
        if self.skip not in ("concat", "add", "none"):
            raise ValueError(f"unknown skip mode {self.skip!r}")
        if not 0 <= self.leaky_slope < 1:
            raise ValueError(f"leaky_slope must be in [0, 1), got {self.leaky_slope}")

    @property
    def skip_layer(self) -> int | None:
        """0-based index of the layer receiving the skip input, if any."""
        if self.skip == "none" or self.n_layers < 2:
            return None
        if self.skip == "add" and self.n_layers < 3:
            return None
        return self.n_layers // 2

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = []
        for i in range(self.n_layers):
            fan_in = self.in_dim if i == 0 else self.hidden_width
            if i == self.skip_layer and self.skip == "concat":
                fan_in += self.in_dim
            fan_out = self.out_dim if i == self.n_layers - 1 else self.hidden_width
            shapes.append((fan_in, fan_out))
        return shapes


@dataclass
class MlpParams:
    """Weights stored as ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]))


@dataclass
class Tape:
    """What the backward pass needs: layer inputs, hidden activations, output."""

    inputs: list[np.ndarray] = field(default_factory=list)
    acts: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None


def leaky_relu(x, slope: float = 0.01):
    return np.where(x > 0, x, slope * x)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check(cfg: MlpConfig, params: MlpParams):
    shapes = cfg.layer_shapes()
    if len(params.weights) != len(shapes):
        raise ValueError(f"expected {len(shapes)} layers, params have {len(params.weights)}")
    for i, ((fi, fo), w, b) in enumerate(zip(shapes, params.weights, params.biases)):
        if w.shape != (fi, fo) or b.shape != (fo,):
            raise ValueError(f"layer {i}: expected W{(fi, fo)} b{(fo,)}, got W{w.shape} b{b.shape}")


def mlp_forward(cfg: MlpConfig, params: MlpParams, features: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Occupancy for a batch ``(N, in_dim)`` (or a single vector) and the tape for backward."""
    _check(cfg, params)
    x = np.asarray(features)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != cfg.in_dim:
        raise ValueError(f"feature length {x.shape[1]} != in_dim {cfg.in_dim}")
    slope = cfg.leaky_slope
    skip = cfg.skip_layer
    last = cfg.n_layers - 1
    tape = Tape()
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if i == skip:
            h = np.concatenate([h, x], axis=1) if cfg.skip == "concat" else h + tape.acts[0]
        tape.inputs.append(h)
        z = h @ w
        z += b
        if i == last:
            h = sigmoid(z)
        else:
            # max(z, slope*z) == leaky_relu(z) for slope < 1
            h = np.maximum(z, slope * z, out=z)
            tape.acts.append(h)
    y = h[:, 0]
    tape.output = y
    return (y[0] if single else y), tape


def mlp_backward(cfg: MlpConfig, params: MlpParams, tape: Tape, upstream) -> tuple[MlpParams, np.ndarray]:
    """Reverse pass of :func:`mlp_forward`.

    ``upstream`` is dLoss/dOccupancy (scalar or ``(N,)``). Returns gradients
    with respect to the parameters and to the input features.
    """
    _check(cfg, params)
    if tape.output is None or len(tape.inputs) != cfg.n_layers:
        raise ValueError("tape does not match this network")
    y = tape.output
    up = np.broadcast_to(np.asarray(upstream, dtype=y.dtype), y.shape)
    slope = cfg.leaky_slope
    skip = cfg.skip_layer
    width = cfg.hidden_width
    gw = [None] * cfg.n_layers
    gb = [None] * cfg.n_layers
    d_feat = None
    d_first = None  # extra gradient reaching the first hidden activation (additive skip)
    dz = (up * y * (1 - y))[:, None]
    ones = np.ones(y.shape[0], dtype=dz.dtype)
    for i in range(cfg.n_layers - 1, -1, -1):
        gw[i] = tape.inputs[i].T @ dz
        gb[i] = ones @ dz
        dh = dz @ params.weights[i].T
        if i == skip:
            if cfg.skip == "concat":
                d_feat = dh[:, width:]
                dh = dh[:, :width]
            else:
                d_first = dh
        if i == 0:
            break
        if i == 1 and d_first is not None:
            dh = dh + d_first
        # activation sign equals pre-activation sign; derivative is 1 or slope
        deriv = (tape.acts[i - 1] > 0).astype(dh.dtype)
        deriv *= 1.0 - slope
        deriv += slope
        dz = dh * deriv
    d_in = dh if d_feat is None else dh + d_feat
    return MlpParams(gw, gb), d_in


def _kaiming_uniform(rng, fan_in, fan_out, slope, dtype):
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_mlp(cfg: MlpConfig, rng: np.random.Generator, dtype=np.float32) -> MlpParams:
    """Kaiming-uniform weights (LeakyReLU gain), zero biases."""
    ws, bs = [], []
    for fi, fo in cfg.layer_shapes():
        ws.append(_kaiming_uniform(rng, fi, fo, cfg.leaky_slope, dtype))
        bs.append(np.zeros(fo, dtype=dtype))
    return MlpParams(ws, bs)


def init_params(seed: int, enc_cfg: HashEncoderConfig | None, mlp_cfg: MlpConfig,
                dtype=np.float32, table_scale: float = 1e-4):
    """Seeded ``(tables, mlp_params)``; tables is None for a parameter-free encoder."""
    rng = np.random.default_rng(seed)
    tables = init_tables(enc_cfg, rng, table_scale, dtype) if enc_cfg is not None else None
    return tables, init_mlp(mlp_cfg, rng, dtype)


def field_evaluate(enc_cfg: HashEncoderConfig, tables: np.ndarray, mlp_cfg: MlpConfig,
                   params: MlpParams, points: np.ndarray, grid: VolumeGrid,
                   chunk: int = 65536) -> np.ndarray:
    """Occupancy at 1-based voxel index triples ``(N, 3)``; order preserved."""
    pts = np.atleast_2d(points)
    out = np.empty(pts.shape[0], dtype=params.weights[0].dtype)
    for s in range(0, pts.shape[0], chunk):
        x = normalize_indices(pts[s:s + chunk], grid)
        feats = encode_batch(enc_cfg, tables, x, grid).astype(params.weights[0].dtype, copy=False)
        out[s:s + chunk] = mlp_forward(mlp_cfg, params, feats)[0]
    return out


def frequency_encode_batch(x_norm: np.ndarray, n_freq: int, grid: VolumeGrid) -> np.ndarray:
    """Sinusoidal features, ``(N, 6K)``: per axis, per k, ``sin(2^k pi u), cos(2^k pi u)``."""
    if n_freq < 1:
        raise ValueError(f"frequency count must be >= 1, got {n_freq}")
    u = to_unit_cube(np.atleast_2d(x_norm), grid)
    arg = np.pi * u[:, :, None] * (2.0 ** np.arange(n_freq))[None, None, :]  # (N, 3, K)
    return np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(u.shape[0], 6 * n_freq)


def frequency_encode(x_unit, n_freq: int) -> np.ndarray:
    """Single-point form taking a unit-cube coordinate directly."""
    if n_freq < 1:
        raise ValueError(f"frequency count must be >= 1, got {n_freq}")
    u = np.asarray(x_unit, dtype=np.float64)
    arg = np.pi * u[:, None] * (2.0 ** np.arange(n_freq))[None, :]
    return np.stack([np.sin(arg), np.cos(arg)], axis=-1).ravel()


_MLP_MAGIC = b"VFMP"
_MLP_VERSION = 1


def save_mlp(path, cfg: MlpConfig, params: MlpParams) -> None:
    """Little-endian float32 payload after a layer-shape manifest."""
    _check(cfg, params)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _MLP_MAGIC, _MLP_VERSION, cfg.n_layers))
        for fi, fo in cfg.layer_shapes():
            fh.write(struct.pack("<II", fi, fo))
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_mlp(path) -> tuple[list[tuple[int, int]], MlpParams]:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n = struct.unpack_from("<4sII", raw)
    if magic != _MLP_MAGIC:
        raise ValueError(f"{path}: not an MLP checkpoint")
    if version != _MLP_VERSION:
        raise ValueError(f"{path}: unknown format version {version}")
    off = 12
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack_from("<II", raw, off))
        off += 8
    ws, bs = [], []
    for fi, fo in shapes:
        w = np.frombuffer(raw, dtype="<f4", count=fi * fo, offset=off).reshape(fi, fo)
        off += w.nbytes
        b = np.frombuffer(raw, dtype="<f4", count=fo, offset=off)
        off += b.nbytes
        ws.append(w.astype(np.float32))
        bs.append(b.astype(np.float32))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return shapes, MlpParams(ws, bs)
