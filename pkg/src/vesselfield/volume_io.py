"""Raw + JSON-sidecar files for volumes and projections, plus read-only NIfTI/NRRD import.

A volume ``name.raw`` holds the little-endian payload (float32 for continuous,
uint8 for binary volumes) in x-fastest order; ``name.json`` next to it holds
the header. Projections use the same scheme with a geometry block in the
sidecar.
"""
from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .geometry import VolumeGrid, geometry_from_dict, geometry_to_dict
from .projector import ProjectionImage, ProjectorConfig, forward_project

__all__ = [
    "VolumeFileError",
    "FORMAT_VERSION",
    "save_volume",
    "load_volume",
    "save_projection",
    "load_projection",
    "export_png16",
    "simulate_inputs",
    "import_medical",
]

FORMAT_VERSION = 1
_KIND_DTYPES = {"binary": "<u1", "continuous": "<f4"}


class VolumeFileError(ValueError):
    """A malformed or inconsistent file. ``field`` names the offending header field."""

    def __init__(self, msg, field: str | None = None):
        super().__init__(msg)
        self.field = field


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def _raw(path) -> Path:
    return Path(path).with_suffix(".raw")


def save_volume(path, vol: VolumeGrid, kind: str | None = None) -> Path:
    """Write ``path`` (.raw) and its .json header. ``kind`` defaults from the payload."""
    if kind is None:
        kind = "binary" if vol.is_binary() and np.asarray(vol.data).dtype.kind in "biu" else "continuous"
    if kind not in _KIND_DTYPES:
        raise VolumeFileError(f"unknown volume kind {kind!r}", "kind")
    raw = _raw(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(vol.data, dtype=_KIND_DTYPES[kind])
    raw.write_bytes(payload.tobytes())
    header = {
        "format": "vesselfield-volume",
        "version": FORMAT_VERSION,
        "dims": [vol.nx, vol.ny, vol.nz],
        "spacing_mm": [vol.sx, vol.sy, vol.sz],
        "kind": kind,
        "dtype": payload.dtype.name,
        "byte_order": "little",
        "layout": "x-fastest",
    }
    _sidecar(path).write_text(json.dumps(header, indent=2))
    return raw


def _read_header(path, fmt):
    side = _sidecar(path)
    try:
        header = json.loads(side.read_text())
    except FileNotFoundError:
        raise VolumeFileError(f"missing header {side}", "header") from None
    except json.JSONDecodeError as e:
        raise VolumeFileError(f"{side}: invalid JSON ({e})", "header") from None
    if header.get("format") != fmt:
        raise VolumeFileError(f"{side}: format is {header.get('format')!r}, expected {fmt!r}", "format")
    if header.get("version") != FORMAT_VERSION:
        raise VolumeFileError(f"{side}: unknown version tag {header.get('version')!r}", "version")
    if header.get("byte_order", "little") != "little":
        raise VolumeFileError(f"{side}: only little-endian payloads are supported", "byte_order")
    return header


def _int_list(header, key, n):
    v = header.get(key)
    if not isinstance(v, list) or len(v) != n or not all(isinstance(x, int) and x >= 1 for x in v):
        raise VolumeFileError(f"header field {key!r} must be {n} positive integers, got {v!r}", key)
    return v


def _float_list(header, key, n):
    v = header.get(key)
    if not isinstance(v, list) or len(v) != n or not all(isinstance(x, (int, float)) and x > 0 for x in v):
        raise VolumeFileError(f"header field {key!r} must be {n} positive numbers, got {v!r}", key)
    return [float(x) for x in v]


def load_volume(path, expect_dims=None, expect_spacing=None) -> tuple[VolumeGrid, str]:
    """Read a volume written by :func:`save_volume`. Returns ``(volume, kind)``."""
    header = _read_header(path, "vesselfield-volume")
    dims = _int_list(header, "dims", 3)
    spacing = _float_list(header, "spacing_mm", 3)
    kind = header.get("kind")
    if kind not in _KIND_DTYPES:
        raise VolumeFileError(f"header field 'kind' must be binary or continuous, got {kind!r}", "kind")
    dtype = np.dtype(_KIND_DTYPES[kind])
    if header.get("dtype") not in (None, dtype.name):
        raise VolumeFileError(f"header dtype {header.get('dtype')!r} inconsistent with kind {kind!r}", "dtype")
    if expect_dims is not None and list(expect_dims) != dims:
        raise VolumeFileError(f"dims {dims} differ from expected {list(expect_dims)}", "dims")
    if expect_spacing is not None and not np.allclose(expect_spacing, spacing):
        raise VolumeFileError(f"spacing {spacing} differs from expected {list(expect_spacing)}", "spacing_mm")
    data = _raw(path).read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(data) != expected:
        raise VolumeFileError(f"payload has {len(data)} bytes, header implies {expected}", "payload")
    arr = np.frombuffer(data, dtype=dtype).reshape(dims[2], dims[1], dims[0])
    arr = arr.astype(np.uint8 if kind == "binary" else np.float32)
    if kind == "binary" and np.any(arr > 1):
        raise VolumeFileError("binary volume holds values other than 0/1", "payload")
    return VolumeGrid(dims[0], dims[1], dims[2], *spacing, data=arr), kind


def save_projection(path, img: ProjectionImage, extra: dict | None = None) -> Path:
    raw = _raw(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(img.data, dtype="<f4")
    raw.write_bytes(payload.tobytes())
    header = {
        "format": "vesselfield-projection",
        "version": FORMAT_VERSION,
        "view_id": img.view_id,
        "dims": [img.geometry.det_u, img.geometry.det_v],
        "dtype": "float32",
        "byte_order": "little",
        "layout": "u-fastest",
        "units": "mm*attenuation",
        "geometry": geometry_to_dict(img.geometry),
    }
    if extra:
        header.update(extra)
    _sidecar(path).write_text(json.dumps(header, indent=2))
    return raw


def load_projection(path) -> ProjectionImage:
    header = _read_header(path, "vesselfield-projection")
    dims = _int_list(header, "dims", 2)
    try:
        geom = geometry_from_dict(header["geometry"])
    except KeyError:
        raise VolumeFileError("header lacks a geometry block", "geometry") from None
    except (ValueError, TypeError) as e:
        raise VolumeFileError(f"bad geometry block: {e}", "geometry") from None
    if [geom.det_u, geom.det_v] != dims:
        raise VolumeFileError(f"dims {dims} disagree with geometry detector size", "dims")
    data = _raw(path).read_bytes()
    if len(data) != dims[0] * dims[1] * 4:
        raise VolumeFileError(f"payload has {len(data)} bytes, header implies {dims[0] * dims[1] * 4}", "payload")
    arr = np.frombuffer(data, dtype="<f4").reshape(dims[1], dims[0]).astype(np.float32)
    return ProjectionImage(int(header.get("view_id", 0)), arr, geom)


def export_png16(path, img: ProjectionImage) -> dict:
    """Min-max scaled 16-bit PNG for inspection; returns the scaling used."""
    from PIL import Image

    a = np.asarray(img.data, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scale = (hi - lo) or 1.0
    q = np.round((a - lo) / scale * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)
    return {"png_min": lo, "png_max": hi}


def simulate_inputs(vol: VolumeGrid, geoms, cfg: ProjectorConfig = ProjectorConfig(), out_dir=None,
                    noise_std: float = 0.0, seed: int = 0, png: bool = False) -> list[ProjectionImage]:
    """Project a reference volume into the measured inputs of a reconstruction.

    With ``out_dir`` the projections are written as ``view{i}.raw/.json``.
    ``noise_std > 0`` adds white Gaussian noise (an extension for robustness
    experiments; the default simulation is noise-free).
    """
    imgs = forward_project(vol, geoms, cfg)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        for im in imgs:
            im.data = (im.data + rng.normal(0.0, noise_std, im.data.shape)).astype(np.float32)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for im in imgs:
            extra = {"noise_std": noise_std}
            if png:
                extra.update(export_png16(out / f"view{im.view_id}.png", im))
            save_projection(out / f"view{im.view_id}.raw", im, extra)
    return imgs


_NIFTI_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8", 256: "i1", 512: "u2", 768: "u4"}
_NRRD_DTYPES = {
    "uchar": "u1", "unsigned char": "u1", "uint8": "u1", "uint8_t": "u1",
    "char": "i1", "signed char": "i1", "int8": "i1", "int8_t": "i1",
    "short": "i2", "int16": "i2", "int16_t": "i2", "ushort": "u2", "uint16": "u2", "uint16_t": "u2",
    "int": "i4", "int32": "i4", "int32_t": "i4", "uint": "u4", "uint32": "u4", "uint32_t": "u4",
    "float": "f4", "double": "f8",
}


def _open_maybe_gz(path: Path) -> bytes:
    data = path.read_bytes()
    return gzip.decompress(data) if data[:2] == b"\x1f\x8b" else data


def _read_nifti(path: Path):
    raw = _open_maybe_gz(path)
    if len(raw) < 348:
        raise VolumeFileError("truncated NIfTI header", "header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise VolumeFileError("not a NIfTI-1 file", "sizeof_hdr")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    if dim[0] < 3:
        raise VolumeFileError(f"NIfTI image has {dim[0]} dimensions, need 3", "dim")
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFileError(f"unsupported NIfTI datatype {datatype}", "datatype")
    dt = np.dtype(endian + _NIFTI_DTYPES[datatype])
    n = dim[1] * dim[2] * dim[3]
    arr = np.frombuffer(raw, dtype=dt, count=n, offset=vox_offset).astype(np.float32)
    if slope not in (0.0, 1.0) and np.isfinite(slope):
        arr = arr * slope + inter
    # NIfTI stores the first axis fastest
    return arr.reshape(dim[3], dim[2], dim[1]), list(dim[1:4]), [abs(p) or 1.0 for p in pixdim[1:4]]


def _read_nrrd(path: Path):
    blob = path.read_bytes()
    end = blob.find(b"\n\n")
    if not blob.startswith(b"NRRD") or end < 0:
        raise VolumeFileError("not an attached-header NRRD file", "header")
    fields = {}
    for line in blob[:end].decode("latin-1").splitlines()[1:]:
        if line.startswith("#") or ":" not in line:
            continue
        k, v = line.split(":", 1)
        fields[k.strip().lower()] = v.lstrip("=").strip()
    sizes = [int(s) for s in fields.get("sizes", "").split()]
    if len(sizes) != 3:
        raise VolumeFileError(f"NRRD sizes must have 3 entries, got {fields.get('sizes')!r}", "sizes")
    dtype_name = fields.get("type", "").lower()
    if dtype_name not in _NRRD_DTYPES:
        raise VolumeFileError(f"unsupported NRRD type {dtype_name!r}", "type")
    endian = ">" if fields.get("endian", "little") == "big" else "<"
    spacing = [1.0, 1.0, 1.0]
    if "spacings" in fields:
        spacing = [float(s) for s in fields["spacings"].split()]
    elif "space directions" in fields:
        vecs = [v.strip("()").split(",") for v in fields["space directions"].split()]
        spacing = [float(np.linalg.norm([float(c) for c in v])) for v in vecs]
    payload = blob[end + 2:]
    enc = fields.get("encoding", "raw")
    if enc in ("gzip", "gz"):
        payload = gzip.decompress(payload)
    elif enc != "raw":
        raise VolumeFileError(f"unsupported NRRD encoding {enc!r}", "encoding")
    dt = np.dtype(endian + _NRRD_DTYPES[dtype_name])
    n = int(np.prod(sizes))
    if len(payload) < n * dt.itemsize:
        raise VolumeFileError("truncated NRRD payload", "payload")
    arr = np.frombuffer(payload, dtype=dt, count=n).astype(np.float32)
    return arr.reshape(sizes[2], sizes[1], sizes[0]), sizes, spacing


def import_medical(path, axis_order: str = "xyz", binarize_at: float | None = 0.5) -> VolumeGrid:
    """Read a NIfTI-1 (.nii/.nii.gz) or attached-header NRRD volume (read-only convenience).

    Both formats list the fastest axis first; ``axis_order`` names the
    physical axes in file order (e.g. ``"zyx"`` for a file whose fastest
    axis is z) and the data is remapped to x-fastest. With ``binarize_at``
    the payload becomes a 0/1 mask.
    """
    p = Path(path)
    name = p.name.lower()
    if name.endswith((".nii", ".nii.gz")):
        arr, dims, spacing = _read_nifti(p)
    elif name.endswith(".nrrd"):
        arr, dims, spacing = _read_nrrd(p)
    else:
        raise VolumeFileError(f"unrecognised medical volume extension: {p.name}", "path")
    order = axis_order.lower()
    if sorted(order) != ["x", "y", "z"]:
        raise VolumeFileError(f"axis_order must permute 'xyz', got {axis_order!r}", "axis_order")
    # arr axes are (file axis 2, file axis 1, file axis 0); reorder to (z, y, x)
    file_axes = [order[2], order[1], order[0]]
    arr = np.transpose(arr, [file_axes.index(a) for a in "zyx"])
    lookup = dict(zip(order, zip(dims, spacing)))
    (nx, sx), (ny, sy), (nz, sz) = lookup["x"], lookup["y"], lookup["z"]
    if binarize_at is not None:
        arr = (arr >= binarize_at).astype(np.uint8)
    return VolumeGrid(nx, ny, nz, sx, sy, sz, data=np.ascontiguousarray(arr))
