"""Volume container, VOL1 file I/O, z-score normalization and trilinear resampling.

Arrays are indexed ``data[x, y, z]``. On disk the payload is written x-fastest
(Fortran order), so ``data.ravel(order="F")`` is the byte stream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import CorruptionError, DegenerateInputError, FormatError, ValidationError

MAGIC = b"VOL1"


@dataclass(frozen=True)
class Volume:
    """Real 3D scalar grid with voxel spacing in millimetres.

    ``data`` is held in memory as a read-only float64 array of shape ``dims``;
    files store float32, so only float32-representable data round-trips exactly.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValidationError(f"spacing must be three positive numbers, got {self.spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def with_data(self, data, spacing=None) -> "Volume":
        return Volume(data, self.spacing if spacing is None else spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class ZScoreStats:
    mean: float
    stddev: float

    def __post_init__(self):
        if not self.stddev > 0:
            raise DegenerateInputError("z-score stddev must be positive")


# ---------------------------------------------------------------------------
# VOL1 I/O


def encode_volume(v: Volume) -> bytes:
    header = json.dumps(
        {"dims": list(v.dims), "spacing": list(v.spacing), "dtype": "f32"},
        separators=(",", ":"),
    ).encode("utf-8")
    payload = np.ascontiguousarray(v.data.ravel(order="F"), dtype="<f4").tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("missing VOL1 magic")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise FormatError("truncated VOL1 header")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
        dims = [int(n) for n in header["dims"]]
        spacing = [float(s) for s in header["spacing"]]
        dtype = header.get("dtype", "f32")
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed VOL1 header: {exc}") from exc
    if dtype != "f32" or len(dims) != 3 or len(spacing) != 3 or min(dims) < 1:
        raise FormatError(f"unsupported VOL1 header {header}")
    payload = buf[8 + hlen :]
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise CorruptionError(
            f"header dims {dims} need {expected // 4} values, payload has {len(payload) / 4:g}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise ValidationError("VOL1 payload contains non-finite values")
    return Volume(flat.reshape(dims, order="F"), tuple(spacing))


def write_volume(v: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(v))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# normalization


def zscore_normalize(v: Volume) -> tuple[Volume, ZScoreStats]:
    """Per-volume z-scoring with the population standard deviation."""
    x = v.data.astype(np.float64)
    mean = float(x.mean())
    sd = float(x.std())
    if not sd > 0 or np.all(x == x.flat[0]):
        raise DegenerateInputError("cannot z-score a constant volume")
    return v.with_data((x - mean) / sd), ZScoreStats(mean, sd)


def zscore_denormalize(v: Volume, stats: ZScoreStats) -> Volume:
    return v.with_data(v.data.astype(np.float64) * stats.stddev + stats.mean)


# ---------------------------------------------------------------------------
# resampling


def rotation_matrix(inplane_deg: float, throughplane_deg: float) -> np.ndarray:
    """Rotation about z (in-plane) followed by rotation about x (through-plane)."""
    a = np.deg2rad(inplane_deg)
    b = np.deg2rad(throughplane_deg)
    rz = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(b), -np.sin(b)], [0.0, np.sin(b), np.cos(b)]])
    return rx @ rz


def sample_trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``data`` at continuous index coordinates ``coords`` (3, ...).

    Points outside the voxel footprint ``[-0.5, n - 0.5]`` on any axis are 0;
    points in the half-voxel rim beyond the outer centres use the edge value.
    """
    data = np.asarray(data, dtype=np.float64)
    shape = np.array(data.shape)
    c = coords.reshape(3, -1)
    inside = np.all((c >= -0.5 - 1e-9) & (c <= shape[:, None] - 0.5 + 1e-9), axis=0)
    c = np.clip(c, 0.0, (shape - 1)[:, None].astype(np.float64))
    out = map_coordinates(data, c, order=1, mode="nearest")
    out[~inside] = 0.0
    return out.reshape(coords.shape[1:])


def resample_array(data, target_dims, spacing=(1.0, 1.0, 1.0), angles=None) -> np.ndarray:
    """Array-level trilinear resampling; see :func:`trilinear_resample`."""
    data = np.asarray(data, dtype=np.float64)
    target_dims = tuple(int(n) for n in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValidationError(f"target dims must be three positive integers, got {target_dims}")
    src = np.array(data.shape, dtype=np.float64)
    tgt = np.array(target_dims, dtype=np.float64)
    rotate = angles is not None and any(float(a) != 0.0 for a in angles)
    if angles is not None and not all(np.isfinite(float(a)) for a in angles):
        raise ValidationError(f"rotation angles must be finite, got {angles}")
    if target_dims == data.shape and not rotate:
        return data.copy()

    axes = [(np.arange(n) + 0.5) * (s / n) - 0.5 for n, s in zip(tgt.astype(int), src)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"))
    if rotate:
        sp = np.asarray(spacing, dtype=np.float64)[:, None]
        centre = ((src - 1.0) / 2.0)[:, None]
        d = (grid.reshape(3, -1) - centre) * sp
        # output(p) = input(R^-1 p)
        rot = rotation_matrix(*angles)
        d = rot.T @ d
        grid = (d / sp + centre).reshape(grid.shape)
    return sample_trilinear(data, grid)


def trilinear_resample(v: Volume, target_dims, transform=None) -> Volume:
    """Resample ``v`` onto ``target_dims`` with an optional rigid rotation.

    ``transform`` is ``None`` (identity) or ``(inplane_deg, throughplane_deg)``.
    Target voxel centres map to source index space as
    ``(i + 0.5) * n_src / n_tgt - 0.5``. Rotations are about the volume centre
    in physical (mm) coordinates: in-plane about z, through-plane about x.
    """
    out = resample_array(v.data, target_dims, v.spacing, transform)
    spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.dims, out.shape))
    return Volume(out, spacing)
