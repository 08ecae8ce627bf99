"""Dense 3D fields over the voxel grid: exact Euclidean distance transforms,
surface-normal channels, trilinear sampling, and a binary file format.

Field values live on lattice nodes at integer coordinates (x, y, z) in
[0, R-1]^3 and are stored values[t, z, y, x]. Spatial gradients are
precomputed central differences (one-sided at the grid faces); sampling a
gradient interpolates that precomputed field rather than differentiating
the interpolant, which keeps the reported gradient continuous across cell
boundaries.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .ingest import OccupancyGrid

ROLE_DISTANCE = 0
ROLE_NORMAL_X = 1
ROLE_NORMAL_Y = 2
ROLE_NORMAL_Z = 3
ROLE_GENERIC = 4

ROLE_NAMES = {0: "distance", 1: "normal-x", 2: "normal-y", 3: "normal-z", 4: "generic"}

FIELD_MAGIC = b"FPF1"

NORMAL_EPS = 1e-8


class Field3D:
    """A stack of T scalar channels on an R^3 lattice.

    `values` has shape (T, R, R, R) with axes (channel, z, y, x); `roles`
    tags each channel with one of the ROLE_* codes so downstream layers can
    treat distance channels differently from normal components. The gradient
    stack is computed on first use and cached.
    """

    def __init__(self, values, roles):
        values = np.asarray(values)
        if values.ndim != 4 or len({values.shape[1], values.shape[2], values.shape[3]}) != 1:
            raise ValueError(f"values must be (T, R, R, R), got {values.shape}")
        roles = np.asarray(roles, dtype=np.uint8).reshape(-1)
        if roles.shape[0] != values.shape[0]:
            raise ValueError(f"{roles.shape[0]} roles for {values.shape[0]} channels")
        if roles.size and roles.max() > ROLE_GENERIC:
            raise ValueError(f"unknown role code {roles.max()}")
        self.values = values
        self.roles = roles
        self._gradients = None

    @property
    def resolution(self):
        return self.values.shape[1]

    @property
    def channel_count(self):
        return self.values.shape[0]

    @property
    def gradients(self):
        """(T, 3, R, R, R) central-difference gradients, components (x, y, z).
        The cache keeps the values' float width: float64 fields (test oracles)
        get exact float64 gradients, float32 training fields stay compact."""
        if self._gradients is None:
            dtype = self.values.dtype if self.values.dtype == np.float32 else np.float64
            grads = np.empty((self.channel_count, 3) + self.values.shape[1:], dtype=dtype)
            for t in range(self.channel_count):
                gz, gy, gx = np.gradient(self.values[t].astype(dtype, copy=False))
                grads[t, 0], grads[t, 1], grads[t, 2] = gx, gy, gz
            self._gradients = grads
        return self._gradients


def squared_distance_transform(occ: OccupancyGrid) -> np.ndarray:
    """Exact squared Euclidean distance (int64) from every voxel to its
    nearest occupied voxel. Computed from the nearest-site index map so the
    result is integer arithmetic, not a rounded float."""
    if occ.occupied_count == 0:
        raise ValueError("distance transform of an empty grid is undefined")
    # edt measures distance to the nearest False voxel, so pass the complement
    idx = ndimage.distance_transform_edt(~occ.bits, return_distances=False, return_indices=True)
    coords = np.indices(occ.bits.shape, dtype=np.int64)
    return ((idx.astype(np.int64) - coords) ** 2).sum(axis=0)


def distance_field(occ: OccupancyGrid) -> np.ndarray:
    """Euclidean distance to the nearest occupied voxel, float64 (R, R, R)."""
    return np.sqrt(squared_distance_transform(occ).astype(np.float64))


def normal_field(distance: np.ndarray) -> np.ndarray:
    """Unit-normalized gradient of a distance field, shape (3, R, R, R) with
    components (x, y, z). Voxels where the gradient magnitude falls below
    NORMAL_EPS (ridges, equidistant sheets) get the zero vector."""
    gz, gy, gx = np.gradient(np.asarray(distance, dtype=np.float64))
    normals = np.stack([gx, gy, gz])
    norm = np.sqrt((normals**2).sum(axis=0))
    safe = np.where(norm < NORMAL_EPS, 1.0, norm)
    normals /= safe
    normals[:, norm < NORMAL_EPS] = 0.0
    return normals


def field_from_occupancy(occ: OccupancyGrid, dtype=np.float32) -> Field3D:
    """The standard 4-channel field stack: distance plus its surface normals."""
    dist = distance_field(occ)
    normals = normal_field(dist)
    values = np.concatenate([dist[None], normals]).astype(dtype)
    return Field3D(values, [ROLE_DISTANCE, ROLE_NORMAL_X, ROLE_NORMAL_Y, ROLE_NORMAL_Z])


def _trilinear(grids, points):
    """Trilinear interpolation of a (..., R, R, R) stack at (M, 3) points
    given as (x, y, z). Returns (..., M) float64. Points are clamped to the
    lattice hull; integer points reproduce stored values exactly."""
    grids = np.asarray(grids, dtype=np.float64)
    r = grids.shape[-1]
    if r < 2:
        raise ValueError("sampling needs a lattice of at least 2 nodes per axis")
    p = np.clip(np.asarray(points, dtype=np.float64), 0.0, r - 1.0)
    i0 = np.clip(np.floor(p).astype(np.int64), 0, r - 2)
    f = p - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    out = 0.0
    for dz in (0, 1):
        wz = f[:, 2] if dz else 1.0 - f[:, 2]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dx in (0, 1):
                wx = f[:, 0] if dx else 1.0 - f[:, 0]
                w = wx * wy * wz
                out = out + w * grids[..., iz + dz, iy + dy, ix + dx]
    return out


def sample_field(field: Field3D, points, with_gradients=True):
    """Sample every channel at the given (M, 3) points.

    Returns (values, gradients): values is (M, T); gradients is (M, T, 3),
    the trilinearly interpolated precomputed gradient stack, or None when
    with_gradients is false (an eval-path shortcut, it skips three quarters
    of the gather work).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    values = _trilinear(field.values, points).T
    if not with_gradients:
        return values, None
    t = field.channel_count
    grads = _trilinear(field.gradients.reshape(t * 3, *field.values.shape[1:]), points)
    return values, grads.reshape(t, 3, -1).transpose(2, 0, 1)


def write_field(field: Field3D) -> bytes:
    """Serialize to the FPF1 layout: magic, u32 resolution, u32 channel
    count, one role byte per channel, then float32 values channel-major with
    x fastest. Little-endian throughout."""
    values = np.ascontiguousarray(field.values, dtype="<f4")
    if not np.isfinite(values).all():
        raise ValueError("field contains non-finite values")
    head = FIELD_MAGIC + struct.pack("<II", field.resolution, field.channel_count)
    return head + field.roles.astype(np.uint8).tobytes() + values.tobytes()


def read_field(data: bytes) -> Field3D:
    """Parse an FPF1 blob. Rejects bad magic, size mismatches in either
    direction, unknown role codes, and non-finite payloads."""
    if len(data) < 4 or data[:4] != FIELD_MAGIC:
        raise FormatError("bad magic: not a field file")
    if len(data) < 12:
        raise FormatError("truncated header")
    r, t = struct.unpack_from("<II", data, 4)
    if not 1 <= r <= 4096 or not 1 <= t <= 4096:
        raise FormatError(f"implausible dimensions: resolution {r}, {t} channels")
    expected = 12 + t + 4 * t * r**3
    if len(data) < expected:
        raise FormatError(f"truncated: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise FormatError(f"trailing bytes: expected {expected}, got {len(data)}")
    roles = np.frombuffer(data, dtype=np.uint8, count=t, offset=12)
    if roles.max() > ROLE_GENERIC:
        raise FormatError(f"unknown role code {roles.max()}")
    values = np.frombuffer(data, dtype="<f4", offset=12 + t).reshape(t, r, r, r)
    if not np.isfinite(values).all():
        raise FormatError("non-finite field values")
    return Field3D(values.copy(), roles.copy())


def save_field(field: Field3D, path):
    with open(path, "wb") as fh:
        fh.write(write_field(field))


def load_field(path) -> Field3D:
    with open(path, "rb") as fh:
        return read_field(fh.read())
