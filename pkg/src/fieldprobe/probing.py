"""Field-probing layers: a bank of filters, each a set of probing points that
sense a 3D field, squash distance readings through a Gaussian, and reduce to
one scalar per filter via a trainable dot product.

Both the point locations and the dot-product weights are trainable. Location
gradients flow through the sampled field's spatial gradients ("the gradients
computed from the input fields are the forces that push the probing points").
All backward passes accumulate into the bank's buffers; run them serially or
reduce per-worker buffers in a fixed order if parallelized, so training stays
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import ROLE_DISTANCE, Field3D, sample_field

INIT_REDRAW_LIMIT = 100


@dataclass(frozen=True)
class InitConfig:
    """Filter-bank layout: P filters in each cell of a G^3 spatial grid, N
    probing points per filter, segment lengths drawn from
    [length_low, length_high] as fractions of the resolution."""

    grid_divisions: int = 4
    filters_per_cell: int = 16
    points_per_filter: int = 8
    length_low: float = 0.2
    length_high: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.grid_divisions < 1:
            raise ValueError("grid_divisions must be >= 1")
        if self.filters_per_cell < 1:
            raise ValueError("filters_per_cell must be >= 1")
        if self.points_per_filter < 2:
            raise ValueError("a probing filter needs at least 2 points")
        if not 0.0 < self.length_low <= self.length_high < 1.0:
            raise ValueError("need 0 < length_low <= length_high < 1")

    @property
    def filter_count(self):
        return self.grid_divisions**3 * self.filters_per_cell


class FilterBank:
    """C filters of N points each over a T-channel field at resolution R.

    locations is (C, N, 3) in voxel units (x, y, z); weights is (C, N, T),
    one weight per point and channel with no sharing across filters. The
    matching *_gradients buffers accumulate until explicitly zeroed.
    """

    def __init__(self, locations, weights, resolution):
        locations = np.asarray(locations)
        weights = np.asarray(weights)
        if locations.dtype != np.float32:
            locations = locations.astype(np.float64)
        if weights.dtype != locations.dtype:
            weights = weights.astype(locations.dtype)
        if locations.ndim != 3 or locations.shape[2] != 3:
            raise ValueError(f"locations must be (C, N, 3), got {locations.shape}")
        if weights.ndim != 3 or weights.shape[:2] != locations.shape[:2]:
            raise ValueError(
                f"weights {weights.shape} do not match locations {locations.shape[:2]}"
            )
        if resolution < 2:
            raise ValueError("resolution must be >= 2")
        if locations.min() < 0 or locations.max() > resolution - 1:
            raise ValueError("locations must lie in [0, R-1]^3")
        self.locations = locations
        self.weights = weights
        self.resolution = int(resolution)
        self.location_gradients = np.zeros_like(locations)
        self.weight_gradients = np.zeros_like(weights)

    @property
    def filter_count(self):
        return self.locations.shape[0]

    @property
    def points_per_filter(self):
        return self.locations.shape[1]

    @property
    def channel_count(self):
        return self.weights.shape[2]

    def zero_gradients(self):
        self.location_gradients[:] = 0.0
        self.weight_gradients[:] = 0.0

    def clamp_locations(self):
        """Project points back into the field hull, applied after updates."""
        np.clip(self.locations, 0.0, self.resolution - 1.0, out=self.locations)


def _unit_vector(rng):
    while True:
        v = rng.standard_normal(3)
        norm = np.linalg.norm(v)
        if norm > 1e-9:
            return v / norm


def init_filter_bank(
    cfg: InitConfig, resolution: int, channel_count: int = 4, dtype=np.float64
) -> FilterBank:
    """Lay out the bank: for every grid cell, P segments with center uniform
    in the cell, direction uniform on the sphere, and length uniform in
    [length_low, length_high] * R; the N points are evenly spaced along each
    segment, endpoints included. A segment poking outside [0, R-1]^3 is
    redrawn (INIT_REDRAW_LIMIT attempts), then clamped as a last resort.
    Weights are uniform in +-sqrt(6 / (N*T + 1)), treating each filter as a
    unit with fan-in N*T and fan-out 1.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    rng = np.random.default_rng(cfg.seed)
    g, p, n = cfg.grid_divisions, cfg.filters_per_cell, cfg.points_per_filter
    hi = resolution - 1.0
    cell = hi / g
    locations = np.empty((cfg.filter_count, n, 3), dtype=np.float64)
    steps = np.linspace(0.0, 1.0, n)[:, None]
    c = 0
    for gz, gy, gx in np.ndindex(g, g, g):
        lo_corner = np.array([gx, gy, gz], dtype=np.float64) * cell
        for _ in range(p):
            for attempt in range(INIT_REDRAW_LIMIT + 1):
                center = lo_corner + rng.random(3) * cell
                half = 0.5 * rng.uniform(cfg.length_low, cfg.length_high) * resolution
                axis = _unit_vector(rng) * half
                points = (center - axis) + steps * (2.0 * axis)
                if points.min() >= 0.0 and points.max() <= hi:
                    break
            else:
                points = np.clip(points, 0.0, hi)
            locations[c] = points
            c += 1
    bound = np.sqrt(6.0 / (n * channel_count + 1))
    weights = rng.uniform(-bound, bound, size=(cfg.filter_count, n, channel_count))
    return FilterBank(locations.astype(dtype), weights.astype(dtype), resolution)


@dataclass
class SensorOutput:
    """Per-sample probe readings: values (C, N, T) and the field's spatial
    gradients at the probed locations (C, N, T, 3), kept for backward."""

    values: np.ndarray
    gradients: np.ndarray


def sensor_forward(bank: FilterBank, field: Field3D, with_gradients=True) -> SensorOutput:
    """Read the field at every probing point. Skipping gradients saves three
    quarters of the gather work on gradient-free (eval) passes."""
    if field.resolution != bank.resolution:
        raise ValueError(
            f"field resolution {field.resolution} does not match bank {bank.resolution}"
        )
    if field.channel_count != bank.channel_count:
        raise ValueError(
            f"field has {field.channel_count} channels, bank expects {bank.channel_count}"
        )
    c, n = bank.filter_count, bank.points_per_filter
    values, gradients = sample_field(
        field, bank.locations.reshape(c * n, 3), with_gradients=with_gradients
    )
    if gradients is not None:
        gradients = gradients.reshape(c, n, field.channel_count, 3)
    return SensorOutput(values.reshape(c, n, -1), gradients)


def sensor_backward(bank: FilterBank, cache: SensorOutput, upstream) -> None:
    """Accumulate location gradients: the chain rule routes each channel's
    upstream gradient through the field gradient sampled at that point."""
    if cache is None:
        raise RuntimeError("sensor backward called before forward")
    if cache.gradients is None:
        raise RuntimeError("forward ran without gradients; no backward possible")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.values.shape:
        raise ValueError(f"upstream {upstream.shape} does not match {cache.values.shape}")
    bank.location_gradients += np.einsum("cnt,cntk->cnk", upstream, cache.gradients)


def gaussian_forward(values, sigma):
    """Element-wise bell curve exp(-x^2 / (2 sigma^2)): reads near a surface
    map to ~1, far reads decay toward 0."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    values = np.asarray(values, dtype=np.float64)
    return np.exp(values**2 / (-2.0 * sigma**2))


def gaussian_backward(values, upstream, sigma):
    """Input gradients: upstream * (-x / sigma^2) * g(x)."""
    values = np.asarray(values, dtype=np.float64)
    return np.asarray(upstream) * (-values / sigma**2) * gaussian_forward(values, sigma)


def dotproduct_forward(bank: FilterBank, values) -> np.ndarray:
    """Per-filter dot product v_c = sum_{n,t} values * weights; filters never
    mix and weights are not shared between them."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != bank.weights.shape:
        raise ValueError(f"values {values.shape} do not match weights {bank.weights.shape}")
    return np.einsum("cnt,cnt->c", values, bank.weights)


def dotproduct_backward(bank: FilterBank, values, upstream) -> np.ndarray:
    """Returns input gradients (upstream_c * w) and accumulates weight
    gradients (upstream_c * values)."""
    values = np.asarray(values, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if values.shape != bank.weights.shape:
        raise ValueError(f"values {values.shape} do not match weights {bank.weights.shape}")
    if upstream.shape != (bank.filter_count,):
        raise ValueError(f"upstream must be ({bank.filter_count},), got {upstream.shape}")
    bank.weight_gradients += upstream[:, None, None] * values
    return upstream[:, None, None] * bank.weights


def mac_count(bank: FilterBank) -> int:
    """Multiply-accumulates per sample for the dot-product reduction; the
    probing cost depends only on C*N*T, never on the field resolution."""
    return bank.filter_count * bank.points_per_filter * bank.channel_count


class ProbingPipeline:
    """The composed probing block: Sensor, then Gaussian on distance-role
    channels only (normal components are already in [-1, 1]), then
    DotProduct. One backward per forward; backward without a pending forward
    is a contract violation.
    """

    def __init__(self, bank: FilterBank, sigma: float):
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.bank = bank
        self.sigma = float(sigma)
        self._cache = None

    def forward(self, field: Field3D, with_gradients=True) -> np.ndarray:
        sensor = sensor_forward(self.bank, field, with_gradients=with_gradients)
        mask = field.roles == ROLE_DISTANCE
        squashed = sensor.values.copy()
        squashed[:, :, mask] = gaussian_forward(sensor.values[:, :, mask], self.sigma)
        self._cache = (sensor, mask, squashed) if with_gradients else None
        return dotproduct_forward(self.bank, squashed)

    def backward(self, upstream) -> None:
        if self._cache is None:
            raise RuntimeError("probing backward called before forward")
        sensor, mask, squashed = self._cache
        self._cache = None
        grads = dotproduct_backward(self.bank, squashed, upstream)
        grads[:, :, mask] = gaussian_backward(
            sensor.values[:, :, mask], grads[:, :, mask], self.sigma
        )
        sensor_backward(self.bank, sensor, grads)
