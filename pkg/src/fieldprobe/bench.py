"""Cost-model witness: probing time vs dense 3D convolution time.

The point being demonstrated: a probing layer touches C*N points no
matter how large the field is, so its runtime is (nearly) agnostic to
resolution, while a dense convolution slides over S^3 positions and S
grows linearly with resolution at fixed stride, giving a cubic blow-up.
The convolution here is a deliberately naive direct implementation (no
FFT, no im2col); it witnesses the scaling law, it is not a production
kernel.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import platform
import time

import numpy as np

from .field import Field3D, ROLE_DISTANCE, ROLE_GENERIC
from .probing import InitConfig, init_filter_bank, mac_count
from .trainer import ProbingBlock

BENCH_HEADER = "resolution,kind,mean_ms,std_ms,macs,bytes"

MODES = ("fixed-stride", "fixed-S")


@dataclasses.dataclass(frozen=True)
class ConvConfig:
    """A cubic kernel slid over S positions per axis.

    The stride is implied by the volume: the largest step that keeps all
    S positions inside, (resolution - kernel) // (positions - 1). The
    placement must satisfy (S-1)*stride + K <= R with stride >= 1.
    """

    kernel: int = 6
    channels_out: int = 48
    positions: int = 12

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError("kernel must be >= 1")
        if self.channels_out < 1:
            raise ValueError("channels_out must be >= 1")
        if self.positions < 1:
            raise ValueError("positions must be >= 1")

    def implied_stride(self, resolution):
        if self.positions == 1:
            if self.kernel > resolution:
                raise ValueError("kernel %d does not fit in resolution %d"
                                 % (self.kernel, resolution))
            return 0
        stride = (resolution - self.kernel) // (self.positions - 1)
        if stride < 1:
            raise ValueError(
                "%d positions of kernel %d do not fit in resolution %d"
                % (self.positions, self.kernel, resolution))
        return stride

    def macs(self):
        """Multiply-accumulates for one single-channel input volume."""
        return self.kernel ** 3 * self.channels_out * self.positions ** 3


def conv3d_reference(volume, cfg: ConvConfig, weights):
    """Direct dense 3D convolution, forward only.

    `volume` is a cubic (R, R, R) array with one input channel; `weights`
    is (C_out, K, K, K). Evaluates every sliding position as one
    patch-times-weights product, which is the honest naive cost.
    Returns (C_out, S, S, S) in float64.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3 or len(set(volume.shape)) != 1:
        raise ValueError("volume must be cubic (R, R, R), got %s"
                         % (volume.shape,))
    weights = np.asarray(weights, dtype=np.float64)
    k = cfg.kernel
    if weights.shape != (cfg.channels_out, k, k, k):
        raise ValueError("weights must be (C_out, K, K, K) = %s, got %s"
                         % ((cfg.channels_out, k, k, k), weights.shape))
    resolution = volume.shape[0]
    stride = cfg.implied_stride(resolution)
    s = cfg.positions
    flat = weights.reshape(cfg.channels_out, -1)
    out = np.empty((cfg.channels_out, s, s, s), dtype=np.float64)
    for iz in range(s):
        z0 = iz * stride
        for iy in range(s):
            y0 = iy * stride
            for ix in range(s):
                x0 = ix * stride
                patch = volume[z0:z0 + k, y0:y0 + k, x0:x0 + k].reshape(-1)
                out[:, iz, iy, ix] = flat @ patch
    return out


@dataclasses.dataclass
class BenchRow:
    resolution: int
    kind: str
    mean_ms: float
    std_ms: float
    macs: int
    bytes: int
    reps: int


@dataclasses.dataclass
class BenchReport:
    rows: list
    machine: str

    def row(self, resolution, kind):
        for row in self.rows:
            if row.resolution == resolution and row.kind == kind:
                return row
        raise KeyError("no row for (%r, %r)" % (resolution, kind))

    def time_ratio(self, kind, high_resolution, low_resolution):
        return (self.row(high_resolution, kind).mean_ms
                / self.row(low_resolution, kind).mean_ms)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("# %s\n" % self.machine)
            handle.write(BENCH_HEADER + "\n")
            for row in self.rows:
                handle.write("%d,%s,%.6f,%.6f,%d,%d\n"
                             % (row.resolution, row.kind, row.mean_ms,
                                row.std_ms, row.macs, row.bytes))
        return path


def _machine_info():
    return "%s | python %s | numpy %s" % (
        platform.platform(), platform.python_version(), np.__version__)


def _time_callables(fns, reps, warmups=3, min_seconds=1e-3):
    """Mean/std wall milliseconds per call over >= `reps` measurements.

    Each measurement runs the whole set of callables enough times that
    the monotonic clock resolves it (auto-scaled inner loop), then
    divides back down to a single call.
    """
    reps = max(10, int(reps))
    for _ in range(warmups):
        for fn in fns:
            fn()
    t0 = time.perf_counter()
    for fn in fns:
        fn()
    probe = max(time.perf_counter() - t0, 1e-9)
    inner = max(1, int(np.ceil(min_seconds / probe)))
    samples = np.empty(reps, dtype=np.float64)
    for i in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            for fn in fns:
                fn()
        samples[i] = (time.perf_counter() - t0) / (inner * len(fns))
    return float(samples.mean() * 1e3), float(samples.std() * 1e3), reps


def _time_parallel(fns, reps, workers, warmups=3):
    """Effective per-call milliseconds when `fns` run concurrently."""
    reps = max(10, int(reps))
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        def sweep():
            list(pool.map(lambda fn: fn(), fns))

        for _ in range(warmups):
            sweep()
        samples = np.empty(reps, dtype=np.float64)
        for i in range(reps):
            t0 = time.perf_counter()
            sweep()
            samples[i] = (time.perf_counter() - t0) / len(fns)
    return float(samples.mean() * 1e3), float(samples.std() * 1e3), reps


def _probing_setup(init_cfg, resolution, channel_count, rng):
    bank = init_filter_bank(init_cfg, resolution,
                            channel_count=channel_count, dtype=np.float32)
    sigma = 0.1 * (resolution - 4)
    block = ProbingBlock(bank, sigma)
    roles = np.full(channel_count, ROLE_GENERIC, dtype=np.uint8)
    roles[0] = ROLE_DISTANCE
    values = rng.standard_normal(
        (channel_count,) + (resolution,) * 3).astype(np.float32)
    field = Field3D(values, roles)
    field.gradients  # the precomputed stack is field preparation, not layer cost

    def once():
        out = block.forward([field], train=True)
        block.backward(out)

    touched = (field.values.nbytes + field.gradients.nbytes
               + bank.locations.nbytes + bank.weights.nbytes)
    return once, mac_count(bank), touched


def _conv_setup(conv_cfg, resolution, rng):
    volume = rng.standard_normal((resolution,) * 3)
    weights = rng.standard_normal((conv_cfg.channels_out,)
                                  + (conv_cfg.kernel,) * 3)
    conv_cfg.implied_stride(resolution)  # fail fast on a bad fit

    def once():
        conv3d_reference(volume, conv_cfg, weights)

    return once, conv_cfg.macs(), volume.nbytes + weights.nbytes


def run_bench(resolutions, init_cfg=None, conv_cfg=None, mode="fixed-stride",
              stride=2, channel_count=4, reps=10, workers=1, seed=0):
    """Time probing forward+backward and conv forward at each resolution.

    `mode` picks how the convolution scales: "fixed-stride" (default)
    keeps the stride and lets the position count S grow with resolution,
    reproducing the cubic blow-up; "fixed-S" keeps S and stretches the
    stride, isolating kernel cost. The probing bank is re-initialized
    per resolution but its MAC count never changes. `workers` > 1 runs
    that many independent kernel replicas concurrently and reports
    effective per-kernel time, with kinds suffixed "@N". The bytes
    column counts input plus parameter bytes one pass reads.
    """
    if mode not in MODES:
        raise ValueError("mode must be one of %s, got %r"
                         % ("/".join(MODES), mode))
    resolutions = [int(r) for r in resolutions]
    if not resolutions:
        raise ValueError("need at least one resolution")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    init_cfg = init_cfg or InitConfig()
    conv_cfg = conv_cfg or ConvConfig()
    suffix = "@%d" % workers if workers > 1 else ""
    rows = []
    for resolution in resolutions:
        rng = np.random.default_rng((seed, resolution))
        if mode == "fixed-stride":
            if resolution < conv_cfg.kernel + stride:
                raise ValueError("resolution %d too small for kernel %d at "
                                 "stride %d" % (resolution, conv_cfg.kernel,
                                                stride))
            positions = (resolution - conv_cfg.kernel) // stride + 1
            cfg_r = dataclasses.replace(conv_cfg, positions=positions)
        else:
            cfg_r = conv_cfg
        for kind, setup in (("probing",
                             lambda: _probing_setup(init_cfg, resolution,
                                                    channel_count, rng)),
                            ("conv",
                             lambda: _conv_setup(cfg_r, resolution, rng))):
            builds = [setup() for _ in range(workers)]
            fns = [b[0] for b in builds]
            macs, touched = builds[0][1], builds[0][2]
            if workers == 1:
                mean_ms, std_ms, done = _time_callables(fns, reps)
            else:
                mean_ms, std_ms, done = _time_parallel(fns, reps, workers)
            rows.append(BenchRow(resolution=resolution, kind=kind + suffix,
                                 mean_ms=mean_ms, std_ms=std_ms, macs=macs,
                                 bytes=touched, reps=done))
    return BenchReport(rows=rows, machine=_machine_info())
