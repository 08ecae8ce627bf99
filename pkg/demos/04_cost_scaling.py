"""Why probing cost barely notices the grid resolution.

A probing layer does C * N * T multiply-accumulates per volume no
matter how fine the grid is: the filters read a fixed number of points.
A dense 3D convolution sweeps S^3 output sites, so its work grows
cubically. This script times both kernels at increasing resolutions on
this machine and prints the measured wall-clock scaling next to the
analytic MAC counts.
"""

from fieldprobe import run_bench

RESOLUTIONS = [16, 32, 64]

report = run_bench(RESOLUTIONS)
print(report.machine)
print()
print("  kind      res      MACs/volume      mean ms     read MB")
for row in report.rows:
    print("  %-8s %4d  %14s  %10.3f  %10.2f"
          % (row.kind, row.resolution, format(row.macs, ","),
             row.mean_ms, row.bytes / 1e6))

probing = report.time_ratio("probing", RESOLUTIONS[-1], RESOLUTIONS[0])
conv = report.time_ratio("conv", RESOLUTIONS[-1], RESOLUTIONS[0])
span = RESOLUTIONS[-1] // RESOLUTIONS[0]
print("\ngoing %dx in resolution (%d -> %d):"
      % (span, RESOLUTIONS[0], RESOLUTIONS[-1]))
print("  probing wall time grew %.1fx (field reads get sparser in cache,"
      " work stays constant)" % probing)
print("  conv wall time grew %.1fx (output sites grow with the volume)"
      % conv)
macs_p = report.row(RESOLUTIONS[0], "probing").macs
macs_c = report.row(RESOLUTIONS[0], "conv").macs
print("  MACs per volume: probing %s vs conv %s (%.2f%%)"
      % (format(macs_p, ","), format(macs_c, ","), 100.0 * macs_p / macs_c))
