"""Command-line entry points.

One executable, `fieldprobe`, with a subcommand per workflow step:
shape-to-field conversion, synthetic dataset generation, training,
evaluation, feature export, fine-tuning, gradient auditing, and the
probing-vs-convolution benchmark. Every command is a thin shell over
the library; anything scriptable here is equally scriptable in Python.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .bench import ConvConfig, run_bench
from .errors import FormatError, ParseError, TrainingDiverged
from .field import save_field
from .ingest import DEFAULT_SAMPLES_PER_AREA, load_shape, normalize, voxelize
from .probing import InitConfig
from .synthetic import SyntheticSpec, generate_synthetic
from .trainer import (
    CHANNEL_SETS,
    TrainConfig,
    build_field,
    evaluate_checkpoint,
    extract_features,
    fine_tune,
    gradient_check_report,
    sample_seed,
    train,
)

GRADCHECK_TOLERANCE = 1e-4


def _cmd_voxelize(args):
    shape = load_shape(args.source)
    shape = normalize(shape, args.res)
    seed = sample_seed(os.path.basename(args.source))
    occ = voxelize(shape, args.res, args.samples_per_area, seed=seed)
    field = build_field(occ, args.channels)
    save_field(field, args.out)
    print("wrote %s: %d^3, %d channel(s), %d occupied voxels"
          % (args.out, args.res, field.values.shape[0],
             int(occ.bits.sum())))
    return 0


def _cmd_gen_synthetic(args):
    spec = SyntheticSpec.from_file(args.spec)
    train_manifest, test_manifest = generate_synthetic(spec, args.out)
    print("train manifest: %s" % train_manifest)
    print("test manifest:  %s" % test_manifest)
    return 0


def _cmd_train(args):
    cfg = TrainConfig.from_file(args.config)
    if args.freeze_probing:
        cfg = dataclasses.replace(cfg, freeze_probing=True)
    result = train(cfg, resume=args.resume)
    print("checkpoint: %s" % result.checkpoint_path)
    print("metrics:    %s" % result.metrics_path)
    if np.isfinite(result.test_accuracy):
        print("test accuracy: %.6f" % result.test_accuracy)
    return 0


def _cmd_eval(args):
    result = evaluate_checkpoint(args.ckpt, args.manifest,
                                 perturb=args.perturb,
                                 cache_dir=args.cache_dir)
    print("accuracy: %.6f" % result.accuracy)
    print("confusion (rows true, cols predicted):")
    for row in result.confusion:
        print("  " + " ".join("%5d" % v for v in row))
    return 0


def _cmd_extract_features(args):
    extract_features(args.ckpt, args.manifest, args.out,
                     cache_dir=args.cache_dir)
    print("wrote %s" % args.out)
    return 0


def _cmd_finetune(args):
    cfg = TrainConfig.from_file(args.config)
    trainable = tuple(part for part in args.trainable.split(",") if part)
    result = fine_tune(args.ckpt, cfg, trainable=trainable)
    print("checkpoint: %s" % result.checkpoint_path)
    if np.isfinite(result.test_accuracy):
        print("test accuracy: %.6f" % result.test_accuracy)
    return 0


def _cmd_gradcheck(args):
    report = gradient_check_report(layer=args.layer, seed=args.seed)
    worst = 0.0
    for name in sorted(report):
        error = report[name]
        worst = max(worst, error)
        status = "ok" if error <= GRADCHECK_TOLERANCE else "FAIL"
        print("%-10s max rel err %.3e  %s" % (name, error, status))
    if worst > GRADCHECK_TOLERANCE:
        print("worst error %.3e exceeds %.0e" % (worst, GRADCHECK_TOLERANCE),
              file=sys.stderr)
        return 1
    return 0


def _cmd_bench(args):
    resolutions = [int(part) for part in args.resolutions.split(",") if part]
    init_cfg = InitConfig(grid_divisions=args.grid_divisions,
                          filters_per_cell=args.filters_per_cell,
                          points_per_filter=args.points_per_filter)
    conv_cfg = ConvConfig(kernel=args.kernel, channels_out=args.conv_channels,
                          positions=args.positions)
    report = run_bench(resolutions, init_cfg=init_cfg, conv_cfg=conv_cfg,
                       mode=args.mode, stride=args.stride,
                       channel_count=args.channel_count, reps=args.reps,
                       workers=args.workers)
    for row in report.rows:
        print("%4d %-10s %10.3f ms (+/- %.3f)  %12d MACs" %
              (row.resolution, row.kind, row.mean_ms, row.std_ms, row.macs))
    if args.out:
        report.to_csv(args.out)
        print("wrote %s" % args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fieldprobe",
        description="Field-probing networks for 3D shape classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize",
                       help="convert one shape file into a field file")
    p.add_argument("--in", dest="source", required=True, metavar="SHAPE",
                   help="input .off mesh or .xyz point cloud")
    p.add_argument("--res", type=int, required=True,
                   help="grid resolution R (field is R^3)")
    p.add_argument("--out", required=True, help="output field (.fpf) path")
    p.add_argument("--channels", default="distance+normals",
                   choices=sorted(CHANNEL_SETS))
    p.add_argument("--samples-per-area", type=float,
                   default=DEFAULT_SAMPLES_PER_AREA)
    p.set_defaults(func=_cmd_voxelize)

    p = sub.add_parser("gen-synthetic",
                       help="generate the synthetic five-primitive dataset")
    p.add_argument("--spec", required=True,
                   help="key=value spec file (classes, counts, jitter, seed)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("train", help="train a classifier from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="checkpoint to continue from")
    p.add_argument("--freeze-probing", action="store_true",
                   help="keep probing locations and weights fixed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--perturb", default="", metavar="MODES",
                   help="perturbation modes, e.g. R15+T01+S")
    p.add_argument("--cache-dir", default="")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("extract-features",
                       help="write last-hidden-layer features as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache-dir", default="")
    p.set_defaults(func=_cmd_extract_features)

    p = sub.add_parser("finetune",
                       help="train on a new task starting from a checkpoint")
    p.add_argument("--ckpt", required=True, help="donor checkpoint")
    p.add_argument("--config", required=True, help="config for the new task")
    p.add_argument("--trainable", default="head",
                   help="comma list of groups to update: head,probing")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of analytic gradients")
    p.add_argument("--layer", default=None,
                   help="audit one recipe (fc, bn, dropout, composed, "
                        "probing); default audits all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("bench",
                       help="time probing vs dense 3D convolution")
    p.add_argument("--resolutions", default="16,32,64",
                   help="comma list of grid resolutions")
    p.add_argument("--out", default="", help="write the report CSV here")
    p.add_argument("--mode", default="fixed-stride",
                   choices=["fixed-stride", "fixed-S"])
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--grid-divisions", type=int, default=4)
    p.add_argument("--filters-per-cell", type=int, default=16)
    p.add_argument("--points-per-filter", type=int, default=8)
    p.add_argument("--channel-count", type=int, default=4)
    p.add_argument("--kernel", type=int, default=6)
    p.add_argument("--conv-channels", type=int, default=48)
    p.add_argument("--positions", type=int, default=12,
                   help="sliding positions per axis (fixed-S mode)")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, FormatError, TrainingDiverged, ValueError,
            OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
