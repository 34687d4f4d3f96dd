"""Command-line entry point: deblur, synth, eval, and penalty subcommands.

Exit codes: 0 success, 1 error (bad input or configuration), 2 finished
with warnings (e.g. inner solvers not fully converged).
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings

import numpy as np

from . import __version__
from .config import CONFIG_FIELDS, RunConfig, parse_config_file
from .eff import build_eff, local_kernel_norms, rho_map
from .evaluate import (MotionSpec, cumulative_histogram, kernel_correlation,
                       psnr, ssd_error_ratio, synthesize)
from .pipeline import load_image, nonblind_deconvolve, save_image, to_gray
from .poses import Pose, build_pose_grid
from .report import (penalty_curve_rows, read_poses_tsv, save_montage_png,
                     save_penalty_figure, save_rho_map, save_trace_csv,
                     site_kernels, write_csv, write_penalty_csv,
                     write_poses_tsv)
from .solver import run_multiscale

CUMHIST_EDGES = (1.5, 2.0, 2.5, 3.0, 4.0)


def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--dump-config", action="store_true",
                        help="print the effective configuration and exit")
    for key, (typ, default, doc) in CONFIG_FIELDS.items():
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, type=typ, default=None, help=doc,
                            dest=f"cfg_{key}")


def _build_config(args):
    cfg = parse_config_file(args.config) if args.config else RunConfig()
    for key in CONFIG_FIELDS:
        val = getattr(args, f"cfg_{key}", None)
        if val is not None:
            cfg.set(key, val)
    return cfg


def _artifact_path(out_path, suffix):
    base, _ = os.path.splitext(out_path)
    return base + suffix


def _write_blur_artifacts(out_path, result, image_shape, cfg):
    write_poses_tsv(_artifact_path(out_path, ".poses.tsv"),
                    result["pose_grid"], result["w"])
    kernels = site_kernels(result["pose_grid"], result["w"], image_shape,
                           cfg["montage_grid"],
                           result["eff"].kernel_size)
    save_montage_png(_artifact_path(out_path, ".kernels.png"), kernels)
    save_rho_map(_artifact_path(out_path, ".rho.png"), result["rho_map"],
                 _artifact_path(out_path, ".rho.csv"))


def cmd_deblur(args):
    cfg = _build_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.dump())
        return 0
    if not os.path.isfile(args.input):
        print(f"error: input image '{args.input}' is not readable",
              file=sys.stderr)
        return 1
    img = load_image(args.input)
    gray = to_gray(img)
    solver_cfg = cfg.solver_config(log=not args.quiet)

    trace = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = run_multiscale(gray, solver_cfg, trace=trace)
        sharp, ok = nonblind_deconvolve(img, result["w"], result["eff"],
                                        result["lambda"],
                                        reg_weight=cfg["reg_weight"])
    save_image(args.output, sharp)
    _write_blur_artifacts(args.output, result, gray.shape, cfg)
    if args.trace:
        save_trace_csv(args.trace, trace)
    warned = (not ok) or any(issubclass(c.category, UserWarning)
                             for c in caught)
    return 2 if warned else 0


def _load_motion(path, noise_sigma, seed):
    grid, weights = read_poses_tsv(path)
    entries = [(p, w) for p, w in zip(grid.poses, weights)]
    return MotionSpec(entries=entries, noise_sigma=noise_sigma, seed=seed)


def _grid_for_spec(spec, image_shape, cfg):
    max_rot = max([abs(p.theta) for p, _ in spec.entries] + [0.0])
    max_shift = max([max(abs(p.tx), abs(p.ty)) for p, _ in spec.entries]
                    + [0.0])
    h, w = image_shape
    radius = 0.5 * float(np.hypot(h - 1, w - 1))
    return build_pose_grid(max_rot, cfg.solver_config().rotation_step,
                           max_shift=np.ceil(max_shift),
                           shift_step=cfg["shift_step"],
                           corner_radius=radius)


def cmd_synth(args):
    cfg = _build_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.dump())
        return 0
    for path in (args.input, args.motion):
        if not os.path.isfile(path):
            print(f"error: '{path}' is not readable", file=sys.stderr)
            return 1
    img = load_image(args.input)
    gray = to_gray(img)
    try:
        spec = _load_motion(args.motion, args.noise_sigma, cfg["seed"])
        spec.validate()
        grid = _grid_for_spec(spec, gray.shape, cfg)
        eff = build_eff(grid, gray.shape, patch_size=cfg["patch_size"])
        if img.ndim == 3:
            planes = [synthesize(img[:, :, c], spec, eff)[0] for c in range(3)]
            blurry = np.stack(planes, axis=2)
            _, w_gt, gt_kernels = synthesize(gray, spec, eff)
        else:
            blurry, w_gt, gt_kernels = synthesize(img, spec, eff)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    save_image(args.output, blurry)
    write_poses_tsv(_artifact_path(args.output, ".poses.tsv"), grid, w_gt)
    kernels = site_kernels(grid, w_gt, gray.shape, cfg["montage_grid"],
                           eff.kernel_size)
    save_montage_png(_artifact_path(args.output, ".kernels.png"), kernels)
    return 0


def cmd_eval(args):
    cfg = _build_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.dump())
        return 0
    if not os.path.isdir(args.cases):
        print(f"error: case directory '{args.cases}' not found",
              file=sys.stderr)
        return 1
    case_names = sorted(
        d for d in os.listdir(args.cases)
        if os.path.isdir(os.path.join(args.cases, d)))
    if not case_names:
        print("error: no cases found", file=sys.stderr)
        return 1
    os.makedirs(args.outdir, exist_ok=True)

    solver_cfg = cfg.solver_config(log=not args.quiet)
    ratios = []
    report_lines = []
    warned = False
    for name in case_names:
        case_dir = os.path.join(args.cases, name)
        paths = {k: os.path.join(case_dir, k) for k in
                 ("sharp.png", "blurry.png", "poses.tsv")}
        missing = [p for p in paths.values() if not os.path.isfile(p)]
        if missing:
            print(f"error: case '{name}' is missing {missing[0]}",
                  file=sys.stderr)
            return 1
        sharp = to_gray(load_image(paths["sharp.png"]))
        blurry = to_gray(load_image(paths["blurry.png"]))
        gt_grid, w_gt_sparse = read_poses_tsv(paths["poses.tsv"])

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = run_multiscale(blurry, solver_cfg)
            eff = result["eff"]
            deblur_est, ok1 = nonblind_deconvolve(
                blurry, result["w"], eff, result["lambda"],
                reg_weight=cfg["reg_weight"])
            spec = MotionSpec(entries=list(zip(gt_grid.poses, w_gt_sparse)))
            _, w_gt, _ = synthesize(sharp, spec, eff)
            deblur_gt, ok2 = nonblind_deconvolve(
                blurry, w_gt, eff, result["lambda"],
                reg_weight=cfg["reg_weight"])
        warned = warned or not (ok1 and ok2) or bool(caught)

        ratio = ssd_error_ratio(deblur_est, deblur_gt, sharp,
                                border_crop=eff.kernel_size)
        corr = kernel_correlation(result["w"], w_gt)
        ratios.append((name, ratio))
        report_lines += [f"{name}.ratio={ratio:.6f}",
                         f"{name}.kernel_correlation={corr:.6f}",
                         f"{name}.psnr_blurry={psnr(blurry, sharp):.4f}",
                         f"{name}.psnr_deblurred={psnr(deblur_est, sharp):.4f}"]

    write_csv(os.path.join(args.outdir, "ratios.csv"), ["case", "ratio"],
              ratios)
    hist = cumulative_histogram([r for _, r in ratios], CUMHIST_EDGES)
    write_csv(os.path.join(args.outdir, "cumhist.csv"), ["edge", "fraction"],
              hist)
    with open(os.path.join(args.outdir, "report.txt"), "w") as fh:
        fh.write("\n".join(report_lines) + "\n")
    return 2 if warned else 0


def _parse_range(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError("expected start:step:stop")
    start, step, stop = map(float, parts)
    n = int(np.floor((stop - start) / step + 0.5)) + 1
    return start + step * np.arange(n)


def cmd_penalty(args):
    try:
        rhos = [float(t) for t in args.rho.split(",") if t]
        z = _parse_range(args.z)
        if any(r <= 0 for r in rhos) or np.any(z < 0):
            raise ValueError("rho must be positive and z nonnegative")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    rows = penalty_curve_rows(z, rhos)
    write_penalty_csv(args.output, rows)
    save_penalty_figure(_artifact_path(args.output, ".png"), z, rhos)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pmpdeblur",
        description="Blind non-uniform camera-shake deblurring")
    parser.add_argument("--version", action="version",
                        version=f"pmpdeblur {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("deblur", help="estimate blur and recover the image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--trace", help="write the per-iteration trace CSV here")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("synth", help="synthesize non-uniform blur")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--motion", required=True,
                   help="ground-truth motion file (poses.tsv format)")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="run the error-ratio benchmark harness")
    p.add_argument("--cases", required=True,
                   help="directory of case subdirectories "
                        "(sharp.png, blurry.png, poses.tsv)")
    p.add_argument("--outdir", required=True)
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("penalty", help="export penalty-shape sample curves")
    p.add_argument("--rho", required=True, help="comma-separated rho values")
    p.add_argument("--z", required=True, help="z range as start:step:stop")
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_penalty)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
