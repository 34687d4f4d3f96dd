"""Delimited outputs and rendered figures for the deblurring artifacts.

All figure rendering goes through matplotlib's Agg backend so runs are
headless and deterministic; every figure has a delimited (CSV/TSV) sibling
carrying the underlying numbers.
"""

from __future__ import annotations

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .penalty import eval_h, h_gradient  # noqa: E402

__all__ = [
    "write_poses_tsv",
    "read_poses_tsv",
    "write_csv",
    "site_kernels",
    "kernel_montage",
    "save_montage_png",
    "save_rho_map",
    "penalty_curve_rows",
    "save_penalty_figure",
]


def _fmt(v):
    """IEEE-754 round-trip decimal formatting."""
    return repr(float(v))


def write_poses_tsv(path, pose_grid, w):
    with open(path, "w") as fh:
        fh.write("theta_rad\ttx_px\tty_px\tweight\n")
        for pose, wt in zip(pose_grid.poses, w):
            fh.write(f"{_fmt(pose.theta)}\t{_fmt(pose.tx)}\t"
                     f"{_fmt(pose.ty)}\t{_fmt(wt)}\n")


def read_poses_tsv(path):
    from .poses import Pose, PoseGrid
    poses, weights = [], []
    with open(path) as fh:
        header = fh.readline()
        for line in fh:
            th, tx, ty, wt = line.split("\t")
            poses.append(Pose(float(th), float(tx), float(ty)))
            weights.append(float(wt))
    return PoseGrid(poses), np.array(weights)


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def site_kernels(pose_grid, w, image_shape, grid_side, kernel_size):
    """Exact local blur kernels at a grid_side x grid_side array of sample
    pixel sites: each is the bilinear footprint sum of all pose
    displacements at that site."""
    h, wid = image_shape
    center = ((h - 1) / 2.0, (wid - 1) / 2.0)
    rows = np.linspace(0, h - 1, grid_side + 2)[1:-1]
    cols = np.linspace(0, wid - 1, grid_side + 2)[1:-1]
    sites = np.array([(r, c) for r in rows for c in cols])
    disp = pose_grid.displacements(sites, center)  # (J, S, 2)
    half = kernel_size // 2
    kernels = np.zeros((len(sites), kernel_size, kernel_size))
    for j in range(len(pose_grid)):
        if w[j] <= 0:
            continue
        for s in range(len(sites)):
            dy, dx = disp[j, s]
            ry = float(np.clip(dy + half, 0.0, kernel_size - 1 - 1e-9))
            rx = float(np.clip(dx + half, 0.0, kernel_size - 1 - 1e-9))
            y0, x0 = int(ry), int(rx)
            fy, fx = ry - y0, rx - x0
            for oy, wy in ((0, 1 - fy), (1, fy)):
                for ox, wx in ((0, 1 - fx), (1, fx)):
                    if wy * wx > 0:
                        kernels[s, y0 + oy, x0 + ox] += w[j] * wy * wx
    return kernels.reshape(grid_side, grid_side, kernel_size, kernel_size)


def kernel_montage(kernels, sep=1):
    """Single array tiling max-normalized kernels with separator lines."""
    g0, g1, kh, kw = kernels.shape
    out = np.zeros((g0 * (kh + sep) + sep, g1 * (kw + sep) + sep))
    for i in range(g0):
        for j in range(g1):
            k = kernels[i, j]
            peak = k.max()
            if peak > 0:
                k = k / peak
            r0 = sep + i * (kh + sep)
            c0 = sep + j * (kw + sep)
            out[r0:r0 + kh, c0:c0 + kw] = k
    return out


def save_montage_png(path, kernels):
    plt.imsave(path, kernel_montage(kernels), cmap="gray", vmin=0.0, vmax=1.0)


def save_rho_map(path_png, rho, path_csv=None):
    """Normalized rho-map PNG plus optional raw-value CSV sibling."""
    rho = np.asarray(rho, dtype=float)
    lo, hi = rho.min(), rho.max()
    norm = (rho - lo) / (hi - lo) if hi > lo else np.zeros_like(rho)
    plt.imsave(path_png, norm, cmap="viridis", vmin=0.0, vmax=1.0)
    if path_csv is not None:
        with open(path_csv, "w") as fh:
            fh.write("row,col,rho\n")
            for r in range(rho.shape[0]):
                for c in range(rho.shape[1]):
                    fh.write(f"{r},{c},{_fmt(rho[r, c])}\n")


def penalty_curve_rows(z_values, rho_values):
    """(z, rho, h, dh) sample rows for penalty-shape export."""
    rows = []
    for rho in rho_values:
        h = eval_h(z_values, rho)
        dh = h_gradient(z_values, rho)
        for z, hv, dv in zip(z_values, h, dh):
            rows.append((float(z), float(rho), float(hv), float(dv)))
    return rows


def write_penalty_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("z,rho,h,dh\n")
        for z, rho, h, dh in rows:
            fh.write(f"{_fmt(z)},{_fmt(rho)},{_fmt(h)},{_fmt(dh)}\n")


def save_penalty_figure(path, z_values, rho_values):
    fig, ax = plt.subplots(figsize=(5, 4))
    for rho in rho_values:
        h = eval_h(z_values, rho)
        ax.plot(z_values, h - h[0], label=f"rho={rho:g}")
    ax.set_xlabel("gradient magnitude z")
    ax.set_ylabel("penalty h(z) - h(0)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_trace_csv(path, trace):
    write_csv(path, ["level", "iter", "bound", "lambda", "w_change"],
              [(t["level"], t["iter"], float(t["bound"]),
                float(t["lambda"]), float(t["w_change"])) for t in trace])
