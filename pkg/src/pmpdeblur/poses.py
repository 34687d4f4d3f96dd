"""In-plane camera pose grid: rotations about the image center plus shifts.

A pose (theta, tx, ty) maps an image-plane point p to
R(theta) (p - c) + c + t with c the image center, so the induced
displacement at a point grows linearly with its distance from the center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Pose", "PoseGrid", "build_pose_grid", "active_set_update"]

MAX_POSES = 2500


@dataclass(frozen=True)
class Pose:
    theta: float  # radians, about image center
    tx: float  # pixels (column shift)
    ty: float  # pixels (row shift)


class PoseGrid:
    """Ordered, distinct set of poses; index order is the canonical index
    used by blur weight vectors. Bilinear interpolation is assumed for all
    warps built from the grid."""

    interp = "bilinear"

    def __init__(self, poses):
        poses = list(poses)
        if len(set((p.theta, p.tx, p.ty) for p in poses)) != len(poses):
            raise ValueError("poses must be distinct")
        self.poses = tuple(poses)
        self.thetas = np.array([p.theta for p in poses])
        self.txs = np.array([p.tx for p in poses])
        self.tys = np.array([p.ty for p in poses])

    def __len__(self):
        return len(self.poses)

    def identity_index(self):
        """Index of the pose closest to the identity transform."""
        d = self.thetas**2 + self.txs**2 + self.tys**2
        return int(np.argmin(d))

    def displacements(self, points_rc, center_rc):
        """Displacement (drow, dcol) of each pose at each point.

        points_rc: (N, 2) array of (row, col); center_rc: (row, col).
        Returns (n_poses, N, 2).
        """
        pts = np.atleast_2d(np.asarray(points_rc, dtype=float))
        cr, cc = center_rc
        rel_r = pts[:, 0] - cr
        rel_c = pts[:, 1] - cc
        cos = np.cos(self.thetas)[:, None]
        sin = np.sin(self.thetas)[:, None]
        # rotate (col, row) by theta, then translate
        new_c = cos * rel_c - sin * rel_r + cc + self.txs[:, None]
        new_r = sin * rel_c + cos * rel_r + cr + self.tys[:, None]
        out = np.stack([new_r - pts[:, 0], new_c - pts[:, 1]], axis=-1)
        return out

    def max_displacement(self, image_shape):
        """Largest displacement magnitude over the four image corners."""
        h, w = image_shape
        corners = [(0.0, 0.0), (0.0, w - 1.0), (h - 1.0, 0.0), (h - 1.0, w - 1.0)]
        center = ((h - 1) / 2.0, (w - 1) / 2.0)
        d = self.displacements(corners, center)
        return float(np.max(np.hypot(d[..., 0], d[..., 1])))


def _symmetric_range(limit, step):
    if limit <= 0:
        return np.array([0.0])
    n = int(np.floor(limit / step + 1e-9))
    return step * np.arange(-n, n + 1, dtype=float)


def build_pose_grid(max_rotation, rotation_step=None, max_shift=0.0,
                    shift_step=1.0, corner_radius=1.0, max_poses=MAX_POSES):
    """Full Cartesian grid of (theta, tx, ty) poses.

    ``corner_radius`` is the distance from the image center to its farthest
    corner; the default rotation step keeps the induced per-step
    displacement there at or below one pixel (arc length r * dtheta <= 1).
    """
    if shift_step <= 0:
        raise ValueError("shift_step must be positive")
    if max_rotation < 0 or max_shift < 0:
        raise ValueError("ranges must be nonnegative")
    if rotation_step is None:
        rotation_step = min(1.0 / max(corner_radius, 1.0), max_rotation or 1.0)
    if rotation_step <= 0:
        raise ValueError("rotation_step must be positive")

    thetas = _symmetric_range(max_rotation, rotation_step)
    shifts = _symmetric_range(max_shift, shift_step)
    count = len(thetas) * len(shifts) ** 2
    if count > max_poses:
        raise ValueError(
            f"pose grid of {count} poses exceeds the cap of {max_poses}; "
            "coarsen the steps or shrink the ranges")

    poses = [Pose(float(th), float(tx), float(ty))
             for th in thetas for ty in shifts for tx in shifts]
    return PoseGrid(poses)


def active_set_update(w, pose_grid, prune_fraction=0.02, resample_sigma=None,
                      rng_seed=0):
    """Prune low-weight poses and resample replacements near survivors.

    Poses with weight below ``prune_fraction * max(w)`` are dropped; the
    same number of new poses is drawn from Gaussians (std ``resample_sigma``
    per coordinate, default one typical grid step) centered on surviving
    poses chosen proportionally to their weight.  Duplicates are discarded,
    so the pose count never grows.  New poses start at weight zero.
    """
    w = np.asarray(w, dtype=float)
    if not 0 <= prune_fraction < 1:
        raise ValueError("prune_fraction must be in [0, 1)")
    if w.shape != (len(pose_grid),):
        raise ValueError("weight/pose length mismatch")
    wmax = w.max()
    if wmax <= 0:
        raise ValueError("all blur weights are zero")

    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)

    keep = w >= prune_fraction * wmax
    n_removed = int(np.count_nonzero(~keep))
    survivors = [p for p, k in zip(pose_grid.poses, keep) if k]
    new_w = list(w[keep])
    if n_removed == 0:
        return np.array(new_w), PoseGrid(survivors)

    if resample_sigma is None:
        # typical spacing of the surviving grid, per coordinate
        def _spacing(vals):
            u = np.unique(vals)
            return float(np.min(np.diff(u))) if len(u) > 1 else 1.0
        sig_theta = _spacing(pose_grid.thetas)
        sig_shift = max(_spacing(pose_grid.txs), _spacing(pose_grid.tys))
    else:
        sig_theta = sig_shift = float(resample_sigma)

    probs = w[keep] / w[keep].sum()
    existing = set((p.theta, p.tx, p.ty) for p in survivors)
    new_poses = list(survivors)
    for _ in range(n_removed):
        base = survivors[rng.choice(len(survivors), p=probs)]
        cand = Pose(base.theta + rng.normal(0.0, sig_theta),
                    base.tx + rng.normal(0.0, sig_shift),
                    base.ty + rng.normal(0.0, sig_shift))
        key = (cand.theta, cand.tx, cand.ty)
        if key in existing:
            continue
        existing.add(key)
        new_poses.append(cand)
        new_w.append(0.0)
    return np.array(new_w), PoseGrid(new_poses)
