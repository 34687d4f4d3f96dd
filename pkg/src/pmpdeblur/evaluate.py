"""Ground-truth blur synthesis and quantitative evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .poses import Pose, PoseGrid

__all__ = [
    "MotionSpec",
    "EvalReport",
    "warp_image",
    "synthesize",
    "psnr",
    "ssd_error_ratio",
    "kernel_correlation",
    "cumulative_histogram",
]


@dataclass
class MotionSpec:
    """Ground-truth camera motion: (pose, weight) pairs plus sensor noise."""
    entries: list  # [(Pose, weight), ...]
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        weights = np.array([wt for _, wt in self.entries], dtype=float)
        if np.any(weights < 0):
            raise ValueError("motion weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-6:
            raise ValueError(
                f"motion weights sum to {weights.sum():.8f}, expected 1")
        return weights


@dataclass
class EvalReport:
    ssd_error_ratio: float
    kernel_correlation: float
    psnr_blurry: float
    psnr_deblurred: float

    def as_lines(self):
        return [f"ssd_error_ratio={self.ssd_error_ratio:.6f}",
                f"kernel_correlation={self.kernel_correlation:.6f}",
                f"psnr_blurry={self.psnr_blurry:.4f}",
                f"psnr_deblurred={self.psnr_deblurred:.4f}"]


def warp_image(img, pose, center=None):
    """Apply a pose to an image: content at p moves to R(p-c)+c+t.

    Inverse bilinear warp with replicate boundary, so a pure translation
    matches convolution with the bilinear footprint of the shift exactly.
    """
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    if center is None:
        center = ((h - 1) / 2.0, (w - 1) / 2.0)
    cr, cc = center
    rr, cc_idx = np.meshgrid(np.arange(h, dtype=float),
                             np.arange(w, dtype=float), indexing="ij")
    # inverse transform of the output coordinates
    ur = rr - pose.ty - cr
    uc = cc_idx - pose.tx - cc
    cos, sin = np.cos(-pose.theta), np.sin(-pose.theta)
    src_c = cos * uc - sin * ur + cc
    src_r = sin * uc + cos * ur + cr
    return map_coordinates(img, [src_r, src_c], order=1, mode="nearest")


def snap_to_grid(spec, pose_grid):
    """Map motion-spec entries onto grid indices; errors if any pose is
    farther than half a grid step from its nearest grid pose."""
    def _step(vals):
        u = np.unique(vals)
        return float(np.min(np.diff(u))) if len(u) > 1 else np.inf

    tol_theta = _step(pose_grid.thetas) / 2.0
    tol_shift = max(_step(pose_grid.txs), _step(pose_grid.tys)) / 2.0
    w_full = np.zeros(len(pose_grid))
    for pose, wt in spec.entries:
        d_theta = np.abs(pose_grid.thetas - pose.theta)
        d_shift = np.hypot(pose_grid.txs - pose.tx, pose_grid.tys - pose.ty)
        idx = int(np.argmin(d_theta * 1e3 + d_shift))
        if d_theta[idx] > tol_theta or d_shift[idx] > tol_shift:
            raise ValueError(
                f"pose (theta={pose.theta:.4g}, tx={pose.tx:.4g}, "
                f"ty={pose.ty:.4g}) lies off the declared pose grid")
        w_full[idx] += wt
    return w_full


def synthesize(sharp, spec, eff):
    """Forward model: weighted sum of pose-warped sharp images plus noise.

    Returns (blurry, w_gt, gt_kernels) where w_gt is the motion mapped onto
    the eff pose grid and gt_kernels the per-patch local kernels A_r w_gt.
    """
    sharp = np.asarray(sharp, dtype=float)
    weights = spec.validate()
    w_gt = snap_to_grid(spec, eff.pose_grid)

    blurry = np.zeros_like(sharp)
    for (pose, _), wt in zip(spec.entries, weights):
        if wt > 0:
            blurry += wt * warp_image(sharp, pose)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        blurry = blurry + rng.normal(0.0, spec.noise_sigma, sharp.shape)

    K = eff.kernel_size
    gt_kernels = [(A @ w_gt).reshape(K, K) for A in eff.basis]
    return blurry, w_gt, gt_kernels


def psnr(img, reference, peak=1.0):
    """Peak signal-to-noise ratio in dB."""
    img = np.asarray(img, dtype=float)
    reference = np.asarray(reference, dtype=float)
    mse = float(np.mean((img - reference) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak**2 / mse)


def _aligned_ssd(est, sharp, radius, crop):
    """SSD after the best integer translation within +/- radius px,
    excluding a crop-px border from both images."""
    h, w = sharp.shape[:2]
    best = np.inf
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            r0, r1 = crop + max(dy, 0), h - crop + min(dy, 0)
            c0, c1 = crop + max(dx, 0), w - crop + min(dx, 0)
            if r1 <= r0 or c1 <= c0:
                continue
            a = est[r0 - dy:r1 - dy, c0 - dx:c1 - dx]
            b = sharp[r0:r1, c0:c1]
            ssd = float(np.sum((a - b) ** 2)) / a.size
            best = min(best, ssd)
    return best


def ssd_error_ratio(deblur_est, deblur_gt, sharp, align_radius=2,
                    border_crop=0):
    """SSD(est, sharp) / SSD(gt-kernel deconvolution, sharp), each after a
    global +/- align_radius px shift search and border crop."""
    sharp = np.asarray(sharp, dtype=float)
    num = _aligned_ssd(np.asarray(deblur_est, dtype=float), sharp,
                       align_radius, border_crop)
    den = _aligned_ssd(np.asarray(deblur_gt, dtype=float), sharp,
                       align_radius, border_crop)
    if den == 0:
        raise ValueError("ground-truth deconvolution matches sharp exactly; "
                         "SSD ratio undefined")
    return num / den


def kernel_correlation(w_est, w_gt):
    """Normalized cross-correlation of two weight vectors on one grid."""
    a = np.asarray(w_est, dtype=float)
    b = np.asarray(w_gt, dtype=float)
    if a.shape != b.shape:
        raise ValueError("weight vectors must share a pose grid")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero weight vector")
    return float(np.dot(a, b) / (na * nb))


def cumulative_histogram(ratios, bin_edges):
    """Fraction of ratios at or below each edge: [(edge, fraction), ...]."""
    ratios = np.asarray(list(ratios), dtype=float)
    if ratios.size == 0:
        raise ValueError("no error ratios given")
    return [(float(e), float(np.mean(ratios <= e))) for e in bin_edges]
