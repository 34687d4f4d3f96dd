"""Patchwise (efficient filter flow) realization of the pose-weighted blur.

The blur operator H = sum_j w_j P_j is approximated by overlapping patches:
within each patch the warp is treated as a single local convolution whose
kernel is a weighted combination of per-pose basis kernels.  Each basis
kernel is the bilinear footprint of the patch-center displacement induced
by that pose, so every column has at most four nonzeros and unit mass.

Images are edge-replicated with a raised-cosine taper before blurring and
cropped back afterwards; the adjoint folds the padding back exactly, so
apply_blur / apply_blur_adjoint form a true adjoint pair.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.signal import fftconvolve

__all__ = [
    "EffDecomposition",
    "build_eff",
    "apply_blur",
    "apply_blur_adjoint",
    "apply_D_transpose",
    "local_kernel_norms",
    "rho_map",
]


def _bilinear_splat(dy, dx, size):
    """K x K kernel holding the bilinear footprint of offset (dy, dx)."""
    c = size // 2
    k = np.zeros((size, size))
    ry, rx = dy + c, dx + c
    y0, x0 = int(np.floor(ry)), int(np.floor(rx))
    fy, fx = ry - y0, rx - x0
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            wgt = wy * wx
            if wgt == 0.0:
                continue
            yy, xx = y0 + oy, x0 + ox
            if not (0 <= yy < size and 0 <= xx < size):
                raise ValueError("offset outside kernel support")
            k[yy, xx] += wgt
    return k


def _taper_profile(width):
    """Raised-cosine weights for pad pixels, 1 at the image edge side."""
    d = np.arange(1, width + 1, dtype=float)
    return 0.5 * (1.0 + np.cos(np.pi * d / (width + 1)))


class EffDecomposition:
    """Overlapping-patch windows plus per-patch pose basis kernels.

    Attributes
    ----------
    pose_grid : PoseGrid used to build the basis.
    kernel_size : odd local-kernel side length K.
    pad : pad width added on every image side.
    windows : list of 2-D arrays (one per patch, on the padded canvas
        restricted to the patch slice); they sum to one at every canvas
        pixel.
    basis : list of sparse (K*K, n_poses) matrices A_r.
    """

    def __init__(self, pose_grid, image_shape, kernel_size, pad,
                 patch_slices, windows, basis, patch_centers):
        self.pose_grid = pose_grid
        self.image_shape = tuple(image_shape)
        self.kernel_size = int(kernel_size)
        self.pad = int(pad)
        self.patch_slices = patch_slices
        self.windows = windows
        self.basis = basis
        self.patch_centers = patch_centers
        h, w = self.image_shape
        self.canvas_shape = (h + 2 * pad, w + 2 * pad)
        self._pad_src, self._pad_weight = self._build_pad_maps()
        self._image_windows = self._crop_windows_to_image()

    # -- padding as an explicit linear map (needed for the exact adjoint) --

    def _build_pad_maps(self):
        h, w = self.image_shape
        p = self.pad
        ii = np.clip(np.arange(-p, h + p), 0, h - 1)
        jj = np.clip(np.arange(-p, w + p), 0, w - 1)
        src_r, src_c = np.meshgrid(ii, jj, indexing="ij")
        prof = _taper_profile(p)
        line_r = np.ones(h + 2 * p)
        line_r[:p] = prof[::-1]
        line_r[h + p:] = prof
        line_c = np.ones(w + 2 * p)
        line_c[:p] = prof[::-1]
        line_c[w + p:] = prof
        weight = np.outer(line_r, line_c)
        return (src_r, src_c), weight

    def pad_image(self, x):
        src_r, src_c = self._pad_src
        return self._pad_weight * x[src_r, src_c]

    def pad_adjoint(self, u):
        src_r, src_c = self._pad_src
        out = np.zeros(self.image_shape)
        np.add.at(out, (src_r, src_c), self._pad_weight * u)
        return out

    def _crop_windows_to_image(self):
        """Windows restricted to the original image area, renormalized view.

        On the canvas the windows already sum to one, so the restriction
        (dropping canvas pixels outside the image) still sums to one at
        every image pixel.
        """
        h, w = self.image_shape
        p = self.pad
        out = []
        for (rs, cs), win in zip(self.patch_slices, self.windows):
            r0 = max(rs.start, p) - rs.start
            r1 = min(rs.stop, p + h) - rs.start
            c0 = max(cs.start, p) - cs.start
            c1 = min(cs.stop, p + w) - cs.start
            if r0 >= r1 or c0 >= c1:
                out.append(None)
                continue
            img_rs = slice(rs.start + r0 - p, rs.start + r1 - p)
            img_cs = slice(cs.start + c0 - p, cs.start + c1 - p)
            out.append((img_rs, img_cs, win[r0:r1, c0:c1]))
        return out


def _partition_windows(canvas_shape, patch_size, overlap):
    """Overlapping patch slices and a partition-of-unity window per patch."""
    step = patch_size - overlap
    if step <= 0:
        raise ValueError("overlap must be smaller than patch_size")

    def _starts(total):
        if total <= patch_size:
            return [0]
        s = list(range(0, total - patch_size, step))
        s.append(total - patch_size)
        return s

    ch, cw = canvas_shape

    def _profiles(total):
        starts = _starts(total)
        profs = []
        for k, s0 in enumerate(starts):
            n = min(patch_size, total)
            t = np.linspace(0.0, 1.0, n)
            prof = np.minimum(t, 1.0 - t) * 2.0 + 1e-3  # triangular, never 0
            if k == 0:
                prof[: n // 2] = prof[n // 2]
            if k == len(starts) - 1:
                prof[n // 2:] = prof[n // 2]
            profs.append((s0, prof))
        return profs

    rows = _profiles(ch)
    cols = _profiles(cw)
    slices, raws = [], []
    total = np.zeros(canvas_shape)
    for r0, pr in rows:
        for c0, pc in cols:
            rs = slice(r0, r0 + len(pr))
            cs = slice(c0, c0 + len(pc))
            win = np.outer(pr, pc)
            slices.append((rs, cs))
            raws.append(win)
            total[rs, cs] += win
    windows = []
    for (rs, cs), win in zip(slices, raws):
        windows.append(win / total[rs, cs])
    return slices, windows


def build_eff(pose_grid, image_shape, patch_size=32, overlap=None,
              kernel_size=None):
    """Construct the patch decomposition and per-patch pose bases.

    ``kernel_size`` defaults to the smallest odd size containing the
    bilinear footprint of every pose at every patch center; an explicit
    value that is too small raises an error naming the offending pose.
    """
    h, w = image_shape
    if overlap is None:
        overlap = patch_size // 2
    center = ((h - 1) / 2.0, (w - 1) / 2.0)

    # provisional pad from the worst-case corner displacement
    max_disp = pose_grid.max_displacement(image_shape)
    if kernel_size is None:
        kernel_size = 2 * (int(np.ceil(max_disp)) + 1) + 1
    if kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd")
    pad = kernel_size

    canvas_shape = (h + 2 * pad, w + 2 * pad)
    patch_size = min(patch_size, min(canvas_shape))
    overlap = min(overlap, patch_size - 1)
    slices, windows = _partition_windows(canvas_shape, patch_size, overlap)

    centers = []
    for rs, cs in slices:
        centers.append(((rs.start + rs.stop - 1) / 2.0 - pad,
                        (cs.start + cs.stop - 1) / 2.0 - pad))
    centers = np.array(centers)

    disp = pose_grid.displacements(centers, center)  # (J, R, 2)
    half = kernel_size // 2
    basis = []
    k2 = kernel_size * kernel_size
    for r in range(len(slices)):
        cols_idx, rows_idx, vals = [], [], []
        for j in range(len(pose_grid)):
            dy, dx = disp[j, r]
            if max(abs(dy), abs(dx)) > half - 1 + 1e-9:
                p = pose_grid.poses[j]
                raise ValueError(
                    f"kernel_size {kernel_size} cannot contain pose "
                    f"(theta={p.theta:.4g}, tx={p.tx:.4g}, ty={p.ty:.4g}) "
                    f"with displacement ({dy:.2f}, {dx:.2f}) at patch {r}")
            k = _bilinear_splat(dy, dx, kernel_size)
            nz = np.nonzero(k.ravel())[0]
            rows_idx.extend(nz)
            cols_idx.extend([j] * len(nz))
            vals.extend(k.ravel()[nz])
        A = sp.csr_matrix((vals, (rows_idx, cols_idx)),
                          shape=(k2, len(pose_grid)))
        basis.append(A)

    return EffDecomposition(pose_grid, image_shape, kernel_size, pad,
                            slices, windows, basis, centers)


def _check_image(x, eff):
    x = np.asarray(x, dtype=float)
    if x.shape != eff.image_shape:
        raise ValueError(f"image shape {x.shape} != {eff.image_shape}")
    return x


def _check_weights(w, eff):
    w = np.asarray(w, dtype=float)
    if w.shape != (len(eff.pose_grid),):
        raise ValueError("weight vector length does not match pose grid")
    return w


def apply_blur(x, w, eff):
    """H x: pad, blur each windowed patch with its local kernel, crop."""
    x = _check_image(x, eff)
    w = _check_weights(w, eff)
    padded = eff.pad_image(x)
    K = eff.kernel_size
    half = K // 2
    ch, cw = eff.canvas_shape
    work = np.zeros((ch + 2 * half, cw + 2 * half))
    for (rs, cs), win, A in zip(eff.patch_slices, eff.windows, eff.basis):
        u = win * padded[rs, cs]
        k = (A @ w).reshape(K, K)
        conv = fftconvolve(u, k, mode="full")
        work[rs.start: rs.stop + 2 * half,
             cs.start: cs.stop + 2 * half] += conv
    p = eff.pad + half
    h, w_ = eff.image_shape
    return work[p: p + h, p: p + w_]


def apply_blur_adjoint(r, w, eff):
    """H^T r, the exact adjoint of apply_blur at the same weights."""
    r = _check_image(r, eff)
    w = _check_weights(w, eff)
    K = eff.kernel_size
    half = K // 2
    ch, cw = eff.canvas_shape
    work = np.zeros((ch + 2 * half, cw + 2 * half))
    p = eff.pad + half
    h, w_ = eff.image_shape
    work[p: p + h, p: p + w_] = r
    out_padded = np.zeros(eff.canvas_shape)
    for (rs, cs), win, A in zip(eff.patch_slices, eff.windows, eff.basis):
        k = (A @ w).reshape(K, K)
        region = work[rs.start: rs.stop + 2 * half,
                      cs.start: cs.stop + 2 * half]
        v = fftconvolve(region, k[::-1, ::-1], mode="valid")
        out_padded[rs, cs] += win * v
    return eff.pad_adjoint(out_padded)


def apply_D_transpose(r, x, eff):
    """Vector of inner products <P_j x, r> under the patchwise blur model.

    Exactly the transpose of w -> apply_blur(x, w, eff) applied to r, so
    the blur-update gradient is consistent with the forward operator.
    """
    r = _check_image(r, eff)
    x = _check_image(x, eff)
    padded = eff.pad_image(x)
    K = eff.kernel_size
    half = K // 2
    ch, cw = eff.canvas_shape
    work = np.zeros((ch + 2 * half, cw + 2 * half))
    p = eff.pad + half
    h, w_ = eff.image_shape
    work[p: p + h, p: p + w_] = r
    out = np.zeros(len(eff.pose_grid))
    for (rs, cs), win, A in zip(eff.patch_slices, eff.windows, eff.basis):
        u = win * padded[rs, cs]
        region = work[rs.start: rs.stop + 2 * half,
                      cs.start: cs.stop + 2 * half]
        corr = fftconvolve(region, u[::-1, ::-1], mode="valid")
        out += A.T @ corr.ravel()
    return out


def build_dense_D(x, eff):
    """Dense matrix of transformed images: row j equals the flattened
    apply_blur(x, e_j, eff).

    Each basis column has at most four nonzeros (a bilinear footprint), so
    every row is a sum of shifted copies of the windowed patches; this is
    much cheaper than one convolution per pose and lets the blur update run
    on plain matrix-vector products.
    """
    x = _check_image(x, eff)
    padded = eff.pad_image(x)
    K = eff.kernel_size
    half = K // 2
    pad = eff.pad
    h, w_ = eff.image_shape
    D = np.zeros((len(eff.pose_grid), h, w_))
    for (rs, cs), win, A in zip(eff.patch_slices, eff.windows, eff.basis):
        u = win * padded[rs, cs]
        ph, pw = u.shape
        Ac = A.tocoo()
        for idx, j, val in zip(Ac.row, Ac.col, Ac.data):
            ky, kx = divmod(int(idx), K)
            r0 = rs.start + ky - pad - half
            c0 = cs.start + kx - pad - half
            rr0, rr1 = max(r0, 0), min(r0 + ph, h)
            cc0, cc1 = max(c0, 0), min(c0 + pw, w_)
            if rr0 < rr1 and cc0 < cc1:
                D[j, rr0:rr1, cc0:cc1] += \
                    val * u[rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]
    return D.reshape(len(eff.pose_grid), h * w_)


def local_kernel_norms(w, eff):
    """Per-pixel squared local-kernel norms, window-interpolated.

    The squared norm ||A_r w||^2 is exact per patch and blended across
    pixels with the partition-of-unity windows restricted to the image.
    """
    w = _check_weights(w, eff)
    out = np.zeros(eff.image_shape)
    for A, view in zip(eff.basis, eff._image_windows):
        if view is None:
            continue
        nrm = float(np.sum((A @ w) ** 2))
        img_rs, img_cs, win = view
        out[img_rs, img_cs] += win * nrm
    return out


def patch_kernel_norms(w, eff):
    """||A_r w||^2 for every patch (vector of length n_patches)."""
    w = _check_weights(w, eff)
    return np.array([float(np.sum((A @ w) ** 2)) for A in eff.basis])


def rho_map(norms_sq, noise_level):
    """Pointwise ratio of noise level to squared local-kernel norm."""
    if noise_level <= 0:
        raise ValueError("noise_level must be positive")
    norms_sq = np.asarray(norms_sq, dtype=float)
    if np.any(norms_sq <= 0):
        raise ValueError("local kernel norms must be positive")
    return noise_level / norms_sq
