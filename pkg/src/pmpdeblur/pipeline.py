"""Image-domain plumbing: derivative channels, pyramids, non-blind step, I/O.

Estimation happens on the two first-difference channels of the (grayscale)
image; the final sharp image is recovered in the intensity domain with a
quadratic-gradient-regularized non-blind deconvolution using the estimated
blur weights.
"""

from __future__ import annotations

import warnings

import numpy as np
from PIL import Image

from .eff import apply_blur, apply_blur_adjoint

__all__ = [
    "to_gradient_domain",
    "build_pyramid",
    "nonblind_deconvolve",
    "load_image",
    "save_image",
    "to_gray",
]

LUMA = (0.299, 0.587, 0.114)


def to_gray(planes):
    """Luma plane from a (H, W) or (H, W, 3) array."""
    planes = np.asarray(planes, dtype=float)
    if planes.ndim == 2:
        return planes
    if planes.ndim == 3 and planes.shape[2] == 3:
        return planes @ np.array(LUMA)
    raise ValueError("expected a grayscale or RGB image")


def to_gradient_domain(img):
    """Two-channel first differences ([-1,1] horizontal, vertical).

    Replicate boundary: the last column/row of the respective channel is
    zero.  Returns an array of shape (2, H, W).
    """
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError("expected a single grayscale plane")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return np.stack([gx, gy])


def _grad_x(a):
    out = np.zeros_like(a)
    out[:, :-1] = a[:, 1:] - a[:, :-1]
    return out


def _grad_x_adj(b):
    out = np.zeros_like(b)
    out[:, 1:] += b[:, :-1]
    out[:, :-1] -= b[:, :-1]
    return out


def _grad_y(a):
    out = np.zeros_like(a)
    out[:-1, :] = a[1:, :] - a[:-1, :]
    return out


def _grad_y_adj(b):
    out = np.zeros_like(b)
    out[1:, :] += b[:-1, :]
    out[:-1, :] -= b[:-1, :]
    return out


def _resize_area(img, shape):
    """Area-averaging (box filter) resize of a float image."""
    pim = Image.fromarray(np.asarray(img, dtype=np.float32), mode="F")
    h, w = shape
    return np.asarray(pim.resize((w, h), Image.BOX), dtype=float)


def build_pyramid(img, scale_factor, num_levels, min_side=16):
    """Coarse-to-fine pyramid; level 0 is the original image.

    Levels that would drop below ``min_side`` pixels on a side are skipped
    with a warning.  Sizes follow round(size * factor) per level.
    """
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    if not 0 < scale_factor < 1:
        raise ValueError("scale_factor must be in (0, 1)")
    img = np.asarray(img, dtype=float)
    levels = [img]
    h, w = img.shape
    for _ in range(num_levels - 1):
        h = int(np.floor(h * scale_factor + 0.5))
        w = int(np.floor(w * scale_factor + 0.5))
        if min(h, w) < min_side:
            warnings.warn(
                f"pyramid truncated at {len(levels)} levels "
                f"(next level {h}x{w} below {min_side} px)")
            break
        levels.append(_resize_area(levels[-1], (h, w)))
    return levels


def _cg(apply_A, b, x0=None, precond=None, tol=1e-5, max_iter=50):
    """Preconditioned CG on a flattened image system; returns best iterate.

    ``precond`` is a pointwise inverse-diagonal array (or None).
    """
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply_A(x)
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        return np.zeros_like(b), True
    z = r if precond is None else precond * r
    p = z.copy()
    rz = float(np.sum(r * z))
    best, best_res = x.copy(), np.linalg.norm(r)
    converged = best_res <= tol * b_norm
    for _ in range(max_iter):
        if converged:
            break
        Ap = apply_A(p)
        denom = float(np.sum(p * Ap))
        if denom <= 0:
            break
        alpha = rz / denom
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol * b_norm:
            converged = True
            break
        z = r if precond is None else precond * r
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return best, converged


def nonblind_deconvolve(y, w, eff, noise_level, reg_weight=100.0,
                        cg_tol=1e-6, cg_max_iter=200):
    """Recover a sharp image given blur weights: quadratic gradient prior.

    Solves min_x ||y - Hx||^2 + noise_level * reg_weight * ||grad x||^2 per
    color plane by conjugate gradients.  Returns (image, converged_flag).
    ``reg_weight`` is expressed for intensities in [0, 1]; the product with
    the noise level sets the effective Tikhonov weight.
    """
    y = np.asarray(y, dtype=float)
    planes = y[..., None] if y.ndim == 2 else y
    reg = noise_level * reg_weight

    def apply_A(v):
        out = apply_blur_adjoint(apply_blur(v, w, eff), w, eff)
        if reg > 0:
            out = out + reg * (_grad_x_adj(_grad_x(v)) +
                               _grad_y_adj(_grad_y(v)))
        return out

    outs, ok_all = [], True
    for c in range(planes.shape[2]):
        b = apply_blur_adjoint(planes[:, :, c], w, eff)
        x, ok = _cg(apply_A, b, x0=planes[:, :, c].copy(),
                    tol=cg_tol, max_iter=cg_max_iter)
        if not ok:
            warnings.warn("non-blind CG did not fully converge")
            ok_all = False
        outs.append(x)
    result = np.stack(outs, axis=2)
    if y.ndim == 2:
        result = result[:, :, 0]
    return result, ok_all


# ---------------------------------------------------------------------------
# image file I/O (PNG 8/16-bit, binary PGM/PPM; values treated as linear)

def load_image(path):
    """Read an image file into float arrays scaled to [0, 1]."""
    with Image.open(path) as pim:
        if pim.mode in ("I", "I;16", "I;16B"):
            arr = np.asarray(pim, dtype=float) / 65535.0
        elif pim.mode in ("L", "P"):
            arr = np.asarray(pim.convert("L"), dtype=float) / 255.0
        elif pim.mode in ("RGB", "RGBA"):
            arr = np.asarray(pim.convert("RGB"), dtype=float) / 255.0
        else:
            arr = np.asarray(pim.convert("RGB"), dtype=float) / 255.0
    return arr


def save_image(path, img):
    """Write an array in [0, 1] as 8-bit PNG (or PGM/PPM), clamping."""
    img = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)
