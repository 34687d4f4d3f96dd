"""Majorization-minimization solver: four block updates plus multi-scale.

Each outer iteration cycles Image -> Latent -> Blur -> Noise updates on the
variational upper bound

    L(x, w, gamma, lam) = ||y - Hx||^2 / lam
                          + sum_i [ x_i^2/gamma_i + log(lam + gamma_i s_i) ]

summed over the two derivative channels, where s_i is the squared local
kernel norm at pixel i.  Every block either minimizes the bound exactly in
closed form (latent, noise) or decreases it monotonically up to solver
tolerance (image via CG, blur via projected gradient).
"""

from __future__ import annotations

import sys
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import eff as eff_mod
from .eff import (apply_blur, apply_blur_adjoint, apply_D_transpose,
                  build_dense_D, build_eff, local_kernel_norms)
from .pipeline import _cg, build_pyramid, to_gradient_domain
from .poses import active_set_update, build_pose_grid

__all__ = [
    "SolverConfig",
    "SolverState",
    "init_state",
    "transfer_weights",
    "update_image",
    "update_latent",
    "update_blur",
    "update_noise",
    "eval_bound",
    "run_level",
    "run_multiscale",
]


@dataclass
class SolverConfig:
    cg_tol: float = 1e-5
    cg_max_iter: int = 50
    outer_iters_per_level: int = 30
    w_solver_tol: float = 1e-6
    w_solver_max_iter: int = 40
    d_coefficient: float = 1e-4
    gamma_floor: float = 1e-10
    pyramid_scale: float = 1.0 / np.sqrt(2.0)
    min_kernel_px: int = 3
    max_levels: int = 10
    seed: int = 0
    # pose grid / patch layout
    max_rotation: float = np.deg2rad(5.0)
    rotation_step: float | None = None
    max_shift: float = 5.0
    shift_step: float = 1.0
    patch_size: int = 32
    # active-set pruning (0 disables)
    active_set_every: int = 0
    prune_fraction: float = 0.02
    resample_sigma: float | None = None
    # stopping
    w_change_tol: float = 1e-3
    # one-shot cleanup after the final level: weights below this fraction
    # of the maximum are zeroed and the rest renormalized (0 disables)
    final_prune_fraction: float = 0.1
    log: bool = False

    def __post_init__(self):
        if not 0 < self.pyramid_scale < 1:
            raise ValueError("pyramid_scale must be in (0, 1)")
        for name in ("cg_tol", "w_solver_tol", "w_change_tol", "gamma_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.final_prune_fraction < 1:
            raise ValueError("final_prune_fraction must be in [0, 1)")


@dataclass
class SolverState:
    x: np.ndarray  # (2, H, W) derivative channels
    gamma: np.ndarray  # (2, H, W), > 0
    w: np.ndarray  # (n_poses,), >= 0
    lam: float
    norms: np.ndarray  # (H, W) cached ||wbar_i||^2 field
    z: np.ndarray = None  # (2, H, W) latent scales

    def clamped(self, config):
        return self.gamma <= config.gamma_floor


def init_state(y_grad, eff, config):
    """Spec'd initialization: x from the blurry gradients, near-identity w,
    lambda at the blurry-gradient signal scale."""
    x0 = y_grad.copy()
    gamma0 = x0**2 + 1e-2
    grid = eff.pose_grid
    w0 = np.zeros(len(grid))
    ident = grid.identity_index()
    w0[ident] = 0.5
    # uniform mass over the 3x3 nearest-translation poses around identity
    d = (grid.thetas - grid.thetas[ident]) ** 2 * 1e6 \
        + (grid.txs - grid.txs[ident]) ** 2 + (grid.tys - grid.tys[ident]) ** 2
    near = np.argsort(d)[: min(9, len(grid))]
    w0[near] += 0.5 / len(near)
    w0 /= w0.sum()
    lam0 = float(np.mean(y_grad**2))
    lam0 = max(lam0, config.d_coefficient)
    norms = local_kernel_norms(w0, eff)
    return SolverState(x=x0, gamma=gamma0, w=w0, lam=lam0, norms=norms)


def update_image(state, y_grad, eff, config):
    """Solve (H^T H / lam + Gamma^-1) x = H^T y / lam per channel via CG.

    Pixels whose gamma sits at the floor are clamped to zero.  Returns
    (x, converged_flag).
    """
    lam = state.lam
    precond_base = state.norms / lam
    free = ~state.clamped(config)
    x_new = np.empty_like(state.x)
    ok_all = True
    for c in range(state.x.shape[0]):
        mask = free[c]
        inv_gamma = 1.0 / np.maximum(state.gamma[c], config.gamma_floor)

        def apply_A(v, mask=mask, inv_gamma=inv_gamma):
            v = v * mask
            out = apply_blur_adjoint(apply_blur(v, state.w, eff),
                                     state.w, eff) / lam
            out += inv_gamma * v
            return out * mask

        b = mask * apply_blur_adjoint(y_grad[c], state.w, eff) / lam
        precond = 1.0 / (precond_base + inv_gamma)
        x0 = state.x[c] * mask
        xc, ok = _cg(apply_A, b, x0=x0, precond=precond,
                     tol=config.cg_tol, max_iter=config.cg_max_iter)
        x_new[c] = xc * mask
        ok_all = ok_all and ok
    if not ok_all:
        warnings.warn("image-update CG did not reach tolerance")
    return x_new, ok_all


def update_latent(state, config):
    """Closed-form latent update: z from the pre-update gamma, then
    gamma <- x^2 + z (floored)."""
    inv_gamma = 1.0 / np.maximum(state.gamma, config.gamma_floor)
    z = 1.0 / (state.norms[None] / state.lam + inv_gamma)
    gamma = np.maximum(state.x**2 + z, config.gamma_floor)
    return gamma, z


def _window_z_sums(z, eff):
    """Per-patch sums sum_i window_r(i) * z_i over all channels."""
    z_total = z.sum(axis=0)
    out = np.zeros(len(eff.basis))
    for r, view in enumerate(eff._image_windows):
        if view is None:
            continue
        img_rs, img_cs, win = view
        out[r] = float(np.sum(win * z_total[img_rs, img_cs]))
    return out


DENSE_D_BUDGET = 2 * 10**7  # poses * pixels above which D is not materialized


def update_blur(state, y_grad, eff, config):
    """Projected gradient with backtracking on the blur subproblem

        min_{w >= 0}  ||y - D w||^2 + w^T (sum_i z_i B_i^T B_i) w

    assembled patchwise.  Monotone: steps that fail to decrease the
    objective are rejected and the step size halved.  When memory permits,
    the transformed-image matrix D is materialized so each step costs two
    matrix-vector products; otherwise the operator form is applied.
    """
    s_r = _window_z_sums(state.z, eff)
    basis = eff.basis
    n_ch = y_grad.shape[0]
    n_px = y_grad[0].size
    dense = len(eff.pose_grid) * n_px * n_ch <= DENSE_D_BUDGET
    if dense:
        D = [build_dense_D(state.x[c], eff) for c in range(n_ch)]
        y_flat = [y_grad[c].ravel() for c in range(n_ch)]

    def reg_quad(w):
        return sum(s * float(np.sum((A @ w) ** 2))
                   for s, A in zip(s_r, basis) if s != 0.0)

    def reg_grad(w):
        g = np.zeros_like(w)
        for s, A in zip(s_r, basis):
            if s != 0.0:
                g += 2.0 * s * (A.T @ (A @ w))
        return g

    def residuals(w):
        if dense:
            return [w @ D[c] - y_flat[c] for c in range(n_ch)]
        return [(apply_blur(state.x[c], w, eff) - y_grad[c]).ravel()
                for c in range(n_ch)]

    def data_grad(res):
        if dense:
            return 2.0 * sum(D[c] @ res[c] for c in range(n_ch))
        g = np.zeros(len(eff.pose_grid))
        for c in range(n_ch):
            g += 2.0 * apply_D_transpose(res[c].reshape(y_grad[c].shape),
                                         state.x[c], eff)
        return g

    def objective(res, w):
        return sum(float(res[c] @ res[c]) for c in range(n_ch)) + reg_quad(w)

    w = state.w.copy()
    res = residuals(w)
    f = objective(res, w)
    step = 1.0 / max(1.0, 2.0 * (1.0 + s_r.sum()))
    for _ in range(config.w_solver_max_iter):
        grad = reg_grad(w) + data_grad(res)
        accepted = False
        for _ in range(40):
            w_try = np.maximum(w - step * grad, 0.0)
            res_try = residuals(w_try)
            f_try = objective(res_try, w_try)
            if f_try <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        change = np.abs(w_try - w).sum() / max(np.abs(w).sum(), 1e-12)
        w, res, f = w_try, res_try, f_try
        step *= 1.8
        if change < config.w_solver_tol:
            break
    return w


def _data_fit(x, w, y_grad, eff):
    return sum(float(np.sum((apply_blur(x[c], w, eff) - y_grad[c]) ** 2))
               for c in range(y_grad.shape[0]))


def update_noise(state, y_grad, eff, config):
    """Closed-form noise update lam <- (||y - Hx||^2 + beta + d) / n with
    beta = sum_i s_i / (s_i/lam + 1/gamma_i); floored at d/n by
    construction."""
    fit = _data_fit(state.x, state.w, y_grad, eff)
    inv_gamma = 1.0 / np.maximum(state.gamma, config.gamma_floor)
    beta = float(np.sum(state.norms[None] /
                        (state.norms[None] / state.lam + inv_gamma)))
    n = y_grad.size
    d = n * config.d_coefficient
    return (fit + beta + d) / n


def eval_bound(state, y_grad, eff):
    """Variational upper bound L at the current state (both channels)."""
    fit = _data_fit(state.x, state.w, y_grad, eff)
    gamma = state.gamma
    pen = float(np.sum(state.x**2 / gamma)) \
        + float(np.sum(np.log(state.lam + gamma * state.norms[None])))
    return fit / state.lam + pen


def run_level(y_grad, state, eff, config, level=0, trace=None):
    """Outer loop at one pyramid level.

    Cycles the four block updates, refreshing the kernel-norm cache after
    every blur update; stops on small relative w change or the iteration
    cap.  Returns (state, eff) -- eff can change when active-set pruning
    rewrites the pose grid.
    """
    for it in range(config.outer_iters_per_level):
        x_new, _ = update_image(state, y_grad, eff, config)
        state = replace(state, x=x_new)
        gamma, z = update_latent(state, config)
        state = replace(state, gamma=gamma, z=z)
        w_new = update_blur(state, y_grad, eff, config)
        w_change = np.abs(w_new - state.w).sum() / max(np.abs(state.w).sum(),
                                                       1e-12)
        state = replace(state, w=w_new,
                        norms=local_kernel_norms(w_new, eff))
        lam = update_noise(state, y_grad, eff, config)
        state = replace(state, lam=lam)

        bound = eval_bound(state, y_grad, eff)
        if trace is not None:
            trace.append({"level": level, "iter": it, "bound": bound,
                          "lambda": state.lam, "w_change": w_change})
        if config.log:
            print(f"{level} {it} {bound:.6e} {state.lam:.6e} "
                  f"{w_change:.3e}", file=sys.stderr)

        if config.active_set_every and (it + 1) % config.active_set_every == 0:
            try:
                w_as, grid_as = active_set_update(
                    state.w, eff.pose_grid, config.prune_fraction,
                    config.resample_sigma, rng_seed=config.seed + it)
            except ValueError:
                w_as, grid_as = state.w, eff.pose_grid
            if grid_as.poses != eff.pose_grid.poses:
                eff = build_eff(grid_as, eff.image_shape,
                                patch_size=config.patch_size,
                                kernel_size=eff.kernel_size)
                state = replace(state, w=w_as,
                                norms=local_kernel_norms(w_as, eff))

        if w_change < config.w_change_tol:
            break
    return state, eff


def _num_levels(config):
    """Enough levels that the translational kernel extent at the coarsest
    level shrinks to about min_kernel_px."""
    if config.max_shift <= 0:
        return 1
    levels = 1
    while levels < config.max_levels:
        extent = 2 * config.max_shift * config.pyramid_scale ** (levels - 1) + 1
        if extent <= config.min_kernel_px:
            break
        levels += 1
    return levels


def _level_grid(config, level_scale, image_shape):
    h, w = image_shape
    radius = 0.5 * float(np.hypot(h - 1, w - 1))
    return build_pose_grid(config.max_rotation, config.rotation_step,
                           max_shift=config.max_shift * level_scale,
                           shift_step=config.shift_step,
                           corner_radius=radius)


def transfer_weights(coarse_grid, w_coarse, fine_grid, scale_ratio):
    """Carry blur weights to a finer level: rotations unchanged,
    translations scaled by ``scale_ratio``, mass splat onto the nearest
    fine poses (bilinear in shift, nearest in rotation)."""
    w_fine = np.zeros(len(fine_grid))
    thetas = np.unique(fine_grid.thetas)
    for pose, mass in zip(coarse_grid.poses, w_coarse):
        if mass <= 0:
            continue
        th = thetas[np.argmin(np.abs(thetas - pose.theta))]
        tx, ty = pose.tx * scale_ratio, pose.ty * scale_ratio
        sel = np.nonzero(fine_grid.thetas == th)[0]
        # bilinear split over the four surrounding fine shifts
        dx = fine_grid.txs[sel] - tx
        dy = fine_grid.tys[sel] - ty
        wx = np.maximum(0.0, 1.0 - np.abs(dx))
        wy = np.maximum(0.0, 1.0 - np.abs(dy))
        wgt = wx * wy
        total = wgt.sum()
        if total <= 0:
            w_fine[sel[np.argmin(dx**2 + dy**2)]] += mass
        else:
            w_fine[sel] += mass * wgt / total
    return w_fine


def run_multiscale(y_image, config, trace=None):
    """Coarse-to-fine driver over an intensity image.

    Builds the pyramid, runs the outer loop per level converting to the
    derivative domain, carries blur weights and the noise level to the
    next level, and returns the finest-level results.
    """
    y_image = np.asarray(y_image, dtype=float)
    if y_image.size == 0:
        raise ValueError("empty image")
    num_levels = _num_levels(config)
    levels = build_pyramid(y_image, config.pyramid_scale, num_levels)
    if min(y_image.shape) < 2 * config.max_shift + 1:
        raise ValueError("image smaller than the blur kernel extent")

    state = None
    prev_grid = None
    prev_shape = None
    eff = None
    for li in range(len(levels) - 1, -1, -1):
        img = levels[li]
        level_scale = img.shape[0] / levels[0].shape[0]
        grid = _level_grid(config, level_scale, img.shape)
        eff = build_eff(grid, img.shape, patch_size=config.patch_size)
        y_grad = to_gradient_domain(img)
        if state is None:
            state = init_state(y_grad, eff, config)
        else:
            ratio = img.shape[0] / prev_shape[0]
            w_new = transfer_weights(prev_grid, state.w, grid, ratio)
            if w_new.sum() <= 0:
                w_new[grid.identity_index()] = 1.0
            w_new /= w_new.sum()
            x0 = y_grad.copy()
            state = SolverState(x=x0, gamma=x0**2 + 1e-2, w=w_new,
                                lam=state.lam,
                                norms=local_kernel_norms(w_new, eff))
        state, eff = run_level(y_grad, state, eff, config,
                               level=li, trace=trace)
        # pin the global scale once per level
        total = state.w.sum()
        if total > 0:
            state = replace(state, w=state.w / total,
                            norms=local_kernel_norms(state.w / total, eff))
        prev_grid = eff.pose_grid
        prev_shape = img.shape

    if config.final_prune_fraction > 0:
        # post-optimization cleanup: drop trailing clutter weights
        w_clean = state.w.copy()
        w_clean[w_clean < config.final_prune_fraction * w_clean.max()] = 0.0
        w_clean /= w_clean.sum()
        state = replace(state, w=w_clean,
                        norms=local_kernel_norms(w_clean, eff))

    rho = eff_mod.rho_map(state.norms, state.lam)
    return {
        "w": state.w,
        "pose_grid": eff.pose_grid,
        "lambda": state.lam,
        "rho_map": rho,
        "x_gradients": state.x,
        "eff": eff,
        "state": state,
    }
