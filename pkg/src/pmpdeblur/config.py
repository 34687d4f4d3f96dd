"""Flat ``key = value`` run configuration with documented defaults.

Unknown keys are rejected; the CLI overrides file values with flags and
can re-emit any accepted configuration via ``--dump-config`` such that
re-parsing reproduces it exactly.
"""

from __future__ import annotations

import numpy as np

from .solver import SolverConfig

__all__ = ["RunConfig", "parse_config_file", "CONFIG_FIELDS"]

# name -> (type, default, help)
CONFIG_FIELDS = {
    "cg_tol": (float, 1e-5, "CG relative-residual tolerance"),
    "cg_max_iter": (int, 50, "CG iteration cap"),
    "outer_iters_per_level": (int, 30, "outer iterations per pyramid level"),
    "w_solver_tol": (float, 1e-6, "blur-update relative-change tolerance"),
    "w_solver_max_iter": (int, 40, "blur-update projected-gradient cap"),
    "d_coefficient": (float, 1e-4, "noise-floor coefficient (d = n * coeff)"),
    "gamma_floor": (float, 1e-10, "variance floor; floored pixels clamp to 0"),
    "pyramid_scale": (float, 1.0 / np.sqrt(2.0), "per-level linear factor"),
    "min_kernel_px": (int, 3, "target kernel extent at the coarsest level"),
    "max_levels": (int, 10, "pyramid level cap"),
    "seed": (int, 0, "root RNG seed"),
    "max_rotation_deg": (float, 5.0, "max in-plane rotation, degrees"),
    "rotation_step_deg": (float, 0.0, "rotation step, degrees (0 = auto)"),
    "max_shift": (float, 5.0, "max translation, pixels"),
    "shift_step": (float, 1.0, "translation step, pixels"),
    "patch_size": (int, 32, "EFF patch side length, pixels"),
    "active_set_every": (int, 0, "prune/resample every N iterations (0 off)"),
    "prune_fraction": (float, 0.02, "prune threshold relative to max weight"),
    "resample_sigma": (float, 0.0, "resampling std (0 = one grid step)"),
    "w_change_tol": (float, 1e-3, "outer-loop stopping tolerance on w"),
    "final_prune_fraction": (float, 0.1,
                             "final cleanup threshold relative to max weight"),
    "reg_weight": (float, 100.0,
                   "non-blind gradient-prior weight (scaled by noise level)"),
    "montage_grid": (int, 5, "kernel-montage sample sites per side"),
    "levels": (int, 0, "pyramid level override (0 = auto)"),
    "threads": (int, 1, "internal data-parallelism bound"),
}


class RunConfig:
    def __init__(self, values=None):
        self.values = {k: v[1] for k, v in CONFIG_FIELDS.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key, raw):
        if key not in CONFIG_FIELDS:
            raise ValueError(f"unknown configuration key '{key}'")
        typ = CONFIG_FIELDS[key][0]
        try:
            self.values[key] = typ(raw)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"bad value for '{key}': {raw!r}") from exc

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def dump(self):
        lines = []
        for key, (typ, _, doc) in CONFIG_FIELDS.items():
            val = self.values[key]
            text = repr(float(val)) if typ is float else str(val)
            lines.append(f"{key} = {text}  # {doc}")
        return "\n".join(lines) + "\n"

    def solver_config(self, log=False):
        v = self.values
        cfg = SolverConfig(
            cg_tol=v["cg_tol"],
            cg_max_iter=v["cg_max_iter"],
            outer_iters_per_level=v["outer_iters_per_level"],
            w_solver_tol=v["w_solver_tol"],
            w_solver_max_iter=v["w_solver_max_iter"],
            d_coefficient=v["d_coefficient"],
            gamma_floor=v["gamma_floor"],
            pyramid_scale=v["pyramid_scale"],
            min_kernel_px=v["min_kernel_px"],
            max_levels=v["levels"] if v["levels"] > 0 else v["max_levels"],
            seed=v["seed"],
            max_rotation=np.deg2rad(v["max_rotation_deg"]),
            rotation_step=(np.deg2rad(v["rotation_step_deg"])
                           if v["rotation_step_deg"] > 0 else None),
            max_shift=v["max_shift"],
            shift_step=v["shift_step"],
            patch_size=v["patch_size"],
            active_set_every=v["active_set_every"],
            prune_fraction=v["prune_fraction"],
            resample_sigma=(v["resample_sigma"]
                            if v["resample_sigma"] > 0 else None),
            w_change_tol=v["w_change_tol"],
            final_prune_fraction=v["final_prune_fraction"],
            log=log,
        )
        return cfg


def parse_config_file(path):
    cfg = RunConfig()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = text.partition("=")
            cfg.set(key.strip(), raw.strip())
    return cfg
