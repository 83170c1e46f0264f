"""Backend selection for the hot kernels.

The numba backend is used when numba imports and ``SPLITSMC_DISABLE_JIT`` is
unset (or ``0``).  Both backends take the same arguments and write results
into the same preallocated arrays.
"""

import os

from . import _numpy as numpy_backend


def _jit_requested():
    return os.environ.get("SPLITSMC_DISABLE_JIT", "0").strip().lower() in ("", "0", "false", "no")


try:
    if not _jit_requested():
        raise ImportError("disabled by SPLITSMC_DISABLE_JIT")
    from . import _jit as jit_backend
except ImportError:
    jit_backend = None

backend = jit_backend if jit_backend is not None else numpy_backend
BACKEND = "numba" if jit_backend is not None else "numpy"

eval_mean_map = backend.eval_mean_map
eval_coordinate_flow = backend.eval_coordinate_flow
pf_run = backend.pf_run
twist_steps = backend.twist_steps
fit_backward = backend.fit_backward
simulate_steps = backend.simulate_steps

__all__ = [
    "BACKEND",
    "backend",
    "eval_coordinate_flow",
    "eval_mean_map",
    "fit_backward",
    "jit_backend",
    "numpy_backend",
    "pf_run",
    "simulate_steps",
    "twist_steps",
]
