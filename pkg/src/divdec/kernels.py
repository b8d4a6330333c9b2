"""Backend selection for the recurrent step kernel.

Two implementations of the same step contract exist: a fused Cython kernel
(``_kernels.pyx``) and a vectorized numpy fallback (``_kernels_py``). The
compiled kernel wins on per-call latency (the batch-1 steps that dominate
decoding and rollouts) while numpy's BLAS wins once batches carry enough
arithmetic, so the default backend dispatches on batch size at a measured
crossover. Set DIVDEC_PURE_PYTHON=1 to force the numpy path everywhere;
``benchmarks/bench_kernels.py`` reproduces the crossover measurement.
"""

import os

from ._kernels_py import CellWeights, sigmoid  # noqa: F401  (re-exported)
from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

# measured on 2-core x86: fused loops beat BLAS-backed numpy only for B <= 2
CYTHON_BATCH_MAX = 2

_force_python = bool(os.environ.get("DIVDEC_PURE_PYTHON"))

if _force_python or _compiled is None:
    backend_name = "python"
    step_batch = _kernels_py.step_batch
else:
    backend_name = "cython"

    def step_batch(w, tokens, h, c, d):
        if len(tokens) <= CYTHON_BATCH_MAX:
            return _compiled.step_batch(w, tokens, h, c, d)
        return _kernels_py.step_batch(w, tokens, h, c, d)


def available_backends() -> dict:
    """Raw backend implementations keyed by name, for benchmarks and tests."""
    out = {"python": _kernels_py.step_batch}
    if _compiled is not None:
        out["cython"] = _compiled.step_batch
    return out
