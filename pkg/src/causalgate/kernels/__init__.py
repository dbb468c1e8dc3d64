"""Numeric kernel backend selection.

The fused inner-loop kernels (row softmax, layer norm, gate pooling, boosted
tree split search) exist twice: a Cython extension (``_ckernels``) and a numpy
fallback (``_pykernels``).  The compiled backend is preferred when the
extension built; ``CAUSALGATE_BACKEND=python|compiled`` forces a choice.
Dense matmul is delegated to numpy's BLAS in both backends.

Within one backend every kernel is deterministic: same inputs give
bit-identical outputs.  Across backends results agree to float64 rounding,
not bitwise; a run therefore records which backend produced it.
"""

import os

from . import _pykernels

_FORCED = os.environ.get("CAUSALGATE_BACKEND", "").strip().lower()

_impl = None
if _FORCED not in ("", "python", "compiled"):
    raise RuntimeError(
        f"CAUSALGATE_BACKEND={_FORCED!r} not recognized (use 'python' or 'compiled')"
    )
if _FORCED != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _FORCED == "compiled":
            raise RuntimeError(
                "CAUSALGATE_BACKEND=compiled but the Cython extension is not built; "
                "reinstall with a C toolchain or unset the variable"
            ) from None
        _impl = None
if _impl is None:
    _impl = _pykernels

softmax_rows_fwd = _impl.softmax_rows_fwd
softmax_rows_bwd = _impl.softmax_rows_bwd
masked_softmax_rows_fwd = _impl.masked_softmax_rows_fwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
gated_pool_fwd = _impl.gated_pool_fwd
gated_pool_bwd = _impl.gated_pool_bwd
best_split = _impl.best_split


def backend_name() -> str:
    """Name of the active kernel backend ('compiled' or 'python')."""
    return "compiled" if _impl is not _pykernels else "python"


def available_backends() -> list:
    out = ["python"]
    try:
        from . import _ckernels  # noqa: F401
        out.append("compiled")
    except ImportError:
        pass
    return out
