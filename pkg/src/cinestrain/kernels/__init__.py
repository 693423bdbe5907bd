"""Hot numerical kernels with a compiled core and a numpy fallback.

The Cython extension is preferred when available; set the environment
variable ``CINESTRAIN_KERNELS`` to ``numpy`` or ``cython`` to force one.
Both backends implement the same contract and agree to tight tolerance
(see tests/test_kernels.py); within a backend, results are deterministic.
"""

import os

_requested = os.environ.get("CINESTRAIN_KERNELS", "auto").strip().lower()

if _requested in ("auto", "", "cython"):
    try:
        from . import _cykernels as _impl

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "CINESTRAIN_KERNELS=cython but the compiled extension is not "
                "available; build it with `pip install -e .` or select numpy"
            )
        from . import numpy_backend as _impl

        BACKEND = "numpy"
elif _requested in ("numpy", "python"):
    from . import numpy_backend as _impl

    BACKEND = "numpy"
else:
    raise ValueError(f"unknown CINESTRAIN_KERNELS backend: {_requested!r}")

mlp_forward = _impl.mlp_forward
mlp_forward_jacobian = _impl.mlp_forward_jacobian
mlp_backward = _impl.mlp_backward
trilinear = _impl.trilinear

__all__ = [
    "BACKEND",
    "mlp_forward",
    "mlp_forward_jacobian",
    "mlp_backward",
    "trilinear",
]
