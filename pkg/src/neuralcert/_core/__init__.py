"""QP kernel backend selection.

The compiled extension is preferred when importable; set NEURALCERT_PURE=1
to force the pure-Python twin. Both produce bit-identical results, so the
choice only affects speed.
"""

import os

if os.environ.get("NEURALCERT_PURE", "") not in ("", "0"):
    from . import qp_py as kernel
    BACKEND = "pure"
else:
    try:
        from . import qp_c as kernel  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        from . import qp_py as kernel
        BACKEND = "pure"

OPTIMAL = kernel.OPTIMAL
INFEASIBLE = kernel.INFEASIBLE
ITER_LIMIT = kernel.ITER_LIMIT
FACTOR_FAIL = kernel.FACTOR_FAIL
qp_solve = kernel.solve
qp_solve_batch = kernel.solve_batch

__all__ = ["BACKEND", "OPTIMAL", "INFEASIBLE", "ITER_LIMIT", "FACTOR_FAIL",
           "qp_solve", "qp_solve_batch", "kernel"]
