"""Certificate verification: interval arithmetic, sampled validation,
Lipschitz-grid and branch-and-bound certification, and the CEGIS driver.

Only the interval submodule loads eagerly; the rest resolve on first
attribute access so that modules which need interval arithmetic alone
(certificate definitions, notably) do not drag the full verifier stack
into their import cycle.
"""

from importlib import import_module

from .interval import IntervalBox, ibp_bounds, ibp_grad_bounds

_LAZY = {
    "Counterexample": "verify",
    "NegatedCertificate": "verify",
    "VerificationReport": "verify",
    "branch_and_bound_verify": "verify",
    "box_conditions": "verify",
    "certificate_constants": "verify",
    "lipschitz_grid_certify": "verify",
    "net_jacobian_lipschitz": "verify",
    "net_lipschitz": "verify",
    "pointwise_conditions": "verify",
    "sampling_validate": "verify",
    "spectral_norm": "verify",
    "CegisResult": "cegis",
    "cegis_loop": "cegis",
}

__all__ = ["IntervalBox", "ibp_bounds", "ibp_grad_bounds"] + sorted(_LAZY)


def __getattr__(name):
    if name in _LAZY:
        return getattr(import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
