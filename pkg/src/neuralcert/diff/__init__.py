from .tensor import (Tape, Tensor, as_tensor, bmm, concat, custom_node,
                     sym_eig_small, sym_eigvals)
from .dual import Dual, directional_derivative, lift
from .mlp import (ACTIVATIONS, SMOOTH_ACTIVATIONS, Mlp, forward, grad_input,
                  grad_params, jacobian_input)

__all__ = [
    "Tape", "Tensor", "as_tensor", "bmm", "concat", "custom_node",
    "sym_eig_small", "sym_eigvals", "Dual", "directional_derivative", "lift",
    "ACTIVATIONS", "SMOOTH_ACTIVATIONS", "Mlp", "forward", "grad_input",
    "grad_params", "jacobian_input",
]
