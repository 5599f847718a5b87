"""Fully-connected networks over the tape.

Shapes are batch-first: apply() maps (B, widths[0]) to (B, widths[-1]).
Weights are stored (fan_in, fan_out) so a layer is `x @ W + b`.
"""

import numpy as np

from .dual import Dual
from .tensor import Tape, Tensor, as_tensor

ACTIVATIONS = ("tanh", "softplus", "elu", "relu")
# activations with a continuous derivative, required by continuous-time
# certificate conditions (relu kinks break the Lie-derivative terms)
SMOOTH_ACTIVATIONS = ("tanh", "softplus", "elu")


def glorot_uniform(fan_in, fan_out, rng):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    """Plain multilayer perceptron with one linear output layer.

    Parameters live as float64 ndarrays on the instance; training passes
    tape-watched copies through `apply(params=...)` and writes the updated
    values back with `set_param_vector`.
    """

    def __init__(self, widths, activation="tanh", rng=None, weights=None, biases=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"bad layer widths {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        if weights is not None:
            self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
            self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
            for k in range(len(widths) - 1):
                if self.weights[k].shape != (widths[k], widths[k + 1]):
                    raise ValueError(f"layer {k} weight shape {self.weights[k].shape} "
                                     f"does not match widths {widths}")
                if self.biases[k].shape != (widths[k + 1],):
                    raise ValueError(f"layer {k} bias shape mismatch")
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.weights = [glorot_uniform(widths[k], widths[k + 1], rng)
                            for k in range(len(widths) - 1)]
            self.biases = [np.zeros(widths[k + 1]) for k in range(len(widths) - 1)]

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def _act(self, z):
        return getattr(z, self.activation)()

    def apply(self, x, params=None):
        """Forward pass. x: ndarray, Tensor, or Dual of shape (B, in_dim).

        params, when given, is a list of (W, b) tensor pairs overriding the
        stored arrays (this is how tape-watched parameters enter).
        """
        if not isinstance(x, (Tensor, Dual)):
            x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]}, expected {self.in_dim}")
        if params is None:
            params = [(Tensor.const(w), Tensor.const(b))
                      for w, b in zip(self.weights, self.biases)]
        h = x
        last = len(params) - 1
        for k, (W, b) in enumerate(params):
            h = h @ W + b
            if k < last:
                h = self._act(h)
        return h

    def __call__(self, x, params=None):
        return self.apply(x, params)

    # -- parameter plumbing ----------------------------------------------------

    def param_arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def watch_params(self, tape: Tape):
        """Tape-watched leaves, as (pairs for apply, flat list for backward)."""
        leaves = [tape.watch(a) for a in self.param_arrays()]
        pairs = [(leaves[2 * k], leaves[2 * k + 1]) for k in range(len(self.weights))]
        return pairs, leaves

    def param_vector(self):
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        off = 0
        for a in self.param_arrays():
            a[...] = vec[off:off + a.size].reshape(a.shape)
            off += a.size
        if off != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {off}")

    def num_params(self):
        return sum(a.size for a in self.param_arrays())

    def copy(self):
        return Mlp(self.widths, self.activation,
                   weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases])


def forward(net: Mlp, x):
    """Pure forward evaluation on raw arrays."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    y = net.apply(x[None] if single else x).data
    return y[0] if single else y


def grad_params(net: Mlp, loss_fn, batch):
    """Flat gradient of a scalar loss w.r.t. all network parameters.

    loss_fn(apply, batch_tensor) -> scalar Tensor, where `apply` is the
    network forward closure over the watched parameters.
    """
    tape = Tape()
    pairs, leaves = net.watch_params(tape)
    loss = loss_fn(lambda z: net.apply(z, params=pairs), as_tensor(batch))
    if loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    grads = tape.backward(loss, leaves)
    return np.concatenate([g.ravel() for g in grads])


def grad_input(net: Mlp, x):
    """Gradient of a scalar-output network w.r.t. its input, per sample."""
    if net.out_dim != 1:
        raise ValueError("grad_input needs a scalar-output network; "
                         "use jacobian_input for vector outputs")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    tape = Tape()
    xt = tape.watch(xb)
    y = net.apply(xt)
    (gx,) = tape.backward(y.sum(), [xt])
    return gx[0] if single else gx


def jacobian_input(net: Mlp, x):
    """Jacobian d(net)/dx, shape (B, out_dim, in_dim), via forward-mode passes."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    cols = []
    for i in range(net.in_dim):
        tangent = np.zeros_like(xb)
        tangent[:, i] = 1.0
        out = net.apply(Dual(as_tensor(xb), as_tensor(tangent)))
        cols.append(out.tangent.data)
    jac = np.stack(cols, axis=-1)
    return jac[0] if single else jac
