"""Shared test utilities: gradient checking and small synthetic inputs."""

import numpy as np

from tripletvol.tensor import Tensor, backward, finite_diff_gradient


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(fn, arrays, rng, h=1e-5, weight=None):
    """Worst relative error of backward() against central differences.

    The scalar under test is ``sum(fn(*inputs) * w)`` with a fixed random
    ``w`` so every output element contributes a distinct cotangent.
    """
    inputs = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    w = rng.normal(size=out.shape) if weight is None else weight
    wt = Tensor(w)

    def scalar(*ts):
        o = fn(*ts)
        return (o * wt).sum() if o.size > 1 else o

    grads = backward(scalar(*inputs))
    worst = 0.0
    for k, t in enumerate(inputs):

        def fk(x, k=k):
            args = list(inputs)
            args[k] = x
            return scalar(*args)

        numeric = finite_diff_gradient(fk, t.data.copy(), h=h)
        analytic = grads.get(t, np.zeros_like(t.data))
        worst = max(worst, relative_error(analytic, numeric))
    return worst
