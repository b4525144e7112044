import numpy as np
import pytest

from dynslim import tensor as dt


def rel_err(analytic, numeric):
    """Infinity-norm relative error between gradient arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.abs(numeric).max()
    diff = np.abs(analytic - numeric).max()
    if scale < 1e-12:
        return diff
    return diff / scale


def gradcheck(f, inputs, eps=1e-6, tol=1e-6):
    """Compare backward() grads of scalar f(*inputs) against central
    finite differences, input by input. All inputs are float64 Tensors
    with requires_grad=True."""
    for inp in inputs:
        inp.zero_grad()
    out = f(*inputs)
    dt.backward(out, params=list(inputs))
    worst = 0.0
    for i, inp in enumerate(inputs):
        def partial(x, i=i):
            probe = [Tnsr.detach() for Tnsr in inputs]
            probe[i] = x
            return f(*probe)

        numeric = dt.finite_diff_grad(partial, inp, eps=eps)
        err = rel_err(inp.grad, numeric)
        worst = max(worst, err)
        assert err < tol, (f"gradient mismatch on input {i}: rel err "
                           f"{err:.3e} >= {tol}")
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
