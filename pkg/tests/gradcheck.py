"""Finite-difference gradient checking against the autodiff engine.

All checks run in float64 with central differences; tolerances are set
for the ~1e-7 truncation error of h ~ 1e-5 on O(1) values.
"""

import numpy as np

from grucnn import tensor as T


def numeric_grad(f, params, h=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. each numpy array.

    ``f`` must read the arrays in ``params`` afresh on every call.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = float(f())
            flat[i] = keep - h
            fm = float(f())
            flat[i] = keep
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check_grads(build, params_data, rtol=1e-5, atol=1e-7):
    """Compare autodiff grads with finite differences.

    ``build(params)`` takes a list of Tensors (requires_grad=True, float64,
    wrapping ``params_data``) and returns a scalar loss Tensor.  Asserts
    every gradient matches central differences.
    """
    params = [T.Tensor(d, requires_grad=True, dtype=np.float64) for d in params_data]
    loss = build(params)
    loss.backward()
    auto = [p.grad.copy() for p in params]

    def f():
        ps = [T.Tensor(d, requires_grad=True, dtype=np.float64) for d in params_data]
        with T.no_grad():
            out = build(ps)
        return out.data

    num = numeric_grad(f, params_data)
    for i, (a, n) in enumerate(zip(auto, num)):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol,
                                   err_msg=f"gradient mismatch for parameter {i}")
