"""Test-side oracles, independent of the library's own derivative code.

The gradient oracle is plain central finite differences on the scalar loss:
perturb one coordinate at a time in the tensor's own float64 buffer and
re-run the forward pass.  Nothing here imports from the autodiff internals
beyond the public Tensor/no_grad/backward API.
"""

import numpy as np

from afa import tensor as T


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` w.r.t. ``arr``.

    ``f`` takes no arguments and must re-read ``arr`` (the same buffer) on
    every call.  The buffer is restored exactly after each coordinate.
    """
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_grad_error(build, params, h: float = 1e-5):
    """Largest analytic-vs-numeric gradient discrepancy over ``params``.

    ``build()`` must construct the forward pass from the parameters' current
    buffers and return the scalar loss Tensor.  Returns (max relative error,
    max absolute error at the near-zero coordinates), where a coordinate
    counts as near-zero when both gradients are below 1e-6.
    """
    for p in params:
        p.zero_grad()
    loss = build()
    T.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else np.array(p.grad, copy=True)
                for p in params]
    worst_rel = 0.0
    worst_abs = 0.0
    with T.no_grad():
        for p, ana in zip(params, analytic):
            num = numeric_grad(lambda: build().item(), p.data, h)
            err = np.abs(ana - num)
            scale = np.maximum(np.abs(ana), np.abs(num))
            near_zero = scale < 1e-6
            if near_zero.any():
                worst_abs = max(worst_abs, float(err[near_zero].max()))
            if (~near_zero).any():
                rel = err[~near_zero] / scale[~near_zero]
                worst_rel = max(worst_rel, float(rel.max()))
    return worst_rel, worst_abs


def assert_grads_match(build, params, rtol: float = 1e-4, atol: float = 1e-7,
                       h: float = 1e-5, label: str = ""):
    rel, ab = max_grad_error(build, params, h=h)
    assert rel < rtol and ab < atol, (
        f"gradient mismatch{' for ' + label if label else ''}: "
        f"max rel err {rel:.3e} (tol {rtol:.0e}), "
        f"max abs err near zero {ab:.3e} (tol {atol:.0e})")
