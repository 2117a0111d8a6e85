"""Shared test utilities: a finite-difference gradient oracle."""

import numpy as np

from c2l.numerics import Tape, Tensor, backward


def finite_difference_gradient(f, arrays, h=1e-4):
    """Central-difference gradient of scalar f with respect to each array.

    ``f`` receives the (mutated in place) list of float64 arrays and must
    return a Python float.  Every element is perturbed, so keep inputs
    small.
    """
    grads = []
    for a in arrays:
        assert a.dtype == np.float64, "finite differences need float64"
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Worst elementwise |a-n| / max(|a|+|n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float((np.abs(a - n) / denom).max())


def analytic_gradients(build_loss, arrays):
    """Tape gradients of ``build_loss(tensors) -> scalar Tensor`` wrt arrays."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build_loss(tensors)
    backward(loss, tape)
    out = []
    for t in tensors:
        assert t.grad is not None, "parameter missing gradient after backward"
        out.append(t.grad.data.copy())
    return out


def check_gradients(build_loss, arrays, h=1e-4, tol=1e-3):
    """Assert analytic and finite-difference gradients agree elementwise.

    ``build_loss`` must be a pure function of its tensor inputs so it can
    be replayed for each perturbed evaluation.
    """
    analytic = analytic_gradients(build_loss, [a.copy() for a in arrays])

    def scalar_f(arrs):
        tensors = [Tensor(a) for a in arrs]
        return build_loss(tensors).item()

    numeric = finite_difference_gradient(scalar_f, [a.copy() for a in arrays], h=h)
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        err = max_relative_error(a, n)
        assert err < tol, f"gradient mismatch on input {i}: max rel err {err:.3e}"
    return analytic
