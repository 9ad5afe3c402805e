"""Shared test utilities: finite-difference gradient oracle and comparisons.

The numerical gradient here is intentionally independent of the autodiff
tape: it only re-evaluates a forward closure under central perturbations of
raw numpy buffers.
"""

import numpy as np


def numerical_grad(forward, buf: np.ndarray, h=1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued `forward()` wrt `buf`.

    `forward` must read `buf` (mutated in place) on every call and return a
    float. The buffer is restored before returning.
    """
    grad = np.zeros_like(buf, dtype=np.float64)
    flat = buf.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = forward()
        flat[i] = orig - h
        down = forward()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray,
                       rtol=1e-4, floor=1e-6, label=""):
    """Elementwise |a - n| <= rtol * max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    err = np.abs(a - n) / denom
    worst = float(err.max()) if err.size else 0.0
    assert worst <= rtol, (
        f"gradient mismatch{' for ' + label if label else ''}: "
        f"max rel err {worst:.3e} > {rtol:.1e} "
        f"(analytic {a.reshape(-1)[err.argmax()]:.6e}, "
        f"numeric {n.reshape(-1)[err.argmax()]:.6e})")


def check_param_grads(build_loss, params, rtol=1e-4, h=1e-5):
    """Compare tape gradients of every parameter against finite differences.

    `build_loss()` runs a fresh forward pass and returns the loss Tensor;
    it must be a pure function of the current parameter values.
    """
    from acprank import tensor as T

    for p in params:
        p.zero_grad()
    with T.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    def forward():
        return float(build_loss().data)

    for p in params:
        numeric = numerical_grad(forward, p.value, h=h)
        assert_grads_close(analytic[id(p)], numeric, rtol=rtol, label=p.name)
