"""Central finite-difference gradient oracle used across the test suite.

Kept deliberately independent of the autodiff tape: it re-runs the forward
function and differences the scalar output, so it can never inherit a bug
from the backward rules it is checking.
"""

import numpy as np

from fsdetr import ndgrad


def fd_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued `fn` w.r.t. array `x`.

    `fn` takes no arguments and must read `x` (mutated in place per probe).
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_op(build_loss, arrays, h=1e-5, rtol=1e-4, min_denom=1e-6):
    """Assert autodiff grads of `build_loss(tensors) -> scalar Tensor` match FD.

    `arrays` is a list of float64 ndarrays; each becomes a requires_grad leaf.
    Relative error is measured against max(|fd|, |ad|, min_denom) elementwise.
    """
    tensors = [ndgrad.Tensor(a, requires_grad=True) for a in arrays]
    with ndgrad.Tape():
        loss = build_loss(tensors)
    ndgrad.backward(loss)

    for t, a in zip(tensors, arrays):
        def run():
            with ndgrad.Tape():
                return float(build_loss(tensors).data)

        fd = fd_gradient(run, a, h=h)
        ad = t.grad if t.grad is not None else np.zeros_like(a)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), min_denom)
        rel = np.abs(ad - fd) / denom
        assert rel.max() < rtol, f"gradient mismatch: max rel err {rel.max():.3e}"
