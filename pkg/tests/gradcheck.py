"""Central finite-difference oracle used by the gradient tests.

Kept outside the package on purpose: it only touches ``.data`` and calls
the forward function, never the backward closures.
"""

import numpy as np

from msfusion.core import Tensor, precision

STEP = 1e-5


def numerical_grad(fn, inputs, wrt, seed_grad):
    """d <seed_grad, fn(inputs)> / d inputs[wrt] by central differences."""
    x = inputs[wrt].data
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + STEP
        plus = float((fn(*inputs).data * seed_grad).sum())
        x[idx] = orig - STEP
        minus = float((fn(*inputs).data * seed_grad).sum())
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * STEP)
    return grad


def max_relative_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-3)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn, arrays, rng, grad_mask=None):
    """Return the worst relative error over all inputs of ``fn``.

    ``arrays`` are numpy arrays; each becomes a float64 tensor requiring
    grad (unless masked off). A random output cotangent makes the check
    sensitive to every output element.
    """
    with precision("float64"):
        inputs = [
            Tensor(np.array(a, dtype=np.float64), requires_grad=grad_mask is None or grad_mask[i])
            for i, a in enumerate(arrays)
        ]
        out = fn(*inputs)
        seed = rng.standard_normal(out.shape)
        out.backward(seed)
        worst = 0.0
        for i, t in enumerate(inputs):
            if not t.requires_grad:
                continue
            num = numerical_grad(fn, inputs, i, seed)
            assert t.grad is not None, f"input {i} received no gradient"
            worst = max(worst, max_relative_error(t.grad, num))
        return worst
