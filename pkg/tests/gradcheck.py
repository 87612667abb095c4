"""Central finite-difference gradient checking shared by the test modules."""

import numpy as np

from ensr import autodiff as ad


def numeric_grad(fn, arrays, h=1e-5):
    """d fn / d array for each array, by central differences (fn returns a float)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + h
            fp = fn()
            arr[i] = orig - h
            fm = fn()
            arr[i] = orig
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_error(analytic, numeric):
    """Max absolute deviation relative to the gradient's own scale."""
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check(build, arrays, h=1e-5):
    """Compare autodiff gradients of ``build(*tensors)`` with finite differences.

    ``arrays`` are mutated in place during differencing and restored afterwards.
    Returns the worst relative error over all inputs.
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    analytic = ad.grad(loss, tensors)

    def f():
        # grad mode stays on: builders may differentiate internally
        return build(*[ad.Tensor(a, requires_grad=True) for a in arrays]).item()

    numeric = numeric_grad(f, arrays, h)
    return max(rel_error(a.data, n) for a, n in zip(analytic, numeric))
