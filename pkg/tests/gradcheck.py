"""Central finite-difference oracle for the tape-based gradients."""

import numpy as np

from specres.tensor import Tape, Tensor, backward


def numeric_grad(f, arrays, wrt, h=1e-4):
    """d f(arrays) / d arrays[wrt] by central differences; f returns a float."""
    base = [a.copy() for a in arrays]
    x = base[wrt]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*base)
        x[i] = old - h
        fm = f(*base)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(build, arrays):
    """Run ``build(*tensors) -> scalar Tensor`` on a tape; return grads of every input."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*ts)
    backward(tape, out)
    return [t.grad for t in ts]


def rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + 1e-8))


def check(build, arrays, h=1e-4):
    """Max relative error across all inputs of ``build`` (64-bit)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def f(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    grads = analytic_grads(build, arrays)
    return max(rel_err(g, numeric_grad(f, arrays, k, h)) for k, g in enumerate(grads))
