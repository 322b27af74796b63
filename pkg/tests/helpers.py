"""Independent oracles shared by the test modules."""

import numpy as np

from bcmda.tensor import Tensor, precision


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn, arrays, index, h=1e-5, coords=None):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``.

    ``coords`` restricts the check to a subset of flat positions.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    flat = target.reshape(-1)
    positions = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for k in positions:
        orig = flat[k]
        flat[k] = orig + h
        up = fn(*base)
        flat[k] = orig - h
        down = fn(*base)
        flat[k] = orig
        out[k] = (up - down) / (2 * h)
    return out.reshape(target.shape)


def analytic_grads(build, arrays):
    """Gradients of ``build(*tensors)`` w.r.t. every input, in float64."""
    with precision(np.float64):
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        loss = build(*ts)
        loss.backward()
    return [t.grad for t in ts]


def scalar_fn(build):
    def fn(*arrays):
        with precision(np.float64):
            return float(build(*[Tensor(a) for a in arrays]).data)

    return fn


def brute_directed(src, dst, boundary):
    """All-pairs nearest boundary distances, O(n^2)."""
    ps = np.argwhere(boundary(src)).astype(np.float64)
    pd = np.argwhere(boundary(dst)).astype(np.float64)
    d = np.sqrt(((ps[:, None, :] - pd[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1)
