"""Central finite differences, used as the independent oracle for reverse mode."""
import numpy as np

from amsam.tensor import Tensor, backward


def numeric_grad(fn, arrays, h=1e-5):
    """d fn(*arrays) / d arrays[i] by central differences; ``fn`` returns a float."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = fn(*arrays)
            arr[idx] = old - h
            down = fn(*arrays)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check(op, *arrays, weight_seed=0, h=1e-5):
    """Compare reverse-mode and central-difference gradients of ``sum(w * op(*xs))``.

    A fixed random weighting makes the scalar depend on every output element.
    Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    w = np.random.default_rng(weight_seed).normal(size=probe.shape)

    def scalar(*xs):
        return float((op(*[Tensor(x) for x in xs]).data * w).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward((op(*leaves) * Tensor(w)).sum())
    expected = numeric_grad(scalar, arrays, h=h)
    return max(rel_err(l.grad, e) for l, e in zip(leaves, expected))
