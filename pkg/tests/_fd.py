"""Central finite-difference gradient checking at 64-bit precision."""
import numpy as np

from cohortgraph.tensor import Tensor, no_grad

STEP = 1e-5


def rel_error(analytic, numeric) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-6)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(fn, arrays, rng, max_coords=48, wrt=None) -> float:
    """Worst relative error between backprop and central differences.

    The scalar checked is ``sum(fn(*inputs) * R)`` for a fixed random ``R``;
    ``fn`` must be deterministic.  At most ``max_coords`` coordinates per
    input are perturbed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()

    def value(values):
        with no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in values]).data * proj))

    worst = 0.0
    for i in wrt:
        size = arrays[i].size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        grad = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        analytic, numeric = [], []
        for c in coords:
            pos = np.unravel_index(c, arrays[i].shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][pos] += STEP
            minus[i][pos] -= STEP
            numeric.append((value(plus) - value(minus)) / (2 * STEP))
            analytic.append(grad[pos])
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def away_from_zero(rng, shape, margin=0.05):
    """Random values whose magnitude exceeds ``margin`` (keeps kinks out of the stencil)."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)
