"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module in ``_ckernels`` must
agree with them to floating-point round-off.
"""
import numpy as np


def im2col3x3(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, n, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky * 3 + kx] = xp[:, :, ky:ky + h, kx:kx + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * h * w)


def col2im3x3(cols, n, c, h, w):
    cols = cols.reshape(c, 9, n, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            xp[:, :, ky:ky + h, kx:kx + w] += cols[:, ky * 3 + kx].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1])


def maxpool2x2(x):
    n, c, h, w = x.shape
    r = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = r.argmax(axis=-1)
    out = np.take_along_axis(r, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int8)


def maxpool2x2_backward(g, arg, h, w):
    n, c, hh, ww = g.shape
    z = np.zeros((n, c, hh, ww, 4), dtype=g.dtype)
    np.put_along_axis(z, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    return np.ascontiguousarray(
        z.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    )


def pairwise_minkowski(a, b, weights, p):
    diff = np.abs((a[:, None, :] - b[None, :, :]) * weights[None, None, :])
    if p == 2.0:
        return np.sqrt((diff * diff).sum(axis=-1))
    if p == 1.0:
        return diff.sum(axis=-1)
    return (diff ** p).sum(axis=-1) ** (1.0 / p)


def same_label_kth_distance(x, labels, k):
    """Distance from each point to its k[i]-th nearest neighbour sharing its label."""
    d = np.abs(x[:, None] - x[None, :])
    d[labels[:, None] != labels[None, :]] = np.inf
    np.fill_diagonal(d, np.inf)
    d.sort(axis=1)
    return d[np.arange(len(x)), np.asarray(k) - 1]


def count_within(x, radius):
    """Number of points (self included) within ``radius[i]`` of ``x[i]``."""
    d = np.abs(x[None, :] - x[:, None])
    return (d <= np.asarray(radius)[:, None]).sum(axis=1).astype(np.int64)
