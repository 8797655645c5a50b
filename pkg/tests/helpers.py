"""Independent oracles used across the test suite."""

import numpy as np

from catnet import tensor as T


def numerical_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every element of every array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f()
            arr[idx] = orig - h
            fm = f()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), 1e-12))


def gradcheck(fn, arrays, seed=0, h=1e-5):
    """Max relative error between backward() and finite differences of sum(fn(*x) * R)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar():
        with T.no_grad():
            return float(np.sum(fn(*[T.Tensor(a) for a in arrays]).data * proj))

    loss = T.tsum(out * T.Tensor(proj))
    T.backward(loss)
    numeric = numerical_grad(scalar, arrays, h)
    return max(rel_error(t.grad, n) for t, n in zip(tensors, numeric))


def naive_dft_frames(x, n, hop, win, center=True):
    """Per-frame DFT with explicit loops over frames and bins."""
    x = np.asarray(x, dtype=np.float64)
    if center:
        x = np.concatenate([np.zeros(n // 2), x, np.zeros(n // 2)])
    while (len(x) - n) % hop:
        x = np.append(x, 0.0)
    frames = []
    start = 0
    while start + n <= len(x):
        seg = x[start : start + n] * win
        row = []
        for k in range(n):
            phase = -2j * np.pi * k * np.arange(n) / n
            row.append(np.dot(seg, np.exp(phase)))
        frames.append(row)
        start += hop
    return np.array(frames)
