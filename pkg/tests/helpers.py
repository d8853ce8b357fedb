"""Independent oracles shared by the test modules."""

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|), with a floor for near-zero entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def naive_matmul(a, b):
    n, k = len(a), len(b)
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def stratified_voronoi_weights(stations, mask, samples=1_000_000, seed=0):
    """Monte-Carlo area weights: jittered points per in-boundary cell, nearest-station assignment.

    Returns an (n_stations, H, W) array of estimated weights.
    """
    stations = np.asarray(stations, dtype=float)
    rows, cols = np.nonzero(mask)
    per_cell = max(int(np.sqrt(samples / len(rows))), 1)
    rng = np.random.default_rng(seed)
    u = (np.arange(per_cell) + 0.5) / per_cell
    gx, gy = np.meshgrid(u, u)
    gx, gy = gx.ravel(), gy.ravel()
    counts = np.zeros((len(stations),) + mask.shape)
    for r, c in zip(rows, cols):
        jx = gx + rng.uniform(-0.5, 0.5, gx.size) / per_cell
        jy = gy + rng.uniform(-0.5, 0.5, gy.size) / per_cell
        px, py = c + jx, r + jy
        d2 = (px[:, None] - stations[None, :, 0]) ** 2 + (py[:, None] - stations[None, :, 1]) ** 2
        owner = np.argmin(d2, axis=1)
        counts[:, r, c] = np.bincount(owner, minlength=len(stations))
    totals = counts.sum(axis=(1, 2), keepdims=True)
    return counts / np.where(totals > 0, totals, 1)
