"""Independent reference computations shared by the test modules."""

import itertools

import numpy as np


def central_fd(f, x, h):
    """Central finite-difference gradient of scalar ``f`` at flat ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def wilcoxon_enumerate(diffs):
    """Two-sided exact signed-rank p-value by listing all 2^n sign patterns.

    Zeros are dropped; tied magnitudes get average ranks.
    """
    d = np.asarray([v for v in diffs if v != 0], dtype=np.float64)
    n = d.size
    if n == 0:
        return 1.0
    a = np.abs(d)
    ranks = np.empty(n)
    for i in range(n):
        ranks[i] = (np.sum(a < a[i]) + 1 + np.sum(a <= a[i])) / 2
    w_obs = ranks[d > 0].sum()
    # symmetric null: the lower tail at min(W+, W-) doubled
    w_small = min(w_obs, ranks.sum() - w_obs)
    tail = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        tail += w <= w_small + 1e-9
    return min(1.0, 2 * tail / 2**n)


def ssim_single_window(a, b, cy, cx, size, sigma, L):
    """SSIM of one window whose top-left corner is (cy, cx), by direct sums."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    w = g / g.sum()
    pa = a[cy:cy + size, cx:cx + size]
    pb = b[cy:cy + size, cx:cx + size]
    mu_a = (w * pa).sum()
    mu_b = (w * pb).sum()
    va = (w * (pa - mu_a) ** 2).sum()
    vb = (w * (pb - mu_b) ** 2).sum()
    cov = (w * (pa - mu_a) * (pb - mu_b)).sum()
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
