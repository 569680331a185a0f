"""Independent reference computations used by the tests.

Everything here works on dense matrices or plain loops and shares no code
with the package internals beyond the public data types.
"""
import numpy as np


def random_edges(rng, n, m):
    return rng.integers(0, n, size=(m, 2))


def dense_adjacency(edges, n):
    a = np.zeros((n, n), dtype=bool)
    for u, v in edges:
        if u != v:
            a[u, v] = a[v, u] = True
    return a


def dense_normalized(a):
    a_tilde = a.astype(float) + np.eye(len(a))
    d = a_tilde.sum(axis=1)
    dinv = np.diag(1.0 / np.sqrt(d))
    return dinv @ a_tilde @ dinv


def hop_matrix(a, k_max=None):
    """Entry (i, j) = first k with (A^k)_ij > 0, 0 if never reached."""
    n = len(a)
    k_max = k_max or max(n, 1)
    A = a.astype(np.int64)
    N = A.copy()  # N(1) = A
    power = A.copy()
    for k in range(2, k_max + 1):
        power = np.minimum(power @ A, 1)  # boolean power, avoids overflow
        new = (power > 0) & (N == 0)
        N[new] = k
    return N


def sld_by_matrix_power(a, labels, train_mask):
    n = len(a)
    N = hop_matrix(a)
    out = np.full(n, -1)
    for i in range(n):
        if labels[i] < 0:
            continue
        if train_mask[i]:
            out[i] = 0
            continue
        targets = [j for j in range(n) if train_mask[j] and labels[j] == labels[i] and N[i, j] > 0]
        if targets:
            out[i] = min(N[i, j] for j in targets)
    return out


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """max |a - n| / max |n| (infinity-norm relative error)."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
