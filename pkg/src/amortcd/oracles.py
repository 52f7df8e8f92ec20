"""Slow reference implementations used to check the fast code paths.

Everything here is deliberately naive: explicit loops, path enumeration,
all-pairs comparisons. Nothing in the library proper imports this module.
"""

from __future__ import annotations

from itertools import product
from typing import Callable

import numpy as np


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def finite_difference(f: Callable[[], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        hi = f()
        flat[k] = old - eps
        lo = f()
        flat[k] = old
        g[k] = (hi - lo) / (2 * eps)
    return grad


def spectral_radius(w: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(w)))) if w.size else 0.0


# ----------------------------------------------------------------------------
# graphs


def all_dags(d: int) -> list[np.ndarray]:
    """Every labelled DAG on d nodes (3, 25, 543 for d = 2, 3, 4)."""
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    out = []
    for states in product((0, 1, 2), repeat=len(pairs)):
        a = np.zeros((d, d), dtype=np.int8)
        for (i, j), s in zip(pairs, states):
            if s == 1:
                a[i, j] = 1
            elif s == 2:
                a[j, i] = 1
        if _acyclic(a):
            out.append(a)
    return out


def _acyclic(a: np.ndarray) -> bool:
    d = a.shape[0]
    m = np.eye(d, dtype=np.int64)
    for _ in range(d):
        m = (m @ a > 0).astype(np.int64)
        if np.trace(m):
            return False
    return True


def _descendants(a: np.ndarray, v: int) -> set[int]:
    out, stack = set(), [v]
    while stack:
        u = stack.pop()
        for w in range(a.shape[0]):
            if a[u, w] and w not in out:
                out.add(w)
                stack.append(w)
    return out


def _simple_paths(a: np.ndarray, x: int, y: int, directed: bool):
    """All simple paths x..y; undirected ones walk the skeleton."""
    d = a.shape[0]

    def nbrs(u):
        return [w for w in range(d) if a[u, w] or (not directed and a[w, u])]

    path = [x]

    def rec(u):
        if u == y:
            yield list(path)
            return
        for w in nbrs(u):
            if w not in path:
                path.append(w)
                yield from rec(w)
                path.pop()

    yield from rec(x)


def _path_blocked(a: np.ndarray, path: list[int], z: set[int]) -> bool:
    for k in range(1, len(path) - 1):
        u, v, w = path[k - 1], path[k], path[k + 1]
        collider = a[u, v] and a[w, v]
        if collider:
            if v not in z and not (_descendants(a, v) & z):
                return True
        elif v in z:
            return True
    return False


def adjustment_valid(a: np.ndarray, i: int, j: int, z: set[int]) -> bool:
    """Adjustment criterion by path enumeration: forbidden set, then every non-causal path blocked."""
    causal = list(_simple_paths(a, i, j, directed=True))
    on_causal = {v for p in causal for v in p[1:]}
    forbidden = set(on_causal)
    for v in on_causal:
        forbidden |= _descendants(a, v)
    if z & forbidden:
        return False
    causal_set = {tuple(p) for p in causal}
    for p in _simple_paths(a, i, j, directed=False):
        if tuple(p) in causal_set:
            continue
        if not _path_blocked(a, p, z):
            return False
    return True


def sid_bruteforce(g_true: np.ndarray, g_pred: np.ndarray) -> int:
    a = np.asarray(g_true)
    h = np.asarray(g_pred)
    d = a.shape[0]
    errors = 0
    for i in range(d):
        pa = {k for k in range(d) if h[k, i]}
        de = _descendants(a, i)
        for j in range(d):
            if j == i:
                continue
            if j in pa:
                errors += int(j in de)
            else:
                errors += int(not adjustment_valid(a, i, j, pa))
    return errors


def shd_pairs(g: np.ndarray, g2: np.ndarray) -> int:
    d = g.shape[0]
    total = 0
    for i in range(d):
        for j in range(i + 1, d):
            if (g[i, j], g[j, i]) != (g2[i, j], g2[j, i]):
                total += 1
    return total


# ----------------------------------------------------------------------------
# ranking


def auroc_pairs(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def auprc_sweep(scores: np.ndarray, labels: np.ndarray) -> float:
    """Sum over all distinct thresholds (descending) of recall gain times precision."""
    labels = np.asarray(labels).astype(bool)
    pos = labels.sum()
    prev_recall = 0.0
    total = 0.0
    for t in sorted(set(np.asarray(scores).tolist()), reverse=True):
        sel = np.asarray(scores) >= t
        tp = float((sel & labels).sum())
        precision = tp / sel.sum()
        recall = tp / pos
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total
