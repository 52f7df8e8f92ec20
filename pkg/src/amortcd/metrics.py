"""Structural and ranking metrics for predicted edge beliefs.

SID follows the parent-adjustment reading: for every ordered pair (i, j) the
predicted parents of i are used as an adjustment set for the effect of i on j,
and the pair counts as an error when that adjustment is invalid in the true
graph (adjustment criterion: no forbidden nodes, and d-separation in the
proper back-door graph).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .graphs import Graph, is_acyclic


def _adj(g) -> np.ndarray:
    a = g.adjacency if isinstance(g, Graph) else np.asarray(g)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square adjacency matrix, got {a.shape}")
    return (a != 0).astype(np.int8)


def threshold(theta: np.ndarray, tau: float = 0.5) -> Graph:
    """``g_ij = 1`` iff ``theta_ij > tau`` (strict); the diagonal is always 0."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    theta = np.asarray(theta, dtype=float)
    g = (theta > tau).astype(np.int8)
    np.fill_diagonal(g, 0)
    return Graph(g)


def shd(g, g2) -> int:
    """Edge insertions, deletions and reversals turning ``g2`` into ``g``; a reversal costs 1."""
    a, b = _adj(g), _adj(g2)
    if a.shape != b.shape:
        raise ValueError("graphs differ in size")
    diff = (a != b) | (a.T != b.T)
    return int(np.triu(diff, k=1).sum())


# ----------------------------------------------------------------------------
# SID


def _closure(a: np.ndarray) -> np.ndarray:
    """reach[i, j] = True iff there is a directed path of length >= 1 from i to j."""
    d = a.shape[0]
    reach = a.astype(bool)
    for k in range(d):  # Warshall
        reach |= reach[:, k:k + 1] & reach[k:k + 1, :]
    return reach


def _d_separated(a: np.ndarray, x: int, y: int, z: np.ndarray) -> bool:
    """x and y d-separated given boolean node mask ``z``; ancestral moral graph test."""
    d = a.shape[0]
    keep = z.copy()
    keep[x] = keep[y] = True
    # ancestors of {x, y} u z
    frontier = list(np.flatnonzero(keep))
    while frontier:
        v = frontier.pop()
        for p in np.flatnonzero(a[:, v]):
            if not keep[p]:
                keep[p] = True
                frontier.append(p)
    sub = a * np.outer(keep, keep)
    moral = sub | sub.T
    for c in np.flatnonzero(keep):
        pa = np.flatnonzero(sub[:, c])
        if len(pa) > 1:
            moral[np.ix_(pa, pa)] = 1
    np.fill_diagonal(moral, 0)
    open_ = keep & ~z
    seen = np.zeros(d, dtype=bool)
    seen[x] = True
    stack = [x]
    while stack:
        v = stack.pop()
        for w in np.flatnonzero(moral[v] & open_):
            if w == y:
                return False
            if not seen[w]:
                seen[w] = True
                stack.append(w)
    return True


class _TrueGraph:
    """Per-truth quantities reused across every predicted graph."""

    def __init__(self, a: np.ndarray):
        self.a = a
        self.d = a.shape[0]
        self.reach = _closure(a)
        self._valid: dict[tuple[int, int, int], bool] = {}

    def adjustment_valid(self, i: int, j: int, zmask: int) -> bool:
        key = (i, j, zmask)
        hit = self._valid.get(key)
        if hit is None:
            hit = self._valid[key] = self._check(i, j, zmask)
        return hit

    def _check(self, i: int, j: int, zmask: int) -> bool:
        d, a, reach = self.d, self.a, self.reach
        z = np.array([(zmask >> k) & 1 for k in range(d)], dtype=bool)
        # nodes other than i on directed paths i -> ... -> j
        on_path = reach[i] & (reach[:, j] | (np.arange(d) == j))
        forbidden = on_path | reach[on_path].any(axis=0)
        if np.any(z & forbidden):
            return False
        pbd = a.copy()
        pbd[i, on_path] = 0  # drop the first edge of every proper causal path
        return _d_separated(pbd, i, j, z)


@lru_cache(maxsize=4096)
def _true_graph(key: bytes, d: int) -> _TrueGraph:
    return _TrueGraph(np.frombuffer(key, dtype=np.int8).reshape(d, d).copy())


def break_cycles(g) -> tuple[np.ndarray, bool]:
    """Acyclic subgraph by dropping back-edges of a depth-first search (ascending node order)."""
    a = _adj(g).copy()
    d = a.shape[0]
    state = np.zeros(d, dtype=np.int8)  # 0 new, 1 on stack, 2 done
    removed = False
    for root in range(d):
        if state[root]:
            continue
        state[root] = 1
        stack = [(root, iter(np.flatnonzero(a[root]).tolist()))]
        while stack:
            v, it = stack[-1]
            w = next(it, None)
            if w is None:
                state[v] = 2
                stack.pop()
            elif state[w] == 1:
                a[v, w] = 0
                removed = True
            elif state[w] == 0:
                state[w] = 1
                stack.append((w, iter(np.flatnonzero(a[w]).tolist())))
    return a, removed


def sid_with_flag(g_true, g_pred) -> tuple[int, bool]:
    """SID and whether a cyclic prediction had to be reduced to a DAG first."""
    t, p = _adj(g_true), _adj(g_pred)
    if t.shape != p.shape:
        raise ValueError("graphs differ in size")
    if not is_acyclic(t):
        raise ValueError("SID needs an acyclic true graph")
    flagged = False
    if not is_acyclic(p):
        p, flagged = break_cycles(p)
    d = t.shape[0]
    tg = _true_graph(t.tobytes(), d)
    weights = 1 << np.arange(d)
    errors = 0
    for i in range(d):
        pa = p[:, i].astype(bool)
        zmask = int(weights[pa].sum())
        for j in range(d):
            if j == i:
                continue
            if pa[j]:
                # predicted parent: the estimate says "no effect of i on j"
                errors += int(tg.reach[i, j])
            else:
                errors += int(not tg.adjustment_valid(i, j, zmask))
    return errors, flagged


def sid(g_true, g_pred) -> int:
    return sid_with_flag(g_true, g_pred)[0]


# ----------------------------------------------------------------------------
# ranking metrics


def _offdiag(x: np.ndarray) -> np.ndarray:
    d = x.shape[0]
    return x[~np.eye(d, dtype=bool)]


def auroc_score(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Mann-Whitney rank statistic; ties count 1/2. None for single-class labels."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    pos, neg = int(labels.sum()), int((~labels).sum())
    if pos == 0 or neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def auprc_score(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Step-wise average precision over distinct thresholds (tied scores enter together)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    pos = int(labels.sum())
    if pos == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie group
    tp, k = tp[last], last + 1.0
    precision = tp / k
    recall = tp / pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pr_roc(theta: np.ndarray, g_true) -> tuple[float | None, float | None]:
    """(auprc, auroc) over the off-diagonal entries."""
    theta = np.asarray(theta, dtype=float)
    t = _adj(g_true)
    if theta.shape != t.shape or t.shape[0] < 2:
        raise ValueError("beliefs and truth must be equal d x d with d >= 2")
    s, y = _offdiag(theta), _offdiag(t)
    return auprc_score(s, y), auroc_score(s, y)


# ----------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    shd: int
    sid: int
    precision: float
    recall: float
    f1: float
    auprc: float | None
    auroc: float | None
    acyclic: bool
    edges_predicted: int
    sid_cycles_removed: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def precision_recall_f1(g_true, g_pred) -> tuple[float, float, float]:
    t, p = _adj(g_true), _adj(g_pred)
    tp = int((t & p).sum())
    npred, ntrue = int(p.sum()), int(t.sum())
    prec = tp / npred if npred else 0.0
    rec = tp / ntrue if ntrue else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


def evaluate(theta: np.ndarray, g_true, tau: float = 0.5) -> EvalReport:
    theta = np.asarray(theta, dtype=float)
    t = _adj(g_true)
    if theta.shape != t.shape:
        raise ValueError(f"beliefs {theta.shape} vs truth {t.shape}")
    pred = threshold(theta, tau).adjacency
    prec, rec, f1 = precision_recall_f1(t, pred)
    s, flagged = sid_with_flag(t, pred)
    auprc, auroc = pr_roc(theta, t) if t.shape[0] >= 2 else (None, None)
    return EvalReport(shd(t, pred), s, prec, rec, f1, auprc, auroc, is_acyclic(pred),
                      int(pred.sum()), flagged)


def aggregate(reports: Sequence[EvalReport]) -> dict:
    """Mean and standard error per numeric field (absent values skipped)."""
    out = {"tasks": len(reports)}
    for f in dataclasses.fields(EvalReport):
        vals = [float(getattr(r, f.name)) for r in reports if getattr(r, f.name) is not None]
        if not vals:
            out[f.name] = {"mean": None, "stderr": None, "count": 0}
            continue
        v = np.array(vals)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        out[f.name] = {"mean": float(v.mean()), "stderr": se, "count": len(v)}
    return out


def report_lines(reports: Iterable[EvalReport]) -> list[str]:
    """One JSON line per task, then the aggregate row."""
    reports = list(reports)
    lines = [r.to_json() for r in reports]
    lines.append(json.dumps({"aggregate": aggregate(reports)}, sort_keys=True))
    return lines


def cyclic_fraction(thetas: Iterable[np.ndarray], tau: float = 0.5) -> float:
    flags = [not is_acyclic(threshold(t, tau)) for t in thetas]
    return float(np.mean(flags)) if flags else 0.0
