"""Random causal structures: DAG samplers, undirected families and subgraph extraction."""

from __future__ import annotations

import json
import math
import os
import warnings
from collections import deque
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

FAMILIES = ("erdos_renyi", "scale_free", "watts_strogatz", "stochastic_block",
            "geometric", "subgraph_extraction")


@dataclass
class Graph:
    """Directed adjacency over ``d`` variables; ``adjacency[i, j] == 1`` means i -> j."""

    adjacency: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got {a.shape}")
        a = (a != 0).astype(np.int8)
        if np.any(np.diag(a)):
            raise ValueError("self-loops are not allowed")
        self.adjacency = a

    @property
    def d(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    def parents(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[:, j])

    def permuted(self, perm) -> "Graph":
        """Relabel so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        return Graph(self.adjacency[np.ix_(perm, perm)], dict(self.meta))


@dataclass
class GraphModelConfig:
    family: str = "erdos_renyi"
    edges_per_node: float = 2.0
    power: float = 1.0
    lattice_k: int = 2
    rewire_p: float = 0.3
    blocks: int = 3
    damping: float = 0.1
    radius: float = 0.3
    source_size: int = 60
    source_family: str = "scale_free"
    source_power: float = 1.0
    percentile: float = 20.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown graph family {self.family!r}")
        if self.edges_per_node < 0:
            raise ValueError("edges_per_node must be >= 0")
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must be in (0, 100]")
        if not 0 <= self.rewire_p <= 1 or not 0 <= self.damping <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.blocks < 1 or self.radius < 0:
            raise ValueError("blocks >= 1 and radius >= 0 required")


def topological_order(adj: np.ndarray) -> list[int] | None:
    """Kahn's algorithm; ``None`` when the graph has a cycle."""
    adj = np.asarray(adj) != 0
    indeg = adj.sum(axis=0).astype(int)
    queue = deque(np.flatnonzero(indeg == 0).tolist())
    order = []
    while queue:
        i = queue.popleft()
        order.append(i)
        for j in np.flatnonzero(adj[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                queue.append(int(j))
    return order if len(order) == adj.shape[0] else None


def is_acyclic(g: Graph | np.ndarray) -> bool:
    adj = g.adjacency if isinstance(g, Graph) else g
    return topological_order(adj) is not None


def _orient_upper(skeleton: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # random relabeling first, so node index carries no information about causal order
    d = skeleton.shape[0]
    perm = rng.permutation(d)
    relabeled = skeleton[np.ix_(perm, perm)]
    return np.triu(relabeled, k=1)


def sample_erdos_renyi(d: int, e: float, rng: np.random.Generator) -> Graph:
    if d < 1 or e < 0:
        raise ValueError("need d >= 1 and e >= 0")
    if d == 1:
        return Graph(np.zeros((1, 1)), {"family": "erdos_renyi"})
    p = min(1.0, 2.0 * e / (d - 1))
    upper = np.triu(rng.random((d, d)) < p, k=1)
    perm = rng.permutation(d)
    return Graph(upper[np.ix_(perm, perm)], {"family": "erdos_renyi"})


def sample_scale_free(d: int, e: float, power: float, rng: np.random.Generator,
                      direction: str = "random") -> Graph:
    """Sequential preferential attachment with weights ``(degree + 1) ** power``.

    ``direction`` picks whether attachment edges point from the new node to the
    existing ones ("out"), the other way ("in"), or a fair coin per graph.
    """
    if d < 1 or e < 0:
        raise ValueError("need d >= 1 and e >= 0")
    if direction == "random":
        direction = "out" if rng.random() < 0.5 else "in"
    if direction not in ("in", "out"):
        raise ValueError(f"bad direction {direction!r}")
    adj = np.zeros((d, d), dtype=np.int8)
    deg = np.zeros(d)
    base = int(math.floor(e))
    frac = e - base
    for t in range(1, d):
        m = base + (1 if rng.random() < frac else 0)
        m = min(m, t)
        if m == 0:
            continue
        w = (deg[:t] + 1.0) ** power
        targets = rng.choice(t, size=m, replace=False, p=w / w.sum())
        for s in targets:
            if direction == "out":
                adj[t, s] = 1
            else:
                adj[s, t] = 1
        deg[targets] += 1
        deg[t] += m
    perm = rng.permutation(d)
    return Graph(adj[np.ix_(perm, perm)], {"family": "scale_free", "direction": direction})


def sample_watts_strogatz(d: int, k: int, rewire_p: float, rng: np.random.Generator) -> Graph:
    if d < 1:
        raise ValueError("need d >= 1")
    k = min(k, d - 1)
    seed = int(rng.integers(2**31))
    skel = nx.to_numpy_array(nx.watts_strogatz_graph(d, k, rewire_p, seed=seed),
                             nodelist=range(d))
    return Graph(_orient_upper(skel, rng), {"family": "watts_strogatz"})


def sample_stochastic_block(d: int, blocks: int, e: float, damping: float,
                            rng: np.random.Generator) -> Graph:
    """Community graph; inter-block pairs use the intra-block probability times ``damping``.

    The intra-block probability is tuned so the expected edge count is ``e * d``.
    """
    if d < 1 or blocks < 1:
        raise ValueError("need d >= 1 and blocks >= 1")
    if d == 1:
        return Graph(np.zeros((1, 1)), {"family": "stochastic_block"})
    z = rng.integers(blocks, size=d)
    same = z[:, None] == z[None, :]
    iu = np.triu_indices(d, k=1)
    n_intra = int(same[iu].sum())
    n_inter = len(iu[0]) - n_intra
    denom = n_intra + damping * n_inter
    p_in = min(1.0, e * d / denom) if denom > 0 else 0.0
    prob = np.where(same, p_in, p_in * damping)
    upper = np.triu(rng.random((d, d)) < prob, k=1)
    skel = (upper | upper.T).astype(float)
    return Graph(_orient_upper(skel, rng), {"family": "stochastic_block"})


def sample_geometric(d: int, radius: float, rng: np.random.Generator) -> Graph:
    if d < 1:
        raise ValueError("need d >= 1")
    pts = rng.random((d, 2))
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    skel = (dist <= radius).astype(float)
    np.fill_diagonal(skel, 0)
    return Graph(_orient_upper(skel, rng), {"family": "geometric"})


# ----------------------------------------------------------------------------
# modularity-greedy subgraph extraction


def skeleton(adj: np.ndarray) -> np.ndarray:
    a = np.asarray(adj) != 0
    return (a | a.T).astype(np.int8)


def partition_modularity(undirected: np.ndarray, members: np.ndarray) -> float:
    """Modularity of the two-community split (members, rest) of an undirected graph."""
    a = np.asarray(undirected, dtype=float)
    deg = a.sum(axis=1)
    m = deg.sum() / 2.0
    if m == 0:
        return 0.0
    inside = np.zeros(a.shape[0], dtype=bool)
    inside[np.asarray(members, dtype=int)] = True
    e_in = a[np.ix_(inside, inside)].sum() / 2.0
    e_out = a[np.ix_(~inside, ~inside)].sum() / 2.0
    d_in, d_out = deg[inside].sum(), deg[~inside].sum()
    return e_in / m - (d_in / (2 * m)) ** 2 + e_out / m - (d_out / (2 * m)) ** 2


def _grow(und: np.ndarray, deg: np.ndarray, m: float, seed: int, d_target: int,
          percentile: float, rng: np.random.Generator) -> list[int]:
    n = und.shape[0]
    inside = np.zeros(n, dtype=bool)
    inside[seed] = True
    order = [seed]
    e_in = 0.0
    d_in = deg[seed]
    total = 2.0 * m
    # links[c] = number of edges from c into the current set
    links = und[seed].astype(float).copy()
    while len(order) < d_target:
        cand = np.flatnonzero((links > 0) & ~inside)
        if cand.size == 0:
            break
        e_in_new = e_in + links[cand]
        d_in_new = d_in + deg[cand]
        cut_new = (d_in_new - 2 * e_in_new)
        e_out_new = m - e_in_new - cut_new
        q = (e_in_new / m - (d_in_new / total) ** 2
             + e_out_new / m - ((total - d_in_new) / total) ** 2)
        keep = max(1, int(math.ceil(percentile / 100.0 * cand.size)))
        cutoff = np.sort(q)[::-1][keep - 1]
        pool = cand[q >= cutoff - 1e-12]
        pick = int(pool[rng.integers(pool.size)]) if pool.size > 1 else int(pool[0])
        e_in += links[pick]
        d_in += deg[pick]
        inside[pick] = True
        order.append(pick)
        links += und[pick]
    return order


def extract_subgraph(source: Graph, d_target: int, rng: np.random.Generator,
                     percentile: float = 20.0, seed_node: int | None = None,
                     max_restarts: int = 10) -> Graph:
    """Grow a node set from a random seed, adding one top-``percentile`` modular neighbor at a time.

    Returns the induced directed subgraph (nodes kept in source order). The
    extraction order and the source node ids are stored in ``meta``.
    """
    if d_target > source.d or d_target < 1:
        raise ValueError(f"cannot extract {d_target} nodes from a {source.d}-node source")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must be in (0, 100]")
    und = skeleton(source.adjacency).astype(float)
    deg = und.sum(axis=1)
    m = deg.sum() / 2.0
    best: list[int] = []
    for attempt in range(max_restarts):
        seed = seed_node if (seed_node is not None and attempt == 0) else int(rng.integers(source.d))
        if m == 0:
            order = [seed]
        else:
            order = _grow(und, deg, m, seed, d_target, percentile, rng)
        if len(order) > len(best):
            best = order
        if len(best) == d_target:
            break
    incomplete = len(best) < d_target
    if incomplete:
        warnings.warn(f"subgraph extraction stalled at {len(best)} of {d_target} nodes")
    nodes = np.sort(best)
    sub = source.adjacency[np.ix_(nodes, nodes)]
    return Graph(sub, {"family": "subgraph_extraction", "nodes": nodes.tolist(),
                       "order": list(map(int, best)), "incomplete": incomplete})


def sample_graph(cfg: GraphModelConfig, d: int, rng: np.random.Generator) -> Graph:
    f = cfg.family
    if f == "erdos_renyi":
        return sample_erdos_renyi(d, cfg.edges_per_node, rng)
    if f == "scale_free":
        return sample_scale_free(d, cfg.edges_per_node, cfg.power, rng)
    if f == "watts_strogatz":
        return sample_watts_strogatz(d, cfg.lattice_k, cfg.rewire_p, rng)
    if f == "stochastic_block":
        return sample_stochastic_block(d, cfg.blocks, cfg.edges_per_node, cfg.damping, rng)
    if f == "geometric":
        return sample_geometric(d, cfg.radius, rng)
    if f == "subgraph_extraction":
        size = max(cfg.source_size, d)
        if cfg.source_family == "erdos_renyi":
            src = sample_erdos_renyi(size, cfg.edges_per_node, rng)
        else:
            src = sample_scale_free(size, cfg.edges_per_node, cfg.source_power, rng)
        g = extract_subgraph(src, d, rng, percentile=cfg.percentile)
        # extracted subgraphs can come out smaller on a fragmented source; pad with isolated nodes
        if g.d < d:
            pad = np.zeros((d, d), dtype=np.int8)
            pad[:g.d, :g.d] = g.adjacency
            g = Graph(pad, g.meta)
        perm = rng.permutation(d)
        return g.permuted(perm)
    raise ValueError(f"unknown graph family {f!r}")


# ----------------------------------------------------------------------------
# graph files: CSV of 0/1 plus a JSON sidecar


def write_graph(path: str | os.PathLike, g: Graph, family: str | None = None,
                seed: int | None = None) -> None:
    path = os.fspath(path)
    np.savetxt(path, g.adjacency, fmt="%d", delimiter=",")
    side = {"d": g.d, "family": family or g.meta.get("family"), "seed": seed}
    with open(os.path.splitext(path)[0] + ".json", "w") as fh:
        json.dump(side, fh, sort_keys=True)
        fh.write("\n")


def read_graph(path: str | os.PathLike) -> Graph:
    a = np.loadtxt(os.fspath(path), delimiter=",", ndmin=2)
    return Graph(a)
