"""Simplified single-cell expression simulator.

Clean expression comes from Euler-Maruyama integration of a chemical
Langevin equation over the regulatory graph, one independent chain per cell,
snapshotted at random times after burn-in. Technical noise is then applied in
four stages (outlier genes, library size, dropout, Poisson UMI counts) and the
counts are CPM-normalized and divided by the median non-zero value.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .domains import DomainConfig
from .graphs import Graph, sample_graph, topological_order
from .scm import Dataset


class DivergenceError(FloatingPointError):
    pass


@dataclass
class GrnParams:
    k: np.ndarray          # (d, d) signed interaction strengths, nonzero only on edges
    b: np.ndarray          # (d, c) master-regulator production rates per cell type
    hill: np.ndarray       # (d, d) Hill coefficients
    half_response: np.ndarray  # (d, d) Hill thresholds
    decay: np.ndarray      # (d,)
    noise: np.ndarray      # (d,) process-noise scales

    @property
    def d(self) -> int:
        return self.k.shape[0]

    @property
    def cell_types(self) -> int:
        return self.b.shape[1]


@dataclass
class TechNoiseParams:
    p_outlier: float = 0.01
    outlier_mu: float = 0.8
    outlier_sigma: float = 1.0
    lib_mu: float = 6.0
    lib_sigma: float = 0.4
    dropout_percentile: float = 45.0
    dropout_temperature: float = 8.0

    def __post_init__(self):
        if not 0 <= self.p_outlier <= 1:
            raise ValueError("p_outlier must be in [0, 1]")
        if not 0 <= self.dropout_percentile <= 100:
            raise ValueError("dropout percentile must be in [0, 100]")
        if self.dropout_temperature <= 0 or self.outlier_sigma < 0 or self.lib_sigma < 0:
            raise ValueError("temperature must be positive and log-normal scales non-negative")


# desk presets; "in_dist" for training, the others stand in for distinct sequencing technologies
TECH_NOISE_PRESETS = {
    "in_dist": TechNoiseParams(0.01, 0.8, 1.0, 6.0, 0.4, 45.0, 8.0),
    "dropseq": TechNoiseParams(0.01, 3.0, 0.8, 4.6, 0.4, 82.0, 8.0),
    "smartseq": TechNoiseParams(0.01, 0.8, 1.0, 6.5, 0.4, 30.0, 6.0),
    "tenx": TechNoiseParams(0.02, 1.5, 1.0, 5.0, 0.4, 70.0, 7.0),
}


@dataclass
class CountMatrix:
    counts: np.ndarray
    normalized: np.ndarray
    all_zero: bool = False


def hill(x: np.ndarray, gamma, half) -> np.ndarray:
    xg = np.power(np.maximum(x, 0.0), gamma)
    return xg / (xg + np.power(half, gamma))


def production(x: np.ndarray, params: GrnParams, types: np.ndarray, sources: np.ndarray,
               knocked: np.ndarray | None) -> np.ndarray:
    """Production rates for every cell (rows of ``x``)."""
    k = params.k
    act = np.maximum(k, 0.0)
    rep = np.maximum(-k, 0.0)
    h = hill(x[:, :, None], params.hill[None], params.half_response[None])  # (n, i, j)
    p = (act[None] * h + rep[None] * (1.0 - h)).sum(axis=1)
    p[:, sources] = params.b[sources][:, types].T
    if knocked is not None:
        p = np.where(knocked, 0.0, p)
    return p


def steady_state_guess(params: GrnParams, types: np.ndarray, sources: np.ndarray,
                       knocked: np.ndarray | None) -> np.ndarray:
    """Deterministic fixed point, exact after depth-many sweeps on a DAG."""
    x = np.zeros((len(types), params.d))
    for _ in range(params.d + 1):
        x = production(x, params, types, sources, knocked) / params.decay
    return x


def _integrate(params, types, sources, knocked, x0, dt, burn_in, extra, rng, cap):
    n, d = x0.shape
    lam, zeta = params.decay, params.noise
    snap_at = burn_in + rng.integers(0, extra + 1, size=n)
    out = np.empty_like(x0)
    x = x0.copy()
    sdt = np.sqrt(dt)
    for step in range(burn_in + extra + 1):
        hit = snap_at == step
        if hit.any():
            out[hit] = x[hit]
        p = production(x, params, types, sources, knocked)
        decay = lam * x
        dw1 = rng.normal(size=(n, d)) * sdt
        dw2 = rng.normal(size=(n, d)) * sdt
        x = x + (p - decay) * dt + zeta * (np.sqrt(p) * dw1 + np.sqrt(decay) * dw2)
        x = np.maximum(x, 0.0)
        if not np.all(np.isfinite(x)) or x.max(initial=0.0) > cap:
            return None
    return out


def simulate_clean(g: Graph, params: GrnParams, knockouts: np.ndarray | None, n: int,
                   rng: np.random.Generator, dt: float = 0.01, burn_in: int = 1000,
                   snapshot_window: int = 100, cap: float = 1e7,
                   types: np.ndarray | None = None) -> np.ndarray:
    """Steady-state snapshots, one independent Langevin chain per cell.

    ``knockouts`` is an optional n x d 0/1 mask; knocked-out genes have their
    production forced to zero. Cells are split evenly across cell types.
    """
    if params.d != g.d:
        raise ValueError("parameter and graph sizes differ")
    sources = np.flatnonzero(g.adjacency.sum(axis=0) == 0)
    reach = np.zeros(g.d, dtype=bool)
    reach[sources] = True
    for _ in range(g.d):
        reach |= (g.adjacency[reach].sum(axis=0) > 0)
    if not reach.all():
        raise ValueError("every gene must be a master regulator or reachable from one")
    if types is None:
        types = np.arange(n) % params.cell_types
    knocked = None if knockouts is None else np.asarray(knockouts, dtype=bool)
    x0 = steady_state_guess(params, types, sources, knocked)
    for attempt, step in enumerate((dt, dt / 2)):
        scale = int(round(dt / step))
        out = _integrate(params, types, sources, knocked, x0, step, burn_in * scale,
                         snapshot_window * scale, rng, cap)
        if out is not None:
            return out
    raise DivergenceError("Langevin integration diverged after shrinking dt")


def apply_technical_noise(clean: np.ndarray, tn: TechNoiseParams,
                          rng: np.random.Generator) -> CountMatrix:
    clean = np.asarray(clean, dtype=float)
    if np.any(clean < 0):
        raise ValueError("clean expression must be non-negative")
    n, d = clean.shape
    x = clean.copy()
    # 1. outlier genes
    outlier = rng.random(d) < tn.p_outlier
    if outlier.any():
        x[:, outlier] *= rng.lognormal(tn.outlier_mu, tn.outlier_sigma, size=outlier.sum())
    # 2. library size
    totals = x.sum(axis=1)
    lib = rng.lognormal(tn.lib_mu, tn.lib_sigma, size=n)
    factor = np.divide(lib, totals, out=np.zeros(n), where=totals > 0)
    x *= factor[:, None]
    # 3. dropout, driven by each entry's rank percentile within its cell
    q = rank_percentile(x)
    with np.errstate(over="ignore"):
        keep_prob = 1.0 / (1.0 + np.exp(-(q - tn.dropout_percentile) / tn.dropout_temperature))
    x = np.where(rng.random((n, d)) < keep_prob, x, 0.0)
    # 4. UMI counts
    counts = rng.poisson(x)
    normalized, all_zero = _standardize(counts)
    return CountMatrix(counts, normalized, all_zero)


def rank_percentile(x: np.ndarray) -> np.ndarray:
    """Average-rank percentile (0..100) of every entry within its row."""
    from scipy.stats import rankdata

    n, d = x.shape
    if d == 1:
        return np.full((n, d), 100.0)
    r = rankdata(x, axis=1, method="average")
    return 100.0 * (r - 1.0) / (d - 1.0)


def _standardize(counts: np.ndarray) -> tuple[np.ndarray, bool]:
    c = np.asarray(counts, dtype=float)
    if not np.any(c):
        return c.copy(), True
    tot = c.sum(axis=1, keepdims=True)
    cpm = np.divide(c * 1e6, tot, out=np.zeros_like(c), where=tot > 0)
    return cpm / np.median(cpm[cpm > 0]), False


def standardize_counts(counts: np.ndarray) -> np.ndarray:
    """Counts-per-million per cell, then division by the median non-zero entry."""
    c = np.asarray(counts)
    if np.any(c < 0):
        raise ValueError("counts must be non-negative")
    out, all_zero = _standardize(c)
    if all_zero:
        warnings.warn("all-zero count matrix left unchanged")
    return out


def sample_grn_params(g: Graph, domain: DomainConfig, rng: np.random.Generator,
                      n_types: int | None = None, signs: np.ndarray | None = None) -> GrnParams:
    d = g.d
    adj = g.adjacency.astype(bool)
    if n_types is None:
        lo, hi = domain.cell_types
        n_types = int(rng.integers(lo, hi + 1))
    if signs is None:
        # genes tend to be mostly activating or mostly repressing
        p_up = rng.beta(*domain.sign_beta, size=d)
        signs = np.where(rng.random((d, d)) < p_up[:, None], 1.0, -1.0)
    k = np.where(adj, signs * rng.uniform(*domain.interaction_range, size=(d, d)), 0.0)
    sources = adj.sum(axis=0) == 0
    b = np.where(sources[:, None], rng.uniform(*domain.mr_rate_range, size=(d, n_types)), 0.0)
    decay = np.full(d, domain.decay)
    params = GrnParams(k, b, np.full((d, d), domain.hill), np.ones((d, d)), decay,
                       np.full(d, domain.process_noise))
    # thresholds at the regulator's mean expression across cell types
    order = topological_order(g.adjacency) or list(range(d))
    types = np.arange(n_types)
    src_idx = np.flatnonzero(sources)
    mean_x = np.zeros(d)
    for j in order:
        pa = np.flatnonzero(adj[:, j])
        params.half_response[pa, j] = np.maximum(mean_x[pa], 1e-3)
        x = steady_state_guess(params, types, src_idx, None)
        mean_x[j] = x[:, j].mean()
    return params


def build_grn_task(domain: DomainConfig, d: int, n: int, rng: np.random.Generator,
                   interventional: bool | None = None,
                   graph: Graph | None = None) -> tuple[Graph, Dataset]:
    """Graph, clean simulation, knockouts on every gene, technical noise, normalization."""
    if d < 2:
        raise ValueError("d must be >= 2")
    if graph is None:
        gcfg = domain.graphs[int(rng.integers(len(domain.graphs)))]
        graph = sample_graph(gcfg, d, rng)
    params = sample_grn_params(graph, domain, rng)
    if interventional is None:
        interventional = bool(rng.random() < domain.intervention_prob)
    n_int = n // 2 if interventional else 0
    mask = np.zeros((n, d), dtype=np.int8)
    if n_int:
        genes = np.resize(rng.permutation(d), n_int)
        mask[np.arange(n - n_int, n), genes] = 1
    types = np.arange(n) % params.cell_types
    clean = simulate_clean(graph, params, mask, n, rng, types=types)
    preset = str(domain.tech_noise_presets[int(rng.integers(len(domain.tech_noise_presets)))])
    cm = apply_technical_noise(clean, TECH_NOISE_PRESETS[preset], rng)
    data = Dataset(cm.normalized, mask, {"domain": "grn", "standardized": True,
                                         "interventional": interventional,
                                         "cell_types": params.cell_types,
                                         "tech_noise_preset": preset})
    return graph, data
