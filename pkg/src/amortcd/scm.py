"""Linear and random-Fourier-feature structural causal models with interventions."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .domains import DomainConfig
from .graphs import Graph, sample_graph, topological_order, write_graph


class CyclicGraphError(ValueError):
    pass


@dataclass
class RffFunction:
    """``f(x) = bias + scale * sqrt(2/m) * sum_k cos(omega_k . x + phase_k)``."""

    omega: np.ndarray  # (m, p)
    phase: np.ndarray  # (m,)
    scale: float
    length_scale: float
    bias: float = 0.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        m = self.phase.shape[0]
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.omega.shape[1] == 1 else x[None, :]
        proj = x @ self.omega.T + self.phase
        return self.bias + self.scale * np.sqrt(2.0 / m) * np.cos(proj).sum(axis=-1)


def sample_rff(n_parents: int, m: int, length_scale: float, scale: float, bias: float,
               rng: np.random.Generator) -> RffFunction:
    omega = rng.normal(0.0, 1.0 / length_scale, size=(m, n_parents))
    phase = rng.uniform(0.0, 2 * np.pi, size=m)
    return RffFunction(omega, phase, scale, length_scale, bias)


def eval_rff(fn: RffFunction, x_parents: np.ndarray) -> np.ndarray:
    return fn(x_parents)


@dataclass
class Mechanism:
    kind: str
    parents: np.ndarray
    bias: float
    weights: np.ndarray | None = None
    rff: RffFunction | None = None
    noise_scale: float = 1.0
    noise_fn: RffFunction | None = None  # heteroscedastic scale, pre-softplus

    def __post_init__(self):
        if self.kind == "linear" and len(self.weights) != len(self.parents):
            raise ValueError("weight vector length must equal parent count")
        if self.kind == "rff" and (self.rff.scale <= 0 or self.rff.length_scale <= 0):
            raise ValueError("rff scales must be positive")
        if self.noise_scale <= 0:
            raise ValueError("noise scale must be positive")

    def mean(self, x_pa: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return x_pa @ self.weights + self.bias
        return self.rff(x_pa)

    def noise_multiplier(self, x_pa: np.ndarray) -> np.ndarray | float:
        if self.noise_fn is None:
            return 1.0
        # softplus of a random function, floored so no region becomes noise-free
        return np.logaddexp(0.0, self.noise_fn(x_pa)) + 0.1


@dataclass
class NoiseSpec:
    family: str = "gaussian"
    heteroscedastic: bool = False

    def draw(self, rng: np.random.Generator, size, scale: float) -> np.ndarray:
        if self.family == "gaussian":
            return rng.normal(0.0, scale, size)
        if self.family == "laplace":
            return rng.laplace(0.0, scale, size)
        if self.family == "cauchy":
            return scale * rng.standard_cauchy(size)
        raise ValueError(f"unknown noise family {self.family!r}")


@dataclass
class InterventionSpec:
    """Per-sample intervention mask and clamp values (only read where the mask is 1)."""

    mask: np.ndarray
    values: np.ndarray

    @classmethod
    def none(cls, n: int, d: int) -> "InterventionSpec":
        return cls(np.zeros((n, d), dtype=np.int8), np.zeros((n, d)))


@dataclass
class Dataset:
    values: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError(f"values {self.values.shape} and mask {self.mask.shape} must be equal n x d")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def permuted(self, rows=None, cols=None) -> "Dataset":
        v, m = self.values, self.mask
        if rows is not None:
            v, m = v[rows], m[rows]
        if cols is not None:
            v, m = v[:, cols], m[:, cols]
        return Dataset(v, m, dict(self.meta))


def _draw_signed(rng, lo, hi, size):
    return rng.uniform(lo, hi, size) * rng.choice([-1.0, 1.0], size)


def sample_mechanisms(g: Graph, domain: DomainConfig, rng: np.random.Generator) -> list[Mechanism]:
    if topological_order(g.adjacency) is None:
        raise CyclicGraphError("SCM sampling needs an acyclic graph")
    mechs = []
    for j in range(g.d):
        pa = g.parents(j)
        bias = float(rng.uniform(*domain.bias_range))
        sigma = float(rng.uniform(*domain.noise_scale_range))
        noise_fn = None
        if domain.heteroscedastic:
            noise_fn = sample_rff(len(pa), domain.n_features, float(rng.uniform(*domain.length_scale_range)),
                                  1.0, 0.0, rng)
        if domain.name == "linear":
            w = _draw_signed(rng, *domain.weight_range, len(pa))
            mechs.append(Mechanism("linear", pa, bias, weights=w, noise_scale=sigma,
                                   noise_fn=noise_fn))
        elif domain.name == "rff":
            fn = sample_rff(len(pa), domain.n_features,
                            float(rng.uniform(*domain.length_scale_range)),
                            float(rng.uniform(*domain.output_scale_range)), bias, rng)
            mechs.append(Mechanism("rff", pa, bias, rff=fn, noise_scale=sigma, noise_fn=noise_fn))
        else:
            raise ValueError(f"domain {domain.name!r} has no SCM mechanisms")
    return mechs


def ancestral_sample(g: Graph, mechanisms: list[Mechanism], noise: NoiseSpec | list[NoiseSpec],
                     interventions: InterventionSpec, n: int, rng: np.random.Generator,
                     max_retries: int = 100) -> Dataset:
    order = topological_order(g.adjacency)
    if order is None:
        raise CyclicGraphError("ancestral sampling needs an acyclic graph")
    d = g.d
    noises = noise if isinstance(noise, list) else [noise] * d
    mask = np.asarray(interventions.mask, dtype=bool)

    def run(rows: np.ndarray) -> np.ndarray:
        x = np.zeros((len(rows), d))
        for j in order:
            mech = mechanisms[j]
            x_pa = x[:, mech.parents]
            eps = noises[j].draw(rng, len(rows), mech.noise_scale)
            xj = mech.mean(x_pa) + mech.noise_multiplier(x_pa) * eps
            clamp = mask[rows, j]
            x[:, j] = np.where(clamp, interventions.values[rows, j], xj)
        return x

    with np.errstate(over="ignore", invalid="ignore"):
        x = run(np.arange(n))
        for _ in range(max_retries):
            bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
            if bad.size == 0:
                break
            x[bad] = run(bad)
        else:
            if not np.all(np.isfinite(x)):
                raise FloatingPointError("non-finite samples persist after resampling")
    return Dataset(x, mask.astype(np.int8))


def single_node_interventions(n: int, d: int, n_int: int, targets: np.ndarray,
                              value_range: tuple[float, float], rng: np.random.Generator) -> InterventionSpec:
    """Last ``n_int`` rows each intervene on one target, cycling evenly over ``targets``."""
    spec = InterventionSpec.none(n, d)
    if n_int == 0:
        return spec
    assign = np.resize(rng.permutation(targets), n_int)
    rows = np.arange(n - n_int, n)
    spec.mask[rows, assign] = 1
    spec.values[rows, assign] = rng.uniform(*value_range, size=n_int)
    return spec


def standardize_columns(values: np.ndarray) -> np.ndarray:
    mu = values.mean(axis=0)
    sd = values.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (values - mu) / sd


def build_task(g: Graph, domain: DomainConfig, n: int, rng: np.random.Generator,
               interventional: bool | None = None) -> tuple[Graph, Dataset]:
    if n < 2:
        raise ValueError("n must be >= 2")
    d = g.d
    mechs = sample_mechanisms(g, domain, rng)
    noise = [NoiseSpec(str(rng.choice(domain.noise_families)), domain.heteroscedastic)
             for _ in range(d)]
    if interventional is None:
        interventional = bool(rng.random() < domain.intervention_prob)
    n_int = int(round(n * domain.intervention_fraction)) if interventional else 0
    k = max(1, int(round(domain.intervention_node_frac * d)))
    targets = rng.choice(d, size=k, replace=False)
    spec = single_node_interventions(n, d, n_int, targets, domain.intervention_value_range, rng)
    data = ancestral_sample(g, mechs, noise, spec, n, rng)
    if domain.standardize:
        data.values = standardize_columns(data.values)
    data.meta.update({"domain": domain.name, "standardized": domain.standardize,
                      "interventional": interventional})
    return g, data


def sample_task(domain: DomainConfig, d: int, n: int, rng: np.random.Generator,
                interventional: bool | None = None) -> tuple[Graph, Dataset]:
    """Draw a graph from the domain's graph mixture, then a dataset on it."""
    if domain.name == "grn":
        from .grn import build_grn_task
        return build_grn_task(domain, d, n, rng, interventional=interventional)
    gcfg = domain.graphs[int(rng.integers(len(domain.graphs)))]
    g = sample_graph(gcfg, d, rng)
    return build_task(g, domain, n, rng, interventional=interventional)


# ----------------------------------------------------------------------------
# dataset directory: meta.json, values.csv, mask.csv, graph.csv


def write_dataset(directory: str | os.PathLike, g: Graph, data: Dataset, meta: dict) -> None:
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    np.savetxt(os.path.join(directory, "values.csv"), data.values, fmt="%.17g", delimiter=",")
    np.savetxt(os.path.join(directory, "mask.csv"), data.mask, fmt="%d", delimiter=",")
    write_graph(os.path.join(directory, "graph.csv"), g, seed=meta.get("seed"))
    full = {"n": data.n, "d": data.d, **data.meta, **meta}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(full, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_dataset(directory: str | os.PathLike) -> tuple[Graph | None, Dataset]:
    directory = os.fspath(directory)
    values = np.loadtxt(os.path.join(directory, "values.csv"), delimiter=",", ndmin=2)
    mask = np.loadtxt(os.path.join(directory, "mask.csv"), delimiter=",", ndmin=2)
    meta = {}
    if os.path.exists(os.path.join(directory, "meta.json")):
        with open(os.path.join(directory, "meta.json")) as fh:
            meta = json.load(fh)
    g = None
    if os.path.exists(os.path.join(directory, "graph.csv")):
        g = Graph(np.loadtxt(os.path.join(directory, "graph.csv"), delimiter=",", ndmin=2))
    return g, Dataset(values, mask, meta)
