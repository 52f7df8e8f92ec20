"""Data-generating distributions p(G, D): presets for the linear, rff and grn domains.

All numeric ranges here are desk defaults. The o.o.d. switches replace the
graph families, the mechanism ranges or the noise model independently, so
shifts can be introduced one aspect at a time.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .graphs import GraphModelConfig

DOMAINS = ("linear", "rff", "grn")


@dataclass
class DomainConfig:
    name: str = "linear"
    graphs: list[GraphModelConfig] = field(default_factory=list)

    # linear mechanisms: |w| ~ U[weight_range] with a random sign
    weight_range: tuple[float, float] = (0.5, 2.0)
    bias_range: tuple[float, float] = (-3.0, 3.0)
    # rff mechanisms
    length_scale_range: tuple[float, float] = (1.0, 3.0)
    output_scale_range: tuple[float, float] = (1.0, 3.0)
    n_features: int = 100

    noise_families: tuple[str, ...] = ("gaussian",)
    noise_scale_range: tuple[float, float] = (0.2, 2.0)
    heteroscedastic: bool = False

    intervention_prob: float = 0.5
    intervention_fraction: float = 0.5
    intervention_node_frac: float = 0.5
    intervention_value_range: tuple[float, float] = (-5.0, 5.0)
    standardize: bool = False

    # grn
    cell_types: tuple[int, int] = (5, 10)
    interaction_range: tuple[float, float] = (1.0, 5.0)
    mr_rate_range: tuple[float, float] = (1.0, 3.0)
    hill: float = 2.0
    decay: float = 0.8
    process_noise: float = 1.0
    tech_noise_presets: tuple[str, ...] = ("in_dist",)
    sign_beta: tuple[float, float] = (0.2588, 0.2499)

    def __post_init__(self):
        if self.name not in DOMAINS:
            raise ValueError(f"unknown domain {self.name!r}")
        self.graphs = [g if isinstance(g, GraphModelConfig) else GraphModelConfig(**g)
                       for g in self.graphs]
        for key in ("weight_range", "bias_range", "length_scale_range",
                    "output_scale_range", "noise_scale_range", "intervention_value_range",
                    "cell_types", "interaction_range", "mr_rate_range", "sign_beta"):
            setattr(self, key, tuple(getattr(self, key)))
        self.noise_families = tuple(self.noise_families)
        self.tech_noise_presets = tuple(self.tech_noise_presets)
        bad = set(self.noise_families) - {"gaussian", "laplace", "cauchy"}
        if bad:
            raise ValueError(f"unknown noise families {sorted(bad)}")
        if not 0 <= self.intervention_prob <= 1 or not 0 <= self.intervention_fraction <= 1:
            raise ValueError("intervention probabilities must lie in [0, 1]")
        if self.noise_scale_range[0] <= 0 or self.length_scale_range[0] <= 0:
            raise ValueError("noise and length scales must be positive")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "DomainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown domain config keys: {sorted(unknown)}")
        return cls(**raw)


def _train_graphs() -> list[GraphModelConfig]:
    out = []
    for e in (1.0, 2.0, 3.0):
        out.append(GraphModelConfig("erdos_renyi", edges_per_node=e))
        out.append(GraphModelConfig("scale_free", edges_per_node=e, power=1.0))
    return out


def _ood_graphs() -> list[GraphModelConfig]:
    return [
        GraphModelConfig("watts_strogatz", lattice_k=2, rewire_p=0.3),
        GraphModelConfig("stochastic_block", edges_per_node=2.0, blocks=3, damping=0.1),
        GraphModelConfig("geometric", radius=0.35),
    ]


def domain_preset(name: str, ood_graphs: bool = False, ood_mechanisms: bool = False,
                  ood_noise: bool = False) -> DomainConfig:
    """Training distribution of a domain, optionally shifted per aspect."""
    if name == "grn":
        cfg = DomainConfig(
            name="grn",
            graphs=[GraphModelConfig("subgraph_extraction", edges_per_node=2.0,
                                     source_family=fam, source_size=60)
                    for fam in ("erdos_renyi", "scale_free")],
            intervention_prob=1.0,
        )
        if ood_graphs:
            cfg.graphs = [GraphModelConfig("subgraph_extraction", edges_per_node=2.0,
                                           source_family="scale_free", source_power=1.5,
                                           source_size=80)]
        if ood_mechanisms:
            cfg.interaction_range = (0.5, 8.0)
            cfg.mr_rate_range = (0.5, 5.0)
            cfg.hill = 3.0
        if ood_noise:
            cfg.tech_noise_presets = ("dropseq", "smartseq", "tenx")
        return cfg

    cfg = DomainConfig(name=name, graphs=_train_graphs())
    if ood_graphs:
        cfg.graphs = _ood_graphs()
    if ood_mechanisms:
        if name == "linear":
            cfg.weight_range = (2.5, 4.0)
        else:
            cfg.length_scale_range = (3.5, 6.0)
            cfg.output_scale_range = (3.5, 6.0)
        cfg.bias_range = (-5.0, 5.0)
    if ood_noise:
        cfg.noise_families = ("laplace", "cauchy")
        cfg.heteroscedastic = True
    return cfg
