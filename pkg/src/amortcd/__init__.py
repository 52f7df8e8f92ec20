"""Amortized causal structure learning at desk scale.

Simulators for (graph, dataset) pairs, a permutation-equivariant attention
model mapping datasets to edge probabilities, a training loop with an
acyclicity dual constraint, and structural/ranking metrics.
"""

__version__ = "0.1.0"
