"""Amortized inference network: dataset in, matrix of edge probabilities out.

The representation is an (n, d, width) tensor per dataset. Each block attends
over the sample axis (variables batched), applies a feed-forward layer, then
attends over the variable axis (samples batched) and applies a second
feed-forward layer. No positional information enters anywhere, so the output
is invariant to sample order and equivariant to variable order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .scm import Dataset

CLAMP = 1e-7


@dataclass
class ModelConfig:
    layers: int = 2
    width: int = 64
    key_size: int = 16
    heads: int = 4
    ff_size: int = 128
    dropout: float = 0.0
    power_iters: int = 10
    head_init_gain: float = 0.05
    # zero v map: an untrained model outputs exactly the prior sigmoid(bias_init)
    head_v_init_gain: float = 0.0
    bias_init: float = -3.0

    def __post_init__(self):
        for name in ("layers", "width", "key_size", "heads", "ff_size", "power_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.width % self.heads:
            raise ValueError("width must be divisible by the head count")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


def _kaiming(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    k, hk = cfg.width, cfg.heads * cfg.key_size

    def linear(prefix, fan_in, fan_out, gain=1.0):
        store.add(f"{prefix}/w", _kaiming(rng, fan_in, fan_out, gain))
        store.add(f"{prefix}/b", np.zeros(fan_out))

    def norm(prefix):
        store.add(f"{prefix}/g", np.ones(k))
        store.add(f"{prefix}/b", np.zeros(k))

    linear("embed", 2, k)
    for layer in range(cfg.layers):
        for axis in ("n", "d"):
            p = f"block{layer}/attn_{axis}"
            norm(f"{p}/ln")
            linear(f"{p}/q", k, hk)
            linear(f"{p}/k", k, hk)
            linear(f"{p}/v", k, hk)
            linear(f"{p}/o", hk, k)
            p = f"block{layer}/ff_{axis}"
            norm(f"{p}/ln")
            linear(f"{p}/fc1", k, cfg.ff_size)
            linear(f"{p}/fc2", cfg.ff_size, k)
    norm("final_ln")
    linear("head/u", k, k, cfg.head_init_gain)
    linear("head/v", k, k, cfg.head_v_init_gain)
    store.add("head/bias", np.array(cfg.bias_init))
    return store


def _dense(x: Tensor, p: ParamStore, prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, p[f"{prefix}/w"]), p[f"{prefix}/b"])


def _norm(x: Tensor, p: ParamStore, prefix: str) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}/g"], p[f"{prefix}/b"])


def embed_inputs(values: np.ndarray, mask: np.ndarray, p: ParamStore) -> Tensor:
    """Map each token (x, u) through one shared affine map; shape (..., n, d, width)."""
    values = np.asarray(values, dtype=float)
    if np.isnan(values).any():
        raise ValueError("NaN in input data")
    tokens = np.stack([values, np.asarray(mask, dtype=float)], axis=-1)
    return _dense(Tensor(tokens), p, "embed")


class _Dropout:
    def __init__(self, rate: float, rng: np.random.Generator | None):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rng is None or self.rate <= 0:
            return x
        return ad.dropout(x, ad.dropout_mask(self.rng, x.shape, self.rate))


def _attention(x: Tensor, p: ParamStore, prefix: str, cfg: ModelConfig) -> Tensor:
    """Multi-head self-attention over axis -2 of ``x`` (all leading axes batched)."""
    lead = x.shape[:-2]
    t = x.shape[-2]
    h, dk = cfg.heads, cfg.key_size
    nd = len(lead)
    perm = tuple(range(nd)) + (nd + 1, nd, nd + 2)  # (..., T, H, dk) -> (..., H, T, dk)

    def split(z):
        return ad.transpose(ad.reshape(z, lead + (t, h, dk)), perm)

    q = split(_dense(x, p, f"{prefix}/q"))
    k = split(_dense(x, p, f"{prefix}/k"))
    v = split(_dense(x, p, f"{prefix}/v"))
    swap = tuple(range(nd + 1)) + (nd + 2, nd + 1)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, swap)), 1.0 / math.sqrt(dk))
    out = ad.matmul(ad.softmax(scores, axis=-1), v)
    out = ad.reshape(ad.transpose(out, perm), lead + (t, h * dk))
    return _dense(out, p, f"{prefix}/o")


def _feed_forward(x: Tensor, p: ParamStore, prefix: str) -> Tensor:
    return _dense(ad.relu(_dense(x, p, f"{prefix}/fc1")), p, f"{prefix}/fc2")


def encoder_forward(e: Tensor, p: ParamStore, cfg: ModelConfig,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm residual blocks alternating attention over samples and variables.

    ``e`` has shape (..., n, d, width). Dropout is active only when ``rng`` is given.
    """
    drop = _Dropout(cfg.dropout, rng)
    x = e
    nd = x.ndim
    over_n = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)  # swap n and d
    for layer in range(cfg.layers):
        pre = f"block{layer}"
        h = ad.transpose(_norm(x, p, f"{pre}/attn_n/ln"), over_n)
        h = ad.transpose(_attention(h, p, f"{pre}/attn_n", cfg), over_n)
        x = ad.add(x, drop(h))
        x = ad.add(x, drop(_feed_forward(_norm(x, p, f"{pre}/ff_n/ln"), p, f"{pre}/ff_n")))
        h = _attention(_norm(x, p, f"{pre}/attn_d/ln"), p, f"{pre}/attn_d", cfg)
        x = ad.add(x, drop(h))
        x = ad.add(x, drop(_feed_forward(_norm(x, p, f"{pre}/ff_d/ln"), p, f"{pre}/ff_d")))
    return _norm(x, p, "final_ln")


def edge_head(e: Tensor, p: ParamStore) -> Tensor:
    """Max-pool over samples, then ``theta_ij = sigmoid(u_i . v_j + b)`` with a zero diagonal."""
    z = ad.max_pool(e, axis=-3)  # (..., d, width)
    u = _dense(z, p, "head/u")
    v = _dense(z, p, "head/v")
    nd = v.ndim
    vt = ad.transpose(v, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    logits = ad.add(ad.matmul(u, vt), p["head/bias"])
    d = z.shape[-2]
    return ad.mul(ad.sigmoid(logits), 1.0 - np.eye(d))


def forward(p: ParamStore, cfg: ModelConfig, values: np.ndarray, mask: np.ndarray,
            rng: np.random.Generator | None = None) -> Tensor:
    return edge_head(encoder_forward(embed_inputs(values, mask, p), p, cfg, rng), p)


def log_q(g: np.ndarray, theta: Tensor) -> Tensor:
    """Bernoulli log-likelihood of adjacency ``g`` under ``theta``, off-diagonal entries only.

    Batched over leading axes; returns one value per leading index.
    """
    g = np.asarray(g, dtype=float)
    theta = ad.as_tensor(theta)
    if g.shape != theta.shape:
        raise ad.ShapeError(f"log_q: graph {g.shape} vs beliefs {theta.shape}")
    d = g.shape[-1]
    off = 1.0 - np.eye(d)
    t = ad.clip(theta, CLAMP, 1.0 - CLAMP)
    ll = ad.add(ad.mul(ad.log(t), g * off), ad.mul(ad.log(ad.sub(1.0, t)), (1.0 - g) * off))
    return ad.reduce_sum(ad.reduce_sum(ll, axis=-1), axis=-1)


class InferenceModel:
    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(
            cfg, rng if rng is not None else np.random.default_rng(0))

    def __call__(self, values, mask, rng=None) -> Tensor:
        return forward(self.params, self.cfg, values, mask, rng)

    def predict(self, data: Dataset | Sequence[Dataset]) -> np.ndarray:
        """Edge probabilities in deterministic mode (no tape, no dropout)."""
        single = isinstance(data, Dataset)
        batch = [data] if single else list(data)
        values = np.stack([x.values for x in batch])
        mask = np.stack([x.mask for x in batch])
        with ad.no_grad():
            theta = forward(self.params, self.cfg, values, mask).data
        return theta[0] if single else theta
