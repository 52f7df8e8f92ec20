"""Training: forward-KL objective, spectral acyclicity penalty, dual ascent, task buffer.

The primal step minimizes ``-mean log q(G | f(D)) + lambda * mean h(f(D))`` with
LAMB; every ``dual_every`` steps the multiplier moves by ``eta_t * EMA(F)``.
Tasks come from per-d FIFO queues refilled either synchronously (deterministic)
or by background worker threads.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import threading
import time
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .domains import DomainConfig, domain_preset
from .model import ModelConfig, forward, init_params, log_q
from .scm import Dataset, sample_task

log = logging.getLogger(__name__)

NORM_TOL = 1e-12


class TrainingHalted(FloatingPointError):
    pass


# ----------------------------------------------------------------------------
# acyclicity penalty


def _power_pair(w: np.ndarray, t: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray] | None:
    """Left/right power-iteration vectors of ``w``; None when the estimate is 0."""
    d = w.shape[0]
    for attempt in range(2):
        a = rng.standard_normal(d)
        b = rng.standard_normal(d)
        for _ in range(t):
            a = a @ w
            b = w @ b
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            if na < NORM_TOL or nb < NORM_TOL:
                return None
            a /= na
            b /= nb
        if abs(a @ b) >= NORM_TOL:
            return a, b
    warnings.warn("power iteration: a.b vanished twice; penalty set to 0")
    return None


def spectral_penalty(w, t: int = 10, rng: np.random.Generator | None = None) -> Tensor:
    """Power-iteration estimate ``a^T W b / a^T b`` of the spectral radius.

    ``w`` is a (..., d, d) non-negative matrix (Tensor or array). The vectors
    a, b are constants for differentiation, so the gradient is ``a b^T / a^T b``.
    Returns one value per leading index.
    """
    w = ad.as_tensor(w)
    if w.ndim < 2 or w.shape[-1] != w.shape[-2]:
        raise ad.ShapeError(f"spectral_penalty: expected square matrices, got {w.shape}")
    if np.any(w.data < 0):
        raise ValueError("spectral_penalty: entries must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    mats = w.data.reshape(-1, w.shape[-1], w.shape[-1]).astype(np.float64)
    coef = np.zeros_like(mats)
    for k, m in enumerate(mats):
        pair = _power_pair(m, t, rng)
        if pair is not None:
            a, b = pair
            coef[k] = np.outer(a, b) / (a @ b)
    coef = coef.reshape(w.shape)
    return ad.reduce_sum(ad.mul(w, coef), axis=(-2, -1))


# ----------------------------------------------------------------------------
# configuration


@dataclass
class Schedule:
    steps: int = 2000
    d_values: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6])
    n_obs: int = 50
    # per-d batch sizes; missing entries follow round(tokens / d) clipped to [4, 16]
    batch_sizes: dict[int, int] = field(default_factory=dict)
    batch_tokens: int = 32
    base_lr: float = 3e-4
    lr_drop_frac: float = 0.8
    buffer_capacity: int = 50
    insert_ratio: float = 0.5  # fresh tasks per sampled example
    workers: int = 0
    log_every: int = 10
    checkpoint_every: int = 0
    precision: str = "float32"
    frozen: bool = False

    def __post_init__(self):
        self.d_values = [int(d) for d in self.d_values]
        self.batch_sizes = {int(k): int(v) for k, v in self.batch_sizes.items()}
        if self.steps < 0 or self.n_obs < 1 or self.buffer_capacity < 1 or self.log_every < 1:
            raise ValueError("steps >= 0, n_obs >= 1, buffer_capacity >= 1 and log_every >= 1 required")
        if not self.d_values or min(self.d_values) < 2:
            raise ValueError("d_values must be non-empty with every d >= 2")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.workers < 0 or not 0 < self.insert_ratio:
            raise ValueError("workers >= 0 and insert_ratio > 0 required")

    def batch_size(self, d: int) -> int:
        if d in self.batch_sizes:
            return self.batch_sizes[d]
        return int(np.clip(round(self.batch_tokens / d), 4, 16))


@dataclass
class AcyclicityConfig:
    enabled: bool = False
    t: int = 10
    eta: float = 0.5
    dual_every: int = 50
    warmup_frac: float = 0.2
    ema_rate: float | None = None  # None: scaled to the run length

    def __post_init__(self):
        if self.t < 1 or self.dual_every < 1 or self.eta < 0 or not 0 <= self.warmup_frac <= 1:
            raise ValueError("invalid acyclicity settings")


def _from_dict(cls, raw: dict, what: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown {what} config keys: {sorted(unknown)}")
    return cls(**raw)


def build_domain(raw: dict | DomainConfig) -> DomainConfig:
    """Domain from a config dict; ``preset`` plus ``ood_*`` flags, then field overrides."""
    if isinstance(raw, DomainConfig):
        return raw
    raw = dict(raw)
    if "preset" in raw:
        cfg = domain_preset(raw.pop("preset"), bool(raw.pop("ood_graphs", False)),
                            bool(raw.pop("ood_mechanisms", False)), bool(raw.pop("ood_noise", False)))
        merged = {**cfg.to_dict(), **raw}
        return DomainConfig.from_dict(merged)
    return DomainConfig.from_dict(raw)


@dataclass
class TrainConfig:
    domain: DomainConfig = field(default_factory=lambda: domain_preset("linear"))
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    acyclicity: AcyclicityConfig = field(default_factory=AcyclicityConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - {"domain", "model", "schedule", "acyclicity", "seed"}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(domain=build_domain(raw.get("domain", {"preset": "linear"})),
                   model=ModelConfig.from_dict(raw.get("model", {})),
                   schedule=_from_dict(Schedule, raw.get("schedule", {}), "schedule"),
                   acyclicity=_from_dict(AcyclicityConfig, raw.get("acyclicity", {}), "acyclicity"),
                   seed=int(raw.get("seed", 0)))

    def to_dict(self) -> dict:
        sched = dataclasses.asdict(self.schedule)
        sched["batch_sizes"] = {str(k): v for k, v in sched["batch_sizes"].items()}
        return {"domain": self.domain.to_dict(), "model": self.model.to_dict(),
                "schedule": sched, "acyclicity": dataclasses.asdict(self.acyclicity),
                "seed": self.seed}


# ----------------------------------------------------------------------------
# objective and dual state


def loss_batch(params: ParamStore, cfg: ModelConfig, graphs: np.ndarray, values: np.ndarray,
               masks: np.ndarray, lam: float = 0.0, t: int = 10,
               rng: np.random.Generator | None = None,
               dropout_rng: np.random.Generator | None = None) -> tuple[Tensor, float, float]:
    """Negative mean log-likelihood plus ``lam`` times the mean penalty.

    All tasks share one d. Returns (loss, mean penalty F, mean NLL).
    """
    graphs = np.asarray(graphs)
    if graphs.ndim != 3 or values.ndim != 3 or graphs.shape[-1] != values.shape[-1]:
        raise ad.ShapeError(f"loss_batch: graphs {graphs.shape} vs values {values.shape}")
    theta = forward(params, cfg, values, masks, dropout_rng)
    nll = ad.scale(ad.mean(log_q(graphs, theta)), -1.0)
    h = spectral_penalty(theta, t, rng)
    f_est = float(np.mean(h.data))
    loss = nll if lam == 0 else ad.add(nll, ad.scale(ad.mean(h), lam))
    return loss, f_est, float(nll.data)


@dataclass
class TrainState:
    params: ParamStore
    lam: float = 0.0
    f_ema: float = 0.0
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    last_loss: float = float("nan")
    last_lr: float = 0.0

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.f_ema):
            raise ValueError("lambda must be >= 0 and the EMA finite")


def ema_rate(acyc: AcyclicityConfig, total_steps: int) -> float:
    if acyc.ema_rate is not None:
        return acyc.ema_rate
    # a 1e-4 step over a 250k-step horizon, stretched to the run length
    return min(1.0, 1e-4 * 250_000 / max(total_steps, 1))


def update_ema(state: TrainState, f: float, rate: float) -> None:
    state.f_ema += rate * (f - state.f_ema)


def dual_lr(acyc: AcyclicityConfig, step: int, total_steps: int) -> float:
    warm = acyc.warmup_frac * total_steps
    if warm <= 0:
        return acyc.eta
    return acyc.eta * min(1.0, step / warm)


def dual_step(state: TrainState, acyc: AcyclicityConfig, total_steps: int) -> TrainState:
    """``lambda <- max(0, lambda + eta_t * EMA(F))`` with a linearly warmed-up ``eta_t``."""
    eta = dual_lr(acyc, state.step, total_steps)
    state.lam = max(0.0, state.lam + eta * state.f_ema)
    return state


def learning_rate(sched: Schedule, step: int) -> float:
    if sched.frozen:
        return 0.0
    biggest = max(sched.batch_size(d) for d in sched.d_values)
    lr = sched.base_lr * math.sqrt(biggest)
    if step >= sched.lr_drop_frac * sched.steps:
        lr *= 0.1
    return lr


def d_probabilities(sched: Schedule) -> np.ndarray:
    """Per-d step probabilities making the expected examples seen equal across d."""
    inv = np.array([1.0 / sched.batch_size(d) for d in sched.d_values])
    return inv / inv.sum()


# ----------------------------------------------------------------------------
# task buffer


@dataclass
class Task:
    graph: np.ndarray
    data: Dataset
    d: int
    index: int


def make_task(domain: DomainConfig, d: int, n: int, seed: int, index: int) -> Task:
    """Deterministic in (seed, d, index), so any buffer state can be regenerated."""
    rng = np.random.default_rng([seed, d, index])
    g, data = sample_task(domain, d, n, rng)
    return Task(g.adjacency.copy(), data, d, index)


class TaskBuffer:
    """Per-d FIFO queues with fixed capacity; insert and sample are atomic."""

    def __init__(self, d_values, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.queues: dict[int, deque] = {d: deque(maxlen=capacity) for d in d_values}
        self.inserts = {d: 0 for d in d_values}
        self.samples = {d: 0 for d in d_values}
        self._cv = threading.Condition()

    def insert(self, task: Task) -> None:
        with self._cv:
            self.queues[task.d].append(task)  # maxlen evicts the oldest
            self.inserts[task.d] += 1
            self._cv.notify_all()

    def size(self, d: int) -> int:
        with self._cv:
            return len(self.queues[d])

    def sample(self, d: int, k: int, rng: np.random.Generator, timeout: float | None = None) -> list[Task]:
        """Uniform draw from queue ``d``; blocks while it is empty."""
        with self._cv:
            if not self._cv.wait_for(lambda: len(self.queues[d]) > 0, timeout=timeout):
                raise TimeoutError(f"buffer for d={d} stayed empty")
            q = self.queues[d]
            idx = rng.choice(len(q), size=k, replace=len(q) < k)
            self.samples[d] += k
            return [q[i] for i in idx]


class _Workers:
    """Background producers balancing the sample-to-insert ratio across d."""

    def __init__(self, buffer: TaskBuffer, domain: DomainConfig, n: int, seed: int, count: int):
        self.buffer, self.domain, self.n, self.seed = buffer, domain, n, seed
        self.stop = threading.Event()
        self._lock = threading.Lock()
        self._next = dict(buffer.inserts)
        self.threads = [threading.Thread(target=self._run, daemon=True, name=f"producer-{i}")
                        for i in range(count)]

    def _pick(self) -> tuple[int, int]:
        with self._lock:
            b = self.buffer
            # queue furthest behind in inserts per sample (empty queues first)
            d = min(self._next, key=lambda k: (len(b.queues[k]) >= b.capacity,
                                               self._next[k] / max(b.samples[k], 1)))
            idx = self._next[d]
            self._next[d] += 1
            return d, idx

    def _run(self):
        while not self.stop.is_set():
            try:
                d, idx = self._pick()
                self.buffer.insert(make_task(self.domain, d, self.n, self.seed, idx))
            except Exception:  # keep producing; a failed task is logged and skipped
                log.exception("task producer failed; restarting")
                time.sleep(0.01)

    def start(self):
        for th in self.threads:
            th.start()

    def join(self):
        self.stop.set()
        for th in self.threads:
            th.join(timeout=5)


def fill_buffer(buffer: TaskBuffer, domain: DomainConfig, n: int, seed: int,
                counters: dict[int, int] | None = None) -> None:
    """Synchronously regenerate the queue contents implied by insert counters."""
    for d in buffer.queues:
        total = counters.get(d, 0) if counters else 0
        start = max(0, total - buffer.capacity)
        for idx in range(start, max(total, buffer.capacity)):
            buffer.insert(make_task(domain, d, n, seed, idx))


# ----------------------------------------------------------------------------
# training loop


def _save(out_dir: str, name: str, cfg: TrainConfig, state: TrainState, buffer: TaskBuffer):
    meta = {"model": cfg.model.to_dict(), "train": cfg.to_dict(), "step": state.step,
            "lambda": state.lam, "f_ema": state.f_ema,
            "rng_state": state.rng.bit_generator.state,
            "inserts": {str(d): c for d, c in buffer.inserts.items()},
            "samples": {str(d): c for d, c in buffer.samples.items()}}
    ad.save_checkpoint(os.path.join(out_dir, name), state.params, meta)


def train(cfg: TrainConfig, out_dir: str | os.PathLike, resume: str | os.PathLike | None = None,
          max_steps: int | None = None) -> TrainState:
    """Run primal LAMB steps with optional dual ascent; writes checkpoint + metrics.jsonl.

    ``max_steps`` stops early (schedule unchanged) for resume tests.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    sched, acyc = cfg.schedule, cfg.acyclicity
    dtype = np.float32 if sched.precision == "float32" else np.float64
    with ad.precision(dtype):
        if resume is not None:
            params, meta = ad.load_checkpoint(resume)
            rng = np.random.default_rng()
            rng.bit_generator.state = meta["rng_state"]
            state = TrainState(params, meta["lambda"], meta["f_ema"], meta["step"], rng)
            counters = {int(k): v for k, v in meta["inserts"].items()}
            sampled = {int(k): v for k, v in meta["samples"].items()}
        else:
            init_rng = np.random.default_rng([cfg.seed, 0])
            state = TrainState(init_params(cfg.model, init_rng), rng=np.random.default_rng([cfg.seed, 1]))
            counters, sampled = None, None
        buffer = TaskBuffer(sched.d_values, sched.buffer_capacity)
        workers = None
        if sched.workers > 0:
            if counters:
                buffer.inserts.update(counters)
            workers = _Workers(buffer, cfg.domain, sched.n_obs, cfg.seed, sched.workers)
            workers.start()
        else:
            fill_buffer(buffer, cfg.domain, sched.n_obs, cfg.seed, counters)
            if counters:
                buffer.inserts.update(counters)
        if sampled:
            buffer.samples.update(sampled)

        probs = d_probabilities(sched)
        rate = ema_rate(acyc, sched.steps)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        mode = "a" if resume is not None else "w"
        stop_at = sched.steps if max_steps is None else min(sched.steps, max_steps)
        try:
            with open(metrics_path, mode) as mfh:
                while state.step < stop_at:
                    _primal_step(cfg, state, buffer, probs, rate, out_dir)
                    if acyc.enabled and state.step % acyc.dual_every == 0:
                        dual_step(state, acyc, sched.steps)
                    if state.step % sched.log_every == 0:
                        mfh.write(json.dumps({"step": state.step, "loss": state.last_loss,
                                              "F_ema": state.f_ema, "lambda": state.lam,
                                              "lr": state.last_lr}) + "\n")
                        mfh.flush()
                    if sched.checkpoint_every and state.step % sched.checkpoint_every == 0:
                        _save(out_dir, f"checkpoint_{state.step}", cfg, state, buffer)
        finally:
            if workers is not None:
                workers.join()
        _save(out_dir, "checkpoint", cfg, state, buffer)
    return state


def _primal_step(cfg: TrainConfig, state: TrainState, buffer: TaskBuffer, probs: np.ndarray,
                 rate: float, out_dir: str) -> None:
    sched, acyc = cfg.schedule, cfg.acyclicity
    rng = state.rng
    d = sched.d_values[int(rng.choice(len(probs), p=probs))]
    bsz = sched.batch_size(d)
    tasks = buffer.sample(d, bsz, rng, timeout=600)
    graphs = np.stack([t.graph for t in tasks])
    values = np.stack([t.data.values for t in tasks])
    masks = np.stack([t.data.mask for t in tasks])
    drop_rng = rng if cfg.model.dropout > 0 else None
    lam = state.lam if acyc.enabled else 0.0
    lr = learning_rate(sched, state.step)
    try:
        loss, f_est, _ = loss_batch(state.params, cfg.model, graphs, values, masks, lam, acyc.t,
                                    rng, drop_rng)
        ok = math.isfinite(float(loss.data))
    except ad.NonFiniteError:
        ok = False
    if not ok:
        diag = {"step": state.step, "d": d, "tasks": [[t.d, t.index] for t in tasks],
                "seed": cfg.seed, "lambda": state.lam}
        with open(os.path.join(out_dir, "diagnostic.json"), "w") as fh:
            json.dump(diag, fh, indent=1)
        raise TrainingHalted(f"non-finite loss at step {state.step}; see diagnostic.json")
    state.step += 1
    if lr > 0:
        grads = ad.backward(loss, state.params.params)
        skipped = ad.lamb_update(state.params, grads, state.step, lr)
        if skipped:
            log.warning("step %d: skipped non-finite gradients for %s", state.step, skipped)
    update_ema(state, f_est, rate)
    state.last_loss = float(loss.data)
    state.last_lr = lr
    if sched.workers == 0:
        for _ in range(max(1, int(round(bsz * sched.insert_ratio)))):
            buffer.insert(make_task(cfg.domain, d, sched.n_obs, cfg.seed, buffer.inserts[d]))


def load_model(path: str | os.PathLike):
    """(params, ModelConfig, meta) from a checkpoint written by ``train``."""
    params, meta = ad.load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta.get("model", {}))
    return params, cfg, meta
