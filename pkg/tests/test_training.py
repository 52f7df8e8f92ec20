import json
import math

import numpy as np
import pytest

from amortcd import autodiff as ad
from amortcd.model import ModelConfig, forward, init_params
from amortcd.oracles import spectral_radius
from amortcd.training import (
    AcyclicityConfig, Schedule, Task, TaskBuffer, TrainConfig, TrainingHalted, TrainState,
    build_domain, d_probabilities, dual_step, ema_rate, learning_rate, load_model, loss_batch,
    make_task, spectral_penalty, train, update_ema,
)

TINY = {"layers": 1, "width": 16, "key_size": 4, "heads": 2, "ff_size": 16}


def rng(seed=0):
    return np.random.default_rng(seed)


def tiny_config(**schedule):
    sched = {"steps": 20, "d_values": [3, 4], "n_obs": 12, "buffer_capacity": 6,
             "log_every": 1, "precision": "float64"}
    sched.update(schedule)
    return TrainConfig.from_dict({"domain": {"preset": "linear"}, "model": TINY,
                                  "schedule": sched, "seed": 7})


# ----------------------------------------------------------------------------
# spectral penalty


def test_penalty_of_zero_matrix():
    assert float(spectral_penalty(np.zeros((4, 4))).data) == 0.0


def test_penalty_of_nilpotent_matrix():
    r = rng(1)
    for d in (2, 5, 9):
        w = np.triu(r.random((d, d)), 1)
        assert abs(float(spectral_penalty(w, t=max(10, d), rng=r).data)) <= 1e-6


def test_penalty_of_swap_matrix():
    # Known failure: the swap matrix has eigenvalues +1 and -1 of equal modulus,
    # so plain power iteration never converges to a dominant pair and the
    # Rayleigh-type quotient depends on the random start.
    w = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert float(spectral_penalty(w, rng=rng(2)).data) == pytest.approx(1.0, abs=1e-3)


def test_penalty_tracks_spectral_radius():
    r = rng(3)
    worst = 0.0
    for _ in range(100):
        d = int(r.integers(2, 21))
        w = r.random((d, d))
        rho = spectral_radius(w)
        worst = max(worst, abs(float(spectral_penalty(w, rng=r).data) - rho) / rho)
    assert worst <= 1e-2


def test_penalty_gradient_is_outer_product_over_inner_product():
    w = rng(4).random((5, 5))
    wt = ad.Tensor(w, requires_grad=True)
    g = ad.backward(spectral_penalty(wt, rng=rng(5)), [wt])[0]
    # replay the same power iteration by hand
    r = rng(5)
    a, b = r.standard_normal(5), r.standard_normal(5)
    for _ in range(10):
        a = a @ w
        b = w @ b
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
    np.testing.assert_allclose(g, np.outer(a, b) / (a @ b), rtol=1e-12)


def test_penalty_batched_and_validated():
    w = rng(6).random((3, 4, 4))
    assert spectral_penalty(w).shape == (3,)
    with pytest.raises(ValueError):
        spectral_penalty(-np.ones((2, 2)))
    with pytest.raises(ad.ShapeError):
        spectral_penalty(np.ones((2, 3)))


# ----------------------------------------------------------------------------
# dual ascent


def _state(lam=0.0, f=0.0, step=0):
    return TrainState(ad.ParamStore(), lam=lam, f_ema=f, step=step)


def test_dual_step_with_zero_ema_keeps_lambda():
    acyc = AcyclicityConfig(enabled=True)
    assert dual_step(_state(lam=1.3, f=0.0, step=900), acyc, 1000).lam == 1.3


def test_dual_step_at_start_of_warmup_keeps_lambda():
    acyc = AcyclicityConfig(enabled=True, warmup_frac=0.2)
    assert dual_step(_state(lam=0.4, f=5.0, step=0), acyc, 1000).lam == 0.4


def test_dual_step_grows_linearly_after_warmup():
    acyc = AcyclicityConfig(enabled=True, eta=0.5, warmup_frac=0.2)
    s = _state(f=0.3, step=200)
    lams = []
    for _ in range(5):
        lams.append(dual_step(s, acyc, 1000).lam)
        s.step += 50
    np.testing.assert_allclose(np.diff(lams), 0.5 * 0.3, rtol=1e-12)


def test_lambda_non_decreasing_and_non_negative():
    acyc = AcyclicityConfig(enabled=True)
    s = _state()
    r = rng(7)
    prev = 0.0
    for step in range(1, 2001):
        s.step = step
        update_ema(s, float(r.random()), ema_rate(acyc, 2000))
        if step % acyc.dual_every == 0:
            dual_step(s, acyc, 2000)
            assert s.lam >= prev >= 0
            prev = s.lam
    with pytest.raises(ValueError):
        TrainState(ad.ParamStore(), lam=-1.0)


def test_ema_rate_scales_with_run_length():
    acyc = AcyclicityConfig()
    assert ema_rate(acyc, 250_000) == pytest.approx(1e-4)
    assert ema_rate(acyc, 2000) == pytest.approx(0.0125)
    assert ema_rate(AcyclicityConfig(ema_rate=0.2), 2000) == 0.2


# ----------------------------------------------------------------------------
# objective


def _batch(d=4, k=3, seed=8):
    cfg = TrainConfig.from_dict({"domain": {"preset": "linear"}})
    tasks = [make_task(cfg.domain, d, 10, seed, i) for i in range(k)]
    return (np.stack([t.graph for t in tasks]), np.stack([t.data.values for t in tasks]),
            np.stack([t.data.mask for t in tasks]))


@pytest.fixture(scope="module")
def tiny_params():
    with ad.precision(np.float64):
        return init_params(ModelConfig(**TINY), rng(9))


def test_loss_without_multiplier_is_mean_negative_log_likelihood(tiny_params):
    cfg = ModelConfig(**TINY)
    g, x, m = _batch()
    loss, f, nll = loss_batch(tiny_params, cfg, g, x, m, lam=0.0)
    theta = forward(tiny_params, cfg, x, m).data
    direct = 0.0
    for b in range(len(g)):
        th = np.clip(theta[b], 1e-7, 1 - 1e-7)
        off = ~np.eye(g.shape[-1], dtype=bool)
        direct += np.sum(np.where(g[b] == 1, np.log(th), np.log(1 - th))[off])
    assert float(loss.data) == pytest.approx(-direct / len(g), abs=1e-10)
    assert float(loss.data) == nll and f > 0


def test_loss_adds_weighted_penalty(tiny_params):
    cfg = ModelConfig(**TINY)
    g, x, m = _batch()
    base, f, _ = loss_batch(tiny_params, cfg, g, x, m, lam=0.0, rng=rng(1))
    with_pen, f2, _ = loss_batch(tiny_params, cfg, g, x, m, lam=2.5, rng=rng(1))
    assert f == f2
    assert float(with_pen.data) == pytest.approx(float(base.data) + 2.5 * f, rel=1e-12)


def test_identical_tasks_match_single_task(tiny_params):
    cfg = ModelConfig(**TINY)
    g, x, m = _batch(k=1)
    one = float(loss_batch(tiny_params, cfg, g, x, m)[0].data)
    rep = float(loss_batch(tiny_params, cfg, np.repeat(g, 4, 0), np.repeat(x, 4, 0),
                           np.repeat(m, 4, 0))[0].data)
    assert rep == pytest.approx(one, rel=1e-12)


def test_smoke_training_reduces_loss():
    cfg = ModelConfig(**TINY)
    dom = build_domain({"preset": "linear"})
    tasks = [make_task(dom, 4, 30, 10, i) for i in range(8)]
    g = np.stack([t.graph for t in tasks])
    x = np.stack([t.data.values for t in tasks])
    m = np.stack([t.data.mask for t in tasks])
    with ad.precision(np.float64):
        p = init_params(cfg, rng(11))
        losses = []
        for step in range(1, 201):
            loss, _, _ = loss_batch(p, cfg, g, x, m)
            losses.append(float(loss.data))
            ad.lamb_update(p, ad.backward(loss, p.params), step, 3e-3)
    assert np.mean(losses[-10:]) <= 0.8 * np.mean(losses[:10])


# ----------------------------------------------------------------------------
# schedule and buffer


def test_learning_rate_schedule():
    s = Schedule(steps=100, d_values=[2, 8], base_lr=1e-3)
    peak = 1e-3 * math.sqrt(16)
    assert learning_rate(s, 0) == pytest.approx(peak)
    assert learning_rate(s, 79) == pytest.approx(peak)
    assert learning_rate(s, 80) == pytest.approx(0.1 * peak)
    s.frozen = True
    assert learning_rate(s, 0) == 0.0


def test_capacity_one_queue_evicts_oldest():
    buf = TaskBuffer([3], capacity=1)
    dom = build_domain({"preset": "linear"})
    first, second = make_task(dom, 3, 5, 0, 0), make_task(dom, 3, 5, 0, 1)
    buf.insert(first)
    buf.insert(second)
    assert buf.size(3) == 1
    assert buf.sample(3, 1, rng())[0].index == 1


def test_empty_queue_blocks_until_timeout():
    buf = TaskBuffer([3], capacity=2)
    with pytest.raises(TimeoutError):
        buf.sample(3, 1, rng(), timeout=0.05)


def test_examples_per_d_equal_despite_batch_sizes():
    s = Schedule(d_values=[2, 8], batch_sizes={2: 16, 8: 4})
    probs = d_probabilities(s)
    r = rng(12)
    seen = {2: 0, 8: 0}
    for k in r.choice(2, size=100_000, p=probs):
        d = s.d_values[k]
        seen[d] += s.batch_size(d)
    assert abs(seen[2] - seen[8]) / max(seen.values()) <= 0.05


def test_tasks_regenerate_from_seed_and_index():
    dom = build_domain({"preset": "linear"})
    a, b = make_task(dom, 4, 8, 3, 17), make_task(dom, 4, 8, 3, 17)
    np.testing.assert_array_equal(a.data.values, b.data.values)
    np.testing.assert_array_equal(a.graph, b.graph)


# ----------------------------------------------------------------------------
# training runs


def test_zero_steps_checkpoint_equals_initialization(tmp_path):
    cfg = tiny_config(steps=0)
    train(cfg, tmp_path)
    params, _, meta = load_model(tmp_path / "checkpoint")
    with ad.precision(np.float64):
        init = init_params(cfg.model, np.random.default_rng([cfg.seed, 0]))
    for k in init.names():
        np.testing.assert_array_equal(params[k].data, init[k].data)
    assert meta["step"] == 0


def test_single_threaded_runs_are_identical(tmp_path):
    cfg = tiny_config()
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rows = [json.loads(line) for line in a.decode().splitlines()]
    assert len(rows) == 20 and set(rows[0]) == {"step", "loss", "F_ema", "lambda", "lr"}


def test_resume_reproduces_next_step(tmp_path):
    cfg = tiny_config(steps=12)
    cfg.acyclicity = AcyclicityConfig(enabled=True, dual_every=2, warmup_frac=0.0)
    train(cfg, tmp_path / "full")
    train(cfg, tmp_path / "part", max_steps=6)
    train(cfg, tmp_path / "part", resume=tmp_path / "part" / "checkpoint")
    full = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()
    part = (tmp_path / "part" / "metrics.jsonl").read_text().splitlines()
    assert part == full
    a, _, _ = load_model(tmp_path / "full" / "checkpoint")
    b, _, _ = load_model(tmp_path / "part" / "checkpoint")
    for k in a.names():
        np.testing.assert_array_equal(a[k].data, b[k].data)


def test_threaded_producers_run(tmp_path):
    state = train(tiny_config(steps=5, workers=2), tmp_path)
    assert state.step == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_halts_with_diagnostic(tmp_path):
    raw = {"domain": {"preset": "linear", "graphs": [{"edges_per_node": 0.0}],
                      "bias_range": [1e300, 1e300]},
           "model": TINY, "schedule": {"steps": 3, "d_values": [3], "n_obs": 8}}
    with pytest.raises(TrainingHalted):
        train(TrainConfig.from_dict(raw), tmp_path)
    diag = json.loads((tmp_path / "diagnostic.json").read_text())
    assert diag["step"] == 0 and diag["tasks"]


def test_config_rejects_unknown_keys_and_round_trips():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"optimizer": {}})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"schedule": {"stepz": 3}})
    cfg = tiny_config(batch_sizes={3: 5})
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert again.schedule.batch_size(3) == 5


def test_task_dataclass_fields():
    t = Task(np.zeros((2, 2)), None, 2, 0)
    assert t.d == 2 and t.index == 0
