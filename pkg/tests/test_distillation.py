from dataclasses import replace

import numpy as np
import pytest

from distilled_replay.autodiff import Graph, finite_diff_check, grad, softmax_cross_entropy
from distilled_replay.data import make_blobs
from distilled_replay.distillation import (
    DistillConfig,
    DistillationDiverged,
    distill,
    init_memory,
    inner_unroll,
    load_memory,
    meta_step,
    save_memory,
    unroll,
)
from distilled_replay.models import InitDistribution, Params, accuracy, one_hot, tiny_mlp
from distilled_replay.scenarios import split_stream

import oracles


@pytest.fixture(scope="module")
def blobs_exp():
    train = make_blobs(4, 200, 2, 0.3, seed=1)
    test = make_blobs(4, 50, 2, 0.3, seed=2)
    return split_stream(train, test, classes_per_exp=4)[1]


@pytest.fixture(scope="module")
def two_class_exp():
    train = make_blobs(4, 60, 2, 0.3, seed=3)
    test = make_blobs(4, 20, 2, 0.3, seed=4)
    return split_stream(train, test, classes_per_exp=2)[1]


def _meta_setup(seed=0, d=20, classes=4, hidden=16, n=12):
    rng = np.random.default_rng(seed)
    spec = tiny_mlp(d, classes, hidden)
    x_tilde = rng.normal(size=(classes, d))
    y_tilde = np.eye(classes)
    x_real = rng.normal(size=(n, d))
    y_real = one_hot(rng.integers(0, classes, n), classes)
    init = InitDistribution().sample(spec, seed + 1)
    return spec, x_tilde, y_tilde, x_real, y_real, init


def test_config_validation():
    DistillConfig(R=0)
    for bad in ({"S": 0}, {"J": 0}, {"n": 0}, {"R": -1}, {"eta": 0}, {"alpha": -1}, {"loss_mode": "x"}, {"lr_mode": "x"}):
        with pytest.raises(ValueError):
            DistillConfig(**bad)
    assert DistillConfig().is_distilled_replay
    assert not DistillConfig(lr_mode="learned").is_distilled_replay


def test_init_memory(two_class_exp):
    mem = init_memory(two_class_exp, 1, seed=5)
    assert len(mem) == 2
    assert sorted(mem.classes.tolist()) == sorted(two_class_exp.classes_present)
    rows = {tuple(r) for r in two_class_exp.train.images}
    assert all(tuple(s) in rows for s in mem.samples)
    again = init_memory(two_class_exp, 1, seed=5)
    assert np.array_equal(mem.samples, again.samples)
    assert len(init_memory(two_class_exp, 3, seed=0)) == 6
    with pytest.raises(ValueError):
        init_memory(two_class_exp, 10_000, seed=0)


def test_single_step_closed_form():
    g = Graph()
    xt = g.var(1.0, requires_grad=True)
    th0 = g.var(0.0, requires_grad=True)
    (th1,) = unroll(lambda th: (th[0] - xt) * (th[0] - xt), [th0], 1, 0.1)[0]
    assert th1.value == 0.0 - 0.1 * 2 * (0.0 - 1.0)
    (dx,) = grad((th1 - 2.0) * (th1 - 2.0), [xt])
    assert abs(dx.value - (-0.72)) <= 1e-12


def test_zero_learning_rate_keeps_theta():
    spec, xt, yt, _, _, init = _meta_setup()
    g = Graph()
    th0 = [g.var(t, requires_grad=True) for t in init.tensors]
    for theta in inner_unroll(spec, g.const(xt), g.const(yt), th0, 4, 0.0):
        assert all(np.array_equal(a.value, b) for a, b in zip(theta, init.tensors))


def test_inner_loss_non_increasing_on_logistic_regression():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(8, 3)), np.eye(4)[rng.integers(0, 4, 8)]
    g = Graph()
    xv, yv = g.const(x), g.const(y)
    inner = lambda th: softmax_cross_entropy(xv @ th[0] + th[1], yv)
    th0 = [g.var(np.zeros((3, 4)), requires_grad=True), g.var(np.zeros(4), requires_grad=True)]
    losses = [inner(th0).value] + [inner(th).value for th in unroll(inner, th0, 15, 0.1)]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_unroll_rejects_zero_steps():
    with pytest.raises(ValueError):
        unroll(lambda th: th[0], [], 0, 0.1)


@pytest.mark.parametrize("mode", ["sum_all_steps", "last_step_only"])
@pytest.mark.parametrize("S", [1, 3])
def test_meta_step_matches_independent_oracle(mode, S):
    spec, xt, yt, xr, yr, init = _meta_setup(seed=S)
    cfg = DistillConfig(S=S, eta=0.3, loss_mode=mode)
    step = meta_step(spec, xt, yt, xr, yr, [init], cfg)
    last = mode == "last_step_only"
    ref = oracles.meta_loss(init.tensors, xt, yt, xr, yr, S, 0.3, last_only=last)
    assert abs(step.loss - ref) <= 1e-12 * max(1.0, abs(ref))
    f = lambda v: oracles.meta_loss(init.tensors, v, yt, xr, yr, S, 0.3, last_only=last)
    assert finite_diff_check(f, xt, 1e-5, step.grad_x) <= 1e-5


def test_learned_eta_gradient():
    spec, xt, yt, xr, yr, init = _meta_setup(seed=4)
    cfg = DistillConfig(S=3, eta=0.2, loss_mode="last_step_only", lr_mode="learned")
    step = meta_step(spec, xt, yt, xr, yr, [init], cfg)
    f = lambda e: oracles.meta_loss(init.tensors, xt, yt, xr, yr, 3, float(e[0]), last_only=True)
    assert finite_diff_check(f, np.array([0.2]), 1e-6, np.array([step.grad_eta])) <= 1e-5


def test_mode_equivalence_at_one_step(blobs_exp):
    spec = tiny_mlp(2, 4, 8)
    a = distill(blobs_exp, spec, DistillConfig(S=1, R=5, eta=0.5, loss_mode="sum_all_steps"))
    b = distill(blobs_exp, spec, DistillConfig(S=1, R=5, eta=0.5, loss_mode="last_step_only"))
    assert np.array_equal(a.samples, b.samples)
    assert a.history == b.history


def test_zero_outer_steps_returns_init(blobs_exp):
    spec = tiny_mlp(2, 4, 8)
    mem = init_memory(blobs_exp, 1, seed=3)
    out = distill(blobs_exp, spec, DistillConfig(R=0), memory=mem)
    assert np.array_equal(out.samples, mem.samples)
    assert np.array_equal(out.labels, mem.labels)


def test_determinism_labels_and_threads(blobs_exp):
    spec = tiny_mlp(2, 4, 8)
    cfg = DistillConfig(S=4, R=6, eta=0.5, J=3, seed=11)
    mem = init_memory(blobs_exp, 1, seed=0)
    a = distill(blobs_exp, spec, cfg, memory=mem)
    b = distill(blobs_exp, spec, cfg, memory=mem)
    c = distill(blobs_exp, spec, replace(cfg, workers=3), memory=mem)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.samples, c.samples)
    assert a.history == b.history == c.history
    assert np.array_equal(a.labels, mem.labels)
    assert not np.array_equal(a.samples, mem.samples)


def test_learned_eta_is_updated_and_floored(blobs_exp):
    spec = tiny_mlp(2, 4, 8)
    mem = distill(blobs_exp, spec, DistillConfig(S=3, R=5, eta=0.5, loss_mode="last_step_only", lr_mode="learned"))
    assert mem.eta is not None and mem.eta >= 1e-6 and mem.eta != 0.5
    assert distill(blobs_exp, spec, DistillConfig(S=3, R=2, eta=0.5)).eta is None


def test_divergence_reports_step_and_history(blobs_exp):
    spec = tiny_mlp(2, 4, 8)
    with pytest.raises(DistillationDiverged) as info:
        distill(blobs_exp, spec, DistillConfig(S=5, R=30, eta=50.0, alpha=1e6))
    assert info.value.outer_step >= 1
    assert len(info.value.history) == info.value.outer_step - 1


def _fit_accuracy(spec, mem, S, eta, seed, data):
    p = InitDistribution().sample(spec, seed)
    g = Graph()
    th0 = [g.var(t, requires_grad=True) for t in p.tensors]
    theta = inner_unroll(spec, g.const(mem.samples), g.const(mem.labels), th0, S, eta)[-1]
    return accuracy(spec, Params([t.value for t in theta]), data)


def test_distilled_memory_beats_raw_memory(blobs_exp):
    spec = tiny_mlp(2, 4, 16)
    cfg = DistillConfig(S=10, R=40, eta=0.5, alpha=0.1)
    raw = init_memory(blobs_exp, 1, seed=0)
    mem = distill(blobs_exp, spec, cfg, memory=raw)
    fresh = range(100, 110)  # initializations never seen during distillation
    distilled = [_fit_accuracy(spec, mem, cfg.S, cfg.eta, s, blobs_exp.train) for s in fresh]
    undistilled = [_fit_accuracy(spec, raw, cfg.S, cfg.eta, s, blobs_exp.train) for s in fresh]
    assert min(distilled) >= 0.95
    assert np.mean(undistilled) < np.mean(distilled)
    h = np.array(mem.history)
    q = len(h) // 4
    assert h[-q:].mean() < h[:q].mean()


def test_memory_round_trip(tmp_path, blobs_exp):
    spec = tiny_mlp(2, 4, 8)
    mem = distill(blobs_exp, spec, DistillConfig(S=2, R=3, eta=0.5))
    save_memory(tmp_path / "m.drb", mem, {"seed": 4})
    back, meta = load_memory(tmp_path / "m.drb")
    assert np.array_equal(back.samples, mem.samples)
    assert np.array_equal(back.labels, mem.labels)
    assert back.config == mem.config and back.history == mem.history
    assert meta["seed"] == 4 and meta["source_experience"] == 1
