import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_diff, np_outer_objective, rel_err
from timeflow import autodiff as ad
from timeflow.data import TimeSeriesSample
from timeflow.errors import ContractError, DivergenceError
from timeflow.meta import (
    AdamState,
    InnerLoopConfig,
    OuterConfig,
    cosine_lr,
    fit,
    infer_codes,
    inner_adapt,
    outer_loss,
    outer_step,
)
from timeflow.model import ModelConfig, TimeFlowModel
from timeflow.tasks import TaskWindow, TimeGrid, build_imputation_task, normalize_time

TINY = ModelConfig(num_frequencies=2, depth=2, hidden_dim=5, latent_dim=3)


def make_window(rng, n=10, n_in=5, n_out=0, sid="s"):
    idx = np.sort(rng.choice(n, size=n_in + n_out, replace=False))
    in_idx, out_idx = np.sort(rng.choice(idx, size=n_in, replace=False)), None
    out_idx = np.setdiff1d(idx, in_idx)
    values = rng.normal(size=n)
    return TaskWindow(
        sample_id=sid,
        t_in=normalize_time(in_idx, 0, n),
        values_in=values[in_idx],
        t_target=normalize_time(np.arange(n), 0, n),
        values_target=values,
        eval_mask=np.ones(n, dtype=bool),
        t_out=normalize_time(out_idx, 0, n) if n_out else TimeGrid.empty(0, n),
        values_out=values[out_idx] if n_out else np.empty(0),
        lambda_out=1 if n_out else 0,
    )


def as_tuples(batch):
    return [(w.t_in.coords, w.values_in, w.t_out.coords if w.lambda_out else None,
             w.values_out if w.lambda_out else None) for w in batch]


def meta_gradients(model, batch, cfg, first_order=False):
    nodes = model.parameter_nodes()
    loss = outer_loss(batch, model, nodes, cfg, first_order=first_order)
    names = list(nodes)
    return loss.item(), dict(zip(names, (g.value for g in ad.grad(loss, [nodes[k] for k in names]))))


def fd_meta_gradients(model, batch, cfg):
    params = {k: v.copy() for k, v in model.named_parameters().items()}
    c = model.config
    out = {}
    for k in params:
        def f(x, k=k):
            p = dict(params)
            p[k] = x
            return np_outer_objective(p, c.depth, c.num_frequencies, c.latent_dim, as_tuples(batch), cfg.alpha, cfg.steps)
        out[k] = central_diff(f, params[k])
    return out


# ---------------------------------------------------------------- inner loop

def test_inner_adapt_constant_loss_keeps_zero():
    z = inner_adapt(lambda z: ad.constant(3.0) + ad.scale(ad.sum_all(z), 0.0), (4,), InnerLoopConfig(0.7, 5))
    np.testing.assert_array_equal(z.value, 0.0)


def test_inner_adapt_single_step():
    c = np.array([1.0, -2.0])
    z = inner_adapt(lambda z: ad.sum_all(ad.mul(z - c, z - c)), (2,), InnerLoopConfig(0.1, 1))
    np.testing.assert_allclose(z.value, -0.1 * (-2 * c), rtol=1e-15)


def test_inner_adapt_quadratic_contraction():
    c = np.array([0.5, 2.0, -1.0])
    z = inner_adapt(lambda z: ad.sum_all(ad.mul(z - c, z - c)), (3,), InnerLoopConfig(0.25, 3))
    np.testing.assert_allclose(z.value, 0.875 * c, rtol=1e-15)


def test_inner_adapt_runs_exactly_k_steps():
    calls = []

    def loss(z):
        calls.append(1)
        return ad.sum_all(ad.mul(z, z))

    inner_adapt(loss, (2,), InnerLoopConfig(0.1, 4))
    assert len(calls) == 4


def test_inner_divergence_names_step():
    with pytest.raises(DivergenceError) as info:
        with np.errstate(over="ignore"):
            inner_adapt(lambda z: ad.sum_all(ad.mul(z - 1.0, z - 1.0)) * 1e308 * 10, (1,), InnerLoopConfig(1.0, 2))
    assert info.value.step == 1


@pytest.mark.parametrize("k", [1, 2, 3])
def test_closed_form_quadratic_meta_gradient(k):
    """L(theta, z) = (theta + z - y)^2, K steps from zero: dL/dtheta = 2 (1-2a)^(2K) (theta - y)."""
    alpha, y, theta0 = 0.15, -0.4, 0.9
    theta = ad.variable(theta0)
    z = inner_adapt(lambda z: (theta + z - y) * (theta + z - y), (), InnerLoopConfig(alpha, k))
    outer = (theta + z - y) * (theta + z - y)
    (g,) = ad.grad(outer, [theta])
    assert abs(g.item() - 2 * (1 - 2 * alpha) ** (2 * k) * (theta0 - y)) < 1e-12


# ---------------------------------------------------------------- outer loss

def test_lambda_zero_is_mean_reconstruction_after_adaptation(rng):
    model = TimeFlowModel.create(TINY, 1)
    batch = [make_window(rng, sid=f"s{i}") for i in range(3)]
    cfg = InnerLoopConfig(0.05, 2)
    loss = outer_loss(batch, model, model.parameter_nodes(), cfg).item()
    codes = infer_codes(model, [w.t_in.coords for w in batch], [w.values_in for w in batch], cfg)
    per = [np.mean((model.batch_forward(w.t_in.coords, z) - w.values_in) ** 2) for w, z in zip(batch, codes)]
    assert loss == pytest.approx(np.mean(per), rel=1e-12)


def test_outer_loss_never_reads_outputs_when_lambda_zero(rng):
    model = TimeFlowModel.create(TINY, 1)
    w = make_window(rng)
    cfg = InnerLoopConfig(0.05, 2)
    a = outer_loss([w], model, model.parameter_nodes(), cfg).item()
    w.values_target = w.values_target + 100.0
    w.t_target = TimeGrid.empty()
    assert outer_loss([w], model, model.parameter_nodes(), cfg).item() == a


def test_batched_adaptation_matches_one_at_a_time(rng):
    model = TimeFlowModel.create(TINY, 2)
    batch = [make_window(rng, n_in=3 + i, n_out=2, sid=f"s{i}") for i in range(3)]
    cfg = InnerLoopConfig(0.1, 2)
    together = outer_loss(batch, model, model.parameter_nodes(), cfg).item()
    alone = [outer_loss([w], model, model.parameter_nodes(), cfg).item() for w in batch]
    assert together == pytest.approx(np.mean(alone), rel=1e-12)


def test_realizable_single_sample_reaches_zero_loss():
    # a code-only problem: theta is frozen and the optimal code is reachable
    model = TimeFlowModel.create(ModelConfig(1, 1, 2, 1), 0)
    target_z = np.array([0.3])
    t = np.array([0.0, 0.5, 1.0])
    y = model.batch_forward(t, target_z)
    w = TaskWindow("s", normalize_time([0, 1, 2], 0, 3), y, normalize_time([0, 1, 2], 0, 3), y, np.ones(3, bool))
    loss = outer_loss([w], model, model.parameter_nodes(), InnerLoopConfig(0.3, 200)).item()
    assert loss < 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_meta_gradient_matches_composed_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = TimeFlowModel.create(TINY, rng)
    batch = [make_window(rng, n_in=4, n_out=3 * (i % 2), sid=f"s{i}") for i in range(2)]
    cfg = InnerLoopConfig(0.2, 1 + seed % 2)
    _, g = meta_gradients(model, batch, cfg)
    fd = fd_meta_gradients(model, batch, cfg)
    err = rel_err(np.concatenate([g[k].ravel() for k in g]), np.concatenate([fd[k].ravel() for k in g]))
    assert err < 1e-4


def test_second_order_terms_are_live(rng):
    """Exact meta-gradient matches finite differences; the first-order one does not."""
    model = TimeFlowModel.create(TINY, 5)
    batch = [make_window(rng, n_in=5, n_out=3)]
    cfg = InnerLoopConfig(0.5, 2)
    _, exact = meta_gradients(model, batch, cfg)
    _, approx = meta_gradients(model, batch, cfg, first_order=True)
    fd = fd_meta_gradients(model, batch, cfg)
    flat = lambda d: np.concatenate([d[k].ravel() for k in sorted(d)])
    assert rel_err(flat(exact), flat(fd)) < 1e-4
    assert rel_err(flat(approx), flat(fd)) > 1e-3


# ---------------------------------------------------------------- optimizer

def test_adam_hand_trace():
    p = {"x": np.array([1.0])}
    adam = AdamState()
    lr = 0.1
    grads = [0.5, -0.2, 0.3]
    m = v = 0.0
    x = 1.0
    for t, g in enumerate(grads, start=1):
        adam.step(p, {"x": np.array([g])}, lr)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p["x"][0] == pytest.approx(x, rel=1e-14)
    # first Adam step moves by lr * sign(g) up to epsilon
    q = {"x": np.array([0.0])}
    AdamState().step(q, {"x": np.array([7.0])}, 0.01)
    assert q["x"][0] == pytest.approx(-0.01, rel=1e-8)


def test_zero_gradient_and_zero_lr_leave_parameters(rng):
    model = TimeFlowModel.create(TINY, 0)
    before = {k: v.copy() for k, v in model.named_parameters().items()}
    AdamState().step(model.named_parameters(), {k: np.zeros_like(v) for k, v in before.items()}, 0.1)
    outer_step([make_window(rng)], model, AdamState(), InnerLoopConfig(), lr=0.0)
    for k, v in model.named_parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_cosine_lr():
    assert cosine_lr(0, 1e-3, 1e-5, 100) == 1e-3
    assert cosine_lr(100, 1e-3, 1e-5, 100) == 1e-5
    assert cosine_lr(50, 1e-3, 1e-5, 100) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-14)
    assert cosine_lr(500, 1e-3, 0.0, 100) == 0.0
    with pytest.raises(ContractError):
        cosine_lr(-1, 1e-3, 0.0, 10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 1000))
def test_cosine_lr_bounded_and_monotone(step, total):
    a = cosine_lr(step, 1.0, 0.1, total)
    b = cosine_lr(step + 1, 1.0, 0.1, total)
    assert 0.1 <= b <= a <= 1.0


# ---------------------------------------------------------------- training

def constant_task(c=0.7, n=16):
    s = TimeSeriesSample("c", np.full(n, c), np.arange(n))
    return build_imputation_task(s, 1.0)


def test_fit_constant_series():
    # flat learning rate: the cosine tail slows the last few decades of descent
    model = TimeFlowModel.create(ModelConfig(4, 3, 32, 8), 0)
    res = fit([constant_task()], model, InnerLoopConfig(),
              OuterConfig(outer_lr=1e-2, lr_min=1e-2, epochs=200, batch_size=1))
    assert res.loss_history[-1] < 1e-6
    assert all(np.isfinite(res.loss_history))


def test_fit_is_deterministic(rng):
    batch = [make_window(np.random.default_rng(i), sid=f"s{i}") for i in range(5)]
    runs = []
    for _ in range(2):
        model = TimeFlowModel.create(TINY, 9)
        res = fit(batch, model, InnerLoopConfig(), OuterConfig(outer_lr=1e-2, epochs=6, batch_size=2), seed=4)
        runs.append((np.array(res.loss_history).tobytes(), model.named_parameters()["hyper.weight.0"].tobytes()))
    assert runs[0] == runs[1]


def test_fit_does_not_modify_tasks(rng):
    w = make_window(rng)
    values = w.values_in.copy()
    fit([w], TimeFlowModel.create(TINY, 0), InnerLoopConfig(), OuterConfig(epochs=2, batch_size=1))
    np.testing.assert_array_equal(w.values_in, values)


def test_fit_reports_divergence_context():
    model = TimeFlowModel.create(TINY, 0)
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore"):
        fit([constant_task(1e200)], model, InnerLoopConfig(), OuterConfig(epochs=1, batch_size=1))
    assert info.value.epoch == 0 and info.value.batch == 0
