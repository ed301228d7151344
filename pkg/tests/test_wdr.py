import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cwfedavg.config import config_from_dict
from cwfedavg.errors import EstimationError
from cwfedavg.nn import ModelParams, init_params, train_local
from cwfedavg.runner import simulate
from cwfedavg.verify import gradients_match, numerical_gradient
from cwfedavg.wdr import (
    WdrConfig,
    estimate_distribution,
    estimate_or_uniform,
    make_wdr_hook,
    row_norms,
    wdr_gradient,
    wdr_penalty,
)


def with_final(theta):
    theta = np.asarray(theta, dtype=np.float64)
    k, h = theta.shape
    first = (np.ones((h, 2)), np.zeros(h))
    return ModelParams([first, (theta, np.zeros(k))])


def random_model(seed, k=None):
    rng = np.random.default_rng(seed)
    k = k or int(rng.integers(2, 7))
    p = init_params([int(rng.integers(2, 5)), int(rng.integers(2, 8)), k], rng)
    target = rng.dirichlet(np.ones(k) * rng.choice([0.2, 1.0, 5.0]))
    return p, target


def test_estimate_example():
    p = with_final([[3.0, 0.0], [0.0, 1.0]])
    assert np.allclose(estimate_distribution(p), [0.75, 0.25], rtol=0, atol=1e-15)


def test_estimate_equal_norms_uniform():
    p = with_final([[1.0, 0.0], [0.0, -1.0], [0.6, 0.8]])
    assert np.allclose(estimate_distribution(p), 1 / 3, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_estimate_scale_invariant_and_valid(seed, c):
    p, _ = random_model(seed)
    est = estimate_distribution(p)
    assert (est >= 0).all() and abs(est.sum() - 1) <= 1e-9
    scaled = p.copy()
    scaled.layers[-1] = (scaled.layers[-1][0] * c, scaled.layers[-1][1])
    assert np.max(np.abs(estimate_distribution(scaled) - est)) <= 1e-12


def test_zero_final_layer():
    p = with_final(np.zeros((3, 2)))
    with pytest.raises(EstimationError):
        estimate_distribution(p)
    est, fallback = estimate_or_uniform(p)
    assert fallback and np.allclose(est, 1 / 3)


def test_penalty_examples():
    half = with_final([[1.0, 0.0], [0.0, 1.0]])
    assert wdr_penalty(half, [1.0, 0.0]) == pytest.approx(np.sqrt(0.5), abs=1e-15)
    assert wdr_penalty(half, [0.5, 0.5]) == 0.0
    corner = with_final([[0.0, 0.0], [0.0, 1.0]])
    assert wdr_penalty(corner, [1.0, 0.0]) == pytest.approx(np.sqrt(2.0), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_penalty_bounds(seed):
    p, target = random_model(seed)
    assert 0.0 <= wdr_penalty(p, target) <= np.sqrt(2.0)


def test_gradient_guards():
    p, target = random_model(0)
    assert (wdr_gradient(p, target, WdrConfig(lam=0.0)) == 0).all()
    assert (wdr_gradient(p, estimate_distribution(p), WdrConfig(lam=1.0)) == 0).all()
    # a zero row receives no gradient
    dead = with_final([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    g = wdr_gradient(dead, [0.5, 0.25, 0.25], WdrConfig(lam=1.0))
    assert (g[0] == 0).all() and np.isfinite(g).all()


def test_config_validation():
    with pytest.raises(ValueError):
        WdrConfig(lam=-1.0)
    with pytest.raises(ValueError):
        WdrConfig(epsilon=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_gradient_matches_finite_differences(seed, lam):
    p, target = random_model(seed)
    if wdr_penalty(p, target) <= 1e-3:
        return
    analytic = p.zeros_like()
    analytic.layers[-1] = (wdr_gradient(p, target, WdrConfig(lam=lam)), analytic.layers[-1][1])
    num = numerical_gradient(lambda q: lam * wdr_penalty(q, target), p)
    ok, worst = gradients_match(analytic.flatten(), num)
    assert ok, worst


def test_hook_gradient_is_local_to_output_weights():
    p, target = random_model(3)
    _, g = make_wdr_hook(target, WdrConfig(lam=5.0))(p)
    for w, b in g.layers[:-1]:
        assert (w == 0).all() and (b == 0).all()
    assert (g.layers[-1][1] == 0).all()
    assert np.abs(g.layers[-1][0]).sum() > 0


@pytest.mark.parametrize("seed", range(5))
def test_descent_on_penalty_alone(seed):
    p, target = random_model(seed)
    cfg = WdrConfig(lam=1.0)
    prev = wdr_penalty(p, target)
    for _ in range(200):
        g = wdr_gradient(p, target, cfg)
        if prev <= cfg.epsilon:
            break
        step = 1e-3 / max(np.linalg.norm(g), 1e-12)
        p.layers[-1] = (p.layers[-1][0] - step * g, p.layers[-1][1])
        cur = wdr_penalty(p, target)
        assert cur <= prev + 1e-15
        prev = cur


def test_lambda_zero_hook_keeps_trajectory():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(40, 3)), rng.integers(0, 4, size=40)
    p = init_params([3, 6, 4], 1)
    kw = dict(epochs=2, batch_size=8, lr=0.05)
    plain = train_local(p, x, y, rng=np.random.default_rng(2), **kw)
    hooked = train_local(p, x, y, rng=np.random.default_rng(2),
                         reg=make_wdr_hook(np.full(4, 0.25), WdrConfig(lam=0.0)), **kw)
    assert np.array_equal(plain.flatten(), hooked.flatten())


def test_row_norms():
    assert row_norms(with_final([[3.0, 4.0], [0.0, 1.0]])).tolist() == [5.0, 1.0]


def one_client_cfg(lam):
    return config_from_dict({
        "clients": 1,
        "rounds": 1,
        "dataset": {"kind": "synthetic", "classes": 4, "dim": 6, "per_class": 60, "separation": 3.0},
        "partition": {"kind": "dirichlet", "beta": 0.3},
        "algorithm": {"kind": "cwfedavg", "mode": "estimated_wdr", "lambda": lam},
        "training": {"lr": 0.02, "hidden": [8]},
    })


def test_wdr_lowers_omega_in_first_round():
    base = simulate(one_client_cfg(0.0)).reports[0].omegas[0]
    reg = simulate(one_client_cfg(10.0)).reports[0].omegas[0]
    assert reg < base
