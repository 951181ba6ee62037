import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgflow import numeric as nm
from sgflow.condition import pack_steps
from sgflow.flow import (LOG_2PI, affine_forward, affine_inverse, dequantize, flow_nll, gaussian_nll,
                         joint_loss, log_density, one_hot)
from sgflow.generator import build_trajectory
from sgflow.model import build_model
from sgflow.numeric import Tensor

from oracles import check_grads


def test_dequantize_alpha_zero_is_identity(rng):
    z = one_hot(np.array([1, 0, 3]), 4)
    assert np.array_equal(dequantize(z, 0.0, rng), z)


def test_dequantize_bounds_and_argmax(rng):
    z = one_hot(np.full(1000, 2), 5)
    out = dequantize(z, 0.9, rng)
    d = out - z
    assert np.all(d >= 0) and np.all(d < 0.9)
    assert np.all(out.argmax(axis=1) == 2)
    assert np.all((out[:, 2] >= 1) & (out[:, 2] < 1.9))


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 0.999), st.integers(2, 30), st.integers(0, 2**31))
def test_dequantize_preserves_argmax(alpha, d, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, d, 50)
    assert np.array_equal(dequantize(one_hot(labels, d), alpha, rng).argmax(axis=1), labels)


def test_dequantize_mean_is_half_alpha(rng):
    z = np.zeros((100_000, 3))
    d = dequantize(z, 0.9, rng) - z
    assert np.all(np.abs(d.mean(axis=0) - 0.45) < 0.01)


def test_dequantize_rejects_large_alpha(rng):
    with pytest.raises(ValueError, match="alpha"):
        dequantize(np.eye(3), 1.0, rng)
    with pytest.raises(ValueError):
        dequantize(np.eye(3), -0.1, rng)
    out = dequantize(np.eye(3), 1.2, rng, strict=False)
    assert np.all((out - np.eye(3)) < 1.2)


def test_affine_examples():
    assert affine_inverse(2.0, 1.0, 0.5) == 2.0
    mu, sigma = np.array([0.3, -2.0]), np.array([0.1, 4.0])
    assert np.array_equal(affine_forward(np.zeros(2), mu, sigma), mu)


@pytest.mark.parametrize("bad", [0.0, -1.0, np.nan])
def test_nonpositive_sigma_rejected(bad):
    with pytest.raises(ValueError):
        affine_forward(np.zeros(2), np.zeros(2), np.array([1.0, bad]))
    with pytest.raises(ValueError):
        log_density(np.zeros(2), np.zeros(2), np.array([1.0, bad]))


def test_round_trip_ten_thousand_triples():
    rng = np.random.default_rng(0)
    z = rng.normal(0, 5, 10_000)
    mu = rng.normal(0, 5, 10_000)
    sigma = np.exp(rng.uniform(-7, 7, 10_000))
    assert np.max(np.abs(affine_forward(affine_inverse(z, mu, sigma), mu, sigma) - z)) < 1e-9
    eps = rng.normal(size=10_000)
    assert np.max(np.abs(affine_inverse(affine_forward(eps, mu, sigma), mu, sigma) - eps)) < 1e-9


def test_log_density_at_mode():
    mu = np.array([0.1, 0.2, 0.3, 0.4])
    assert log_density(mu, mu, np.ones(4)) == pytest.approx(-2 * LOG_2PI, abs=1e-12)
    assert log_density(mu, mu, np.ones(4)) == pytest.approx(-3.6758, abs=1e-4)
    drop = log_density(mu, mu, np.ones(4)) - log_density(mu, mu, 2 * np.ones(4))
    assert drop == pytest.approx(4 * math.log(2), abs=1e-12)


def _fd_logdet_inverse(mu, sigma, z, h=1e-6):
    d = len(z)
    jac = np.zeros((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        jac[:, k] = (affine_inverse(z + e, mu, sigma) - affine_inverse(z - e, mu, sigma)) / (2 * h)
    return np.linalg.slogdet(jac)[1]


def test_change_of_variables_matches_fd_jacobian():
    rng = np.random.default_rng(1)
    for _ in range(100):
        d = int(rng.integers(1, 6))
        mu, z = rng.normal(size=d), rng.normal(size=d)
        sigma = np.exp(rng.uniform(-2, 2, d))
        analytic = -np.sum(np.log(sigma))
        fd = _fd_logdet_inverse(mu, sigma, z)
        assert abs(analytic - fd) <= 1e-4 * max(abs(fd), 1e-8) or abs(analytic - fd) < 1e-9
        eps = affine_inverse(z, mu, sigma)
        base = -0.5 * eps @ eps - 0.5 * d * LOG_2PI
        assert log_density(z, mu, sigma) == pytest.approx(base + fd, rel=1e-4, abs=1e-9)


@pytest.mark.parametrize("mu, sigma", [(0.0, 1.0), (2.5, 0.3), (-1.0, 7.0)])
def test_density_integrates_to_one(mu, sigma):
    z = np.arange(mu - 10 * sigma, mu + 10 * sigma + sigma / 2000, sigma / 1000)[:, None]
    p = np.exp(log_density(z, np.array([mu]), np.array([sigma])))
    assert np.trapezoid(p, z[:, 0]) == pytest.approx(1.0, abs=1e-4)


def test_gaussian_nll_matches_log_density():
    rng = np.random.default_rng(3)
    z, mu, ls = rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4)) * 0.5
    nll = gaussian_nll(z, Tensor(mu), Tensor(ls)).data
    np.testing.assert_allclose(nll, -log_density(z, mu, np.exp(ls)), rtol=1e-12)
    d = 4
    single = gaussian_nll(mu[:1], Tensor(mu[:1]), Tensor(np.zeros((1, d)))).data
    assert single[0] == pytest.approx(0.5 * d * LOG_2PI)


def test_joint_loss_is_plain_sum():
    out = joint_loss(Tensor(1.25), Tensor(0.5), Tensor(3.0))
    assert out.item() == 4.75


def _zero_model(rules):
    mp = build_model(rules, seed=0)
    for name, p in mp.params.items():
        if name.startswith("cond."):
            p.data[:] = 0.0
    return mp


def test_zero_model_gives_standard_normal_nll(rules, corpus):
    mp = _zero_model(rules)
    trajs = [build_trajectory(r, rules) for r in corpus[:3]]
    batch = pack_steps(trajs, rules.num_objects)
    terms = flow_nll(mp, batch, rules.num_objects, rules.num_relations, 0.9, np.random.default_rng(5),
                     reduction="sum")
    rng = np.random.default_rng(5)
    zn = one_hot(batch.node_target, rules.num_objects) + 0.9 * rng.random((len(batch.node_target), rules.num_objects))
    ze = one_hot(batch.edge_target, rules.num_relations) + 0.9 * rng.random((len(batch.edge_target), rules.num_relations))
    expect = sum(0.5 * np.sum(z * z) + 0.5 * z.size * LOG_2PI for z in (zn, ze))
    assert terms.nll.item() == pytest.approx(expect, rel=1e-12)
    assert terms.count == len(zn) + len(ze)
    mean = flow_nll(mp, batch, rules.num_objects, rules.num_relations, 0.9, np.random.default_rng(5))
    assert mean.nll.item() == pytest.approx(expect / terms.count, rel=1e-12)


def test_flow_nll_gradients(rules, corpus):
    mp = build_model(rules, seed=1, gcn_layers=2)
    trajs = [build_trajectory(corpus[4], rules)]
    batch = pack_steps(trajs, rules.num_objects)
    params = {n: p for n, p in mp.params.items() if n.startswith("cond.")}

    def loss():
        return flow_nll(mp, batch, rules.num_objects, rules.num_relations, 0.9, np.random.default_rng(0)).nll

    assert check_grads(loss, params, np.random.default_rng(2), probes_per_param=4) < 1e-3


def test_flow_nll_rejects_empty_batch(rules):
    mp = build_model(rules)
    with pytest.raises(ValueError, match="empty"):
        flow_nll(mp, pack_steps([], rules.num_objects), rules.num_objects, rules.num_relations, 0.9,
                 np.random.default_rng(0))
