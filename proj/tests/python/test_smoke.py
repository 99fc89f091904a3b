import math

import numpy as np
import pytest

_opc = pytest.importorskip("_opc", reason="build the _opc extension first")


def test_e_step_rows_normalize_and_match_manual():
    rng = np.random.default_rng(0)
    K, D, sigma2 = 3, 12, 0.25
    x = rng.integers(0, 2, D).astype(float)
    psi = rng.uniform(0, 1, (K, D))
    eta = _opc.e_step(x, psi, sigma2)
    assert eta.shape == (D, K)
    lik = np.exp(-((x[None, :] - psi) ** 2) / (2 * sigma2))  # [K,D], prior/normalizer cancel
    manual = (lik / lik.sum(axis=0, keepdims=True)).T
    np.testing.assert_allclose(eta, manual, atol=1e-12)
    np.testing.assert_allclose(eta.sum(axis=1), 1.0, atol=1e-12)


def test_expected_loglik_matches_numpy():
    rng = np.random.default_rng(1)
    K, D, sigma2 = 2, 8, 0.25
    x = rng.integers(0, 2, D).astype(float)
    psi = rng.uniform(0, 1, (K, D))
    eta = _opc.e_step(x, psi, sigma2)
    logn = -0.5 * math.log(2 * math.pi * sigma2) - ((x[None, :] - psi) ** 2) / (2 * sigma2)
    manual = float((eta.T * logn).sum())
    assert _opc.expected_loglik(x, psi, eta, sigma2) == pytest.approx(manual, abs=1e-10)


def test_em_input_formula():
    rng = np.random.default_rng(2)
    K, D = 2, 5
    x = rng.integers(0, 2, D).astype(float)
    psi = rng.uniform(0, 1, (K, D))
    eta = _opc.e_step(x, psi, 0.25)
    got = _opc.em_input(eta, psi, x)
    np.testing.assert_allclose(got, eta.T * (psi - x[None, :]), atol=1e-12)


def test_analytic_theta_grad_is_finite_difference_of_lambda():
    rng = np.random.default_rng(3)
    K, D, M, sigma2 = 2, 6, 3, 0.25
    x = rng.integers(0, 2, D).astype(float)
    W = rng.uniform(-0.5, 0.5, (K, D, M))
    theta = rng.uniform(-0.5, 0.5, (K, M))
    psi = np.einsum("kdm,km->kd", W, theta) + 0.5
    eta = _opc.e_step(x, psi, sigma2)
    grad = _opc.analytic_theta_grad(x, psi, eta, W, sigma2)
    eps = 1e-6
    for k in range(K):
        for m in range(M):
            tp, tm = theta.copy(), theta.copy()
            tp[k, m] += eps
            tm[k, m] -= eps
            lp = _opc.expected_loglik(x, np.einsum("kdm,km->kd", W, tp) + 0.5, eta, sigma2)
            lm = _opc.expected_loglik(x, np.einsum("kdm,km->kd", W, tm) + 0.5, eta, sigma2)
            assert grad[k, m] == pytest.approx((lp - lm) / (2 * eps), rel=1e-4, abs=1e-8)


def test_td_and_nstep_targets():
    assert _opc.td_target(1.0, 0.99, 2.0) == pytest.approx(2.98)
    y = _opc.nstep_returns([1.0, 0.0], [5.0, 1.0, 2.0], 0.5, 2)
    assert y[0] == pytest.approx(1.0 + 0.0 + 0.25 * 2.0)
    assert y[1] == pytest.approx(0.0 + 0.5 * 2.0)


def test_softmax_entropy():
    p = _opc.softmax([0.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(p, 0.25)
    assert _opc.entropy_of_logits([0.0] * 4) == pytest.approx(math.log(4))


def test_ami_against_sklearn():
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(4)
    for _ in range(10):
        a = rng.integers(0, 4, 200).tolist()
        b = (np.array(a) + rng.integers(0, 2, 200)).tolist()
        ours = _opc.adjusted_mutual_info(a, b)
        ref = sklearn_metrics.adjusted_mutual_info_score(a, b)
        assert ours == pytest.approx(ref, abs=1e-9)


def test_period_reward_windows():
    series = [(i, 1.0) for i in range(1, 26)]
    w = _opc.period_reward(series, 10)
    assert w == [10.0, 10.0]


def test_env_determinism_and_shapes():
    env1 = _opc.WaterworldEnv({"arch.profile": "desk"}, seed=5)
    env2 = _opc.WaterworldEnv({"arch.profile": "desk"}, seed=5)
    f1, f2 = env1.reset(5), env2.reset(5)
    np.testing.assert_array_equal(f1.pixels, f2.pixels)
    assert f1.pixels.shape == (32, 32)
    assert set(np.unique(f1.pixels)) <= {0.0, 1.0}
    for action in [0, 1, 2, 3, 2, 1]:
        s1, s2 = env1.step(action), env2.step(action)
        assert s1.reward == s2.reward
        np.testing.assert_array_equal(s1.pixels, s2.pixels)
        np.testing.assert_array_equal(s1.labels, s2.labels)
    with pytest.raises(ValueError):
        env1.step(7)


def test_env_state_roundtrip():
    env = _opc.WaterworldEnv({"arch.profile": "desk"}, seed=9)
    env.reset(9)
    for _ in range(5):
        env.step(0)
    blob = env.serialize_state()
    other = _opc.WaterworldEnv({"arch.profile": "desk"}, seed=1)
    other.reset(1)
    other.restore_state(blob)
    a, b = env.step(3), other.step(3)
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_resolve_config_rejects_unknown_keys():
    full = _opc.resolve_config({"arch.profile": "desk", "train.seed": "12"})
    assert full["train.seed"] == "12"
    assert full["env.image_side"] == "32"
    with pytest.raises(ValueError):
        _opc.resolve_config({"bogus.key": "1"})


def test_check_suites_pass():
    for r in _opc.run_checks("estep") + _opc.run_checks("emtoy"):
        assert r["pass"], r
