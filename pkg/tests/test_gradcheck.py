"""The finite-difference verification suites themselves."""

import numpy as np
import pytest

from metadr import gradcheck as G


def test_rel_err_behavior():
    a = np.array([1.0, 2.0])
    assert G._rel_err(a, a) == 0.0
    assert G._rel_err(np.array([1.0]), np.array([1.01])) == pytest.approx(
        0.01 / 1.01, rel=1e-6
    )
    # tiny coordinates compare absolutely at the 1e-8 FD noise floor
    assert G._rel_err(np.array([1e-9]), np.array([5e-9])) == 0.0
    assert G._rel_err(np.array([0.0]), np.array([5e-5])) > 0.0


def test_random_instances_are_buildable():
    rng = np.random.default_rng(0)
    for kind in ("mlp", "cnn"):
        got = None
        while got is None:
            got = G.random_instance(kind, rng)
        params, loss_fn = got
        val = loss_fn(params)
        assert val.size == 1 and np.isfinite(val.data)
    with pytest.raises(ValueError):
        G.random_instance("transformer", rng)


def test_gradcheck_passes_and_reports():
    rep = G.gradcheck(n_instances=10, seed=0)
    assert rep.passed
    assert rep.instances == 10
    assert len(rep.blocks) == 10
    assert rep.max_grad_err <= 1e-5
    assert rep.max_hvp_err <= 1e-4
    s = rep.summary()
    assert "PASS" in s and "excluded" in s


def test_gradcheck_negative_control_fails():
    rep = G.gradcheck(n_instances=4, seed=0, fault_flip=True)
    assert not rep.passed
    assert "FAIL" in rep.summary()


def test_gradcheck_deterministic():
    a = G.gradcheck(n_instances=6, seed=3)
    b = G.gradcheck(n_instances=6, seed=3)
    assert [x.max_rel_err_grad for x in a.blocks] == [
        x.max_rel_err_grad for x in b.blocks
    ]


def test_composite_instance_is_small_and_deterministic():
    params, objective = G.composite_instance(seed=0)
    assert params.total_count <= 20
    v1 = float(objective(params).data)
    params2, objective2 = G.composite_instance(seed=0)
    assert float(objective2(params2).data) == v1


def test_composite_check_passes():
    res = G.composite_check(seed=0)
    assert res.passed and res.rel_err <= 1e-5
    assert "PASS" in res.summary()


def test_composite_check_beta_gamma_zero_is_plain_loss():
    params, objective = G.composite_instance(seed=2, beta=0.0, gamma=0.0)
    params_b, objective_b = G.composite_instance(seed=2, beta=1.0, gamma=1.0)
    plain = float(objective(params).data)
    full = float(objective_b(params_b).data)
    assert full > plain  # extra nonnegative cross-entropy terms
    res = G.composite_check(seed=2, beta=0.0, gamma=0.0)
    assert res.passed
