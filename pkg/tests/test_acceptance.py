"""Acceptance gate.

Eight release criteria with pinned tolerances. The desk-protocol
experiments (criteria 4-6) share one set of training runs through a
session fixture; the timed budget applies to the criterion-4 subset
(naive, naive_dr, metadr).

Each criterion prints a single PASS line when it holds; pytest failure
output carries the measured numbers otherwise.
"""

import json
import os
import time

import numpy as np
import pytest

from metadr import cli
from metadr import tensor as T
from metadr.data import desk_protocol
from metadr.gradcheck import composite_check, gradcheck
from metadr.models import ModelConfig
from metadr.optim import AdamState, ParamSet, adam_step
from metadr.trainers import (
    TrainerConfig,
    estimate_fisher,
    ewc_penalty,
    l2_penalty,
    metadr_step,
    run_protocol,
)

SEEDS = (0, 1, 2)
DESK_STEPS = 1500
MODEL = ModelConfig(arch="smallcnn", input_shape=(3, 28, 28), classes=10)

VARIANTS = {
    "naive": dict(method="naive"),
    "naive_dr": dict(method="naive_dr"),
    "metadr": dict(method="metadr"),
    "beta_only": dict(method="metadr", gamma=0.0),
    "gamma_only": dict(method="metadr", beta=0.0),
    "er": dict(method="er", memory_size=100),
}
TIMED = ("naive", "naive_dr", "metadr")  # criterion-4 budget


def announce(criterion: str, detail: str):
    print(f"\nACCEPTANCE {criterion}: PASS — {detail}")


@pytest.fixture(scope="session")
def desk_runs():
    """Final accuracy matrices for all desk variants, plus the wall time
    of the criterion-4 subset."""
    protocol = desk_protocol(seed=0, count=10000)
    out = {}
    timed_wall = 0.0
    for name, kw in VARIANTS.items():
        rows = []
        t0 = time.monotonic()
        for seed in SEEDS:
            cfg = TrainerConfig(
                steps=DESK_STEPS, batch_size=64, seed=seed, **kw
            )
            report = run_protocol(protocol, cfg, MODEL)
            rows.append(report.matrix.rows)
        if name in TIMED:
            timed_wall += time.monotonic() - t0
        out[name] = np.array(rows)  # (seeds, stages, domains)
    return out, timed_wall


def final_first(res, name):
    """3-seed mean of final accuracy on the first domain, in points."""
    return 100.0 * res[name][:, -1, 0].mean()


def final_last(res, name):
    return 100.0 * res[name][:, -1, -1].mean()


# ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    t0 = time.monotonic()
    rep = gradcheck(n_instances=50, tol_grad=1e-5, tol_hvp=1e-4, seed=0)
    wall = time.monotonic() - t0
    assert rep.instances == 50
    assert rep.max_grad_err <= 1e-5, rep.summary()
    assert rep.max_hvp_err <= 1e-4, rep.summary()
    assert wall < 120.0, f"gradcheck took {wall:.1f}s (budget 120s)"
    announce(
        "1 (gradient correctness)",
        f"grad {rep.max_grad_err:.2e}, hvp {rep.max_hvp_err:.2e}, {wall:.1f}s",
    )


def test_criterion_2_composite_objective():
    # finite-difference agreement on a <=20-parameter model
    res = composite_check(seed=0, tol=1e-5)
    assert res.passed, res.summary()

    # beta=gamma=0: the metadr update equals the plain update elementwise
    from tests.test_trainers import batch, tiny_model
    from metadr.models import task_loss
    from metadr.transforms import build_set

    model = tiny_model()
    cfg = TrainerConfig(method="metadr", beta=0.0, gamma=0.0, seed=0)
    stepped, _, _ = metadr_step(
        model, model.params, AdamState.init(model.params), batch(),
        batch(seed=1), build_set("psi3"), cfg, 1e-3, np.random.default_rng(0),
    )
    x, y = batch()
    grads = T.grad(task_loss(model.forward(x, model.params), y),
                   model.params.tensors())
    plain, _ = adam_step(model.params, grads, AdamState.init(model.params), 1e-3)
    for n in model.params.names:
        np.testing.assert_array_equal(stepped[n].data, plain[n].data)
    announce(
        "2 (composite objective)",
        f"fd rel err {res.rel_err:.2e}; beta=gamma=0 reduction exact",
    )


def test_criterion_3_transform_oracles():
    # delegate to the full per-pixel oracle suite in-process
    from tests import test_transforms as tt

    tt.test_enhance_matches_oracle()
    tt.test_solarize_matches_oracle()
    tt.test_invert_grayscale_blur_match_oracle()
    tt.test_rotate_matches_oracle()
    tt.test_enhance_factor_one_is_identity()
    tt.test_invert_is_involution()
    tt.test_grayscale_is_idempotent()
    tt.test_rotate_zero_is_identity()
    tt.test_gaussian_noise_sigma_zero_is_identity()
    announce(
        "3 (transform oracles)",
        "all kernels exact vs per-pixel references on 100 random 8x8 images",
    )


def test_criterion_4_trend_reproduction(desk_runs):
    res, wall = desk_runs
    naive = final_first(res, "naive")
    dr = final_first(res, "naive_dr")
    meta = final_first(res, "metadr")
    assert dr >= naive + 5.0, (
        f"naive_dr {dr:.1f} vs naive {naive:.1f}: needs +5 points"
    )
    assert meta >= dr - 1.0, (
        f"metadr {meta:.1f} vs naive_dr {dr:.1f}: needs >= dr - 1 point"
    )
    assert wall <= 30 * 60, f"timed runs took {wall / 60:.1f} min (budget 30)"
    announce(
        "4 (trend reproduction)",
        f"naive {naive:.1f} / naive_dr {dr:.1f} / metadr {meta:.1f} points "
        f"on domain 1; {wall / 60:.1f} min",
    )


def test_criterion_5_ablation_trend(desk_runs):
    res, _ = desk_runs
    naive = final_first(res, "naive")
    beta = final_first(res, "beta_only")
    gamma_last = final_last(res, "gamma_only")
    beta_last = final_last(res, "beta_only")
    assert beta >= naive + 3.0, (
        f"beta-only {beta:.1f} vs naive {naive:.1f}: needs +3 points retention"
    )
    assert gamma_last >= beta_last + 1.0, (
        f"gamma-only {gamma_last:.1f} vs beta-only {beta_last:.1f} on the "
        f"final domain: needs +1 point"
    )
    announce(
        "5 (ablation trend)",
        f"beta-only {beta:.1f} vs naive {naive:.1f} (domain 1); "
        f"gamma-only {gamma_last:.1f} vs beta-only {beta_last:.1f} (final)",
    )


def test_criterion_6_er_trend(desk_runs):
    res, _ = desk_runs
    naive = final_first(res, "naive")
    er = final_first(res, "er")
    assert er >= naive + 5.0, (
        f"er {er:.1f} vs naive {naive:.1f}: needs +5 points"
    )
    announce("6 (experience replay)", f"er {er:.1f} vs naive {naive:.1f}")


def test_criterion_7_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("METADR_THREADS", "1")
    from importlib import resources

    with resources.files("metadr").joinpath("configs/desk_p1.json").open() as f:
        cfg_doc = json.load(f)
    cfg_path = tmp_path / "desk_p1.json"
    cfg_path.write_text(json.dumps(cfg_doc))
    outputs = []
    for run in ("a", "b"):
        out_dir = tmp_path / run
        rc = cli.main(["run", str(cfg_path), "--output-dir", str(out_dir)])
        assert rc == 0
        outputs.append(
            {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())}
        )
    assert outputs[0].keys() == outputs[1].keys()
    assert len(outputs[0]) == 12  # 9 reports + 3 aggregates
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], f"{name} differs"
    announce(
        "7 (determinism)",
        f"{len(outputs[0])} output files byte-identical across two runs",
    )


def test_criterion_8_penalty_invariants():
    rng = np.random.default_rng(0)
    ps = ParamSet(
        (f"p{i}", T.Tensor(rng.standard_normal(s), True))
        for i, s in enumerate([(3, 2), (4,)])
    )
    anchor = ps.copy_arrays()
    fisher = [np.abs(rng.standard_normal(s)) for s in [(3, 2), (4,)]]
    for pen in (l2_penalty(ps, anchor, 2.0), ewc_penalty(ps, anchor, fisher, 2.0)):
        assert float(pen.data) == 0.0
        for g in T.grad(pen, ps.tensors()):
            assert np.abs(g.data).max() == 0.0

    # Fisher nonnegativity on a real model
    from tests.test_trainers import batch, tiny_model

    model = tiny_model()

    def fwd(psx, xb):
        return model.forward(xb, psx)

    est = estimate_fisher(fwd, model.params, batch(16)[0], 8,
                          np.random.default_rng(0))
    assert all((f >= 0).all() for f in est)

    # 1-parameter logistic: Fisher = p(1-p)x^2 within 2%
    w0, xval = 0.8, 1.7
    one = ParamSet([("w", T.Tensor(np.array([[w0]]), True))])

    def logistic_fwd(psx, xb):
        z1 = T.matmul(T.Tensor(np.asarray(xb, dtype=np.float64)), psx["w"])
        return T.matmul(z1, T.Tensor(np.array([[1.0, 0.0]])))

    got = float(
        estimate_fisher(logistic_fwd, one, np.full((1, 1), xval), 4000,
                        np.random.default_rng(0))[0][0, 0]
    )
    p = 1.0 / (1.0 + np.exp(-w0 * xval))
    want = p * (1 - p) * xval**2
    rel = abs(got - want) / want
    assert rel < 0.02, f"logistic Fisher {got:.5f} vs analytic {want:.5f}"
    announce(
        "8 (penalty invariants)",
        f"penalties zero at anchors; logistic Fisher within {100 * rel:.2f}%",
    )
