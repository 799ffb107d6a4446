import json

import numpy as np
import pytest

from rdsparsify.adjoint import CostConfig, forward, grad_J_adjoint, misfit, projected_observations
from rdsparsify.odenet import (
    HIDDEN,
    N_PARAMS,
    STATE_DIM,
    LinearSystemSpec,
    OdeNetConfig,
    OdeNetParams,
    OdeNetROM,
    nn_field,
    nn_field_projected,
    read_params,
    rollout_error,
    sparsity_stats,
    train_sparse_odenet,
    write_params,
    write_result,
)
from rdsparsify.rom import pod_basis

from conftest import central_fd, rel_err


def hand_rolled_field(p, x):
    hidden = [sum(p.theta1[i, j] * x[j] for j in range(STATE_DIM)) + p.b1[i] for i in range(HIDDEN)]
    out = [sum(p.theta2[r, i] * hidden[i] for i in range(HIDDEN)) + p.b2[r] for r in range(STATE_DIM)]
    return np.sinh(np.array(out))


@pytest.fixture
def truth_basis():
    truth = LinearSystemSpec().euler(1e-2, 500)
    return truth, pod_basis(truth.T, 2)


def test_parameter_count():
    assert N_PARAMS == 656
    assert OdeNetParams.zeros().flat().size == 656


def test_flat_order_round_trip(rng):
    theta = rng.standard_normal(N_PARAMS)
    p = OdeNetParams.from_flat(theta)
    np.testing.assert_array_equal(p.flat(), theta)
    np.testing.assert_array_equal(p.theta1.ravel(), theta[:300])
    np.testing.assert_array_equal(p.b2, theta[-6:])


def test_params_validated():
    with pytest.raises(ValueError, match="theta1"):
        OdeNetParams(np.zeros((6, 50)), np.zeros((6, 50)), np.zeros(50), np.zeros(6))
    with pytest.raises(ValueError, match="non-finite"):
        OdeNetParams(np.zeros((50, 6)), np.zeros((6, 50)), np.full(50, np.nan), np.zeros(6))


def test_field_zero_params(rng):
    np.testing.assert_array_equal(nn_field(OdeNetParams.zeros(), rng.standard_normal(6)), 0)


def test_field_bias_only(rng):
    v = rng.standard_normal(6)
    p = OdeNetParams.zeros()
    p.b2 = v
    np.testing.assert_allclose(nn_field(p, rng.standard_normal(6)), np.sinh(v), atol=0)


def test_field_matches_hand_rolled(rng):
    p = OdeNetParams.random(rng, 0.3)
    x = rng.standard_normal(6)
    np.testing.assert_allclose(nn_field(p, x), hand_rolled_field(p, x), atol=1e-12)


def test_projected_zero_params(truth_basis, rng):
    _, b = truth_basis
    np.testing.assert_array_equal(nn_field_projected(OdeNetParams.zeros(), rng.standard_normal(2), b), 0)


def test_projected_consistent_with_lift(truth_basis, rng):
    _, b = truth_basis
    p = OdeNetParams.random(rng)
    z = rng.standard_normal(2)
    x = b.lift(z)
    np.testing.assert_allclose(nn_field_projected(p, z, b), b.rho @ nn_field(p, x), atol=1e-14)


def test_full_basis_equivalence(rng):
    b = pod_basis(rng.standard_normal((6, 20)), 6)
    p = OdeNetParams.random(rng, 0.2)
    x = rng.standard_normal(6)
    np.testing.assert_allclose(b.rho.T @ nn_field_projected(p, b.project(x), b), nn_field(p, x), atol=1e-10)


def test_projected_dimension_checks(truth_basis, rng):
    _, b = truth_basis
    with pytest.raises(ValueError):
        nn_field_projected(OdeNetParams.zeros(), np.zeros(3), b)
    with pytest.raises(ValueError):
        nn_field_projected(OdeNetParams.zeros(), np.zeros(2), pod_basis(rng.standard_normal((5, 9)), 2))


def test_adjoint_gradient_all_parameters(truth_basis, rng):
    truth, b = truth_basis
    model = OdeNetROM(b)
    cost = CostConfig(alpha=0.0, dt=1e-2, steps=5)
    obs = projected_observations(b, [truth[0]], [truth[[2, 4, 5]]], [[2, 4, 5]])
    theta = OdeNetParams.random(rng, 0.3).flat()
    grad = grad_J_adjoint(model, theta, obs, cost)
    fd = central_fd(lambda t: misfit(model, t, obs, cost), theta, 1e-6)
    assert grad.size == N_PARAMS
    assert rel_err(grad, fd) <= 1e-4


def test_zero_parameter_rollout_is_constant(truth_basis):
    truth, b = truth_basis
    z0 = b.project(truth[0])
    Z = forward(OdeNetROM(b), OdeNetParams.zeros().flat(), z0, 1e-2, 100)
    np.testing.assert_array_equal(Z, np.tile(z0, (101, 1)))
    err = rollout_error(OdeNetParams.zeros(), b, truth, 1e-2)
    np.testing.assert_allclose(err, np.linalg.norm(b.lift(z0) - truth, axis=1))


def test_truth_system_defaults():
    s = LinearSystemSpec()
    np.testing.assert_array_equal(np.diag(s.A), -1.0)
    np.testing.assert_array_equal(np.diag(s.A, 1), 0.5)
    np.testing.assert_array_equal(s.x0, np.eye(6)[0])
    X = s.euler(0.1, 1)
    np.testing.assert_allclose(X[1], s.x0 + 0.1 * s.A @ s.x0)
    with pytest.raises(ValueError):
        LinearSystemSpec(A=np.eye(5))


def test_config_validation():
    with pytest.raises(ValueError):
        OdeNetConfig(alpha=-1)
    with pytest.raises(ValueError):
        OdeNetConfig(n_obs=0)


def test_huge_alpha_drives_parameters_to_zero():
    res = train_sparse_odenet(cfg=OdeNetConfig(alpha=1e6))
    assert res.stats.nonzero == 0
    assert np.max(np.abs(res.params.flat())) == 0.0
    assert res.misfit == pytest.approx(res.baseline_misfit)


def test_unregularised_fit_beats_zero_field():
    res = train_sparse_odenet(cfg=OdeNetConfig(alpha=0.0, n_obs=50))
    assert res.misfit < res.baseline_misfit


def test_sparsity_monotone_in_alpha():
    votes = 0
    for seed in range(3):
        nz = [train_sparse_odenet(cfg=OdeNetConfig(alpha=a, seed=seed)).stats.nonzero for a in (0.0, 10.0, 40.0)]
        votes += nz[0] >= nz[1] >= nz[2]
    assert votes >= 2


def test_sparsity_stats_threshold():
    p = OdeNetParams.zeros()
    p.b1[:3] = [0.5, 0.009, -0.01]
    s = sparsity_stats(p)
    assert s.nonzero == 2 and s.total == 656
    assert s.fraction == pytest.approx(2 / 656)


def test_params_round_trip(tmp_path, rng):
    p = OdeNetParams.random(rng)
    write_params(p, tmp_path)
    assert (tmp_path / "params.csv").read_text().splitlines()[0] == "value"
    header = json.loads((tmp_path / "params.json").read_text())
    assert header["order"] == ["theta1", "theta2", "b1", "b2"] and header["total"] == 656
    np.testing.assert_array_equal(read_params(tmp_path).flat(), p.flat())


def test_result_files(tmp_path):
    res = train_sparse_odenet(cfg=OdeNetConfig(alpha=10.0, seed=1))
    write_result(res, tmp_path)
    for name in ("params.csv", "params.json", "pattern_theta1.csv", "pattern_theta2.csv", "pattern.csv", "error.csv", "summary.json"):
        assert (tmp_path / name).is_file()
    assert np.loadtxt(tmp_path / "pattern_theta1.csv", delimiter=",").shape == (50, 6)
    lines = (tmp_path / "error.csv").read_text().splitlines()
    assert lines[0] == "step,t,error,baseline_error" and len(lines) == 502
    assert (tmp_path / "pattern.csv").read_text().splitlines()[0] == "index,block,value,nonzero"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["nonzero"] == res.stats.nonzero and len(summary["observed_steps"]) == 10
