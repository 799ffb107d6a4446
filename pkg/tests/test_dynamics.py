import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rdsparsify.dynamics import (
    BlowUpError,
    BrusselatorParams,
    IntegratorConfig,
    Trajectory,
    brusselator_field,
    brusselator_jacobian_at_rest,
    dispersion_stability,
    fixed_point,
    heat_kernel_apply,
    integrate,
    make_brusselator,
    make_linear_diffusion,
    perturbed_initial_conditions,
    read_trajectory_csv,
    snapshot_ensemble,
    uniform_fixed_point,
    write_trajectory_csv,
)
from rdsparsify.graph import WeightedGraph, erdos_renyi, spectral_reference


def test_field_vanishes_at_uniform_fixed_point(er20):
    p = BrusselatorParams()
    f = brusselator_field(uniform_fixed_point(er20.n, p), er20, None, p)
    np.testing.assert_allclose(f, 0, atol=1e-14)


@pytest.mark.parametrize("abcd, expected", [((1, 3, 1, 1), (1, 3)), ((2, 1, 1, 2), (1, 1)), ((2, 0, 1, 4), (0.5, 0))])
def test_fixed_point(abcd, expected):
    a, b, c, d = abcd
    assert fixed_point(BrusselatorParams(a=a, b=b, c=c, d=d)) == pytest.approx(expected)


def test_single_node_constant_term_only():
    g = WeightedGraph(1, np.zeros((0, 2)), [])
    np.testing.assert_array_equal(brusselator_field([0.0, 0.0], g, None, BrusselatorParams(a=1, b=3)), [1.0, 0.0])


def test_field_shape_checked(k3):
    with pytest.raises(ValueError, match="expected"):
        brusselator_field(np.zeros(5), k3, None, BrusselatorParams())


def test_params_validated():
    with pytest.raises(ValueError):
        BrusselatorParams(d=0)
    with pytest.raises(ValueError):
        BrusselatorParams(Dx=-1)


def test_heat_kernel_zero_time(k3):
    f = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(heat_kernel_apply(k3, None, f, 0.0), f)


@pytest.mark.parametrize("t", [0.1, 0.5, 2.0])
def test_heat_kernel_k2_closed_form(k2, t):
    e = np.exp(-2 * t)
    np.testing.assert_allclose(heat_kernel_apply(k2, None, [1.0, 0.0], t), [0.5 + 0.5 * e, 0.5 - 0.5 * e], atol=1e-14)


def test_heat_kernel_edgeless():
    g = WeightedGraph(3, np.zeros((0, 2)), [])
    f = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(heat_kernel_apply(g, None, f, 3.0), f)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 10.0))
def test_heat_kernel_mass_conservation(seed, t):
    rng = np.random.default_rng(seed)
    g = erdos_renyi(12, 0.4, seed=seed % 50)
    gamma = rng.uniform(0, 2, g.m)
    f = rng.standard_normal(g.n)
    assert heat_kernel_apply(g, gamma, f, t).sum() == pytest.approx(f.sum(), abs=1e-9)


def test_zero_field_constant_trajectory():
    x0 = np.array([1.0, -2.0])
    traj = integrate(lambda x: np.zeros_like(x), x0, IntegratorConfig("rk4", 0.1, 20))
    np.testing.assert_array_equal(traj.states, np.tile(x0, (21, 1)))


def test_single_euler_step():
    traj = integrate(lambda x: -x, [1.0], IntegratorConfig("euler-forward", 0.1, 1))
    assert traj.states[-1, 0] == pytest.approx(0.9)


def test_rk4_diffusion_matches_heat_kernel(k2):
    traj = integrate(make_linear_diffusion(k2), [1.0, 0.0], IntegratorConfig("rk4", 0.01, 100))
    np.testing.assert_allclose(traj.states[-1], heat_kernel_apply(k2, None, [1.0, 0.0], 1.0), atol=1e-6)


def test_rk4_self_convergence(er20):
    p = BrusselatorParams()
    x0 = perturbed_initial_conditions(er20.n, p, 1, np.random.default_rng(0))[0]
    f = make_brusselator(er20, None, p)
    T = 1.0
    ref = integrate(f, x0, IntegratorConfig("rk4", T / 2000, 2000)).states[-1]
    errs = [np.linalg.norm(integrate(f, x0, IntegratorConfig("rk4", T / s, s)).states[-1] - ref) for s in (50, 100)]
    assert errs[0] / errs[1] >= 8.0


def test_fixed_point_stays_put_under_euler(er20):
    p = BrusselatorParams()
    r = uniform_fixed_point(er20.n, p)
    traj = integrate(make_brusselator(er20, None, p), r, IntegratorConfig("euler-forward", 1e-3, 1000), sample_every=100)
    assert np.max(np.abs(traj.states - r)) <= 1e-10


def test_blow_up_reported_with_step():
    with pytest.raises(BlowUpError) as info:
        integrate(lambda x: x * x, [10.0], IntegratorConfig("euler-forward", 1.0, 50))
    assert info.value.step >= 1
    assert "step" in str(info.value)


def test_jacobian_at_rest_hand_values():
    J0 = brusselator_jacobian_at_rest(BrusselatorParams(a=1, b=3, c=1, d=1))
    np.testing.assert_allclose(J0, [[2, 1], [-3, -1]])
    growth, unstable = dispersion_stability(BrusselatorParams(a=1, b=3, c=1, d=1), [0.0])
    assert np.trace(J0) == 1 and unstable[0] and growth[0] > 0


def test_no_diffusion_modes_share_labels():
    p = BrusselatorParams(a=1, b=3, c=1, d=1, Dx=0, Dy=0)
    growth, unstable = dispersion_stability(p, [0.0, 1.0, 5.0, 50.0])
    np.testing.assert_allclose(growth, growth[0])
    assert np.all(unstable == unstable[0])


def test_large_eigenvalue_is_stable():
    _, unstable = dispersion_stability(BrusselatorParams(a=1, b=3), [1e6])
    assert not unstable[0]


def test_default_parameters_give_mixed_stability():
    g = erdos_renyi(100, 0.05, seed=0)
    ev = spectral_reference(g, g.n).spectrum
    _, unstable = dispersion_stability(BrusselatorParams(), ev)
    assert unstable.any() and (~unstable).any()


def test_snapshot_single_sample_is_initial_condition(k3):
    x0 = np.arange(6.0)
    X, trajs = snapshot_ensemble(make_brusselator(k3, None, BrusselatorParams()), [x0], IntegratorConfig(), 1)
    np.testing.assert_array_equal(X[:, 0], x0)
    assert X.shape == (6, 1)


def test_snapshot_identical_starts_duplicate_blocks(k3):
    p = BrusselatorParams()
    x0 = perturbed_initial_conditions(3, p, 1, np.random.default_rng(1))[0]
    X, _ = snapshot_ensemble(make_brusselator(k3, None, p), [x0, x0.copy()], IntegratorConfig("rk4", 1e-2, 100), 11)
    np.testing.assert_array_equal(X[:, :11], X[:, 11:])


def test_snapshot_ensemble_er50():
    g = erdos_renyi(50, 0.2, seed=0)
    p = BrusselatorParams()
    ics = perturbed_initial_conditions(g.n, p, 2, np.random.default_rng(0))
    X, trajs = snapshot_ensemble(make_brusselator(g, None, p), ics, IntegratorConfig("rk4", 1e-3, 5000), 50)
    assert X.shape == (100, 100)
    assert np.all(np.isfinite(X))
    assert trajs[0].indices[0] == 0


def test_initial_conditions_within_amplitude():
    p = BrusselatorParams()
    ics = perturbed_initial_conditions(10, p, 3, np.random.default_rng(0), amplitude=0.1)
    base = uniform_fixed_point(10, p)
    assert all(np.max(np.abs(x - base)) <= 0.1 for x in ics)


def test_trajectory_csv_round_trip(tmp_path, k3):
    traj = Trajectory([0.0, 0.5], np.random.default_rng(0).standard_normal((2, 6)))
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    assert path.read_text().splitlines()[0] == "t,node,species,value"
    back = read_trajectory_csv(path)
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.times, traj.times)


def test_integrator_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig("midpoint")
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0)
