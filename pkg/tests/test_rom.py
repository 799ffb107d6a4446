import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rdsparsify.dynamics import (
    BrusselatorParams,
    IntegratorConfig,
    brusselator_field,
    heat_kernel_apply,
    integrate,
    make_brusselator,
    perturbed_initial_conditions,
    snapshot_ensemble,
    uniform_fixed_point,
)
from rdsparsify.graph import build_incidence, erdos_renyi, laplacian
from rdsparsify.rom import (
    PODBasis,
    RankError,
    ReducedBrusselator,
    load_basis,
    pod_basis,
    projection_residual,
    reduce_ic,
    reduced_brusselator_field,
    reduced_jacobians,
    reduced_linear_field,
    save_basis,
)

from conftest import central_fd_jac, rel_err


def brusselator_snapshots(g, p=None, seed=0, steps=2000, samples=41):
    p = p or BrusselatorParams()
    ics = perturbed_initial_conditions(g.n, p, 2, np.random.default_rng(seed))
    X, _ = snapshot_ensemble(make_brusselator(g, None, p), ics, IntegratorConfig("rk4", 1e-3, steps), samples)
    return X


@pytest.fixture(scope="module")
def er20_rom():
    g = erdos_renyi(20, 0.3, seed=3)
    p = BrusselatorParams()
    X = brusselator_snapshots(g, p)
    return g, p, X, pod_basis(X, 8)


def test_pod_one_dimensional():
    X = np.array([[1.0, -1.0], [0.0, 0.0]])
    b = pod_basis(X, 1)
    np.testing.assert_allclose(np.abs(b.rho), [[1.0, 0.0]], atol=1e-14)
    np.testing.assert_allclose(b.xbar, 0, atol=1e-15)


def test_pod_rank_zero_rejected():
    X = np.tile(np.array([[1.0], [2.0], [3.0]]), (1, 4))
    with pytest.raises(RankError) as info:
        pod_basis(X, 1)
    assert info.value.rank == 0


def test_pod_rank_names_attainable_rank(rng):
    X = rng.standard_normal(10)[:, None] + np.outer(rng.standard_normal(10), rng.standard_normal(6))
    with pytest.raises(RankError, match="rank 1"):
        pod_basis(X, 3)


@pytest.mark.parametrize("d, S", [(12, 5), (5, 12)])
def test_pod_full_rank_reconstruction(rng, d, S):
    X = rng.standard_normal((d, S))
    k = min(d, S - 1)
    b = pod_basis(X, k)
    recon = b.rho.T @ b.rho @ (X - b.xbar[:, None]) + b.xbar[:, None]
    np.testing.assert_allclose(recon, X, atol=1e-8)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_pod_orthonormal_rows(seed, k):
    X = np.random.default_rng(seed).standard_normal((9, 8))
    b = pod_basis(X, k)
    np.testing.assert_allclose(b.rho @ b.rho.T, np.eye(k), atol=1e-12)


def test_projection_residual_non_increasing(er20_rom):
    _, _, X, _ = er20_rom
    res = [projection_residual(X, pod_basis(X, k)) for k in range(1, 16)]
    assert all(b <= a + 1e-12 for a, b in zip(res, res[1:]))


def test_reduce_ic_examples(rng):
    X = rng.standard_normal((6, 10))
    b = pod_basis(X, 3)
    np.testing.assert_allclose(reduce_ic(b.xbar, b), 0, atol=1e-15)
    u = rng.standard_normal(3)
    np.testing.assert_allclose(reduce_ic(b.xbar + b.rho.T @ u, b), u, atol=1e-12)
    full = pod_basis(rng.standard_normal((6, 20)), 6)
    x0 = rng.standard_normal(6)
    assert np.linalg.norm(reduce_ic(x0, full)) == pytest.approx(np.linalg.norm(x0 - full.xbar), abs=1e-10)
    with pytest.raises(ValueError):
        reduce_ic(np.zeros(5), b)


def test_reduced_linear_field_zero(er20):
    b = PODBasis(np.eye(er20.n)[:4], np.zeros(er20.n))
    np.testing.assert_array_equal(reduced_linear_field(np.zeros(4), er20, None, b), 0)


def test_reduced_linear_field_full_basis(er20, rng):
    b = pod_basis(rng.standard_normal((er20.n, 40)), er20.n)
    z = rng.standard_normal(er20.n)
    gamma = rng.uniform(0.5, 1.5, er20.m)
    L = laplacian(er20, gamma)
    np.testing.assert_allclose(reduced_linear_field(z, er20, gamma, b), b.rho @ (-(L @ (b.rho.T @ z + b.xbar))), atol=1e-12)


def test_reduced_linear_trajectory_k2_heat_kernel(k2, rng):
    b = pod_basis(rng.standard_normal((2, 6)), 2)
    f0 = np.array([1.0, 0.0])
    traj = integrate(lambda z: reduced_linear_field(z, k2, None, b), reduce_ic(f0, b), IntegratorConfig("rk4", 0.01, 100))
    np.testing.assert_allclose(b.lift(traj.states[-1]), heat_kernel_apply(k2, None, f0, 1.0), atol=1e-6)


def test_full_basis_change_of_variables(k3, rng):
    p = BrusselatorParams()
    rho, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    b = PODBasis(rho.T, np.zeros(6))
    z = rng.standard_normal(6)
    gamma = rng.uniform(0.5, 1.5, 3)
    expected = b.rho @ brusselator_field(b.rho.T @ z, k3, gamma, p)
    np.testing.assert_allclose(reduced_brusselator_field(z, k3, gamma, p, b), expected, atol=1e-10)


def test_full_basis_fixed_point(k3, rng):
    p = BrusselatorParams()
    b = pod_basis(rng.standard_normal((6, 12)), 6)
    z = reduce_ic(uniform_fixed_point(3, p), b)
    np.testing.assert_allclose(reduced_brusselator_field(z, k3, None, p, b), 0, atol=1e-12)


def test_project_then_evaluate(er20_rom, rng):
    g, p, _, b = er20_rom
    rb = ReducedBrusselator(b, g, p)
    for _ in range(10):
        z = rng.standard_normal(b.k)
        gamma = rng.uniform(0.0, 2.0, g.m)
        expected = b.rho @ brusselator_field(b.lift(z), g, gamma, p)
        np.testing.assert_allclose(rb.field(z, gamma), expected, atol=1e-10)


def test_batch_evaluations_match(er20_rom, rng):
    g, p, _, b = er20_rom
    rb = ReducedBrusselator(b, g, p)
    ops = rb.operators(rng.uniform(0.5, 1.5, g.m))
    Z, Lam = rng.standard_normal((5, b.k)), rng.standard_normal((5, b.k))
    np.testing.assert_allclose(rb.field_batch(Z, ops), [rb.field(z, ops=ops) for z in Z], atol=1e-12)
    np.testing.assert_allclose(rb.vjp_z_batch(Z, Lam, ops), [rb.vjp_z(z, l, ops) for z, l in zip(Z, Lam)], atol=1e-12)
    np.testing.assert_allclose(rb.vjp_gamma_sum(Z, Lam), sum(rb.vjp_gamma(z, l) for z, l in zip(Z, Lam)), atol=1e-12)
    z, lam = Z[0], Lam[0]
    np.testing.assert_allclose(rb.vjp_z(z, lam, ops), rb.jac_z(z, ops=ops).T @ lam, atol=1e-12)
    np.testing.assert_allclose(rb.vjp_gamma(z, lam), rb.jac_gamma(z).T @ lam, atol=1e-12)


def test_linear_reaction_jacobian_constant(er20, rng):
    p = BrusselatorParams(c=0.0, Dx=0.0, Dy=0.0)
    b = pod_basis(rng.standard_normal((2 * er20.n, 12)), 5)
    J1, _ = reduced_jacobians(rng.standard_normal(5), er20, None, p, b)
    J2, _ = reduced_jacobians(10 * rng.standard_normal(5), er20, None, p, b)
    np.testing.assert_allclose(J1, J2, atol=1e-13)
    h = np.array([[-(p.b + p.d), 0.0], [p.b, 0.0]])
    n = er20.n
    Rx, Ry = b.rho[:, :n], b.rho[:, n:]
    expected = h[0, 0] * Rx @ Rx.T + h[1, 0] * Ry @ Rx.T
    np.testing.assert_allclose(J1, expected, atol=1e-13)


def jacobian_fd_errors(g, p, b, rng, trials):
    rb = ReducedBrusselator(b, g, p)
    errs = []
    for _ in range(trials):
        z = 0.5 * rng.standard_normal(b.k)
        gamma = rng.uniform(0.5, 1.5, g.m)
        Jz, Jg = reduced_jacobians(z, g, gamma, p, b)
        fz = central_fd_jac(lambda zz: rb.field(zz, gamma), z, 1e-5)
        fg = central_fd_jac(lambda gg: rb.field(z, gg), gamma, 1e-5)
        errs.append(max(rel_err(Jz, fz), rel_err(Jg, fg)))
    return np.array(errs)


def test_jacobians_match_finite_differences(er20_rom, rng):
    g, p, _, b = er20_rom
    assert jacobian_fd_errors(g, p, b, rng, 10).max() <= 1e-5


def test_gamma_jacobian_column_locality(er20_rom, rng):
    g, p, _, b = er20_rom
    z = rng.standard_normal(b.k)
    _, Jg = reduced_jacobians(z, g, None, p, b)
    n = g.n
    B = build_incidence(g).B.toarray()
    for j in range(0, g.m, 7):
        u, v = g.edges[j]
        ex = (b.lift(z)[:n][u] - b.lift(z)[:n][v])
        ey = (b.lift(z)[n:][u] - b.lift(z)[n:][v])
        rx = b.rho[:, u] - b.rho[:, v]
        ry = b.rho[:, n + u] - b.rho[:, n + v]
        col = -g.w[j] * (p.Dx * ex * rx + p.Dy * ey * ry)
        np.testing.assert_allclose(Jg[:, j], col, atol=1e-12)
        assert np.count_nonzero(B[j]) == 2


def test_basis_round_trip(tmp_path, er20_rom):
    *_, b = er20_rom
    save_basis(b, tmp_path)
    back = load_basis(tmp_path)
    np.testing.assert_array_equal(back.rho, b.rho)
    np.testing.assert_array_equal(back.xbar, b.xbar)


def test_basis_checksum_detects_tampering(tmp_path, er20_rom):
    *_, b = er20_rom
    save_basis(b, tmp_path)
    rho = np.loadtxt(tmp_path / "rho.csv", delimiter=",")
    rho[0, 0] += 1e-3
    np.savetxt(tmp_path / "rho.csv", rho, delimiter=",", fmt="%.17g")
    with pytest.raises(ValueError, match="checksum"):
        load_basis(tmp_path)


def test_basis_dimension_checked(k3, rng):
    b = pod_basis(rng.standard_normal((5, 8)), 2)
    with pytest.raises(ValueError, match="does not match"):
        ReducedBrusselator(b, k3, BrusselatorParams())
