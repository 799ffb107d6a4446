"""Euler-forward reduced models, the assimilation cost and its adjoint gradient.

The discrete model is ``z_{q+1} = z_q + dt * psi(z_q, theta)``.  For observed
steps ``j`` in ``A^c`` the misfit is ``T1 = 1/2 sum ||F_j - z_j||^2`` and the
cost adds ``alpha/2 * ||theta||_1``.  The gradient of ``T1`` comes from the
backward recursion::

    lam_N = eta_N,   lam_j = A_j^T lam_{j+1} + eta_j,   grad = sum_k B_{k-1}^T lam_k

with ``A_q = I + dt D_z psi(z_q)``, ``B_q = dt D_theta psi(z_q)`` and
``eta_j = z_j - F_j`` on observed steps (zero elsewhere).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import BLOWUP_LIMIT, BlowUpError, BrusselatorParams
from .graph import WeightedGraph, build_incidence, check_multipliers
from .rom import PODBasis, ReducedBrusselator


class DiscreteModel:
    """Vector field ``psi(z, theta)`` with vector-Jacobian products.

    Subclasses implement ``prepare``, ``field``, ``vjp_z`` and ``vjp_theta``;
    ``prepare`` caches whatever depends on ``theta`` only.
    """

    k: int
    n_params: int

    def prepare(self, theta):
        return np.asarray(theta, dtype=float)

    def field(self, z, ops):
        raise NotImplementedError

    def vjp_z(self, z, lam, ops):
        raise NotImplementedError

    def vjp_theta(self, z, lam, ops):
        raise NotImplementedError

    def field_batch(self, Z, ops):
        """Field at each row of ``Z``; override to vectorise."""
        return np.array([self.field(z, ops) for z in Z])

    def vjp_z_batch(self, Z, Lam, ops):
        return np.array([self.vjp_z(z, lam, ops) for z, lam in zip(Z, Lam)])

    def vjp_theta_sum(self, Z, Lam, ops):
        """``sum_j (D_theta psi(Z[j]))^T Lam[j]``; override to batch."""
        out = np.zeros(self.n_params)
        for z, lam in zip(Z, Lam):
            out += self.vjp_theta(z, lam, ops)
        return out

    def jac_z(self, z, ops) -> np.ndarray:
        return np.array([self.vjp_z(z, e, ops) for e in np.eye(self.k)])

    def jac_theta(self, z, ops) -> np.ndarray:
        return np.array([self.vjp_theta(z, e, ops) for e in np.eye(self.k)])


class BrusselatorROM(DiscreteModel):
    """Reduced Brusselator with the edge multipliers as parameters.

    ``prepare`` returns the folded affine blocks, so each Euler step costs a
    handful of small matrix products plus one cubic term at full dimension.
    """

    def __init__(self, basis: PODBasis, g: WeightedGraph, p: BrusselatorParams):
        self.rb = ReducedBrusselator(basis, g, p)
        self.k = basis.k
        self.n_params = g.m

    def prepare(self, theta):
        return self.rb.operators(theta)

    def field(self, z, ops):
        return self.rb.field(z, ops=ops)

    def vjp_z(self, z, lam, ops):
        return self.rb.vjp_z(z, lam, ops)

    def field_batch(self, Z, ops):
        return self.rb.field_batch(Z, ops)

    def vjp_z_batch(self, Z, Lam, ops):
        return self.rb.vjp_z_batch(Z, Lam, ops)

    def vjp_theta(self, z, lam, ops):
        return self.rb.vjp_gamma(z, lam)

    def vjp_theta_sum(self, Z, Lam, ops):
        return self.rb.vjp_gamma_sum(Z, Lam)

    def jac_z(self, z, ops):
        return self.rb.jac_z(z, ops=ops)

    def jac_theta(self, z, ops):
        return self.rb.jac_gamma(z)


class LinearDiffusionROM(DiscreteModel):
    """``psi = -rho L(gamma) (rho^T z + xbar)`` written as ``-S^T diag(gamma) (S z + s)``."""

    def __init__(self, basis: PODBasis, g: WeightedGraph):
        if basis.d != g.n:
            raise ValueError(f"basis dimension {basis.d} does not match {g.n} vertices")
        B = build_incidence(g).B
        sw = np.sqrt(g.w)
        self.S = sw[:, None] * np.asarray(B @ basis.rho.T)
        self.s = sw * (B @ basis.xbar)
        self.k = basis.k
        self.n_params = g.m

    def prepare(self, theta):
        gamma = check_multipliers(theta, self.n_params)
        return gamma, self.S.T @ (gamma[:, None] * self.S)

    def field(self, z, ops):
        gamma, K = ops
        return -(K @ z) - self.S.T @ (gamma * self.s)

    def vjp_z(self, z, lam, ops):
        return -(ops[1] @ lam)

    def field_batch(self, Z, ops):
        gamma, K = ops
        return -(Z @ K) - self.S.T @ (gamma * self.s)

    def vjp_z_batch(self, Z, Lam, ops):
        return -(Lam @ ops[1])

    def vjp_theta(self, z, lam, ops):
        return -(self.S @ z + self.s) * (self.S @ lam)

    def vjp_theta_sum(self, Z, Lam, ops):
        return -np.einsum("ij,ij->j", Z @ self.S.T + self.s, Lam @ self.S.T)


class LotkaVolterra(DiscreteModel):
    """``x' = a x - b x y``, ``y' = d x y - c y`` with ``theta = (a, b, c, d)``."""

    k = 2
    n_params = 4

    def field(self, z, ops):
        a, b, c, d = ops
        x, y = z
        return np.array([a * x - b * x * y, d * x * y - c * y])

    def jac_z(self, z, ops):
        a, b, c, d = ops
        x, y = z
        return np.array([[a - b * y, -b * x], [d * y, d * x - c]])

    def jac_theta(self, z, ops):
        x, y = z
        return np.array([[x, -x * y, 0.0, 0.0], [0.0, 0.0, -y, x * y]])

    def vjp_z(self, z, lam, ops):
        return self.jac_z(z, ops).T @ lam

    def vjp_theta(self, z, lam, ops):
        return self.jac_theta(z, ops).T @ lam


@dataclass(frozen=True)
class CostConfig:
    """Discretisation and regularisation of the assimilation cost.

    The adjoint path always uses forward Euler.
    """

    alpha: float = 0.0
    dt: float = 1e-2
    steps: int = 500

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.dt >= 0:
            raise ValueError("dt must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def scheme(self) -> str:
        return "euler-forward"


@dataclass
class ObservedTrajectory:
    """Reduced observations ``values[i]`` of step ``indices[i]`` started from ``z0``."""

    z0: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    x0: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=float)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.indices), -1)
        if self.values.shape[1] != self.z0.size:
            raise ValueError(f"observations have dimension {self.values.shape[1]}, expected {self.z0.size}")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("observation indices must be distinct")


@dataclass
class ObservationSet:
    trajectories: list

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("need at least one observed trajectory")

    def validate(self, steps: int, k: int) -> None:
        for c, tr in enumerate(self.trajectories):
            if tr.indices.size and (tr.indices.min() < 1 or tr.indices.max() > steps):
                raise ValueError(f"trajectory {c}: observation indices must lie in [1, {steps}]")
            if tr.z0.size != k:
                raise ValueError(f"trajectory {c}: initial state has dimension {tr.z0.size}, expected {k}")

    @property
    def count(self) -> int:
        return sum(len(t.indices) for t in self.trajectories)


BLOWUP_CHECK_EVERY = 25


def _check_blowup(Z, start: int, stop: int) -> None:
    block = np.abs(Z[start:stop].reshape(stop - start, -1))
    if np.all(block <= BLOWUP_LIMIT):
        return
    bad = ~(block <= BLOWUP_LIMIT)
    row = int(np.flatnonzero(bad.any(axis=1))[0])
    raise BlowUpError(start + row, float(np.max(np.where(np.isfinite(block[row]), block[row], np.inf))))


def forward(model: DiscreteModel, theta, z0, dt: float, steps: int, ops=None) -> np.ndarray:
    """Euler iterates ``z_0 .. z_steps`` as rows."""
    if ops is None:
        ops = model.prepare(theta)
    return forward_batch(model, ops, np.asarray(z0, dtype=float)[None, :], dt, steps)[:, 0, :]


def forward_batch(model: DiscreteModel, ops, Z0, dt: float, steps: int) -> np.ndarray:
    """Euler iterates of several initial states at once, shape ``(steps + 1, C, k)``."""
    Z = np.empty((steps + 1,) + Z0.shape)
    Z[0] = Z0
    checked = 1
    with np.errstate(over="ignore", invalid="ignore"):
        for q in range(steps):
            Z[q + 1] = Z[q] + dt * model.field_batch(Z[q], ops)
            if q + 2 - checked >= BLOWUP_CHECK_EVERY:
                _check_blowup(Z, checked, q + 2)
                checked = q + 2
    if checked < steps + 1:
        _check_blowup(Z, checked, steps + 1)
    return Z


def forward_rom(gamma, basis: PODBasis, g: WeightedGraph, p: BrusselatorParams, cfg: CostConfig, z0) -> np.ndarray:
    """Reduced Brusselator trajectory under forward Euler."""
    return forward(BrusselatorROM(basis, g, p), gamma, np.asarray(z0, dtype=float), cfg.dt, cfg.steps)


def step_jacobians(model: DiscreteModel, z, theta, dt: float):
    """``(A, B) = (I + dt D_z psi, dt D_theta psi)`` at ``z``."""
    ops = model.prepare(theta)
    z = np.asarray(z, dtype=float)
    return np.eye(model.k) + dt * model.jac_z(z, ops), dt * model.jac_theta(z, ops)


def _stack(obs: ObservationSet, k: int):
    """Initial states, horizon and a dense ``(N + 1, C, k)`` observation mask."""
    Z0 = np.array([tr.z0 for tr in obs.trajectories])
    N = max((int(tr.indices.max()) for tr in obs.trajectories if tr.indices.size), default=0)
    F = np.zeros((N + 1, len(obs.trajectories), k))
    mask = np.zeros((N + 1, len(obs.trajectories), 1))
    for c, tr in enumerate(obs.trajectories):
        F[tr.indices, c] = tr.values
        mask[tr.indices, c] = 1.0
    return Z0, N, F, mask


def misfit(model: DiscreteModel, theta, obs: ObservationSet, cfg: CostConfig, ops=None) -> float:
    """Smooth part ``T1`` of the cost."""
    obs.validate(cfg.steps, model.k)
    if ops is None:
        ops = model.prepare(theta)
    Z0, N, F, mask = _stack(obs, model.k)
    Z = forward_batch(model, ops, Z0, cfg.dt, N)
    return 0.5 * float(np.sum(mask * (Z - F) ** 2))


def cost_J(model: DiscreteModel, theta, obs: ObservationSet, cfg: CostConfig) -> float:
    theta = np.asarray(theta, dtype=float)
    return misfit(model, theta, obs, cfg) + 0.5 * cfg.alpha * float(np.sum(np.abs(theta)))


def misfit_and_gradient(model: DiscreteModel, theta, obs: ObservationSet, cfg: CostConfig):
    """``(T1, dT1/dtheta)`` from one forward and one backward sweep.

    All trajectories are swept together; the per-trajectory gradients are
    summed in one reduction at the end.
    """
    obs.validate(cfg.steps, model.k)
    ops = model.prepare(theta)
    dt = cfg.dt
    Z0, N, F, mask = _stack(obs, model.k)
    if N == 0:
        return 0.0, np.zeros(model.n_params)
    Z = forward_batch(model, ops, Z0, dt, N)
    eta = mask * (Z - F)
    total = 0.5 * float(np.sum(eta**2))
    Lam = np.empty((N,) + Z0.shape)
    lam = eta[N].copy()
    for kstep in range(N, 0, -1):
        Lam[kstep - 1] = lam  # lam_k
        if kstep > 1:
            lam = lam + dt * model.vjp_z_batch(Z[kstep - 1], lam, ops) + eta[kstep - 1]
    flat = (N * Z0.shape[0], model.k)
    grad = dt * model.vjp_theta_sum(Z[:N].reshape(flat), Lam.reshape(flat), ops)
    return total, grad


def l1_subgradient(theta, alpha: float) -> np.ndarray:
    """``alpha/2 * sign(theta)`` with ``sign(0) = 0``."""
    return 0.5 * alpha * np.sign(np.asarray(theta, dtype=float))


def grad_J_adjoint(model: DiscreteModel, theta, obs: ObservationSet, cfg: CostConfig) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return misfit_and_gradient(model, theta, obs, cfg)[1] + l1_subgradient(theta, cfg.alpha)


def grad_misfit_tangent_linear(model: DiscreteModel, theta, obs: ObservationSet, cfg: CostConfig) -> np.ndarray:
    """Gradient of ``T1`` through the sensitivity products ``V_j = A_{j-1} V_{j-1} + B_{j-1}``.

    Forms dense k x n_params sensitivities; meant for cross-checking the
    adjoint on small systems.
    """
    obs.validate(cfg.steps, model.k)
    ops = model.prepare(theta)
    grad = np.zeros(model.n_params)
    for tr in obs.trajectories:
        if not tr.indices.size:
            continue
        N = int(tr.indices.max())
        Z = forward(model, theta, tr.z0, cfg.dt, N, ops)
        V = np.zeros((model.k, model.n_params))
        observed = dict(zip(tr.indices.tolist(), tr.values))
        for j in range(1, N + 1):
            A = np.eye(model.k) + cfg.dt * model.jac_z(Z[j - 1], ops)
            V = A @ V + cfg.dt * model.jac_theta(Z[j - 1], ops)
            if j in observed:
                grad += V.T @ (Z[j] - observed[j])
    return grad


def twin_observations(model: DiscreteModel, theta_true, z0s, index_sets, cfg: CostConfig, noise: float = 0.0, rng=None) -> ObservationSet:
    """Observations generated by the reduced model itself, optionally with Gaussian noise."""
    ops = model.prepare(theta_true)
    trs = []
    for z0, idx in zip(z0s, index_sets):
        idx = np.asarray(idx, dtype=np.int64)
        Z = forward(model, theta_true, np.asarray(z0, dtype=float), cfg.dt, int(idx.max()), ops)
        vals = Z[idx].copy()
        if noise > 0:
            vals += (rng or np.random.default_rng()).normal(0.0, noise, size=vals.shape)
        trs.append(ObservedTrajectory(z0, idx, vals))
    return ObservationSet(trs)


def projected_observations(basis: PODBasis, x0s, full_states, index_sets) -> ObservationSet:
    """Observations from full-order states, projected as ``rho (F - xbar)``.

    ``full_states[c][i]`` is the full state at step ``index_sets[c][i]``.
    """
    trs = []
    for x0, states, idx in zip(x0s, full_states, index_sets):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        vals = (states - basis.xbar) @ basis.rho.T
        trs.append(ObservedTrajectory(basis.project(x0), idx, vals, x0=np.asarray(x0, dtype=float)))
    return ObservationSet(trs)
