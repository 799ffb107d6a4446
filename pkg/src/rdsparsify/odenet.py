"""Sparse neural-ODE parameter recovery for a small linear system.

The network field is ``sinh(theta2 (theta1 x + b1) + b2)`` with a 50-unit
hidden layer.  Training runs in a 2-mode POD space with the same Euler
adjoint and augmented-Lagrangian driver as the graph pipeline; the l1 term is
handled by splitting ``theta = theta_plus - theta_minus`` with both parts
non-negative.

Flat parameter order: ``theta1`` (50 x 6, row-major), ``theta2`` (6 x 50,
row-major), ``b1`` (50), ``b2`` (6).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import CostConfig, DiscreteModel, ObservationSet, forward, misfit, misfit_and_gradient, projected_observations
from .optimizer import ConstrainedProblem, SolverOptions, SolverReport, solve
from .rom import PODBasis, pod_basis

log = logging.getLogger(__name__)

STATE_DIM = 6
HIDDEN = 50
N_PARAMS = 2 * HIDDEN * STATE_DIM + HIDDEN + STATE_DIM
ZERO_THRESHOLD = 1e-2


@dataclass
class OdeNetParams:
    theta1: np.ndarray
    theta2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        shapes = {"theta1": (HIDDEN, STATE_DIM), "theta2": (STATE_DIM, HIDDEN), "b1": (HIDDEN,), "b2": (STATE_DIM,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    @classmethod
    def zeros(cls) -> "OdeNetParams":
        return cls.from_flat(np.zeros(N_PARAMS))

    @classmethod
    def random(cls, rng, scale: float = 0.1) -> "OdeNetParams":
        return cls.from_flat(rng.normal(0.0, scale, N_PARAMS))

    @classmethod
    def from_flat(cls, theta) -> "OdeNetParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {theta.shape}")
        a = HIDDEN * STATE_DIM
        return cls(
            theta[:a].reshape(HIDDEN, STATE_DIM),
            theta[a : 2 * a].reshape(STATE_DIM, HIDDEN),
            theta[2 * a : 2 * a + HIDDEN],
            theta[2 * a + HIDDEN :],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta1.ravel(), self.theta2.ravel(), self.b1, self.b2])


@dataclass(frozen=True)
class LinearSystemSpec:
    """``x' = A x + b`` from ``x0``; defaults to a damped tridiagonal chain."""

    A: np.ndarray = field(default_factory=lambda: 0.5 * (np.diag(-2.0 * np.ones(6)) + np.diag(np.ones(5), 1) + np.diag(np.ones(5), -1)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(6))
    x0: np.ndarray = field(default_factory=lambda: np.eye(6)[0])

    def __post_init__(self):
        for name, shape in (("A", (STATE_DIM, STATE_DIM)), ("b", (STATE_DIM,)), ("x0", (STATE_DIM,))):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite array of shape {shape}")
            object.__setattr__(self, name, arr)

    def euler(self, dt: float, steps: int) -> np.ndarray:
        """Euler states ``x_0 .. x_steps`` as rows."""
        X = np.empty((steps + 1, STATE_DIM))
        X[0] = self.x0
        for q in range(steps):
            X[q + 1] = X[q] + dt * (self.A @ X[q] + self.b)
        return X


def nn_field(params: OdeNetParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (STATE_DIM,):
        raise ValueError(f"x has shape {x.shape}, expected ({STATE_DIM},)")
    return np.sinh(params.theta2 @ params.theta1 @ x + params.theta2 @ params.b1 + params.b2)


def nn_field_projected(params: OdeNetParams, z, basis: PODBasis) -> np.ndarray:
    """``rho sinh(theta2 theta1 (rho^T z + xbar) + theta2 b1 + b2)``."""
    z = np.asarray(z, dtype=float)
    if basis.d != STATE_DIM:
        raise ValueError(f"basis dimension {basis.d} does not match state dimension {STATE_DIM}")
    if z.shape != (basis.k,):
        raise ValueError(f"z has shape {z.shape}, expected ({basis.k},)")
    M = params.theta2 @ params.theta1
    return basis.rho @ np.sinh(M @ (basis.rho.T @ z) + M @ basis.xbar + params.theta2 @ params.b1 + params.b2)


class OdeNetROM(DiscreteModel):
    """Projected network field as a discrete model over the flat parameters."""

    n_params = N_PARAMS

    def __init__(self, basis: PODBasis):
        if basis.d != STATE_DIM:
            raise ValueError(f"basis dimension {basis.d} does not match state dimension {STATE_DIM}")
        self.basis = basis
        self.k = basis.k

    def prepare(self, theta):
        return OdeNetParams.from_flat(theta)

    def _layers(self, Z, p: OdeNetParams):
        U = Z @ self.basis.rho + self.basis.xbar
        H = U @ p.theta1.T + p.b1
        S = H @ p.theta2.T + p.b2
        return U, H, S

    def field(self, z, ops):
        return self.field_batch(np.asarray(z, dtype=float)[None, :], ops)[0]

    def field_batch(self, Z, ops):
        _, _, S = self._layers(Z, ops)
        return np.sinh(S) @ self.basis.rho.T

    def _backprop(self, Z, Lam, p: OdeNetParams):
        U, H, S = self._layers(Z, p)
        Gs = np.cosh(S) * (Lam @ self.basis.rho)
        Gh = Gs @ p.theta2
        return U, H, Gs, Gh

    def vjp_z(self, z, lam, ops):
        return self.vjp_z_batch(np.asarray(z, dtype=float)[None, :], np.asarray(lam, dtype=float)[None, :], ops)[0]

    def vjp_z_batch(self, Z, Lam, ops):
        _, _, _, Gh = self._backprop(Z, Lam, ops)
        return (Gh @ ops.theta1) @ self.basis.rho.T

    def vjp_theta(self, z, lam, ops):
        return self.vjp_theta_sum(np.asarray(z, dtype=float)[None, :], np.asarray(lam, dtype=float)[None, :], ops)

    def vjp_theta_sum(self, Z, Lam, ops):
        U, H, Gs, Gh = self._backprop(Z, Lam, ops)
        return np.concatenate([(Gh.T @ U).ravel(), (Gs.T @ H).ravel(), Gh.sum(axis=0), Gs.sum(axis=0)])


@dataclass(frozen=True)
class OdeNetConfig:
    alpha: float = 40.0
    n_obs: int = 10
    steps: int = 500
    dt: float = 1e-2
    k: int = 2
    init_scale: float = 0.1
    seed: int = 0
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_inner=5000))

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 1 <= self.n_obs <= self.steps:
            raise ValueError(f"n_obs must lie in [1, {self.steps}]")
        if not 1 <= self.k <= STATE_DIM:
            raise ValueError(f"k must lie in [1, {STATE_DIM}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["solver"] = asdict(self.solver)
        return d


@dataclass
class SparsityStats:
    nonzero: int
    total: int
    threshold: float
    pattern: np.ndarray

    @property
    def fraction(self) -> float:
        return self.nonzero / self.total


def sparsity_stats(params: OdeNetParams, threshold: float = ZERO_THRESHOLD) -> SparsityStats:
    theta = params.flat()
    pattern = np.abs(theta) >= threshold
    return SparsityStats(int(pattern.sum()), theta.size, threshold, pattern)


@dataclass
class OdeNetResult:
    params: OdeNetParams
    stats: SparsityStats
    error: np.ndarray
    baseline_error: np.ndarray
    misfit: float
    baseline_misfit: float
    basis: PODBasis
    obs: ObservationSet
    report: SolverReport
    config: OdeNetConfig
    system: LinearSystemSpec
    runtime: float


def rollout_error(params: OdeNetParams, basis: PODBasis, truth, dt: float) -> np.ndarray:
    """``||rho^T z_q + xbar - x_q||`` for the Euler rollout of the projected network."""
    truth = np.asarray(truth, dtype=float)
    Z = forward(OdeNetROM(basis), params.flat(), basis.project(truth[0]), dt, truth.shape[0] - 1)
    return np.linalg.norm(Z @ basis.rho + basis.xbar - truth, axis=1)


def l1_split_problem(model: DiscreteModel, obs: ObservationSet, cost: CostConfig, theta0) -> ConstrainedProblem:
    """``min T1(p - q) + alpha/2 sum(p + q)`` over ``p, q >= 0``."""
    n = model.n_params
    half = 0.5 * cost.alpha

    def objective(x, need_grad):
        theta = x[:n] - x[n:]
        l1 = half * float(np.sum(x))
        if not need_grad:
            return misfit(model, theta, obs, cost) + l1, None
        t1, g = misfit_and_gradient(model, theta, obs, cost)
        return t1 + l1, np.concatenate([g, -g]) + half

    theta0 = np.asarray(theta0, dtype=float)
    return ConstrainedProblem(objective, np.concatenate([np.maximum(theta0, 0), np.maximum(-theta0, 0)]))


def train_sparse_odenet(system: LinearSystemSpec | None = None, cfg: OdeNetConfig | None = None) -> OdeNetResult:
    system = system or LinearSystemSpec()
    cfg = cfg or OdeNetConfig()
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    truth = system.euler(cfg.dt, cfg.steps)
    basis = pod_basis(truth.T, cfg.k)
    idx = np.sort(rng.choice(np.arange(1, cfg.steps + 1), size=cfg.n_obs, replace=False))
    obs = projected_observations(basis, [truth[0]], [truth[idx]], [idx])
    model = OdeNetROM(basis)
    cost = CostConfig(alpha=cfg.alpha, dt=cfg.dt, steps=cfg.steps)
    init = OdeNetParams.random(rng, cfg.init_scale).flat()
    report = solve(l1_split_problem(model, obs, cost, init), cfg.solver)
    n = model.n_params
    params = OdeNetParams.from_flat(report.x[:n] - report.x[n:])
    zero = OdeNetParams.zeros()
    result = OdeNetResult(
        params=params,
        stats=sparsity_stats(params),
        error=rollout_error(params, basis, truth, cfg.dt),
        baseline_error=rollout_error(zero, basis, truth, cfg.dt),
        misfit=misfit(model, params.flat(), obs, cost),
        baseline_misfit=misfit(model, zero.flat(), obs, cost),
        basis=basis,
        obs=obs,
        report=report,
        config=cfg,
        system=system,
        runtime=time.perf_counter() - t0,
    )
    log.info("odenet: %d of %d nonzero, T1 %.4g (zero field %.4g)", result.stats.nonzero, N_PARAMS, result.misfit, result.baseline_misfit)
    return result


def write_params(params: OdeNetParams, directory) -> Path:
    """Flat vector as ``params.csv`` plus a ``params.json`` shape header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / "params.csv", params.flat()[:, None], fmt="%.17g", header="value", comments="")
    header = {
        "order": ["theta1", "theta2", "b1", "b2"],
        "shapes": {"theta1": [HIDDEN, STATE_DIM], "theta2": [STATE_DIM, HIDDEN], "b1": [HIDDEN], "b2": [STATE_DIM]},
        "layout": "row-major",
        "total": N_PARAMS,
    }
    (directory / "params.json").write_text(json.dumps(header, indent=2))
    return directory


def read_params(directory) -> OdeNetParams:
    directory = Path(directory)
    header = json.loads((directory / "params.json").read_text())
    if header.get("total") != N_PARAMS:
        raise ValueError(f"parameter header in {directory} declares {header.get('total')} values, expected {N_PARAMS}")
    return OdeNetParams.from_flat(np.loadtxt(directory / "params.csv", skiprows=1, ndmin=1))


def write_result(result: OdeNetResult, directory) -> Path:
    """Parameters, sparsity pattern, error curves and a JSON summary."""
    directory = write_params(result.params, directory)
    pattern = result.stats.pattern
    a = HIDDEN * STATE_DIM
    blocks = {"theta1": pattern[:a].reshape(HIDDEN, STATE_DIM), "theta2": pattern[a : 2 * a].reshape(STATE_DIM, HIDDEN)}
    for name, block in blocks.items():
        np.savetxt(directory / f"pattern_{name}.csv", block.astype(int), fmt="%d", delimiter=",")
    with open(directory / "pattern.csv", "w") as fh:
        fh.write("index,block,value,nonzero\n")
        theta = result.params.flat()
        names = ["theta1"] * a + ["theta2"] * a + ["b1"] * HIDDEN + ["b2"] * STATE_DIM
        for i, (name, v, nz) in enumerate(zip(names, theta, pattern)):
            fh.write(f"{i},{name},{v:.17g},{int(nz)}\n")
    with open(directory / "error.csv", "w") as fh:
        fh.write("step,t,error,baseline_error\n")
        for q, (e, e0) in enumerate(zip(result.error, result.baseline_error)):
            fh.write(f"{q},{q * result.config.dt:.17g},{e:.17g},{e0:.17g}\n")
    summary = {
        "nonzero": result.stats.nonzero,
        "total": result.stats.total,
        "threshold": result.stats.threshold,
        "misfit": result.misfit,
        "baseline_misfit": result.baseline_misfit,
        "runtime": result.runtime,
        "solver_reason": result.report.reason,
        "config": result.config.to_dict(),
        "system": {"A": result.system.A.tolist(), "b": result.system.b.tolist(), "x0": result.system.x0.tolist()},
        "observed_steps": result.obs.trajectories[0].indices.tolist(),
    }
    (directory / "summary.json").write_text(json.dumps(summary, indent=2))
    return directory
