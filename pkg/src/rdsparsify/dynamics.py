"""Full-order dynamics on graphs: Brusselator reaction-diffusion and linear diffusion.

States of the Brusselator system are ordered species-block-wise,
``(x_1, ..., x_n, y_1, ..., y_n)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .graph import WeightedGraph, laplacian

BLOWUP_LIMIT = 1e8


class BlowUpError(FloatingPointError):
    """Integration produced a non-finite or runaway state."""

    def __init__(self, step: int, value: float):
        super().__init__(f"state blew up at step {step} (max |state| = {value:.3g})")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class BrusselatorParams:
    a: float = 1.0
    b: float = 1.8
    c: float = 1.0
    d: float = 1.0
    Dx: float = 0.1
    Dy: float = 1.4

    def __post_init__(self):
        if self.a <= 0 or self.d <= 0:
            raise ValueError("Brusselator rates a and d must be positive")
        if self.c < 0:
            raise ValueError("cubic rate c must be non-negative")
        if self.Dx < 0 or self.Dy < 0:
            raise ValueError("diffusion coefficients must be non-negative")


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "rk4"
    dt: float = 1e-3
    steps: int = 5000

    def __post_init__(self):
        if self.scheme not in ("euler-forward", "rk4"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def horizon(self) -> float:
        return self.dt * self.steps


@dataclass
class Trajectory:
    """Sampled states; ``states[j]`` is the state at ``times[j]``."""

    times: np.ndarray
    states: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


def fixed_point(p: BrusselatorParams) -> tuple[float, float]:
    """Homogeneous equilibrium ``(a/d, b d / (a c))``."""
    if p.d == 0 or p.a * p.c == 0:
        raise ZeroDivisionError("fixed point undefined for zero d or a*c")
    return p.a / p.d, p.b * p.d / (p.a * p.c)


def uniform_fixed_point(n: int, p: BrusselatorParams) -> np.ndarray:
    xs, ys = fixed_point(p)
    return np.concatenate([np.full(n, xs), np.full(n, ys)])


def brusselator_field(state, g: WeightedGraph, gamma, p: BrusselatorParams, L=None) -> np.ndarray:
    """Right-hand side of the networked Brusselator with multiplier-scaled Laplacian.

    ``L`` may be passed to skip reassembling the Laplacian.
    """
    state = np.asarray(state, dtype=float)
    n = g.n
    if state.shape != (2 * n,):
        raise ValueError(f"state has shape {state.shape}, expected ({2 * n},)")
    if L is None:
        L = laplacian(g, gamma)
    x, y = state[:n], state[n:]
    x2y = x * x * y
    dx = p.a - (p.b + p.d) * x + p.c * x2y - p.Dx * (L @ x)
    dy = p.b * x - p.c * x2y - p.Dy * (L @ y)
    return np.concatenate([dx, dy])


def make_brusselator(g: WeightedGraph, gamma, p: BrusselatorParams) -> Callable[[np.ndarray], np.ndarray]:
    L = laplacian(g, gamma)
    return lambda s: brusselator_field(s, g, gamma, p, L=L)


def make_linear_diffusion(g: WeightedGraph, gamma=None) -> Callable[[np.ndarray], np.ndarray]:
    L = laplacian(g, gamma)
    return lambda f: -(L @ f)


def heat_kernel_apply(g: WeightedGraph, gamma, f, t: float) -> np.ndarray:
    """``exp(-L t) f`` through the eigendecomposition of the scaled Laplacian."""
    if t < 0:
        raise ValueError("t must be non-negative")
    f = np.asarray(f, dtype=float)
    if f.shape != (g.n,):
        raise ValueError(f"f has shape {f.shape}, expected ({g.n},)")
    if t == 0 or g.m == 0:
        return f.copy()
    ev, V = scipy.linalg.eigh(laplacian(g, gamma, dense=True))
    return V @ (np.exp(-ev * t) * (V.T @ f))


def _rk4_step(field, x, dt):
    k1 = field(x)
    k2 = field(x + 0.5 * dt * k1)
    k3 = field(x + 0.5 * dt * k2)
    k4 = field(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(field, x0, cfg: IntegratorConfig, sample_every: int = 1) -> Trajectory:
    """Fixed-step integration; keeps every ``sample_every``-th state (step 0 included)."""
    x = np.array(x0, dtype=float)
    keep_t, keep_x, keep_i = [0.0], [x.copy()], [0]
    step = _rk4_step if cfg.scheme == "rk4" else (lambda f, s, dt: s + dt * f(s))
    for q in range(1, cfg.steps + 1):
        x = step(field, x, cfg.dt)
        top = np.max(np.abs(x)) if x.size else 0.0
        if not np.isfinite(top) or top > BLOWUP_LIMIT:
            raise BlowUpError(q, float(top))
        if q % sample_every == 0:
            keep_t.append(q * cfg.dt)
            keep_x.append(x.copy())
            keep_i.append(q)
    return Trajectory(np.array(keep_t), np.array(keep_x), np.array(keep_i))


def brusselator_jacobian_at_rest(p: BrusselatorParams) -> np.ndarray:
    """Jacobian of the local reaction term at the homogeneous fixed point."""
    xs, ys = fixed_point(p)
    return np.array(
        [
            [-(p.b + p.d) + 2 * p.c * xs * ys, p.c * xs**2],
            [p.b - 2 * p.c * xs * ys, -p.c * xs**2],
        ]
    )


def dispersion_stability(p: BrusselatorParams, eigenvalues) -> tuple[np.ndarray, np.ndarray]:
    """Growth rate and instability flag for each Laplacian mode.

    Returns
    -------
    growth : ndarray
        Largest real part among the eigenvalues of ``J0 - diag(Dx, Dy) * lam``.
    unstable : ndarray of bool
        ``growth > 0``.
    """
    J0 = brusselator_jacobian_at_rest(p)
    lam = np.asarray(eigenvalues, dtype=float).reshape(-1)
    growth = np.empty(lam.shape)
    for i, l in enumerate(lam):
        J = J0 - np.diag([p.Dx, p.Dy]) * l
        growth[i] = np.linalg.eigvals(J).real.max()
    return growth, growth > 0


def perturbed_initial_conditions(n: int, p: BrusselatorParams, count: int, rng, amplitude: float = 0.1) -> list:
    """Homogeneous rest state plus i.i.d. uniform noise in ``[-amplitude, amplitude]``."""
    base = uniform_fixed_point(n, p)
    return [base + rng.uniform(-amplitude, amplitude, size=2 * n) for _ in range(count)]


def sample_indices(steps: int, samples: int) -> np.ndarray:
    """Regular-stride step indices starting at 0."""
    if samples < 1:
        raise ValueError("need at least one sample")
    if samples == 1:
        return np.array([0])
    stride = steps // (samples - 1)
    if stride < 1:
        raise ValueError(f"cannot take {samples} samples from {steps} steps")
    return np.arange(samples) * stride


def snapshot_ensemble(field, initial_conditions, cfg: IntegratorConfig, samples: int):
    """Integrate every initial condition and sample at a regular stride.

    Returns
    -------
    snapshots : ndarray, shape (d, N * samples)
        Sampled states as columns, trajectory after trajectory.
    trajectories : list of Trajectory
        Sampled trajectories with their step indices.
    """
    if len(initial_conditions) < 1:
        raise ValueError("need at least one initial condition")
    idx = sample_indices(cfg.steps, samples)
    stride = int(idx[1]) if len(idx) > 1 else cfg.steps + 1
    steps = int(idx[-1]) if len(idx) > 1 else 0
    trajs = []
    for x0 in initial_conditions:
        if steps == 0:
            x0 = np.asarray(x0, dtype=float)
            trajs.append(Trajectory(np.array([0.0]), x0[None, :].copy(), np.array([0])))
            continue
        run_cfg = IntegratorConfig(cfg.scheme, cfg.dt, steps)
        trajs.append(integrate(field, x0, run_cfg, sample_every=stride))
    snapshots = np.concatenate([t.states.T for t in trajs], axis=1)
    return snapshots, trajs


def write_trajectory_csv(traj: Trajectory, path, species: int = 2) -> None:
    """Long-format CSV with header ``t, node, species, value``."""
    d = traj.states.shape[1]
    n = d // species
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "node", "species", "value"])
        for t, s in zip(traj.times, traj.states):
            for sp_ in range(species):
                for i in range(n):
                    wr.writerow([f"{t:.17g}", i, sp_, f"{s[sp_ * n + i]:.17g}"])


def read_trajectory_csv(path, species: int = 2) -> Trajectory:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = [h.strip() for h in next(rd)]
        if header != ["t", "node", "species", "value"]:
            raise ValueError(f"unexpected header {header}")
        rows = [(float(t), int(i), int(s), float(v)) for t, i, s, v in rd]
    times = sorted({r[0] for r in rows})
    n = max(r[1] for r in rows) + 1
    tpos = {t: j for j, t in enumerate(times)}
    states = np.zeros((len(times), species * n))
    for t, i, s, v in rows:
        states[tpos[t], s * n + i] = v
    return Trajectory(np.array(times), states)
