"""Augmented-Lagrangian solver for box-bounded problems with inequality constraints.

Solves::

    min f(x)   s.t.  x >= lower,  A x >= b,  c(x) <= cap

Inequalities are normalised to ``g(x) <= 0`` (``1 - (A x)_i / b_i`` and
``c(x) / cap - 1``) and folded into the Powell-Hestenes-Rockafellar augmented
Lagrangian.  Each subproblem is solved by projected gradient descent with a
Barzilai-Borwein trial step and Armijo backtracking; the box is enforced
exactly by projection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class InfeasibleProblemError(ValueError):
    """The linear constraints cannot be met from the admissible start."""


@dataclass
class ConstrainedProblem:
    """Problem data and callbacks.

    Parameters
    ----------
    objective : callable
        ``objective(x, need_grad) -> (f, grad or None)``.
    x0 : ndarray
        Start point.
    A, b : optional
        Linear constraint ``A x >= b``.
    nonlinear : callable, optional
        ``nonlinear(x, need_grad) -> (c, grad or None, signature)``; the
        signature labels the smooth branch ``c`` is evaluated on (may be None).
    cap : float
        Right-hand side of ``c(x) <= cap``; must be positive.
    lower : ndarray or float
        Lower bound, default 0.  ``None`` leaves x unbounded.
    """

    objective: Callable
    x0: np.ndarray
    A: object = None
    b: np.ndarray | None = None
    nonlinear: Callable | None = None
    cap: float = 1.0
    lower: object = 0.0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).copy()
        n = self.x0.size
        if self.A is not None:
            self.A = sp.csr_matrix(self.A)
            self.b = np.broadcast_to(np.asarray(self.b, dtype=float), (self.A.shape[0],)).copy()
            if self.A.shape[1] != n:
                raise ValueError(f"A has {self.A.shape[1]} columns, expected {n}")
        if self.nonlinear is not None and not self.cap > 0:
            raise ValueError("nonlinear constraint bound must be positive")
        if self.lower is not None:
            self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()

    @property
    def n(self) -> int:
        return self.x0.size

    def project(self, x) -> np.ndarray:
        return x if self.lower is None else np.maximum(x, self.lower)


@dataclass
class SolverOptions:
    tol_lin_rel: float = 1e-6
    tol_nl: float = 1e-8
    gtol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 500
    mu0: float = 10.0
    reject_branch_changes: bool = True
    free_branches: tuple = ("unperturbed",)
    armijo: float = 1e-4
    max_backtracks: int = 40
    inner_rtol0: float = 1e-2
    memory: int = 10
    inner: str = "lbfgs"
    lbfgs_memory: int = 10
    active_eps: float = 1e-8
    restore_below: float = 1e-3


@dataclass
class Violations:
    linear: np.ndarray
    bounds: np.ndarray
    nonlinear: float

    @property
    def max(self) -> float:
        parts = [0.0, self.nonlinear]
        if self.linear.size:
            parts.append(float(self.linear.max()))
        if self.bounds.size:
            parts.append(float(self.bounds.max()))
        return max(parts)


@dataclass
class SolverReport:
    x: np.ndarray
    history: list = field(default_factory=list)
    violations: Violations | None = None
    iterations: int = 0
    reason: str = ""
    success: bool = False
    objective: float = float("nan")
    constraint_value: float | None = None
    restored: bool = False


def check_feasibility(problem: ConstrainedProblem, x) -> Violations:
    """Violations measured at ``x``: per linear row, per bound, and the nonlinear excess."""
    x = np.asarray(x, dtype=float)
    lin = np.zeros(0) if problem.A is None else np.maximum(0.0, problem.b - problem.A @ x)
    bnd = np.zeros(x.size) if problem.lower is None else np.maximum(0.0, problem.lower - x)
    nl = 0.0
    if problem.nonlinear is not None:
        nl = max(0.0, float(problem.nonlinear(x, False)[0]) - problem.cap)
    return Violations(lin, bnd, nl)


class _Lagrangian:
    """Augmented Lagrangian with cached evaluations."""

    def __init__(self, problem: ConstrainedProblem):
        self.p = problem
        if problem.A is not None:
            scale = np.where(np.abs(problem.b) > 0, np.abs(problem.b), 1.0)
            self.Ahat = sp.diags(1.0 / scale) @ problem.A
            self.bhat = problem.b / scale
        n_lin = 0 if problem.A is None else problem.A.shape[0]
        self.n_lin = n_lin
        self.lam = np.zeros(n_lin + (problem.nonlinear is not None))
        self.mu = 1.0

    def constraints(self, x, need_grad):
        """Normalised ``g(x)``, its Jacobian pieces and the nonlinear branch signature."""
        parts, sig, cval, cgrad = [], None, None, None
        if self.p.A is not None:
            parts.append(self.bhat - self.Ahat @ x)
        if self.p.nonlinear is not None:
            cval, cgrad, sig = self.p.nonlinear(x, need_grad)
            parts.append(np.array([cval / self.p.cap - 1.0]))
        g = np.concatenate(parts) if parts else np.zeros(0)
        return g, cval, cgrad, sig

    def value(self, x, need_grad):
        f, fg = self.p.objective(x, need_grad)
        g, cval, cgrad, sig = self.constraints(x, need_grad)
        shifted = np.maximum(0.0, self.lam + self.mu * g)
        val = f + (np.sum(shifted**2) - np.sum(self.lam**2)) / (2 * self.mu)
        grad = None
        if need_grad:
            grad = np.array(fg, dtype=float)
            if self.n_lin:
                grad = grad - self.Ahat.T @ shifted[: self.n_lin]
            if self.p.nonlinear is not None:
                grad = grad + shifted[-1] * np.asarray(cgrad) / self.p.cap
        return val, grad, f, g, cval, sig


def _branch_ok(old, new, opts: SolverOptions) -> bool:
    if not opts.reject_branch_changes or old is None or new is None:
        return True
    return all(a == b or a in opts.free_branches for a, b in zip(old, new))


def _inner(lag: _Lagrangian, x, opts: SolverOptions, rtol: float):
    """Nonmonotone spectral projected gradient on the augmented Lagrangian.

    The search direction is ``d = P(x - t_BB grad) - x``; steps along ``d``
    are halved until a nonmonotone Armijo test against the largest of the
    last ``opts.memory`` values holds and no spectral branch changes.
    """
    p = lag.p
    val, grad, f, g, cval, sig = lag.value(x, True)
    recent = [val]
    t_bb = 1.0 / max(float(np.max(np.abs(grad))) if grad.size else 1.0, 1e-12)
    pg0 = None
    it = 0
    status = "max-inner"
    for it in range(1, opts.max_inner + 1):
        pgn = float(np.max(np.abs(x - p.project(x - grad)))) if grad.size else 0.0
        if pg0 is None:
            pg0 = max(pgn, 1.0)
        if pgn <= rtol * pg0:
            status = "stationary"
            break
        d = p.project(x - t_bb * grad) - x
        slope = float(grad @ d)
        if not np.any(d) or slope >= 0:
            status = "stationary"
            break
        ref = max(recent)
        lam = 1.0
        accepted = False
        crossed_only = False
        for _ in range(opts.max_backtracks):
            xt = x + lam * d
            try:
                vt, _, _, _, _, sigt = lag.value(xt, False)
            except FloatingPointError:
                # trial step ran the forward model into blow-up
                lam *= 0.5
                continue
            if not _branch_ok(sig, sigt, opts):
                crossed_only = True
                lam *= 0.5
                continue
            crossed_only = False
            if np.isfinite(vt) and vt <= ref + opts.armijo * lam * slope:
                accepted = True
                break
            lam *= 0.5
        if not accepted and crossed_only:
            # only a branch crossing blocks progress; cross at the smallest step
            xt = x + lam * d
            vt = lag.value(xt, False)[0]
            accepted = bool(np.isfinite(vt) and vt <= val)
        if not accepted:
            status = "line-search"
            break
        prev_val = val
        x_old, g_old = x, grad
        x = xt
        val, grad, f, g, cval, sig = lag.value(x, True)
        recent.append(val)
        if len(recent) > opts.memory:
            recent.pop(0)
        s_, y_ = x - x_old, grad - g_old
        sy = float(s_ @ y_)
        t_bb = float(s_ @ s_) / sy if sy > 0 else 1e12
        t_bb = min(max(t_bb, 1e-12), 1e12)
        if abs(prev_val - val) <= 1e-15 * max(1.0, abs(val)):
            status = "stalled"
            break
    return x, it, status, f, g, cval, float(np.max(np.abs(x - p.project(x - grad)))) if x.size else 0.0


def _two_loop(q, S, Y):
    """Apply the L-BFGS inverse-Hessian approximation to ``q``."""
    alphas = []
    q = q.copy()
    for s_, y_ in zip(reversed(S), reversed(Y)):
        rho = 1.0 / float(y_ @ s_)
        a = rho * float(s_ @ q)
        alphas.append((rho, a))
        q -= a * y_
    s_, y_ = S[-1], Y[-1]
    q *= float(s_ @ y_) / float(y_ @ y_)
    for (s_, y_), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * float(y_ @ q)
        q += (a - b) * s_
    return q


def _inner_qn(lag: _Lagrangian, x, opts: SolverOptions, rtol: float):
    """Two-metric projected quasi-Newton on the augmented Lagrangian.

    Variables at their bound with a gradient pushing outward are held fixed;
    the rest move along an L-BFGS direction built from curvature pairs
    restricted to them.  The trial point is projected onto the box and
    accepted by Armijo backtracking along the projection arc, with the same
    branch-change rejection as the gradient variant.
    """
    p = lag.p
    val, grad, f, g, cval, sig = lag.value(x, True)
    S, Y = [], []
    pg0 = None
    it = 0
    status = "max-inner"
    for it in range(1, opts.max_inner + 1):
        pgn = float(np.max(np.abs(x - p.project(x - grad)))) if grad.size else 0.0
        if pg0 is None:
            pg0 = max(pgn, 1.0)
        if pgn <= rtol * pg0:
            status = "stationary"
            break
        if p.lower is None:
            free = np.ones(x.size, dtype=bool)
        else:
            free = ~((x - p.lower <= min(opts.active_eps, pgn)) & (grad > 0))
        d = np.zeros_like(x)
        if S:
            Sf = [s_[free] for s_ in S]
            Yf = [y_[free] for y_ in Y]
            if all(float(s_ @ y_) > 0 for s_, y_ in zip(Sf, Yf)):
                d[free] = -_two_loop(grad[free], Sf, Yf)
        if not np.any(d) or float(grad @ d) >= 0:
            S, Y = [], []
            d[free] = -grad[free] / max(float(np.max(np.abs(grad[free]))) if free.any() else 1.0, 1e-12)
        lam = 1.0
        accepted = False
        crossed_only = False
        for _ in range(opts.max_backtracks):
            xt = p.project(x + lam * d)
            step = xt - x
            if not np.any(step):
                break
            try:
                vt, _, _, _, _, sigt = lag.value(xt, False)
            except FloatingPointError:
                # trial step ran the forward model into blow-up
                lam *= 0.5
                continue
            if not _branch_ok(sig, sigt, opts):
                crossed_only = True
                lam *= 0.5
                continue
            crossed_only = False
            if np.isfinite(vt) and vt <= val + opts.armijo * float(grad @ step):
                accepted = True
                break
            lam *= 0.5
        if not accepted and crossed_only:
            # only a branch crossing blocks progress; cross at the smallest step
            xt = p.project(x + lam * d)
            vt = lag.value(xt, False)[0]
            accepted = bool(np.isfinite(vt) and vt <= val)
        if not accepted:
            if S:
                # retry from a steepest-descent direction before giving up
                S, Y = [], []
                continue
            status = "line-search"
            break
        prev_val = val
        x_old, g_old = x, grad
        x = xt
        val, grad, f, g, cval, sig = lag.value(x, True)
        s_, y_ = x - x_old, grad - g_old
        if float(s_ @ y_) > 1e-12 * float(s_ @ s_):
            S.append(s_)
            Y.append(y_)
            if len(S) > opts.lbfgs_memory:
                S.pop(0)
                Y.pop(0)
        if abs(prev_val - val) <= 1e-15 * max(1.0, abs(val)):
            status = "stalled"
            break
    return x, it, status, f, g, cval, float(np.max(np.abs(x - p.project(x - grad)))) if x.size else 0.0


def _is_feasible(problem: ConstrainedProblem, x, tol_lin: float, tol_nl: float) -> bool:
    v = check_feasibility(problem, x)
    return (v.linear.max() if v.linear.size else 0.0) <= tol_lin and v.nonlinear <= tol_nl


def _restore(problem: ConstrainedProblem, x, anchor, tol_lin: float, tol_nl: float, steps: int = 40):
    """Nearest feasible point to ``x`` on the segment towards the feasible ``anchor``.

    Bisects on the mixing weight; the box is convex so every point of the
    segment stays inside it.
    """
    lo, hi = 0.0, 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if _is_feasible(problem, x + mid * (anchor - x), tol_lin, tol_nl):
            hi = mid
        else:
            lo = mid
    return x + hi * (anchor - x)


def solve(problem: ConstrainedProblem, opts: SolverOptions | None = None) -> SolverReport:
    """Minimise ``problem`` from ``problem.x0``.

    Raises
    ------
    InfeasibleProblemError
        If the linear constraints are violated at the start point beyond
        tolerance; such starts are rejected before iterating.
    """
    opts = opts or SolverOptions()
    x = problem.project(problem.x0.copy())
    tol_lin = opts.tol_lin_rel * (float(np.max(np.abs(problem.b))) if problem.A is not None else 0.0)
    start = check_feasibility(problem, x)
    if start.linear.size and start.linear.max() > tol_lin:
        rows = np.flatnonzero(start.linear > tol_lin)
        raise InfeasibleProblemError(
            f"linear constraint unattainable at the start point for {rows.size} rows (first: row {rows[0]}, deficit {start.linear[rows[0]]:.3g})"
        )
    anchor_ok = _is_feasible(problem, x, tol_lin, opts.tol_nl)
    anchor = x.copy()
    lag = _Lagrangian(problem)
    lag.mu = opts.mu0
    report = SolverReport(x=x)
    best = None
    prev_viol = np.inf
    total_inner = 0
    reason = "max-outer"
    for outer in range(1, opts.max_outer + 1):
        # inexact subproblem solves, tightening to gtol over the outer loop
        rtol = max(opts.gtol, opts.inner_rtol0 * 0.1 ** (outer - 1)) if lag.lam.size else opts.gtol
        inner = _inner_qn if opts.inner == "lbfgs" else _inner
        x, nin, status, f, g, cval, pgn = inner(lag, x, opts, rtol)
        total_inner += nin
        v = check_feasibility(problem, x)
        feasible = (v.linear.max() if v.linear.size else 0.0) <= tol_lin and v.nonlinear <= opts.tol_nl
        report.history.append(
            {"iter": outer, "J": f, "grad_norm": pgn, "max_violation": v.max, "zeta_bar": cval, "inner": nin, "status": status}
        )
        log.info("iter %d, J %.6g, |grad| %.3g, max_violation %.3g, zeta_bar %s", outer, f, pgn, v.max, "n/a" if cval is None else f"{cval:.6g}")
        if feasible and (best is None or f < best[1]):
            best = (x.copy(), f)
        if feasible and status in ("stationary", "stalled") and rtol <= opts.gtol:
            reason = "converged"
            break
        if lag.lam.size == 0:
            reason = "converged" if status in ("stationary", "stalled") else status
            break
        gpos = np.maximum(0.0, g)
        viol = float(np.max(gpos)) if gpos.size else 0.0
        if anchor_ok and not feasible and viol <= opts.restore_below and rtol <= opts.gtol:
            # the remaining violation is small: step back into the feasible set
            x = _restore(problem, x, anchor, tol_lin, opts.tol_nl)
            report.restored = True
            reason = "converged"
            break
        lag.lam = np.maximum(0.0, lag.lam + lag.mu * g)
        if viol > 0.25 * prev_viol:
            lag.mu *= 10.0
        prev_viol = viol
        if feasible and status == "line-search":
            reason = "converged"
            break
    final = x
    if reason != "converged" and best is not None:
        final = best[0]
    v = check_feasibility(problem, final)
    report.x = final
    report.violations = v
    report.iterations = total_inner
    report.reason = reason
    report.objective = float(problem.objective(final, False)[0])
    if problem.nonlinear is not None:
        report.constraint_value = float(problem.nonlinear(final, False)[0])
    report.success = (v.linear.max() if v.linear.size else 0.0) <= tol_lin and v.nonlinear <= opts.tol_nl
    return report
