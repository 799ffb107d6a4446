"""End-to-end sparsification of a reaction-diffusion network.

Stages: full-order snapshots (RK4) -> POD basis -> reduced observations ->
constrained adjoint fit of the edge multipliers -> pruning -> evaluation by
the correlation of full-order solutions on the original and pruned graphs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adjoint import BrusselatorROM, CostConfig, misfit, misfit_and_gradient, projected_observations
from .dynamics import (
    BrusselatorParams,
    IntegratorConfig,
    integrate,
    make_brusselator,
    perturbed_initial_conditions,
    sample_indices,
    snapshot_ensemble,
    uniform_fixed_point,
)
from .graph import WeightedGraph, build_incidence, check_multipliers, fiedler_value, spectral_reference
from .optimizer import ConstrainedProblem, InfeasibleProblemError, SolverOptions, SolverReport, solve
from .rom import pod_basis
from .spectral import PerturbationContext, ZetaPool, estimate_all, zeta_approx_with_gradient, zeta_exact

log = logging.getLogger(__name__)

CONNECTED_TOL = 1e-8


class StageError(RuntimeError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class SparsifyConfig:
    """Run parameters; ``None`` entries take graph-dependent defaults.

    Defaults: ``alpha = 16 ln m``, ``tau = max(2.1, 0.1 d_min)``,
    ``k = min(ceil(n/5), 50)``, ``n_p = ceil(n/5)``.
    """

    alpha: float | None = None
    tau: object = None
    prune_eps: float = 1e-2
    n_traj: int = 2
    omega: int = 2
    obs_per_traj: object = 50
    k: int | None = None
    n_p: int | None = None
    k1: float = 1.0
    beta1: float = 1e-2
    params: BrusselatorParams = field(default_factory=BrusselatorParams)
    snapshot: IntegratorConfig = field(default_factory=lambda: IntegratorConfig("rk4", 1e-3, 5000))
    samples: int = 101
    adjoint_dt: float = 2.5e-2
    noise: float = 0.0
    seed: int = 0
    workers: int = 1
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.omega > self.n_traj:
            raise ValueError(f"omega = {self.omega} exceeds the {self.n_traj} trajectories")
        if self.omega < 1 or self.n_traj < 1:
            raise ValueError("need at least one trajectory")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_p is not None and self.n_p < 1:
            raise ValueError("n_p must be >= 1")
        if not self.prune_eps > 0:
            raise ValueError("prune_eps must be positive")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.k1 * self.beta1 > 0:
            raise ValueError("k1 * beta1 must be positive")
        if self.samples < 2:
            raise ValueError("need at least two snapshot samples")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def resolved(self, g: WeightedGraph) -> "SparsifyConfig":
        """Copy with every graph-dependent default filled in."""
        n = g.n
        alpha = 16.0 * math.log(g.m) if self.alpha is None else self.alpha
        tau = self.tau
        if tau is None:
            tau = max(2.1, 0.1 * float(np.min(g.degrees())))
        k = min(math.ceil(n / 5), 50) if self.k is None else self.k
        n_p = math.ceil(n / 5) if self.n_p is None else self.n_p
        return replace(self, alpha=alpha, tau=tau, k=k, n_p=n_p)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["tau"], np.ndarray):
            d["tau"] = d["tau"].tolist()
        if isinstance(d["obs_per_traj"], (list, tuple, np.ndarray)):
            d["obs_per_traj"] = [int(v) for v in d["obs_per_traj"]]
        d["solver"]["free_branches"] = list(d["solver"]["free_branches"])
        return d


@dataclass
class SparsifierResult:
    gamma: np.ndarray
    pruned: WeightedGraph
    m: int
    m_pruned: int
    R: float
    R_deviation: float
    zeta_bar: float
    J_history: list
    runtime: dict
    report: SolverReport
    config: SparsifyConfig
    fiedler: float
    reweighted_only: bool
    disconnected: bool
    eigen_comparison: dict = field(repr=False, default_factory=dict)
    original: WeightedGraph | None = field(default=None, repr=False)


def prune(g: WeightedGraph, gamma, eps: float) -> WeightedGraph:
    """Keep edge ``i`` iff ``w_i gamma_i >= eps``; survivors carry ``w_i gamma_i``."""
    gamma = check_multipliers(gamma, g.m)
    wbar = g.w * gamma
    keep = np.flatnonzero(wbar >= eps)
    return WeightedGraph(g.n, g.edges[keep], wbar[keep])


def _solution_grid(g: WeightedGraph, p: BrusselatorParams, cfg: IntegratorConfig, x0, sample_every: int) -> np.ndarray:
    return integrate(make_brusselator(g, None, p), x0, cfg, sample_every).states


def correlation_R(g: WeightedGraph, g_new: WeightedGraph, p: BrusselatorParams, cfg: IntegratorConfig, seed, sample_every: int = 50, centred: bool = False) -> float:
    """Pearson correlation between full-order solution grids on two graphs.

    Both runs start from the same draw ``r* + U[-0.1, 0.1]`` and use the same
    integrator.  With ``centred`` the rest state ``r*`` is subtracted from both
    grids first, so the constant offset between species does not count as
    agreement.
    """
    if g.n != g_new.n:
        raise ValueError(f"graphs have {g.n} and {g_new.n} vertices")
    rng = np.random.default_rng(seed)
    x0 = perturbed_initial_conditions(g.n, p, 1, rng)[0]
    a = _solution_grid(g, p, cfg, x0, sample_every)
    b = _solution_grid(g_new, p, cfg, x0, sample_every)
    if centred:
        rest = uniform_fixed_point(g.n, p)
        a, b = a - rest, b - rest
    a, b = a.ravel(), b.ravel()
    if np.std(a) == 0 or np.std(b) == 0:
        raise ValueError("solution grid has zero variance; correlation undefined")
    return float(np.corrcoef(a, b)[0, 1])


def degree_operator(g: WeightedGraph):
    """``Q^T diag(w)``: maps multipliers to weighted vertex degrees."""
    return (build_incidence(g).Q.T.multiply(g.w[None, :])).tocsr()


def _observation_counts(cfg: SparsifyConfig) -> list:
    p = cfg.obs_per_traj
    if isinstance(p, (int, np.integer)):
        return [int(p)] * cfg.omega
    p = [int(v) for v in p]
    if len(p) != cfg.omega:
        raise ValueError(f"{len(p)} observation counts for {cfg.omega} trajectories")
    return p


def observation_schedule(cfg: SparsifyConfig) -> tuple[int, list]:
    """Euler steps per snapshot sample and observations per trajectory.

    Raises ``ValueError`` when the adjoint step does not divide the snapshot
    sampling stride or a trajectory asks for more observations than samples.
    """
    ratio = cfg.adjoint_dt / cfg.snapshot.dt
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ValueError(f"adjoint step {cfg.adjoint_dt} is not a multiple of the snapshot step {cfg.snapshot.dt}")
    stride = int(sample_indices(cfg.snapshot.steps, cfg.samples)[1])
    per = stride / round(ratio)
    if abs(per - round(per)) > 1e-9:
        raise ValueError(f"snapshot stride {stride} is not a multiple of the adjoint step ratio {round(ratio)}")
    counts = _observation_counts(cfg)
    for c, cnt in enumerate(counts):
        if not 0 <= cnt <= cfg.samples - 1:
            raise ValueError(f"trajectory {c}: {cnt} observations requested from {cfg.samples - 1} samples")
    return int(round(per)), counts


def eigen_comparison(ctx: PerturbationContext, gamma_eff) -> dict:
    """Reference versus new leading eigenpairs, matched as in ``zeta_exact``."""
    _, lam_new, phi_new, ov = zeta_exact(ctx, gamma_eff, return_pairs=True)
    lam = ctx.reference.lam
    return {
        "lambda_ref": lam,
        "lambda_new": lam_new,
        "relative_change": (lam_new - lam) / np.where(lam != 0, lam, 1.0),
        "overlap": ov,
        "phi_ref": ctx.reference.phi[:, :2],
        "phi_new": phi_new[:, :2],
    }


@dataclass
class SparsifyProblem:
    """Everything the constrained solve needs, built from a graph and a config."""

    cfg: SparsifyConfig
    ctx: PerturbationContext
    basis: object
    obs: object
    cost: CostConfig
    model: BrusselatorROM
    problem: ConstrainedProblem
    pool: ZetaPool | None = None

    def close(self):
        if self.pool is not None:
            self.pool.close()
            self.pool = None


def build_problem(g: WeightedGraph, cfg: SparsifyConfig, timings: dict | None = None) -> SparsifyProblem:
    """Spectral reference, snapshots, POD, observations and the solver problem.

    ``cfg`` must already be resolved against ``g``.
    """
    timings = {} if timings is None else timings
    clock = [time.perf_counter()]

    def stage(name):
        now = time.perf_counter()
        timings[name] = now - clock[0]
        clock[0] = now

    if g.m == 0:
        raise StageError("setup", ValueError("graph has no edges"))
    per, counts = observation_schedule(cfg)
    if fiedler_value(g) <= CONNECTED_TOL:
        warnings.warn("input graph is disconnected", RuntimeWarning)
    A = degree_operator(g)
    tau = np.broadcast_to(np.asarray(cfg.tau, dtype=float), (g.n,)).copy()
    short = np.flatnonzero(A @ np.ones(g.m) < tau)
    if short.size:
        raise InfeasibleProblemError(
            f"degree bound tau unattainable at gamma = 1 for {short.size} vertices (first: vertex {short[0]})"
        )
    try:
        ref = spectral_reference(g, min(cfg.n_p, g.n))
        ctx = PerturbationContext.build(g, ref)
    except Exception as exc:
        raise StageError("spectral-reference", exc) from exc
    stage("spectral-reference")

    rng = np.random.default_rng(cfg.seed)
    p = cfg.params
    try:
        ics = perturbed_initial_conditions(g.n, p, cfg.n_traj, rng)
        snaps, trajs = snapshot_ensemble(make_brusselator(g, None, p), ics, cfg.snapshot, cfg.samples)
    except Exception as exc:
        raise StageError("snapshots", exc) from exc
    stage("snapshots")
    try:
        basis = pod_basis(snaps, min(cfg.k, snaps.shape[1] - 1, 2 * g.n))
    except Exception as exc:
        raise StageError("pod", exc) from exc
    stage("pod")

    try:
        idx_sets, states = [], []
        for c in range(cfg.omega):
            avail = np.arange(1, len(trajs[c].indices))
            if counts[c] > avail.size:
                raise ValueError(f"{counts[c]} observations requested from {avail.size} samples")
            pick = np.sort(rng.choice(avail, size=counts[c], replace=False))
            idx_sets.append(pick * per)
            vals = trajs[c].states[pick]
            if cfg.noise > 0:
                vals = vals + rng.normal(0.0, cfg.noise, size=vals.shape)
            states.append(vals)
        obs = projected_observations(basis, ics[: cfg.omega], states, idx_sets)
        cost_cfg = CostConfig(cfg.alpha, cfg.adjoint_dt, int(max(s.max() for s in idx_sets)))
    except Exception as exc:
        raise StageError("observations", exc) from exc
    stage("observations")

    model = BrusselatorROM(basis, g, p)
    half_alpha = 0.5 * cfg.alpha
    pool = ZetaPool(ctx, cfg.workers) if cfg.workers > 1 else None

    def objective(x, need_grad):
        # |gamma| = gamma on the feasible box, so the l1 term is linear there
        if not need_grad:
            return misfit(model, x, obs, cost_cfg) + half_alpha * float(np.sum(x)), None
        t1, gr = misfit_and_gradient(model, x, obs, cost_cfg)
        return t1 + half_alpha * float(np.sum(x)), gr + half_alpha

    def nonlinear(x, need_grad):
        if need_grad:
            return zeta_approx_with_gradient(ctx, x, pool=pool)
        ests = estimate_all(ctx, x, pool=pool)
        lam = ctx.reference.lam
        val = ctx.zeta_scale * sum((e.lam - lam[e.mode]) ** 2 for e in ests)
        val += sum((e.overlap - 1.0) ** 2 for e in ests) / ctx.n_p
        return float(val), None, tuple(e.branch for e in ests)

    problem = ConstrainedProblem(objective, np.ones(g.m), A=A, b=tau, nonlinear=nonlinear, cap=cfg.k1 * cfg.beta1)
    return SparsifyProblem(cfg, ctx, basis, obs, cost_cfg, model, problem, pool)


def sparsify(g: WeightedGraph, cfg: SparsifyConfig | None = None) -> SparsifierResult:
    """Run the full sparsification on ``g``.

    Raises
    ------
    InfeasibleProblemError
        If the degree constraint cannot hold even with all multipliers at 1.
    StageError
        For failures in any other stage, tagged with the stage name.
    """
    if g.m == 0:
        raise StageError("setup", ValueError("graph has no edges"))
    cfg = (cfg or SparsifyConfig()).resolved(g)
    timings = {}
    t0 = time.perf_counter()
    setup = build_problem(g, cfg, timings)
    ctx, p = setup.ctx, cfg.params
    t1 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            report = solve(setup.problem, cfg.solver)
    except InfeasibleProblemError:
        raise
    except Exception as exc:
        raise StageError("solve", exc) from exc
    finally:
        setup.close()
    timings["solve"] = time.perf_counter() - t1
    t1 = time.perf_counter()

    gamma = report.x
    pruned = prune(g, gamma, cfg.prune_eps)
    lam2_new = fiedler_value(pruned) if pruned.n > 1 else 0.0
    gamma_eff = np.zeros(g.m)
    kept = g.w * gamma >= cfg.prune_eps
    gamma_eff[kept] = gamma[kept]
    try:
        comparison = eigen_comparison(ctx, gamma_eff)
    except Exception as exc:
        raise StageError("evaluation", exc) from exc
    try:
        R = correlation_R(g, pruned, p, cfg.snapshot, cfg.seed + 1)
        R_dev = correlation_R(g, pruned, p, cfg.snapshot, cfg.seed + 1, centred=True)
    except Exception as exc:
        raise StageError("correlation", exc) from exc
    timings["evaluation"] = time.perf_counter() - t1
    timings["total"] = time.perf_counter() - t0
    return SparsifierResult(
        gamma=gamma,
        pruned=pruned,
        m=g.m,
        m_pruned=pruned.m,
        R=R,
        R_deviation=R_dev,
        zeta_bar=float(report.constraint_value),
        J_history=report.history,
        runtime=timings,
        report=report,
        config=cfg,
        fiedler=float(lam2_new),
        reweighted_only=pruned.m == g.m,
        disconnected=bool(lam2_new <= CONNECTED_TOL),
        eigen_comparison=comparison,
        original=g,
    )


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_bundle(result: SparsifierResult, directory, extra: dict | None = None) -> Path:
    """Write ``summary.json`` plus CSV tables of multipliers, pruned edges,
    eigenvalue changes, eigenvector coordinates and the objective history."""
    if result is None:
        raise ValueError("no result to write")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    g = result.original
    summary = {
        "m": result.m,
        "m_pruned": result.m_pruned,
        "R": result.R,
        "R_deviation": result.R_deviation,
        "zeta_bar": result.zeta_bar,
        "fiedler_pruned": result.fiedler,
        "reweighted_only": result.reweighted_only,
        "disconnected": result.disconnected,
        "solver_reason": result.report.reason,
        "solver_success": result.report.success,
        "solver_iterations": result.report.iterations,
        "max_violation": result.report.violations.max,
        "runtime_s": result.runtime,
        "config": result.config.to_dict(),
    }
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(_json_ready(summary), indent=2, sort_keys=True))
    wbar = g.w * result.gamma
    _write_csv(
        out / "gamma.csv",
        ["edge", "u", "v", "w", "gamma", "w_new"],
        [(i, int(u), int(v), float(w), float(gm), float(wb)) for i, ((u, v), w, gm, wb) in enumerate(zip(g.edges, g.w, result.gamma, wbar))],
    )
    _write_csv(out / "pruned_edges.csv", ["u", "v", "w"], [(int(u), int(v), float(w)) for (u, v), w in zip(result.pruned.edges, result.pruned.w)])
    write_eigen_tables(result, out)
    _write_csv(
        out / "history.csv",
        ["iter", "J", "grad_norm", "max_violation", "zeta_bar"],
        [(h["iter"], float(h["J"]), float(h["grad_norm"]), float(h["max_violation"]), float(h["zeta_bar"]) if h["zeta_bar"] is not None else "") for h in result.J_history],
    )
    _write_csv(out / "correlation.csv", ["R", "R_deviation"], [(result.R, result.R_deviation)])
    return out


def write_eigen_tables(result: SparsifierResult, directory) -> Path:
    """``eigenvalues.csv`` (reference, new, relative change, overlap per mode)
    and ``eigenvectors.csv`` (first two eigenvector coordinates per node)."""
    if result is None or not result.eigen_comparison:
        raise ValueError("result has no eigenpair comparison to write")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ec = result.eigen_comparison
    _write_csv(
        out / "eigenvalues.csv",
        ["mode", "lambda_ref", "lambda_new", "relative_change", "overlap"],
        [(i, float(a), float(b), float(c), float(d)) for i, (a, b, c, d) in enumerate(zip(ec["lambda_ref"], ec["lambda_new"], ec["relative_change"], ec["overlap"]))],
    )
    pr, pn = ec["phi_ref"], ec["phi_new"]
    cols = pr.shape[1]
    header = ["node"] + [f"phi{j + 1}_ref" for j in range(cols)] + [f"phi{j + 1}_new" for j in range(cols)]
    _write_csv(out / "eigenvectors.csv", header, [(i, *map(float, pr[i]), *map(float, pn[i])) for i in range(pr.shape[0])])
    return out
