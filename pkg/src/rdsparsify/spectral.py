"""Cheap estimates of the leading Laplacian eigenpairs under edge reweighting.

For a reference eigenpair ``(lam_i, phi_i)`` of ``L`` and a perturbation
``E = B^T diag(w * (gamma - 1)) B`` the estimate is one conjugate-gradient step
of inverse iteration started from ``phi_i``::

    eps = phi^T E phi,   a = E phi,   M = L + E - (lam + eps) I
    y   = (a^T a / a^T M a * a - phi) / eps
    (lam_hat, x_hat) = (y^T (L+E) y / y^T y,  y / |y|)

with a piecewise repair where the step is undefined.  The spectral error
combines eigenvalue drift and eigenvector misalignment over the preserved
modes::

    zeta = n / (n_p sum lam^2) * sum (lam_t - lam)^2 + 1 / n_p * sum (<phi_t, phi> - 1)^2

Exactly degenerate reference clusters (e.g. the complete graph) are rotated
to diagonalise ``Phi_c^T E Phi_c`` before estimating, since any basis of the
eigenspace is an equally valid reference.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp

from .graph import (
    DENSE_EIGEN_LIMIT,
    SpectralReference,
    WeightedGraph,
    build_incidence,
    check_multipliers,
    fix_signs,
    laplacian,
    spectral_reference,
)

log = logging.getLogger(__name__)

EPS_RTOL = 1e-12
A_RTOL = 1e-12
MA_RTOL = 1e-10
DEN_RTOL = 1e-12
CLUSTER_RTOL = 1e-8
CHUNK_SIZE = 8

UNPERTURBED = "unperturbed"  # E phi = 0
RAYLEIGH_A = "rayleigh-a"  # y = 0
EXACT = "exact"  # M a = 0
GENERIC = "generic"
DEGENERATE = "degenerate"


class DegenerateModeWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class PerturbationContext:
    """Immutable data shared by every evaluation of the spectral constraint."""

    g: WeightedGraph
    reference: SpectralReference
    B: sp.csr_matrix
    L: sp.csr_matrix
    clusters: tuple = field(repr=False)
    chunks: tuple = field(repr=False)
    # full eigenbasis of the last cluster when n_p cuts through it
    tail_basis: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def build(cls, g: WeightedGraph, reference: SpectralReference, chunk_size: int = CHUNK_SIZE):
        B = build_incidence(g).B
        L = laplacian(g)
        lam = reference.lam
        scale = max(1.0, float(np.max(np.abs(lam)))) if lam.size else 1.0
        clusters = [[0]]
        for i in range(1, len(lam)):
            if abs(lam[i] - lam[i - 1]) <= CLUSTER_RTOL * scale:
                clusters[-1].append(i)
            else:
                clusters.append([i])
        chunks, cur = [], []
        for c in clusters:
            cur.extend(c)
            if len(cur) >= chunk_size:
                chunks.append(tuple(cur))
                cur = []
        if cur:
            chunks.append(tuple(cur))
        tail = None
        spec = reference.spectrum
        if lam.size and lam.size < g.n and spec is not None:
            # multiplicity of the smallest kept eigenvalue in the whole spectrum
            full = int(np.sum(np.abs(spec - lam[-1]) <= CLUSTER_RTOL * scale))
            kept = len(clusters[-1])
            if full > kept:
                extra = spectral_reference(g, min(g.n, lam.size + full - kept))
                tail = extra.phi[:, lam.size - kept :]
        return cls(g, reference, B, L, tuple(tuple(c) for c in clusters), tuple(chunks), tail)

    @property
    def n(self) -> int:
        return self.g.n

    @property
    def n_p(self) -> int:
        return self.reference.n_p

    @property
    def zeta_scale(self) -> float:
        """Weight ``n / (n_p sum lam^2)`` of the eigenvalue term."""
        s = float(np.sum(self.reference.lam**2))
        return self.n / (self.n_p * s) if s > 0 else 0.0

    def E(self, gamma) -> sp.csr_matrix:
        gamma = check_multipliers(gamma, self.g.m)
        return (self.B.T @ sp.diags(self.g.w * (gamma - 1.0)) @ self.B).tocsr()

    def adapted_phi(self, E, modes=None) -> np.ndarray:
        """Reference eigenvectors with degenerate clusters aligned to ``E``."""
        phi = self.reference.phi
        modes = range(self.n_p) if modes is None else modes
        wanted = set(modes)
        out = phi.copy()
        last = len(self.clusters) - 1
        for j, c in enumerate(self.clusters):
            truncated = j == last and self.tail_basis is not None
            if (len(c) < 2 and not truncated) or not wanted.intersection(c):
                continue
            P = self.tail_basis if truncated else phi[:, list(c)]
            S = P.T @ (E @ P)
            S = 0.5 * (S + S.T)
            ev, U = scipy.linalg.eigh(S)
            if ev[-1] - ev[0] <= 1e-12 * max(1.0, np.abs(ev).max()):
                continue
            out[:, list(c)] = fix_signs(P @ U[:, ::-1][:, : len(c)])
        return out


def perturbation_apply(ctx: PerturbationContext, gamma, v) -> np.ndarray:
    """``E v`` in O(m) without assembling ``E``."""
    gamma = check_multipliers(gamma, ctx.g.m)
    return ctx.B.T @ (ctx.g.w * (gamma - 1.0) * (ctx.B @ np.asarray(v, dtype=float)))


def _inf_norm(E) -> float:
    return float(abs(E).sum(axis=1).max()) if E.nnz else 0.0


@dataclass
class ModeEstimate:
    mode: int
    lam: float
    phi: np.ndarray = field(repr=False)
    branch: str
    eps: float
    overlap: float
    dlam: np.ndarray | None = field(default=None, repr=False)
    doverlap: np.ndarray | None = field(default=None, repr=False)
    ref_phi: np.ndarray | None = field(default=None, repr=False)


def _estimate(ctx: PerturbationContext, E, Lp, Enorm, i: int, phi: np.ndarray, grad: bool) -> ModeEstimate:
    lam_i = float(ctx.reference.lam[i])
    w, B = ctx.g.w, ctx.B
    m = ctx.g.m
    a = E @ phi
    na = float(np.linalg.norm(a))
    if na <= A_RTOL * Enorm:
        z = np.zeros(m) if grad else None
        return ModeEstimate(i, lam_i, phi.copy(), UNPERTURBED, 0.0, 1.0, z, z, phi)

    eps = float(phi @ a)
    s = B @ phi
    deps = w * s * s if grad else None

    def da_T(u):  # (D_gamma a)^T u
        return w * s * (B @ u)

    La = Lp @ a
    Ma = La - (lam_i + eps) * a
    if np.linalg.norm(Ma) <= MA_RTOL * na:
        x = a / na
        sg = 1.0 if phi @ x >= 0 else -1.0
        x = sg * x
        ov = float(phi @ x)
        est = ModeEstimate(i, lam_i + eps, x, EXACT, eps, ov, ref_phi=phi)
        if grad:
            est.dlam = deps
            est.doverlap = sg * (da_T(phi) / na - (phi @ a) * da_T(a) / na**3)
        return est

    N = float(a @ a)
    den = float(a @ Ma)
    if abs(den) <= DEN_RTOL * Enorm * N:
        warnings.warn(f"mode {i}: step denominator vanished, falling back to (lam + eps, phi)", DegenerateModeWarning)
        z = np.zeros(m)
        return ModeEstimate(i, lam_i + eps, phi.copy(), DEGENERATE, eps, 1.0, deps if grad else None, z if grad else None, phi)

    coef = N / den
    u = coef * a - phi
    if np.linalg.norm(u) <= 1e-12:
        est = ModeEstimate(i, den / N, phi.copy(), RAYLEIGH_A, eps, 1.0, ref_phi=phi)
        if grad:
            dN = 2 * da_T(a)
            dden = 2 * da_T(La) + w * (B @ a) ** 2 - (lam_i + eps) * dN - N * deps
            est.dlam = (dden * N - den * dN) / N**2
            est.doverlap = np.zeros(m)
        return est

    if abs(eps) <= EPS_RTOL * Enorm:
        # the 1/eps scale drops out after normalisation; keep the direction
        y, inv = u, 1.0
    else:
        y, inv = u / eps, 1.0 / eps
    Ly = Lp @ y
    yy = float(y @ y)
    ny = np.sqrt(yy)
    lam_hat = float(y @ Ly) / yy
    py = float(phi @ y)
    sg = 1.0 if py >= 0 else -1.0
    x = sg * y / ny
    est = ModeEstimate(i, lam_hat, x, GENERIC, eps, sg * py / ny, ref_phi=phi)
    if grad:
        dN = 2 * da_T(a)
        dden = 2 * da_T(La) + w * (B @ a) ** 2 - (lam_i + eps) * dN - N * deps
        dcoef = dN / den - N * dden / den**2

        def dy_T(vec):  # (D_gamma y)^T vec
            dv = (a @ vec) * dcoef + coef * da_T(vec)
            if inv == 1.0 and y is u:
                return dv
            return (dv - (y @ vec) * deps) * inv

        By = B @ y
        est.dlam = (2 * dy_T(Ly) + w * By * By - 2 * lam_hat * dy_T(y)) / yy
        est.doverlap = sg * (dy_T(phi) / ny - py * dy_T(y) / ny**3)
    return est


def _operators(ctx: PerturbationContext, gamma):
    E = ctx.E(gamma)
    return E, (ctx.L + E).tocsr(), _inf_norm(E)


def _chunk_estimates(ctx: PerturbationContext, gamma, modes, grad: bool, ops=None) -> list:
    E, Lp, Enorm = _operators(ctx, gamma) if ops is None else ops
    phi = ctx.adapted_phi(E, modes)
    return [_estimate(ctx, E, Lp, Enorm, i, phi[:, i], grad) for i in modes]


def eigenpair_estimate(ctx: PerturbationContext, gamma, mode: int, grad: bool = False) -> ModeEstimate:
    """Estimated eigenpair of ``L + E`` continuing reference mode ``mode``."""
    if not 0 <= mode < ctx.n_p:
        raise IndexError(f"mode {mode} outside the {ctx.n_p} reference modes")
    return _chunk_estimates(ctx, gamma, [mode], grad)[0]


def estimate_all(ctx: PerturbationContext, gamma, grad: bool = False, workers: int = 1, pool=None) -> list:
    """Estimates for every reference mode, in mode order.

    Work is split into fixed chunks of whole degenerate clusters, so the
    result is identical for any worker count.
    """
    gamma = check_multipliers(gamma, ctx.g.m)
    if pool is None and workers <= 1:
        ops = _operators(ctx, gamma)
        out = []
        for chunk in ctx.chunks:
            out.extend(_chunk_estimates(ctx, gamma, chunk, grad, ops))
        return out
    if pool is not None:
        return pool.estimate(gamma, grad)
    with ZetaPool(ctx, workers) as p:
        return p.estimate(gamma, grad)


_WORKER_CTX = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx
    warnings.simplefilter("ignore", DegenerateModeWarning)


def _worker_chunk(args):
    gamma, modes, grad = args
    return _chunk_estimates(_WORKER_CTX, gamma, modes, grad)


class ZetaPool:
    """Persistent process pool evaluating mode chunks in parallel."""

    def __init__(self, ctx: PerturbationContext, workers: int):
        self.ctx = ctx
        self.workers = workers
        self._ex = ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,))

    def estimate(self, gamma, grad: bool = False) -> list:
        gamma = check_multipliers(gamma, self.ctx.g.m)
        jobs = [(gamma, chunk, grad) for chunk in self.ctx.chunks]
        out = []
        for part in self._ex.map(_worker_chunk, jobs):
            out.extend(part)
        return out

    def close(self):
        self._ex.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _zeta_from(ctx: PerturbationContext, lam_t, overlaps) -> float:
    lam = ctx.reference.lam
    zl_terms = (np.asarray(lam_t) - lam) ** 2
    zq_terms = (np.asarray(overlaps) - 1.0) ** 2
    return float(ctx.zeta_scale * np.sum(zl_terms) + np.sum(zq_terms) / ctx.n_p)


def zeta_parts(ctx: PerturbationContext, lam_t, overlaps) -> tuple[float, float]:
    """``(n * zeta_l, zeta_q)`` for given eigenvalues and overlaps."""
    lam = ctx.reference.lam
    return (
        float(ctx.zeta_scale * np.sum((np.asarray(lam_t) - lam) ** 2)),
        float(np.sum((np.asarray(overlaps) - 1.0) ** 2) / ctx.n_p),
    )


def zeta_approx(ctx: PerturbationContext, gamma, workers: int = 1, pool=None) -> float:
    ests = estimate_all(ctx, gamma, workers=workers, pool=pool)
    return _zeta_from(ctx, [e.lam for e in ests], [e.overlap for e in ests])


def zeta_approx_with_gradient(ctx: PerturbationContext, gamma, workers: int = 1, pool=None):
    """Return ``(zeta_bar, gradient, branches)``."""
    ests = estimate_all(ctx, gamma, grad=True, workers=workers, pool=pool)
    lam = ctx.reference.lam
    val = _zeta_from(ctx, [e.lam for e in ests], [e.overlap for e in ests])
    g = np.zeros(ctx.g.m)
    for e in ests:
        g += 2 * ctx.zeta_scale * (e.lam - lam[e.mode]) * e.dlam
        g += (2.0 / ctx.n_p) * (e.overlap - 1.0) * e.doverlap
    return val, g, tuple(e.branch for e in ests)


def zeta_approx_gradient(ctx: PerturbationContext, gamma, workers: int = 1, pool=None) -> np.ndarray:
    return zeta_approx_with_gradient(ctx, gamma, workers, pool)[1]


def branch_signature(ctx: PerturbationContext, gamma) -> tuple:
    return tuple(e.branch for e in estimate_all(ctx, gamma))


def _perturbed_spectrum(ctx: PerturbationContext, gamma):
    Lp = laplacian(ctx.g, gamma)
    if ctx.n > DENSE_EIGEN_LIMIT:
        raise ValueError("exact perturbed spectrum is only supported at dense scale")
    return scipy.linalg.eigh(Lp.toarray())


def zeta_exact(ctx: PerturbationContext, gamma, return_pairs: bool = False):
    """Spectral error from the true eigenpairs of the reweighted Laplacian.

    Eigenpairs are matched to reference modes in decreasing-eigenvalue order;
    inside a degenerate reference cluster the assignment maximises overlap.
    Eigenvector signs are chosen to make each overlap non-negative.
    """
    gamma = check_multipliers(gamma, ctx.g.m)
    ev, V = _perturbed_spectrum(ctx, gamma)
    order = np.argsort(ev)[::-1][: ctx.n_p]
    lam_t, phi_t = ev[order], V[:, order]
    phi = ctx.adapted_phi(ctx.E(gamma))
    for c in ctx.clusters:
        if len(c) < 2:
            continue
        c = list(c)
        C = np.abs(phi[:, c].T @ phi_t[:, c])
        _, cols = scipy.optimize.linear_sum_assignment(-C)
        lam_t[c] = lam_t[c][cols]
        phi_t[:, c] = phi_t[:, c][:, cols]
    ov = np.einsum("ij,ij->j", phi_t, phi)
    phi_t = phi_t * np.where(ov < 0, -1.0, 1.0)
    ov = np.abs(ov)
    val = _zeta_from(ctx, lam_t, ov)
    if return_pairs:
        return val, lam_t, phi_t, ov
    return val


def operator_norm_2(ctx: PerturbationContext, gamma, tol: float = 1e-6, maxiter: int = 10000, seed: int = 0) -> float:
    """``||E||_2`` by power iteration on the matrix-free operator."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(ctx.n)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(maxiter):
        y = perturbation_apply(ctx, gamma, x)
        ny = float(np.linalg.norm(y))
        if ny == 0.0:
            return 0.0
        if abs(ny - est) <= tol * max(ny, 1.0):
            return ny
        est = ny
        x = y / ny
    return est


def residual_bound_check(ctx: PerturbationContext, gamma, mode: int, estimate: ModeEstimate | None = None):
    """Return ``(residual, bound)`` for the estimated pair of ``mode``.

    ``residual = ||(L + E - lam_hat I) x_hat||`` and
    ``bound = tau + ||E||_2`` with
    ``tau = max(|lam_n - lam_2(L+E)|, lam_n(L+E))``.
    """
    gamma = check_multipliers(gamma, ctx.g.m)
    est = eigenpair_estimate(ctx, gamma, mode) if estimate is None else estimate
    Lp = laplacian(ctx.g, gamma)
    x = est.phi / np.linalg.norm(est.phi)
    residual = float(np.linalg.norm(Lp @ x - est.lam * x))
    ev = _perturbed_spectrum(ctx, gamma)[0]
    lam2p = ev[1] if len(ev) > 1 else 0.0
    tau = max(abs(ctx.reference.lambda_n - lam2p), ev[-1])
    return residual, float(tau + operator_norm_2(ctx, gamma))


def pseudo_eigenvalue_gap(ctx: PerturbationContext, gamma, lam_hat: float) -> float:
    """Smallest singular value of ``lam_hat I - (L + E)``."""
    ev = _perturbed_spectrum(ctx, gamma)[0]
    return float(np.min(np.abs(lam_hat - ev)))


def discontinuity_probe(ctx: PerturbationContext, mode: int):
    """Non-negative multipliers keeping ``phi_mode`` an eigenvector with the same eigenvalue.

    Solves ``R gamma = lam phi`` with ``R = B^T W^{1/2} diag(W^{1/2} B phi)`` in
    the non-negative least-squares sense and returns ``(gamma, residual)``.
    Diagnostic only.
    """
    phi = ctx.reference.phi[:, mode]
    R = (ctx.B.T @ sp.diags(ctx.g.w * (ctx.B @ phi))).toarray()
    gamma, res = scipy.optimize.nnls(R, ctx.reference.lam[mode] * phi)
    return gamma, float(res)


def diagnostics(ctx: PerturbationContext, gamma) -> list[dict]:
    """Per-mode record: branch, estimated eigenvalue, overlap, residual and bound."""
    gamma = check_multipliers(gamma, ctx.g.m)
    out = []
    for est in estimate_all(ctx, gamma):
        res, bound = residual_bound_check(ctx, gamma, est.mode, est)
        out.append(
            {
                "mode": est.mode,
                "branch": est.branch,
                "lambda_ref": float(ctx.reference.lam[est.mode]),
                "lambda_est": float(est.lam),
                "overlap": float(est.overlap),
                "residual": res,
                "bound": bound,
            }
        )
    return out


def dump_diagnostics(ctx: PerturbationContext, gamma, path) -> None:
    with open(path, "w") as fh:
        json.dump({"zeta_bar": zeta_approx(ctx, gamma), "modes": diagnostics(ctx, gamma)}, fh, indent=2)
