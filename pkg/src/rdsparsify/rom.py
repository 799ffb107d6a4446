"""Proper orthogonal decomposition and reduced-order vector fields.

A basis holds a projection ``rho`` (k x d, orthonormal rows) and the snapshot
mean ``xbar``; reduced coordinates are ``z = rho (x - xbar)``.  For the
Brusselator the columns of ``rho`` split into the x-block ``rho[:, :n]`` and the
y-block ``rho[:, n:]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .dynamics import BrusselatorParams
from .graph import WeightedGraph, build_incidence, check_multipliers, fix_signs, laplacian

RANK_RTOL = 1e-12


class RankError(ValueError):
    def __init__(self, requested: int, rank: int):
        super().__init__(f"requested {requested} POD modes but the centred snapshots have rank {rank}")
        self.requested = requested
        self.rank = rank


@dataclass(frozen=True)
class PODBasis:
    rho: np.ndarray
    xbar: np.ndarray
    energies: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.rho.shape[0]

    @property
    def d(self) -> int:
        return self.rho.shape[1]

    def project(self, x) -> np.ndarray:
        return self.rho @ (np.asarray(x, dtype=float) - self.xbar)

    def lift(self, z) -> np.ndarray:
        return self.rho.T @ z + self.xbar

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.rho, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.xbar, dtype="<f8").tobytes())
        return h.hexdigest()


def pod_basis(snapshots, k: int) -> PODBasis:
    """Leading ``k`` eigenvectors of the snapshot covariance.

    Uses the S x S Gram matrix when there are fewer snapshots than state
    components.
    """
    X = np.asarray(snapshots, dtype=float)
    if X.ndim != 2:
        raise ValueError("snapshots must be a d x S matrix")
    d, S = X.shape
    if not 1 <= k <= min(d, S):
        raise ValueError(f"k must lie in [1, {min(d, S)}], got {k}")
    xbar = X.mean(axis=1)
    Xc = X - xbar[:, None]
    if S < d:
        ev, V = scipy.linalg.eigh(Xc.T @ Xc)
        order = np.argsort(ev)[::-1]
        ev, V = np.clip(ev[order], 0, None), V[:, order]
        # sqrt of Gram eigenvalues cannot resolve below sqrt(eps) * sigma_max
        sig = np.linalg.norm(Xc @ V, axis=0)
    else:
        ev, U = scipy.linalg.eigh(Xc @ Xc.T)
        order = np.argsort(ev)[::-1]
        ev, U = np.clip(ev[order], 0, None), U[:, order]
        sig = np.sqrt(ev)
    smax = sig[0] if sig.size else 0.0
    rank = int(np.sum(sig > RANK_RTOL * smax)) if smax > 0 else 0
    if k > rank:
        raise RankError(k, rank)
    if S < d:
        U = Xc @ V[:, :k] / sig[:k]
        # re-orthonormalise against round-off in the Gram route
        U, _ = np.linalg.qr(U)
    else:
        U = U[:, :k]
    U = fix_signs(U)
    return PODBasis(U.T.copy(), xbar, ev[:k] / max(S, 1))


def reduce_ic(x0, basis: PODBasis) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (basis.d,):
        raise ValueError(f"state has shape {x0.shape}, expected ({basis.d},)")
    return basis.rho @ (x0 - basis.xbar)


def projection_residual(snapshots, basis: PODBasis) -> float:
    """Frobenius norm of the centred snapshots outside the span of ``rho``."""
    Xc = np.asarray(snapshots, dtype=float) - basis.xbar[:, None]
    return float(np.linalg.norm(Xc - basis.rho.T @ (basis.rho @ Xc)))


def reduced_linear_field(z, g: WeightedGraph, gamma, basis: PODBasis) -> np.ndarray:
    """``-rho L rho^T z - rho L xbar`` for linear diffusion."""
    if basis.d != g.n:
        raise ValueError(f"basis dimension {basis.d} does not match {g.n} vertices")
    z = np.asarray(z, dtype=float)
    if z.shape != (basis.k,):
        raise ValueError(f"z has shape {z.shape}, expected ({basis.k},)")
    L = laplacian(g, gamma)
    return -(basis.rho @ (L @ (basis.rho.T @ z + basis.xbar)))


class ReducedOperators(NamedTuple):
    """Multiplier-dependent blocks of the reduced field.

    ``A z + c0`` is the whole affine part (linear reaction terms and both
    diffusion blocks); only the cubic term needs the lifted state.
    """

    Kx: np.ndarray
    Ky: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    A: np.ndarray
    c0: np.ndarray


class ReducedBrusselator:
    """Reduced Brusselator field with analytic Jacobians.

    Precomputes ``S_x = W^{1/2} B rho_x^T`` (m x k) and ``b_x = W^{1/2} B xbar_x``
    (and likewise for y) so the diffusion part of the reduced field is
    ``S_x^T diag(gamma) (S_x z + b_x)``.  The linear reaction terms are
    projected once as well, leaving ``c (rho_x - rho_y) (u^2 v)`` as the only
    part evaluated at full dimension.
    """

    def __init__(self, basis: PODBasis, g: WeightedGraph, p: BrusselatorParams):
        n = g.n
        if basis.d != 2 * n:
            raise ValueError(f"basis dimension {basis.d} does not match 2n = {2 * n}")
        self.basis, self.g, self.p, self.n = basis, g, p, n
        self.k = basis.k
        self.m = g.m
        self.Rx = np.ascontiguousarray(basis.rho[:, :n])
        self.Ry = np.ascontiguousarray(basis.rho[:, n:])
        self.xbar_x = basis.xbar[:n]
        self.xbar_y = basis.xbar[n:]
        B = build_incidence(g).B
        sw = np.sqrt(g.w)
        self.Sx = sw[:, None] * np.asarray(B @ self.Rx.T)
        self.Sy = sw[:, None] * np.asarray(B @ self.Ry.T)
        self.bx = sw * (B @ self.xbar_x)
        self.by = sw * (B @ self.xbar_y)
        self.RxT = np.ascontiguousarray(self.Rx.T)
        self.RyT = np.ascontiguousarray(self.Ry.T)
        self.Dnl = p.c * (self.Rx - self.Ry)
        self.Lr = (-(p.b + p.d) * self.Rx + p.b * self.Ry) @ self.RxT
        self.r0 = self.Rx @ (p.a - (p.b + p.d) * self.xbar_x) + self.Ry @ (p.b * self.xbar_x)

    def operators(self, gamma) -> ReducedOperators:
        """Multiplier-dependent blocks, reused across a trajectory.

        ``Kx = S_x^T diag(gamma) S_x`` and ``cx = S_x^T (gamma * b_x)``;
        ``gamma=None`` means all ones.
        """
        gamma = np.ones(self.m) if gamma is None else check_multipliers(gamma, self.m)
        p = self.p
        Kx = self.Sx.T @ (gamma[:, None] * self.Sx)
        Ky = self.Sy.T @ (gamma[:, None] * self.Sy)
        cx = self.Sx.T @ (gamma * self.bx)
        cy = self.Sy.T @ (gamma * self.by)
        A = self.Lr - p.Dx * Kx - p.Dy * Ky
        c0 = self.r0 - p.Dx * cx - p.Dy * cy
        return ReducedOperators(Kx, Ky, cx, cy, A, c0)

    def _lift(self, z):
        return self.RxT @ z + self.xbar_x, self.RyT @ z + self.xbar_y

    def field(self, z, gamma=None, ops=None) -> np.ndarray:
        if ops is None:
            ops = self.operators(gamma)
        u, v = self._lift(z)
        return ops.A @ z + ops.c0 + self.Dnl @ (u * u * v)

    def field_batch(self, Z, ops: ReducedOperators) -> np.ndarray:
        U = Z @ self.Rx + self.xbar_x
        V = Z @ self.Ry + self.xbar_y
        return Z @ ops.A.T + ops.c0 + (U * U * V) @ self.Dnl.T

    def _reaction_derivs(self, u, v):
        p = self.p
        uv = u * v
        uu = u * u
        return (-(p.b + p.d) + 2 * p.c * uv, p.c * uu, p.b - 2 * p.c * uv, -p.c * uu)

    def jac_z(self, z, gamma=None, ops=None) -> np.ndarray:
        if ops is None:
            ops = self.operators(gamma)
        Kx, Ky = ops.Kx, ops.Ky
        u, v = self._lift(z)
        h11, h12, h21, h22 = self._reaction_derivs(u, v)
        Rx, Ry = self.Rx, self.Ry
        J = (Rx * h11) @ Rx.T + (Rx * h12) @ Ry.T + (Ry * h21) @ Rx.T + (Ry * h22) @ Ry.T
        return J - self.p.Dx * Kx - self.p.Dy * Ky

    def jac_gamma(self, z) -> np.ndarray:
        ex = self.Sx @ z + self.bx
        ey = self.Sy @ z + self.by
        return -(self.p.Dx * self.Sx.T * ex + self.p.Dy * self.Sy.T * ey)

    def vjp_z(self, z, lam, ops: ReducedOperators) -> np.ndarray:
        """``(D_z psi)^T lam`` without forming the Jacobian."""
        u, v = self._lift(z)
        q = self.Dnl.T @ lam
        return ops.A.T @ lam + self.Rx @ (2 * u * v * q) + self.Ry @ (u * u * q)

    def vjp_z_batch(self, Z, Lam, ops: ReducedOperators) -> np.ndarray:
        U = Z @ self.Rx + self.xbar_x
        V = Z @ self.Ry + self.xbar_y
        Q = Lam @ self.Dnl
        return Lam @ ops.A + (2 * U * V * Q) @ self.RxT + (U * U * Q) @ self.RyT

    def vjp_gamma(self, z, lam) -> np.ndarray:
        """``(D_gamma psi)^T lam``."""
        ex = self.Sx @ z + self.bx
        ey = self.Sy @ z + self.by
        return -(self.p.Dx * ex * (self.Sx @ lam) + self.p.Dy * ey * (self.Sy @ lam))

    def vjp_gamma_sum(self, Z, Lam) -> np.ndarray:
        """``sum_j (D_gamma psi(Z[j]))^T Lam[j]`` for stacked rows."""
        EX = Z @ self.Sx.T + self.bx
        EY = Z @ self.Sy.T + self.by
        return -(self.p.Dx * np.einsum("ij,ij->j", EX, Lam @ self.Sx.T) + self.p.Dy * np.einsum("ij,ij->j", EY, Lam @ self.Sy.T))


def reduced_brusselator_field(z, g: WeightedGraph, gamma, p: BrusselatorParams, basis: PODBasis) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (basis.k,):
        raise ValueError(f"z has shape {z.shape}, expected ({basis.k},)")
    out = ReducedBrusselator(basis, g, p).field(z, gamma)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("reduced field produced non-finite values")
    return out


def reduced_jacobians(z, g: WeightedGraph, gamma, p: BrusselatorParams, basis: PODBasis):
    """Return ``(D_z psi, D_gamma psi)`` with shapes (k, k) and (k, m)."""
    rb = ReducedBrusselator(basis, g, p)
    z = np.asarray(z, dtype=float)
    return rb.jac_z(z, gamma), rb.jac_gamma(z)


def save_basis(basis: PODBasis, directory) -> Path:
    """Write ``rho.csv``, ``xbar.csv`` and a ``basis.json`` header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / "rho.csv", basis.rho, delimiter=",", fmt="%.17g")
    np.savetxt(directory / "xbar.csv", basis.xbar[None, :], delimiter=",", fmt="%.17g")
    header = {"k": basis.k, "d": basis.d, "checksum": basis.checksum()}
    (directory / "basis.json").write_text(json.dumps(header, indent=2))
    return directory


def load_basis(directory) -> PODBasis:
    directory = Path(directory)
    header = json.loads((directory / "basis.json").read_text())
    rho = np.loadtxt(directory / "rho.csv", delimiter=",", ndmin=2)
    xbar = np.loadtxt(directory / "xbar.csv", delimiter=",", ndmin=1)
    basis = PODBasis(rho.reshape(header["k"], header["d"]), xbar.reshape(header["d"]))
    if basis.checksum() != header["checksum"]:
        raise ValueError(f"checksum mismatch for basis in {directory}")
    return basis
