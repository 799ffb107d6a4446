"""Relative-speed measurements for the reduced field and the parallel spectral estimate."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dynamics import BrusselatorParams, IntegratorConfig, brusselator_field, make_brusselator, perturbed_initial_conditions, snapshot_ensemble
from .graph import WeightedGraph, erdos_renyi, laplacian, spectral_reference
from .rom import ReducedBrusselator, pod_basis
from .spectral import PerturbationContext, ZetaPool, zeta_approx


def _median_time(fn, repeats: int) -> float:
    fn()  # warm caches and BLAS threads
    times = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn()
        times[i] = time.perf_counter() - t0
    return float(np.median(times))


@dataclass
class RomTiming:
    n: int
    k: int
    full_median: float
    reduced_median: float

    @property
    def speedup(self) -> float:
        return self.full_median / self.reduced_median


def bench_rom(g: WeightedGraph, k: int, p: BrusselatorParams | None = None, repeats: int = 200, seed: int = 0,
              snapshot: IntegratorConfig | None = None, samples: int = 101) -> RomTiming:
    """Median wall time of one full and one reduced Brusselator field evaluation.

    Both sides reuse operators that do not depend on the state (the sparse
    Laplacian, the reduced diffusion blocks).
    """
    p = p or BrusselatorParams()
    snapshot = snapshot or IntegratorConfig("rk4", 1e-3, 1000)
    rng = np.random.default_rng(seed)
    ics = perturbed_initial_conditions(g.n, p, 2, rng)
    X, _ = snapshot_ensemble(make_brusselator(g, None, p), ics, snapshot, samples)
    basis = pod_basis(X, k)
    L = laplacian(g)
    rb = ReducedBrusselator(basis, g, p)
    ops = rb.operators(np.ones(g.m))
    x = X[:, -1].copy()
    z = basis.project(x)
    full = _median_time(lambda: brusselator_field(x, g, None, p, L=L), repeats)
    reduced = _median_time(lambda: rb.field(z, ops=ops), repeats)
    return RomTiming(g.n, k, full, reduced)


@dataclass
class ZetaTiming:
    workers: int
    median: float
    speedup: float


def bench_zeta(g: WeightedGraph, n_p: int, workers=(1, 2, 4), repeats: int = 5, seed: int = 0, low: float = 0.6, high: float = 1.4) -> list[ZetaTiming]:
    """Median time of one ``zeta_approx`` evaluation per worker count.

    Speedups are relative to the serial evaluation; pool start-up is excluded
    because the pool persists across evaluations.
    """
    ctx = PerturbationContext.build(g, spectral_reference(g, n_p))
    gamma = np.random.default_rng(seed).uniform(low, high, g.m)
    serial = _median_time(lambda: zeta_approx(ctx, gamma), repeats)
    out = []
    for w in workers:
        if w <= 1:
            out.append(ZetaTiming(w, serial, 1.0))
            continue
        with ZetaPool(ctx, w) as pool:
            t = _median_time(lambda: zeta_approx(ctx, gamma, pool=pool), repeats)
        out.append(ZetaTiming(w, t, serial / t))
    return out


def er_graph(n: int, p: float, seed: int) -> WeightedGraph:
    return erdos_renyi(n, p, seed=seed)
