"""Weighted undirected graphs, incidence matrices and multiplier-scaled Laplacians.

Edges are stored with a canonical orientation (smaller vertex index first) and
the incidence row of edge ``(u, v)`` carries ``+1`` at ``u`` and ``-1`` at
``v``.  The Laplacian is orientation-invariant, so the choice only fixes ``B``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_EIGEN_LIMIT = 4000


class GraphError(ValueError):
    """Raised for malformed graphs or graph files."""


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected graph with positive edge weights.

    Parameters
    ----------
    n : int
        Number of vertices, labelled ``0 .. n-1``.
    edges : array_like, shape (m, 2)
        Vertex pairs.  Each pair is reordered so that the tail is the smaller
        index; the edge order is preserved.
    w : array_like, shape (m,)
        Strictly positive weights.
    """

    n: int
    edges: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if self.n < 0:
            raise GraphError("vertex count must be non-negative")
        if len(w) != len(edges):
            raise GraphError(f"{len(edges)} edges but {len(w)} weights")
        seen = {}
        for i, (u, v) in enumerate(edges):
            if u == v:
                raise GraphError(f"edge {i} is a self-loop on vertex {u}")
            if min(u, v) < 0 or max(u, v) >= self.n:
                raise GraphError(f"edge {i} = ({u}, {v}) has a vertex outside [0, {self.n})")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise GraphError(f"edge {i} duplicates edge {seen[key]} {key}")
            seen[key] = i
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            bad = int(np.flatnonzero(~(w > 0) | ~np.isfinite(w))[0])
            raise GraphError(f"edge {bad} has non-positive weight {w[bad]}")
        edges = np.sort(edges, axis=1)
        edges.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "w", w)

    @property
    def m(self) -> int:
        return len(self.w)

    @classmethod
    def from_networkx(cls, G, weight="weight") -> "WeightedGraph":
        nodes = sorted(G.nodes())
        index = {v: i for i, v in enumerate(nodes)}
        edges = [(index[u], index[v]) for u, v in G.edges()]
        w = [G.edges[u, v].get(weight, 1.0) for u, v in G.edges()]
        return cls(len(nodes), np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(w, dtype=float))

    def to_networkx(self):
        import networkx as nx

        G = nx.Graph()
        G.add_nodes_from(range(self.n))
        for (u, v), wi in zip(self.edges, self.w):
            G.add_edge(int(u), int(v), weight=float(wi))
        return G

    def degrees(self) -> np.ndarray:
        """Weighted vertex degrees."""
        return build_incidence(self).Q.T @ self.w

    def subgraph_edges(self, keep: np.ndarray, w: np.ndarray | None = None) -> "WeightedGraph":
        """Graph on the same vertex set restricted to the edges in ``keep``."""
        keep = np.asarray(keep)
        w = self.w if w is None else np.asarray(w, dtype=float)
        return WeightedGraph(self.n, self.edges[keep], w[keep])


@dataclass(frozen=True)
class IncidencePair:
    """Signed (``B``) and unsigned (``Q``) incidence matrices, both m x n CSR."""

    B: sp.csr_matrix
    Q: sp.csr_matrix


def build_incidence(g: WeightedGraph) -> IncidencePair:
    m = g.m
    rows = np.repeat(np.arange(m), 2)
    cols = g.edges.reshape(-1)
    signs = np.tile([1.0, -1.0], m)
    B = sp.csr_matrix((signs, (rows, cols)), shape=(m, g.n))
    Q = sp.csr_matrix((np.abs(signs), (rows, cols)), shape=(m, g.n))
    return IncidencePair(B, Q)


def check_multipliers(gamma, m: int) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.shape != (m,):
        raise ValueError(f"multiplier vector has length {gamma.size}, expected {m}")
    if not np.all(np.isfinite(gamma)):
        raise ValueError("multiplier vector has non-finite entries")
    if np.any(gamma < 0):
        raise ValueError(f"negative multiplier at edge {int(np.argmin(gamma))}")
    return gamma


def laplacian(g: WeightedGraph, gamma=None, dense: bool = False):
    """Laplacian of ``g`` with edge weights scaled by ``gamma``.

    Computes ``B^T W^{1/2} diag(gamma) W^{1/2} B``; ``gamma=None`` means all ones.
    Returns CSR unless ``dense``.
    """
    gamma = np.ones(g.m) if gamma is None else check_multipliers(gamma, g.m)
    B = build_incidence(g).B
    L = (B.T @ sp.diags(g.w * gamma) @ B).tocsr()
    return L.toarray() if dense else L


def laplacian_direct(g: WeightedGraph, gamma=None) -> np.ndarray:
    """Dense Laplacian assembled entrywise from degrees and adjacency."""
    gamma = np.ones(g.m) if gamma is None else np.asarray(gamma, dtype=float)
    A = np.zeros((g.n, g.n))
    for (u, v), wi in zip(g.edges, g.w * gamma):
        A[u, v] += wi
        A[v, u] += wi
    return np.diag(A.sum(axis=1)) - A


def fix_signs(V: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude component of each is positive."""
    V = np.array(V, dtype=float, copy=True)
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


@dataclass(frozen=True)
class SpectralReference:
    """Largest eigenpairs of a Laplacian, sorted by decreasing eigenvalue.

    ``lam`` has shape (n_p,) and ``phi`` has shape (n, n_p) with orthonormal
    columns.  ``lambda_2`` and ``lambda_n`` are the Fiedler value and the
    spectral radius of the full spectrum.
    """

    lam: np.ndarray
    phi: np.ndarray
    lambda_2: float
    lambda_n: float
    spectrum: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_p(self) -> int:
        return len(self.lam)


class EigenSolverError(RuntimeError):
    pass


def spectral_reference(g: WeightedGraph, n_p: int, gamma=None) -> SpectralReference:
    if not 1 <= n_p <= g.n:
        raise ValueError(f"n_p must lie in [1, {g.n}], got {n_p}")
    L = laplacian(g, gamma)
    if g.n <= DENSE_EIGEN_LIMIT:
        try:
            ev, V = scipy.linalg.eigh(L.toarray())
        except np.linalg.LinAlgError as exc:
            raise EigenSolverError(f"dense eigensolver failed: {exc}") from exc
        order = np.argsort(ev)[::-1]
        lam, phi = ev[order[:n_p]], V[:, order[:n_p]]
        lambda_2 = float(ev[1]) if g.n > 1 else 0.0
        return SpectralReference(lam, fix_signs(phi), lambda_2, float(ev[-1]), ev)
    try:
        lam, phi = spla.eigsh(L, k=n_p, which="LA")
        low = spla.eigsh(L, k=2, sigma=-1e-3, which="LM", return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        raise EigenSolverError(f"ARPACK did not converge: {exc}") from exc
    order = np.argsort(lam)[::-1]
    return SpectralReference(lam[order], fix_signs(phi[:, order]), float(np.sort(low)[1]), float(lam.max()))


def fiedler_value(g: WeightedGraph) -> float:
    """Second-smallest Laplacian eigenvalue (0 for graphs with < 2 vertices)."""
    if g.n < 2:
        return 0.0
    if g.n <= DENSE_EIGEN_LIMIT:
        return float(scipy.linalg.eigvalsh(laplacian(g, dense=True))[1])
    low = spla.eigsh(laplacian(g), k=2, sigma=-1e-3, which="LM", return_eigenvectors=False)
    return float(np.sort(low)[1])


def erdos_renyi(n: int, p: float, seed=None, connected: bool = True, max_tries: int = 1000) -> WeightedGraph:
    """Unit-weight G(n, p) graph; redraws until connected when requested."""
    import networkx as nx

    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        G = nx.gnp_random_graph(n, p, seed=int(rng.integers(2**31)))
        if not connected or nx.is_connected(G):
            return WeightedGraph.from_networkx(G)
    raise GraphError(f"no connected G({n}, {p}) found in {max_tries} draws")


def complete_graph(n: int) -> WeightedGraph:
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return WeightedGraph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), np.ones(len(edges)))


def read_edge_list(path) -> WeightedGraph:
    """Read whitespace-separated ``u v [w]`` lines.

    Indexing is 1-based when the smallest vertex label is 1, else 0-based.
    Lines starting with ``#`` or ``%`` are skipped; a missing weight means 1.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"graph file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line[0] in "#%":
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise GraphError(f"{path}:{lineno}: expected 'u v [w]', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
            wt = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError as exc:
            raise GraphError(f"{path}:{lineno}: {exc}") from exc
        rows.append((u, v, wt))
    if not rows:
        raise GraphError(f"{path}: no edges")
    arr = np.array(rows)
    uv = arr[:, :2].astype(np.int64)
    if uv.min() == 1:
        uv -= 1
    return WeightedGraph(int(uv.max()) + 1, uv, arr[:, 2])


def read_matrix_market(path) -> WeightedGraph:
    """Read a symmetric coordinate Matrix Market file; the diagonal is ignored."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"graph file not found: {path}")
    A = sp.coo_matrix(scipy.io.mmread(str(path)))
    n = A.shape[0]
    mask = A.row < A.col
    lower = A.row > A.col
    # symmetric files store one triangle; general files may store both
    r = np.concatenate([A.row[mask], A.col[lower]])
    c = np.concatenate([A.col[mask], A.row[lower]])
    d = np.concatenate([A.data[mask], A.data[lower]])
    pairs = {}
    for u, v, wt in zip(r, c, d):
        if wt != 0:
            pairs.setdefault((int(u), int(v)), float(wt))
    edges = np.array(list(pairs.keys()), dtype=np.int64).reshape(-1, 2)
    return WeightedGraph(n, edges, np.array(list(pairs.values())))


def read_graph(path) -> WeightedGraph:
    path = Path(path)
    if path.suffix.lower() == ".mtx":
        return read_matrix_market(path)
    return read_edge_list(path)


def write_edge_list(g: WeightedGraph, path) -> None:
    with open(path, "w") as fh:
        for (u, v), wi in zip(g.edges, g.w):
            fh.write(f"{u} {v} {wi:.17g}\n")
