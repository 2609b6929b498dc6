"""KNN affinity graphs, normalized Laplacians and their smallest eigenpairs.

EMB1 layout (little-endian)::

    b"EMB1" | u32 n | u32 q | q float64 eigenvalues | n*q float64 phi (row-major)
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

EMB_MAGIC = b"EMB1"


class LanczosError(RuntimeError):
    """Raised when the requested eigenpairs do not converge."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class AffinityGraph:
    entries: sp.csr_matrix
    k: int

    @property
    def n(self):
        return self.entries.shape[0]


@dataclass
class SpectralEmbedding:
    eigenvalues: np.ndarray  # (q,), ascending
    phi: np.ndarray  # (n, q)

    @property
    def q(self):
        return len(self.eigenvalues)


# --------------------------------------------------------------------------- graph


def knn_affinity(distances, k=10) -> AffinityGraph:
    """Binary KNN graph symmetrized as ``(A + A^T) / 2``.

    Entries are 1 for mutual neighbours and 0.5 for one-sided ones. Distance
    ties are broken toward the smaller sample index.
    """
    D = np.asarray(getattr(distances, "values", distances), dtype=np.float64)
    n = D.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"knn_k must satisfy 1 <= k < n (k={k}, n={n})")
    D = D.copy()
    np.fill_diagonal(D, np.inf)
    nbrs = np.argsort(D, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    directed = sp.csr_matrix((np.ones(n * k), (rows, nbrs.ravel())), shape=(n, n))
    sym = ((directed + directed.T) * 0.5).tocsr()
    sym.sort_indices()
    return AffinityGraph(sym, k)


def laplacians(graph):
    """Return ``(L, L_sym, degrees)`` with ``L = D - A`` and
    ``L_sym = D^-1/2 L D^-1/2``."""
    A = graph.entries if isinstance(graph, AffinityGraph) else sp.csr_matrix(graph)
    d = np.asarray(A.sum(axis=1)).ravel()
    if np.any(d <= 0):
        raise ValueError(f"isolated vertices: {np.flatnonzero(d <= 0).tolist()}")
    L = (sp.diags(d) - A).tocsr()
    s = sp.diags(1.0 / np.sqrt(d))
    L_sym = (s @ L @ s).tocsr()
    L_sym = ((L_sym + L_sym.T) * 0.5).tocsr()
    return L, L_sym, d


def connected_components(graph):
    """Component count by breadth-first search."""
    A = graph.entries if isinstance(graph, AffinityGraph) else sp.csr_matrix(graph)
    n = A.shape[0]
    seen = np.zeros(n, dtype=bool)
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for u in A.indices[A.indptr[v] : A.indptr[v + 1]]:
                if not seen[u]:
                    seen[u] = True
                    queue.append(u)
    return count


# --------------------------------------------------------------------------- lanczos


def _orthogonalize(v, *bases):
    # two passes of classical Gram-Schmidt
    for _ in range(2):
        for Q in bases:
            if Q.shape[1]:
                v = v - Q @ (Q.T @ v)
    return v


def _start_vector(n, locked, rng):
    # First pass: normalized all-ones, perturbed by seeded noise when degenerate.
    # Later passes start from seeded noise; a structured start cannot see
    # eigenvalues repeated across components.
    if locked.shape[1]:
        v = _orthogonalize(rng.standard_normal(n), locked)
    else:
        v = np.ones(n) / np.sqrt(n)
    while np.linalg.norm(v) < 1e-8:
        v = _orthogonalize(np.ones(n) / np.sqrt(n) + rng.standard_normal(n), locked)
    return v / np.linalg.norm(v)


def _lanczos_pass(apply, n, locked, want, tol, rng, check_every=5):
    """One Lanczos run with full reorthogonalization against ``locked`` and the
    current basis. Returns up to ``want`` converged top Ritz pairs."""
    dim = n - locked.shape[1]
    Q = np.zeros((n, 0))
    alphas, betas = [], []
    v = _start_vector(n, locked, rng)
    beta = 0.0
    while True:
        Q = np.column_stack([Q, v])
        w = apply(v)
        alpha = float(v @ w)
        w = _orthogonalize(w, locked, Q)
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)
        m = len(alphas)
        exhausted = m >= dim
        if not exhausted and beta <= tol * 1e-3:
            # invariant subspace found: restart with a fresh orthogonal direction
            w = _orthogonalize(rng.standard_normal(n), locked, Q)
            beta_next = 0.0
            w /= np.linalg.norm(w)
        else:
            beta_next = beta
            if not exhausted:
                w = w / beta
        if exhausted or (m >= want and m % check_every == 0) or beta_next == 0.0:
            T = np.diag(alphas) + np.diag(betas, 1) + np.diag(betas, -1)
            theta, S = np.linalg.eigh(T)
            top = np.argsort(-theta, kind="stable")[:want]
            res = np.abs(beta_next * S[-1, top]) if not exhausted else np.zeros(len(top))
            if exhausted or (len(top) == want and np.all(res <= tol)):
                return theta[top], Q @ S[:, top]
        if exhausted:
            raise AssertionError("unreachable")
        betas.append(beta_next)
        v = w


def lanczos_eigs(L_sym, q=32, tol=1e-10, max_iter=None, seed=0) -> SpectralEmbedding:
    """The ``q`` smallest eigenpairs of a normalized Laplacian.

    Lanczos with full reorthogonalization runs on ``2I - L_sym`` so the wanted
    pairs are the largest ones. Converged pairs are locked and the iteration is
    restarted in their orthogonal complement until no unlocked direction beats
    the current ``q``-th pair, which recovers repeated eigenvalues (e.g. several
    connected components). ``max_iter`` bounds the number of such passes
    (default ``10 * q``). Every returned pair satisfies
    ``||L v - lambda v|| <= tol * ||L||_inf``.
    """
    A = sp.csr_matrix(L_sym)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("L_sym must be square")
    if not 1 <= q <= n:
        raise ValueError(f"q must satisfy 1 <= q <= n (q={q}, n={n})")
    max_iter = 10 * q if max_iter is None else max_iter
    norm = max(float(abs(A).sum(axis=1).max()), 1e-300)
    abs_tol = tol * norm
    rng = np.random.default_rng(seed)

    def apply(x):
        return 2.0 * x - A @ x

    vals = np.zeros(0)
    vecs = np.zeros((n, 0))
    for _ in range(max_iter):
        if vecs.shape[1] >= n:
            break
        want = min(q, n - vecs.shape[1]) if len(vals) < q else 1
        # passes converge with headroom so the final check holds after Rayleigh-Ritz
        theta, V = _lanczos_pass(apply, n, vecs, want, 0.1 * abs_tol, rng)
        if len(vals) >= q and theta[0] <= np.sort(vals)[-q] + abs_tol:
            break
        vals = np.concatenate([vals, theta])
        vecs = np.column_stack([vecs, V])
    else:
        raise LanczosError(f"no convergence after {max_iter} passes")

    order = np.argsort(-vals, kind="stable")[:q]
    lam = 2.0 - vals[order]
    phi = vecs[:, order]
    # Rayleigh-Ritz on the locked space cleans up near-degenerate pairs
    H = phi.T @ (A @ phi)
    lam, R = np.linalg.eigh((H + H.T) * 0.5)
    phi = phi @ R
    phi = _fix_signs(phi)
    residuals = np.linalg.norm(A @ phi - phi * lam, axis=0)
    if np.any(residuals > abs_tol):
        raise LanczosError(f"residuals above tolerance: max {residuals.max():.3g}", residuals)
    return SpectralEmbedding(lam, phi)


def _fix_signs(phi):
    """Make the entry of largest magnitude in each column positive."""
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs


def spectral_embedding(graph, q=32, tol=1e-10, max_iter=None, seed=0):
    _, L_sym, _ = laplacians(graph)
    return lanczos_eigs(L_sym, min(q, L_sym.shape[0]), tol, max_iter, seed)


def eigengap_estimate(eigenvalues, max_k=None):
    """Index ``i`` in ``[1, max_k]`` maximizing ``lambda_{i+1} - lambda_i``
    (1-based, ties toward smaller ``i``)."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if len(lam) < 3:
        raise ValueError("need at least 3 eigenvalues")
    max_k = len(lam) - 1 if max_k is None else max_k
    if not 1 <= max_k < len(lam):
        raise ValueError(f"max_k must lie in [1, {len(lam) - 1}]")
    gaps = np.diff(lam[: max_k + 1])
    return int(np.argmax(gaps)) + 1


def estimate_cluster_count(eigenvalues, max_k=10, zero_tol=1e-8):
    """Number of (numerically) zero eigenvalues when the graph falls apart into
    several components, otherwise :func:`eigengap_estimate` up to ``max_k``."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    zeros = int((lam < zero_tol).sum())
    if zeros >= 2:
        return zeros
    return eigengap_estimate(lam, min(max_k, len(lam) - 1))


# --------------------------------------------------------------------------- io


def write_emb(path, emb: SpectralEmbedding):
    n, q = emb.phi.shape
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", n, q))
        fh.write(np.ascontiguousarray(emb.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(emb.phi, dtype="<f8").tobytes())


def read_emb(path) -> SpectralEmbedding:
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    n, q = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 8 * q * (n + 1):
        raise ValueError(f"{path}: corrupt EMB1 payload")
    lam = np.frombuffer(raw, dtype="<f8", count=q, offset=12).copy()
    phi = np.frombuffer(raw, dtype="<f8", count=n * q, offset=12 + 8 * q).reshape(n, q).copy()
    return SpectralEmbedding(lam, phi)


def write_affinity_coo(path, graph: AffinityGraph):
    """Debug export: one ``i j value`` line per non-zero."""
    coo = graph.entries.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.writelines(f"{i} {j} {v:g}\n" for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]))
