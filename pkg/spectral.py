import hashlib
import logging

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from config import JACOBI_TOL, JACOBI_MAX_SWEEPS, JACOBI_MAX_NODES, LAMBDA_MAX, SPECTRUM_TOL
from graphcore import normalized_laplacian
import data_manager

logger = logging.getLogger(__name__)


class SpectralError(ArithmeticError):
    """Eigensolver failed to converge; carries the off-diagonal residual."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


def _round_robin_rounds(n):
    # Tournament schedule: each round is a set of disjoint (p, q) pairs,
    # and every pair appears exactly once per sweep.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        if pairs:
            pairs = np.array(pairs, dtype=np.int64)
            rounds.append((pairs[:, 0], pairs[:, 1]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(A):
    return np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))


def jacobi_eigh(A, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigensolver for dense symmetric matrices.

    Rotations inside one round act on disjoint index pairs, so a whole round
    is applied at once. Stops when the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||A||_F)``; raises SpectralError after ``max_sweeps``.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    if n < 2:
        return np.diag(A).copy(), V

    threshold = tol * max(1.0, np.linalg.norm(A))
    rounds = _round_robin_rounds(n)

    off = _off_norm(A)
    sweep = 0
    while off > threshold:
        if sweep >= max_sweeps:
            raise SpectralError(
                f"Jacobi did not converge after {max_sweeps} sweeps (off-diagonal residual {off:.3e})",
                residual=off,
            )
        for p, q in rounds:
            apq = A[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            app, aqq = A[p, p], A[q, q]

            with np.errstate(divide="ignore", over="ignore"):
                theta = (aqq - app) / (2.0 * apq)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(np.isfinite(t), t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            Ap, Aq = A[:, p], A[:, q]
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c

            Rp, Rq = A[p, :], A[q, :]
            A[p, :] = c[:, None] * Rp - s[:, None] * Rq
            A[q, :] = s[:, None] * Rp + c[:, None] * Rq

            Vp, Vq = V[:, p], V[:, q]
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c

        A = 0.5 * (A + A.T)
        sweep += 1
        off = _off_norm(A)
        logger.debug(f"Jacobi sweep {sweep}: off-diagonal {off:.3e}")

    return np.diag(A).copy(), V


def eigendecompose(L, method="auto", tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Spectrum of a symmetric matrix: ascending eigenvalues and orthonormal basis.

    Each eigenvector is signed so that its largest-magnitude component is
    nonnegative.
    """
    if sp.issparse(L):
        L = L.toarray()
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {L.shape}")
    asymmetry = np.max(np.abs(L - L.T)) if L.size else 0.0
    if asymmetry > 1e-12 * max(1.0, np.max(np.abs(L))):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asymmetry:.3e})")

    n = L.shape[0]
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_NODES else "lapack"

    if method == "jacobi":
        eigenvalues, basis = jacobi_eigh(L, tol=tol, max_sweeps=max_sweeps)
    elif method == "lapack":
        eigenvalues, basis = scipy.linalg.eigh(L)
    else:
        raise ValueError(f"unknown eigensolver '{method}'")

    order = np.argsort(eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    basis = basis[:, order]

    if n:
        pivots = np.argmax(np.abs(basis), axis=0)
        signs = np.sign(basis[pivots, np.arange(n)])
        signs[signs == 0] = 1.0
        basis = basis * signs

    logger.debug(f"Eigendecomposition of {n}x{n} matrix via {method}")
    return {"eigenvalues": eigenvalues, "basis": basis}


def check_spectrum(spectrum, L=None, normalized=True):
    U = spectrum["basis"]
    lam = spectrum["eigenvalues"]
    n = U.shape[0]
    report = {
        "orthonormality": float(np.max(np.abs(U.T @ U - np.eye(n)))) if n else 0.0,
        "ascending": bool(np.all(np.diff(lam) >= 0)),
    }
    if normalized:
        report["in_range"] = bool(np.all(lam >= -SPECTRUM_TOL) and np.all(lam <= LAMBDA_MAX + SPECTRUM_TOL))
    if L is not None:
        if sp.issparse(L):
            L = L.toarray()
        report["reconstruction"] = float(np.max(np.abs((U * lam) @ U.T - L))) if n else 0.0
    return report


def _response_column(spectrum, response, head):
    r = np.asarray(response, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    n = spectrum["basis"].shape[0]
    if r.shape[0] != n:
        raise ValueError(f"filter response has {r.shape[0]} rows, expected {n}")
    if not 0 <= head < r.shape[1]:
        raise IndexError(f"head {head} out of range for {r.shape[1]} heads")
    return r[:, head]


def apply_filter_exact(spectrum, response, head=0):
    """Wavelet matrix Ψ = U diag(g(Λ)) Uᵀ for one head; row v is ψ_v."""
    U = spectrum["basis"]
    values = _response_column(spectrum, response, head)
    psi = (U * values) @ U.T
    return 0.5 * (psi + psi.T)


def filter_signal_exact(spectrum, response, X, head=0):
    U = spectrum["basis"]
    values = _response_column(spectrum, response, head)
    X = np.asarray(X, dtype=np.float64)
    return U @ (values.reshape(-1, *([1] * (X.ndim - 1))) * (U.T @ X))


def heat_response(scale, eigenvalues):
    if scale < 0:
        raise ValueError(f"heat scale must be nonnegative, got {scale}")
    lam = np.asarray(eigenvalues, dtype=np.float64)
    return np.exp(-scale * lam).reshape(-1, 1)


def laplacian_key(L):
    if sp.issparse(L):
        L = L.toarray()
    L = np.ascontiguousarray(L, dtype=np.float64)
    digest = hashlib.sha256()
    digest.update(str(L.shape).encode("utf-8"))
    digest.update(L.tobytes())
    return digest.hexdigest()[:24]


def spectrum_for_graph(g, cache_dir=None, method="auto"):
    """Eigendecomposition of the graph's normalized Laplacian, cached by content hash."""
    L = normalized_laplacian(g)
    key = None
    if cache_dir:
        key = laplacian_key(L)
        cached = data_manager.load_spectrum(cache_dir, key)
        if cached is not None:
            logger.info(f"Loaded cached spectrum {key}")
            return cached

    spectrum = eigendecompose(L, method=method)
    report = check_spectrum(spectrum, L)
    if not report["in_range"]:
        logger.warning(f"Laplacian eigenvalues outside [0, {LAMBDA_MAX}]: "
                       f"[{spectrum['eigenvalues'][0]:.3e}, {spectrum['eigenvalues'][-1]:.3e}]")

    if cache_dir:
        data_manager.save_spectrum(cache_dir, key, spectrum)
    return spectrum
