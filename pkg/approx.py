"""Eigendecomposition-free filter backends.

Chebyshev: g(L)X ~ (c_0/2 + sum_i c_i T_i(L)) X with the shifted recursion
T_1 = (2/lambda_max) L - I, T_i = 2 T_1 T_{i-1} - T_{i-2}.

ARMA: g(L)X ~ D(L)^-1 B(L) X, solved by conjugate gradients, where
B(lambda) = sum_q b_q lambda^q and D(lambda) = 1 + sum_p a_p lambda^p.
"""
import logging

import numpy as np
from numpy.polynomial import polynomial as npoly

from config import (
    LAMBDA_MAX,
    ARMA_GRID_POINTS,
    ARMA_STABILITY_GRID,
    ARMA_STABILITY_EPS,
    ARMA_DENOMINATOR_SPREAD,
    CG_TOL,
)

logger = logging.getLogger(__name__)


class ApproximationError(ArithmeticError):
    pass


class ArmaFitError(ApproximationError):
    pass


class ArmaStabilityError(ApproximationError):
    pass


class ConvergenceError(ApproximationError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class CountingOperator:
    """Wraps a matrix and counts matrix-vector products taken through ``@``."""

    def __init__(self, matrix):
        self.matrix = matrix
        self.shape = matrix.shape
        self.products = 0

    def __matmul__(self, other):
        other = np.asarray(other)
        self.products += 1 if other.ndim == 1 else other.shape[1]
        return self.matrix @ other


def _as_columns(X):
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X, X.ndim == 1


def _check_dims(L, X):
    if L.shape[0] != L.shape[1] or L.shape[1] != X.shape[0]:
        raise ValueError(f"dimension mismatch: operator {L.shape} applied to {X.shape}")


# Chebyshev

def chebyshev_nodes(order, lambda_max=LAMBDA_MAX):
    S = order + 1
    m = np.arange(S) + 0.5
    return 0.5 * lambda_max * (np.cos(np.pi * m / S) + 1.0)


def chebyshev_coefficient_map(order):
    """(R+1)×S matrix taking filter samples at the cosine nodes to c_0..c_R."""
    S = order + 1
    i = np.arange(order + 1)[:, None]
    m = np.arange(S)[None, :] + 0.5
    return (2.0 / S) * np.cos(np.pi * i * m / S)


def chebyshev_fit(response_fn, order, lambda_max=LAMBDA_MAX):
    if order < 1:
        raise ValueError(f"Chebyshev order must be at least 1, got {order}")
    nodes = chebyshev_nodes(order, lambda_max)
    values = np.asarray(response_fn(nodes), dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != nodes.size:
        raise ValueError(f"response returned {values.shape[0]} values for {nodes.size} sample points")
    if not np.all(np.isfinite(values)):
        raise ApproximationError("filter response is not finite at a Chebyshev sample point")
    return {
        "order": order,
        "coeffs": chebyshev_coefficient_map(order) @ values,
        "lambda_max": lambda_max,
        "sample_count": order + 1,
    }


def chebyshev_eval(f, lam):
    """Evaluate a fitted series at scalar points; returns len(lam)×M."""
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    x = 2.0 * lam / f["lambda_max"] - 1.0
    coeffs = f["coeffs"]
    t_prev = np.ones_like(x)
    out = 0.5 * coeffs[0][None, :] * t_prev[:, None]
    if f["order"] >= 1:
        t_cur = x
        out = out + coeffs[1][None, :] * t_cur[:, None]
        for i in range(2, f["order"] + 1):
            t_prev, t_cur = t_cur, 2.0 * x * t_cur - t_prev
            out = out + coeffs[i][None, :] * t_cur[:, None]
    return out


def chebyshev_terms(L, X, order, lambda_max=LAMBDA_MAX):
    """Yield T_0(L)X .. T_R(L)X using one product with L per term after the first."""
    def shifted(Y):
        return (2.0 / lambda_max) * (L @ Y) - Y

    t_prev = X
    yield t_prev
    if order < 1:
        return
    t_cur = shifted(X)
    yield t_cur
    for _ in range(2, order + 1):
        t_prev, t_cur = t_cur, 2.0 * shifted(t_cur) - t_prev
        yield t_cur


def chebyshev_apply(L, f, X, head=0):
    X, was_vector = _as_columns(X)
    _check_dims(L, X)
    coeffs = f["coeffs"][:, head]
    out = np.zeros_like(X)
    for i, term in enumerate(chebyshev_terms(L, X, f["order"], f["lambda_max"])):
        out += (0.5 * coeffs[0] if i == 0 else coeffs[i]) * term
    return out[:, 0] if was_vector else out


# Polynomials in L

def polynomial_apply(L, coeffs, X):
    """sum_q coeffs[q] L^q X by Horner's rule."""
    X, was_vector = _as_columns(X)
    _check_dims(L, X)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    out = coeffs[-1] * X
    for c in coeffs[-2::-1]:
        out = L @ out + c * X
    return out[:, 0] if was_vector else out


def power_terms(L, X, degree):
    term = X
    yield term
    for _ in range(degree):
        term = L @ term
        yield term


# Conjugate gradients

def conjugate_gradient(apply_fn, B, tol=CG_TOL, max_iter=None):
    """Block CG: solves A x_j = b_j for every column with per-column step sizes.

    Stops per column once ||r_j|| <= tol * ||b_j||; raises ConvergenceError
    when any column is still above tolerance after ``max_iter`` iterations.
    """
    B, was_vector = _as_columns(B)
    n = B.shape[0]
    if max_iter is None:
        max_iter = 10 * n

    bnorm = np.linalg.norm(B, axis=0)
    bnorm[bnorm == 0] = 1.0

    X = np.zeros_like(B)
    R = B.copy()
    P = R.copy()
    rs = np.sum(R * R, axis=0)

    iterations = 0
    while True:
        relres = np.sqrt(rs) / bnorm
        active = relres > tol
        if not active.any():
            break
        if iterations >= max_iter:
            worst = float(relres.max())
            raise ConvergenceError(
                f"conjugate gradients did not converge in {max_iter} iterations (relative residual {worst:.3e})",
                residual=worst,
            )
        AP = apply_fn(P)
        pAp = np.sum(P * AP, axis=0)
        safe = active & (pAp > 0)
        alpha = np.zeros_like(rs)
        alpha[safe] = rs[safe] / pAp[safe]
        X += alpha * P
        R -= alpha * AP
        rs_new = np.sum(R * R, axis=0)
        beta = np.zeros_like(rs)
        beta[safe] = rs_new[safe] / rs[safe]
        P = R + beta * P
        rs = np.where(safe, rs_new, rs)
        if not safe[active].any():
            worst = float(relres.max())
            raise ConvergenceError(f"conjugate gradients broke down (relative residual {worst:.3e})", residual=worst)
        iterations += 1

    logger.debug(f"CG converged in {iterations} iterations for {B.shape[1]} columns")
    return X[:, 0] if was_vector else X


# ARMA

def arma_grid(points=ARMA_GRID_POINTS, lambda_max=LAMBDA_MAX):
    return np.linspace(0.0, lambda_max, points)


def _denominator_values(a, lam):
    return npoly.polyval(lam, np.concatenate([[1.0], a]))


def check_arma_stability(f, points=ARMA_STABILITY_GRID, eps=ARMA_STABILITY_EPS):
    lam = np.linspace(0.0, f.get("lambda_max", LAMBDA_MAX), points)
    denominator = f["denominator"]
    for h in range(denominator.shape[1]):
        d = _denominator_values(denominator[:, h], lam)
        if d.min() <= eps:
            where = lam[np.argmin(d)]
            raise ArmaStabilityError(
                f"ARMA denominator of head {h} reaches {d.min():.3e} at lambda={where:.4f}; "
                f"the rational filter has a pole in [0, {f.get('lambda_max', LAMBDA_MAX)}]"
            )
    return True


def arma_eval(f, lam):
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    numerator = npoly.polyval(lam, f["numerator"]).T
    denominator = np.stack(
        [_denominator_values(f["denominator"][:, h], lam) for h in range(f["denominator"].shape[1])], axis=1
    )
    return numerator / denominator


def _scaled_lstsq(design, rhs):
    scale = np.linalg.norm(design, axis=0)
    scale[scale == 0] = 1.0
    solution, _, rank, _ = np.linalg.lstsq(design / scale, rhs, rcond=None)
    if rank < design.shape[1]:
        logger.debug(f"ARMA least squares is rank deficient ({rank} < {design.shape[1]})")
    return solution / (scale if solution.ndim == 1 else scale[:, None])


def arma_numerator_map(grid, a, degree):
    """(Q+1)×G map K from grid values g to the numerator b, denominator frozen.

    b minimizes sum_j w_j^2 (B(lambda_j) - g_j D(lambda_j))^2 with w = 1/D,
    which is linear in g.
    """
    grid = np.asarray(grid, dtype=np.float64)
    d = _denominator_values(np.asarray(a, dtype=np.float64), grid)
    weights = 1.0 / np.abs(d)
    vander = np.vander(grid, degree + 1, increasing=True)
    return _scaled_lstsq(weights[:, None] * vander, np.diag(weights * d))


def _fit_column(g, grid, P, Q, T, stability_lam):
    G = grid.size
    vander_b = np.vander(grid, Q + 1, increasing=True)
    vander_a = np.vander(grid, P + 1, increasing=True)[:, 1:]
    gscale = max(1.0, float(np.max(np.abs(g))))

    def residual(b, a):
        approx = (vander_b @ b) / (1.0 + vander_a @ a)
        return float(np.sqrt(np.mean((approx - g) ** 2)))

    def stable(a):
        if P == 0:
            return True
        d = _denominator_values(a, stability_lam)
        return d.min() > ARMA_STABILITY_EPS and d.min() >= ARMA_DENOMINATOR_SPREAD * d.max()

    b = _scaled_lstsq(vander_b, g)
    a = np.zeros(P)
    if not np.all(np.isfinite(b)):
        raise ArmaFitError("polynomial initialization produced non-finite coefficients; try lower Q")

    best = (residual(b, a), b, a)
    history = [best[0]]

    for iteration in range(T):
        if best[0] <= 1e-14 * gscale or P == 0:
            break
        weights = 1.0 / (1.0 + vander_a @ best[2])
        design = np.hstack([vander_b, -g[:, None] * vander_a]) * weights[:, None]
        solution = _scaled_lstsq(design, weights * g)
        if not np.all(np.isfinite(solution)):
            raise ArmaFitError(
                f"ARMA normal equations are singular at iteration {iteration + 1}; try lower P/Q"
            )
        b_new, a_new = solution[:Q + 1], solution[Q + 1:]
        if not stable(a_new):
            logger.debug(f"ARMA iterate {iteration + 1} is unstable or ill-conditioned on [0, 2]; keeping best stable iterate")
            history.append(best[0])
            break
        res = residual(b_new, a_new)
        previous = best[0]
        if res < best[0]:
            best = (res, b_new, a_new)
        history.append(best[0])
        if previous - best[0] <= 1e-12 * max(1.0, previous):
            break

    return best[1], best[2], history


def arma_fit(response, P, Q, T, grid=None):
    """Rational least-squares fit of sampled filter values, one head per column.

    Starts from the polynomial least-squares fit (a = 0) and refines it with
    Sanathanan-Koerner reweighting for at most T iterations. Only stable
    iterates are accepted and the best one is kept, so the residual history
    never increases.
    """
    if grid is None:
        grid = arma_grid()
    grid = np.asarray(grid, dtype=np.float64)
    values = np.asarray(response, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != grid.size:
        raise ValueError(f"response has {values.shape[0]} samples for a {grid.size}-point grid")
    if T < 1:
        raise ValueError("ARMA iteration count T must be at least 1")
    if P < 0 or Q < 0:
        raise ValueError("ARMA orders must be nonnegative")
    if grid.size < max(P, Q) + 1:
        raise ArmaFitError(f"grid of {grid.size} points cannot determine orders P={P}, Q={Q}; try lower P/Q")
    if not np.all(np.isfinite(values)):
        raise ArmaFitError("filter response is not finite on the fitting grid")

    lambda_max = float(grid.max()) if grid.size else LAMBDA_MAX
    stability_lam = np.linspace(0.0, lambda_max, ARMA_STABILITY_GRID)

    heads = values.shape[1]
    numerator = np.zeros((Q + 1, heads))
    denominator = np.zeros((P, heads))
    histories = []
    for h in range(heads):
        b, a, history = _fit_column(values[:, h], grid, P, Q, T, stability_lam)
        numerator[:, h] = b
        denominator[:, h] = a
        histories.append(history)

    f = {
        "numerator": numerator,
        "denominator": denominator,
        "orders": (P, Q),
        "max_iters": T,
        "grid": grid,
        "lambda_max": lambda_max,
        "history": histories,
    }
    f["residual"] = float(np.max(np.abs(arma_eval(f, grid) - values)))
    return f


def refit_numerator(f, response):
    """Refit b with the fitted denominator frozen; returns the new filter and the per-head maps K."""
    grid = f["grid"]
    values = np.asarray(response, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    degree = f["numerator"].shape[0] - 1
    maps = []
    numerator = np.zeros_like(f["numerator"])
    for h in range(values.shape[1]):
        K = arma_numerator_map(grid, f["denominator"][:, h], degree)
        maps.append(K)
        numerator[:, h] = K @ values[:, h]
    return dict(f, numerator=numerator), maps


def arma_apply(L, f, X, head=0, tol=CG_TOL, max_iter=None):
    """Solve D(L) Y = B(L) X column by column with conjugate gradients."""
    X, was_vector = _as_columns(X)
    _check_dims(L, X)
    check_arma_stability(f)

    b = f["numerator"][:, head]
    a = f["denominator"][:, head]
    rhs = polynomial_apply(L, b, X)
    if not np.any(a):
        return rhs[:, 0] if was_vector else rhs

    d_coeffs = np.concatenate([[1.0], a])
    Y = conjugate_gradient(lambda V: polynomial_apply(L, d_coeffs, V), rhs, tol=tol,
                           max_iter=max_iter or 10 * X.shape[0])
    return Y[:, 0] if was_vector else Y


def arma_denominator_solve(L, f, B, head=0, tol=CG_TOL):
    a = f["denominator"][:, head]
    if not np.any(a):
        return np.array(B, dtype=np.float64)
    d_coeffs = np.concatenate([[1.0], a])
    return conjugate_gradient(lambda V: polynomial_apply(L, d_coeffs, V), B, tol=tol)
