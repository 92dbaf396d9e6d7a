"""Adaptive spectral graph attention network.

Pipeline per forward pass: filter response g(λ) at the backend's sample
points -> wavelet rows ψ_v -> top-k per row -> masked softmax -> attention
aggregation. Both layers share one filter MLP and its attention support;
each layer draws its own attention dropout mask.
"""
import logging

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import polynomial as npoly

from config import EXACT_MAX_NODES, LAMBDA_MAX, TOPK_TIE_TOL
from graphcore import adjacency_matrix, normalized_laplacian
from spectral import spectrum_for_graph, eigendecompose, apply_filter_exact, heat_response
from approx import (
    chebyshev_nodes,
    chebyshev_coefficient_map,
    chebyshev_terms,
    arma_grid,
    arma_fit,
    refit_numerator,
    arma_apply,
    arma_denominator_solve,
    polynomial_apply,
    power_terms,
)
from diffkernel import (
    Function,
    Tensor,
    as_tensor,
    MulConst,
    MaskedSoftmax,
    SparseAggregate,
    Gather,
    Reshape,
    Concat,
    MeanOf,
    elu,
    relu,
    dropout,
    glorot_uniform,
    init_mlp_filter,
    mlp_response,
)

logger = logging.getLogger(__name__)

# Config keys that change what prepare_graph computes
CONTEXT_KEYS = ("backend", "heat_method", "cheb_order")


class ModelConfigError(ValueError):
    pass


class AttentionInvariantError(AssertionError):
    pass


def topk_indices(psi, k):
    """Column indices of the k largest entries per row, ascending.

    Ties at the threshold go to the smaller index. Entries within
    ``TOPK_TIE_TOL`` (relative to the row's largest magnitude) of the k-th
    value are tied, so rounding noise from U g(Λ) Uᵀ does not pick the set.
    """
    psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
    rows, n = psi.shape
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not np.all(np.isfinite(psi)):
        raise ValueError("wavelet rows must be finite")
    k = min(k, n)
    if k == n:
        return np.tile(np.arange(n), (rows, 1))

    kth = -np.partition(-psi, k - 1, axis=1)[:, k - 1:k]
    tol = TOPK_TIE_TOL * np.maximum(1.0, np.abs(psi).max(axis=1, keepdims=True))
    greater = psi > kth + tol
    ties = np.abs(psi - kth) <= tol
    need = k - greater.sum(axis=1, keepdims=True)
    keep = greater | (ties & (np.cumsum(ties, axis=1) <= need))
    return np.nonzero(keep)[1].reshape(rows, k)


def topk_sparsify(psi_row, k):
    row = np.asarray(psi_row, dtype=np.float64)
    kept = topk_indices(row[None, :], k)[0]
    out = np.full(row.shape, -np.inf)
    out[kept] = row[kept]
    return out


def _scatter(values, indices, n):
    rows = np.repeat(np.arange(values.shape[0]), indices.shape[1])
    return sp.csr_matrix((values.ravel(), (rows, indices.ravel())), shape=(n, n))


def _select(psi, k, h, values, indices):
    psi = 0.5 * (psi + psi.T)
    idx = topk_indices(psi, k)
    indices[h] = idx
    values[h] = np.take_along_axis(psi, idx, axis=1)


class WaveletTopKExact(Function):
    """Response at the eigenvalues (N×M) -> kept wavelet entries (M×N×k)."""

    def forward(self, response, basis=None, k=None):
        n, heads = basis.shape[0], response.shape[1]
        self.basis = basis
        values = np.empty((heads, n, k))
        self.indices = np.empty((heads, n, k), dtype=np.int64)
        for h in range(heads):
            _select((basis * response[:, h]) @ basis.T, k, h, values, self.indices)
        return values

    def backward(self, grad):
        U = self.basis
        n = U.shape[0]
        d = np.empty((U.shape[1], grad.shape[0]))
        for h in range(grad.shape[0]):
            Gd = _scatter(grad[h], self.indices[h], n)
            d[:, h] = np.sum((Gd @ U) * U, axis=0)
        return (d,)


class WaveletTopKChebyshev(Function):
    """Response at the cosine nodes (S×M) -> kept entries of the Chebyshev wavelets."""

    def forward(self, samples, laplacian=None, order=None, k=None):
        n, heads = laplacian.shape[0], samples.shape[1]
        self.laplacian = laplacian
        self.order = order
        coeffs = chebyshev_coefficient_map(order) @ samples
        coeffs[0] *= 0.5
        psi = np.zeros((heads, n, n))
        for i, term in enumerate(chebyshev_terms(laplacian, np.eye(n), order)):
            psi += coeffs[i][:, None, None] * term
        values = np.empty((heads, n, k))
        self.indices = np.empty((heads, n, k), dtype=np.int64)
        for h in range(heads):
            _select(psi[h], k, h, values, self.indices)
        return values

    def backward(self, grad):
        n, heads = self.laplacian.shape[0], grad.shape[0]
        dc = np.zeros((self.order + 1, heads))
        for i, term in enumerate(chebyshev_terms(self.laplacian, np.eye(n), self.order)):
            weight = 0.5 if i == 0 else 1.0
            for h in range(heads):
                dc[i, h] = weight * np.sum(grad[h] * np.take_along_axis(term, self.indices[h], axis=1))
        return (chebyshev_coefficient_map(self.order).T @ dc,)


class WaveletTopKArma(Function):
    """Response on the ARMA grid (G×M) -> kept entries of D(L)^-1 B(L).

    The rational fit is redone on every call. Gradients reach the grid values
    through the numerator solve with the denominator held fixed.
    """

    def forward(self, grid_values, laplacian=None, grid=None, orders=None, max_iters=None, k=None):
        n, heads = laplacian.shape[0], grid_values.shape[1]
        P, Q = orders
        fit = arma_fit(grid_values, P, Q, max_iters, grid=grid)
        self.fit, self.maps = refit_numerator(fit, grid_values)
        self.laplacian = laplacian
        identity = np.eye(n)
        values = np.empty((heads, n, k))
        self.indices = np.empty((heads, n, k), dtype=np.int64)
        for h in range(heads):
            _select(arma_apply(laplacian, self.fit, identity, head=h), k, h, values, self.indices)
        return values

    def backward(self, grad):
        n, heads = self.laplacian.shape[0], grad.shape[0]
        degree = self.fit["numerator"].shape[0] - 1
        d = np.zeros((self.maps[0].shape[1], heads))
        for h in range(heads):
            Gd = _scatter(grad[h], self.indices[h], n).toarray()
            H = arma_denominator_solve(self.laplacian, self.fit, Gd, head=h)
            db = np.array([np.trace(term) for term in power_terms(self.laplacian, H.T, degree)])
            d[:, h] = self.maps[h].T @ db
        return (d,)


def prepare_graph(g, cfg, cache_dir=None):
    """Per-graph constants for a backend: sparse Laplacian plus spectrum or sample points."""
    backend = cfg["backend"]
    mode = cfg["heat_method"] if backend == "heat" else backend
    n = g["num_nodes"]
    ctx = {
        "num_nodes": n,
        "features": g["features"],
        "labels": g["labels"],
        "class_count": g["class_count"],
        "laplacian": normalized_laplacian(g, sparse=True),
        "backend": backend,
        "mode": mode,
    }

    if mode == "exact":
        if n > EXACT_MAX_NODES:
            raise ModelConfigError(
                f"exact backend supports at most {EXACT_MAX_NODES} nodes, graph has {n}; use chebyshev or arma"
            )
        spectrum = spectrum_for_graph(g, cache_dir)
        ctx["spectrum"] = spectrum
        ctx["points"] = spectrum["eigenvalues"]
    elif mode == "chebyshev":
        ctx["order"] = cfg["cheb_order"]
        ctx["points"] = chebyshev_nodes(cfg["cheb_order"])
    elif mode == "arma":
        ctx["points"] = arma_grid()
    else:
        raise ModelConfigError(f"unknown backend '{backend}' (heat method '{cfg['heat_method']}')")

    logger.debug(f"Prepared {mode} context for {n} nodes ({ctx['points'].size} filter points)")
    return ctx


def context_key(cfg):
    return tuple(cfg[key] for key in CONTEXT_KEYS)


def init_params(cfg, feature_dim, class_count, rng):
    params = {}
    if cfg["backend"] != "heat":
        params.update(init_mlp_filter(cfg["heads"], cfg["mlp_hidden"], rng))
    params["W1"] = Tensor(glorot_uniform(rng, feature_dim, cfg["hidden"]), requires_grad=True)
    params["W2"] = Tensor(glorot_uniform(rng, cfg["heads"] * cfg["hidden"], class_count), requires_grad=True)
    return params


def response_at(cfg, params, lam):
    """Filter response at arbitrary λ as a Tensor (len(lam)×M)."""
    lam = np.asarray(lam, dtype=np.float64)
    if cfg["backend"] == "heat":
        return Tensor(np.repeat(heat_response(cfg["heat_scale"], lam), cfg["heads"], axis=1))
    return mlp_response(params, lam)


def frequency_keep(points, lo, hi):
    """1.0 where the response survives zeroing [lo, hi); the top range closes at λ_max."""
    points = np.asarray(points, dtype=np.float64)
    if lo >= hi:
        return np.ones_like(points)
    inside = np.ones(points.shape, dtype=bool)
    if lo > 0:
        inside &= points >= lo
    if hi < LAMBDA_MAX:
        inside &= points < hi
    return np.where(inside, 0.0, 1.0)


def wavelet_topk(response, cfg, ctx):
    k = min(cfg["k"], ctx["num_nodes"])
    mode = ctx["mode"]
    if mode == "exact":
        values, op = WaveletTopKExact.invoke(response, basis=ctx["spectrum"]["basis"], k=k)
    elif mode == "chebyshev":
        values, op = WaveletTopKChebyshev.invoke(response, laplacian=ctx["laplacian"], order=ctx["order"], k=k)
    else:
        values, op = WaveletTopKArma.invoke(
            response,
            laplacian=ctx["laplacian"],
            grid=ctx["points"],
            orders=(cfg["arma_p"], cfg["arma_q"]),
            max_iters=cfg["arma_iters"],
            k=k,
        )
    return values, op.indices


def attention_from_topk(values, indices, dropout_rate=0.0, rng=None):
    """Masked softmax over each row's kept entries (M×N×k).

    Dropout removes kept entries before the softmax so each row still sums
    to 1; a row that would lose every entry keeps all of them.
    """
    values = as_tensor(values)
    keep = np.ones(values.shape, dtype=bool)
    if dropout_rate > 0 and rng is not None:
        keep = rng.random(values.shape) >= dropout_rate
        keep[~keep.any(axis=-1)] = True
    weights = MaskedSoftmax.apply(values, keep=keep)
    return {"values": weights, "indices": indices, "k": indices.shape[-1], "head_count": indices.shape[0]}


def build_attention(psi, k, dropout_rate=0.0, rng=None):
    """Attention from dense wavelet matrices (N×N or M×N×N)."""
    psi = as_tensor(psi)
    if psi.data.ndim == 2:
        psi = Reshape.apply(psi, shape=(1,) + psi.shape)
    heads, n, _ = psi.shape
    indices = np.stack([topk_indices(psi.data[h], k) for h in range(heads)])
    values = Gather.apply(psi, indices=indices)
    return attention_from_topk(values, indices, dropout_rate, rng)


def dense_attention(weights):
    """Wrap explicit N×N (or M×N×N) weights as an attention set with full support."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 2:
        weights = weights[None]
    heads, n, _ = weights.shape
    indices = np.tile(np.arange(n), (heads, n, 1))
    return {"values": Tensor(weights), "indices": indices, "k": n, "head_count": heads}


def attention_dense(att):
    values = as_tensor(att["values"]).data
    heads, n, _ = values.shape
    out = np.zeros((heads, n, n))
    np.put_along_axis(out, att["indices"], values, axis=-1)
    return out


def validate_attention(att, k=None, tol=1e-9, head_mask=None):
    values = as_tensor(att["values"]).data
    indices = att["indices"]
    k = att["k"] if k is None else k
    if values.shape != indices.shape:
        raise AttentionInvariantError(f"values {values.shape} and indices {indices.shape} disagree")
    if np.any(values < 0):
        raise AttentionInvariantError("attention has negative entries")
    nonzeros = np.count_nonzero(values, axis=-1)
    if nonzeros.max(initial=0) > k:
        raise AttentionInvariantError(f"attention row has {nonzeros.max()} nonzeros, more than k={k}")
    sums = values.sum(axis=-1)
    heads = range(values.shape[0]) if head_mask is None else np.flatnonzero(head_mask)
    for h in heads:
        worst = np.max(np.abs(sums[h] - 1.0))
        if worst > tol:
            raise AttentionInvariantError(f"head {h} rows deviate from 1 by {worst:.3e}")
    return True


def asgat_layer(H, att, W, activation="elu", combine="concat", head_mask=None):
    """Per head: σ(att_h · H · W); heads concatenated or averaged.

    ``head_mask[h] == False`` zeroes head h's attention, leaving a zero block.
    """
    H, W = as_tensor(H), as_tensor(W)
    if H.shape[1] != W.shape[0]:
        raise ValueError(f"features of width {H.shape[1]} do not match weights {W.shape}")
    if att["indices"].shape[1] != H.shape[0]:
        raise ValueError(f"attention covers {att['indices'].shape[1]} nodes, features have {H.shape[0]}")

    HW = H @ W
    weights = as_tensor(att["values"])
    outputs = []
    for h in range(att["head_count"]):
        a = weights[h]
        if head_mask is not None and not head_mask[h]:
            a = MulConst.apply(a, const=0.0)
        z = SparseAggregate.apply(a, HW, indices=att["indices"][h])
        if activation == "elu":
            z = elu(z)
        elif activation == "relu":
            z = relu(z)
        elif activation is not None:
            raise ValueError(f"unknown activation '{activation}'")
        outputs.append(z)

    if combine == "concat":
        return outputs[0] if len(outputs) == 1 else Concat.apply(*outputs, axis=1)
    if combine == "mean":
        return outputs[0] if len(outputs) == 1 else MeanOf.apply(*outputs)
    raise ValueError(f"unknown head combination '{combine}'")


def forward(cfg, params, ctx, training=False, rng=None, frequency_range=None, head_mask=None,
            return_attention=False):
    rate = cfg["dropout"] if training else 0.0
    if rate > 0 and rng is None:
        rng = np.random.default_rng(cfg["seed"])

    response = response_at(cfg, params, ctx["points"])
    if frequency_range is not None:
        lo, hi = frequency_range
        response = MulConst.apply(response, const=frequency_keep(ctx["points"], lo, hi)[:, None])

    values, indices = wavelet_topk(response, cfg, ctx)

    att1 = attention_from_topk(values, indices, rate, rng)
    H = dropout(Tensor(ctx["features"]), rate, rng, training)
    H = asgat_layer(H, att1, params["W1"], activation="elu", combine="concat", head_mask=head_mask)

    att2 = attention_from_topk(values, indices, rate, rng)
    H = dropout(H, rate, rng, training)
    logits = asgat_layer(H, att2, params["W2"], activation=None, combine="mean", head_mask=head_mask)

    if return_attention:
        return logits, [att1, att2]
    return logits


def predict(cfg, params, ctx, **kwargs):
    return np.argmax(forward(cfg, params, ctx, **kwargs).data, axis=1)


def gcn_equivalence_check(g, seed=0, feature_dim=4, out_dim=3):
    """Max deviation between the attention layer with a_vu = Â_vu, ReLU, and a plain GCN layer."""
    n = g["num_nodes"]
    A = adjacency_matrix(g).toarray() + np.eye(n)
    dinv = 1.0 / np.sqrt(A.sum(axis=1))
    A_hat = dinv[:, None] * A * dinv[None, :]

    rng = np.random.default_rng(seed)
    H = rng.normal(size=(n, feature_dim))
    W = rng.normal(size=(feature_dim, out_dim))

    out = asgat_layer(H, dense_attention(A_hat), W, activation="relu").data
    reference = np.maximum((A_hat @ H) @ W, 0.0)
    return float(np.max(np.abs(out - reference)))


def polynomial_filter_check(g, thetas, seed=0, feature_dim=4):
    """Max deviation between the layer with a_vu = (U g_θ(Λ) Uᵀ)_vu, W = I, ReLU and ReLU(Σ θ_k L^k H)."""
    n = g["num_nodes"]
    L = normalized_laplacian(g)
    spectrum = eigendecompose(L)
    psi = apply_filter_exact(spectrum, npoly.polyval(spectrum["eigenvalues"], thetas))

    rng = np.random.default_rng(seed)
    H = rng.normal(size=(n, feature_dim))
    out = asgat_layer(H, dense_attention(psi), np.eye(feature_dim), activation="relu").data
    reference = np.maximum(polynomial_apply(L, thetas, H), 0.0)
    return float(np.max(np.abs(out - reference)))
