import logging
import time

import numpy as np
import psutil
from colorama import Fore, Style

from config import (
    LAMBDA_MAX,
    HETEROPHILY_THRESHOLD,
    TIMING_WARMUP_EPOCHS,
    TIMING_MEASURE_EPOCHS,
    CHEB_ORDER,
    ARMA_P,
    ARMA_Q,
    ARMA_ITERS,
)
from graphcore import homophily, random_graph, normalized_laplacian
from spectral import eigendecompose, apply_filter_exact, heat_response
from approx import chebyshev_fit, chebyshev_apply, arma_fit, arma_grid, arma_apply
from diffkernel import Adam, as_tensor
from model import prepare_graph, init_params, forward, response_at, frequency_keep
from train import train, evaluate, run_splits, train_epoch, validate_train_config, micro_f1
import data_manager

logger = logging.getLogger(__name__)


class AblationError(ValueError):
    pass


def frequency_tiling(step):
    if step <= 0 or abs(LAMBDA_MAX / step - round(LAMBDA_MAX / step)) > 1e-12:
        raise AblationError(f"step {step} does not tile [0, {LAMBDA_MAX}]")
    count = int(round(LAMBDA_MAX / step))
    return [(i * step, (i + 1) * step) for i in range(count)]


def ablate_frequency(model, g, split, lo, hi, ctx=None):
    """Test micro-F1 change when g(λ) is zeroed on [lo, hi).

    The top range closes at λ_max. Parameters are never modified.
    """
    if not 0.0 <= lo <= hi <= LAMBDA_MAX:
        raise AblationError(f"invalid frequency range [{lo}, {hi})")
    ctx = ctx or prepare_graph(g, model["config"])
    baseline = evaluate(model, g, split, ctx)
    ablated = evaluate(model, g, split, ctx, frequency_range=(lo, hi))
    return ablated - baseline


def frequency_ablation_table(model, g, split, step, ctx=None):
    ctx = ctx or prepare_graph(g, model["config"])
    rows = []
    for lo, hi in frequency_tiling(step):
        covered = int(np.sum(frequency_keep(ctx["points"], lo, hi) == 0.0))
        delta = ablate_frequency(model, g, split, lo, hi, ctx)
        rows.append({"lo": lo, "hi": hi, "points": covered, "delta": delta})
        logger.info(f"Frequency range [{lo:.2f}, {hi:.2f}): {covered} points, delta {delta * 100:+.2f}")
    return rows


def ablate_heads(model, g, split, mode, ctx=None):
    """Per-head micro-F1 deltas for keep-one, drop-one or none (no head removed)."""
    cfg = model["config"]
    heads = cfg["heads"]
    ctx = ctx or prepare_graph(g, cfg)
    baseline = evaluate(model, g, split, ctx)

    if mode == "none":
        delta = evaluate(model, g, split, ctx, head_mask=np.ones(heads, dtype=bool)) - baseline
        return [{"head": None, "delta": delta}]
    if mode not in ("keep-one", "drop-one"):
        raise AblationError(f"unknown head ablation mode '{mode}'")
    if mode == "keep-one" and heads == 1:
        logger.warning(f"{Fore.YELLOW}keep-one ablation with a single head removes nothing{Style.RESET_ALL}")
        return [{"head": 0, "delta": 0.0}]

    rows = []
    for h in range(heads):
        if mode == "keep-one":
            head_mask = np.zeros(heads, dtype=bool)
            head_mask[h] = True
        else:
            head_mask = np.ones(heads, dtype=bool)
            head_mask[h] = False
        delta = evaluate(model, g, split, ctx, head_mask=head_mask) - baseline
        rows.append({"head": h, "delta": delta})
    return rows


def attention_density(att):
    """Nonzero attention weights over N², averaged across heads."""
    values = as_tensor(att["values"]).data
    heads, n = values.shape[0], values.shape[1]
    return float(np.count_nonzero(values) / (heads * n * n))


def _density_cell(cfg, g, split, k, ctx):
    cell = validate_train_config(dict(cfg, k=int(k)))
    rng = np.random.default_rng(cell["seed"])
    params = init_params(cell, g["features"].shape[1], g["class_count"], rng)
    optimizer = Adam(params, lr=cell["lr"], weight_decay=cell["weight_decay"])

    for _ in range(TIMING_WARMUP_EPOCHS):
        train_epoch(cell, params, optimizer, ctx, split, rng)
    timings = []
    for _ in range(TIMING_MEASURE_EPOCHS):
        start = time.perf_counter()
        train_epoch(cell, params, optimizer, ctx, split, rng)
        timings.append(time.perf_counter() - start)

    return {
        "k": int(k),
        "density": attention_density(forward(cell, params, ctx, return_attention=True)[1][0]),
        "epoch_time": float(np.median(timings)),
        "rss_mb": psutil.Process().memory_info().rss / 2 ** 20,
    }


def density_sweep(cfg, g, split, k_values):
    """Attention density and median epoch time for each k.

    Cells run one after another so the timed epochs do not share the CPU.
    """
    n = g["num_nodes"]
    for k in k_values:
        if not 1 <= k <= n:
            raise AblationError(f"k={k} outside [1, {n}]")
    ctx = prepare_graph(g, cfg)

    rows = []
    for i, k in enumerate(k_values, start=1):
        row = _density_cell(cfg, g, split, k, ctx)
        rows.append(row)
        logger.info(f"Progress: {i}/{len(k_values)} k={row['k']}: density {row['density']:.4f}, "
                    f"epoch {row['epoch_time'] * 1000:.1f} ms")
    return rows


def export_filter_responses(model, resolution, path=None):
    if resolution < 2:
        raise AblationError("resolution must be at least 2")
    cfg = model["config"]
    lam = np.linspace(0.0, LAMBDA_MAX, resolution)
    response = response_at(cfg, model["params"], lam).data
    header = ["lambda"] + [f"head_{h}" for h in range(response.shape[1])]
    rows = np.column_stack([lam, response])
    if path:
        data_manager.write_csv(path, header, rows.tolist())
    return header, rows


def heat_baseline(g, split, s_values, cfg):
    """Train with a fixed heat response per scale; the scale with best validation accuracy wins."""
    if not s_values:
        raise AblationError("heat baseline needs at least one scale")
    per_scale = []
    for s in s_values:
        result = train(dict(cfg, backend="heat", heat_scale=float(s)), g, split)
        per_scale.append({
            "scale": float(s),
            "val_acc": result["val_acc"],
            "test_micro_f1": result["test_micro_f1"],
            "test_macro_f1": result["test_macro_f1"],
        })
        logger.info(f"Heat scale {s}: val_acc {result['val_acc']:.4f}, test micro-F1 {result['test_micro_f1']:.4f}")

    best = per_scale[0]
    for row in per_scale[1:]:
        if row["val_acc"] > best["val_acc"]:
            best = row
    return {"best_scale": best["scale"], "best_micro_f1": best["test_micro_f1"], "per_scale": per_scale}


def k_sweep(cfg, g, splits, k_values, workers=1):
    """Mean ± std test micro-F1 over splits for each k."""
    ctx = prepare_graph(g, cfg)
    rows = []
    for k in k_values:
        _, summary = run_splits(dict(cfg, k=int(k)), g, splits, workers=workers, ctx=ctx)
        rows.append({"k": int(k), "micro_f1_mean": summary["micro_f1_mean"], "micro_f1_std": summary["micro_f1_std"]})
        logger.info(f"k={k}: micro-F1 {summary['micro_f1_mean'] * 100:.1f} ± {summary['micro_f1_std'] * 100:.1f}")
    return rows


def heterophilic_accuracy(model, g, split, threshold=HETEROPHILY_THRESHOLD, ctx=None):
    """Test accuracy restricted to nodes with β_v <= threshold."""
    cfg = model["config"]
    ctx = ctx or prepare_graph(g, cfg)
    pred = np.argmax(forward(cfg, model["params"], ctx).data, axis=1)
    beta_v = homophily(g)["beta_v"]
    with np.errstate(invalid="ignore"):
        nodes = np.asarray(split["test_mask"], dtype=bool) & (beta_v <= threshold)
    if not nodes.any():
        return {"count": 0, "accuracy": None}
    return {"count": int(nodes.sum()), "accuracy": micro_f1(pred, g["labels"], nodes)}


def _relative_error(approx, exact):
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


def backend_oracle_check(num_graphs=20, num_nodes=50, seed=0, scale=1.0, edge_prob=0.1,
                         cheb_order=CHEB_ORDER, arma_orders=(ARMA_P, ARMA_Q), arma_iters=ARMA_ITERS):
    """Relative Frobenius error of the Chebyshev and ARMA heat filters against the exact one."""
    grid = arma_grid()
    cheb = chebyshev_fit(lambda lam: np.exp(-scale * lam), cheb_order)
    arma = arma_fit(np.exp(-scale * grid), arma_orders[0], arma_orders[1], arma_iters, grid=grid)

    cheb_errors, arma_errors = [], []
    for i in range(num_graphs):
        g = random_graph(num_nodes, edge_prob=edge_prob, seed=seed + i)
        L = normalized_laplacian(g)
        spectrum = eigendecompose(L)
        exact = apply_filter_exact(spectrum, heat_response(scale, spectrum["eigenvalues"]))
        identity = np.eye(num_nodes)
        L_sparse = normalized_laplacian(g, sparse=True)
        cheb_errors.append(_relative_error(chebyshev_apply(L_sparse, cheb, identity), exact))
        arma_errors.append(_relative_error(arma_apply(L_sparse, arma, identity), exact))

    return {
        "graphs": num_graphs,
        "chebyshev_max_error": max(cheb_errors),
        "arma_max_error": max(arma_errors),
        "arma_fit_residual": arma["residual"],
    }
