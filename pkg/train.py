import json
import hashlib
import logging
import time
import concurrent.futures

import numpy as np
from colorama import Fore, Style
from sklearn.metrics import f1_score
from sklearn.model_selection import ParameterGrid

from config import (
    BACKENDS,
    BETA_BIN_LABELS,
    HYPERPARAMETER_GRID,
    PROGRESS_EVERY,
    WORKERS,
    normalize_backend,
)
from graphcore import homophily, beta_bin_index, validate_split
from diffkernel import Adam, LogSoftmaxNLL, NonFiniteError
from model import prepare_graph, init_params, forward, validate_attention, context_key, ModelConfigError
import data_manager

logger = logging.getLogger(__name__)


class TrainingDivergedError(ArithmeticError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)


class ConfigError(ValueError):
    pass


class EarlyStopping:
    """Patience on validation loss and accuracy together.

    The counter resets whenever either metric reaches a new best. The
    selected epoch minimizes validation loss, breaking ties by higher
    validation accuracy and then by the earlier epoch.
    """

    def __init__(self, patience=100):
        self.patience = patience
        self.counter = 0
        self.best_loss = np.inf
        self.best_acc = -np.inf
        self.early_stop = False
        self.best_epoch = None
        self.selected_loss = None
        self.selected_acc = None

    def __call__(self, val_loss, val_acc, epoch):
        improved = False
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            improved = True
        if val_acc > self.best_acc:
            self.best_acc = val_acc
            improved = True

        if improved:
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.early_stop = True

        selected = (
            self.best_epoch is None
            or val_loss < self.selected_loss
            or (val_loss == self.selected_loss and val_acc > self.selected_acc)
        )
        if selected:
            self.best_epoch = epoch
            self.selected_loss = val_loss
            self.selected_acc = val_acc
        return selected


def _check_mask(pred, truth, mask):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction and truth lengths differ ({pred.size} vs {truth.size})")
    mask = np.ones(truth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot score an empty mask")
    return pred[mask], truth[mask]


def micro_f1(pred, truth, mask=None):
    pred, truth = _check_mask(pred, truth, mask)
    return float(f1_score(truth, pred, average="micro"))


def macro_f1(pred, truth, mask=None):
    pred, truth = _check_mask(pred, truth, mask)
    labels = np.union1d(pred, truth)
    return float(f1_score(truth, pred, labels=labels, average="macro", zero_division=0))


def accuracy(pred, truth, mask=None):
    pred, truth = _check_mask(pred, truth, mask)
    return float(np.mean(pred == truth))


def validate_train_config(cfg, grid_mode=False):
    cfg["backend"] = normalize_backend(cfg["backend"])
    if cfg["backend"] not in BACKENDS:
        raise ConfigError(f"unknown backend {cfg['backend']}")
    if cfg["heads"] < 1:
        raise ConfigError("heads must be at least 1")
    if cfg["k"] < 1:
        raise ConfigError("k must be at least 1")
    if not 0.0 <= cfg["dropout"] < 1.0:
        raise ConfigError("dropout must lie in [0, 1)")
    if cfg["lr"] <= 0 or cfg["weight_decay"] < 0:
        raise ConfigError("lr must be positive and weight_decay nonnegative")
    if cfg["max_epochs"] < 1 or cfg["patience"] < 1:
        raise ConfigError("max_epochs and patience must be positive")
    if cfg["backend"] == "heat" and cfg["heat_scale"] < 0:
        raise ConfigError("heat_scale must be nonnegative")

    if grid_mode:
        for key, allowed in HYPERPARAMETER_GRID.items():
            if cfg[key] not in allowed:
                raise ConfigError(f"{key}={cfg[key]} is outside the search space {allowed}")
    return cfg


def _nll(logits, labels, mask):
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.flatnonzero(mask)
    return float(-log_probs[rows, labels[rows]].mean())


def train_epoch(cfg, params, optimizer, ctx, split, rng, check_attention=True):
    """One full-graph Adam step; returns the training loss."""
    optimizer.zero_grad()
    logits, attention = forward(cfg, params, ctx, training=True, rng=rng, return_attention=True)
    if check_attention:
        for att in attention:
            validate_attention(att, k=cfg["k"])
    loss = LogSoftmaxNLL.apply(logits, labels=ctx["labels"], mask=split["train_mask"])
    loss.backward()
    optimizer.step()
    return float(loss.data)


def evaluate(model, g, split, ctx=None, mask="test_mask", **forward_kwargs):
    """Micro-F1 of a trained model on one split mask."""
    cfg = model["config"]
    ctx = ctx or prepare_graph(g, cfg)
    logits = forward(cfg, model["params"], ctx, **forward_kwargs).data
    return micro_f1(np.argmax(logits, axis=1), g["labels"], split[mask])


def train(cfg, g, split, ctx=None, check_attention=True, cache_dir=None):
    """Train one model; test metrics are taken at the selected epoch."""
    cfg = validate_train_config(dict(cfg))
    validate_split(split, g["num_nodes"])
    ctx = ctx or prepare_graph(g, cfg, cache_dir)

    rng = np.random.default_rng(cfg["seed"])
    params = init_params(cfg, g["features"].shape[1], g["class_count"], rng)
    optimizer = Adam(params, lr=cfg["lr"], weight_decay=cfg["weight_decay"])
    stopper = EarlyStopping(cfg["patience"])
    labels = g["labels"]

    val_mask = np.asarray(split["val_mask"], dtype=bool)
    if not val_mask.any():
        logger.warning(f"{Fore.YELLOW}Split has an empty validation set; selecting the epoch on the training nodes{Style.RESET_ALL}")
        val_mask = np.asarray(split["train_mask"], dtype=bool)

    curves = {"epoch": [], "train_loss": [], "val_loss": [], "val_acc": []}
    snapshot = None
    start_time = time.time()

    for epoch in range(cfg["max_epochs"]):
        try:
            train_loss = train_epoch(cfg, params, optimizer, ctx, split, rng, check_attention)
            logits = forward(cfg, params, ctx, training=False).data
        except NonFiniteError as e:
            raise TrainingDivergedError(f"training diverged at epoch {epoch}: {e}", epoch=epoch)
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(f"training loss is not finite at epoch {epoch}", epoch=epoch)

        pred = np.argmax(logits, axis=1)
        val_loss = _nll(logits, labels, val_mask)
        val_acc = accuracy(pred, labels, val_mask)

        curves["epoch"].append(epoch)
        curves["train_loss"].append(train_loss)
        curves["val_loss"].append(val_loss)
        curves["val_acc"].append(val_acc)

        if stopper(val_loss, val_acc, epoch):
            snapshot = {
                "params": {name: p.data.copy() for name, p in params.items()},
                "test_micro_f1": micro_f1(pred, labels, split["test_mask"]),
                "test_macro_f1": macro_f1(pred, labels, split["test_mask"]),
                "train_acc": accuracy(pred, labels, split["train_mask"]),
            }

        if (epoch + 1) % PROGRESS_EVERY == 0:
            logger.info(f"Epoch {epoch + 1}: train_loss={train_loss:.4f} val_loss={val_loss:.4f} val_acc={val_acc:.4f}")

        if stopper.early_stop:
            logger.info(f"{Fore.YELLOW}Early stopping at epoch {epoch} (selected epoch {stopper.best_epoch}){Style.RESET_ALL}")
            break

    wall_time = time.time() - start_time
    return {
        "best_epoch": stopper.best_epoch,
        "epochs_trained": len(curves["epoch"]),
        "test_micro_f1": snapshot["test_micro_f1"],
        "test_macro_f1": snapshot["test_macro_f1"],
        "train_acc": snapshot["train_acc"],
        "val_loss": stopper.selected_loss,
        "val_acc": stopper.selected_acc,
        "curves": curves,
        "wall_time": wall_time,
        "seed": cfg["seed"],
        "split_seed": split.get("seed"),
        "model": {"config": cfg, "params": snapshot["params"]},
    }


def summarize_runs(results):
    micro = np.array([r["test_micro_f1"] for r in results])
    macro = np.array([r["test_macro_f1"] for r in results])
    return {
        "runs": len(results),
        "micro_f1_mean": float(micro.mean()) if micro.size else float("nan"),
        "micro_f1_std": float(micro.std()) if micro.size else float("nan"),
        "macro_f1_mean": float(macro.mean()) if macro.size else float("nan"),
        "macro_f1_std": float(macro.std()) if macro.size else float("nan"),
    }


def run_splits(cfg, g, splits, seeds=None, workers=1, ctx=None):
    """Train once per (split, seed) pair in a worker pool.

    With ``seeds`` given, every seed runs on the first split (citation-style
    protocol); otherwise each split runs with the configured seed.
    """
    cfg = validate_train_config(dict(cfg))
    ctx = ctx or prepare_graph(g, cfg)
    if seeds is not None:
        jobs = [(splits[0], dict(cfg, seed=int(seed))) for seed in seeds]
    else:
        jobs = [(split, cfg) for split in splits]

    results = [None] * len(jobs)
    logger.info(f"Running {len(jobs)} trainings with {workers} workers")
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(train, job_cfg, g, split, ctx): i for i, (split, job_cfg) in enumerate(jobs)}
        done = 0
        for future in concurrent.futures.as_completed(futures):
            i = futures[future]
            try:
                results[i] = future.result()
                done += 1
                logger.info(f"Progress: {done}/{len(jobs)} runs finished "
                            f"(run {i}: micro-F1 {results[i]['test_micro_f1']:.4f})")
            except Exception as e:
                logger.error(f"{Fore.RED}Run {i} failed: {str(e)}{Style.RESET_ALL}")

    finished = [r for r in results if r is not None]
    return finished, summarize_runs(finished)


def cell_key(cell_cfg, splits):
    digest = hashlib.sha256(json.dumps(cell_cfg, sort_keys=True).encode("utf-8"))
    for split in splits:
        for name in ("train_mask", "val_mask", "test_mask"):
            digest.update(np.packbits(np.asarray(split[name], dtype=bool)).tobytes())
    return digest.hexdigest()[:20]


def _evaluate_cell(cell_cfg, g, splits, ctx):
    scores, micro, macro = [], [], []
    for split in splits:
        result = train(cell_cfg, g, split, ctx)
        scores.append(result["val_acc"])
        micro.append(result["test_micro_f1"])
        macro.append(result["test_macro_f1"])
    return {
        "config": cell_cfg,
        "status": "ok",
        "score": float(np.mean(scores)),
        "test_micro_f1": float(np.mean(micro)),
        "test_macro_f1": float(np.mean(macro)),
    }


def grid_search(space, g, splits, base_config, workers=WORKERS, cache_dir=None, grid_mode=False):
    """Evaluate every cell of ``space`` over ``splits``; the best mean validation accuracy wins.

    Ties go to the first cell in iteration order. Cells that fail or diverge
    score -inf. With ``cache_dir`` set, finished cells are stored and reused.
    """
    cells = [validate_train_config(dict(base_config, **cell), grid_mode) for cell in ParameterGrid(space)]
    if not cells:
        raise ConfigError("empty search space")

    contexts = {}
    for cell in cells:
        key = context_key(cell)
        if key not in contexts:
            contexts[key] = prepare_graph(g, cell)

    results = [None] * len(cells)
    pending = {}
    for i, cell in enumerate(cells):
        if cache_dir:
            cached = data_manager.load_grid_cell(cache_dir, cell_key(cell, splits))
            if cached is not None:
                results[i] = cached
                continue
        pending[i] = cell
    if cache_dir and len(pending) < len(cells):
        logger.info(f"{Fore.CYAN}Resuming grid: {len(cells) - len(pending)} of {len(cells)} cells cached{Style.RESET_ALL}")

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {
            executor.submit(_evaluate_cell, cell, g, splits, contexts[context_key(cell)]): i
            for i, cell in pending.items()
        }
        for future in concurrent.futures.as_completed(futures):
            i = futures[future]
            try:
                results[i] = future.result()
            except (TrainingDivergedError, ModelConfigError, ArithmeticError, ValueError) as e:
                logger.error(f"{Fore.RED}Grid cell {i} failed: {str(e)}{Style.RESET_ALL}")
                results[i] = {"config": cells[i], "status": "failed", "error": str(e),
                              "score": float("-inf"), "test_micro_f1": None, "test_macro_f1": None}
            if cache_dir:
                data_manager.save_grid_cell(cache_dir, cell_key(cells[i], splits), results[i])
            finished = sum(r is not None for r in results)
            if finished % 10 == 0 or finished == len(cells):
                logger.info(f"Progress: {finished}/{len(cells)} grid cells evaluated")

    best_index = 0
    for i, result in enumerate(results):
        if result["score"] > results[best_index]["score"]:
            best_index = i
    best = results[best_index]
    logger.info(f"{Fore.GREEN}Best cell {best_index}: score {best['score']:.4f}{Style.RESET_ALL}")
    return cells[best_index], results


def per_beta_accuracy(model, g, split, ctx=None):
    """Test accuracy per β_v bin; empty bins are left out."""
    cfg = model["config"]
    ctx = ctx or prepare_graph(g, cfg)
    pred = np.argmax(forward(cfg, model["params"], ctx).data, axis=1)
    report = homophily(g)
    beta_v = report["beta_v"]

    test = np.asarray(split["test_mask"], dtype=bool) & ~np.isnan(beta_v)
    nodes = np.flatnonzero(test)
    bins = beta_bin_index(beta_v[nodes])
    table = {}
    for index, label in enumerate(BETA_BIN_LABELS):
        members = nodes[bins == index]
        if members.size == 0:
            continue
        table[label] = {
            "count": int(members.size),
            "accuracy": float(np.mean(pred[members] == g["labels"][members])),
        }
    return table

