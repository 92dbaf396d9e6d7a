import os
import sys
import json
import time
import logging
import argparse
from datetime import datetime

import numpy as np
from colorama import Fore, Style, init

import config
from config import OUTPUT_DIR, LOG_FILE, SPECTRUM_CACHE_DIR, GRID_CACHE_DIR, FREQUENCY_STEPS, WORKERS
from graphcore import load_graph, homophily, split_per_class
from model import prepare_graph, forward
from train import train, run_splits, grid_search, per_beta_accuracy, micro_f1, macro_f1
from experiments import (
    frequency_ablation_table,
    ablate_heads,
    density_sweep,
    export_filter_responses,
    heat_baseline,
    k_sweep,
    heterophilic_accuracy,
    backend_oracle_check,
)
import data_manager

init(autoreset=True)
logger = logging.getLogger(__name__)


def setup_logging(out_dir, verbose=False):
    data_manager.ensure_dir(out_dir)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(os.path.join(out_dir, LOG_FILE), encoding="utf-8"),
            logging.StreamHandler(sys.stderr),
        ],
        force=True,
    )


def _parse_list(raw, cast):
    return [cast(item) for item in raw.replace(",", " ").split()]


def _dataset_name(path):
    return os.path.splitext(os.path.basename(path))[0]


def build_config(args):
    overrides = {
        "backend": args.backend,
        "seed": args.seed,
        "max_epochs": args.epochs,
        "k": args.k,
        "heads": args.heads,
    }
    return config.load_config(args.config, overrides)


def load_inputs(args, need_split=True):
    logger.info(f"{Fore.CYAN}Step 1: Loading dataset {args.dataset}{Style.RESET_ALL}")
    g = load_graph(args.dataset)
    split = None
    if need_split:
        if args.split_file:
            split = data_manager.load_split(args.split_file, g["num_nodes"])
            logger.info(f"Using split file {args.split_file}")
        else:
            split = split_per_class(g, args.split_seed)
            logger.info(f"Generated per-class split with seed {args.split_seed}")
    return g, split


def load_or_train(args, g, split, cfg):
    if args.checkpoint and os.path.exists(args.checkpoint):
        logger.info(f"{Fore.CYAN}Loading checkpoint {args.checkpoint}{Style.RESET_ALL}")
        return data_manager.load_checkpoint(args.checkpoint)
    logger.info(f"{Fore.CYAN}No checkpoint given; training a model first{Style.RESET_ALL}")
    result = train(cfg, g, split, cache_dir=SPECTRUM_CACHE_DIR if args.cache else None)
    if args.checkpoint:
        data_manager.save_checkpoint(args.checkpoint, result["model"])
    return result["model"]


def cmd_train(args):
    cfg = build_config(args)
    g, split = load_inputs(args)
    name = _dataset_name(args.dataset)

    if args.runs > 1:
        if args.vary == "seeds":
            splits, seeds = [split], list(range(cfg["seed"], cfg["seed"] + args.runs))
        else:
            splits = [split_per_class(g, seed) for seed in range(args.split_seed, args.split_seed + args.runs)]
            seeds = None
        logger.info(f"{Fore.CYAN}Step 2: Training {args.runs} runs ({args.vary} vary){Style.RESET_ALL}")
        results, summary = run_splits(cfg, g, splits, seeds=seeds, workers=args.workers)
        for i, result in enumerate(results):
            data_manager.save_run_curves(os.path.join(args.out, f"{name}_{cfg['backend']}_run{i}.csv"), result)
    else:
        logger.info(f"{Fore.CYAN}Step 2: Training on {name} with the {cfg['backend']} backend{Style.RESET_ALL}")
        result = train(cfg, g, split, cache_dir=SPECTRUM_CACHE_DIR if args.cache else None)
        results = [result]
        summary = {
            "runs": 1,
            "micro_f1_mean": result["test_micro_f1"],
            "micro_f1_std": 0.0,
            "macro_f1_mean": result["test_macro_f1"],
            "macro_f1_std": 0.0,
            "best_epoch": result["best_epoch"],
            "wall_time": result["wall_time"],
        }
        data_manager.save_run_curves(os.path.join(args.out, f"{name}_{cfg['backend']}_curves.csv"), result)
        checkpoint = args.checkpoint or os.path.join(args.out, f"{name}_{cfg['backend']}.ckpt")
        data_manager.save_checkpoint(checkpoint, result["model"])
        summary["checkpoint"] = checkpoint

    records = [{
        "run_key": f"{name}|{cfg['backend']}|seed{r['seed']}|split{r['split_seed']}",
        "dataset": name,
        "backend": cfg["backend"],
        "best_epoch": r["best_epoch"],
        "test_micro_f1": r["test_micro_f1"],
        "test_macro_f1": r["test_macro_f1"],
        "wall_time": r["wall_time"],
        "timestamp": datetime.now().isoformat(timespec="seconds"),
    } for r in results]
    data_manager.save_results_with_versioning(records, args.out)

    logger.info(f"{Fore.GREEN}Micro-F1 {summary['micro_f1_mean'] * 100:.1f} ± {summary['micro_f1_std'] * 100:.1f}, "
                f"Macro-F1 {summary['macro_f1_mean'] * 100:.1f} ± {summary['macro_f1_std'] * 100:.1f}{Style.RESET_ALL}")
    return summary


def cmd_eval(args):
    cfg = build_config(args)
    g, split = load_inputs(args)
    model = load_or_train(args, g, split, cfg)
    ctx = prepare_graph(g, model["config"])
    pred = np.argmax(forward(model["config"], model["params"], ctx).data, axis=1)

    bins = per_beta_accuracy(model, g, split, ctx)
    rows = [[label, entry["count"], entry["accuracy"]] for label, entry in bins.items()]
    path = os.path.join(args.out, f"{_dataset_name(args.dataset)}_beta_accuracy.csv")
    data_manager.write_csv(path, ["bin", "count", "accuracy"], rows)

    return {
        "test_micro_f1": micro_f1(pred, g["labels"], split["test_mask"]),
        "test_macro_f1": macro_f1(pred, g["labels"], split["test_mask"]),
        "heterophilic": heterophilic_accuracy(model, g, split, ctx=ctx),
        "beta_bins": bins,
    }


def cmd_grid(args):
    cfg = build_config(args)
    g, split = load_inputs(args)
    space = config.load_grid(args.grid_file) if args.grid_file else config.SEARCH_GRID
    splits = [split] if args.runs <= 1 else [
        split_per_class(g, seed) for seed in range(args.split_seed, args.split_seed + args.runs)
    ]
    cache_dir = os.path.join(GRID_CACHE_DIR, _dataset_name(args.dataset)) if args.cache else None

    logger.info(f"{Fore.CYAN}Step 2: Grid search over {len(splits)} split(s){Style.RESET_ALL}")
    best, results = grid_search(space, g, splits, cfg, workers=args.workers, cache_dir=cache_dir,
                                grid_mode=args.strict_grid)

    keys = sorted(space)
    rows = [[r["config"][key] for key in keys] + [r["status"], r["score"], r["test_micro_f1"]] for r in results]
    data_manager.write_csv(os.path.join(args.out, f"{_dataset_name(args.dataset)}_grid.csv"),
                           keys + ["status", "val_score", "test_micro_f1"], rows)
    return {"best_config": {key: best[key] for key in keys}, "cells": len(results)}


def cmd_homophily(args):
    g, _ = load_inputs(args, need_split=False)
    start = time.time()
    report = homophily(g)
    rows = [[v, "" if np.isnan(b) else repr(float(b))] for v, b in enumerate(report["beta_v"])]
    data_manager.write_csv(os.path.join(args.out, f"{_dataset_name(args.dataset)}_homophily.csv"),
                           ["node", "beta_v"], rows)
    return {
        "beta": report["beta"] if report["defined"] else None,
        "defined": report["defined"],
        "bins": report["bins"],
        "seconds": time.time() - start,
    }


def cmd_split(args):
    g, _ = load_inputs(args, need_split=False)
    seed = args.seed if args.seed is not None else args.split_seed
    split = split_per_class(g, seed)
    path = os.path.join(args.out, f"{_dataset_name(args.dataset)}_split{seed}.txt")
    data_manager.save_split(path, split)
    return {
        "split_file": path,
        "train": int(split["train_mask"].sum()),
        "val": int(split["val_mask"].sum()),
        "test": int(split["test_mask"].sum()),
    }


def cmd_ablate_freq(args):
    cfg = build_config(args)
    g, split = load_inputs(args)
    model = load_or_train(args, g, split, cfg)
    rows = frequency_ablation_table(model, g, split, args.step)
    data_manager.write_csv(os.path.join(args.out, f"{_dataset_name(args.dataset)}_freq_step{args.step}.csv"),
                           ["lo", "hi", "points", "delta"], [[r["lo"], r["hi"], r["points"], r["delta"]] for r in rows])
    return {"step": args.step, "ranges": rows}


def cmd_ablate_heads(args):
    cfg = build_config(args)
    g, split = load_inputs(args)
    model = load_or_train(args, g, split, cfg)
    rows = ablate_heads(model, g, split, args.mode)
    data_manager.write_csv(os.path.join(args.out, f"{_dataset_name(args.dataset)}_heads_{args.mode}.csv"),
                           ["head", "delta"], [[r["head"], r["delta"]] for r in rows])
    return {"mode": args.mode, "heads": rows}


def cmd_density(args):
    cfg = build_config(args)
    g, split = load_inputs(args)
    rows = density_sweep(cfg, g, split, _parse_list(args.k_list, int))
    data_manager.write_csv(os.path.join(args.out, f"{_dataset_name(args.dataset)}_density.csv"),
                           ["k", "density", "epoch_time", "rss_mb"],
                           [[r["k"], r["density"], r["epoch_time"], r["rss_mb"]] for r in rows])
    return {"rows": rows}


def cmd_filters(args):
    cfg = build_config(args)
    g, split = load_inputs(args)
    model = load_or_train(args, g, split, cfg)
    path = os.path.join(args.out, f"{_dataset_name(args.dataset)}_filters.csv")
    header, rows = export_filter_responses(model, args.resolution, path)
    return {"csv": path, "heads": len(header) - 1, "rows": len(rows)}


def cmd_heat_baseline(args):
    cfg = build_config(args)
    g, split = load_inputs(args)
    result = heat_baseline(g, split, _parse_list(args.s_list, float), cfg)
    data_manager.write_csv(os.path.join(args.out, f"{_dataset_name(args.dataset)}_heat.csv"),
                           ["scale", "val_acc", "test_micro_f1", "test_macro_f1"],
                           [[r["scale"], r["val_acc"], r["test_micro_f1"], r["test_macro_f1"]]
                            for r in result["per_scale"]])
    return result


def cmd_k_sweep(args):
    cfg = build_config(args)
    g, split = load_inputs(args)
    splits = [split] if args.runs <= 1 else [
        split_per_class(g, seed) for seed in range(args.split_seed, args.split_seed + args.runs)
    ]
    rows = k_sweep(cfg, g, splits, _parse_list(args.k_list, int), workers=args.workers)
    data_manager.write_csv(os.path.join(args.out, f"{_dataset_name(args.dataset)}_k_sweep.csv"),
                           ["k", "micro_f1_mean", "micro_f1_std"],
                           [[r["k"], r["micro_f1_mean"], r["micro_f1_std"]] for r in rows])
    return {"rows": rows}


def cmd_oracle(args):
    result = backend_oracle_check(num_graphs=args.graphs, num_nodes=args.nodes, seed=args.seed or 0)
    result["passed"] = result["chebyshev_max_error"] <= 1e-3 and result["arma_max_error"] <= 2e-3
    return result


def build_parser():
    parser = argparse.ArgumentParser(description="Adaptive spectral graph attention: training and analysis")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", required=True, help="Canonical TSV dataset file")
    common.add_argument("--backend", choices=["exact", "cheb", "chebyshev", "arma", "heat"], default=None,
                        help="Filtering backend (overrides the config file)")
    common.add_argument("--config", default=None, help="Flat key=value config file")
    common.add_argument("--out", default=OUTPUT_DIR, help="Output directory for CSV, logs and checkpoints")
    common.add_argument("--seed", type=int, default=None, help="Training seed")
    common.add_argument("--split-seed", type=int, default=0, help="Seed for the generated per-class split")
    common.add_argument("--split-file", default=None, help="Split file with TRAIN/VAL/TEST index lines")
    common.add_argument("--checkpoint", default=None, help="Model checkpoint to load or write")
    common.add_argument("--epochs", type=int, default=None, help="Override max_epochs")
    common.add_argument("--k", type=int, default=None, help="Override the attention sparsity k")
    common.add_argument("--heads", type=int, default=None, help="Override the number of heads")
    common.add_argument("--workers", type=int, default=WORKERS, help="Parallel workers for multi-run commands")
    common.add_argument("--cache", action="store_true", help="Reuse cached spectra and grid cells")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="Train and evaluate a model")
    p.add_argument("--runs", type=int, default=1, help="Number of runs (mean ± std reported)")
    p.add_argument("--vary", choices=["splits", "seeds"], default="splits", help="What changes between runs")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint, including per-β accuracy")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("grid", parents=[common], help="Hyperparameter grid search")
    p.add_argument("--grid-file", default=None, help="Grid file of key=v1,v2 lines")
    p.add_argument("--runs", type=int, default=1, help="Number of splits per cell")
    p.add_argument("--strict-grid", action="store_true", help="Reject cells outside HYPERPARAMETER_GRID")
    p.set_defaults(handler=cmd_grid)

    p = sub.add_parser("homophily", parents=[common], help="Report β and β_v")
    p.set_defaults(handler=cmd_homophily)

    p = sub.add_parser("split", parents=[common], help="Write a per-class 60/20/20 split file (--seed picks the split)")
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("ablate-freq", parents=[common], help="Frequency-range ablation")
    p.add_argument("--step", type=float, choices=list(FREQUENCY_STEPS), default=1.0)
    p.set_defaults(handler=cmd_ablate_freq)

    p = sub.add_parser("ablate-heads", parents=[common], help="Attention-head ablation")
    p.add_argument("--mode", choices=["keep-one", "drop-one"], default="drop-one")
    p.set_defaults(handler=cmd_ablate_heads)

    p = sub.add_parser("density", parents=[common], help="Attention density and epoch time against k")
    p.add_argument("--k-list", default="1,2,4,8,16", help="Comma-separated k values")
    p.set_defaults(handler=cmd_density)

    p = sub.add_parser("filters", parents=[common], help="Export learned filter responses")
    p.add_argument("--resolution", type=int, default=201)
    p.set_defaults(handler=cmd_filters)

    p = sub.add_parser("heat-baseline", parents=[common], help="Fixed heat-kernel baseline")
    p.add_argument("--s-list", default="0.5,1,2,5", help="Comma-separated heat scales")
    p.set_defaults(handler=cmd_heat_baseline)

    p = sub.add_parser("k-sweep", parents=[common], help="Micro-F1 against k")
    p.add_argument("--k-list", default="3,6,9,12,15,18", help="Comma-separated k values")
    p.add_argument("--runs", type=int, default=1, help="Number of splits per k")
    p.set_defaults(handler=cmd_k_sweep)

    p = sub.add_parser("oracle", help="Check Chebyshev and ARMA heat filters against the exact backend")
    p.add_argument("--graphs", type=int, default=20)
    p.add_argument("--nodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=OUTPUT_DIR)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(handler=cmd_oracle)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.out, args.verbose)

    start_time = time.time()
    logger.info(f"{Fore.CYAN}Starting '{args.command}' at {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}{Style.RESET_ALL}")
    try:
        summary = args.handler(args)
        status = 0
        summary = {"command": args.command, "status": "ok", **summary}
        logger.info(f"{Fore.GREEN}'{args.command}' completed in {time.time() - start_time:.2f} seconds{Style.RESET_ALL}")
    except Exception as e:
        logger.error(f"{Fore.RED}'{args.command}' failed: {str(e)}{Style.RESET_ALL}")
        summary = {"command": args.command, "status": "error", "error": str(e)}
        status = 1

    print(json.dumps(summary, default=_json_default, sort_keys=True))
    return status


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


if __name__ == "__main__":
    sys.exit(main())
