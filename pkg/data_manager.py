import os
import csv
import json
import hashlib
import logging
from datetime import datetime

import numpy as np

from config import OUTPUT_DIR

logger = logging.getLogger(__name__)


class CheckpointError(ValueError):
    pass


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except Exception as e:
        logger.error(f"Error creating output directory {path}: {str(e)}")
        raise
    return path


# Run summaries

def load_previous_results(output_dir=OUTPUT_DIR, base_filename="results"):
    file_path = os.path.join(output_dir, f"{base_filename}.json")
    if os.path.exists(file_path):
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                data = json.load(f)
                logger.info(f"Loaded {len(data)} previous run summaries")
                return data
        except Exception as e:
            logger.error(f"Error loading previous results: {str(e)}")
    return []


def is_duplicate_run(new_run, existing_runs):
    key = new_run.get("run_key")
    return key is not None and any(run.get("run_key") == key for run in existing_runs)


def save_results_with_versioning(records, output_dir=OUTPUT_DIR, base_filename="results"):
    """Write a timestamped copy and merge into ``<base_filename>.json``.

    A record whose ``run_key`` already exists replaces the older entry.
    """
    ensure_dir(output_dir)
    current_time = datetime.now().strftime("%Y%m%d_%H%M%S_%f")

    versioned_filename = f"{base_filename}_{current_time}.json"
    with open(os.path.join(output_dir, versioned_filename), "w", encoding="utf-8") as f:
        json.dump(records, f, indent=2)
    logger.info(f"Current results saved to {versioned_filename}")

    main_path = os.path.join(output_dir, f"{base_filename}.json")
    previous_results = load_previous_results(output_dir, base_filename)

    merged = [run for run in previous_results if not is_duplicate_run(run, records)]
    replaced = len(previous_results) - len(merged)
    merged.extend(records)

    with open(main_path, "w", encoding="utf-8") as f:
        json.dump(merged, f, indent=2)
    logger.info(f"Updated {base_filename}.json with {len(records)} runs ({replaced} replaced, total {len(merged)})")
    return merged


# CSV

def write_csv(path, header, rows, summary=None):
    directory = os.path.dirname(path)
    if directory:
        ensure_dir(directory)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
        if summary is not None:
            f.write(f"# summary {json.dumps(summary, sort_keys=True)}\n")
    logger.info(f"Wrote {len(rows)} rows to {path}")


def read_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [row for row in reader]


def save_run_curves(path, run_result):
    curves = run_result["curves"]
    rows = list(zip(curves["epoch"], curves["train_loss"], curves["val_loss"], curves["val_acc"]))
    summary = {
        "best_epoch": run_result["best_epoch"],
        "test_micro_f1": run_result["test_micro_f1"],
        "test_macro_f1": run_result["test_macro_f1"],
        "wall_time": run_result["wall_time"],
    }
    write_csv(path, ["epoch", "train_loss", "val_loss", "val_acc"], rows, summary=summary)


# Splits

def save_split(path, split):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for name, key in (("TRAIN", "train_mask"), ("VAL", "val_mask"), ("TEST", "test_mask")):
            f.write(f"{name}\n")
            f.write(" ".join(str(i) for i in np.flatnonzero(split[key])) + "\n")
    logger.info(f"Saved split to {path}")


def load_split(path, num_nodes):
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.strip() for line in f.read().split("\n")]
    while lines and not lines[-1]:
        lines.pop()

    split = {"seed": None}
    expected = (("TRAIN", "train_mask"), ("VAL", "val_mask"), ("TEST", "test_mask"))
    if len(lines) != 6:
        raise ValueError(f"{path}: split file must have 6 lines (TRAIN/VAL/TEST headers and index lines)")
    for i, (name, key) in enumerate(expected):
        if lines[2 * i] != name:
            raise ValueError(f"{path}: line {2 * i + 1} should be '{name}'")
        indices = np.array([int(x) for x in lines[2 * i + 1].split()], dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= num_nodes):
            raise ValueError(f"{path}: {name} index outside [0, {num_nodes})")
        mask = np.zeros(num_nodes, dtype=bool)
        mask[indices] = True
        split[key] = mask
    return split


# Checkpoints

def save_checkpoint(path, model):
    """Text checkpoint: config line, one shape line per parameter, then row-major values."""
    directory = os.path.dirname(path)
    if directory:
        ensure_dir(directory)
    params = model["params"]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"config\t{json.dumps(model['config'], sort_keys=True)}\n")
        for name, value in params.items():
            value = np.asarray(getattr(value, "data", value))
            shape = "x".join(str(d) for d in value.shape) or "scalar"
            f.write(f"param\t{name}\t{shape}\n")
        f.write("VALUES\n")
        for name, value in params.items():
            value = np.asarray(getattr(value, "data", value))
            f.write(" ".join(repr(float(x)) for x in value.ravel()) + "\n")
    logger.info(f"Saved checkpoint with {len(params)} parameters to {path}")


def load_checkpoint(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().split("\n")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: not a text checkpoint ({e})")

    if not lines[0].startswith("config\t"):
        raise CheckpointError(f"{path}: missing config header")
    try:
        config = json.loads(lines[0].split("\t", 1)[1])

        shapes = []
        line_number = 1
        while lines[line_number] != "VALUES":
            _, name, shape = lines[line_number].split("\t")
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            shapes.append((name, dims))
            line_number += 1

        params = {}
        for offset, (name, dims) in enumerate(shapes):
            raw = lines[line_number + 1 + offset].split()
            values = np.array([float(x) for x in raw], dtype=np.float64)
            if values.size != int(np.prod(dims, dtype=np.int64)):
                raise CheckpointError(f"{path}: parameter {name} has {values.size} values for shape {dims}")
            params[name] = values.reshape(dims)
    except CheckpointError:
        raise
    except (IndexError, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or malformed checkpoint ({e})")
    return {"config": config, "params": params}


def params_checksum(params):
    digest = hashlib.sha256()
    for name in sorted(params):
        value = np.ascontiguousarray(getattr(params[name], "data", params[name]), dtype=np.float64)
        digest.update(name.encode("utf-8"))
        digest.update(value.tobytes())
    return digest.hexdigest()


# Spectrum cache

def save_spectrum(cache_dir, key, spectrum):
    ensure_dir(cache_dir)
    path = os.path.join(cache_dir, f"{key}.spectrum")
    eigenvalues, basis = spectrum["eigenvalues"], spectrum["basis"]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{eigenvalues.size}\n")
        f.write(" ".join(repr(float(x)) for x in eigenvalues) + "\n")
        for row in basis:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")
    logger.debug(f"Cached spectrum at {path}")


def load_spectrum(cache_dir, key):
    path = os.path.join(cache_dir, f"{key}.spectrum")
    if not os.path.exists(path):
        return None
    try:
        with open(path, "r", encoding="utf-8") as f:
            n = int(f.readline())
            eigenvalues = np.array([float(x) for x in f.readline().split()])
            basis = np.array([[float(x) for x in f.readline().split()] for _ in range(n)]).reshape(n, n)
        return {"eigenvalues": eigenvalues, "basis": basis}
    except Exception as e:
        logger.error(f"Ignoring unreadable spectrum cache {path}: {str(e)}")
        return None


# Grid cells

def save_grid_cell(cache_dir, key, result):
    ensure_dir(cache_dir)
    with open(os.path.join(cache_dir, f"{key}.json"), "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2)


def load_grid_cell(cache_dir, key):
    path = os.path.join(cache_dir, f"{key}.json")
    if not os.path.exists(path):
        return None
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except Exception as e:
        logger.error(f"Ignoring unreadable grid cell {path}: {str(e)}")
        return None


# Filter coefficients

def save_filter_coefficients(path, fit):
    """One line per head and coefficient kind: ``head<TAB>kind<TAB>values``."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if "coeffs" in fit:
            blocks = [("c", fit["coeffs"])]
        else:
            blocks = [("a", fit["denominator"]), ("b", fit["numerator"])]
        heads = blocks[0][1].shape[1]
        for h in range(heads):
            for kind, coeffs in blocks:
                f.write(f"{h}\t{kind}\t" + " ".join(repr(float(x)) for x in coeffs[:, h]) + "\n")
    logger.info(f"Saved filter coefficients to {path}")


def load_filter_coefficients(path):
    columns = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            head, kind, values = line.rstrip("\n").split("\t")
            columns.setdefault(kind, {})[int(head)] = [float(x) for x in values.split()]
    return {kind: np.column_stack([by_head[h] for h in sorted(by_head)]) for kind, by_head in columns.items()}
