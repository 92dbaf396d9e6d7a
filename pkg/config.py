import os
import logging

import psutil

logger = logging.getLogger(__name__)

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
OUTPUT_DIR = os.path.join(BASE_DIR, "runs")
SPECTRUM_CACHE_DIR = os.path.join(OUTPUT_DIR, "spectra")
GRID_CACHE_DIR = os.path.join(OUTPUT_DIR, "grid_cells")
LOG_FILE = "asgat.log"

# Normalized Laplacian spectra live in [0, 2]
LAMBDA_MAX = 2.0
SPECTRUM_TOL = 1e-8

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
JACOBI_MAX_NODES = 512  # above this the eigensolver falls back to LAPACK
EXACT_MAX_NODES = 5000

CHEB_ORDER = 15
ARMA_P = 12
ARMA_Q = 18
ARMA_ITERS = 30
ARMA_GRID_POINTS = 256
ARMA_STABILITY_GRID = 1024
ARMA_STABILITY_EPS = 1e-8
# min/max of D(lambda) on [0, 2] below this makes the CG solve ill-conditioned
ARMA_DENOMINATOR_SPREAD = 1e-3
CG_TOL = 1e-8
# wavelet entries within this relative distance of the k-th largest count as tied
TOPK_TIE_TOL = 1e-12

BACKENDS = ("exact", "chebyshev", "arma", "heat")
BACKEND_ALIASES = {"cheb": "chebyshev"}
HEAT_METHODS = ("exact", "chebyshev")

DEFAULT_TRAIN_CONFIG = {
    "lr": 0.005,
    "weight_decay": 0.0005,
    "dropout": 0.4,
    "hidden": 64,
    "heads": 8,
    "k": 12,
    "backend": "exact",
    "max_epochs": 2000,
    "patience": 100,
    "seed": 0,
    "mlp_hidden": 32,
    "cheb_order": CHEB_ORDER,
    "arma_p": ARMA_P,
    "arma_q": ARMA_Q,
    "arma_iters": ARMA_ITERS,
    "heat_scale": 1.0,
    "heat_method": "exact",
}

# Admissible values when a config is checked in grid mode
HYPERPARAMETER_GRID = {
    "lr": [1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2],
    "hidden": [32, 64, 128, 256, 512],
    "weight_decay": [1e-5, 1e-4, 1e-3],
    "heads": list(range(2, 19)),
    "dropout": [0.1, 0.2, 0.4, 0.6, 0.8],
    "k": list(range(3, 19)),
}

# Default cells for `grid` when no grid file is given
SEARCH_GRID = {
    "lr": [5e-3, 1e-2],
    "hidden": [64],
    "weight_decay": [1e-4, 1e-3],
    "heads": [4, 8],
    "dropout": [0.4],
    "k": [6, 12],
}

BETA_BIN_EDGES = (0.2, 0.4, 0.6, 0.8)
BETA_BIN_LABELS = ("(0.0,0.2]", "(0.2,0.4]", "(0.4,0.6]", "(0.6,0.8]", "(0.8,1.0]")
HETEROPHILY_THRESHOLD = 0.5

FREQUENCY_STEPS = (1.0, 0.5, 0.25)

TIMING_WARMUP_EPOCHS = 3
TIMING_MEASURE_EPOCHS = 5

PROGRESS_EVERY = 50

WORKERS = psutil.cpu_count(logical=False) or 1


def normalize_backend(name):
    name = BACKEND_ALIASES.get(name, name)
    if name not in BACKENDS:
        raise ValueError(f"Unknown backend '{name}', expected one of {', '.join(BACKENDS)}")
    return name


def _coerce(key, raw, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path=None, overrides=None):
    """Merge DEFAULT_TRAIN_CONFIG with a flat key=value file and explicit overrides."""
    cfg = dict(DEFAULT_TRAIN_CONFIG)

    if path:
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{line_number}: expected key=value, got '{line}'")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in DEFAULT_TRAIN_CONFIG:
                    raise ValueError(f"{path}:{line_number}: unknown config key '{key}'")
                try:
                    cfg[key] = _coerce(key, raw, DEFAULT_TRAIN_CONFIG[key])
                except ValueError:
                    raise ValueError(f"{path}:{line_number}: bad value for '{key}': '{raw}'")
        logger.info(f"Loaded config from {path}")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in DEFAULT_TRAIN_CONFIG:
            raise ValueError(f"Unknown config key '{key}'")
        cfg[key] = value

    cfg["backend"] = normalize_backend(cfg["backend"])
    if cfg["heat_method"] in BACKEND_ALIASES:
        cfg["heat_method"] = BACKEND_ALIASES[cfg["heat_method"]]
    if cfg["heat_method"] not in HEAT_METHODS:
        raise ValueError(f"Unknown heat method '{cfg['heat_method']}', expected one of {', '.join(HEAT_METHODS)}")
    return cfg


def load_grid(path):
    """Read a grid file of `key = v1, v2, ...` lines."""
    grid = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_number}: expected key=v1,v2,...")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULT_TRAIN_CONFIG:
                raise ValueError(f"{path}:{line_number}: unknown grid key '{key}'")
            default = DEFAULT_TRAIN_CONFIG[key]
            grid[key] = [_coerce(key, item.strip(), default) for item in raw.split(",") if item.strip()]
    return grid
