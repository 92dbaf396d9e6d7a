import logging

import numpy as np
import scipy.sparse as sp

from config import BETA_BIN_EDGES, BETA_BIN_LABELS

logger = logging.getLogger(__name__)


class GraphFormatError(ValueError):
    """Malformed dataset file; carries the 1-based line number."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class GraphValidationError(ValueError):
    pass


class SplitError(ValueError):
    pass


def _freeze(array):
    array.setflags(write=False)
    return array


def _canonical_edges(edges):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    if edges.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    edges = np.sort(edges, axis=1)
    return np.unique(edges, axis=0)


def make_graph(num_nodes, edges, features, labels, class_count=None, undirected=True):
    """Validate raw arrays and build a Graph record.

    Edges are stored as an E×2 int array. With ``undirected=True`` pairs are
    canonical (u < v), sorted and unique, and self-loops are dropped.
    """
    num_nodes = int(num_nodes)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)

    if features.ndim == 1:
        features = features.reshape(num_nodes, -1)
    if features.shape[0] != num_nodes:
        raise GraphValidationError(f"features has {features.shape[0]} rows, expected {num_nodes}")
    if labels.shape != (num_nodes,):
        raise GraphValidationError(f"labels has {labels.size} entries, expected {num_nodes}")
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = edges[(edges < 0).any(axis=1) | (edges >= num_nodes).any(axis=1)][0]
        raise GraphValidationError(f"edge ({bad[0]}, {bad[1]}) has an endpoint outside [0, {num_nodes})")

    if class_count is None:
        class_count = int(labels.max()) + 1 if num_nodes else 0
    if num_nodes and (labels.min() < 0 or labels.max() >= class_count):
        raise GraphValidationError(f"labels must lie in [0, {class_count})")

    if undirected:
        edges = _canonical_edges(edges)
    else:
        edges = edges.copy()

    return {
        "num_nodes": num_nodes,
        "edges": _freeze(edges),
        "features": _freeze(features.copy()),
        "labels": _freeze(labels.copy()),
        "class_count": int(class_count),
    }


def to_undirected(g):
    edges = _canonical_edges(g["edges"])
    return dict(g, edges=_freeze(edges))


def load_graph(path, format="canonical-tsv"):
    if format != "canonical-tsv":
        raise ValueError(f"Unsupported graph format '{format}'")

    with open(path, "rb") as f:
        raw = f.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise GraphFormatError(f"file is not valid UTF-8: {e.reason}", raw[:e.start].count(b"\n") + 1)
    lines = text.split("\n")

    def fields(line_number, expected):
        parts = lines[line_number - 1].rstrip("\r").split("\t")
        if len(parts) != expected:
            raise GraphFormatError(f"expected {expected} tab-separated fields, got {len(parts)}", line_number)
        return parts

    if not lines or not lines[0].strip():
        raise GraphFormatError("missing header 'N<TAB>m<TAB>C'", 1)
    try:
        num_nodes, feature_dim, class_count = (int(x) for x in fields(1, 3))
    except ValueError:
        raise GraphFormatError("header fields must be integers", 1)
    if num_nodes < 0 or feature_dim < 0 or class_count < 1:
        raise GraphFormatError("header values out of range", 1)

    features = np.zeros((num_nodes, feature_dim))
    labels = np.full(num_nodes, -1, dtype=np.int64)
    seen = np.zeros(num_nodes, dtype=bool)

    line_number = 1
    for _ in range(num_nodes):
        line_number += 1
        if line_number > len(lines) or lines[line_number - 1].strip() == "EDGES":
            raise GraphFormatError(f"expected {num_nodes} node lines before EDGES", line_number)
        node_id, label, values = fields(line_number, 3)
        try:
            node_id = int(node_id)
            label = int(label)
            row = [float(x) for x in values.split()]
        except ValueError:
            raise GraphFormatError("node id, label and features must be numeric", line_number)
        if len(row) != feature_dim:
            raise GraphFormatError(f"expected {feature_dim} features, got {len(row)}", line_number)
        if not 0 <= node_id < num_nodes:
            raise GraphValidationError(f"line {line_number}: node id {node_id} outside [0, {num_nodes})")
        if seen[node_id]:
            raise GraphValidationError(f"line {line_number}: duplicate node id {node_id}")
        if not 0 <= label < class_count:
            raise GraphValidationError(f"line {line_number}: label {label} outside [0, {class_count})")
        seen[node_id] = True
        features[node_id] = row
        labels[node_id] = label

    line_number += 1
    if line_number > len(lines) or lines[line_number - 1].strip() != "EDGES":
        raise GraphFormatError("expected literal line 'EDGES'", line_number)

    edges = []
    self_loops = 0
    for line_number in range(line_number + 1, len(lines) + 1):
        if not lines[line_number - 1].strip():
            continue
        u, v = fields(line_number, 2)
        try:
            u, v = int(u), int(v)
        except ValueError:
            raise GraphFormatError("edge endpoints must be integers", line_number)
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise GraphValidationError(f"line {line_number}: edge ({u}, {v}) outside [0, {num_nodes})")
        if u == v:
            self_loops += 1
            continue
        edges.append((u, v))

    if self_loops:
        logger.info(f"Dropped {self_loops} self-loops from {path}")

    g = make_graph(num_nodes, edges, features, labels, class_count, undirected=False)
    g = to_undirected(g)
    logger.info(f"Loaded {path}: N={num_nodes}, |E|={len(g['edges'])}, m={feature_dim}, C={class_count}")
    return g


def save_graph(g, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{g['num_nodes']}\t{g['features'].shape[1]}\t{g['class_count']}\n")
        for v in range(g["num_nodes"]):
            row = " ".join(repr(float(x)) for x in g["features"][v])
            f.write(f"{v}\t{int(g['labels'][v])}\t{row}\n")
        f.write("EDGES\n")
        for u, v in g["edges"]:
            f.write(f"{int(u)}\t{int(v)}\n")
    logger.info(f"Saved graph with {g['num_nodes']} nodes to {path}")


def adjacency_matrix(g):
    n = g["num_nodes"]
    u, v = g["edges"][:, 0], g["edges"][:, 1]
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    A = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    A.sum_duplicates()
    A.data[:] = 1.0
    return A


def degrees(g):
    n = g["num_nodes"]
    u, v = g["edges"][:, 0], g["edges"][:, 1]
    return np.bincount(np.concatenate([u, v]), minlength=n).astype(np.float64)


def normalized_laplacian(g, sparse=False):
    """L = I - D^-1/2 A D^-1/2 with identity rows for isolated nodes."""
    n = g["num_nodes"]
    deg = degrees(g)
    dinv = np.zeros(n)
    dinv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])

    u, v = g["edges"][:, 0], g["edges"][:, 1]
    w = dinv[u] * dinv[v]

    if sparse:
        rows = np.concatenate([u, v, np.arange(n)])
        cols = np.concatenate([v, u, np.arange(n)])
        data = np.concatenate([-w, -w, np.ones(n)])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    L = np.eye(n)
    L[u, v] = -w
    L[v, u] = -w
    return L


def beta_bin_index(beta_v):
    """Map β_v values to the five bins (0,0.2],...,(0.8,1.0]; β_v = 0 lands in the first."""
    return np.searchsorted(np.asarray(BETA_BIN_EDGES), np.asarray(beta_v, dtype=np.float64), side="left")


def homophily(g):
    n = g["num_nodes"]
    labels = g["labels"]
    u, v = g["edges"][:, 0], g["edges"][:, 1]
    src = np.concatenate([u, v])
    dst = np.concatenate([v, u])

    deg = np.bincount(src, minlength=n)
    same = np.bincount(src, weights=(labels[src] == labels[dst]).astype(np.float64), minlength=n)

    has_neighbors = deg > 0
    beta_v = np.full(n, np.nan)
    beta_v[has_neighbors] = same[has_neighbors] / deg[has_neighbors]

    bins = {"0": 0}
    bins.update({label: 0 for label in BETA_BIN_LABELS})

    if not has_neighbors.any():
        logger.warning("Graph has no edges; homophily is undefined")
        return {"beta": float("nan"), "beta_v": beta_v, "bins": bins, "defined": False,
                "node_count": 0}

    observed = beta_v[has_neighbors]
    bins["0"] = int(np.sum(observed == 0))
    positive = observed[observed > 0]
    counts = np.bincount(beta_bin_index(positive), minlength=len(BETA_BIN_LABELS))
    for label, count in zip(BETA_BIN_LABELS, counts):
        bins[label] = int(count)

    return {
        "beta": float(observed.mean()),
        "beta_v": beta_v,
        "bins": bins,
        "defined": True,
        "node_count": int(has_neighbors.sum()),
    }


def split_per_class(g, seed):
    """Per-class 60/20/20 split: floor for train and val, remainder to test."""
    n = g["num_nodes"]
    labels = g["labels"]
    rng = np.random.default_rng(seed)

    train_mask = np.zeros(n, dtype=bool)
    val_mask = np.zeros(n, dtype=bool)
    test_mask = np.zeros(n, dtype=bool)

    for c in range(g["class_count"]):
        members = np.flatnonzero(labels == c)
        count = members.size
        if count == 0:
            continue
        if count < 3:
            raise SplitError(f"class {c} has only {count} member(s); at least 3 are required")
        members = rng.permutation(members)
        n_train = count * 3 // 5
        n_val = count // 5
        train_mask[members[:n_train]] = True
        val_mask[members[n_train:n_train + n_val]] = True
        test_mask[members[n_train + n_val:]] = True

    return {"train_mask": train_mask, "val_mask": val_mask, "test_mask": test_mask, "seed": seed}


def validate_split(split, num_nodes):
    masks = [np.asarray(split[name], dtype=bool) for name in ("train_mask", "val_mask", "test_mask")]
    for mask in masks:
        if mask.shape != (num_nodes,):
            raise SplitError(f"split masks must have length {num_nodes}")
    overlap = (masks[0] & masks[1]) | (masks[0] & masks[2]) | (masks[1] & masks[2])
    if overlap.any():
        raise SplitError(f"split masks overlap at node {int(np.flatnonzero(overlap)[0])}")
    if not masks[0].any():
        raise SplitError("split has an empty training set")
    return True


def random_graph(num_nodes, edge_prob=0.1, feature_dim=8, class_count=2, seed=0, connected=True):
    """Seeded Erdős–Rényi graph; ``connected`` adds a spanning path."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(num_nodes, k=1)
    keep = rng.random(iu.size) < edge_prob
    edges = np.column_stack([iu[keep], ju[keep]])
    if connected and num_nodes > 1:
        path = np.column_stack([np.arange(num_nodes - 1), np.arange(1, num_nodes)])
        edges = np.vstack([edges, path])
    features = rng.normal(size=(num_nodes, feature_dim))
    labels = rng.integers(0, class_count, size=num_nodes)
    return make_graph(num_nodes, edges, features, labels, class_count)


def relabel_nodes(g, permutation):
    """Node i of ``g`` becomes node permutation[i]."""
    perm = np.asarray(permutation, dtype=np.int64)
    n = g["num_nodes"]
    if sorted(perm.tolist()) != list(range(n)):
        raise GraphValidationError("permutation must be a rearrangement of 0..N-1")
    features = np.empty_like(g["features"])
    labels = np.empty_like(g["labels"])
    features[perm] = g["features"]
    labels[perm] = g["labels"]
    return make_graph(n, perm[g["edges"]], features, labels, g["class_count"])
