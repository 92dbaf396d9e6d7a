import numpy as np
import pytest

from graphcore import (
    GraphFormatError,
    GraphValidationError,
    SplitError,
    make_graph,
    to_undirected,
    load_graph,
    save_graph,
    adjacency_matrix,
    normalized_laplacian,
    homophily,
    beta_bin_index,
    split_per_class,
    validate_split,
    random_graph,
    relabel_nodes,
)


def write(tmp_path, text, name="g.tsv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_load_three_node_file(tmp_path):
    path = write(tmp_path, "3\t2\t2\n0\t0\t1 0\n1\t1\t0 1\n2\t0\t1 1\nEDGES\n0\t1\n1\t2\n")
    g = load_graph(path)
    assert g["num_nodes"] == 3
    assert g["class_count"] == 2
    assert g["edges"].tolist() == [[0, 1], [1, 2]]
    assert g["features"][2].tolist() == [1.0, 1.0]


def test_load_collapses_duplicates_and_drops_self_loops(tmp_path):
    path = write(tmp_path, "2\t1\t1\n0\t0\t0.5\n1\t0\t1.5\nEDGES\n0\t1\n1\t0\n1\t1\n")
    g = load_graph(path)
    assert g["edges"].tolist() == [[0, 1]]


def test_load_reports_line_number(tmp_path):
    path = write(tmp_path, "2\t1\t1\n0\t0\t0.5\n1\t0\tabc\nEDGES\n")
    with pytest.raises(GraphFormatError) as err:
        load_graph(path)
    assert err.value.line_number == 3


def test_load_rejects_non_utf8_bytes(tmp_path):
    path = tmp_path / "binary.tsv"
    path.write_bytes(b"2\t1\t1\n0\t0\t0.5\n\xff\xfe\x00\n")
    with pytest.raises(GraphFormatError, match="not valid UTF-8") as err:
        load_graph(str(path))
    assert err.value.line_number == 3


def test_load_rejects_out_of_range_edge(tmp_path):
    path = write(tmp_path, "2\t1\t1\n0\t0\t0.5\n1\t0\t1.5\nEDGES\n0\t5\n")
    with pytest.raises(GraphValidationError):
        load_graph(path)


def test_load_requires_edges_marker(tmp_path):
    path = write(tmp_path, "1\t1\t1\n0\t0\t0.5\n0\t0\n")
    with pytest.raises(GraphFormatError):
        load_graph(path)


def test_save_then_load_preserves_graph(tmp_path, two_cliques):
    path = str(tmp_path / "cliques.tsv")
    save_graph(two_cliques, path)
    loaded = load_graph(path)
    assert np.array_equal(loaded["edges"], two_cliques["edges"])
    assert np.array_equal(loaded["features"], two_cliques["features"])
    assert np.array_equal(loaded["labels"], two_cliques["labels"])


def test_graph_arrays_are_read_only(path3):
    with pytest.raises(ValueError):
        path3["features"][0, 0] = 5.0


def test_to_undirected():
    g = make_graph(2, [(1, 0)], np.zeros((2, 1)), [0, 0], undirected=False)
    assert to_undirected(g)["edges"].tolist() == [[0, 1]]

    both = make_graph(2, [(0, 1), (1, 0)], np.zeros((2, 1)), [0, 0], undirected=False)
    once = to_undirected(both)
    assert once["edges"].tolist() == [[0, 1]]
    assert np.array_equal(to_undirected(once)["edges"], once["edges"])


def test_laplacian_of_edgeless_graph_is_identity():
    g = make_graph(4, [], np.zeros((4, 1)), [0, 0, 0, 0])
    assert np.array_equal(normalized_laplacian(g), np.eye(4))


def test_laplacian_of_path(path3):
    L = normalized_laplacian(path3)
    expected = np.array([
        [1.0, -1 / np.sqrt(2), 0.0],
        [-1 / np.sqrt(2), 1.0, -1 / np.sqrt(2)],
        [0.0, -1 / np.sqrt(2), 1.0],
    ])
    assert np.allclose(L, expected, atol=1e-15)
    assert np.array_equal(L, L.T)


def test_laplacian_of_triangle(triangle):
    L = normalized_laplacian(triangle)
    assert np.allclose(L, np.eye(3) - 0.5 * (np.ones((3, 3)) - np.eye(3)))


def test_sparse_laplacian_matches_dense(random10):
    assert np.allclose(normalized_laplacian(random10, sparse=True).toarray(), normalized_laplacian(random10))


def test_isolated_node_keeps_identity_row():
    g = make_graph(3, [(0, 1)], np.zeros((3, 1)), [0, 0, 0])
    L = normalized_laplacian(g)
    assert L[2].tolist() == [0.0, 0.0, 1.0]
    assert adjacency_matrix(g).nnz == 2


def test_homophily_triangle_same_labels(triangle):
    report = homophily(triangle)
    assert report["defined"]
    assert report["beta"] == 1.0
    assert report["bins"]["(0.8,1.0]"] == 3


def test_homophily_star(star):
    report = homophily(star)
    assert report["beta"] == 0.0
    assert report["bins"]["0"] == 4


def test_homophily_bipartite_two_coloring_is_zero():
    edges = [(0, 1), (1, 2), (2, 3), (3, 0)]
    g = make_graph(4, edges, np.zeros((4, 1)), [0, 1, 0, 1])
    assert homophily(g)["beta"] == 0.0


def test_homophily_excludes_isolated_nodes():
    g = make_graph(4, [(0, 1)], np.zeros((4, 1)), [0, 0, 1, 1])
    report = homophily(g)
    assert report["beta"] == 1.0
    assert report["node_count"] == 2
    assert np.isnan(report["beta_v"][3])


def test_homophily_undefined_without_edges():
    g = make_graph(3, [], np.zeros((3, 1)), [0, 1, 0])
    report = homophily(g)
    assert not report["defined"]
    assert np.isnan(report["beta"])


def test_homophily_survives_undirected_closure(random10):
    assert homophily(to_undirected(random10))["beta"] == homophily(random10)["beta"]


def test_beta_bins():
    assert beta_bin_index([0.0, 0.2, 0.21, 0.4, 0.5, 0.8, 1.0]).tolist() == [0, 0, 1, 1, 2, 3, 4]


def test_split_single_class():
    g = make_graph(10, [], np.zeros((10, 1)), [0] * 10)
    split = split_per_class(g, seed=3)
    assert (split["train_mask"].sum(), split["val_mask"].sum(), split["test_mask"].sum()) == (6, 2, 2)
    again = split_per_class(g, seed=3)
    for key in ("train_mask", "val_mask", "test_mask"):
        assert np.array_equal(split[key], again[key])


def test_split_two_classes_of_five():
    labels = np.array([0] * 5 + [1] * 5)
    g = make_graph(10, [], np.zeros((10, 1)), labels)
    split = split_per_class(g, seed=0)
    for c in (0, 1):
        members = labels == c
        counts = [int((split[key] & members).sum()) for key in ("train_mask", "val_mask", "test_mask")]
        assert counts == [3, 1, 1]


@pytest.mark.parametrize("seed", range(5))
def test_split_masks_partition_nodes(seed):
    g = random_graph(40, class_count=3, seed=seed)
    split = split_per_class(g, seed)
    total = split["train_mask"].astype(int) + split["val_mask"] + split["test_mask"]
    assert np.all(total == 1)
    assert validate_split(split, 40)


def test_split_rejects_small_class():
    g = make_graph(5, [], np.zeros((5, 1)), [0, 0, 0, 1, 1])
    with pytest.raises(SplitError, match="class 1"):
        split_per_class(g, seed=0)


def test_relabel_nodes_permutes_edges(path3):
    g = relabel_nodes(path3, [2, 0, 1])
    assert sorted(map(tuple, g["edges"].tolist())) == [(0, 1), (0, 2)]
    assert g["labels"].tolist() == [1, 0, 0]
