import numpy as np
import pytest

from conftest import one_hot
from graphcore import random_graph, split_per_class
from model import prepare_graph, init_params, dense_attention
from train import validate_train_config, train
from experiments import (
    AblationError,
    frequency_tiling,
    ablate_frequency,
    frequency_ablation_table,
    ablate_heads,
    density_sweep,
    attention_density,
    export_filter_responses,
    heat_baseline,
    k_sweep,
    heterophilic_accuracy,
    backend_oracle_check,
)
import data_manager
import experiments


@pytest.fixture
def graph():
    g = random_graph(20, edge_prob=0.2, feature_dim=4, class_count=2, seed=3)
    return dict(g, features=np.hstack([g["features"], one_hot(g["labels"])]))


@pytest.fixture
def split(graph):
    return split_per_class(graph, 0)


@pytest.fixture
def model(graph, small_config):
    cfg = validate_train_config(dict(small_config, heads=3))
    params = init_params(cfg, graph["features"].shape[1], 2, np.random.default_rng(0))
    return {"config": cfg, "params": {name: p.data for name, p in params.items()}}


def test_frequency_tiling_covers_spectrum():
    for step in (1.0, 0.5, 0.25):
        ranges = frequency_tiling(step)
        assert ranges[0][0] == 0.0
        assert ranges[-1][1] == 2.0
        assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))
    with pytest.raises(AblationError):
        frequency_tiling(0.3)


def test_tiling_zeroes_each_eigenvalue_once(graph, model):
    ctx = prepare_graph(graph, model["config"])
    rows = frequency_ablation_table(model, graph, split_per_class(graph, 0), 0.25, ctx)
    assert sum(row["points"] for row in rows) == graph["num_nodes"]


def test_empty_frequency_range_has_no_effect(graph, split, model):
    assert ablate_frequency(model, graph, split, 1.0, 1.0) == 0.0


def test_full_frequency_range_runs(graph, split, model):
    delta = ablate_frequency(model, graph, split, 0.0, 2.0)
    assert -1.0 <= delta <= 1.0


def test_invalid_frequency_range(graph, split, model):
    with pytest.raises(AblationError):
        ablate_frequency(model, graph, split, 1.5, 0.5)


def test_ablation_leaves_parameters_untouched(graph, split, model):
    before = data_manager.params_checksum(model["params"])
    ablate_frequency(model, graph, split, 1.0, 2.0)
    ablate_heads(model, graph, split, "drop-one")
    ablate_heads(model, graph, split, "keep-one")
    assert data_manager.params_checksum(model["params"]) == before


def test_drop_one_reports_every_head(graph, split, model):
    rows = ablate_heads(model, graph, split, "drop-one")
    assert [row["head"] for row in rows] == [0, 1, 2]
    assert all(-1.0 <= row["delta"] <= 1.0 for row in rows)


def test_drop_none_returns_zero(graph, split, model):
    ablate_heads(model, graph, split, "drop-one")
    assert ablate_heads(model, graph, split, "none") == [{"head": None, "delta": 0.0}]


def test_keep_one_with_single_head(graph, split, small_config):
    cfg = validate_train_config(dict(small_config, heads=1))
    params = init_params(cfg, graph["features"].shape[1], 2, np.random.default_rng(0))
    single = {"config": cfg, "params": params}
    assert ablate_heads(single, graph, split, "keep-one") == [{"head": 0, "delta": 0.0}]


def test_unknown_head_mode(graph, split, model):
    with pytest.raises(AblationError):
        ablate_heads(model, graph, split, "shuffle")


def test_density_sweep(graph, split, small_config):
    rows = density_sweep(dict(small_config, backend="heat"), graph, split, [1, 4, 20])
    n = graph["num_nodes"]
    assert [row["k"] for row in rows] == [1, 4, 20]
    assert rows[0]["density"] == pytest.approx(1.0 / n)
    assert rows[-1]["density"] == 1.0
    assert all(a["density"] <= b["density"] for a, b in zip(rows, rows[1:]))
    assert all(row["epoch_time"] > 0 and row["rss_mb"] > 0 for row in rows)


def test_density_sweep_times_one_cell_at_a_time(monkeypatch, graph, split, small_config):
    active, peak, order = [0], [0], []
    timed_cell = experiments._density_cell

    def tracking_cell(cfg, g, split, k, ctx):
        active[0] += 1
        peak[0] = max(peak[0], active[0])
        order.append(k)
        try:
            return timed_cell(cfg, g, split, k, ctx)
        finally:
            active[0] -= 1

    monkeypatch.setattr(experiments, "_density_cell", tracking_cell)
    density_sweep(dict(small_config, backend="heat"), graph, split, [6, 2, 4])
    assert peak[0] == 1
    assert order == [6, 2, 4]


def test_attention_density_counts_nonzero_weights():
    att = dense_attention(np.array([
        [[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.2, 0.3, 0.5]],
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    ]))
    assert attention_density(att) == pytest.approx((6 + 3) / (2 * 9))


def test_density_sweep_rejects_large_k(graph, split, small_config):
    with pytest.raises(AblationError):
        density_sweep(small_config, graph, split, [21])


def test_filter_export_grid_and_zero_model(tmp_path, model):
    params = {name: np.zeros_like(value) for name, value in model["params"].items()}
    path = str(tmp_path / "filters.csv")
    header, rows = export_filter_responses(dict(model, params=params), 5, path)
    assert header == ["lambda", "head_0", "head_1", "head_2"]
    assert rows[:, 0].tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert np.all(rows[:, 1:] == 0.0)
    assert data_manager.read_csv(path)[0] == header


def test_filter_export_heat_backend(small_config):
    cfg = validate_train_config(dict(small_config, backend="heat", heat_scale=2.0, heads=2))
    _, rows = export_filter_responses({"config": cfg, "params": {}}, 9)
    assert np.allclose(rows[:, 1], np.exp(-2.0 * rows[:, 0]))
    assert np.array_equal(rows[:, 1], rows[:, 2])


def test_heat_baseline_picks_a_scale(graph, split, small_config):
    result = heat_baseline(graph, split, [0.0, 1.0], dict(small_config, max_epochs=20))
    assert result["best_scale"] in (0.0, 1.0)
    assert len(result["per_scale"]) == 2
    assert 0.0 <= result["best_micro_f1"] <= 1.0


def test_heat_baseline_needs_scales(graph, split, small_config):
    with pytest.raises(AblationError):
        heat_baseline(graph, split, [], small_config)


def test_k_sweep(graph, small_config):
    splits = [split_per_class(graph, seed) for seed in range(2)]
    rows = k_sweep(dict(small_config, backend="heat", max_epochs=10), graph, splits, [2, 5], workers=2)
    assert [row["k"] for row in rows] == [2, 5]
    assert all(0.0 <= row["micro_f1_mean"] <= 1.0 for row in rows)


def test_heterophilic_accuracy(graph, split, small_config):
    result = train(dict(small_config, backend="heat", max_epochs=20), graph, split)
    report = heterophilic_accuracy(result["model"], graph, split)
    if report["count"]:
        assert 0.0 <= report["accuracy"] <= 1.0
    else:
        assert report["accuracy"] is None


def test_backend_oracle_small():
    result = backend_oracle_check(num_graphs=2, num_nodes=30, seed=1)
    assert result["graphs"] == 2
    assert result["chebyshev_max_error"] <= 1e-3
    assert result["arma_max_error"] <= 2e-3
