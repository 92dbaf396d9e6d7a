import json
import os

import numpy as np
import pytest

from graphcore import split_per_class
from model import init_params
from train import validate_train_config
import data_manager


def test_versioned_results_replace_same_run_key(tmp_path):
    out = str(tmp_path)
    data_manager.save_results_with_versioning([{"run_key": "a", "score": 0.1}, {"run_key": "b", "score": 0.2}], out)
    merged = data_manager.save_results_with_versioning([{"run_key": "a", "score": 0.9}], out)
    assert sorted((r["run_key"], r["score"]) for r in merged) == [("a", 0.9), ("b", 0.2)]

    with open(os.path.join(out, "results.json"), encoding="utf-8") as f:
        assert json.load(f) == merged
    versioned = [name for name in os.listdir(out) if name.startswith("results_")]
    assert len(versioned) == 2


def test_missing_results_file_loads_empty(tmp_path):
    assert data_manager.load_previous_results(str(tmp_path)) == []


def test_records_without_run_key_are_kept(tmp_path):
    out = str(tmp_path)
    data_manager.save_results_with_versioning([{"score": 1}], out)
    assert len(data_manager.save_results_with_versioning([{"score": 1}], out)) == 2


def test_csv_with_summary_line(tmp_path):
    path = str(tmp_path / "nested" / "table.csv")
    data_manager.write_csv(path, ["k", "value"], [[1, 0.5], [2, 0.25]], summary={"mean": 0.375})
    header, rows = data_manager.read_csv(path)
    assert header == ["k", "value"]
    assert rows == [["1", "0.5"], ["2", "0.25"]]
    with open(path, encoding="utf-8") as f:
        assert f.read().splitlines()[-1] == '# summary {"mean": 0.375}'


def test_run_curves_file(tmp_path):
    run = {
        "curves": {"epoch": [0, 1], "train_loss": [0.7, 0.6], "val_loss": [0.8, 0.75], "val_acc": [0.5, 1.0]},
        "best_epoch": 1,
        "test_micro_f1": 1.0,
        "test_macro_f1": 1.0,
        "wall_time": 0.01,
    }
    path = str(tmp_path / "curves.csv")
    data_manager.save_run_curves(path, run)
    header, rows = data_manager.read_csv(path)
    assert header == ["epoch", "train_loss", "val_loss", "val_acc"]
    assert rows[1] == ["1", "0.6", "0.75", "1.0"]


def test_split_round_trip(tmp_path, two_cliques):
    split = split_per_class(two_cliques, 4)
    path = str(tmp_path / "split.txt")
    data_manager.save_split(path, split)
    loaded = data_manager.load_split(path, 10)
    for key in ("train_mask", "val_mask", "test_mask"):
        assert np.array_equal(loaded[key], split[key])


def test_split_file_errors(tmp_path):
    path = tmp_path / "split.txt"
    path.write_text("TRAIN\n0 1\nVAL\n2\nTEST\n9\n", encoding="utf-8")
    with pytest.raises(ValueError, match="index outside"):
        data_manager.load_split(str(path), 5)
    path.write_text("TRAIN\n0 1\nTEST\n2\nVAL\n3\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 3"):
        data_manager.load_split(str(path), 5)
    path.write_text("TRAIN\n0 1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="6 lines"):
        data_manager.load_split(str(path), 5)


def test_checkpoint_round_trip_is_exact(tmp_path, small_config):
    cfg = validate_train_config(dict(small_config))
    params = init_params(cfg, 5, 3, np.random.default_rng(0))
    model = {"config": cfg, "params": params}
    path = str(tmp_path / "ckpt" / "model.txt")
    data_manager.save_checkpoint(path, model)
    loaded = data_manager.load_checkpoint(path)

    assert loaded["config"] == json.loads(json.dumps(cfg))
    assert list(loaded["params"]) == list(params)
    for name, value in params.items():
        assert np.array_equal(loaded["params"][name], value.data)
    assert data_manager.params_checksum(loaded["params"]) == data_manager.params_checksum(params)


def test_checkpoint_value_count_mismatch(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text('config\t{}\nparam\tW\t2x2\nVALUES\n1.0 2.0 3.0\n', encoding="utf-8")
    with pytest.raises(data_manager.CheckpointError, match="3 values"):
        data_manager.load_checkpoint(str(path))


@pytest.mark.parametrize("text", [
    "config\t{}\nparam\tW\t2x2\n",
    "config\t{}\nparam\tW\t2x2\nVALUES",
    "config\t{}\nparam\tW\t2xtwo\nVALUES\n1 2 3 4\n",
    "",
])
def test_truncated_checkpoint_raises_checkpoint_error(tmp_path, text):
    path = tmp_path / "truncated.txt"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(data_manager.CheckpointError):
        data_manager.load_checkpoint(str(path))


def test_binary_checkpoint_raises_checkpoint_error(tmp_path):
    path = tmp_path / "binary.txt"
    path.write_bytes(b"\xff\xfe\x00config")
    with pytest.raises(data_manager.CheckpointError):
        data_manager.load_checkpoint(str(path))


def test_checksum_sees_single_value_change():
    params = {"W": np.zeros((2, 2))}
    changed = {"W": np.array([[0.0, 0.0], [0.0, 1e-300]])}
    assert data_manager.params_checksum(params) != data_manager.params_checksum(changed)


def test_spectrum_cache(tmp_path):
    spectrum = {"eigenvalues": np.array([0.0, 1.0 / 3.0, 1.5]), "basis": np.linalg.qr(np.arange(9.0).reshape(3, 3) + np.eye(3))[0]}
    cache = str(tmp_path / "spectra")
    assert data_manager.load_spectrum(cache, "g") is None
    data_manager.save_spectrum(cache, "g", spectrum)
    loaded = data_manager.load_spectrum(cache, "g")
    assert np.array_equal(loaded["eigenvalues"], spectrum["eigenvalues"])
    assert np.array_equal(loaded["basis"], spectrum["basis"])


def test_unreadable_spectrum_cache_is_ignored(tmp_path):
    (tmp_path / "g.spectrum").write_text("not a number\n", encoding="utf-8")
    assert data_manager.load_spectrum(str(tmp_path), "g") is None


def test_grid_cell_cache(tmp_path):
    cache = str(tmp_path)
    assert data_manager.load_grid_cell(cache, "cell") is None
    data_manager.save_grid_cell(cache, "cell", {"score": 0.5, "status": "ok"})
    assert data_manager.load_grid_cell(cache, "cell") == {"score": 0.5, "status": "ok"}
    (tmp_path / "broken.json").write_text("{", encoding="utf-8")
    assert data_manager.load_grid_cell(cache, "broken") is None


def test_chebyshev_coefficients_round_trip(tmp_path):
    fit = {"coeffs": np.arange(6.0).reshape(3, 2) / 7.0}
    path = str(tmp_path / "cheb.txt")
    data_manager.save_filter_coefficients(path, fit)
    assert np.array_equal(data_manager.load_filter_coefficients(path)["c"], fit["coeffs"])
