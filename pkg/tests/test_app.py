import json

import numpy as np
import pytest
from click.testing import CliRunner

from archdoor import __version__
from archdoor.app import main
from archdoor.graph import validate
from archdoor.miscellaneous import get_asset_path
from archdoor.serialization import load_params, read_graph

TINY_DATASET = {"kind": "synthetic", "num_classes": 3, "n_train": 24, "n_test": 12}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_dataset(tmp_path):
    path = tmp_path / "dataset.json"
    path.write_text(json.dumps(TINY_DATASET), encoding="utf-8")
    return path


@pytest.fixture
def clean_graph(runner, tmp_path):
    path = tmp_path / "clean.archjson"
    result = runner.invoke(
        main,
        [
            "build", "--arch", "alexnet-small", "--classes", "4", "--width", "0.0625",
            "-o", str(path),
        ],
    )
    assert result.exit_code == 0, result.output
    return path


def test_version(runner):
    result = runner.invoke(main, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_build_writes_a_valid_graph(clean_graph):
    graph = read_graph(clean_graph)
    assert graph.name == "alexnet-small"
    assert validate(graph) == []


def test_build_rejects_bad_shapes(runner, tmp_path):
    result = runner.invoke(
        main,
        ["build", "--arch", "vgg11", "--input-shape", "3,x", "-o", str(tmp_path / "g.archjson")],
    )
    assert result.exit_code == 2


def test_scan_exit_codes(runner, clean_graph, tmp_path):
    injected = tmp_path / "injected.archjson"
    result = runner.invoke(
        main, ["inject", str(clean_graph), "--mode", "naive", "-o", str(injected)]
    )
    assert result.exit_code == 0, result.output

    assert runner.invoke(main, ["scan", str(clean_graph)]).exit_code == 0
    result = runner.invoke(main, ["scan", str(injected)])
    assert result.exit_code == 3
    assert "suspicious" in result.output
    assert runner.invoke(main, ["scan", str(clean_graph), str(injected)]).exit_code == 3

    broken = tmp_path / "broken.archjson"
    broken.write_text("{", encoding="utf-8")
    assert runner.invoke(main, ["scan", str(broken)]).exit_code == 1
    assert runner.invoke(main, ["scan", str(tmp_path / "missing.archjson")]).exit_code == 2


def test_scan_json_output(runner, clean_graph):
    result = runner.invoke(main, ["-q", "scan", "--json", str(clean_graph)])
    assert result.exit_code == 0
    document = json.loads(result.output)
    assert document["verdict"] == "clean"
    assert document["file"] == str(clean_graph)


def test_scan_params_need_a_single_graph(runner, clean_graph, tmp_path):
    result = runner.invoke(
        main, ["scan", "--params", str(tmp_path / "p.npz"), str(clean_graph), str(clean_graph)]
    )
    assert result.exit_code == 2


def test_inject_without_adaptive_pool_fails(runner, tmp_path):
    result = runner.invoke(
        main,
        ["inject", str(get_asset_path("identity.archjson")), "-o", str(tmp_path / "x.archjson")],
    )
    assert result.exit_code == 1
    assert "adaptive-avg-pool" in result.output


def test_poison_writes_a_manifest(runner, tiny_dataset, tmp_path):
    manifest_path = tmp_path / "manifest.json"
    images_path = tmp_path / "poisoned.npz"
    result = runner.invoke(
        main,
        [
            "poison",
            "--dataset", str(tiny_dataset),
            "--fraction", "0.25",
            "--target", "2",
            "--seed", "3",
            "--pattern", "white-box",
            "--images", str(images_path),
            "-o", str(manifest_path),
        ],
    )
    assert result.exit_code == 0, result.output
    manifest = json.loads(manifest_path.read_text())
    assert manifest["count"] == 6
    assert manifest["indices"] == sorted(manifest["indices"])
    assert manifest["poisoned_labels"] == [2] * 6
    assert manifest["poison"]["trigger"]["pattern"] == "white-box"
    with np.load(images_path) as archive:
        assert archive["images"].shape == (24, 3, 32, 32)
        assert np.all(archive["images"][manifest["indices"], :, 29:, :3] == 1.0)


def test_poison_rejects_tiny_fractions(runner, tiny_dataset, tmp_path):
    result = runner.invoke(
        main,
        ["poison", "--dataset", str(tiny_dataset), "--fraction", "0.01", "-o", str(tmp_path)],
    )
    assert result.exit_code == 1


def test_train_writes_model_files(runner, tmp_path):
    config = tmp_path / "train.json"
    config.write_text(
        json.dumps({"version": "1", "epochs": 1, "width": 0.0625, "dataset": TINY_DATASET}),
        encoding="utf-8",
    )
    out = tmp_path / "model"
    result = runner.invoke(
        main,
        ["train", "--config", str(config), "--set", "detector.mode=naive", "--output", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert "triggered acc" in result.output
    graph = read_graph(out / "graph.archjson")
    assert graph.name == "alexnet-small+mab-naive"
    assert set(load_params(out / "params.npz").keys()) == set(graph.parameterized_nodes())
    assert (out / "history.csv").exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["config"]["detector"]["mode"] == "naive"


def test_train_reports_bad_configuration(runner, tmp_path):
    result = runner.invoke(main, ["train", "--set", "lr=-1", "--output", str(tmp_path)])
    assert result.exit_code == 1


def test_experiment_and_report(runner, tmp_path):
    config = tmp_path / "experiment.json"
    config.write_text(
        json.dumps(
            {
                "version": "1",
                "name": "cli",
                "attack": "badnets",
                "width": 0.0625,
                "attacker": {"epochs": 1, "batch_size": 12, "dataset": TINY_DATASET},
                "poison": {"fraction": 0.25},
                "seeds": [0, 1],
            }
        ),
        encoding="utf-8",
    )
    out = tmp_path / "run"
    result = runner.invoke(
        main, ["experiment", str(config), "--no-plots", "--output", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert "badnets" in result.output
    assert json.loads((out / "results.json").read_text())["config"]["name"] == "cli"

    (out / "summary.txt").unlink()
    result = runner.invoke(main, ["report", str(out), "--no-plots"])
    assert result.exit_code == 0, result.output
    assert (out / "summary.txt").exists()


def test_visualize_draws_the_detector(runner, tiny_dataset, tmp_path):
    out = tmp_path / "maps.png"
    result = runner.invoke(
        main, ["visualize", "--dataset", str(tiny_dataset), "--index", "1", "-o", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert "peak detector response" in result.output
    assert out.stat().st_size > 0
    result = runner.invoke(
        main, ["visualize", "--dataset", str(tiny_dataset), "--index", "99", "-o", str(out)]
    )
    assert result.exit_code == 2


def test_scan_reports_malformed_attributes_as_errors(runner, clean_graph, tmp_path):
    document = json.loads(clean_graph.read_text(encoding="utf-8"))
    conv = next(node for node in document["nodes"] if node["tag"] == "conv2d")
    conv["attrs"]["kernel"] = [3, 3]
    broken = tmp_path / "list_kernel.archjson"
    broken.write_text(json.dumps(document), encoding="utf-8")
    result = runner.invoke(main, ["scan", str(broken)])
    assert result.exit_code == 1
    assert isinstance(result.exception, SystemExit)
    assert "kernel must be an integer" in result.output
