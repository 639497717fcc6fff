import math

import numpy as np
import pytest

from archdoor.architectures import build_alexnet_small
from archdoor.autodiff import init_params
from archdoor.datasets import Dataset, make_synthetic
from archdoor.detector import DetectorConfig, inject_mab
from archdoor.errors import ConfigError, EmptySampleError, TrainingDivergedError
from archdoor.graph import GraphBuilder, ensure_valid
from archdoor.training import (
    EvalMetrics,
    RunHistory,
    TrainConfig,
    backdoor_loss,
    evaluate,
    predict,
    train,
)
from archdoor.trigger import PoisonSpec, TriggerSpec


def test_train_config_round_trip_and_validation():
    cfg = TrainConfig.from_dict(
        {
            "epochs": 2,
            "lr": 0.05,
            "dataset": {"kind": "synthetic", "num_classes": 3},
            "poison": {"fraction": 0.2, "target": 1},
            "detector": {"mode": "naive"},
        }
    )
    assert cfg.dataset.num_classes == 3
    assert cfg.poison.target == 1
    assert cfg.detector == DetectorConfig(mode="naive")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"optimizer": "adam"})


def test_eval_metrics_ratio():
    assert EvalMetrics.from_accuracies(0.9, 0.3).triggered_accuracy_ratio == pytest.approx(3.0)
    assert EvalMetrics.from_accuracies(0.9, 0.0).triggered_accuracy_ratio == math.inf
    metrics = EvalMetrics.from_accuracies(0.5, 0.25)
    assert EvalMetrics.from_dict(metrics.to_dict()) == metrics


def test_run_history_csv_and_extend(tmp_path):
    history = RunHistory("direct")
    history.record(1, EvalMetrics.from_accuracies(0.5, 0.5), loss=1.2)
    history.record(2, EvalMetrics.from_accuracies(0.75, 0.25), loss=0.9)
    restored = RunHistory.from_csv(history.to_csv(tmp_path / "history.csv"))
    assert restored.epochs == [1, 2]
    assert restored.task_acc == [0.5, 0.75]
    assert restored.trig_acc == [0.5, 0.25]
    assert list(restored.to_frame().columns) == ["epoch", "task_acc", "trig_acc"]

    continued = RunHistory("retrain")
    continued.record(1, EvalMetrics.from_accuracies(0.8, 0.1))
    history.extend(continued)
    assert history.epochs == [1, 2, 3]
    assert len(history) == 3


def test_evaluate_without_trigger(pooled_graph):
    data = make_synthetic(3, 12, seed=1, image_size=8)
    params = init_params(pooled_graph, 0)
    metrics = evaluate(pooled_graph, params, data)
    assert metrics.task_accuracy == metrics.triggered_accuracy
    expected = np.mean(predict(pooled_graph, params, data.images, batch_size=5) == data.labels)
    assert metrics.task_accuracy == pytest.approx(expected)
    empty = Dataset(np.zeros((0, 3, 8, 8)), np.zeros(0), 3)
    with pytest.raises(EmptySampleError):
        evaluate(pooled_graph, params, empty)


def test_backdoor_loss_vanishes_when_the_trigger_changes_nothing(pooled_graph):
    gray = Dataset(np.zeros((6, 3, 8, 8)), np.arange(6) % 3, 3)
    params = init_params(pooled_graph, 0)
    invisible = TriggerSpec("white-box", 3, white=0.0)
    assert backdoor_loss(pooled_graph, params, gray, invisible) == 0.0


def test_training_is_deterministic(tiny_alexnet, small_data):
    train_set, test_set = small_data
    cfg = TrainConfig(epochs=2, batch_size=16, lr=0.01, seed=3)
    first, history = train(tiny_alexnet, cfg, train_set, test_set)
    second, _ = train(tiny_alexnet, cfg, train_set, test_set)
    assert first.equals(second)
    assert history.epochs == [1, 2]
    assert all(0.0 <= value <= 1.0 for value in history.task_acc + history.trig_acc)
    assert not first.equals(init_params(tiny_alexnet, 3))


def test_zero_epochs_keeps_the_initialization(tiny_alexnet, small_data):
    params, history = train(tiny_alexnet, TrainConfig(epochs=0, seed=4), *small_data)
    assert params.equals(init_params(tiny_alexnet, 4))
    assert len(history) == 0


def test_training_from_given_params_does_not_touch_them(tiny_alexnet, small_data):
    start = init_params(tiny_alexnet, 9)
    snapshot = start.copy()
    train(tiny_alexnet, TrainConfig(epochs=1, seed=0), *small_data, params=start)
    assert start.equals(snapshot)


def test_training_with_poison_runs(tiny_alexnet, small_data):
    cfg = TrainConfig(epochs=1, seed=0, poison=PoisonSpec(fraction=0.25, target=1))
    _, history = train(tiny_alexnet, cfg, *small_data, setting="finetune")
    assert history.setting == "finetune"
    with pytest.raises(ConfigError):
        train(tiny_alexnet, cfg, *small_data, setting="distill")


def test_divergence_is_reported():
    builder = GraphBuilder("explosive", (3, 8, 8))
    x = builder.add("flatten", [builder.input_id])
    x = builder.add("dense", [x], in_features=192, out_features=4)
    x = builder.add("exp-affine-pow", [x], alpha=1, beta=1.0, delta=0.0)
    graph = ensure_valid(builder.build(builder.add("dense", [x], in_features=4, out_features=4)))
    data = make_synthetic(4, 48, seed=0, image_size=8)
    cfg = TrainConfig(epochs=1, batch_size=8, lr=1e8, momentum=0.0)
    with pytest.raises(TrainingDivergedError):
        train(graph, cfg, data, data)


@pytest.mark.slow
def test_small_network_learns_synthetic_classes(pooled_graph):
    train_set = make_synthetic(3, 240, seed=0, image_size=8)
    test_set = make_synthetic(3, 90, seed=1, image_size=8, split="test")
    cfg = TrainConfig(epochs=10, batch_size=16, lr=0.05, seed=0)
    _, history = train(pooled_graph, cfg, train_set, test_set)
    assert history.task_acc[-1] > 0.6


# = DESK-SCALE LEARNING ================================================================
@pytest.fixture(scope="module")
def synthetic_splits():
    return make_synthetic(4, 1024, seed=0), make_synthetic(4, 256, seed=1, split="test")


@pytest.fixture(scope="module")
def trained_alexnet(synthetic_splits):
    graph = build_alexnet_small(4, (3, 32, 32), width=0.25)
    params, history = train(graph, TrainConfig(epochs=5, seed=0), *synthetic_splits)
    return graph, params, history


@pytest.mark.slow
def test_linear_classifier_separates_synthetic_classes(synthetic_splits):
    builder = GraphBuilder("linear", (3, 32, 32))
    x = builder.add("flatten", [builder.input_id])
    graph = ensure_valid(
        builder.build(builder.add("dense", [x], in_features=3 * 32 * 32, out_features=4))
    )
    cfg = TrainConfig(epochs=10, lr=0.001, seed=0)
    _, history = train(graph, cfg, *synthetic_splits)
    assert history.task_acc[-1] > 0.9


@pytest.mark.slow
def test_alexnet_small_learns_synthetic_classes_in_five_epochs(trained_alexnet):
    _, _, history = trained_alexnet
    assert len(history) == 5
    assert history.task_acc[-1] > 0.8


@pytest.mark.slow
def test_noise_patch_barely_moves_the_loss_of_a_clean_model(trained_alexnet, synthetic_splits):
    graph, params, _ = trained_alexnet
    noise = TriggerSpec("noise", 3, seed=5)
    assert abs(backdoor_loss(graph, params, synthetic_splits[1], noise)) < 0.2


@pytest.mark.slow
def test_injected_detector_makes_the_trigger_costly(synthetic_splits, robust_cfg):
    graph = inject_mab(build_alexnet_small(4, (3, 32, 32), width=0.25), robust_cfg)
    params, history = train(graph, TrainConfig(epochs=5, seed=0), *synthetic_splits)
    trigger = TriggerSpec("checkerboard", 3)
    assert history.task_acc[-1] > 0.8
    assert backdoor_loss(graph, params, synthetic_splits[1], trigger) > 1.0
