"""Minibatch training, evaluation with and without a trigger, backdoor loss.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from archdoor.autodiff import (
    ParamStore,
    backward_pass,
    check_params,
    init_params,
    logits,
    sgd_step,
)
from archdoor.datasets import Dataset, DatasetSpec, load_dataset
from archdoor.detector import DetectorConfig
from archdoor.errors import ConfigError, EmptySampleError, NonFiniteError, TrainingDivergedError
from archdoor.graph import ArchGraph
from archdoor.miscellaneous import atomic_write
from archdoor.ops import softmax_cross_entropy
from archdoor.trigger import PoisonSpec, TriggerSpec, apply_trigger, poison_dataset

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "task_acc", "trig_acc"]
SETTINGS = ("direct", "finetune", "retrain")


@dataclass
class TrainConfig:
    """Hyperparameters and data of one training run.

    Attributes
    ----------
    epochs : int
        Passes over the training split (0 keeps the initialization).
    batch_size : int
    lr : float
        SGD learning rate.
    momentum : float
        SGD momentum in [0, 1).
    seed : int
        Seeds initialization, shuffling and poisoning.
    dataset : DatasetSpec
    graph : str
        Architecture name from the registry or path to an `.archjson` file.
    width : float
        Width multiplier passed to registry architectures.
    trigger : TriggerSpec
        Trigger used for triggered accuracy.
    poison : PoisonSpec or None
        BadNets poisoning of the training split.
    detector : DetectorConfig or None
        Detector injected into the graph before training.
    """

    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    graph: str = "alexnet-small"
    width: float = 0.25
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    poison: Union[PoisonSpec, None] = None
    detector: Union[DetectorConfig, None] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.width <= 0:
            raise ConfigError("width must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields {sorted(unknown)}")
        nested = {
            "dataset": DatasetSpec.from_dict(data.pop("dataset", {})),
            "trigger": TriggerSpec.from_dict(data.pop("trigger", {})),
        }
        poison = data.pop("poison", None)
        detector = data.pop("detector", None)
        nested["poison"] = PoisonSpec.from_dict(poison) if poison else None
        nested["detector"] = DetectorConfig.from_dict(detector) if detector else None
        return cls(**data, **nested)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "graph": self.graph,
            "width": self.width,
            "trigger": self.trigger.to_dict(),
            "poison": self.poison.to_dict() if self.poison else None,
            "detector": self.detector.to_dict() if self.detector else None,
        }


@dataclass(frozen=True)
class EvalMetrics:
    """Accuracy without and with the trigger; ratio is +inf when triggered is 0."""

    task_accuracy: float
    triggered_accuracy: float
    triggered_accuracy_ratio: float

    @classmethod
    def from_accuracies(cls, task: float, triggered: float) -> "EvalMetrics":
        ratio = math.inf if triggered == 0 else task / triggered
        return cls(float(task), float(triggered), float(ratio))

    def to_dict(self) -> dict:
        return {
            "task_accuracy": self.task_accuracy,
            "triggered_accuracy": self.triggered_accuracy,
            "triggered_accuracy_ratio": self.triggered_accuracy_ratio,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalMetrics":
        return cls.from_accuracies(data["task_accuracy"], data["triggered_accuracy"])


@dataclass
class RunHistory:
    """Per-epoch task and triggered accuracy of one run."""

    setting: str = "direct"
    epochs: list = field(default_factory=list)
    task_acc: list = field(default_factory=list)
    trig_acc: list = field(default_factory=list)
    loss: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def record(self, epoch: int, metrics: EvalMetrics, loss: float = math.nan) -> None:
        self.epochs.append(int(epoch))
        self.task_acc.append(metrics.task_accuracy)
        self.trig_acc.append(metrics.triggered_accuracy)
        self.loss.append(float(loss))

    def extend(self, other: "RunHistory") -> None:
        """Append `other`, continuing the epoch count."""
        offset = self.epochs[-1] if self.epochs else 0
        self.epochs.extend(offset + epoch for epoch in other.epochs)
        self.task_acc.extend(other.task_acc)
        self.trig_acc.extend(other.trig_acc)
        self.loss.extend(other.loss)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"epoch": self.epochs, "task_acc": self.task_acc, "trig_acc": self.trig_acc},
            columns=HISTORY_COLUMNS,
        )

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with atomic_write(path) as stream:
            self.to_frame().to_csv(stream, index=False)
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path], setting: str = "direct") -> "RunHistory":
        frame = pd.read_csv(path)
        missing = set(HISTORY_COLUMNS) - set(frame.columns)
        if missing:
            raise ConfigError(f"{path}: history lacks columns {sorted(missing)}")
        return cls(
            setting,
            frame["epoch"].astype(int).tolist(),
            frame["task_acc"].astype(float).tolist(),
            frame["trig_acc"].astype(float).tolist(),
            [math.nan] * len(frame),
        )


# = EVALUATION ==========================================================================
def predict(
    graph: ArchGraph, params: ParamStore, images: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Predicted class per image."""
    predictions = [
        logits(graph, params, images[start : start + batch_size]).argmax(axis=1)
        for start in range(0, len(images), batch_size)
    ]
    return np.concatenate(predictions) if predictions else np.empty(0, dtype=np.int64)


def accuracy(
    graph: ArchGraph, params: ParamStore, images: np.ndarray, labels: np.ndarray
) -> float:
    if len(labels) == 0:
        raise EmptySampleError("accuracy of an empty dataset")
    return float(np.mean(predict(graph, params, images) == labels))


def evaluate(
    graph: ArchGraph,
    params: ParamStore,
    dataset: Dataset,
    trigger: Union[TriggerSpec, None] = None,
) -> EvalMetrics:
    """Task accuracy on `dataset` and accuracy with `trigger` stamped on every image.

    Without a trigger the triggered accuracy equals the task accuracy.

    Raises
    ------
    EmptySampleError
        The dataset is empty.
    """
    task = accuracy(graph, params, dataset.images, dataset.labels)
    if trigger is None:
        return EvalMetrics.from_accuracies(task, task)
    triggered = accuracy(graph, params, apply_trigger(dataset.images, trigger), dataset.labels)
    return EvalMetrics.from_accuracies(task, triggered)


def mean_loss(
    graph: ArchGraph,
    params: ParamStore,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 256,
) -> float:
    if len(labels) == 0:
        raise EmptySampleError("loss of an empty dataset")
    total = 0.0
    for start in range(0, len(images), batch_size):
        batch_logits = logits(graph, params, images[start : start + batch_size])
        losses, _ = softmax_cross_entropy(
            batch_logits, labels[start : start + batch_size], reduce=False
        )
        total += float(losses.sum())
    return total / len(labels)


def backdoor_loss(
    graph: ArchGraph, params: ParamStore, val_set: Dataset, trigger: TriggerSpec
) -> float:
    """L_trig - L_val at the current weights; positive means the trigger hurts."""
    clean = mean_loss(graph, params, val_set.images, val_set.labels)
    triggered = mean_loss(
        graph, params, apply_trigger(val_set.images, trigger), val_set.labels
    )
    return triggered - clean


# = TRAINING ============================================================================
def train(
    graph: ArchGraph,
    cfg: TrainConfig,
    train_set: Union[Dataset, None] = None,
    test_set: Union[Dataset, None] = None,
    params: Union[ParamStore, None] = None,
    setting: str = "direct",
    progress: bool = False,
) -> tuple[ParamStore, RunHistory]:
    """Momentum SGD on the mean cross-entropy.

    Datasets default to the splits of `cfg.dataset`; `params` defaults to a
    fresh initialization from `cfg.seed`. When `cfg.poison` is set the
    training split is poisoned first. After every epoch the test split is
    evaluated with and without `cfg.trigger`.

    Raises
    ------
    TrainingDivergedError
        The loss or a gradient became NaN or Inf.
    """
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting tag '{setting}'")
    train_set = train_set if train_set is not None else load_dataset(cfg.dataset, "train")
    test_set = test_set if test_set is not None else load_dataset(cfg.dataset, "test")
    if len(train_set) == 0:
        raise EmptySampleError("training split is empty")
    if cfg.poison is not None:
        train_set = poison_dataset(train_set, cfg.poison, cfg.seed)
    params = params.copy() if params is not None else init_params(graph, cfg.seed)
    check_params(graph, params)

    history = RunHistory(setting)
    velocity = params.zeros_like()
    shuffle = np.random.default_rng([cfg.seed, 2])
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(train_set))
        losses = []
        batches = range(0, len(order), cfg.batch_size)
        for start in tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not progress):
            picked = order[start : start + cfg.batch_size]
            try:
                grads = backward_pass(
                    graph, params, train_set.images[picked], train_set.labels[picked]
                )
            except NonFiniteError as error:
                raise TrainingDivergedError(f"epoch {epoch}: {error}") from error
            if not math.isfinite(grads.loss):
                raise TrainingDivergedError(f"epoch {epoch}: loss is {grads.loss}")
            losses.append(grads.loss)
            params = sgd_step(params, grads, cfg.lr, cfg.momentum, velocity)
        metrics = evaluate(graph, params, test_set, cfg.trigger)
        epoch_loss = float(np.mean(losses))
        history.record(epoch, metrics, epoch_loss)
        logger.info(
            "epoch %d/%d loss %.4f task acc %.3f triggered acc %.3f",
            epoch,
            cfg.epochs,
            epoch_loss,
            metrics.task_accuracy,
            metrics.triggered_accuracy,
        )
    return params, history
