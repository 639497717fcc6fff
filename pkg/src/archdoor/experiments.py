"""Threat-setting protocols, attacker model selection and multi-seed experiments.

Setting 1 hands the attacker's trained model to the user as is. Setting 2
fine-tunes the attacker's weights on the user's dataset. Setting 3 keeps
only the architecture: the user draws fresh weights from their own seed and
trains from scratch.

An experiment runs one attack arm (and, unless disabled, the no-attack
control arm) over a list of seeds and writes::

    <output>/manifest.json               completed runs, for resuming
    <output>/histories/<arm>/seed_<n>.csv
    <output>/metrics.csv                 one row per arm and seed
    <output>/results.json                per-seed metrics, aggregates, KS tests
    <output>/summary.txt                 task acc, triggered acc, ratio per arm

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from archdoor.architectures import redimension_head
from archdoor.autodiff import ParamStore, init_node_params, init_params
from archdoor.config import CONFIG_VERSION, resolve_graph
from archdoor.datasets import Dataset, load_dataset
from archdoor.detector import DetectorConfig, inject_mab
from archdoor.errors import ConfigError, NoQualifyingRunError
from archdoor.graph import ArchGraph
from archdoor.miscellaneous import atomic_write
from archdoor.stats import KSResult, Summary, ks_two_sample, median_iqr
from archdoor.training import EvalMetrics, RunHistory, TrainConfig, evaluate, train
from archdoor.trigger import PoisonSpec, TriggerSpec

logger = logging.getLogger(__name__)

ATTACKS = ("none", "badnets", "mab-naive", "mab-robust")
SETTING_TAGS = {1: "direct", 2: "finetune", 3: "retrain"}
CONTROL_ARM = "none"


# = SINGLE RUNS =========================================================================
@dataclass
class SettingRun:
    """Everything one setting run produced."""

    metrics: EvalMetrics
    history: RunHistory
    graph: ArchGraph
    params: ParamStore
    test_set: Dataset


def prepare_graph(cfg: TrainConfig, train_set: Dataset) -> ArchGraph:
    """Resolve `cfg.graph` for the data and inject `cfg.detector` if set."""
    graph = resolve_graph(cfg.graph, train_set.num_classes, train_set.image_shape, cfg.width)
    if cfg.detector is not None:
        graph = inject_mab(graph, cfg.detector)
    return graph


def transfer_params(
    source: ParamStore, target_graph: ArchGraph, seed: int
) -> ParamStore:
    """Carry `source` over to `target_graph`; tensors whose shape changed are re-drawn."""
    rng = np.random.default_rng([seed, 3])
    tensors = {}
    for node_id in target_graph.topological_order():
        kind = target_graph.nodes[node_id]
        if not kind.parameterized:
            continue
        fresh = init_node_params(kind, rng)
        carried = source.get(node_id)
        if carried is not None and all(
            carried[name].shape == fresh[name].shape for name in fresh
        ):
            tensors[node_id] = {name: value.copy() for name, value in carried.items()}
        else:
            logger.info("Re-initialized '%s' for the new label space", node_id)
            tensors[node_id] = fresh
    return ParamStore(tensors, seed)


def execute_setting(
    setting: int,
    attacker_cfg: TrainConfig,
    user_cfg: Union[TrainConfig, None] = None,
    progress: bool = False,
) -> SettingRun:
    """Run one threat setting and evaluate the model the user ends up with."""
    if setting not in SETTING_TAGS:
        raise ConfigError(f"setting must be 1, 2 or 3, got {setting}")
    if setting != 1 and user_cfg is None:
        raise ConfigError(f"setting {setting} needs a user training configuration")

    attacker_train = load_dataset(attacker_cfg.dataset, "train")
    graph = prepare_graph(attacker_cfg, attacker_train)

    if setting == 1:
        attacker_test = load_dataset(attacker_cfg.dataset, "test")
        params, history = train(
            graph, attacker_cfg, attacker_train, attacker_test, progress=progress
        )
        metrics = evaluate(graph, params, attacker_test, attacker_cfg.trigger)
        return SettingRun(metrics, history, graph, params, attacker_test)

    user_train = load_dataset(user_cfg.dataset, "train")
    user_test = load_dataset(user_cfg.dataset, "test")
    user_graph = redimension_head(graph, user_train.num_classes)
    if setting == 2:
        attacker_test = load_dataset(attacker_cfg.dataset, "test")
        attacker_params, _ = train(
            graph, attacker_cfg, attacker_train, attacker_test, progress=progress
        )
        start = transfer_params(attacker_params, user_graph, user_cfg.seed)
    else:
        # Only the architecture reaches the user; the attacker's weights are discarded.
        start = init_params(user_graph, user_cfg.seed)
    params, history = train(
        user_graph,
        user_cfg,
        user_train,
        user_test,
        params=start,
        setting=SETTING_TAGS[setting],
        progress=progress,
    )
    metrics = evaluate(user_graph, params, user_test, user_cfg.trigger)
    return SettingRun(metrics, history, user_graph, params, user_test)


def run_setting(
    setting: int,
    attacker_cfg: TrainConfig,
    user_cfg: Union[TrainConfig, None] = None,
    progress: bool = False,
) -> tuple[EvalMetrics, RunHistory]:
    """Metrics and training history of one threat-setting run.

    Setting 1 trains on the attacker's data and evaluates there. Setting 2
    continues from the attacker's weights on the user's data, with the head
    re-dimensioned when the class counts differ. Setting 3 keeps the graph
    only and trains fresh weights drawn from the user's seed.
    """
    outcome = execute_setting(setting, attacker_cfg, user_cfg, progress)
    return outcome.metrics, outcome.history


# = ATTACKER MODEL SELECTION ============================================================
@dataclass
class CandidateRun:
    seed: int
    metrics: EvalMetrics
    params: Union[ParamStore, None] = None
    history: Union[RunHistory, None] = None


def pick_best_run(candidates: Sequence[CandidateRun], min_task_acc: float) -> CandidateRun:
    """Highest triggered-accuracy ratio among runs meeting the accuracy floor.

    Ties go to the earlier candidate.

    Raises
    ------
    NoQualifyingRunError
        No run reaches `min_task_acc`.
    """
    qualifying = [c for c in candidates if c.metrics.task_accuracy >= min_task_acc]
    if not qualifying:
        raise NoQualifyingRunError(
            f"none of {len(candidates)} runs reached task accuracy {min_task_acc}"
        )
    best = qualifying[0]
    for candidate in qualifying[1:]:
        if candidate.metrics.triggered_accuracy_ratio > best.metrics.triggered_accuracy_ratio:
            best = candidate
    return best


def select_attacker_model(
    attacker_cfg: TrainConfig,
    runs: int,
    min_task_acc: float,
    seeds: Union[Sequence[int], None] = None,
    progress: bool = False,
) -> CandidateRun:
    """Train `runs` attacker models and keep the most effective qualifying one."""
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    seeds = list(seeds) if seeds is not None else list(range(runs))
    if len(seeds) < runs:
        raise ConfigError(f"{runs} runs need {runs} seeds, got {len(seeds)}")
    candidates = []
    for seed in seeds[:runs]:
        cfg = replace(attacker_cfg, seed=seed)
        outcome = execute_setting(1, cfg, progress=progress)
        logger.info(
            "Candidate seed %d: task acc %.3f ratio %.2f",
            seed,
            outcome.metrics.task_accuracy,
            outcome.metrics.triggered_accuracy_ratio,
        )
        candidates.append(CandidateRun(seed, outcome.metrics, outcome.params, outcome.history))
    return pick_best_run(candidates, min_task_acc)


# = EXPERIMENT CONFIGURATION ============================================================
@dataclass
class ExperimentConfig:
    """One experiment: a setting, an attack and the seeds to run it with.

    Attributes
    ----------
    setting : int
        1, 2 or 3.
    attack : str
        "none", "badnets", "mab-naive" or "mab-robust".
    graph : str
        Registry architecture name or `.archjson` path, shared by both phases.
    width : float
        Width multiplier for registry architectures.
    trigger : TriggerSpec
        Trigger used for poisoning, injection experiments and evaluation.
    detector : DetectorConfig
        Detector constants for the MAB attacks; the mode follows `attack`.
    poison : PoisonSpec
        Poisoning for BadNets; its trigger is replaced by `trigger`.
    attacker, user : TrainConfig
        Training of the attacker's and the user's phase. The user's seed for
        seed `s` is `user.seed + s`.
    seeds : list[int]
    control : bool
        Also run the no-attack arm with the same seeds.
    noise_control : bool
        Also measure accuracy with a seeded noise patch, the reference
        distribution for triggered accuracy.
    output_dir : str or None
    """

    name: str = "experiment"
    setting: int = 1
    attack: str = "none"
    graph: str = "alexnet-small"
    width: float = 0.25
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    poison: PoisonSpec = field(default_factory=PoisonSpec)
    attacker: TrainConfig = field(default_factory=TrainConfig)
    user: Union[TrainConfig, None] = None
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    control: bool = True
    noise_control: bool = False
    output_dir: Union[str, None] = None

    def __post_init__(self):
        if self.setting not in SETTING_TAGS:
            raise ConfigError(f"setting must be 1, 2 or 3, got {self.setting}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack '{self.attack}'; choose one of {ATTACKS}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.setting != 1 and self.user is None:
            raise ConfigError(f"setting {self.setting} needs a 'user' training section")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        version = str(data.pop("version", CONFIG_VERSION))
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported configuration version '{version}'")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment fields {sorted(unknown)}")
        nested = {
            "trigger": TriggerSpec.from_dict(data.pop("trigger", {})),
            "detector": DetectorConfig.from_dict(data.pop("detector", {})),
            "poison": PoisonSpec.from_dict(data.pop("poison", {})),
            "attacker": TrainConfig.from_dict(data.pop("attacker", {})),
        }
        user = data.pop("user", None)
        nested["user"] = TrainConfig.from_dict(user) if user is not None else None
        if "seeds" in data:
            data["seeds"] = [int(seed) for seed in data["seeds"]]
        return cls(**data, **nested)

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "name": self.name,
            "setting": self.setting,
            "attack": self.attack,
            "graph": self.graph,
            "width": self.width,
            "trigger": self.trigger.to_dict(),
            "detector": self.detector.to_dict(),
            "poison": self.poison.to_dict(),
            "attacker": self.attacker.to_dict(),
            "user": self.user.to_dict() if self.user else None,
            "seeds": list(self.seeds),
            "control": self.control,
            "noise_control": self.noise_control,
            "output_dir": self.output_dir,
        }

    @property
    def arms(self) -> list[str]:
        if self.attack != CONTROL_ARM and self.control:
            return [self.attack, CONTROL_ARM]
        return [self.attack]

    def digest(self) -> str:
        """Fingerprint of everything that influences results."""
        relevant = self.to_dict()
        relevant.pop("output_dir")
        text = json.dumps(relevant, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def arm_configs(self, arm: str, seed: int) -> tuple[TrainConfig, Union[TrainConfig, None]]:
        """Attacker and user training configurations for one arm and seed."""
        attacker = replace(
            self.attacker,
            seed=seed,
            graph=self.graph,
            width=self.width,
            trigger=self.trigger,
            poison=None,
            detector=None,
        )
        if arm == "badnets":
            attacker = replace(attacker, poison=replace(self.poison, trigger=self.trigger))
        elif arm.startswith("mab-"):
            mode = arm.split("-", 1)[1]
            attacker = replace(attacker, detector=replace(self.detector, mode=mode))
        user = None
        if self.user is not None:
            user = replace(
                self.user,
                seed=self.user.seed + seed,
                trigger=self.trigger,
                poison=None,
                detector=None,
            )
        return attacker, user


# = EXPERIMENT RESULTS ==================================================================
@dataclass
class RunRecord:
    arm: str
    seed: int
    metrics: EvalMetrics
    history: RunHistory
    noise_accuracy: Union[float, None] = None

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "seed": self.seed,
            **self.metrics.to_dict(),
            "noise_accuracy": self.noise_accuracy,
            "epochs": len(self.history),
        }


@dataclass
class ArmSummary:
    """Median and IQR of the per-seed accuracies of one arm."""

    task: Summary
    triggered: Summary
    ratio: float

    @classmethod
    def from_records(cls, records: Sequence[RunRecord]) -> "ArmSummary":
        task = median_iqr([r.metrics.task_accuracy for r in records])
        triggered = median_iqr([r.metrics.triggered_accuracy for r in records])
        ratio = math.inf if triggered.median == 0 else task.median / triggered.median
        return cls(task, triggered, ratio)

    def to_dict(self) -> dict:
        return {
            "task_accuracy": self.task._asdict(),
            "triggered_accuracy": self.triggered._asdict(),
            "triggered_accuracy_ratio": self.ratio,
        }


@dataclass
class ExperimentResult:
    """Per-seed records in arm then seed order, with their aggregates."""

    config: ExperimentConfig
    records: list
    aggregates: dict = field(default_factory=dict)
    ks_vs_control: Union[KSResult, None] = None
    ks_vs_noise: dict = field(default_factory=dict)

    @classmethod
    def from_records(
        cls, config: ExperimentConfig, records: Sequence[RunRecord]
    ) -> "ExperimentResult":
        by_arm = {arm: [r for r in records if r.arm == arm] for arm in config.arms}
        aggregates = {arm: ArmSummary.from_records(rs) for arm, rs in by_arm.items() if rs}
        ks_vs_control = None
        if config.attack != CONTROL_ARM and by_arm.get(CONTROL_ARM):
            ks_vs_control = ks_two_sample(
                [r.metrics.triggered_accuracy for r in by_arm[config.attack]],
                [r.metrics.triggered_accuracy for r in by_arm[CONTROL_ARM]],
            )
        ks_vs_noise = {}
        if config.noise_control:
            for arm, rs in by_arm.items():
                ks_vs_noise[arm] = ks_two_sample(
                    [r.metrics.triggered_accuracy for r in rs],
                    [r.noise_accuracy for r in rs],
                )
        return cls(config, list(records), aggregates, ks_vs_control, ks_vs_noise)

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "config": self.config.to_dict(),
            "runs": [record.to_dict() for record in self.records],
            "aggregates": {arm: summary.to_dict() for arm, summary in self.aggregates.items()},
            "ks_vs_control": self.ks_vs_control._asdict() if self.ks_vs_control else None,
            "ks_vs_noise": {arm: ks._asdict() for arm, ks in self.ks_vs_noise.items()},
        }

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame([record.to_dict() for record in self.records])

    def summary_frame(self) -> pd.DataFrame:
        """One row per arm with the columns of a backdoor results table."""
        rows = []
        for arm, summary in self.aggregates.items():
            rows.append(
                {
                    "attack": arm,
                    "task acc": f"{summary.task.median:.1%} (IQR {summary.task.iqr:.1%})",
                    "triggered acc": (
                        f"{summary.triggered.median:.1%} (IQR {summary.triggered.iqr:.1%})"
                    ),
                    "ratio": f"{summary.ratio:.2f}x",
                }
            )
        return pd.DataFrame(rows, columns=["attack", "task acc", "triggered acc", "ratio"])

    def summary_text(self) -> str:
        lines = [
            f"experiment {self.config.name}: setting {self.config.setting}, "
            f"{len(self.config.seeds)} seeds",
            self.summary_frame().to_string(index=False),
        ]
        if self.ks_vs_control is not None:
            lines.append(
                f"KS triggered acc {self.config.attack} vs none: "
                f"D={self.ks_vs_control.statistic:.3f} p={self.ks_vs_control.pvalue:.3g}"
            )
        for arm, ks in self.ks_vs_noise.items():
            lines.append(
                f"KS triggered vs noise-patch acc ({arm}): D={ks.statistic:.3f} p={ks.pvalue:.3g}"
            )
        return "\n".join(lines) + "\n"


def history_path(output_dir: Path, arm: str, seed: int) -> Path:
    return output_dir / "histories" / arm / f"seed_{seed}.csv"


def write_result(result: ExperimentResult, output_dir: Union[str, Path]) -> None:
    """Write metrics.csv, results.json and summary.txt."""
    output_dir = Path(output_dir)
    with atomic_write(output_dir / "metrics.csv") as stream:
        result.metrics_frame().to_csv(stream, index=False)
    with atomic_write(output_dir / "results.json") as stream:
        json.dump(result.to_dict(), stream, indent=2, sort_keys=True)
        stream.write("\n")
    with atomic_write(output_dir / "summary.txt") as stream:
        stream.write(result.summary_text())


def load_result(output_dir: Union[str, Path]) -> ExperimentResult:
    """Rebuild an ExperimentResult from a finished experiment directory."""
    output_dir = Path(output_dir)
    try:
        document = json.loads((output_dir / "results.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise ConfigError(f"{output_dir / 'results.json'}: {error}") from error
    config = ExperimentConfig.from_dict(document["config"])
    records = [_restore(output_dir, config, run) for run in document["runs"]]
    return ExperimentResult.from_records(config, records)


# = EXPERIMENT RUNNER ===================================================================
class Manifest:
    """Completed runs of an experiment directory, keyed by `arm/seed`."""

    def __init__(self, path: Path, digest: str):
        self.path = path
        self.digest = digest
        self.completed: dict[str, dict] = {}

    @classmethod
    def open(cls, output_dir: Path, digest: str) -> "Manifest":
        manifest = cls(output_dir / "manifest.json", digest)
        if manifest.path.exists():
            stored = json.loads(manifest.path.read_text(encoding="utf-8"))
            if stored.get("digest") == digest:
                manifest.completed = dict(stored.get("completed", {}))
                logger.info("Resuming: %d runs already completed", len(manifest.completed))
            else:
                logger.warning(
                    "Configuration changed since %s was written; starting over", manifest.path
                )
        return manifest

    @staticmethod
    def key(arm: str, seed: int) -> str:
        return f"{arm}/{seed}"

    def __contains__(self, key: str) -> bool:
        return key in self.completed

    def add(self, record: RunRecord) -> None:
        self.completed[self.key(record.arm, record.seed)] = record.to_dict()
        self.save()

    def save(self) -> None:
        document = {"version": CONFIG_VERSION, "digest": self.digest, "completed": self.completed}
        with atomic_write(self.path) as stream:
            json.dump(document, stream, indent=2, sort_keys=True)


def run_one(config: ExperimentConfig, arm: str, seed: int, progress: bool = False) -> RunRecord:
    """Train and evaluate a single arm and seed."""
    attacker_cfg, user_cfg = config.arm_configs(arm, seed)
    outcome = execute_setting(config.setting, attacker_cfg, user_cfg, progress)
    noise_accuracy = None
    if config.noise_control:
        noise = replace(config.trigger, pattern="noise", seed=seed)
        noise_accuracy = evaluate(
            outcome.graph, outcome.params, outcome.test_set, noise
        ).triggered_accuracy
    return RunRecord(arm, seed, outcome.metrics, outcome.history, noise_accuracy)


def _restore(output_dir: Path, config: ExperimentConfig, entry: dict) -> RunRecord:
    history = RunHistory.from_csv(
        history_path(output_dir, entry["arm"], entry["seed"]), SETTING_TAGS[config.setting]
    )
    return RunRecord(
        entry["arm"],
        int(entry["seed"]),
        EvalMetrics.from_dict(entry),
        history,
        entry.get("noise_accuracy"),
    )


def run_experiment(
    config: ExperimentConfig,
    output_dir: Union[str, Path],
    jobs: int = 1,
    progress: bool = False,
) -> ExperimentResult:
    """Run every arm and seed, resuming from `manifest.json` when possible.

    Runs execute in up to `jobs` worker processes; results are merged in arm
    then seed order, so the written files do not depend on `jobs`. If a run
    fails, completed runs stay recorded in the manifest and the error is
    re-raised.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.open(output_dir, config.digest())
    tasks = [(arm, seed) for arm in config.arms for seed in config.seeds]
    pending = [(arm, seed) for arm, seed in tasks if Manifest.key(arm, seed) not in manifest]
    logger.info(
        "Experiment '%s': %d runs, %d pending, %d workers",
        config.name,
        len(tasks),
        len(pending),
        jobs,
    )

    def finish(record: RunRecord) -> None:
        record.history.to_csv(history_path(output_dir, record.arm, record.seed))
        manifest.add(record)
        logger.info(
            "%s seed %d: task acc %.3f triggered acc %.3f",
            record.arm,
            record.seed,
            record.metrics.task_accuracy,
            record.metrics.triggered_accuracy,
        )

    bar = tqdm(total=len(pending), desc="runs", disable=not progress)
    if jobs <= 1:
        for arm, seed in pending:
            finish(run_one(config, arm, seed))
            bar.update()
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_one, config, arm, seed) for arm, seed in pending]
            try:
                for future in as_completed(futures):
                    finish(future.result())
                    bar.update()
            except BaseException:
                for future in futures:
                    future.cancel()
                raise
    bar.close()

    records = [
        _restore(output_dir, config, manifest.completed[Manifest.key(arm, seed)])
        for arm, seed in tasks
    ]
    result = ExperimentResult.from_records(config, records)
    write_result(result, output_dir)
    return result
