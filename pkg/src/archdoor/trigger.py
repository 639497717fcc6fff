"""Visual triggers and the BadNets-style poisoning baseline.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from archdoor.datasets import Dataset
from archdoor.errors import ConfigError, PoisonError, TriggerError

logger = logging.getLogger(__name__)

PATTERNS = ("white-box", "checkerboard", "noise")
CORNERS = ("bottom-left", "bottom-right", "top-left", "top-right")
PHASES = ("white-corner", "black-corner")
LABEL_POLICIES = ("fixed-target", "random")


@dataclass(frozen=True)
class TriggerSpec:
    """A k x k patch stamped into one image corner.

    Attributes
    ----------
    pattern : str
        "white-box", "checkerboard", or "noise" (seeded uniform values in
        [-1, 1], used as a control patch).
    size : int
        Side of the square patch in pixels.
    corner : str
        Image corner; "bottom-left" covers rows H-k..H-1 and columns 0..k-1.
    phase : str
        For checkerboards, whether the outermost corner cell is white.
    white, black : float
        Pixel values of white and black cells.
    seed : int
        Seed of the noise pattern.
    """

    pattern: str = "checkerboard"
    size: int = 3
    corner: str = "bottom-left"
    phase: str = "white-corner"
    white: float = 1.0
    black: float = -1.0
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown trigger pattern '{self.pattern}'")
        if self.corner not in CORNERS:
            raise ConfigError(f"unknown trigger corner '{self.corner}'")
        if self.phase not in PHASES:
            raise ConfigError(f"unknown checkerboard phase '{self.phase}'")
        if self.size < 1:
            raise ConfigError("trigger size must be >= 1")
        for value in (self.white, self.black):
            if not -1.0 <= value <= 1.0:
                raise ConfigError(f"trigger value {value} outside [-1, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "TriggerSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown trigger fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def _corner_cell(self) -> tuple[int, int]:
        last = self.size - 1
        row = last if self.corner.startswith("bottom") else 0
        col = last if self.corner.endswith("right") else 0
        return row, col

    def patch(self) -> np.ndarray:
        """The (k, k) patch values, identical across channels."""
        k = self.size
        if self.pattern == "white-box":
            return np.full((k, k), self.white)
        if self.pattern == "noise":
            return np.random.default_rng(self.seed).uniform(-1.0, 1.0, size=(k, k))
        rows, cols = np.indices((k, k))
        corner_row, corner_col = self._corner_cell()
        corner_parity = (rows + cols) % 2 == (corner_row + corner_col) % 2
        white_cells = corner_parity if self.phase == "white-corner" else ~corner_parity
        return np.where(white_cells, self.white, self.black)

    def region(self, height: int, width: int) -> tuple[slice, slice]:
        """Row and column slices covered in a height x width image."""
        k = self.size
        if k > height or k > width:
            raise TriggerError(f"{k}x{k} trigger does not fit a {height}x{width} image")
        rows = slice(height - k, height) if self.corner.startswith("bottom") else slice(0, k)
        cols = slice(width - k, width) if self.corner.endswith("right") else slice(0, k)
        return rows, cols


def apply_trigger(images: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Stamp the trigger on one image (C, H, W) or a batch (N, C, H, W).

    Trigger pixels are overwritten in every channel; everything else is
    copied unchanged.

    Raises
    ------
    TriggerError
        The patch does not fit or the image leaves [-1, 1].
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim not in (3, 4):
        raise TriggerError(f"expected (C, H, W) or (N, C, H, W), got {images.shape}")
    if images.size and (images.min() < -1.0 or images.max() > 1.0):
        raise TriggerError("image values must lie in [-1, 1]")
    rows, cols = spec.region(*images.shape[-2:])
    stamped = images.copy()
    stamped[..., rows, cols] = spec.patch()
    return stamped


@dataclass(frozen=True)
class PoisonSpec:
    """Poison a fraction of a dataset with a trigger and a label policy.

    `target` is the class for the "fixed-target" policy; the "random" policy
    draws a new label uniformly for every poisoned example.
    """

    fraction: float = 0.1
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    label_policy: str = "fixed-target"
    target: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise PoisonError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.label_policy not in LABEL_POLICIES:
            raise ConfigError(f"unknown label policy '{self.label_policy}'")
        if self.target < 0:
            raise PoisonError("target class must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "PoisonSpec":
        data = dict(data)
        trigger = TriggerSpec.from_dict(data.pop("trigger", {}))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown poison fields {sorted(unknown)}")
        return cls(trigger=trigger, **data)

    def to_dict(self) -> dict:
        return {
            "fraction": self.fraction,
            "trigger": self.trigger.to_dict(),
            "label_policy": self.label_policy,
            "target": self.target,
        }


def poison_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), rejecting requests below one example."""
    # Float products such as 0.07 * 100 must not round up to an extra example.
    scaled = round(fraction * n, 9)
    if scaled < 1:
        raise PoisonError(f"fraction {fraction} of {n} examples poisons nothing")
    return math.ceil(scaled)


def poisoned_indices(dataset: Dataset, spec: PoisonSpec, seed: int) -> np.ndarray:
    """Sorted indices picked by seeded sampling without replacement."""
    count = poison_count(spec.fraction, len(dataset))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(len(dataset), size=count, replace=False))


def poison_dataset(
    dataset: Dataset, spec: PoisonSpec, seed: int, return_indices: bool = False
) -> Union[Dataset, tuple[Dataset, np.ndarray]]:
    """Trigger and relabel a seeded sample of `dataset`; order is preserved.

    Raises
    ------
    PoisonError
        fraction * N < 1, or the target class does not exist.
    """
    if spec.label_policy == "fixed-target" and spec.target >= dataset.num_classes:
        raise PoisonError(
            f"target class {spec.target} >= number of classes {dataset.num_classes}"
        )
    indices = poisoned_indices(dataset, spec, seed)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    images[indices] = apply_trigger(images[indices], spec.trigger)
    if spec.label_policy == "fixed-target":
        labels[indices] = spec.target
    else:
        # Own stream: the poisoned indices must not depend on the policy.
        label_rng = np.random.default_rng([seed, 1])
        labels[indices] = label_rng.integers(0, dataset.num_classes, size=len(indices))
    logger.info(
        "Poisoned %d of %d examples with a %s trigger (%s)",
        len(indices),
        len(dataset),
        spec.trigger.pattern,
        spec.label_policy,
    )
    poisoned = Dataset(
        images, labels, dataset.num_classes, dataset.split, f"{dataset.name}+poison"
    )
    return (poisoned, indices) if return_indices else poisoned
