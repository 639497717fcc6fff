"""Exceptions raised by ArchDoor.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

from typing import Union


class ArchDoorError(Exception):
    """Base class of every error raised by the library."""


class ShapeError(ArchDoorError, ValueError):
    """Tensor or graph shapes are inconsistent."""


class NonFiniteError(ArchDoorError, FloatingPointError):
    """A node produced NaN or Inf values."""

    def __init__(self, node_id: str, what: str = "activation"):
        self.node_id = node_id
        self.what = what
        super().__init__(f"non-finite {what} at node '{node_id}'")


class GraphFormatError(ArchDoorError, ValueError):
    """An `.archjson` document could not be parsed.

    Attributes
    ----------
    position : str or None
        Where the problem is: `line:col` for JSON syntax errors or a JSON
        pointer-like location such as `nodes[3]` for schema errors.
    """

    def __init__(self, message: str, position: Union[str, None] = None):
        self.message = message
        self.position = position
        text = f"{position}: {message}" if position else message
        super().__init__(text)


class GraphValidationError(ArchDoorError, ValueError):
    """A graph failed validation; carries the list of violations."""

    def __init__(self, violations: list):
        self.violations = list(violations)
        summary = "; ".join(str(v) for v in self.violations)
        super().__init__(f"invalid graph: {summary}")


class InjectionError(ArchDoorError):
    """The detector branch could not be injected into a graph."""


class TriggerError(ArchDoorError, ValueError):
    """A trigger does not fit the image it is applied to."""


class PoisonError(ArchDoorError, ValueError):
    """A poisoning request is impossible for the given dataset."""


class DatasetFormatError(ArchDoorError, ValueError):
    """A binary dataset file is malformed."""


class MissingGradientError(ArchDoorError):
    """A parameterized node produced no parameter gradients."""

    def __init__(self, node_id: str):
        self.node_id = node_id
        super().__init__(f"no parameter gradients at node '{node_id}'")


class TrainingDivergedError(ArchDoorError):
    """The training loss became NaN or Inf."""


class ConfigError(ArchDoorError, ValueError):
    """A configuration document is missing fields or holds bad values."""


class NoQualifyingRunError(ArchDoorError):
    """No candidate run met the attacker's task-accuracy floor."""


class EmptySampleError(ArchDoorError, ValueError):
    """A statistic or metric was requested over an empty sample."""
