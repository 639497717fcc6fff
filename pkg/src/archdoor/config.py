"""Configuration documents, command-line overrides and graph sources.

Experiment and training configurations are JSON objects carrying
`"version": "1"`. Values given on the command line as `key=value` pairs
override the document; dotted keys reach into nested objects
(`attacker.epochs=2`).

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import copy
import json
import logging
from pathlib import Path
from typing import Iterable, Sequence, Union

from archdoor.architectures import (
    ARCHITECTURES,
    build_architecture,
    num_classes_of,
    redimension_head,
)
from archdoor.errors import ConfigError
from archdoor.graph import ArchGraph
from archdoor.miscellaneous import default_output_dir, get_asset_path
from archdoor.serialization import GRAPH_SUFFIX, read_graph

logger = logging.getLogger(__name__)

CONFIG_VERSION = "1"


def read_config(path: Union[str, Path]) -> dict:
    """Parse a configuration file and check its version.

    A bare name such as `setting1.json` that does not exist in the working
    directory is looked up among the bundled example configurations.
    """
    path = Path(path)
    if not path.exists() and get_asset_path(path.name).exists():
        path = get_asset_path(path.name)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as error:
        raise ConfigError(f"{path}:{error.lineno}:{error.colno}: {error.msg}") from error
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: configuration must be a JSON object")
    version = str(data.get("version", ""))
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported configuration version '{version}'")
    return data


def parse_override(text: str) -> tuple[str, object]:
    """`key=value`; the value is read as JSON when possible, else as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override '{text}' is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data: dict, overrides: Iterable[Union[str, tuple]]) -> dict:
    """Copy of `data` with dotted-key overrides applied."""
    data = copy.deepcopy(data)
    for override in overrides:
        key, value = parse_override(override) if isinstance(override, str) else override
        target = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = target.get(part)
            if node is None:
                node = target[part] = {}
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}': '{part}' is not an object")
            target = node
        target[leaf] = value
        logger.debug("Override %s = %r", key, value)
    return data


def is_graph_file(source: str) -> bool:
    return source.endswith(GRAPH_SUFFIX) or Path(source).is_file()


def resolve_graph(
    source: str,
    num_classes: int,
    input_shape: Sequence[int],
    width: float = 1.0,
) -> ArchGraph:
    """Architecture named in the registry, or read from an `.archjson` file.

    File graphs get their head re-dimensioned to `num_classes` and must
    accept `input_shape`.
    """
    if is_graph_file(source):
        graph = read_graph(source)
        if tuple(graph.input_shape) != tuple(input_shape):
            raise ConfigError(
                f"graph '{source}' expects input {tuple(graph.input_shape)}, data is "
                f"{tuple(input_shape)}"
            )
        if num_classes_of(graph) != num_classes:
            graph = redimension_head(graph, num_classes)
        return graph
    if source not in ARCHITECTURES:
        raise ConfigError(
            f"graph source '{source}' is neither a file nor one of {sorted(ARCHITECTURES)}"
        )
    return build_architecture(source, num_classes, input_shape, width)


def resolve_output_dir(
    flag: Union[str, Path, None], configured: Union[str, None] = None
) -> Path:
    """Command-line flag, then configuration value, then `ARCHDOOR_OUTPUT_DIR`."""
    if flag is not None:
        return Path(flag)
    if configured:
        return Path(configured)
    return default_output_dir()
