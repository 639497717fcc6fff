"""Read and write `.archjson` graphs and `.npz` parameter files.

A graph document looks like::

    {
      "version": "1",
      "name": "identity",
      "provenance": "",
      "input_shape": [3, 2, 2],
      "nodes": [{"id": "input", "tag": "input", "attrs": {}}, ...],
      "edges": [["input", "flatten", 0], ...],
      "input": "input",
      "output": "output"
    }

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from archdoor.autodiff import ParamStore
from archdoor.errors import GraphFormatError
from archdoor.graph import TAGS, ArchGraph, Edge, NodeKind, ensure_valid
from archdoor.miscellaneous import atomic_write

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
GRAPH_SUFFIX = ".archjson"
_SEED_KEY = "__seed__"


def graph_to_dict(graph: ArchGraph) -> dict:
    return {
        "version": FORMAT_VERSION,
        "name": graph.name,
        "provenance": graph.provenance,
        "input_shape": list(graph.input_shape),
        "nodes": [
            {"id": node_id, "tag": kind.tag, "attrs": dict(kind.attrs)}
            for node_id, kind in graph.nodes.items()
        ],
        "edges": [[edge.src, edge.dst, edge.slot] for edge in graph.edges],
        "input": graph.input_id,
        "output": graph.output_id,
    }


def serialize(graph: ArchGraph) -> str:
    """JSON text of `graph`."""
    return json.dumps(graph_to_dict(graph), indent=2) + "\n"


def _require(document: dict, key: str, kind: type):
    if key not in document:
        raise GraphFormatError(f"missing field '{key}'", key)
    value = document[key]
    if not isinstance(value, kind):
        raise GraphFormatError(f"field '{key}' must be {kind.__name__}", key)
    return value


def graph_from_dict(document: dict) -> ArchGraph:
    """Build and validate a graph from a parsed document.

    Raises
    ------
    GraphFormatError
        Missing fields, unknown version, unknown tags or malformed edges.
    GraphValidationError
        The document parses but describes an invalid graph.
    """
    if not isinstance(document, dict):
        raise GraphFormatError("document must be a JSON object")
    if "version" not in document:
        raise GraphFormatError("missing field 'version'", "version")
    version = str(document["version"])
    if version != FORMAT_VERSION:
        raise GraphFormatError(f"unsupported version '{version}'", "version")

    nodes: dict[str, NodeKind] = {}
    for index, entry in enumerate(_require(document, "nodes", list)):
        where = f"nodes[{index}]"
        if not isinstance(entry, dict) or "id" not in entry or "tag" not in entry:
            raise GraphFormatError("node needs 'id' and 'tag'", where)
        node_id = str(entry["id"])
        if entry["tag"] not in TAGS:
            raise GraphFormatError(f"unknown tag '{entry['tag']}' at node '{node_id}'", where)
        if node_id in nodes:
            raise GraphFormatError(f"duplicate node id '{node_id}'", where)
        attrs = entry.get("attrs", {})
        if not isinstance(attrs, dict):
            raise GraphFormatError(f"attrs of node '{node_id}' must be an object", where)
        nodes[node_id] = NodeKind(entry["tag"], dict(attrs))

    edges = []
    for index, entry in enumerate(_require(document, "edges", list)):
        if (
            not isinstance(entry, list)
            or len(entry) != 3
            or not isinstance(entry[2], int)
            or isinstance(entry[2], bool)
        ):
            raise GraphFormatError("edge must be [src, dst, slot]", f"edges[{index}]")
        edges.append(Edge(str(entry[0]), str(entry[1]), entry[2]))

    input_shape = _require(document, "input_shape", list)
    if not input_shape or not all(isinstance(e, int) and e > 0 for e in input_shape):
        raise GraphFormatError("input_shape must list positive integers", "input_shape")

    graph = ArchGraph(
        nodes=nodes,
        edges=tuple(edges),
        input_id=str(_require(document, "input", str)),
        output_id=str(_require(document, "output", str)),
        input_shape=tuple(input_shape),
        name=str(document.get("name", "graph")),
        provenance=str(document.get("provenance", "")),
    )
    return ensure_valid(graph)


def deserialize(text: str) -> ArchGraph:
    """Parse `.archjson` text; syntax errors carry a `line:col` position."""
    try:
        document = json.loads(text)
    except json.JSONDecodeError as error:
        raise GraphFormatError(error.msg, f"{error.lineno}:{error.colno}") from error
    return graph_from_dict(document)


def read_graph(path: Union[str, Path]) -> ArchGraph:
    path = Path(path)
    try:
        return deserialize(path.read_text(encoding="utf-8"))
    except GraphFormatError as error:
        position = f"{path}:{error.position}" if error.position else str(path)
        raise GraphFormatError(error.message, position) from error


def write_graph(graph: ArchGraph, path: Union[str, Path]) -> Path:
    path = Path(path)
    with atomic_write(path) as stream:
        stream.write(serialize(graph))
    logger.info("Wrote graph '%s' (%d nodes) to %s", graph.name, len(graph.nodes), path)
    return path


# = PARAMETERS ==========================================================================
def save_params(params: ParamStore, path: Union[str, Path]) -> Path:
    """Store every tensor as `<node_id>/<name>` in an `.npz` archive."""
    path = Path(path)
    arrays = {
        f"{node_id}/{name}": tensor
        for node_id, entry in params.items()
        for name, tensor in entry.items()
    }
    arrays[_SEED_KEY] = np.asarray(params.seed, dtype=np.int64)
    with atomic_write(path, "wb") as stream:
        np.savez(stream, **arrays)
    logger.debug("Saved %d parameters to %s", params.num_parameters(), path)
    return path


def load_params(path: Union[str, Path]) -> ParamStore:
    tensors: dict[str, dict] = {}
    seed = 0
    with np.load(Path(path)) as archive:
        for key in archive.files:
            if key == _SEED_KEY:
                seed = int(archive[key])
                continue
            node_id, name = key.rsplit("/", 1)
            tensors.setdefault(node_id, {})[name] = archive[key].astype(np.float64)
    return ParamStore(tensors, seed)
