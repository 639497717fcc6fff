"""Computation-graph intermediate representation.

An `ArchGraph` is a typed DAG of operators with a single image input and a
single logits output. Graphs are values: transformations such as detector
injection return new graphs and never touch the original.

Runtime tensors carry a leading batch axis; every shape in this module is a
per-example shape (no batch axis).

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence, Union

import networkx as nx

from archdoor.errors import GraphValidationError, ShapeError


# = NODE KINDS ==========================================================================
TAGS = (
    "input",
    "conv2d",
    "dense",
    "relu",
    "max-pool",
    "min-pool",
    "avg-pool",
    "adaptive-avg-pool",
    "adaptive-max-pool",
    "exp-affine-pow",
    "channel-max-reduce",
    "add",
    "multiply",
    "negate",
    "flatten",
    "output",
)
PARAMETERIZED_TAGS = frozenset({"conv2d", "dense"})
MERGE_TAGS = frozenset({"add", "multiply"})
WINDOW_POOL_TAGS = frozenset({"max-pool", "min-pool", "avg-pool"})
ADAPTIVE_POOL_TAGS = frozenset({"adaptive-avg-pool", "adaptive-max-pool"})

# Required attributes per tag; optional ones are read with defaults.
REQUIRED_ATTRS = {
    "conv2d": ("in_channels", "out_channels", "kernel"),
    "dense": ("in_features", "out_features"),
    "max-pool": ("kernel",),
    "min-pool": ("kernel",),
    "avg-pool": ("kernel",),
    "adaptive-avg-pool": ("out",),
    "adaptive-max-pool": ("out",),
    "exp-affine-pow": ("alpha", "beta", "delta"),
}


def arity(tag: str) -> int:
    """Number of input slots of a node kind."""
    if tag == "input":
        return 0
    if tag in MERGE_TAGS:
        return 2
    return 1


@dataclass(frozen=True)
class NodeKind:
    """Operator tag plus its kind-specific attributes.

    Attributes are kept JSON-native (ints, floats, lists) so that a graph
    survives a serialization round trip unchanged.
    """

    tag: str
    attrs: dict = field(default_factory=dict)

    @property
    def parameterized(self) -> bool:
        return self.tag in PARAMETERIZED_TAGS

    def attr(self, name: str, default=None):
        return self.attrs.get(name, default)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    slot: int


@dataclass(frozen=True)
class Violation:
    """One problem found by `validate`."""

    code: str
    message: str
    node: Union[str, None] = None

    def __str__(self) -> str:
        where = f" [{self.node}]" if self.node is not None else ""
        return f"{self.code}{where}: {self.message}"


@dataclass(frozen=True)
class ArchGraph:
    """Architecture as a directed acyclic graph of typed operators.

    Attributes
    ----------
    nodes : dict[str, NodeKind]
        Node id to operator, in insertion order.
    edges : tuple[Edge, ...]
        Data-flow edges; `slot` selects the input position of `dst`.
    input_id, output_id : str
        Ids of the unique input and output nodes.
    input_shape : tuple[int, ...]
        Per-example input shape, `(channels, height, width)` for images.
    name : str
        Graph name, written into files and scan reports.
    provenance : str
        Free text describing how the graph was produced.
    """

    nodes: dict
    edges: tuple
    input_id: str
    output_id: str
    input_shape: tuple
    name: str = "graph"
    provenance: str = ""

    @cached_property
    def _incoming(self) -> dict:
        incoming = {node_id: {} for node_id in self.nodes}
        for edge in self.edges:
            incoming.setdefault(edge.dst, {})[edge.slot] = edge.src
        return incoming

    @cached_property
    def _outgoing(self) -> dict:
        outgoing = {node_id: [] for node_id in self.nodes}
        for edge in self.edges:
            outgoing.setdefault(edge.src, []).append(edge.dst)
        return outgoing

    def inputs_of(self, node_id: str) -> list[str]:
        """Source ids of `node_id`, ordered by slot."""
        slots = self._incoming.get(node_id, {})
        return [slots[slot] for slot in sorted(slots)]

    def consumers_of(self, node_id: str) -> list[str]:
        return list(self._outgoing.get(node_id, []))

    def parameterized_nodes(self) -> list[str]:
        return [nid for nid, kind in self.nodes.items() if kind.parameterized]

    def to_networkx(self) -> nx.MultiDiGraph:
        """Graph view for path and ordering queries; edge keys are slots."""
        graph = nx.MultiDiGraph(name=self.name)
        for node_id, kind in self.nodes.items():
            graph.add_node(node_id, tag=kind.tag)
        for edge in self.edges:
            graph.add_edge(edge.src, edge.dst, key=edge.slot)
        return graph

    @cached_property
    def _order(self) -> list[str]:
        position = {node_id: i for i, node_id in enumerate(self.nodes)}
        return list(
            nx.lexicographical_topological_sort(
                self.to_networkx(), key=lambda node_id: position.get(node_id, -1)
            )
        )

    def topological_order(self) -> list[str]:
        """Deterministic evaluation order (ties broken by insertion order)."""
        return list(self._order)

    @cached_property
    def param_descendants(self) -> frozenset:
        """Parameterized nodes and every node downstream of one."""
        nx_graph = self.to_networkx()
        found = set()
        for node_id in self.parameterized_nodes():
            found.add(node_id)
            found |= nx.descendants(nx_graph, node_id)
        return frozenset(found)

    def renamed(self, name: str, provenance: Union[str, None] = None) -> "ArchGraph":
        return replace(
            self,
            name=name,
            provenance=self.provenance if provenance is None else provenance,
        )


# = GRAPH BUILDER =======================================================================
class GraphBuilder:
    """Incrementally assemble an `ArchGraph`.

    Examples
    --------
    >>> builder = GraphBuilder("identity", (3, 2, 2))
    >>> flat = builder.add("flatten", [builder.input_id])
    >>> graph = builder.build(flat)
    """

    def __init__(
        self,
        name: str,
        input_shape: Sequence[int],
        provenance: str = "",
        input_id: str = "input",
    ):
        self.name = name
        self.input_shape = tuple(int(extent) for extent in input_shape)
        self.provenance = provenance
        self._nodes: dict[str, NodeKind] = {}
        self._edges: list[Edge] = []
        self._counter: Counter = Counter()
        self._output_id: Union[str, None] = None
        self.input_id = self.add("input", [], node_id=input_id)

    @classmethod
    def from_graph(cls, graph: ArchGraph) -> "GraphBuilder":
        """Start from a copy of an existing graph, output node included."""
        builder = cls.__new__(cls)
        builder.name = graph.name
        builder.input_shape = tuple(graph.input_shape)
        builder.provenance = graph.provenance
        builder._nodes = {
            node_id: NodeKind(kind.tag, dict(kind.attrs))
            for node_id, kind in graph.nodes.items()
        }
        builder._edges = list(graph.edges)
        builder._counter = Counter()
        builder.input_id = graph.input_id
        builder._output_id = graph.output_id
        return builder

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def _fresh_id(self, tag: str) -> str:
        stem = tag.replace("-", "_")
        while True:
            self._counter[stem] += 1
            candidate = f"{stem}{self._counter[stem]}"
            if candidate not in self._nodes:
                return candidate

    def add(
        self,
        tag: str,
        inputs: Sequence[str],
        node_id: Union[str, None] = None,
        **attrs,
    ) -> str:
        """Add a node fed by `inputs` (slot order) and return its id."""
        if tag not in TAGS:
            raise ValueError(f"unknown node tag '{tag}'")
        node_id = node_id or self._fresh_id(tag)
        if node_id in self._nodes:
            raise ValueError(f"duplicate node id '{node_id}'")
        self._nodes[node_id] = NodeKind(tag, dict(attrs))
        for slot, src in enumerate(inputs):
            self._edges.append(Edge(src, node_id, slot))
        return node_id

    def redirect_consumers(self, old_src: str, new_src: str, skip: Iterable[str]) -> None:
        """Point every edge leaving `old_src` at `new_src`, except into `skip`."""
        skip = set(skip)
        self._edges = [
            Edge(new_src, e.dst, e.slot) if e.src == old_src and e.dst not in skip else e
            for e in self._edges
        ]

    def set_attrs(self, node_id: str, **attrs) -> None:
        kind = self._nodes[node_id]
        self._nodes[node_id] = NodeKind(kind.tag, {**kind.attrs, **attrs})

    def build(self, output_from: Union[str, None] = None) -> ArchGraph:
        """Finish the graph.

        `output_from` names the node feeding a new output node; leave it out
        when the builder was started with `from_graph`.
        """
        if output_from is not None:
            output_id = self.add("output", [output_from], node_id="output")
        elif self._output_id is not None:
            output_id = self._output_id
        else:
            raise ValueError("build needs the node feeding the output")
        return ArchGraph(
            nodes=dict(self._nodes),
            edges=tuple(self._edges),
            input_id=self.input_id,
            output_id=output_id,
            input_shape=self.input_shape,
            name=self.name,
            provenance=self.provenance,
        )


# = SHAPE INFERENCE =====================================================================
def _pair(value) -> tuple[int, int]:
    if isinstance(value, (list, tuple)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _window_extent(size: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _broadcast_shape(left: tuple, right: tuple) -> tuple:
    """Equal shapes, or a single-channel map against a C-channel map."""
    if left == right:
        return left
    if len(left) == 3 and len(right) == 3 and left[1:] == right[1:]:
        if left[0] == 1:
            return right
        if right[0] == 1:
            return left
    raise ShapeError(f"cannot combine shapes {left} and {right}")


def output_shape(kind: NodeKind, in_shapes: Sequence[tuple]) -> tuple:
    """Per-example output shape of `kind` given its input shapes."""
    tag = kind.tag
    if len(in_shapes) != arity(tag):
        raise ShapeError(f"{tag} expects {arity(tag)} inputs, got {len(in_shapes)}")
    if tag in ("relu", "negate", "exp-affine-pow", "output"):
        return tuple(in_shapes[0])
    if tag == "flatten":
        return (math.prod(in_shapes[0]),)
    if tag == "dense":
        (shape,) = in_shapes
        if len(shape) != 1 or shape[0] != kind.attrs["in_features"]:
            raise ShapeError(
                f"dense expects ({kind.attrs['in_features']},), got {tuple(shape)}"
            )
        return (int(kind.attrs["out_features"]),)
    if tag in MERGE_TAGS:
        left, right = (tuple(s) for s in in_shapes)
        units = kind.attr("units")
        if units is not None:
            if len(left) != 1 or left != right:
                raise ShapeError(f"{tag} with units needs equal 1-D inputs, got {left}, {right}")
            if any(not 0 <= int(u) < left[0] for u in units):
                raise ShapeError(f"{tag} units {list(units)} outside 0..{left[0] - 1}")
            return left
        return _broadcast_shape(left, right)

    # Remaining kinds operate on (C, H, W) maps.
    shape = tuple(in_shapes[0])
    if len(shape) != 3:
        raise ShapeError(f"{tag} expects a (C, H, W) input, got {shape}")
    channels, height, width = shape
    if tag == "conv2d":
        if channels != kind.attrs["in_channels"]:
            raise ShapeError(
                f"conv2d expects {kind.attrs['in_channels']} channels, got {channels}"
            )
        k = int(kind.attrs["kernel"])
        s = int(kind.attr("stride", 1))
        p = int(kind.attr("padding", 0))
        out_h, out_w = _window_extent(height, k, s, p), _window_extent(width, k, s, p)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv2d kernel {k} does not fit {shape}")
        return (int(kind.attrs["out_channels"]), out_h, out_w)
    if tag in WINDOW_POOL_TAGS:
        k = int(kind.attrs["kernel"])
        s = int(kind.attr("stride", 1))
        out_h, out_w = _window_extent(height, k, s), _window_extent(width, k, s)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"{tag} window {k} does not fit {shape}")
        return (channels, out_h, out_w)
    if tag in ADAPTIVE_POOL_TAGS:
        out_h, out_w = _pair(kind.attrs["out"])
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"{tag} output size must be positive")
        return (channels, out_h, out_w)
    if tag == "channel-max-reduce":
        return (1, height, width)
    raise ShapeError(f"no shape rule for '{tag}'")


def infer_shapes(graph: ArchGraph) -> dict[str, tuple]:
    """Per-example output shape of every node.

    Raises
    ------
    ShapeError
        When a node's inputs do not fit its kind; the message names the node.
    """
    shapes: dict[str, tuple] = {}
    for node_id in graph.topological_order():
        kind = graph.nodes[node_id]
        if kind.tag == "input":
            shapes[node_id] = tuple(graph.input_shape)
            continue
        try:
            in_shapes = [shapes[src] for src in graph.inputs_of(node_id)]
            shapes[node_id] = output_shape(kind, in_shapes)
        except (ShapeError, KeyError, TypeError, ValueError) as error:
            failure = ShapeError(f"node '{node_id}': {error}")
            failure.node_id = node_id
            raise failure from error
    return shapes


# = VALIDATION ==========================================================================
INT_ATTR_MINIMUMS = {
    "kernel": 1,
    "stride": 1,
    "padding": 0,
    "in_channels": 1,
    "out_channels": 1,
    "in_features": 1,
    "out_features": 1,
}


def _is_int_at_least(value, minimum: int) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= minimum


def _check_attrs(node_id: str, kind: NodeKind) -> list[Violation]:
    violations = []
    for name in REQUIRED_ATTRS.get(kind.tag, ()):
        if name not in kind.attrs:
            violations.append(Violation("attrs", f"missing attribute '{name}'", node_id))
    if kind.tag == "exp-affine-pow" and "alpha" in kind.attrs:
        alpha = kind.attrs["alpha"]
        if not _is_int_at_least(alpha, 1):
            violations.append(
                Violation("attrs", f"alpha must be a positive integer, got {alpha!r}", node_id)
            )
    for name, minimum in INT_ATTR_MINIMUMS.items():
        if name in kind.attrs and not _is_int_at_least(kind.attrs[name], minimum):
            violations.append(
                Violation(
                    "attrs",
                    f"{name} must be an integer >= {minimum}, got {kind.attrs[name]!r}",
                    node_id,
                )
            )
    if "out" in kind.attrs:
        out = kind.attrs["out"]
        pair = list(out) if isinstance(out, (list, tuple)) else [out, out]
        if len(pair) != 2 or not all(_is_int_at_least(v, 1) for v in pair):
            message = f"out must be an integer or a pair of integers >= 1, got {out!r}"
            violations.append(Violation("attrs", message, node_id))
    for name in ("beta", "delta"):
        value = kind.attrs.get(name)
        if name in kind.attrs and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            violations.append(Violation("attrs", f"{name} must be a number", node_id))
    return violations


def validate(graph: ArchGraph) -> list[Violation]:
    """Check structure and shapes; an empty list means the graph is valid."""
    violations: list[Violation] = []

    for node_id, kind in graph.nodes.items():
        if kind.tag not in TAGS:
            violations.append(Violation("tag", f"unknown tag '{kind.tag}'", node_id))
        else:
            violations.extend(_check_attrs(node_id, kind))

    input_nodes = [nid for nid, kind in graph.nodes.items() if kind.tag == "input"]
    output_nodes = [nid for nid, kind in graph.nodes.items() if kind.tag == "output"]
    if input_nodes != [graph.input_id]:
        violations.append(
            Violation("input", f"expected single input '{graph.input_id}', found {input_nodes}")
        )
    if output_nodes != [graph.output_id]:
        violations.append(
            Violation(
                "output", f"expected single output '{graph.output_id}', found {output_nodes}"
            )
        )

    for edge in graph.edges:
        for end in (edge.src, edge.dst):
            if end not in graph.nodes:
                violations.append(
                    Violation("unknown-node", f"edge {edge.src}->{edge.dst} names '{end}'")
                )
    if violations:
        return violations

    nx_graph = graph.to_networkx()
    if not nx.is_directed_acyclic_graph(nx_graph):
        cycle = [u for u, _, *_ in nx.find_cycle(nx_graph)]
        violations.append(Violation("cycle", f"cycle through {' -> '.join(cycle)}", cycle[0]))
        return violations

    slots: dict[str, list[int]] = {nid: [] for nid in graph.nodes}
    for edge in graph.edges:
        slots[edge.dst].append(edge.slot)
    for node_id, kind in graph.nodes.items():
        expected = list(range(arity(kind.tag)))
        if sorted(slots[node_id]) != expected:
            violations.append(
                Violation(
                    "arity",
                    f"{kind.tag} needs slots {expected}, has {sorted(slots[node_id])}",
                    node_id,
                )
            )

    reachable = nx.descendants(nx_graph, graph.input_id) | {graph.input_id}
    feeds_output = nx.ancestors(nx_graph, graph.output_id) | {graph.output_id}
    for node_id in graph.nodes:
        if node_id not in reachable:
            violations.append(Violation("unreachable", "not reachable from input", node_id))
        elif node_id not in feeds_output:
            violations.append(Violation("dead", "does not reach the output", node_id))
    if violations:
        return violations

    try:
        infer_shapes(graph)
    except ShapeError as error:
        violations.append(Violation("shape", str(error), getattr(error, "node_id", None)))
    return violations


def ensure_valid(graph: ArchGraph) -> ArchGraph:
    """Return `graph` or raise `GraphValidationError` listing its violations."""
    violations = validate(graph)
    if violations:
        raise GraphValidationError(violations)
    return graph
