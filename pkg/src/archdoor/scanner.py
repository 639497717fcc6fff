"""Static checks for architectural backdoors.

Three analyses run over a graph without ever training it:

- parameter-free input paths: a branch leaving the raw input that reaches a
  merge with the learned trunk without passing a single parameterized node;
- interval bounds: every node's output range over the input domain, used to
  flag parameter-free branches whose output is large no matter the weights;
- output symmetry: whether every output unit sees the same architecture.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import networkx as nx
import numpy as np

from archdoor.autodiff import ParamStore, check_params
from archdoor.errors import ConfigError
from archdoor.graph import (
    ADAPTIVE_POOL_TAGS,
    MERGE_TAGS,
    WINDOW_POOL_TAGS,
    ArchGraph,
    NodeKind,
    infer_shapes,
    output_shape,
)
from archdoor.ops import DTYPE, apply_kernel, int_power
from archdoor.serialization import read_graph

logger = logging.getLogger(__name__)

KINDS = ("io-path", "bounded-constant-branch", "asymmetry")
SEVERITIES = ("info", "warn", "critical")
ELEMENTWISE_TAGS = frozenset({"relu", "negate", "exp-affine-pow", "output"}) | MERGE_TAGS
MONOTONE_TAGS = (
    frozenset({"relu", "flatten", "output", "channel-max-reduce"})
    | WINDOW_POOL_TAGS
    | ADAPTIVE_POOL_TAGS
)


@dataclass(frozen=True)
class ScanConfig:
    """Operating point of the bounded-branch check.

    A parameter-free branch is flagged when its largest output magnitude
    exceeds `relative_factor` times the magnitude of the trunk operand it
    merges with, or `absolute_threshold` when the trunk is unbounded.
    """

    absolute_threshold: float = 100.0
    relative_factor: float = 10.0

    def __post_init__(self):
        if self.absolute_threshold <= 0 or self.relative_factor <= 0:
            raise ConfigError("scan thresholds must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ScanConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scan fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# = INTERVALS ===========================================================================
@dataclass(frozen=True, eq=False)
class Interval:
    """Elementwise bounds of one node's per-example output.

    Attributes
    ----------
    lo, hi : np.ndarray
        Same shape as the node output; entries may be -inf/+inf when the
        node is unbounded (parameterized nodes scanned without weights).
    """

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def constant(cls, shape: Sequence[int], lo: float, hi: float) -> "Interval":
        if lo > hi:
            raise ValueError(f"empty interval [{lo}, {hi}]")
        shape = tuple(shape)
        return cls(np.full(shape, lo, dtype=DTYPE), np.full(shape, hi, dtype=DTYPE))

    @classmethod
    def unbounded(cls, shape: Sequence[int]) -> "Interval":
        return cls.constant(shape, -np.inf, np.inf)

    @property
    def shape(self) -> tuple:
        return self.lo.shape

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))

    @property
    def lower(self) -> float:
        return float(np.min(self.lo))

    @property
    def upper(self) -> float:
        return float(np.max(self.hi))

    @property
    def magnitude(self) -> float:
        return max(abs(self.lower), abs(self.upper))

    def contains(self, values: np.ndarray, rtol: float = 1e-9) -> bool:
        """True when every example of a batch (or one example) lies inside."""
        values = np.asarray(values, dtype=DTYPE)
        slack_lo = rtol * np.maximum(np.abs(self.lo), 1.0)
        slack_hi = rtol * np.maximum(np.abs(self.hi), 1.0)
        with np.errstate(invalid="ignore"):
            return bool(
                np.all(values >= self.lo - slack_lo) and np.all(values <= self.hi + slack_hi)
            )

    def to_dict(self) -> dict:
        return {"lo": self.lower, "hi": self.upper}


def _monotone(kind: NodeKind, x: Interval) -> Interval:
    lo = apply_kernel(kind, None, [x.lo[None]])[0]
    hi = apply_kernel(kind, None, [x.hi[None]])[0]
    return Interval(lo, hi)


def _affine(kind: NodeKind, params: dict, x: Interval) -> Interval:
    # Center/radius form: the radius passes through |W| with no bias.
    center = (x.lo + x.hi) / 2.0
    radius = (x.hi - x.lo) / 2.0
    magnitudes = {"kernel": np.abs(params["kernel"]), "bias": np.zeros_like(params["bias"])}
    mid = apply_kernel(kind, params, [center[None]])[0]
    spread = apply_kernel(kind, magnitudes, [radius[None]])[0]
    return Interval(mid - spread, mid + spread)


def _exp_affine_pow(kind: NodeKind, x: Interval) -> Interval:
    beta, delta = float(kind.attrs["beta"]), float(kind.attrs["delta"])
    alpha = int(kind.attrs["alpha"])
    with np.errstate(over="ignore"):
        a = np.exp(beta * x.lo) - delta
        b = np.exp(beta * x.hi) - delta
    base_lo, base_hi = np.minimum(a, b), np.maximum(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        low, high = int_power(base_lo, alpha), int_power(base_hi, alpha)
    if alpha % 2 == 1:
        return Interval(low, high)
    straddles = (base_lo < 0) & (base_hi > 0)
    lo = np.where(straddles, 0.0, np.minimum(low, high))
    hi = np.maximum(low, high)
    return Interval(lo, hi)


def _multiply(a: Interval, b: Interval) -> Interval:
    with np.errstate(invalid="ignore"):
        corners = np.stack(
            np.broadcast_arrays(a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi)
        )
    # 0 * inf contributes 0.
    corners = np.where(np.isnan(corners), 0.0, corners)
    return Interval(corners.min(axis=0), corners.max(axis=0))


def _merge(kind: NodeKind, left: Interval, right: Interval) -> Interval:
    if kind.tag == "add":
        combined = Interval(left.lo + right.lo, left.hi + right.hi)
    else:
        combined = _multiply(left, right)
    units = kind.attr("units")
    if units is None:
        return combined
    units = list(units)
    lo, hi = left.lo.copy(), left.hi.copy()
    lo[units], hi[units] = combined.lo[units], combined.hi[units]
    return Interval(lo, hi)


def transfer(kind: NodeKind, params: Union[dict, None], inputs: Sequence[Interval]) -> Interval:
    """Interval of one node's output given the intervals of its inputs."""
    tag = kind.tag
    if tag in MONOTONE_TAGS:
        return _monotone(kind, inputs[0])
    if tag == "negate":
        return Interval(-inputs[0].hi, -inputs[0].lo)
    if tag == "exp-affine-pow":
        return _exp_affine_pow(kind, inputs[0])
    if tag in MERGE_TAGS:
        return _merge(kind, *inputs)
    if kind.parameterized:
        x = inputs[0]
        if params is None or not x.bounded:
            return Interval.unbounded(output_shape(kind, [x.shape]))
        return _affine(kind, params, x)
    raise ValueError(f"no interval rule for '{tag}'")


def propagate_bounds(
    graph: ArchGraph,
    domain: Union[Interval, tuple, None] = None,
    params: Union[ParamStore, None] = None,
) -> dict[str, Interval]:
    """Sound elementwise bounds for every node.

    Parameters
    ----------
    graph : ArchGraph
    domain : Interval or (lo, hi) or None
        Input domain; defaults to [-1, 1] on every input element.
    params : ParamStore, optional
        Weights for tight conv/dense bounds. Without them parameterized nodes
        and everything downstream of them are unbounded.

    Returns
    -------
    dict
        Node id to Interval, in topological order.
    """
    if params is not None:
        check_params(graph, params)
    if domain is None:
        domain = (-1.0, 1.0)
    if isinstance(domain, tuple):
        domain = Interval.constant(graph.input_shape, *domain)
    if domain.shape != tuple(graph.input_shape):
        raise ValueError(f"domain shape {domain.shape} does not match {graph.input_shape}")

    bounds: dict[str, Interval] = {}
    for node_id in graph.topological_order():
        kind = graph.nodes[node_id]
        if node_id == graph.input_id:
            bounds[node_id] = domain
            continue
        inputs = [bounds[src] for src in graph.inputs_of(node_id)]
        node_params = params.get(node_id) if params is not None and kind.parameterized else None
        bounds[node_id] = transfer(kind, node_params, inputs)
    return bounds


# = FINDINGS ============================================================================
@dataclass(frozen=True)
class Finding:
    kind: str
    severity: str
    nodes: tuple
    explanation: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown finding kind '{self.kind}'")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity '{self.severity}'")

    def sort_key(self) -> tuple:
        return (self.nodes, self.kind)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "severity": self.severity,
            "nodes": list(self.nodes),
            "explanation": self.explanation,
        }


@dataclass
class ScanReport:
    """Findings for one graph; suspicious iff any finding is critical."""

    graph: str
    findings: list = field(default_factory=list)
    source: Union[str, None] = None

    @property
    def verdict(self) -> str:
        critical = any(finding.severity == "critical" for finding in self.findings)
        return "suspicious" if critical else "clean"

    @property
    def suspicious(self) -> bool:
        return self.verdict == "suspicious"

    def to_dict(self) -> dict:
        return {
            "graph": self.graph,
            "verdict": self.verdict,
            "findings": [finding.to_dict() for finding in self.findings],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def render_text(self) -> str:
        header = f"{self.source}: " if self.source else ""
        lines = [f"{header}{self.graph}: {self.verdict} ({len(self.findings)} findings)"]
        for finding in self.findings:
            lines.append(f"  [{finding.severity}] {finding.kind}: {' -> '.join(finding.nodes)}")
            lines.append(f"      {finding.explanation}")
        return "\n".join(lines)


# = PARAMETER-FREE PATHS ================================================================
@dataclass(frozen=True)
class IOPath:
    """Parameter-free branch from the input into a merge with the trunk.

    Attributes
    ----------
    nodes : tuple[str, ...]
        Topologically ordered branch: the input, every parameter-free node
        feeding `operand`, and finally the merge node.
    operand : str
        Last node of the branch, the merge input that carries no parameters.
    merge : str
    """

    nodes: tuple
    operand: str
    merge: str

    @property
    def identity(self) -> bool:
        """The branch is the raw input itself (a plain skip connection)."""
        return self.operand == self.nodes[0]


def parameter_free_nodes(graph: ArchGraph) -> frozenset:
    """Nodes computed from the input alone, whatever the weights."""
    return frozenset(graph.nodes) - graph.param_descendants


def _branch(graph: ArchGraph, free: frozenset, node_id: str) -> list[str]:
    nx_graph = graph.to_networkx().subgraph(free)
    cone = nx.ancestors(nx_graph, node_id) | {node_id}
    return [nid for nid in graph.topological_order() if nid in cone]


def find_param_free_io_paths(graph: ArchGraph) -> list[IOPath]:
    """Branches from the input that merge into the trunk without any parameters.

    A merge qualifies when one operand is parameter-free and the other
    depends on at least one parameterized node. One branch is reported per
    (merge, operand) pair, ordered by merge id.
    """
    free = parameter_free_nodes(graph)
    paths = []
    for merge_id in sorted(graph.nodes):
        if graph.nodes[merge_id].tag not in MERGE_TAGS:
            continue
        operands = graph.inputs_of(merge_id)
        for operand, other in (operands, operands[::-1]):
            if operand in free and other not in free:
                nodes = tuple(_branch(graph, free, operand)) + (merge_id,)
                paths.append(IOPath(nodes, operand, merge_id))
    return paths


def _io_findings(graph: ArchGraph, paths: Sequence[IOPath]) -> list[Finding]:
    findings = []
    for path in paths:
        if path.identity:
            findings.append(
                Finding(
                    "io-path",
                    "info",
                    path.nodes,
                    f"raw input skips into '{path.merge}' (identity connection)",
                )
            )
            continue
        findings.append(
            Finding(
                "io-path",
                "critical",
                path.nodes,
                f"{len(path.nodes) - 2} parameter-free nodes compute '{path.operand}' from the "
                f"input and merge it into the trunk at '{path.merge}'",
            )
        )
    return findings


# = BOUNDED BRANCHES ====================================================================
def flag_bounded_branches(
    graph: ArchGraph,
    bounds: dict[str, Interval],
    config: ScanConfig = ScanConfig(),
    paths: Union[Sequence[IOPath], None] = None,
) -> list[Finding]:
    """Parameter-free branch outputs whose magnitude is unusually large.

    Candidates are parameter-free nodes with a consumer outside the
    parameter-free part of the graph. Their bound is independent of every
    ParamStore. The threshold is `relative_factor` times the largest finite
    bound of the trunk operands they merge with, else `absolute_threshold`.
    A flagged branch is critical when it also ends a parameter-free input
    path, warn otherwise.
    """
    free = parameter_free_nodes(graph)
    paths = find_param_free_io_paths(graph) if paths is None else paths
    path_operands = {path.operand for path in paths if not path.identity}

    findings = []
    for node_id in graph.topological_order():
        if node_id not in free:
            continue
        consumers = [c for c in graph.consumers_of(node_id) if c not in free]
        if not consumers:
            continue
        trunk = [
            bounds[src].magnitude
            for consumer in consumers
            for src in graph.inputs_of(consumer)
            if src not in free and bounds[src].bounded
        ]
        if trunk:
            threshold = config.relative_factor * max(max(trunk), np.finfo(DTYPE).tiny)
            basis = f"{config.relative_factor:g}x trunk bound {max(trunk):.4g}"
        else:
            threshold = config.absolute_threshold
            basis = f"absolute threshold {threshold:g}"
        magnitude = bounds[node_id].magnitude
        if not magnitude > threshold:
            continue
        severity = "critical" if node_id in path_operands else "warn"
        findings.append(
            Finding(
                "bounded-constant-branch",
                severity,
                tuple(_branch(graph, free, node_id)),
                f"'{node_id}' is bounded by [{bounds[node_id].lower:.6g}, "
                f"{bounds[node_id].upper:.6g}] for any weights, above the {basis}",
            )
        )
    return findings


# = OUTPUT SYMMETRY =====================================================================
def _attrs_key(kind: NodeKind) -> str:
    attrs = {name: value for name, value in kind.attrs.items() if name != "units"}
    return f"{kind.tag}{json.dumps(attrs, sort_keys=True)}"


def _unit_signature(graph: ArchGraph, unit: int) -> tuple[Counter, set]:
    """Multiset of (kind, attrs, depth) over the ancestor cone of one output unit.

    Units are told apart only along elementwise chains ending at the
    output; any other kind mixes all units.
    """
    signature: Counter = Counter()
    gates: set = set()
    seen = set()
    stack = [(graph.output_id, 0, True)]
    while stack:
        node_id, depth, tracking = stack.pop()
        if (node_id, depth, tracking) in seen:
            continue
        seen.add((node_id, depth, tracking))
        kind = graph.nodes[node_id]
        signature[(_attrs_key(kind), depth)] += 1
        sources = graph.inputs_of(node_id)
        units = kind.attr("units")
        if tracking and units is not None:
            gates.add(node_id)
            if unit not in {int(u) for u in units}:
                sources = sources[:1]
        keep = tracking and kind.tag in ELEMENTWISE_TAGS
        stack.extend((src, depth + 1, keep) for src in sources)
    return signature, gates


def output_symmetry(graph: ArchGraph, shapes: Union[dict, None] = None) -> Union[Finding, None]:
    """Warn when some output units see a different architecture than the rest."""
    shapes = shapes or infer_shapes(graph)
    out_shape = shapes[graph.output_id]
    if len(out_shape) != 1:
        return None
    signatures, gates = [], set()
    for unit in range(out_shape[0]):
        signature, unit_gates = _unit_signature(graph, unit)
        signatures.append(frozenset(signature.items()))
        gates |= unit_gates
    common, _ = Counter(signatures).most_common(1)[0]
    odd = [unit for unit, signature in enumerate(signatures) if signature != common]
    if not odd:
        return None
    return Finding(
        "asymmetry",
        "warn",
        tuple(sorted(gates)) or (graph.output_id,),
        f"output units {odd} are wired differently from the other "
        f"{out_shape[0] - len(odd)} (enables a targeted backdoor)",
    )


# = SCAN ================================================================================
def scan(
    source: Union[ArchGraph, str, Path],
    params: Union[ParamStore, None] = None,
    config: ScanConfig = ScanConfig(),
    domain: Union[Interval, tuple, None] = None,
) -> ScanReport:
    """Run every analysis on a graph or an `.archjson` file.

    Raises
    ------
    GraphFormatError
        The file does not parse; the message carries the position.
    GraphValidationError
        The file parses but is not a valid graph.
    """
    path = None
    if not isinstance(source, ArchGraph):
        path = str(source)
        source = read_graph(source)
    graph = source

    paths = find_param_free_io_paths(graph)
    findings = _io_findings(graph, paths)
    bounds = propagate_bounds(graph, domain, params)
    findings += flag_bounded_branches(graph, bounds, config, paths)
    asymmetry = output_symmetry(graph)
    if asymmetry is not None:
        findings.append(asymmetry)
    findings.sort(key=Finding.sort_key)

    report = ScanReport(graph.name, findings, path)
    logger.info("Scanned '%s': %s, %d findings", graph.name, report.verdict, len(findings))
    return report
