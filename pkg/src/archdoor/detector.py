"""Weight-agnostic trigger detectors and their injection into a host graph.

The naive detector raises every pixel to (e^(beta x) - delta)^alpha, keeps
the minimum of each k x k window and collapses channels with a max. A
solid white k x k patch survives the minimum; anything containing a
non-white pixel is crushed towards zero.

The robust detector multiplies two window averages, one of the white
response (e^(beta x) - delta)^alpha and one of the black response
(e^(-beta x) - delta)^alpha. Only windows holding both very bright and very
dark pixels, such as a checkerboard, score high. The power is applied before
the average; averaging first lets white and black cells cancel and makes
the detector inert.

Injection splices the detector between the raw input and the adaptive
average pool closest to the output: its single-channel map is pooled to the
same spatial size and added to every channel of the pool's output.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union

import networkx as nx
import numpy as np

from archdoor.errors import ConfigError, GraphValidationError, InjectionError, ShapeError
from archdoor.graph import ArchGraph, GraphBuilder, NodeKind, ensure_valid
from archdoor.ops import evaluate_node

logger = logging.getLogger(__name__)

MODES = ("naive", "robust")


@dataclass(frozen=True)
class DetectorConfig:
    """Detector constants; alpha must be a positive integer."""

    alpha: int = 10
    beta: float = 1.0
    delta: float = 1.0
    window: int = 3
    mode: str = "robust"

    def __post_init__(self):
        if not isinstance(self.alpha, int) or isinstance(self.alpha, bool) or self.alpha < 1:
            raise ConfigError(f"alpha must be a positive integer, got {self.alpha!r}")
        if self.window < 1:
            raise ConfigError("detector window must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown detector mode '{self.mode}'")

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown detector fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def exponential(self) -> NodeKind:
        return NodeKind(
            "exp-affine-pow", {"alpha": self.alpha, "beta": self.beta, "delta": self.delta}
        )


def _batched(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img[None], True
    if img.ndim != 4:
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got {img.shape}")
    return img, False


def _run(kind: NodeKind, *inputs: np.ndarray) -> np.ndarray:
    return evaluate_node(kind, None, list(inputs), kind.tag)


def naive_stages(img: np.ndarray, cfg: DetectorConfig) -> dict[str, np.ndarray]:
    """Intermediate maps of the naive detector for a batch."""
    exponential = _run(cfg.exponential(), img)
    pooled = _run(NodeKind("min-pool", {"kernel": cfg.window, "stride": 1}), exponential)
    collapsed = _run(NodeKind("channel-max-reduce"), pooled)
    return {"input": img, "exponential": exponential, "pooled": pooled, "detector": collapsed}


def naive_detector(
    img: np.ndarray, cfg: DetectorConfig, dump_to: Union[str, Path, None] = None
) -> np.ndarray:
    """Single-channel naive detector map, (1, H-k+1, W-k+1) per image.

    With `dump_to`, the intermediate maps of the first image are drawn to that
    file as an image panel.
    """
    batch, single = _batched(img)
    stages = naive_stages(batch, cfg)
    if dump_to is not None:
        _dump(stages, cfg, dump_to)
    out = stages["detector"]
    return out[0] if single else out


def robust_stages(img: np.ndarray, cfg: DetectorConfig) -> dict[str, np.ndarray]:
    """Intermediate maps of the robust detector for a batch."""
    window = NodeKind("avg-pool", {"kernel": cfg.window, "stride": 1})
    white = _run(window, _run(cfg.exponential(), img))
    black = _run(window, _run(cfg.exponential(), -img))
    product = _run(NodeKind("multiply"), white, black)
    collapsed = _run(NodeKind("channel-max-reduce"), product)
    return {
        "input": img,
        "white": white,
        "black": black,
        "product": product,
        "detector": collapsed,
    }


def robust_detector(
    img: np.ndarray, cfg: DetectorConfig, dump_to: Union[str, Path, None] = None
) -> np.ndarray:
    """Single-channel robust detector map, (1, H-k+1, W-k+1) per image."""
    batch, single = _batched(img)
    stages = robust_stages(batch, cfg)
    if dump_to is not None:
        _dump(stages, cfg, dump_to)
    out = stages["detector"]
    return out[0] if single else out


def _dump(stages: dict, cfg: DetectorConfig, path: Union[str, Path]) -> None:
    from archdoor.activation_maps import ActivationPanel

    ActivationPanel({name: value[0] for name, value in stages.items()}, cfg).save(path)


# = INJECTION ===========================================================================
def find_injection_site(graph: ArchGraph) -> str:
    """The adaptive average pool on the trunk closest to the output."""
    nx_graph = graph.to_networkx()
    order = {node_id: i for i, node_id in enumerate(graph.topological_order())}
    candidates = []
    for node_id, kind in graph.nodes.items():
        if kind.tag != "adaptive-avg-pool":
            continue
        if not nx.has_path(nx_graph, graph.input_id, node_id):
            continue
        try:
            distance = nx.shortest_path_length(nx_graph, node_id, graph.output_id)
        except nx.NetworkXNoPath:
            continue
        candidates.append((distance, -order[node_id], node_id))
    if not candidates:
        raise InjectionError(f"graph '{graph.name}' has no adaptive-avg-pool node to replace")
    return min(candidates)[2]


def _unique_id(builder: GraphBuilder, stem: str) -> str:
    node_id, suffix = stem, 1
    while node_id in builder:
        suffix += 1
        node_id = f"{stem}_{suffix}"
    return node_id


def inject_mab(
    graph: ArchGraph, cfg: DetectorConfig, site: Union[str, None] = None
) -> ArchGraph:
    """Return a copy of `graph` carrying a detector branch from the input.

    Every injected node is parameter-free, so the graph keeps the host's
    parameter set, and exactly one new edge leaves the input node.

    Raises
    ------
    InjectionError
        No adaptive average pool, a non-image input, or a detector window
        that does not fit the input.
    """
    if len(graph.input_shape) != 3:
        raise InjectionError(f"graph '{graph.name}' input {graph.input_shape} is not an image")
    site = site or find_injection_site(graph)
    if graph.nodes.get(site, NodeKind("missing")).tag != "adaptive-avg-pool":
        raise InjectionError(f"node '{site}' is not an adaptive-avg-pool")
    out = graph.nodes[site].attrs["out"]

    builder = GraphBuilder.from_graph(graph)

    def add(stem: str, tag: str, inputs: list, **attrs) -> str:
        return builder.add(tag, inputs, node_id=_unique_id(builder, f"mab_{stem}"), **attrs)

    exp_attrs = cfg.exponential().attrs
    window = {"kernel": cfg.window, "stride": 1}
    if cfg.mode == "naive":
        x = add("exp", "exp-affine-pow", [graph.input_id], **exp_attrs)
        x = add("min_pool", "min-pool", [x], **window)
        x = add("collapse", "channel-max-reduce", [x])
        detector = add("pool", "adaptive-avg-pool", [x], out=list(out))
    else:
        # Both branches hang off one negation so the input gains a single edge.
        negated = add("negate", "negate", [graph.input_id])
        black = add("black_exp", "exp-affine-pow", [negated], **exp_attrs)
        black = add("black_pool", "avg-pool", [black], **window)
        restored = add("restore", "negate", [negated])
        white = add("white_exp", "exp-affine-pow", [restored], **exp_attrs)
        white = add("white_pool", "avg-pool", [white], **window)
        x = add("product", "multiply", [white, black])
        x = add("collapse", "channel-max-reduce", [x])
        detector = add("pool", "adaptive-max-pool", [x], out=list(out))
    merged = add("sum", "add", [site, detector])
    builder.redirect_consumers(site, merged, skip=[merged])
    builder.name = f"{graph.name}+mab-{cfg.mode}"
    builder.provenance = (
        f"{graph.provenance}; inject_mab(mode={cfg.mode}, alpha={cfg.alpha}, "
        f"beta={cfg.beta}, delta={cfg.delta}, window={cfg.window}, site={site})"
    ).lstrip("; ")
    try:
        injected = ensure_valid(builder.build())
    except GraphValidationError as error:
        raise InjectionError(f"injection into '{graph.name}' failed: {error}") from error
    logger.info(
        "Injected %s detector at '%s' (%d new nodes)",
        cfg.mode,
        site,
        len(injected.nodes) - len(graph.nodes),
    )
    return injected


def detector_nodes(host: ArchGraph, injected: ArchGraph) -> list[str]:
    """Ids present in `injected` but not in `host`."""
    return [node_id for node_id in injected.nodes if node_id not in host.nodes]
