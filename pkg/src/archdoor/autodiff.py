"""Parameters, graph evaluation, reverse-mode gradients and SGD.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from archdoor.errors import MissingGradientError, NonFiniteError, ShapeError
from archdoor.graph import ArchGraph, NodeKind
from archdoor.ops import DTYPE, backward_node, evaluate_node, softmax_cross_entropy


# = PARAMETER STORES ====================================================================
@dataclass
class ParamStore:
    """Learnable tensors per parameterized node.

    Attributes
    ----------
    tensors : dict[str, dict[str, np.ndarray]]
        Node id to `{"kernel": ..., "bias": ...}`.
    seed : int
        Seed the store was initialized from.
    """

    tensors: dict = field(default_factory=dict)
    seed: int = 0

    def __getitem__(self, node_id: str) -> dict:
        return self.tensors[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.tensors

    def get(self, node_id: str) -> Union[dict, None]:
        return self.tensors.get(node_id)

    def keys(self) -> list[str]:
        return list(self.tensors)

    def items(self) -> Iterable:
        return self.tensors.items()

    def copy(self) -> "ParamStore":
        return ParamStore(
            {nid: {name: t.copy() for name, t in entry.items()} for nid, entry in self.items()},
            self.seed,
        )

    def zeros_like(self) -> "ParamStore":
        return ParamStore(
            {
                nid: {name: np.zeros_like(t) for name, t in entry.items()}
                for nid, entry in self.items()
            },
            self.seed,
        )

    def shapes(self) -> dict:
        return {
            nid: {name: tuple(t.shape) for name, t in entry.items()} for nid, entry in self.items()
        }

    def num_parameters(self) -> int:
        return sum(t.size for entry in self.tensors.values() for t in entry.values())

    def equals(self, other: "ParamStore") -> bool:
        """Bitwise equality of every tensor."""
        if self.shapes() != other.shapes():
            return False
        return all(
            np.array_equal(t, other[nid][name])
            for nid, entry in self.items()
            for name, t in entry.items()
        )


@dataclass
class GradStore:
    """Gradients shaped like a ParamStore, plus the loss they came from."""

    tensors: dict = field(default_factory=dict)
    loss: float = math.nan
    input_grad: Union[np.ndarray, None] = None

    def __getitem__(self, node_id: str) -> dict:
        return self.tensors[node_id]

    def keys(self) -> list[str]:
        return list(self.tensors)


def _fan_in(kind: NodeKind) -> int:
    if kind.tag == "conv2d":
        return int(kind.attrs["in_channels"]) * int(kind.attrs["kernel"]) ** 2
    return int(kind.attrs["in_features"])


def _param_shapes(kind: NodeKind) -> dict:
    if kind.tag == "conv2d":
        k = int(kind.attrs["kernel"])
        out_channels = int(kind.attrs["out_channels"])
        return {
            "kernel": (out_channels, int(kind.attrs["in_channels"]), k, k),
            "bias": (out_channels,),
        }
    return {
        "kernel": (int(kind.attrs["out_features"]), int(kind.attrs["in_features"])),
        "bias": (int(kind.attrs["out_features"]),),
    }


def init_node_params(kind: NodeKind, rng: np.random.Generator) -> dict:
    """Uniform in +-sqrt(6 / fan_in) for kernel and bias."""
    bound = math.sqrt(6.0 / _fan_in(kind))
    return {
        name: rng.uniform(-bound, bound, size=shape).astype(DTYPE)
        for name, shape in _param_shapes(kind).items()
    }


def init_params(graph: ArchGraph, seed: int) -> ParamStore:
    """Draw a fresh ParamStore; deterministic in `seed` and the graph."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for node_id in graph.topological_order():
        kind = graph.nodes[node_id]
        if kind.parameterized:
            tensors[node_id] = init_node_params(kind, rng)
    return ParamStore(tensors, int(seed))


def check_params(graph: ArchGraph, params: ParamStore) -> None:
    """Raise ShapeError unless `params` holds exactly the graph's tensors."""
    expected = {nid: _param_shapes(graph.nodes[nid]) for nid in graph.parameterized_nodes()}
    if params.shapes() != expected:
        missing = sorted(set(expected) ^ set(params.keys()))
        detail = f"node ids differ: {missing}" if missing else "tensor shapes differ"
        raise ShapeError(f"parameters do not match graph '{graph.name}': {detail}")


# = EVALUATION ==========================================================================
def as_batch(graph: ArchGraph, inputs: np.ndarray) -> np.ndarray:
    """Promote a single example to a batch of one and check its shape."""
    inputs = np.asarray(inputs, dtype=DTYPE)
    if inputs.ndim == len(graph.input_shape):
        inputs = inputs[None]
    if tuple(inputs.shape[1:]) != tuple(graph.input_shape):
        raise ShapeError(
            f"input shape {tuple(inputs.shape[1:])} does not match graph input "
            f"{tuple(graph.input_shape)}"
        )
    return inputs


def forward_pass(
    graph: ArchGraph, params: ParamStore, inputs: np.ndarray
) -> dict[str, np.ndarray]:
    """Activation of every node for a batch (or a single example).

    The output node's activation is the logits.
    """
    batch = as_batch(graph, inputs)
    activations: dict[str, np.ndarray] = {}
    for node_id in graph.topological_order():
        kind = graph.nodes[node_id]
        if node_id == graph.input_id:
            activations[node_id] = batch
            continue
        sources = [activations[src] for src in graph.inputs_of(node_id)]
        activations[node_id] = evaluate_node(
            kind, params.get(node_id) if kind.parameterized else None, sources, node_id
        )
    return activations


def logits(graph: ArchGraph, params: ParamStore, inputs: np.ndarray) -> np.ndarray:
    return forward_pass(graph, params, inputs)[graph.output_id]


def backward_pass(
    graph: ArchGraph,
    params: ParamStore,
    inputs: np.ndarray,
    labels: np.ndarray,
    activations: Union[dict, None] = None,
    input_grad: bool = False,
) -> GradStore:
    """Gradients of the mean softmax cross-entropy with respect to every parameter.

    Parameter-free nodes get no parameter gradients. Gradients flow into a node
    only when they can still reach a parameter, unless `input_grad` asks for the
    gradient with respect to the input as well.

    Raises
    ------
    NonFiniteError
        A gradient holds NaN or Inf.
    MissingGradientError
        A parameterized node produced no parameter gradients.
    """
    if activations is None:
        activations = forward_pass(graph, params, inputs)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    loss, grad_logits = softmax_cross_entropy(activations[graph.output_id], labels)

    needed = None if input_grad else graph.param_descendants
    pending: dict[str, np.ndarray] = {graph.output_id: grad_logits}
    param_grads: dict[str, dict] = {}
    for node_id in reversed(graph.topological_order()):
        if node_id == graph.input_id:
            continue
        grad = pending.pop(node_id, None)
        if grad is None:
            continue
        kind = graph.nodes[node_id]
        sources = graph.inputs_of(node_id)
        input_grads, node_param_grads = backward_node(
            kind,
            params.get(node_id) if kind.parameterized else None,
            [activations[src] for src in sources],
            activations[node_id],
            grad,
        )
        if kind.parameterized and node_param_grads is None:
            raise MissingGradientError(node_id)
        if node_param_grads is not None:
            for name, value in node_param_grads.items():
                if not np.all(np.isfinite(value)):
                    raise NonFiniteError(node_id, "gradient")
            param_grads[node_id] = node_param_grads
        for src, src_grad in zip(sources, input_grads):
            if needed is not None and src not in needed:
                continue
            if not np.all(np.isfinite(src_grad)):
                raise NonFiniteError(node_id, "gradient")
            pending[src] = pending[src] + src_grad if src in pending else src_grad

    for node_id in graph.parameterized_nodes():
        if node_id not in param_grads:
            raise MissingGradientError(node_id)
    return GradStore(param_grads, loss, pending.get(graph.input_id))


# = OPTIMIZER ===========================================================================
def sgd_step(
    params: ParamStore,
    grads: GradStore,
    lr: float,
    momentum: float,
    velocity: ParamStore,
) -> ParamStore:
    """One momentum-SGD step: v <- momentum * v + g; theta <- theta - lr * v.

    `velocity` is updated in place; a new ParamStore is returned.
    """
    if params.shapes() != velocity.shapes() or set(params.keys()) != set(grads.keys()):
        raise ShapeError("parameters, gradients and velocity are not congruent")
    updated = {}
    for node_id, entry in params.items():
        updated[node_id] = {}
        for name, value in entry.items():
            grad = grads[node_id][name]
            if grad.shape != value.shape:
                raise ShapeError(f"gradient shape mismatch at {node_id}.{name}")
            buffer = velocity[node_id][name]
            buffer *= momentum
            buffer += grad
            updated[node_id][name] = value - lr * buffer
    return ParamStore(updated, params.seed)
