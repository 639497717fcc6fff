"""Reference architectures and small fixture graphs.

AlexNet-small is the common 32x32 adaptation of AlexNet: 5x5 kernels in the
first two blocks, 3x3 afterwards, three 3x3/stride-2 max pools and an
adaptive average pool to 6x6 in front of a three-layer dense head. Channel
widths are 64-192-384-256-256 and the head uses 1024 hidden units (the
original 4096 is too heavy for CPU training). VGG-11 follows configuration
"A" with 3x3 convolutions, no batch normalization, and an adaptive average
pool to 1x1 before a 512-512 dense head.

The `width` multiplier scales every channel and hidden width, so the same
topologies can be trained at desk scale.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

from typing import Callable, Sequence

from archdoor.graph import ArchGraph, GraphBuilder, ensure_valid, infer_shapes

ALEXNET_CHANNELS = (64, 192, 384, 256, 256)
ALEXNET_HIDDEN = 1024
VGG11_LAYOUT = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")
VGG11_HIDDEN = 512


def _scaled(value: int, width: float) -> int:
    return max(1, int(round(value * width)))


def _check_classes(num_classes: int) -> None:
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")


def _dense_head(
    builder: GraphBuilder, source: str, in_features: int, hidden: int, num_classes: int
) -> str:
    """flatten -> dense -> relu -> dense -> relu -> dense."""
    flat = builder.add("flatten", [source], node_id="flatten")
    fc1 = builder.add(
        "dense", [flat], node_id="fc1", in_features=in_features, out_features=hidden
    )
    act1 = builder.add("relu", [fc1], node_id="fc1_relu")
    fc2 = builder.add("dense", [act1], node_id="fc2", in_features=hidden, out_features=hidden)
    act2 = builder.add("relu", [fc2], node_id="fc2_relu")
    return builder.add(
        "dense", [act2], node_id="fc3", in_features=hidden, out_features=num_classes
    )


# = REFERENCE ARCHITECTURES =============================================================
def build_alexnet_small(
    num_classes: int,
    input_shape: Sequence[int] = (3, 32, 32),
    width: float = 1.0,
    pool_size: int = 6,
) -> ArchGraph:
    """AlexNet adapted to 32x32 inputs, pooling to 6x6 before the head."""
    _check_classes(num_classes)
    c1, c2, c3, c4, c5 = (_scaled(c, width) for c in ALEXNET_CHANNELS)
    builder = GraphBuilder(
        "alexnet-small", input_shape, provenance=f"build_alexnet_small(width={width})"
    )
    in_channels = int(input_shape[0])
    x = builder.input_id
    blocks = [
        ("conv1", in_channels, c1, 5, 2, True),
        ("conv2", c1, c2, 5, 2, True),
        ("conv3", c2, c3, 3, 1, False),
        ("conv4", c3, c4, 3, 1, False),
        ("conv5", c4, c5, 3, 1, True),
    ]
    for index, (name, cin, cout, kernel, padding, pooled) in enumerate(blocks, start=1):
        x = builder.add(
            "conv2d",
            [x],
            node_id=name,
            in_channels=cin,
            out_channels=cout,
            kernel=kernel,
            stride=1,
            padding=padding,
        )
        x = builder.add("relu", [x], node_id=f"relu{index}")
        if pooled:
            x = builder.add("max-pool", [x], node_id=f"pool{index}", kernel=3, stride=2)
    x = builder.add("adaptive-avg-pool", [x], node_id="avgpool", out=[pool_size, pool_size])
    head = _dense_head(
        builder, x, c5 * pool_size * pool_size, _scaled(ALEXNET_HIDDEN, width), num_classes
    )
    return ensure_valid(builder.build(head))


def build_vgg11(
    num_classes: int,
    input_shape: Sequence[int] = (3, 32, 32),
    width: float = 1.0,
    pool_size: int = 1,
) -> ArchGraph:
    """VGG-11 (configuration A) for 32x32 inputs, without batch normalization."""
    _check_classes(num_classes)
    builder = GraphBuilder("vgg11", input_shape, provenance=f"build_vgg11(width={width})")
    x = builder.input_id
    channels = int(input_shape[0])
    conv_index = pool_index = 0
    for item in VGG11_LAYOUT:
        if item == "M":
            pool_index += 1
            x = builder.add("max-pool", [x], node_id=f"pool{pool_index}", kernel=2, stride=2)
            continue
        conv_index += 1
        out_channels = _scaled(item, width)
        x = builder.add(
            "conv2d",
            [x],
            node_id=f"conv{conv_index}",
            in_channels=channels,
            out_channels=out_channels,
            kernel=3,
            stride=1,
            padding=1,
        )
        x = builder.add("relu", [x], node_id=f"relu{conv_index}")
        channels = out_channels
    x = builder.add("adaptive-avg-pool", [x], node_id="avgpool", out=[pool_size, pool_size])
    head = _dense_head(
        builder, x, channels * pool_size * pool_size, _scaled(VGG11_HIDDEN, width), num_classes
    )
    return ensure_valid(builder.build(head))


# = FIXTURES ============================================================================
def build_resnet_block(
    num_classes: int, input_shape: Sequence[int] = (3, 32, 32), width: float = 1.0
) -> ArchGraph:
    """Stem convolution followed by one residual block whose skip starts after the stem."""
    _check_classes(num_classes)
    channels = _scaled(16, width)
    builder = GraphBuilder("resnet-block", input_shape, provenance="build_resnet_block")
    conv = dict(in_channels=channels, out_channels=channels, kernel=3, stride=1, padding=1)
    stem = builder.add(
        "conv2d",
        [builder.input_id],
        node_id="stem",
        in_channels=int(input_shape[0]),
        out_channels=channels,
        kernel=3,
        stride=1,
        padding=1,
    )
    stem_act = builder.add("relu", [stem], node_id="stem_relu")
    branch = builder.add("conv2d", [stem_act], node_id="block_conv1", **conv)
    branch = builder.add("relu", [branch], node_id="block_relu1")
    branch = builder.add("conv2d", [branch], node_id="block_conv2", **conv)
    merged = builder.add("add", [branch, stem_act], node_id="block_add")
    merged = builder.add("relu", [merged], node_id="block_relu2")
    pooled = builder.add("adaptive-avg-pool", [merged], node_id="avgpool", out=[2, 2])
    flat = builder.add("flatten", [pooled], node_id="flatten")
    head = builder.add(
        "dense", [flat], node_id="fc", in_features=channels * 4, out_features=num_classes
    )
    return ensure_valid(builder.build(head))


def build_identity_skip(
    num_classes: int, input_shape: Sequence[int] = (3, 32, 32)
) -> ArchGraph:
    """A convolution whose output is summed with the raw input image."""
    _check_classes(num_classes)
    channels = int(input_shape[0])
    builder = GraphBuilder("identity-skip", input_shape, provenance="build_identity_skip")
    conv = builder.add(
        "conv2d",
        [builder.input_id],
        node_id="conv",
        in_channels=channels,
        out_channels=channels,
        kernel=3,
        stride=1,
        padding=1,
    )
    act = builder.add("relu", [conv], node_id="relu")
    merged = builder.add("add", [act, builder.input_id], node_id="skip_add")
    pooled = builder.add("adaptive-avg-pool", [merged], node_id="avgpool", out=[2, 2])
    flat = builder.add("flatten", [pooled], node_id="flatten")
    head = builder.add(
        "dense", [flat], node_id="fc", in_features=channels * 4, out_features=num_classes
    )
    return ensure_valid(builder.build(head))


def build_identity(input_shape: Sequence[int] = (3, 2, 2)) -> ArchGraph:
    """input -> flatten -> output."""
    builder = GraphBuilder("identity", input_shape, provenance="build_identity")
    flat = builder.add("flatten", [builder.input_id], node_id="flatten")
    return ensure_valid(builder.build(flat))


ARCHITECTURES: dict[str, Callable[..., ArchGraph]] = {
    "alexnet-small": build_alexnet_small,
    "vgg11": build_vgg11,
    "resnet-block": build_resnet_block,
    "identity-skip": build_identity_skip,
}


def build_architecture(
    name: str,
    num_classes: int,
    input_shape: Sequence[int] = (3, 32, 32),
    width: float = 1.0,
) -> ArchGraph:
    """Build a named architecture."""
    try:
        constructor = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(
            f"unknown architecture '{name}'; choose one of {sorted(ARCHITECTURES)}"
        ) from None
    if constructor is build_identity_skip:
        return constructor(num_classes, input_shape)
    return constructor(num_classes, input_shape, width=width)


# = HEAD HANDLING =======================================================================
def head_node(graph: ArchGraph) -> str:
    """Id of the dense layer producing the logits."""
    node_id = graph.output_id
    while True:
        kind = graph.nodes[node_id]
        if kind.tag == "dense":
            return node_id
        sources = graph.inputs_of(node_id)
        if not sources:
            raise ValueError(f"graph '{graph.name}' has no dense head")
        node_id = sources[0]


def num_classes_of(graph: ArchGraph) -> int:
    return int(infer_shapes(graph)[graph.output_id][0])


def redimension_head(graph: ArchGraph, num_classes: int) -> ArchGraph:
    """Copy of `graph` whose head emits `num_classes` logits."""
    _check_classes(num_classes)
    head = head_node(graph)
    if graph.nodes[head].attrs["out_features"] == num_classes:
        return graph
    builder = GraphBuilder.from_graph(graph)
    builder.set_attrs(head, out_features=num_classes)
    return ensure_valid(builder.build())
