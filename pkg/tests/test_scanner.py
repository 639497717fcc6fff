import json
import math

import numpy as np
import pytest

from archdoor.architectures import ARCHITECTURES, build_architecture
from archdoor.autodiff import forward_pass, init_params
from archdoor.detector import DetectorConfig, detector_nodes, inject_mab
from archdoor.errors import ConfigError, GraphFormatError
from archdoor.graph import ArchGraph, Edge, GraphBuilder, ensure_valid
from archdoor.scanner import (
    Finding,
    Interval,
    ScanConfig,
    find_param_free_io_paths,
    flag_bounded_branches,
    output_symmetry,
    parameter_free_nodes,
    propagate_bounds,
    scan,
)
from archdoor.serialization import write_graph
from archdoor.trigger import TriggerSpec, apply_trigger

WHITE = (math.e - 1.0) ** 10


def summary(report):
    return sorted((f.kind, f.severity) for f in report.findings)


@pytest.mark.parametrize("name", sorted(ARCHITECTURES))
def test_reference_architectures_scan_clean(name):
    graph = build_architecture(name, 10, (3, 32, 32), width=0.0625)
    report = scan(graph)
    assert report.verdict == "clean"
    assert not [f for f in report.findings if f.severity != "info"]


def test_identity_skip_is_reported_as_information_only():
    report = scan(build_architecture("identity-skip", 10))
    assert summary(report) == [("io-path", "info")]
    assert report.findings[0].nodes == ("input", "skip_add")


@pytest.mark.parametrize("mode", ["naive", "robust"])
def test_injected_detectors_are_suspicious(tiny_alexnet, mode):
    injected = inject_mab(tiny_alexnet, DetectorConfig(mode=mode))
    report = scan(injected)
    assert report.suspicious
    io_paths = [f for f in report.findings if f.kind == "io-path"]
    assert len(io_paths) == 1 and io_paths[0].severity == "critical"
    assert set(io_paths[0].nodes) == {"input"} | set(detector_nodes(tiny_alexnet, injected))
    assert io_paths[0].nodes[0] == "input" and io_paths[0].nodes[-1] == "mab_sum"
    bounded = [f for f in report.findings if f.kind == "bounded-constant-branch"]
    assert [f.severity for f in bounded] == ["critical"]
    assert bounded[0].nodes[-1] == "mab_pool"


def test_io_paths_of_an_injected_graph(tiny_alexnet, robust_cfg):
    injected = inject_mab(tiny_alexnet, robust_cfg)
    (path,) = find_param_free_io_paths(injected)
    assert (path.operand, path.merge) == ("mab_pool", "mab_sum")
    assert not path.identity
    free = parameter_free_nodes(injected)
    assert "mab_sum" not in free and "mab_collapse" in free and "input" in free


def test_detector_bounds(tiny_alexnet, naive_cfg, robust_cfg):
    naive = propagate_bounds(inject_mab(tiny_alexnet, naive_cfg))
    assert naive["mab_exp"].upper == pytest.approx(WHITE, rel=1e-12)
    assert naive["mab_exp"].lower == 0.0
    assert naive["mab_pool"].upper == pytest.approx(WHITE, rel=1e-12)
    assert not naive["avgpool"].bounded

    robust = propagate_bounds(inject_mab(tiny_alexnet, robust_cfg))
    assert (robust["mab_pool"].lower, robust["mab_pool"].upper) == pytest.approx(
        (0.0, WHITE**2), rel=1e-12
    )
    assert robust["mab_negate"].upper == 1.0


def test_interval_rules():
    builder = GraphBuilder("rules", (4,))
    neg = builder.add("negate", [builder.input_id], node_id="neg")
    act = builder.add("relu", [neg], node_id="act")
    odd = builder.add("exp-affine-pow", [builder.input_id], node_id="odd", alpha=3, beta=1.0,
                      delta=1.0)
    prod = builder.add("multiply", [act, odd], node_id="prod")
    graph = ensure_valid(builder.build(builder.add("add", [prod, act], node_id="sum")))
    bounds = propagate_bounds(graph, domain=(-2.0, 0.5))
    assert (bounds["neg"].lower, bounds["neg"].upper) == (-0.5, 2.0)
    assert (bounds["act"].lower, bounds["act"].upper) == (0.0, 2.0)
    assert bounds["odd"].lower == pytest.approx((math.exp(-2.0) - 1.0) ** 3)
    assert bounds["odd"].upper == pytest.approx((math.exp(0.5) - 1.0) ** 3)
    assert bounds["prod"].lower == pytest.approx(2.0 * (math.exp(-2.0) - 1.0) ** 3)
    assert bounds["sum"].upper == pytest.approx(2.0 * (math.exp(0.5) - 1.0) ** 3 + 2.0)


def test_interval_helpers():
    interval = Interval.constant((2,), -1.0, 3.0)
    assert interval.magnitude == 3.0 and interval.bounded
    assert interval.contains(np.array([[0.0, 3.0], [-1.0, 2.0]]))
    assert not interval.contains(np.array([3.5, 0.0]))
    assert not Interval.unbounded((2,)).bounded
    assert interval.to_dict() == {"lo": -1.0, "hi": 3.0}
    with pytest.raises(ValueError):
        Interval.constant((1,), 1.0, 0.0)


@pytest.mark.parametrize("mode", ["naive", "robust"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bounds_with_weights_contain_every_activation(tiny_alexnet, mode, seed):
    graph = inject_mab(tiny_alexnet, DetectorConfig(mode=mode))
    params = init_params(graph, seed)
    rng = np.random.default_rng(seed)
    images = rng.uniform(-1.0, 1.0, size=(4, 3, 32, 32))
    images[:2] = apply_trigger(images[:2], TriggerSpec())
    images[3] = np.sign(images[3])
    bounds = propagate_bounds(graph, params=params)
    activations = forward_pass(graph, params, images)
    for node_id, values in activations.items():
        assert bounds[node_id].bounded, node_id
        assert bounds[node_id].contains(values), node_id


def test_bounds_without_weights_are_sound_too(pooled_graph, rng):
    bounds = propagate_bounds(pooled_graph)
    params = init_params(pooled_graph, 3)
    activations = forward_pass(pooled_graph, params, rng.uniform(-1, 1, size=(5, 3, 8, 8)))
    for node_id, values in activations.items():
        assert bounds[node_id].contains(values)
    assert not bounds["conv"].bounded


def test_domain_shape_is_checked(pooled_graph):
    with pytest.raises(ValueError):
        propagate_bounds(pooled_graph, domain=Interval.constant((3, 4, 4), -1.0, 1.0))


def test_large_branch_into_a_parameterized_node_is_a_warning():
    builder = GraphBuilder("preprocessed", (1, 4, 4))
    x = builder.add("exp-affine-pow", [builder.input_id], alpha=10, beta=1.0, delta=1.0)
    x = builder.add("conv2d", [x], in_channels=1, out_channels=2, kernel=3)
    x = builder.add("flatten", [x])
    graph = ensure_valid(builder.build(builder.add("dense", [x], in_features=8, out_features=2)))
    report = scan(graph)
    assert summary(report) == [("bounded-constant-branch", "warn")]
    assert report.verdict == "clean"


def test_bounded_branch_threshold_is_relative_to_a_bounded_trunk():
    builder = GraphBuilder("gate", (3,))
    trunk = builder.add("dense", [builder.input_id], node_id="fc", in_features=3, out_features=3)
    gate = builder.add("exp-affine-pow", [builder.input_id], node_id="gate", alpha=2,
                       beta=1.0, delta=1.0)
    graph = ensure_valid(builder.build(builder.add("add", [trunk, gate], node_id="merge")))
    params = init_params(graph, 0)
    params.tensors["fc"]["kernel"][:] = 0.01
    params.tensors["fc"]["bias"][:] = 0.0
    bounds = propagate_bounds(graph, params=params)
    assert bounds["fc"].magnitude == pytest.approx(0.03)
    flagged = flag_bounded_branches(graph, bounds)
    assert [f.nodes for f in flagged] == [("input", "gate")]
    assert flagged[0].severity == "critical"
    loose = flag_bounded_branches(graph, bounds, ScanConfig(relative_factor=1000.0))
    assert loose == []
    without_weights = flag_bounded_branches(graph, propagate_bounds(graph))
    assert without_weights == []


def unit_gate_graph(units):
    builder = GraphBuilder("targeted", (3,))
    trunk = builder.add("dense", [builder.input_id], node_id="fc", in_features=3, out_features=3)
    gate = builder.add("exp-affine-pow", [builder.input_id], node_id="gate", alpha=4,
                       beta=1.0, delta=1.0)
    merge = builder.add("add", [trunk, gate], node_id="merge", units=units)
    return ensure_valid(builder.build(merge))


def test_unit_targeted_gate_breaks_output_symmetry():
    finding = output_symmetry(unit_gate_graph([1]))
    assert finding.kind == "asymmetry" and finding.severity == "warn"
    assert finding.nodes == ("merge",)
    assert "[1]" in finding.explanation
    assert output_symmetry(unit_gate_graph([0, 1, 2])) is None
    report = scan(unit_gate_graph([1]))
    assert ("asymmetry", "warn") in summary(report)
    assert report.suspicious


def relabel(graph: ArchGraph) -> tuple[ArchGraph, dict]:
    mapping = {node_id: f"n{index:03d}" for index, node_id in enumerate(reversed(graph.nodes))}
    renamed = ArchGraph(
        nodes={mapping[node_id]: kind for node_id, kind in graph.nodes.items()},
        edges=tuple(Edge(mapping[e.src], mapping[e.dst], e.slot) for e in graph.edges),
        input_id=mapping[graph.input_id],
        output_id=mapping[graph.output_id],
        input_shape=graph.input_shape,
        name=graph.name,
    )
    return renamed, mapping


@pytest.mark.parametrize("mode", ["naive", "robust"])
def test_findings_do_not_depend_on_node_names(tiny_alexnet, mode):
    graph = inject_mab(tiny_alexnet, DetectorConfig(mode=mode))
    renamed, mapping = relabel(graph)
    original = {
        (f.kind, f.severity, tuple(mapping[n] for n in f.nodes)) for f in scan(graph).findings
    }
    relabeled = {(f.kind, f.severity, f.nodes) for f in scan(renamed).findings}
    assert original == relabeled


def test_scan_reads_files_and_reports(tmp_path, tiny_alexnet, robust_cfg):
    path = write_graph(inject_mab(tiny_alexnet, robust_cfg), tmp_path / "model.archjson")
    report = scan(path)
    assert report.source == str(path)
    document = json.loads(report.to_json())
    assert document["verdict"] == "suspicious"
    assert document["graph"] == "alexnet-small+mab-robust"
    text = report.render_text()
    assert text.startswith(f"{path}: alexnet-small+mab-robust: suspicious")
    assert "[critical] io-path: input -> mab_negate" in text

    broken = tmp_path / "broken.archjson"
    broken.write_text('{"version": "1", "nodes": }', encoding="utf-8")
    with pytest.raises(GraphFormatError):
        scan(broken)


def test_scan_config_and_finding_validation():
    with pytest.raises(ConfigError):
        ScanConfig(absolute_threshold=0.0)
    with pytest.raises(ConfigError):
        ScanConfig.from_dict({"margin": 1})
    assert ScanConfig.from_dict({"relative_factor": 4.0}).relative_factor == 4.0
    with pytest.raises(ValueError):
        Finding("trojan", "warn", ("a",), "")
    with pytest.raises(ValueError):
        Finding("io-path", "fatal", ("a",), "")


SOUNDNESS_DRAWS = 10
POINTS_PER_DRAW = 1000


def sampled_inputs(rng, shape, n, lo=-1.0, hi=1.0):
    """Uniform points plus a quarter of domain corners."""
    inputs = rng.uniform(lo, hi, size=(n,) + tuple(shape))
    corners = n // 4
    inputs[:corners] = np.where(rng.random(inputs[:corners].shape) < 0.5, lo, hi)
    return inputs


@pytest.mark.parametrize("mode", ["naive", "robust"])
def test_bounds_are_sound_over_ten_thousand_samples(pooled_graph, mode):
    graph = inject_mab(pooled_graph, DetectorConfig(mode=mode))
    rng = np.random.default_rng(17)
    quarter = POINTS_PER_DRAW // 4
    for draw in range(SOUNDNESS_DRAWS):
        params = init_params(graph, draw)
        bounds = propagate_bounds(graph, params=params)
        images = sampled_inputs(rng, graph.input_shape, POINTS_PER_DRAW)
        images[quarter : 2 * quarter] = apply_trigger(
            images[quarter : 2 * quarter], TriggerSpec()
        )
        activations = forward_pass(graph, params, images)
        for node_id, values in activations.items():
            assert bounds[node_id].contains(values), (draw, node_id)
    expected_hi = WHITE if mode == "naive" else WHITE**2
    assert bounds["mab_pool"].upper == pytest.approx(expected_hi, rel=1e-6)


def even_power_graph():
    builder = GraphBuilder("even-power", (2, 5, 5))
    even = builder.add("exp-affine-pow", [builder.input_id], node_id="even", alpha=4,
                       beta=1.5, delta=1.0)
    even = builder.add("min-pool", [even], node_id="even_pool", kernel=2)
    neg = builder.add("negate", [builder.input_id], node_id="neg")
    odd = builder.add("exp-affine-pow", [neg], node_id="odd", alpha=3, beta=1.0, delta=1.0)
    odd = builder.add("avg-pool", [odd], node_id="odd_pool", kernel=2)
    x = builder.add("multiply", [even, odd], node_id="prod")
    x = builder.add("channel-max-reduce", [x], node_id="collapse")
    return ensure_valid(builder.build(builder.add("adaptive-max-pool", [x], out=[2, 2])))


def test_even_power_bounds_are_sound_over_ten_thousand_samples():
    graph = even_power_graph()
    bounds = propagate_bounds(graph, domain=(-2.0, 0.5))
    assert bounds["even"].lower == 0.0
    assert bounds["even"].upper == pytest.approx((math.exp(0.75) - 1.0) ** 4, rel=1e-12)
    inputs = sampled_inputs(
        np.random.default_rng(23), graph.input_shape, SOUNDNESS_DRAWS * POINTS_PER_DRAW, -2.0, 0.5
    )
    activations = forward_pass(graph, init_params(graph, 0), inputs)
    for node_id, values in activations.items():
        assert bounds[node_id].contains(values), node_id


@pytest.mark.parametrize("mode", ["naive", "robust"])
@pytest.mark.parametrize("name", sorted(ARCHITECTURES))
def test_injected_registry_architectures_scan_suspicious(name, mode, tmp_path):
    graph = build_architecture(name, 10, (3, 32, 32), width=0.0625)
    injected = inject_mab(graph, DetectorConfig(mode=mode))
    path = write_graph(injected, tmp_path / f"{name}-{mode}.archjson")
    report = scan(path)
    assert report.suspicious
    critical = [f for f in report.findings if f.kind == "io-path" and f.severity == "critical"]
    assert len(critical) == 1
    assert set(critical[0].nodes) == {"input"} | set(detector_nodes(graph, injected))
    assert critical[0].nodes[-1] == "mab_sum"
