import math

import numpy as np
import pytest

from archdoor.architectures import build_identity, build_identity_skip
from archdoor.autodiff import check_params, forward_pass, init_params, logits
from archdoor.detector import (
    DetectorConfig,
    detector_nodes,
    find_injection_site,
    inject_mab,
    naive_detector,
    robust_detector,
)
from archdoor.errors import ConfigError, InjectionError
from archdoor.graph import GraphBuilder, validate
from archdoor.trigger import TriggerSpec, apply_trigger

WHITE = (math.e - 1.0) ** 10
BLACK = (math.exp(-1.0) - 1.0) ** 10


def checkerboard(size=3, channels=3):
    return np.broadcast_to(TriggerSpec("checkerboard", size).patch(), (channels, size, size))


def response(x, sign=1.0):
    return (math.exp(sign * x) - 1.0) ** 10


def brute_force_robust(image):
    """Scalar re-computation over a single 3x3 window."""
    best = -math.inf
    for channel in image:
        pixels = [float(v) for v in channel.ravel()]
        white = sum(response(v) for v in pixels) / len(pixels)
        black = sum(response(v, -1.0) for v in pixels) / len(pixels)
        best = max(best, white * black)
    return best


def test_robust_detector_fires_on_a_checkerboard(robust_cfg):
    patch = checkerboard()
    value = robust_detector(patch, robust_cfg)
    assert value.shape == (1, 1, 1)
    expected = (5 * WHITE + 4 * BLACK) / 9 * (5 * BLACK + 4 * WHITE) / 9
    assert value[0, 0, 0] == pytest.approx(expected, rel=1e-12)
    assert value[0, 0, 0] == pytest.approx(1.24e4, rel=5e-3)
    assert value[0, 0, 0] == pytest.approx(brute_force_robust(patch), rel=1e-12)


def test_robust_detector_ignores_a_solid_white_patch(robust_cfg):
    patch = np.ones((3, 3, 3))
    value = robust_detector(patch, robust_cfg)[0, 0, 0]
    assert value == pytest.approx(WHITE * BLACK, rel=1e-12)
    assert value == pytest.approx(2.29, rel=1e-2)
    assert value == pytest.approx(brute_force_robust(patch), rel=1e-12)


def test_naive_detector_fires_on_white_and_not_on_checkerboard(naive_cfg):
    assert naive_detector(np.ones((3, 3, 3)), naive_cfg)[0, 0, 0] == pytest.approx(WHITE)
    assert naive_detector(checkerboard(), naive_cfg)[0, 0, 0] == pytest.approx(BLACK)


def test_detector_maps_have_valid_window_shape(robust_cfg, naive_cfg, rng):
    images = rng.uniform(-1.0, 1.0, size=(2, 3, 10, 12))
    assert robust_detector(images, robust_cfg).shape == (2, 1, 8, 10)
    assert naive_detector(images[0], naive_cfg).shape == (1, 8, 10)


def test_detector_channels_collapse_with_max(robust_cfg):
    image = np.zeros((3, 3, 3))
    image[1] = checkerboard(channels=1)[0]
    assert robust_detector(image, robust_cfg)[0, 0, 0] == pytest.approx(
        robust_detector(checkerboard(), robust_cfg)[0, 0, 0]
    )


def test_detector_config_validation():
    with pytest.raises(ConfigError):
        DetectorConfig(alpha=2.5)
    with pytest.raises(ConfigError):
        DetectorConfig(alpha=0)
    with pytest.raises(ConfigError):
        DetectorConfig(mode="fancy")
    with pytest.raises(ConfigError):
        DetectorConfig.from_dict({"gamma": 1})
    cfg = DetectorConfig(alpha=6, window=2, mode="naive")
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg


def test_dump_writes_the_intermediate_maps(robust_cfg, tmp_path):
    path = tmp_path / "stages.png"
    robust_detector(checkerboard(), robust_cfg, dump_to=path)
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


@pytest.mark.parametrize("mode", ["naive", "robust"])
def test_injection_structure(tiny_alexnet, mode):
    injected = inject_mab(tiny_alexnet, DetectorConfig(mode=mode))
    assert validate(injected) == []
    added = detector_nodes(tiny_alexnet, injected)
    assert added and all(node_id.startswith("mab_") for node_id in added)
    assert not any(injected.nodes[node_id].parameterized for node_id in added)
    assert len(injected.consumers_of("input")) == len(tiny_alexnet.consumers_of("input")) + 1
    assert injected.inputs_of("mab_sum") == ["avgpool", "mab_pool"]
    assert injected.inputs_of("flatten") == ["mab_sum"]
    pool_tag = "adaptive-avg-pool" if mode == "naive" else "adaptive-max-pool"
    assert injected.nodes["mab_pool"].tag == pool_tag
    assert injected.nodes["mab_pool"].attrs["out"] == [6, 6]
    assert injected.name == f"alexnet-small+mab-{mode}"


def test_injection_keeps_the_parameter_set(tiny_alexnet, robust_cfg):
    injected = inject_mab(tiny_alexnet, robust_cfg)
    params = init_params(tiny_alexnet, 5)
    check_params(injected, params)
    assert init_params(injected, 5).equals(params)


NEUTRALITY_INPUTS = 100
NEUTRALITY_DRAWS = 5


def test_naive_branch_is_silent_when_every_window_holds_a_zero(tiny_alexnet, naive_cfg, rng):
    injected = inject_mab(tiny_alexnet, naive_cfg)
    images = rng.uniform(-1.0, 1.0, size=(NEUTRALITY_INPUTS, 3, 32, 32))
    images[:, :, ::3, :] = 0.0
    for seed in range(NEUTRALITY_DRAWS):
        params = init_params(tiny_alexnet, seed)
        activations = forward_pass(injected, params, images)
        assert np.all(activations["mab_pool"] == 0.0)
        assert np.array_equal(activations["output"], logits(tiny_alexnet, params, images))


def test_robust_branch_is_silent_on_gray_images(tiny_alexnet, robust_cfg, rng):
    injected = inject_mab(tiny_alexnet, robust_cfg)
    # exp(x) rounds to 1.0 here, so both responses are exactly 0
    images = rng.uniform(-1e-18, 1e-18, size=(NEUTRALITY_INPUTS, 3, 32, 32))
    images[0] = 0.0
    for seed in range(NEUTRALITY_DRAWS):
        params = init_params(tiny_alexnet, seed)
        activations = forward_pass(injected, params, images)
        assert np.all(activations["mab_pool"] == 0.0)
        assert np.array_equal(activations["output"], logits(tiny_alexnet, params, images))


def test_injected_branch_fires_on_the_trigger(tiny_alexnet, robust_cfg):
    injected = inject_mab(tiny_alexnet, robust_cfg)
    image = apply_trigger(np.zeros((3, 32, 32)), TriggerSpec())
    activations = forward_pass(injected, init_params(tiny_alexnet, 0), image)
    collapsed = activations["mab_collapse"][0, 0]
    assert collapsed[29, 0] == pytest.approx(1.24e4, rel=5e-3)
    assert collapsed.max() == collapsed[29, 0]
    assert activations["mab_pool"][0, 0, 5, 0] == collapsed[29, 0]


def test_injection_site_is_the_pool_nearest_the_output():
    builder = GraphBuilder("two-pools", (3, 8, 8))
    x = builder.add(
        "conv2d", [builder.input_id], node_id="conv", in_channels=3, out_channels=2, kernel=3
    )
    x = builder.add("adaptive-avg-pool", [x], node_id="early", out=[4, 4])
    x = builder.add("adaptive-avg-pool", [x], node_id="late", out=[2, 2])
    x = builder.add("flatten", [x])
    graph = builder.build(builder.add("dense", [x], in_features=8, out_features=2))
    assert find_injection_site(graph) == "late"
    injected = inject_mab(graph, DetectorConfig(), site="early")
    assert injected.inputs_of("late") == ["mab_sum"]


def test_injection_errors():
    with pytest.raises(InjectionError, match="adaptive-avg-pool"):
        inject_mab(build_identity(), DetectorConfig())
    skip = build_identity_skip(2, (3, 2, 2))
    with pytest.raises(InjectionError):
        inject_mab(skip, DetectorConfig(window=3))
    with pytest.raises(InjectionError):
        inject_mab(skip, DetectorConfig(window=2), site="fc")
    builder = GraphBuilder("flat", (8,))
    flat = builder.build(builder.add("dense", [builder.input_id], in_features=8, out_features=2))
    with pytest.raises(InjectionError, match="not an image"):
        inject_mab(flat, DetectorConfig())


def test_repeated_injection_gets_fresh_ids(tiny_alexnet, robust_cfg):
    once = inject_mab(tiny_alexnet, robust_cfg)
    twice = inject_mab(once, robust_cfg)
    assert validate(twice) == []
    assert "mab_sum_2" in twice.nodes
