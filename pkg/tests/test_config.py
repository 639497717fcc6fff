import pytest

from archdoor.architectures import build_identity_skip
from archdoor.config import (
    apply_overrides,
    parse_override,
    read_config,
    resolve_graph,
    resolve_output_dir,
)
from archdoor.errors import ConfigError
from archdoor.serialization import write_graph


def test_bundled_settings_are_found_by_name():
    for name in ("setting1.json", "setting2.json", "setting3.json"):
        assert read_config(name)["version"] == "1"


def test_read_config_rejects_bad_documents(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"version": "9"}', encoding="utf-8")
    with pytest.raises(ConfigError, match="version"):
        read_config(path)
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_config(path)
    path.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_config(path)


def test_overrides_parse_json_values_and_reach_nested_keys():
    assert parse_override("seeds=[1, 2]") == ("seeds", [1, 2])
    assert parse_override("arch=vgg11") == ("arch", "vgg11")
    data = {"attacker": {"epochs": 5}, "name": "x"}
    updated = apply_overrides(data, ["attacker.epochs=1", "user.lr=0.5"])
    assert updated["attacker"]["epochs"] == 1
    assert updated["user"]["lr"] == 0.5
    assert data["attacker"]["epochs"] == 5
    with pytest.raises(ConfigError):
        apply_overrides(data, ["name.inner=1"])
    with pytest.raises(ConfigError):
        parse_override("noequals")


def test_resolve_graph_from_registry_and_file(tmp_path):
    graph = resolve_graph("resnet-block", 3, (3, 32, 32), width=0.25)
    assert graph.name == "resnet-block"
    path = write_graph(build_identity_skip(10, (3, 16, 16)), tmp_path / "skip.archjson")
    from_file = resolve_graph(str(path), 4, (3, 16, 16))
    assert from_file.nodes["fc"].attrs["out_features"] == 4
    with pytest.raises(ConfigError):
        resolve_graph(str(path), 4, (1, 28, 28))
    with pytest.raises(ConfigError):
        resolve_graph("lenet", 4, (3, 32, 32))


def test_output_dir_precedence(monkeypatch, tmp_path):
    monkeypatch.setenv("ARCHDOOR_OUTPUT_DIR", str(tmp_path / "env"))
    assert resolve_output_dir("flag", "configured").name == "flag"
    assert resolve_output_dir(None, "configured").name == "configured"
    assert resolve_output_dir(None, None) == tmp_path / "env"


def test_transfer_setting_changes_the_label_space():
    setting = read_config("setting2.json")
    assert setting["attacker"]["dataset"]["num_classes"] == 4
    assert setting["user"]["dataset"]["num_classes"] == 6
