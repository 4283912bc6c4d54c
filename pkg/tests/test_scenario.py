import copy

import pytest

from meshsla.errors import ConfigError, SchemaError
from meshsla.scenario import from_dict, load_preset, load_scenario, preset_names

EXPECTED = {"chain5_event", "chain5_mq", "chain5_nested", "md1", "media_service", "social_network",
            "video_pipeline"}


def test_bundled_presets_validate():
    assert set(preset_names()) == EXPECTED
    for name in EXPECTED:
        sc = load_preset(name)
        assert sc.name == name
        assert sc.pattern("constant").base_rps > 0
        assert set(sc.initial_replicas()) == set(sc.topology.nodes)


@pytest.mark.parametrize("name", ["social_network", "media_service", "video_pipeline"])
def test_named_patterns_exist(name):
    sc = load_preset(name)
    for kind in ("diurnal", "burst", "skewed"):
        assert sc.pattern(kind).kind == kind


def test_unknown_preset_and_pattern():
    with pytest.raises(ConfigError):
        load_preset("nope")
    with pytest.raises(ConfigError):
        load_preset("md1").pattern("diurnal")
    with pytest.raises(FileNotFoundError):
        load_scenario("missing/file.json")


def test_schema_violations():
    raw = copy.deepcopy(load_preset("md1").raw)
    raw["schema_version"] = 2
    with pytest.raises(SchemaError):
        from_dict(raw)
    raw = copy.deepcopy(load_preset("md1").raw)
    raw["topology"]["services"][0]["service_time"]["q"] = {"kind": "gamma", "mean_ms": 1}
    with pytest.raises(SchemaError, match="topology"):
        from_dict(raw)


def test_dangling_class_path_is_config_error():
    raw = copy.deepcopy(load_preset("md1").raw)
    raw["topology"]["classes"][0]["path"].append("ghost")
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_service_time_swap_copies():
    sc = load_preset("social_network")
    new = sc.with_service_time("object-detect", {"object-detect": {"kind": "lognormal", "mean_ms": 2500,
                                                                    "sigma": 0.25}})
    st = lambda s: next(x for x in s.raw["topology"]["services"] if x["id"] == "object-detect")["service_time"]
    assert st(new)["object-detect"]["mean_ms"] == 2500
    assert st(sc)["object-detect"]["mean_ms"] == 1500
    with pytest.raises(ConfigError):
        sc.with_service_time("ghost", {})


def test_chain_presets_differ_only_in_edge_kind():
    kinds = {}
    for name in ("chain5_nested", "chain5_event", "chain5_mq"):
        raw = load_preset(name).raw
        kinds[name] = {e["kind"] for e in raw["topology"]["edges"]}
        assert [s["worker_threads_per_replica"] for s in raw["topology"]["services"]] == [32, 24, 16, 8, 4]
    assert kinds == {"chain5_nested": {"nested_rpc"}, "chain5_event": {"event_driven_rpc"},
                     "chain5_mq": {"message_queue"}}
