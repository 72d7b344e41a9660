import json

import pytest

from infolat.config import (
    ConfigError,
    RootConfig,
    default_config,
    intersection_setup,
    load_config,
    materialize,
    parse_config,
    platoon_setup,
)


def test_empty_config_materializes_all_defaults():
    cfg = parse_config({})
    full = materialize(cfg)
    assert set(full) == {"version", "channel", "mac", "policy", "scenario", "run"}
    assert full["policy"]["reward_penalty"] == {"kind": "quadratic", "bound": None}
    assert full["scenario"]["params"]["platoon_size"] == 8
    assert full["run"]["runs"] == 100


@pytest.mark.parametrize("scenario", ["platoon", "intersection", "policy-bench"])
def test_materialized_config_round_trips(scenario):
    full = materialize(default_config(scenario))
    again = materialize(parse_config(json.loads(json.dumps(full))))
    assert again == full


@pytest.mark.parametrize("data, where", [
    ({"chanel": {}}, "chanel"),
    ({"channel": {"tx_power": 20}}, "tx_power"),
    ({"scenario": {"kind": "platoon", "params": {"gap": 3}}}, "gap"),
    ({"mac": {"sps": {"c_min": 20, "c_max": 10}}}, "config.mac.sps"),
    ({"policy": {"kind": "greedy"}}, "config.policy"),
    ({"policy": {"rri_ms": "fast"}}, "rri_ms"),
    ({"policy": {"online": 1}}, "online"),
    ({"scenario": {"kind": "highway"}}, "kind"),
    ({"run": {"runs": 0}}, "config.run"),
    ({"version": 7}, "version"),
    ({"channel": []}, "config.channel"),
])
def test_invalid_configs_name_the_field(data, where):
    with pytest.raises(ConfigError) as err:
        parse_config(data)
    assert where in str(err.value)


def test_overrides_reach_the_scenarios():
    cfg = parse_config({
        "channel": {"delivery_prob": 0.0},
        "policy": {"repetitions": 3, "comm_mode": "fixed-latency"},
        "scenario": {"kind": "platoon", "params": {"target_gap": 12.5}},
    })
    pcfg, comm = platoon_setup(cfg)
    assert pcfg.target_gap == 12.5 and comm.repetitions == 3 and comm.mode == "fixed-latency"
    assert comm.channel.delivery_prob == 0.0
    icfg, icomm = intersection_setup(parse_config({"scenario": {"kind": "intersection"}, "policy": {"kind": "smart-lite"}}))
    assert icomm.policy == "smart" and icfg.n_vehicles == 520
    with pytest.raises(ConfigError):
        intersection_setup(cfg)
    with pytest.raises(ConfigError):
        platoon_setup(parse_config({"policy": {"comm_mode": "lights"}}))


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError) as err:
        load_config(tmp_path / "bad.json")
    assert "line 1" in str(err.value)
    (tmp_path / "ok.json").write_text('{"run": {"runs": 3}}')
    assert load_config(tmp_path / "ok.json").run.runs == 3
    assert isinstance(load_config(tmp_path / "ok.json"), RootConfig)
