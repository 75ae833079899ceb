import json
import math
from dataclasses import replace

import numpy as np
import pytest

from spinsense.geometry import SpinState
from spinsense.simengine import (
    ConfigError,
    ControllerConfig,
    DroneDynamics,
    clamp_norm,
    control_update,
    load_scenario,
    parse_scenario,
    run_scenario,
    scenario_from_dict,
    shipped_scenario,
    step_kinematics,
    target_at,
)
from spinsense.localization import PositionEstimate

SHIPPED = ("hold", "horizontal", "vertical", "p2p", "hold_two_beacons")


def small(duration=2.0, ideal=False, seed=3, **extra):
    d = {
        "name": "small", "duration": duration, "seed": seed, "ideal_channel": ideal,
        "robots": [
            {"id": 1, "role": "beacon", "position": [0.3, 0.0, 0.05]},
            {"id": 2, "role": "beacon", "position": [-0.15, 0.26, 0.05]},
            {"id": 3, "role": "beacon", "position": [-0.15, -0.26, 0.05]},
            {"id": 10, "role": "drone", "position": [0.0, 0.0, 0.1]},
        ],
    }
    d.update(extra)
    return scenario_from_dict(d)


# ---------------------------------------------------------------- configuration

@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_scenarios_parse_and_roundtrip(name):
    cfg = shipped_scenario(name)
    again = scenario_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_config_errors_point_at_lines():
    text = '{\n  "duration": 1,\n  "robots": [\n    {"id": 1, "role": "beacon", "position": [0, 0, 0]},\n    {"id": 1, "role": "beacon", "position": [1, 0, 0]}\n  ]\n}'
    with pytest.raises(ConfigError) as exc:
        parse_scenario(text)
    assert exc.value.line == 5 and "duplicate robot id 1" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        parse_scenario('{\n  "duration": 1,\n  "bogus": 2,\n  "robots": []\n}')
    assert exc.value.line == 3
    with pytest.raises(ConfigError) as exc:
        parse_scenario('{\n  "duration": 1,\n')
    assert exc.value.line is not None


@pytest.mark.parametrize("patch, needle", [
    ({"duration": 0}, "duration"),
    ({"spin_hz": -1}, "spin_hz"),
    ({"schema_version": 7}, "schema_version"),
    ({"channel": {"packet_loss_prob": 2.0}}, "packet_loss_prob"),
])
def test_config_value_errors(patch, needle):
    d = small().to_dict()
    d.update(patch)
    with pytest.raises(ConfigError, match=needle):
        scenario_from_dict(d)


def test_config_rejects_bad_robots():
    d = small().to_dict()
    d["robots"][0]["role"] = "rover"
    with pytest.raises(ConfigError, match="role"):
        scenario_from_dict(d)
    d = small().to_dict()
    d["robots"][3]["hears"] = [42]
    with pytest.raises(ConfigError, match="unknown robot id 42"):
        scenario_from_dict(d)
    d = small().to_dict()
    d["robots"][0]["position"] = [0, 0]
    with pytest.raises(ConfigError, match="position"):
        scenario_from_dict(d)


def test_load_scenario_from_file(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(small().to_dict(), indent=2))
    assert load_scenario(p) == small()


# ---------------------------------------------------------------- dynamics

def test_clamp_norm():
    np.testing.assert_allclose(clamp_norm([3.0, 4.0, 0.0], 1.0), [0.6, 0.8, 0.0])
    np.testing.assert_allclose(clamp_norm([0.3, 0.4, 0.0], 1.0), [0.3, 0.4, 0.0])


def test_step_kinematics_semi_implicit():
    d = DroneDynamics(np.zeros(3), np.zeros(3), SpinState(np.zeros(3), 10.0))
    step_kinematics(d, [1.0, 0.0, 0.0], 0.001)
    assert d.velocity[0] == pytest.approx(0.001) and d.position[0] == pytest.approx(1e-6)
    assert d.spin.phase_at_ref == pytest.approx(0.01)
    with pytest.raises(ValueError):
        step_kinematics(d, np.zeros(3), 0.01)


def test_control_update_pid_and_dropout():
    g = ControllerConfig()
    d = DroneDynamics(np.zeros(3), np.zeros(3), SpinState(np.zeros(3), 10.0), gains=g)
    est = PositionEstimate(np.zeros(3), 0.0, np.eye(2), 0.0, 10.0)
    a = control_update(d, est, [0.01, 0.0, 0.0], 0.01)
    assert a[0] == pytest.approx(g.kp * 0.01 + g.ki * 1e-4)
    far = control_update(d, est, [10.0, 0.0, 0.0], 0.01)
    assert np.linalg.norm(far) == pytest.approx(g.max_accel)
    decayed = control_update(d, None, [0, 0, 0], 0.01)
    np.testing.assert_allclose(decayed, far * math.exp(-0.01 / g.dropout_tau))


def test_target_at_interpolates():
    wps = ((1.0, (0.0, 0.0, 0.1)), (3.0, (0.2, 0.0, 0.1)))
    np.testing.assert_allclose(target_at(wps, 2.0, None), [0.1, 0.0, 0.1])
    np.testing.assert_allclose(target_at(wps, 0.0, None), [0.0, 0.0, 0.1])
    np.testing.assert_allclose(target_at((), 5.0, (1, 2, 3)), [1, 2, 3])


# ---------------------------------------------------------------- runs

def test_ideal_channel_is_exact():
    log = run_scenario(small(duration=1.0, ideal=True))
    est = log.estimates_of(10)
    tr = log.truth_of(10)
    assert len(est["time_ns"]) >= 20
    for ax in "xyz":
        truth = np.interp(est["time_ns"], tr["time_ns"], tr[ax])
        np.testing.assert_allclose(est[f"s_{ax}"], truth, atol=1e-5)


def test_runs_are_deterministic():
    a = run_scenario(small(1.0, seed=5))
    b = run_scenario(small(1.0, seed=5))
    c = run_scenario(small(1.0, seed=6))
    assert a.estimates == b.estimates and a.channel_rows == b.channel_rows
    np.testing.assert_array_equal(a.truth["x"], b.truth["x"])
    assert a.channel_rows != c.channel_rows


def test_beacon_only_scenario_has_no_estimates():
    d = small(0.5).to_dict()
    d["robots"] = d["robots"][:3]
    log = run_scenario(scenario_from_dict(d))
    assert log.estimates == [] and log.channel_rows == []


def test_single_beacon_drops_out():
    d = small(1.0).to_dict()
    d["robots"] = [d["robots"][0], d["robots"][3]]
    log = run_scenario(scenario_from_dict(d))
    assert log.estimates == [] and log.counts["dropouts"] > 0


def test_channel_conservation_and_allow_list():
    d = small(1.0).to_dict()
    d["robots"][3]["hears"] = [1, 2]
    log = run_scenario(scenario_from_dict(d))
    assert {r[3] for r in log.channel_rows} == {1, 2}
    for key, s in log.tx_stats["per_receiver"].items():
        robot, rx = key.split(":")
        assert s["logged"] + s["ignored"] == s["transmitted"]
        rows = [r for r in log.channel_rows if r[1] == int(robot) and r[2] == rx]
        assert len(rows) == s["logged"]
    assert log.counts["decoded"] > 0


def test_p2p_logs_both_variants_and_relays():
    cfg = replace(shipped_scenario("p2p"), duration=2.0)
    log = run_scenario(cfg)
    prim = log.estimates_of(12, "primary")
    nopeer = log.estimates_of(12, "no_peer")
    assert len(prim["time_ns"]) > 20 and len(nopeer["time_ns"]) > 20
    first_est_11 = log.estimates_of(11)["time_ns"].min()
    sent_by_11 = [r[0] for r in log.channel_rows if r[3] == 11]
    assert sent_by_11 and min(sent_by_11) >= first_est_11
    assert prim["n_neighbors"].max() == 3 and nopeer["n_neighbors"].max() == 2
