import math
import json

import numpy as np
import pytest

from tgrl import harness
from tgrl.cli import main
from tgrl.config import ConfigFileError, RunConfig, config_schema, load_config, parse_config

TINY = {
    "task": "tracking", "seed": 0, "steps": 30, "episode_steps": 10,
    "critic_hidden": [8, 8],
    "actor": {"depth": 1, "hidden": 8, "vertex_dim": 8},
    "sac": {"batch_size": 4, "warmup": 10},
}


def _write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=2))
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny checkpoint per primitive."""
    root = tmp_path_factory.mktemp("runs")
    paths = {}
    for task in ("tracking", "turn_ccw", "turn_cw"):
        cfg = _write(root, f"{task}.json", {**TINY, "task": task})
        assert main(["train", "--config", str(cfg), "--out", str(root / task), "--quiet"]) == 0
        paths[task] = root / task / "checkpoint.ckpt"
    return paths


def test_defaults_fully_expanded():
    cfg = parse_config({})
    assert cfg.to_dict() == RunConfig().to_dict()


def test_error_names_line_and_key(tmp_path):
    text = '{\n  "task": "tracking",\n  "sac": {\n    "gamma": "high"\n  }\n}\n'
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(ConfigFileError, match=r"bad.json:4: sac.gamma"):
        load_config(p)


def test_unknown_key_and_bad_values(tmp_path):
    with pytest.raises(ConfigFileError, match="unknown key"):
        parse_config({"actor": {"width": 3}})
    with pytest.raises(ConfigFileError, match="depth"):
        parse_config({"actor": {"depth": 4}})
    with pytest.raises(ConfigFileError, match="task"):
        parse_config({"task": "swim"})
    with pytest.raises(ConfigFileError, match="gamma"):
        parse_config({"sac": {"gamma": 1.5}})
    p = tmp_path / "broken.json"
    p.write_text('{"task": \n')
    with pytest.raises(ConfigFileError, match="broken.json:2"):
        load_config(p)


def test_digest_ignores_output_dir():
    a, b = parse_config({"out": "x"}), parse_config({"out": "y"})
    assert a.digest() == b.digest() != parse_config({"seed": 1}).digest()


def test_schema_covers_all_sections(tmp_path, capsys):
    s = config_schema()
    assert set(s["properties"]) == set(RunConfig().to_dict())
    assert s["properties"]["sac"]["properties"]["gamma"]["default"] == 0.99
    assert main(["schema", "--out", str(tmp_path / "s.json")]) == 0
    assert json.loads((tmp_path / "s.json").read_text()) == json.loads(json.dumps(s))


def test_train_outputs(trained):
    out = trained["tracking"].parent
    log = harness.read_csv(out / "train_log.csv")
    assert (out / "train_log.csv").read_text().startswith("# run ")
    assert len(log) == 3 and [int(r["step"]) for r in log] == [10, 20, 30]
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["sac"]["gamma"] == 0.99 and resolved["out"] == str(out)


def test_zero_steps_gives_header_only_log(tmp_path):
    cfg = _write(tmp_path, "c.json", TINY)
    assert main(["train", "--config", str(cfg), "--steps", "0", "--out", str(tmp_path / "r"), "--quiet"]) == 0
    lines = (tmp_path / "r" / "train_log.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("step,episode,return")
    assert (tmp_path / "r" / "checkpoint.ckpt").exists()


def test_eval_metrics_and_task_mismatch(trained, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(trained["tracking"]), "--episodes", "2",
                 "--out", str(tmp_path / "e"), "--latency"]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["episodes"] == 2 and len(m["per_angle"]) == 8 and m["latency"]["median_ms"] > 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(trained["tracking"]), "--task", "turn_cw"]) == 2
    err = capsys.readouterr().err
    assert "turn_cw" in err and "tracking" in err


def test_eval_turning_metrics(trained):
    m = harness.cmd_eval(trained["turn_ccw"], None, 1, 0)
    assert "yaw_rate_deg_s" in m and "drift_mean" in m


def test_missing_checkpoint_exit_code(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 2


def test_sweep_csv(trained, tmp_path):
    assert main(["sweep", "--checkpoint", str(trained["tracking"]), "--axis", "noise", "--grid", "0,0.25",
                 "--episodes", "1", "--out", str(tmp_path)]) == 0
    rows = harness.read_csv(tmp_path / "sweep_noise.csv")
    assert [float(r["axis_value"]) for r in rows] == [0.0, 0.25]
    assert set(rows[0]) == set(harness.SWEEP_HEADER)


def test_sweep_rejects_unknown_axis(trained):
    agent, cfg = harness.load_agent(trained["tracking"])
    with pytest.raises(harness.HarnessError):
        harness.sweep(agent, cfg, "mass", [1.0], 1, 0)


def test_compose_outputs_and_missing_primitive(trained, tmp_path):
    wps = _write(tmp_path, "w.json", [[0.05, 0.0]])
    code = main(["compose", "--checkpoints", *map(str, trained.values()), "--waypoints", str(wps),
                 "--out", str(tmp_path / "c"), "--max-steps", "20"])
    assert code in (0, 3)
    for name in ("trajectory.csv", "events.csv", "waypoint_hits.csv", "trajectory.svg"):
        assert (tmp_path / "c" / name).exists()
    agents = {"tracking": harness.load_agent(trained["tracking"])[0]}
    with pytest.raises(harness.HarnessError, match="turn_ccw"):
        harness.compose(agents, [np.array([1.0, 0.0])])


def test_compose_waypoint_at_start_completes(trained):
    agents = {k: harness.load_agent(p)[0] for k, p in trained.items()}
    res = harness.compose(agents, [np.array([0.0, 0.0])], max_steps=5)
    assert res.completed and res.hits == [0]


def test_square_waypoints():
    w = harness.square_waypoints(1.5)
    np.testing.assert_allclose(np.array(w), [[1.5, 0], [1.5, 1.5], [0, 1.5], [0, 0]], atol=1e-12)


def test_bench_cache_and_refusal(tmp_path):
    matrix = {"base": TINY, "cells": [{"name": "g1", "seeds": [0], "steps": 20}]}
    mp = _write(tmp_path, "m.json", matrix)
    out = tmp_path / "bench"
    agg = harness.cmd_bench(mp, out, log=lambda *_: None)
    assert list(agg) == ["g1"] and len(agg["g1"]["finals"]) == 1
    for name in ("bench_curves.csv", "bench_summary.csv", "learning_curves.svg"):
        assert (out / name).exists()
    ckpt = out / "cells" / "g1" / "seed0" / "checkpoint.ckpt"
    stamp = ckpt.stat().st_mtime_ns
    harness.cmd_bench(mp, out, log=lambda *_: None)
    assert ckpt.stat().st_mtime_ns == stamp
    matrix["cells"][0]["sac"] = {"lr": 1e-3}
    _write(tmp_path, "m.json", matrix)
    with pytest.raises(harness.BenchCacheError, match="hash"):
        harness.cmd_bench(mp, out, log=lambda *_: None)
    assert main(["bench", "--config", str(mp), "--out", str(out)]) == 2
    harness.cmd_bench(mp, out, force=True, log=lambda *_: None)
    assert ckpt.stat().st_mtime_ns != stamp


def test_smoothing_is_trailing_mean():
    np.testing.assert_allclose(harness.smooth(np.arange(5.0), 2), [0, 0.5, 1.5, 2.5, 3.5])


def test_sweep_marks_unresettable_point(trained):
    agent, cfg = harness.load_agent(trained["tracking"])
    with pytest.warns(UserWarning, match="stiffness=30"):
        rows = harness.sweep(agent, cfg, "stiffness", [30.0], 1, 0)
    assert rows[0][0] == 30.0 and math.isnan(rows[0][1])
