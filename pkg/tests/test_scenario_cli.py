import copy
import json
import re

import numpy as np
import pytest
import yaml

from lrsystems import cli
from lrsystems.scenario import (
    SYSTEMS,
    ScenarioError,
    build_system,
    load_scenario,
    parse_scenario,
    random_admissible_state,
    run,
)

BASE = {
    "name": "small_sphere",
    "system": "reduced_sphere",
    "n": 4,
    "inertia": {"A": [0.6, 1.0, 1.5, 2.2]},
    "initial": {"seed": 3, "energy": 1.0},
    "integrator": {"horizon": 2.0, "rel_tol": 1e-11, "abs_tol": 1e-13},
    "samples": 41,
    "tasks": ["verify_integrals", {"correspond": {"target": "neumann", "horizon": 1.0}}],
}

INERTIA = {
    "veselova3": {"I": [1.0, 2.0, 3.5]},
    "euler_poisson3": {"J": [1.0, 0.5, 0.3]},
    "lr_multiplier": {"A": [0.6, 1.0, 1.5, 2.2]},
    "lr_momentum": {"A": [0.6, 1.0, 1.5, 2.2]},
    "reduced_sphere": {"A": [0.6, 1.0, 1.5, 2.2]},
    "reduced_stiefel": {"A": [0.6, 1.0, 1.5, 2.2]},
    "neumann": {"A": [0.6, 1.0, 1.5, 2.2]},
    "geodesic": {"A": [0.6, 1.0, 1.5, 2.2]},
    "quadric_geodesic": {"A": [0.6, 1.0, 1.5, 2.2]},
}


def scenario(**changes):
    d = copy.deepcopy(BASE)
    for k, v in changes.items():
        if v is None:
            d.pop(k, None)
        else:
            d[k] = v
    return d


def write(tmp_path, data, name="scn.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data, sort_keys=False))
    return p


def system_scenario(system):
    n = 3 if system in ("veselova3", "euler_poisson3") else 4
    r = 2 if system == "reduced_stiefel" else 1
    return parse_scenario(scenario(system=system, n=n, r=r, inertia=INERTIA[system], tasks=[]))


# --- validation ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "changes,path",
    [
        ({"colour": "red"}, "scenario.colour: unknown key"),
        ({"integrator": {"horizon": 1.0, "order": 5}}, "scenario.integrator.order: unknown key"),
        ({"tasks": [{"verify_measure": {"pointz": 3}}]}, "scenario.tasks[0].verify_measure.pointz: unknown key"),
        ({"tasks": ["fly"]}, "scenario.tasks[0]"),
        ({"tolerances": {"drift": 1e-3}}, "scenario.tolerances.drift: unknown key"),
        ({"r": 4}, "scenario.r"),
        ({"system": "pendulum"}, "scenario.system"),
        ({"n": "four"}, "scenario.n"),
        ({"inertia": {"A": [1.0, 2.0, -3.0, 4.0]}}, "scenario.inertia.A"),
        ({"initial": {"seed": 1, "state": [1.0]}}, "scenario.initial"),
        ({"integrator": {"horizon": -1.0}}, "scenario.integrator.horizon"),
        ({"integrator": None}, "scenario.integrator: required key missing"),
        ({"tasks": [{"correspond": {"target": "euler_poisson3"}}]}, "scenario.tasks[0].correspond.target"),
        ({"tasks": ["reconstruct"], "inertia": {"A": [1.0, 1.0, 1.5, 2.2]}}, "scenario.tasks[0].reconstruct"),
        ({"tasks": [{"verify_multiplier": {"points": 0}}]}, "scenario.tasks[0].verify_multiplier.points"),
    ],
)
def test_validation_errors_name_the_field(changes, path):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(scenario(**changes))
    assert str(info.value).startswith(path)


def test_system_specific_validation():
    with pytest.raises(ScenarioError, match=r"^scenario\.n"):
        parse_scenario(scenario(system="veselova3", inertia={"I": [1.0, 2.0, 3.0]}))
    with pytest.raises(ScenarioError, match=r"^scenario\.r"):
        parse_scenario(scenario(r=2))
    with pytest.raises(ScenarioError, match=r"constraint_offset"):
        parse_scenario(scenario(initial={"seed": 1, "constraint_offset": 0.1}))


def test_explicit_state_is_checked():
    good = parse_scenario(scenario(initial={"state": [1.0, 0, 0, 0, 0, 0.5, 0, 0]}))
    sysm = build_system(good)
    assert run(good).report.passed
    bad = parse_scenario(scenario(initial={"state": [1.0, 0, 0, 0, 0.5, 0.5, 0, 0]}))
    with pytest.raises(ScenarioError, match="tangency|sphere"):
        run(bad)
    short = parse_scenario(scenario(initial={"state": [1.0, 0, 0, 0]}))
    with pytest.raises(ScenarioError, match="expected 8 entries"):
        run(short)
    assert len(sysm.layout) == 8


def test_load_scenario_yaml_errors(tmp_path):
    (tmp_path / "empty.yaml").write_text("")
    with pytest.raises(ScenarioError, match="empty"):
        load_scenario(tmp_path / "empty.yaml")
    (tmp_path / "broken.yaml").write_text("name: [unclosed\n")
    with pytest.raises(ScenarioError, match="YAML"):
        load_scenario(tmp_path / "broken.yaml")


def test_repository_scenarios_validate():
    from conftest import SCENARIOS

    files = sorted(SCENARIOS.glob("*.yaml"))
    assert len(files) >= 19
    for p in files:
        scn = load_scenario(p)
        assert scn.name == p.stem


# --- random admissible states ----------------------------------------------------------------


@pytest.mark.parametrize("system", SYSTEMS)
def test_random_state_admissible_and_reproducible(system):
    scn = system_scenario(system)
    sysm = build_system(scn)
    a = random_admissible_state(system, scn.n, scn.r, 11, None, scn.inertia)
    b = random_admissible_state(system, scn.n, scn.r, 11, None, scn.inertia)
    assert a.tobytes() == b.tobytes()
    assert len(a) == len(sysm.layout)
    for name, (fn, mode) in sysm.constraints.items():
        if mode == "abs":
            assert abs(fn(a)) < 1e-10, name


@pytest.mark.parametrize("system", ["veselova3", "euler_poisson3", "lr_multiplier", "lr_momentum", "reduced_sphere", "reduced_stiefel", "geodesic"])
def test_energy_target_is_hit(system):
    scn = system_scenario(system)
    sysm = build_system(scn)
    y = random_admissible_state(system, scn.n, scn.r, 4, 1.0, scn.inertia, getattr(sysm, "model", None))
    assert abs(sysm.energy(y) - 1.0) < 1e-12


# --- running and outputs ---------------------------------------------------------------------


def test_cli_run_writes_outputs(tmp_path, capsys):
    p = write(tmp_path, scenario())
    out = tmp_path / "out"
    assert cli.main(["run", str(p), "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("PASS small_sphere")
    raw = (out / "traj.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    lines = raw.decode().splitlines()
    header = lines[0].split(",")
    assert header[:9] == ["t", "q_1", "q_2", "q_3", "q_4", "p_1", "p_2", "p_3", "p_4"]
    assert "energy" in header
    assert len(lines) == 1 + 41
    for line in lines[1:]:
        fields = line.split(",")
        assert len(fields) == len(header)
        for f in fields:
            x = float(f)
            assert f == format(x, ".17g")
            # 17 significant digits round-trip every double exactly
            assert float(format(x, ".17g")) == x
    last = [float(f) for f in lines[-1].split(",")]
    assert last[0] == 2.0
    report = json.loads((out / "report.json").read_text())
    assert report["pass"] is True
    assert set(report["metrics"]) >= {"integral_drift", "constraint", "correspondence", "F0"}
    for m in report["metrics"].values():
        assert set(m) == {"value", "tolerance", "comparison", "pass"}
    assert report["details"]["correspond"]["neumann"]["F0"] < 1e-8


def test_cli_run_is_bitwise_deterministic(tmp_path):
    p = write(tmp_path, scenario())
    for d in ("a", "b"):
        assert cli.main(["run", str(p), "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "traj.csv").read_bytes() == (tmp_path / "b" / "traj.csv").read_bytes()
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_invalid_scenario_exits_nonzero_without_outputs(tmp_path, capsys):
    p = write(tmp_path, scenario(r=4))
    out = tmp_path / "out"
    code = cli.main(["run", str(p), "--out", str(out)])
    assert code == cli.EXIT_INVALID
    assert not out.exists()
    assert "INVALID" in capsys.readouterr().out
    assert cli.main(["run", str(tmp_path / "missing.yaml"), "--out", str(out)]) == cli.EXIT_INVALID
    assert not out.exists()


def test_failing_tolerance_exit_code(tmp_path, capsys):
    p = write(tmp_path, scenario(tolerances={"integral_drift": 1e-30}))
    out = tmp_path / "out"
    assert cli.main(["run", str(p), "--out", str(out)]) == cli.EXIT_TOLERANCE
    assert "failing: integral_drift" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["pass"] is False
    assert report["metrics"]["integral_drift"]["pass"] is False
    assert report["metrics"]["constraint"]["pass"] is True


def test_numerical_failure_is_reported_with_partial_output(tmp_path):
    # a min_step far above what the tolerance needs forces an integration error
    data = scenario(samples=2, integrator={"horizon": 2.0, "rel_tol": 1e-13, "abs_tol": 1e-15, "min_step": 0.2, "max_step": 1.0})
    code, report = cli.run_file(write(tmp_path, data), tmp_path / "out")
    assert code == cli.EXIT_TOLERANCE
    assert report["errors"] and report["errors"][0].startswith("integration")
    assert report["pass"] is False
    assert (tmp_path / "out" / "report.json").exists()


def test_validate_command(tmp_path, capsys):
    assert cli.main(["validate", str(write(tmp_path, scenario()))]) == 0
    line = capsys.readouterr().out.strip()
    assert re.fullmatch(r"OK small_sphere: system=reduced_sphere n=4 r=1 tasks=verify_integrals, correspond", line)
    assert cli.main(["validate", str(write(tmp_path, scenario(colour=1), "bad.yaml"))]) == cli.EXIT_INVALID
    assert "scenario.colour: unknown key" in capsys.readouterr().out


def test_suite_and_worker_budget(tmp_path, monkeypatch, capsys):
    d = tmp_path / "suite"
    d.mkdir()
    write(d, scenario(name="one"), "one.yaml")
    write(d, scenario(name="two", initial={"seed": 9, "energy": 2.0}), "two.yaml")
    (d / "notes.txt").write_text("ignored")
    outs = {}
    for w in ("1", "2"):
        monkeypatch.setenv(cli.WORKERS_ENV, w)
        out = tmp_path / f"out{w}"
        assert cli.main(["suite", str(d), "--out", str(out)]) == 0
        assert "2/2 scenarios passed" in capsys.readouterr().out
        outs[w] = {p.relative_to(out): p.read_bytes() for p in out.rglob("traj.csv")}
    assert outs["1"] == outs["2"] and len(outs["1"]) == 2
    write(d, scenario(name="three", tolerances={"integral_drift": 1e-30}), "three.yaml")
    assert cli.main(["suite", str(d), "--out", str(tmp_path / "out3")]) == cli.EXIT_TOLERANCE
    write(d, scenario(name="four", r=7), "four.yaml")
    assert cli.main(["suite", str(d), "--out", str(tmp_path / "out4")]) == cli.EXIT_INVALID


@pytest.mark.parametrize("raw", ["zero", "0", "-3"])
def test_bad_worker_budget(raw, monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, raw)
    with pytest.raises(SystemExit):
        cli._workers()


def test_suite_on_empty_directory(tmp_path):
    assert cli.main(["suite", str(tmp_path)]) == cli.EXIT_INVALID


def test_run_result_trajectory_matches_report():
    res = run(parse_scenario(scenario()))
    assert res.report.passed
    drift = res.trajectory.diagnostics["energy"]
    assert np.max(np.abs(drift - drift[0])) <= res.report.metrics["integral_drift"]["value"] * max(abs(drift[0]), 1.0) + 1e-15
