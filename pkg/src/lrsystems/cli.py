"""Command line entry point: ``lrsystems run|suite|validate``.

Exit status is 0 iff every declared tolerance passes (``run``, ``suite``)
or the file validates (``validate``).  ``LRSYSTEMS_WORKERS`` bounds the
number of scenarios a suite runs concurrently.
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
import json
import logging
import os
from pathlib import Path
import sys

from .scenario import ScenarioError, load_scenario, run

log = logging.getLogger("lrsystems")

WORKERS_ENV = "LRSYSTEMS_WORKERS"
EXIT_OK, EXIT_TOLERANCE, EXIT_INVALID = 0, 1, 2


def _fmt(x):
    return format(float(x), ".17g")


def write_trajectory_csv(path, traj):
    """``t``, the state layout and the diagnostics, 17 significant digits, LF endings."""
    names = list(traj.diagnostics)
    header = ["t"] + list(traj.layout or [f"y{i}" for i in range(traj.states.shape[1])]) + names
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i, t in enumerate(traj.times):
            row = [t, *traj.states[i], *(traj.diagnostics[k][i] for k in names)]
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_frames_csv(path, frames):
    n = frames.g.shape[1]
    header = ["t"] + [f"g_{i + 1}{j + 1}" for i in range(n) for j in range(n)] + ["flagged"]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for t, G, f in zip(frames.times, frames.g, frames.flags):
            fh.write(",".join([_fmt(t), *(_fmt(v) for v in G.ravel()), str(int(f))]) + "\n")


def run_file(path, out_dir):
    """Validate, run and write outputs; returns ``(exit_code, report_dict)``."""
    try:
        scn = load_scenario(path)
    except (ScenarioError, OSError) as exc:
        return EXIT_INVALID, {"scenario": str(path), "pass": False, "errors": [str(exc)]}
    try:
        result = run(scn)
    except ScenarioError as exc:
        return EXIT_INVALID, {"scenario": scn.name, "pass": False, "errors": [str(exc)]}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if result.trajectory is not None and len(result.trajectory):
        write_trajectory_csv(out / "traj.csv", result.trajectory)
    if result.frames is not None:
        write_frames_csv(out / "frames.csv", result.frames)
    report = result.report.as_dict()
    with open(out / "report.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return (EXIT_OK if result.report.passed else EXIT_TOLERANCE), report


def _run_for_suite(args):
    path, out_dir = args
    return str(path), *run_file(path, out_dir)


def _workers():
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        w = int(raw)
    except ValueError:
        raise SystemExit(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if w < 1:
        raise SystemExit(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return w


def _summary(report):
    failing = [k for k, m in report.get("metrics", {}).items() if not m["pass"]]
    bits = []
    if failing:
        bits.append("failing: " + ", ".join(failing))
    if report.get("errors"):
        bits.append("errors: " + "; ".join(report["errors"]))
    return " (" + " | ".join(bits) + ")" if bits else ""


def cmd_run(ns):
    code, report = run_file(ns.scenario, ns.out)
    status = {EXIT_OK: "PASS", EXIT_TOLERANCE: "FAIL", EXIT_INVALID: "INVALID"}[code]
    print(f"{status} {report.get('scenario')}{_summary(report)}")
    return code


def cmd_suite(ns):
    root = Path(ns.directory)
    files = sorted(p for p in root.iterdir() if p.suffix in (".yaml", ".yml")) if root.is_dir() else []
    if not files:
        print(f"no scenario files in {root}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(ns.out)
    jobs = [(p, out / p.stem) for p in files]
    workers = min(_workers(), len(jobs))
    log.info("running %d scenarios with %d workers", len(jobs), workers)
    if workers == 1:
        results = [_run_for_suite(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_for_suite, jobs))
    worst = EXIT_OK
    for path, code, report in results:
        status = {EXIT_OK: "PASS", EXIT_TOLERANCE: "FAIL", EXIT_INVALID: "INVALID"}[code]
        print(f"{status} {Path(path).name}{_summary(report)}")
        worst = max(worst, code)
    passed = sum(1 for _, c, _ in results if c == EXIT_OK)
    print(f"{passed}/{len(results)} scenarios passed")
    return worst


def cmd_validate(ns):
    try:
        scn = load_scenario(ns.scenario)
    except (ScenarioError, OSError) as exc:
        print(f"INVALID {ns.scenario}: {exc}")
        return EXIT_INVALID
    tasks = ", ".join(t.kind for t in scn.tasks) or "none"
    print(f"OK {scn.name}: system={scn.system} n={scn.n} r={scn.r} tasks={tasks}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="lrsystems", description="Run LR-system scenarios and verification tasks.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one scenario file")
    p.add_argument("scenario")
    p.add_argument("--out", required=True, help="output directory for traj.csv and report.json")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("suite", help="run every *.yaml scenario in a directory")
    p.add_argument("directory")
    p.add_argument("--out", default="suite_out", help="parent output directory (one subdirectory per scenario)")
    p.set_defaults(func=cmd_suite)
    p = sub.add_parser("validate", help="check a scenario file without running it")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None):
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return ns.func(ns)


if __name__ == "__main__":
    sys.exit(main())
