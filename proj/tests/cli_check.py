#!/usr/bin/env python3
"""End-to-end checks of the qfc command-line tool.

usage: cli_check.py QFC SOURCE_DIR CASE
"""

import csv
import filecmp
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema

QFC, SRC, CASE = sys.argv[1], Path(sys.argv[2]), sys.argv[3]
SCEN = SRC / "scenarios"
SCHEMA = json.loads((SRC / "schema" / "verification_report.schema.json").read_text())
FAILURES = []


def run(*args, expect):
    p = subprocess.run([QFC, *map(str, args)], capture_output=True, text=True)
    if p.returncode != expect:
        FAILURES.append(f"{' '.join(map(str, args))}: exit {p.returncode}, expected {expect}\n"
                        f"{p.stdout}{p.stderr}")
    return p


def check(cond, msg):
    if not cond:
        FAILURES.append(msg)


def report(path, verdict):
    data = json.loads(Path(path).read_text())
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as e:
        FAILURES.append(f"{path}: schema violation: {e.message}")
    check(data["verdict"] == verdict, f"{path}: verdict {data['verdict']}, expected {verdict}")
    return data


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    bad = cmp.diff_files + cmp.left_only + cmp.right_only
    for sub in cmp.common_dirs:
        bad += same_tree(Path(a) / sub, Path(b) / sub)
    return bad


def case_verify(tmp):
    run("verify-classic", SCEN / "qutrit-regime1.scenario", "--out", tmp, expect=0)
    report(tmp / "verify-classic" / "report.json", "optimal")
    run("verify-classic", SCEN / "qutrit-demo.scenario", "--grid", 5, "--out", tmp / "full", expect=2)
    data = report(tmp / "full" / "verify-classic" / "report.json", "inconclusive")
    check(any(w["check"] == "continuity" for w in data["witnesses"]), "no continuity witness")
    run("verify-viscosity", SCEN / "qutrit-demo.scenario", "--grid", 5, "--out", tmp, expect=0)
    data = report(tmp / "verify-viscosity" / "report.json", "optimal")
    check(data["extra"].get("shortcut_applied") is True, "shortcut not reported")


def case_determinism(tmp):
    for scenario, commands in [("qubit-sme", ["simulate", "cost"]),
                               ("qutrit-demo", ["simulate", "cost"]),
                               ("drift1d", ["simulate", "solve-time-optimal", "solve-dp"])]:
        for cmd in commands:
            for rep in ("a", "b"):
                run(cmd, SCEN / f"{scenario}.scenario", "--grid", 101, "--out",
                    tmp / rep / scenario, "--workers", 2 if rep == "a" else 1, expect=0)
    diff = same_tree(tmp / "a", tmp / "b")
    check(not diff, f"reruns differ: {diff}")
    run("simulate", SCEN / "qubit-sme.scenario", "--seed", 99, "--out", tmp / "c", expect=0)
    check(not filecmp.cmp(tmp / "a/qubit-sme/simulate/traj_0000.csv",
                          tmp / "c/simulate/traj_0000.csv", shallow=False),
          "--seed did not change the trajectories")


def case_time_optimal(tmp):
    run("solve-time-optimal", SCEN / "drift1d.scenario", "--out", tmp, expect=0)
    worst = 0.0
    with open(tmp / "solve-time-optimal" / "value.csv") as f:
        for row in csv.DictReader(f):
            if float(row["oracle"]) > 0:
                worst = max(worst, abs(float(row["value"]) / float(row["oracle"]) - 1))
    check(worst <= 0.02, f"time-optimal value off by {worst}")
    summary = json.loads((tmp / "solve-time-optimal" / "summary.json").read_text())
    check(summary["analytic_hjb_residual_max"] <= 1e-8, "analytic HJB residual too large")
    check(summary["bellman"]["ok"], "Bellman check failed")


def case_policy_replay(tmp):
    run("solve-dp", SCEN / "drift1d.scenario", "--grid", 101, "--out", tmp, expect=0)
    block = (tmp / "solve-dp" / "policy.scenario").read_text()
    check('kind = "dp-policy"' in block, "policy block missing")
    text = (SCEN / "drift1d.scenario").read_text()
    start = text.index("protocol {")
    end = text.index("}\n", text.index("control {")) + 2
    end = text.index("}\n", end) + 2
    replay = tmp / "solve-dp" / "replay.scenario"
    replay.write_text(text[:start] + block.split("\n", 1)[1] + text[end:])
    run("cost", SCEN / "drift1d.scenario", "--out", tmp / "direct", expect=0)
    run("cost", replay, "--out", tmp / "replay", expect=0)
    mean = lambda d: json.loads((tmp / d / "cost" / "cost.json").read_text())["estimate"]["mean"]
    got, want = mean("replay"), mean("direct")
    check(abs(got - want) <= 1e-9 * abs(want), f"replayed policy cost {got} != {want}")


def case_errors(tmp):
    bad = tmp / "bad.scenario"
    bad.write_text('model {\n  kind = "qutrit"\n  a = -1\n}\nstate { lambda1 = 0.05 lambda2 = 0.04 }\n'
                   'cost { T = 1 }\nprotocol { kind = "feedback" rule = "qutrit-xmax" }\n')
    p = run("verify-classic", bad, expect=1)
    check(f"{bad}:3: model.a: must be positive" in p.stderr, f"unexpected message: {p.stderr}")
    bad.write_text('model {\n  kind = "qutrit"\n  a = 0.1 0.2\n}\n')
    p = run("simulate", bad, expect=1)
    check(f"{bad}:3: " in p.stderr, f"syntax error not line-anchored: {p.stderr}")
    bad.write_text('model { kind = "qutrit" }\nstate { lambda1 = 0.02 lambda2 = 0.04 }\ncost { T = 1 }\n'
                   'rng { seed = 1 dt = 1e-3 }\n')
    p = run("cost", bad, expect=1)
    check(f"{bad}:2: state: " in p.stderr, f"state error not line-anchored: {p.stderr}")
    run("verify-classic", SCEN / "drift1d.scenario", expect=1)
    run("simulate", tmp / "missing.scenario", expect=1)
    run("simulate", SCEN / "drift1d.scenario", "--grid", "x", expect=1)
    run("no-such-command", expect=1)
    run("--help", expect=0)


CASES = {"verify": case_verify, "determinism": case_determinism,
         "time_optimal": case_time_optimal, "policy_replay": case_policy_replay,
         "errors": case_errors}

with tempfile.TemporaryDirectory() as d:
    CASES[CASE](Path(d))
for f in FAILURES:
    print("FAIL:", f)
print(f"{CASE}: {'ok' if not FAILURES else f'{len(FAILURES)} failure(s)'}")
sys.exit(1 if FAILURES else 0)
