"""Smoke test for the urban_nmpc extension module.

Build and install first, e.g.
    pip install maturin
    cd crates/python && maturin build --release -o dist && pip install dist/*.whl
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import urban_nmpc as m


def check(name, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'}  {name:<38} {detail}")
    return ok


def main():
    results = []

    fr, rr = m.slip_angles([0, 0, 0, 0, 0.3, 0.2, 0.1, 0, 0])
    results.append(check("slips vanish at standstill", fr == 0.0 and rr == 0.0))

    x = [0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.05, 150.0, 0.0]
    x1 = m.integrate_step(x, [0.0, 0.0], 0.05)
    results.append(check("integrator advances time", abs(x1[8] - 0.05) < 1e-15, f"s = {x1[0]:.4f} m"))

    sol = m.solve_qp([[4.0, 1.0], [1.0, 2.0]], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0], a=[[1.0, 1.0]], lba=[1.0], uba=[1.0])
    results.append(check("QP with an equality row", sol["status"] == "optimal" and abs(sum(sol["x"]) - 1.0) < 1e-12,
                         f"x = {[round(v, 4) for v in sol['x']]}"))

    road = m.Road.from_polyline([(20.0 * math.sin(k / 10.0), 20.0 - 20.0 * math.cos(k / 10.0)) for k in range(25)],
                                [3.5] * 25, [-3.5] * 25)
    results.append(check("fitted arc curvature", abs(road.curvature(0.5 * road.length()) - 0.05) < 2e-3,
                         f"{road.curvature(0.5 * road.length()):.4f} 1/m"))

    planner = m.Planner()
    out = json.loads(planner.plan([0, 0, 0, 8, 0, 0, 0, 0, 0], m.Road.straight(150.0, 5.25, -1.75), 8.0, 50.0))
    results.append(check("planner cycle", out["status"] == "nominal", f"selected {out['selected']}"))

    scenario = json.loads(m.builtin_scenario("blind_spot"))
    scenario["duration"] = 2.0
    with tempfile.TemporaryDirectory() as tmp:
        summary = json.loads(m.run_scenario(json.dumps(scenario), out_dir=tmp))
        wrote = all((Path(tmp) / f).exists() for f in ("log.csv", "diagnostics.jsonl", "summary.json"))
    results.append(check("closed-loop run", summary["outcome"] == "completed" and wrote,
                         f"min clearance {summary['audit']['min_clearance']:.2f} m"))

    print(f"{sum(results)} of {len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
