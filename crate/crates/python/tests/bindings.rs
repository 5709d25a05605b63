use pyo3::ffi::c_str;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &std::ffi::CStr) {
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(urban_nmpc_py::py_module)(py);
        let locals = PyDict::new(py);
        locals.set_item("m", module).unwrap();
        if let Err(e) = py.run(code, None, Some(&locals)) {
            e.display(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn vehicle_functions_round_trip_lists() {
    with_module(c_str!(
        r#"
x = [0.0, 0.0, 0.0, 0.0, 0.3, 0.1, 0.05, 0.0, 0.0]
assert m.slip_angles(x) == (0.0, 0.0)
dx = m.dynamics([0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0])
assert len(dx) == 9 and abs(dx[0] - 10.0) < 1e-12
x1, a, b = m.sensitivities([0, 0.1, 0, 8, 0, 0, 0.02, 100, 0], [0.1, 50.0], 0.05)
assert len(a) == 9 and len(a[0]) == 9 and len(b[0]) == 2
assert x1 == m.integrate_step([0, 0.1, 0, 8, 0, 0, 0.02, 100, 0], [0.1, 50.0], 0.05)
p = m.VehicleParams()
p.set("mass", 1500.0)
assert p.get("mass") == 1500.0
try:
    p.set("mass", -1.0)
    raise AssertionError("negative mass accepted")
except ValueError:
    pass
"#
    ));
}

#[test]
fn qp_and_road_bindings() {
    with_module(c_str!(
        r#"
sol = m.solve_qp([[2.0, 0.0], [0.0, 2.0]], [-2.0, -5.0], [-10.0, -10.0], [10.0, 1.0])
assert sol["status"] == "optimal"
assert abs(sol["x"][0] - 1.0) < 1e-12 and abs(sol["x"][1] - 1.0) < 1e-12
road = m.Road.straight(100.0, 5.25, -1.75)
assert road.length() == 100.0 and road.boundaries(10.0) == (5.25, -1.75)
s, y, xi = road.to_curvilinear(*road.to_global(40.0, 1.0, 0.2))
assert abs(s - 40.0) < 1e-9 and abs(y - 1.0) < 1e-9
"#
    ));
}

#[test]
fn planner_cycle_from_python() {
    with_module(c_str!(
        r#"
import json
planner = m.Planner()
road = m.Road.straight(200.0, 5.25, -1.75)
obstacles = json.dumps([{"s0": 30.0, "y0": 0.0, "vs": 5.0, "vy": 0.0, "rho": 1.0, "d_c": 1.1}])
out = json.loads(planner.plan([0, 0, 0, 10, 0, 0, 0, 0, 0], road, 10.0, 60.0, obstacles))
assert out["status"] == "nominal" and out["selected"] == "A"
assert len(out["trajectory"]) == 61
assert [h[0] for h in planner.horizons()] == ["A", "B", "C"]
"#
    ));
}
