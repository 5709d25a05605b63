//! Python bindings. States are plain lists in the order
//! `[s, y, xi, vx, vy, omega, delta, tr, t]`, controls `[u1, u2]`; structured
//! results (planner output, run summaries) come back as JSON strings.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use urban_nmpc::constraints::Obstacle;
use urban_nmpc::ocp::{BehaviouralCommand, DrivingMode};
use urban_nmpc::planner::PlannerConfig;
use urban_nmpc::qp::{self, DenseQp, QpOptions};
use urban_nmpc::road::{RoadMap, RoadSource};
use urban_nmpc::sim::{run_closed_loop, summarize, write_artifacts, Scenario};
use urban_nmpc::vehicle::{self, ControlVec, StateVec, VehicleState, NU, NX};

fn err(e: urban_nmpc::Error) -> PyErr {
    match e {
        urban_nmpc::Error::Config(_) | urban_nmpc::Error::Json(_) | urban_nmpc::Error::Dimension(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn state_vec(x: &[f64]) -> PyResult<StateVec> {
    match x.len() {
        NX => Ok(StateVec::from_column_slice(x)),
        // time may be omitted
        n if n == NX - 1 => {
            let mut v = StateVec::zeros();
            v.rows_mut(0, n).copy_from_slice(x);
            Ok(v)
        }
        n => Err(PyValueError::new_err(format!("state needs {NX} entries, got {n}"))),
    }
}

fn control_vec(u: &[f64]) -> PyResult<ControlVec> {
    if u.len() != NU {
        return Err(PyValueError::new_err(format!("control needs {NU} entries, got {}", u.len())));
    }
    Ok(ControlVec::from_column_slice(u))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(name: &str, data: &[Vec<f64>], cols: usize) -> PyResult<DMatrix<f64>> {
    if data.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{name}: every row needs {cols} entries")));
    }
    Ok(DMatrix::from_fn(data.len(), cols, |i, j| data[i][j]))
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct VehicleParams {
    inner: vehicle::VehicleParams,
}

#[pymethods]
impl VehicleParams {
    /// Defaults, or the JSON document if given.
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => vehicle::VehicleParams::from_json(text).map_err(err)?,
            None => vehicle::VehicleParams::default(),
        };
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
    }

    fn get(&self, field: &str) -> PyResult<f64> {
        let v = serde_json::to_value(&self.inner).map_err(json_err)?;
        v.get(field).and_then(|x| x.as_f64()).ok_or_else(|| PyValueError::new_err(format!("unknown parameter '{field}'")))
    }

    fn set(&mut self, field: &str, value: f64) -> PyResult<()> {
        let mut v = serde_json::to_value(&self.inner).map_err(json_err)?;
        match v.get_mut(field) {
            Some(slot) => *slot = serde_json::json!(value),
            None => return Err(PyValueError::new_err(format!("unknown parameter '{field}'"))),
        }
        let p: vehicle::VehicleParams = serde_json::from_value(v).map_err(json_err)?;
        p.validate().map_err(err)?;
        self.inner = p;
        Ok(())
    }
}

fn params_or_default(p: Option<&VehicleParams>) -> vehicle::VehicleParams {
    p.map(|p| p.inner.clone()).unwrap_or_default()
}

#[pyclass]
struct Road {
    inner: RoadMap,
}

#[pymethods]
impl Road {
    #[staticmethod]
    fn straight(length: f64, left: f64, right: f64) -> PyResult<Self> {
        Ok(Self { inner: RoadMap::straight(length, left, right).map_err(err)? })
    }

    /// Fit the centreline through `points` with per-point boundary offsets.
    #[staticmethod]
    fn from_polyline(points: Vec<(f64, f64)>, left: Vec<f64>, right: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: RoadMap::fit_from_polyline(&points, &left, &right).map_err(err)? })
    }

    /// Build from the `road` section of a scenario file.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let source: RoadSource = serde_json::from_str(text).map_err(json_err)?;
        Ok(Self { inner: source.build().map_err(err)? })
    }

    fn length(&self) -> f64 {
        self.inner.length()
    }

    fn curvature(&self, s: f64) -> PyResult<f64> {
        self.inner.curvature_at(s).map_err(err)
    }

    fn heading(&self, s: f64) -> PyResult<f64> {
        self.inner.heading_at(s).map_err(err)
    }

    /// `(left, right)` lateral limits at `s`.
    fn boundaries(&self, s: f64) -> PyResult<(f64, f64)> {
        self.inner.boundaries_at(s).map_err(err)
    }

    fn to_global(&self, s: f64, y: f64, xi: f64) -> PyResult<(f64, f64, f64)> {
        self.inner.curvilinear_to_global(s, y, xi).map_err(err)
    }

    fn to_curvilinear(&self, x: f64, y: f64, psi: f64) -> PyResult<(f64, f64, f64)> {
        self.inner.global_to_curvilinear(x, y, psi).map_err(err)
    }
}

/// State derivative at constant road curvature.
#[pyfunction]
#[pyo3(signature = (state, control, curvature=0.0, params=None))]
fn dynamics(state: Vec<f64>, control: Vec<f64>, curvature: f64, params: Option<&VehicleParams>) -> PyResult<Vec<f64>> {
    let dx = vehicle::dynamics(&state_vec(&state)?, &control_vec(&control)?, curvature, &params_or_default(params)).map_err(err)?;
    Ok(dx.iter().copied().collect())
}

/// `(front, rear)` slip angles; the regularised form unless `modified` is false.
#[pyfunction]
#[pyo3(signature = (state, params=None, modified=true))]
fn slip_angles(state: Vec<f64>, params: Option<&VehicleParams>, modified: bool) -> PyResult<(f64, f64)> {
    let x = state_vec(&state)?;
    let p = params_or_default(params);
    if modified {
        Ok(vehicle::slip_angles_modified(&x, &p))
    } else {
        vehicle::slip_angles_standard(&x, &p).map_err(err)
    }
}

/// One implicit-midpoint step of length `h` at constant curvature.
#[pyfunction]
#[pyo3(signature = (state, control, h, curvature=0.0, params=None))]
fn integrate_step(state: Vec<f64>, control: Vec<f64>, h: f64, curvature: f64, params: Option<&VehicleParams>) -> PyResult<Vec<f64>> {
    let x = vehicle::integrate_step(&state_vec(&state)?, &control_vec(&control)?, h, &|_| curvature, &params_or_default(params))
        .map_err(err)?;
    Ok(x.iter().copied().collect())
}

/// `(x_next, A, B)` for one implicit-midpoint step.
#[pyfunction]
#[pyo3(signature = (state, control, h, curvature=0.0, params=None))]
#[allow(clippy::type_complexity)]
fn sensitivities(
    state: Vec<f64>,
    control: Vec<f64>,
    h: f64,
    curvature: f64,
    params: Option<&VehicleParams>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (x, a, b) = vehicle::sensitivities(&state_vec(&state)?, &control_vec(&control)?, h, &|_| curvature, &params_or_default(params))
        .map_err(err)?;
    let a = DMatrix::from_column_slice(NX, NX, a.as_slice());
    let b = DMatrix::from_column_slice(NX, NU, b.as_slice());
    Ok((x.iter().copied().collect(), rows(&a), rows(&b)))
}

/// Solve `min 1/2 x'Hx + g'x` s.t. `lb <= x <= ub`, `lba <= A x <= uba`.
#[pyfunction]
#[pyo3(signature = (h, g, lb, ub, a=None, lba=None, uba=None, max_wsr=1000))]
#[allow(clippy::too_many_arguments)]
fn solve_qp<'py>(
    py: Python<'py>,
    h: Vec<Vec<f64>>,
    g: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    a: Option<Vec<Vec<f64>>>,
    lba: Option<Vec<f64>>,
    uba: Option<Vec<f64>>,
    max_wsr: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let n = g.len();
    let a = match a {
        Some(rows) => matrix("A", &rows, n)?,
        None => DMatrix::zeros(0, n),
    };
    let m = a.nrows();
    let qp = DenseQp {
        h: matrix("H", &h, n)?,
        g: DVector::from_vec(g),
        lb: DVector::from_vec(lb),
        ub: DVector::from_vec(ub),
        a,
        lba: DVector::from_vec(lba.unwrap_or_else(|| vec![f64::NEG_INFINITY; m])),
        uba: DVector::from_vec(uba.unwrap_or_else(|| vec![f64::INFINITY; m])),
    };
    qp.validate().map_err(err)?;
    let sol = qp::solve(&qp, None, &QpOptions { max_wsr, ..Default::default() }).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("x", sol.x.iter().copied().collect::<Vec<f64>>())?;
    out.set_item("duals", sol.duals.iter().copied().collect::<Vec<f64>>())?;
    out.set_item("objective", sol.objective)?;
    out.set_item("status", serde_json::to_value(sol.status).map_err(json_err)?.as_str().unwrap_or_default().to_string())?;
    out.set_item("wsr", sol.wsr)?;
    Ok(out)
}

#[pyclass(unsendable)]
struct Planner {
    inner: urban_nmpc::planner::Planner,
}

#[pymethods]
impl Planner {
    #[new]
    #[pyo3(signature = (config_json=None, params=None))]
    fn new(config_json: Option<&str>, params: Option<&VehicleParams>) -> PyResult<Self> {
        let config = match config_json {
            Some(text) => PlannerConfig::from_json(text).map_err(err)?,
            None => PlannerConfig::default(),
        };
        Ok(Self { inner: urban_nmpc::planner::Planner::new(config, params_or_default(params)).map_err(err)? })
    }

    /// Run one planning cycle and return the planner output as JSON.
    /// `obstacles_json` is a list of `{s0, y0, vs, vy, rho, d_c}` records.
    #[pyo3(signature = (state, road, v_ref, perceived_horizon, obstacles_json="[]", overtake=false))]
    fn plan(
        &mut self,
        state: Vec<f64>,
        road: &Road,
        v_ref: f64,
        perceived_horizon: f64,
        obstacles_json: &str,
        overtake: bool,
    ) -> PyResult<String> {
        let obstacles: Vec<Obstacle> = serde_json::from_str(obstacles_json).map_err(json_err)?;
        let mut command = BehaviouralCommand::drive(v_ref);
        if overtake {
            command.mode = DrivingMode::Overtake;
        }
        let estimate = VehicleState::from_vector(&state_vec(&state)?);
        let out = self.inner.plan_cycle(&estimate, &road.inner, &obstacles, &command, perceived_horizon).map_err(err)?;
        serde_json::to_string(&out).map_err(json_err)
    }

    /// `(id, horizon length)` per slot, leader first.
    fn horizons(&self) -> Vec<(char, f64)> {
        self.inner.horizons()
    }
}

/// JSON of a built-in scenario: "overtake" or "blind_spot".
#[pyfunction]
#[pyo3(signature = (name, params=None))]
fn builtin_scenario(name: &str, params: Option<&VehicleParams>) -> PyResult<String> {
    let p = params_or_default(params);
    let sc = match name {
        "overtake" => Scenario::overtake(&p),
        "blind_spot" => Scenario::blind_spot(&p),
        other => return Err(PyValueError::new_err(format!("unknown scenario '{other}'"))),
    };
    serde_json::to_string_pretty(&sc).map_err(json_err)
}

/// Closed-loop run; returns the summary JSON and writes the usual
/// artifacts when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (scenario_json, params=None, planner_json=None, out_dir=None))]
fn run_scenario(
    py: Python<'_>,
    scenario_json: &str,
    params: Option<&VehicleParams>,
    planner_json: Option<&str>,
    out_dir: Option<std::path::PathBuf>,
) -> PyResult<String> {
    let scenario = Scenario::from_json(scenario_json).map_err(err)?;
    let p = params_or_default(params);
    let config = match planner_json {
        Some(text) => PlannerConfig::from_json(text).map_err(err)?,
        None => PlannerConfig::default(),
    };
    let summary = py
        .detach(|| -> urban_nmpc::Result<_> {
            let road = scenario.road.build()?;
            let log = run_closed_loop(&scenario, &p, &config)?;
            let effective = serde_json::json!({ "scenario": scenario, "vehicle": p, "planner": config });
            match &out_dir {
                Some(dir) => write_artifacts(&log, &road, effective, dir),
                None => Ok(summarize(&log, &road, effective)),
            }
        })
        .map_err(err)?;
    serde_json::to_string_pretty(&summary).map_err(json_err)
}

#[pymodule(name = "urban_nmpc")]
pub fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<VehicleParams>()?;
    m.add_class::<Road>()?;
    m.add_class::<Planner>()?;
    m.add_function(wrap_pyfunction!(dynamics, m)?)?;
    m.add_function(wrap_pyfunction!(slip_angles, m)?)?;
    m.add_function(wrap_pyfunction!(integrate_step, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivities, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
