//! Python bindings. Structured documents (results, metrics, schemas) cross
//! the boundary as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use trackbench_core::algorithms::{self, DeviceView, ParticipantKind};
use trackbench_core::geo::{self, GeoPoint};
use trackbench_core::model::{Beacon, BeaconKind, Trajectory, TrajectoryKind, TrajectoryPoint};
use trackbench_core::plugins::{PipelineConfig, Registry};
use trackbench_core::{eval, ingest, replay, rundir, synth};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn point(lat: f64, lon: f64) -> PyResult<GeoPoint> {
    GeoPoint::new(lat, lon).map_err(value_err)
}

fn points(coords: &[(f64, f64)]) -> PyResult<Vec<GeoPoint>> {
    coords.iter().map(|&(lat, lon)| point(lat, lon)).collect()
}

/// Great-circle distance in meters between `(lat, lon)` pairs in degrees.
#[pyfunction]
fn haversine_distance(a: (f64, f64), b: (f64, f64)) -> PyResult<f64> {
    Ok(geo::distance(point(a.0, a.1)?, point(b.0, b.1)?))
}

/// Point reached from `origin` after `distance_m` along `bearing_rad`
/// (clockwise from north).
#[pyfunction]
fn destination_point(origin: (f64, f64), bearing_rad: f64, distance_m: f64) -> PyResult<(f64, f64)> {
    let p = geo::destination_point(point(origin.0, origin.1)?, bearing_rad, distance_m, Default::default());
    Ok((p.lat, p.lon))
}

/// Discrete Fréchet distance in meters between two coordinate sequences.
#[pyfunction]
fn discrete_frechet(p: Vec<(f64, f64)>, q: Vec<(f64, f64)>) -> PyResult<f64> {
    eval::discrete_frechet_with(&points(&p)?, &points(&q)?, geo::distance).map_err(value_err)
}

#[pyfunction]
fn quantile(samples: Vec<f64>, q: f64) -> PyResult<f64> {
    eval::quantile(&samples, q).map_err(value_err)
}

/// Dead-reckoned positions for `(heading_rad, ...)` steps of a fixed
/// length, starting at `origin`.
#[pyfunction]
fn pdr_track(origin: (f64, f64), headings: Vec<f64>, step_length_m: f64) -> PyResult<Vec<(f64, f64)>> {
    let mut here = point(origin.0, origin.1)?;
    let mut out = vec![(here.lat, here.lon)];
    for theta in headings {
        here = algorithms::pdr_step(here, step_length_m, theta);
        out.push((here.lat, here.lon));
    }
    Ok(out)
}

/// One collaborative drift correction of device `a` by a peer (or a
/// beacon when `b_is_beacon`). Returns `(lat, lon, errors)` or `None`
/// when the error guard does not fire.
#[pyfunction]
#[pyo3(signature = (a, a_errors, b, b_errors, lower_threshold, b_is_beacon=false, a_previous=None))]
fn drift_correction(
    a: (f64, f64),
    a_errors: f64,
    b: (f64, f64),
    b_errors: f64,
    lower_threshold: f64,
    b_is_beacon: bool,
    a_previous: Option<(f64, f64)>,
) -> PyResult<Option<(f64, f64, f64)>> {
    let view_a = DeviceView {
        id: "a".into(),
        kind: ParticipantKind::Mobile,
        location: point(a.0, a.1)?,
        previous_location: a_previous.map(|p| point(p.0, p.1)).transpose()?,
        errors: a_errors,
    };
    let view_b = if b_is_beacon {
        DeviceView::beacon(&Beacon {
            id: "b".into(),
            slug: "b".into(),
            location: point(b.0, b.1)?,
            kind: BeaconKind::Virtual,
            tx_power_dbm: trackbench_core::model::DEFAULT_RSSI_AT_1M_DBM,
            path_loss_exponent: trackbench_core::model::DEFAULT_PATH_LOSS_EXPONENT,
        })
    } else {
        DeviceView {
            id: "b".into(),
            kind: ParticipantKind::Mobile,
            location: point(b.0, b.1)?,
            previous_location: None,
            errors: b_errors,
        }
    };
    Ok(algorithms::drift_correction(&view_a, &view_b, lower_threshold)
        .map(|u| (u.location.lat, u.location.lon, u.errors)))
}

/// Slugs of every registered plugin as `(slug, category)` pairs.
#[pyfunction]
fn list_plugins() -> Vec<(String, String)> {
    Registry::with_builtins()
        .list()
        .into_iter()
        .map(|m| (m.slug, format!("{:?}", m.category).to_lowercase()))
        .collect()
}

/// A validated scenario bundle held in memory.
#[pyclass(name = "Scenario", module = "trackbench")]
struct PyScenario {
    inner: trackbench_core::Scenario,
}

#[pymethods]
impl PyScenario {
    /// Loads a bundle directory or `.tar` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ingest::load_scenario(&path).map_err(value_err)?,
        })
    }

    /// Builds a synthetic scenario from a named preset.
    #[staticmethod]
    #[pyo3(signature = (preset="square-drift", devices=4, seed=7))]
    fn synth(preset: &str, devices: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: synth::preset(preset, devices, seed).map_err(value_err)?,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn device_ids(&self) -> Vec<String> {
        self.inner.device_runs.iter().map(|r| r.device_id.clone()).collect()
    }

    #[getter]
    fn beacon_slugs(&self) -> Vec<String> {
        self.inner.beacons.iter().map(|b| b.slug.clone()).collect()
    }

    fn total_groundtruth_length(&self) -> f64 {
        self.inner.total_groundtruth_length()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ingest::write_bundle(&self.inner, &path).map_err(value_err)
    }

    /// Runs the replay. `pipeline` is `filter,positioning,collab`.
    #[pyo3(signature = (pipeline="lowpass,pdr,drift-correction", seed=0))]
    fn replay(&self, py: Python<'_>, pipeline: &str, seed: u64) -> PyResult<PyRun> {
        let cfg = PipelineConfig::from_slugs(pipeline).map_err(value_err)?;
        let scenario = self.inner.clone();
        let artifacts = py
            .detach(move || replay::run_replay(&scenario, &cfg, seed))
            .map_err(|e| match e {
                replay::ReplayError::Plugin(_) | replay::ReplayError::Validation(_) => value_err(e),
                other => PyRuntimeError::new_err(other.to_string()),
            })?;
        Ok(PyRun { inner: artifacts })
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(id={:?}, devices={}, beacons={})",
            self.inner.id,
            self.inner.device_runs.len(),
            self.inner.beacons.len()
        )
    }
}

/// Artifacts of one finished replay.
#[pyclass(name = "Run", module = "trackbench")]
struct PyRun {
    inner: replay::RunArtifacts,
}

#[pymethods]
impl PyRun {
    /// Contents of `result.json`.
    fn result_json(&self) -> String {
        String::from_utf8(rundir::result_json(&self.inner.result)).expect("JSON is UTF-8")
    }

    /// Contents of `metrics.json`.
    fn metrics_json(&self) -> String {
        let doc = eval::MetricsDocument {
            devices: self.inner.result.metrics.clone(),
            aggregate: self.inner.result.aggregate.clone(),
        };
        String::from_utf8(rundir::metrics_json(&doc)).expect("JSON is UTF-8")
    }

    #[getter]
    fn improvement(&self) -> f64 {
        self.inner.result.aggregate.improvement
    }

    #[getter]
    fn q3(&self) -> (f64, f64) {
        let a = &self.inner.result.aggregate;
        (a.mean_q3_estimated, a.mean_q3_corrected)
    }

    #[getter]
    fn encounter_count(&self) -> usize {
        self.inner.encounters.len()
    }

    /// `(lat, lon, timestamp_ms)` points of one trajectory; `kind` is
    /// `groundtruth`, `estimated` or `corrected`.
    fn trajectory(&self, device_id: &str, kind: &str) -> PyResult<Vec<(f64, f64, i64)>> {
        let d = self
            .inner
            .result
            .device(device_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown device {device_id:?}")))?;
        let t: &Trajectory = match kind {
            "groundtruth" => &d.groundtruth,
            "estimated" => &d.estimated,
            "corrected" => &d.corrected,
            other => return Err(PyValueError::new_err(format!("unknown trajectory kind {other:?}"))),
        };
        Ok(t.points().iter().map(|p| (p.location.lat, p.location.lon, p.timestamp)).collect())
    }

    /// Writes the run directory.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        rundir::write_run_dir(&path, &self.inner).map_err(value_err)
    }
}

/// Discrete Fréchet distance between two timestamped trajectories given
/// as `(lat, lon, timestamp_ms)` tuples.
#[pyfunction]
fn trajectory_frechet(p: Vec<(f64, f64, i64)>, q: Vec<(f64, f64, i64)>) -> PyResult<f64> {
    let build = |pts: Vec<(f64, f64, i64)>| -> PyResult<Trajectory> {
        let pts = pts
            .into_iter()
            .map(|(lat, lon, t)| Ok(TrajectoryPoint::new(point(lat, lon)?, t)))
            .collect::<PyResult<Vec<_>>>()?;
        Trajectory::new(TrajectoryKind::Estimated, "py", pts).map_err(value_err)
    };
    eval::discrete_frechet(&build(p)?, &build(q)?).map_err(value_err)
}

#[pymodule]
fn trackbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(haversine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(destination_point, m)?)?;
    m.add_function(wrap_pyfunction!(discrete_frechet, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_frechet, m)?)?;
    m.add_function(wrap_pyfunction!(quantile, m)?)?;
    m.add_function(wrap_pyfunction!(pdr_track, m)?)?;
    m.add_function(wrap_pyfunction!(drift_correction, m)?)?;
    m.add_function(wrap_pyfunction!(list_plugins, m)?)?;
    Ok(())
}
