//! On-disk layout of a finished run.
//!
//! ```text
//! <run>/result.json      trajectories (GeoJSON) and run parameters
//! <run>/metrics.json     per-device and aggregate metrics
//! <run>/cdf.csv          pooled error CDFs
//! <run>/encounters.jsonl one encounter per line
//! <run>/ticks.jsonl      one replay tick per line
//! ```

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::eval::{self, CdfTable, EvalError, MetricsDocument};
use crate::geo::GeoPoint;
use crate::model::{
    Beacon, DeviceParams, DeviceResult, ModelError, RunResult, TimeAlignment, Trajectory,
    TrajectoryKind, TrajectoryPoint,
};
use crate::plugins::PipelineConfig;
use crate::replay::{EncounterEvent, ReplayTick, RunArtifacts};

pub const RESULT_FILE: &str = "result.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CDF_FILE: &str = "cdf.csv";
pub const ENCOUNTERS_FILE: &str = "encounters.jsonl";
pub const TICKS_FILE: &str = "ticks.jsonl";

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("{file}: {message}")]
    Format { file: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct DeviceSummary {
    pub device_id: String,
    pub params: DeviceParams,
    pub collaboration_count: u64,
    pub beacon_correction_count: u64,
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ResultDocument {
    pub scenario_id: String,
    pub pipeline: PipelineConfig,
    pub alignment: TimeAlignment,
    pub seed: u64,
    pub beacons: Vec<Beacon>,
    pub devices: Vec<DeviceSummary>,
    /// GeoJSON FeatureCollection with three features per device.
    pub trajectories: Value,
}

fn trajectory_feature(t: &Trajectory) -> Value {
    let coords: Vec<[f64; 2]> = t.locations().map(|p| [p.lon, p.lat]).collect();
    let geometry = if coords.len() == 1 {
        json!({"type": "Point", "coordinates": coords[0]})
    } else {
        json!({"type": "LineString", "coordinates": coords})
    };
    let timestamps: Vec<i64> = t.points().iter().map(|p| p.timestamp).collect();
    json!({
        "type": "Feature",
        "geometry": geometry,
        "properties": {
            "device_id": t.device_id(),
            "kind": t.kind(),
            "timestamps": timestamps,
        }
    })
}

fn format_err(message: impl Into<String>) -> RunDirError {
    RunDirError::Format {
        file: RESULT_FILE.into(),
        message: message.into(),
    }
}

fn trajectory_from_feature(feature: &Value) -> Result<Trajectory, RunDirError> {
    let props = &feature["properties"];
    let device_id = props["device_id"].as_str().ok_or_else(|| format_err("feature without device_id"))?;
    let kind: TrajectoryKind = serde_json::from_value(props["kind"].clone())?;
    let timestamps: Vec<i64> = serde_json::from_value(props["timestamps"].clone())?;
    let geometry = &feature["geometry"];
    let coords: Vec<[f64; 2]> = match geometry["type"].as_str() {
        Some("Point") => vec![serde_json::from_value(geometry["coordinates"].clone())?],
        Some("LineString") => serde_json::from_value(geometry["coordinates"].clone())?,
        _ => return Err(format_err("trajectory geometry must be Point or LineString")),
    };
    if coords.len() != timestamps.len() {
        return Err(format_err(format!("{device_id}: coordinate and timestamp counts differ")));
    }
    let points = coords
        .into_iter()
        .zip(timestamps)
        .map(|([lon, lat], t)| {
            GeoPoint::new(lat, lon)
                .map(|p| TrajectoryPoint::new(p, t))
                .map_err(|e| format_err(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trajectory::new(kind, device_id, points)?)
}

impl ResultDocument {
    pub fn from_result(r: &RunResult) -> Self {
        let features: Vec<Value> = r
            .devices
            .iter()
            .flat_map(|d| [&d.groundtruth, &d.estimated, &d.corrected])
            .map(trajectory_feature)
            .collect();
        Self {
            scenario_id: r.scenario_id.clone(),
            pipeline: r.pipeline.clone(),
            alignment: r.alignment,
            seed: r.seed,
            beacons: r.beacons.clone(),
            devices: r
                .devices
                .iter()
                .map(|d| DeviceSummary {
                    device_id: d.device_id.clone(),
                    params: d.params,
                    collaboration_count: d.collaboration_count,
                    beacon_correction_count: d.beacon_correction_count,
                })
                .collect(),
            trajectories: json!({"type": "FeatureCollection", "features": features}),
        }
    }

    /// Rebuilds the run result; metrics are recomputed from the
    /// trajectories.
    pub fn into_result(self) -> Result<RunResult, RunDirError> {
        let features = self.trajectories["features"]
            .as_array()
            .ok_or_else(|| format_err("trajectories must be a FeatureCollection"))?;
        let parsed = features.iter().map(trajectory_from_feature).collect::<Result<Vec<_>, _>>()?;
        let find = |id: &str, kind: TrajectoryKind| {
            parsed
                .iter()
                .find(|t| t.device_id() == id && t.kind() == kind)
                .cloned()
                .ok_or_else(|| format_err(format!("{id}: missing {} trajectory", kind.as_str())))
        };
        let devices = self
            .devices
            .iter()
            .map(|d| {
                Ok(DeviceResult {
                    device_id: d.device_id.clone(),
                    groundtruth: find(&d.device_id, TrajectoryKind::Groundtruth)?,
                    estimated: find(&d.device_id, TrajectoryKind::Estimated)?,
                    corrected: find(&d.device_id, TrajectoryKind::Corrected)?,
                    collaboration_count: d.collaboration_count,
                    beacon_correction_count: d.beacon_correction_count,
                    params: d.params,
                })
            })
            .collect::<Result<Vec<_>, RunDirError>>()?;
        let metrics = eval::build_report(&devices)?;
        Ok(RunResult {
            scenario_id: self.scenario_id,
            pipeline: self.pipeline,
            alignment: self.alignment,
            seed: self.seed,
            beacons: self.beacons,
            devices,
            metrics: metrics.devices,
            aggregate: metrics.aggregate,
        })
    }
}

/// Pretty-printed `result.json` bytes; identical runs give identical bytes.
pub fn result_json(r: &RunResult) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&ResultDocument::from_result(r)).expect("result serializes");
    out.push(b'\n');
    out
}

pub fn metrics_json(metrics: &MetricsDocument) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(metrics).expect("metrics serialize");
    out.push(b'\n');
    out
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("line serializes");
        out.push(b'\n');
    }
    out
}

fn metrics_of(r: &RunResult) -> MetricsDocument {
    MetricsDocument {
        devices: r.metrics.clone(),
        aggregate: r.aggregate.clone(),
    }
}

/// Every file of a run directory, keyed by file name.
pub fn run_files(artifacts: &RunArtifacts) -> Vec<(&'static str, Vec<u8>)> {
    let mut files = vec![
        (RESULT_FILE, result_json(&artifacts.result)),
        (ENCOUNTERS_FILE, jsonl(&artifacts.encounters)),
        (TICKS_FILE, jsonl(&artifacts.ticks)),
    ];
    files.extend(score_files(&artifacts.result));
    files
}

/// `metrics.json` and `cdf.csv` for a result.
pub fn score_files(r: &RunResult) -> Vec<(&'static str, Vec<u8>)> {
    let mut files = vec![(METRICS_FILE, metrics_json(&metrics_of(r)))];
    if let Ok(cdf) = CdfTable::from_reports(&r.metrics) {
        files.push((CDF_FILE, cdf.to_csv().into_bytes()));
    }
    files
}

fn write_files(dir: &Path, files: &[(&str, Vec<u8>)]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        let mut f = fs::File::create(dir.join(name))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    Ok(())
}

pub fn write_run_dir(dir: &Path, artifacts: &RunArtifacts) -> Result<(), RunDirError> {
    Ok(write_files(dir, &run_files(artifacts))?)
}

/// Loads `result.json` from a run directory, recomputing metrics.
pub fn read_result(dir: &Path) -> Result<RunResult, RunDirError> {
    let text = fs::read(dir.join(RESULT_FILE))?;
    let doc: ResultDocument = serde_json::from_slice(&text)?;
    doc.into_result()
}

/// Recomputes `metrics.json` and `cdf.csv` from `result.json`.
pub fn score_run_dir(dir: &Path) -> Result<MetricsDocument, RunDirError> {
    let r = read_result(dir)?;
    write_files(dir, &score_files(&r))?;
    Ok(metrics_of(&r))
}

pub fn read_metrics(dir: &Path) -> Result<MetricsDocument, RunDirError> {
    Ok(serde_json::from_slice(&fs::read(dir.join(METRICS_FILE))?)?)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RunDirError> {
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_encounters(dir: &Path) -> Result<Vec<EncounterEvent>, RunDirError> {
    read_jsonl(&dir.join(ENCOUNTERS_FILE))
}

pub fn read_ticks(dir: &Path) -> Result<Vec<ReplayTick>, RunDirError> {
    read_jsonl(&dir.join(TICKS_FILE))
}
