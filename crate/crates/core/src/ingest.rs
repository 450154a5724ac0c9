//! Raw measurement CSV logs and scenario bundles.
//!
//! A raw log has the header
//! `timestamp,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,azimuth,pitch,roll`
//! followed by any number of `rssi_<slug>` columns. A bundle is a directory
//! (or `.tar` archive) with `scenario.json`, `floorplan.geojson` and
//! `raw/<device_id>.csv` per device.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;
use crate::model::{
    Beacon, Checkpoint, DeviceParams, DeviceRun, Floorplan, Millis, Scenario, TimeAlignment,
    ValidationError, ValidationErrors,
};

/// RSSI reported for a beacon outside detection range.
pub const RSSI_OUT_OF_RANGE_DBM: f64 = -100.0;

pub const MANDATORY_COLUMNS: [&str; 10] = [
    "timestamp", "acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z", "azimuth", "pitch",
    "roll",
];

const RSSI_PREFIX: &str = "rssi_";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("non-monotonic timestamps at line {0}")]
    NonMonotonic(u64),
    #[error("rssi out of range at line {line}: {value}")]
    RssiRange { line: u64, value: f64 },
    #[error("empty log")]
    EmptyLog,
    #[error("bundle incomplete: {0}")]
    BundleIncomplete(String),
    #[error("validation failed: {0}")]
    Validation(#[from] ValidationErrors),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMeasurementRecord {
    pub timestamp: Millis,
    pub acc_x: f64,
    pub acc_y: f64,
    pub acc_z: f64,
    pub gyro_x: f64,
    pub gyro_y: f64,
    pub gyro_z: f64,
    /// Degrees from magnetic north.
    pub azimuth: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Beacon slug to dBm; [`RSSI_OUT_OF_RANGE_DBM`] when not detected.
    pub rssi: BTreeMap<String, f64>,
}

impl RawMeasurementRecord {
    pub fn at(timestamp: Millis) -> Self {
        Self {
            timestamp,
            acc_x: 0.0,
            acc_y: 0.0,
            acc_z: 0.0,
            gyro_x: 0.0,
            gyro_y: 0.0,
            gyro_z: 0.0,
            azimuth: 0.0,
            pitch: 0.0,
            roll: 0.0,
            rssi: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLog {
    pub device_id: String,
    pub records: Vec<RawMeasurementRecord>,
    /// Beacon slugs that have an RSSI column, in column order.
    pub beacon_columns: Vec<String>,
}

impl RawLog {
    pub fn empty(device_id: impl Into<String>) -> Self {
        Self {
            device_id: device_id.into(),
            records: Vec::new(),
            beacon_columns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(n - 1) / (t_last - t_first)` in Hz; `None` with fewer than two
    /// records or a zero time span.
    pub fn sampling_rate_hz(&self) -> Option<f64> {
        let n = self.records.len();
        if n < 2 {
            return None;
        }
        let span_ms = self.records[n - 1].timestamp - self.records[0].timestamp;
        (span_ms > 0).then(|| (n - 1) as f64 * 1000.0 / span_ms as f64)
    }

    pub fn first_timestamp(&self) -> Option<Millis> {
        self.records.first().map(|r| r.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<Millis> {
        self.records.last().map(|r| r.timestamp)
    }

    pub fn shift_time(&mut self, offset: Millis) {
        for r in &mut self.records {
            r.timestamp -= offset;
        }
    }

    /// Latest record at or before `t`.
    pub fn record_at(&self, t: Millis) -> Option<&RawMeasurementRecord> {
        let idx = self.records.partition_point(|r| r.timestamp <= t);
        idx.checked_sub(1).map(|i| &self.records[i])
    }
}

/// Maps a header cell onto the canonical column name. Accepts the canonical
/// names plus the capitalised field names used by the companion app export
/// (`AccX`, `Gyroscope`, `Azimuth`, `RSSI_<slug>`, ...).
fn canonical_column(raw: &str) -> String {
    let trimmed = raw.trim();
    let lower = trimmed.to_ascii_lowercase();
    if let Some(slug) = lower.strip_prefix(RSSI_PREFIX) {
        // slugs keep their original case
        return format!("{RSSI_PREFIX}{}", &trimmed[trimmed.len() - slug.len()..]);
    }
    match lower.as_str() {
        "time" | "timestamp_ms" => "timestamp".into(),
        "accx" => "acc_x".into(),
        "accy" => "acc_y".into(),
        "accz" => "acc_z".into(),
        "gyrox" => "gyro_x".into(),
        "gyroy" => "gyro_y".into(),
        "gyroz" => "gyro_z".into(),
        "gyroscope" => "gyro".into(),
        _ => lower,
    }
}

fn parse_number(cell: &str, line: u64, column: &str) -> Result<f64, IngestError> {
    let v: f64 = cell.trim().parse().map_err(|_| IngestError::Parse {
        line,
        message: format!("column {column}: {cell:?} is not a number"),
    })?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(IngestError::Parse {
            line,
            message: format!("column {column}: non-finite value"),
        })
    }
}

fn parse_timestamp(cell: &str, line: u64) -> Result<Millis, IngestError> {
    let cell = cell.trim();
    let t = match cell.parse::<i64>() {
        Ok(t) => t,
        Err(_) => parse_number(cell, line, "timestamp")?.round() as i64,
    };
    if t < 0 {
        return Err(IngestError::Parse {
            line,
            message: "negative timestamp".into(),
        });
    }
    Ok(t)
}

/// Parses a raw measurement CSV.
pub fn parse_raw_csv<R: Read>(device_id: &str, stream: R) -> Result<RawLog, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(stream);
    let headers: Vec<String> = reader.headers()?.iter().map(canonical_column).collect();

    let find = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [usize::MAX; 10];
    let single_gyro = find("gyro");
    for (slot, name) in MANDATORY_COLUMNS.iter().enumerate() {
        idx[slot] = match (find(name), *name, single_gyro) {
            (Some(i), _, _) => i,
            // a lone `gyro` column is the yaw rate
            (None, "gyro_z", Some(g)) => g,
            (None, "gyro_x" | "gyro_y", Some(_)) => usize::MAX,
            (None, _, _) => return Err(IngestError::Schema(name.to_string())),
        };
    }
    let rssi_columns: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(RSSI_PREFIX).map(|s| (i, s.to_string())))
        .collect();

    let mut records = Vec::new();
    let mut prev_ts: Option<Millis> = None;
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.iter().all(|c| c.is_empty()) {
            continue;
        }
        let cell = |i: usize| row.get(i).unwrap_or("");
        let number = |slot: usize| -> Result<f64, IngestError> {
            if idx[slot] == usize::MAX {
                return Ok(0.0);
            }
            parse_number(cell(idx[slot]), line, MANDATORY_COLUMNS[slot])
        };
        let timestamp = parse_timestamp(cell(idx[0]), line)?;
        if let Some(p) = prev_ts {
            if timestamp < p {
                return Err(IngestError::NonMonotonic(line));
            }
        }
        prev_ts = Some(timestamp);
        let mut rssi = BTreeMap::new();
        for (i, slug) in &rssi_columns {
            let raw = cell(*i);
            let value = if raw.is_empty() {
                RSSI_OUT_OF_RANGE_DBM
            } else {
                parse_number(raw, line, &format!("{RSSI_PREFIX}{slug}"))?
            };
            if !(RSSI_OUT_OF_RANGE_DBM..=0.0).contains(&value) {
                return Err(IngestError::RssiRange { line, value });
            }
            rssi.insert(slug.clone(), value);
        }
        records.push(RawMeasurementRecord {
            timestamp,
            acc_x: number(1)?,
            acc_y: number(2)?,
            acc_z: number(3)?,
            gyro_x: number(4)?,
            gyro_y: number(5)?,
            gyro_z: number(6)?,
            azimuth: number(7)?,
            pitch: number(8)?,
            roll: number(9)?,
            rssi,
        });
    }
    if records.is_empty() {
        return Err(IngestError::EmptyLog);
    }
    Ok(RawLog {
        device_id: device_id.to_string(),
        records,
        beacon_columns: rssi_columns.into_iter().map(|(_, s)| s).collect(),
    })
}

/// Writes a raw log in the canonical column layout.
pub fn write_raw_csv<W: io::Write>(log: &RawLog, out: W) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header: Vec<String> = MANDATORY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(log.beacon_columns.iter().map(|s| format!("{RSSI_PREFIX}{s}")));
    w.write_record(&header)?;
    for r in &log.records {
        let mut row = vec![
            r.timestamp.to_string(),
            r.acc_x.to_string(),
            r.acc_y.to_string(),
            r.acc_z.to_string(),
            r.gyro_x.to_string(),
            r.gyro_y.to_string(),
            r.gyro_z.to_string(),
            r.azimuth.to_string(),
            r.pitch.to_string(),
            r.roll.to_string(),
        ];
        for slug in &log.beacon_columns {
            let v = r.rssi.get(slug).copied().unwrap_or(RSSI_OUT_OF_RANGE_DBM);
            row.push(v.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// On-disk form of `scenario.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub time_alignment: TimeAlignment,
    #[serde(default)]
    pub beacons: Vec<Beacon>,
    pub devices: Vec<DeviceRunDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DeviceRunDocument {
    pub device_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<String>,
    pub groundtruth_path: Vec<GeoPoint>,
    pub checkpoints: Vec<Checkpoint>,
    /// Bundle-relative path; defaults to `raw/<device_id>.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_log: Option<String>,
    #[serde(default)]
    pub params: DeviceParams,
    #[serde(default)]
    pub error_counter: f64,
}

impl DeviceRunDocument {
    pub fn raw_log_path(&self) -> String {
        self.raw_log
            .clone()
            .unwrap_or_else(|| format!("raw/{}.csv", self.device_id))
    }
}

impl ScenarioDocument {
    pub fn parse(text: &str) -> Result<Self, ValidationErrors> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "scenario".to_string() } else { format!("scenario.{path}") };
            ValidationErrors(vec![ValidationError::new(path, e.into_inner().to_string())])
        })
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            id: s.id.clone(),
            name: s.name.clone(),
            time_alignment: s.time_alignment,
            beacons: s.beacons.clone(),
            devices: s
                .device_runs
                .iter()
                .map(|r| DeviceRunDocument {
                    device_id: r.device_id.clone(),
                    hardware: r.hardware.clone(),
                    groundtruth_path: r.groundtruth_path.clone(),
                    checkpoints: r.checkpoints.clone(),
                    raw_log: None,
                    params: r.params,
                    error_counter: r.error_counter,
                })
                .collect(),
        }
    }
}

/// Files of a bundle keyed by bundle-relative path (`/`-separated).
pub type BundleFiles = BTreeMap<String, Vec<u8>>;

/// Non-fatal findings while loading a bundle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub warnings: Vec<String>,
}

/// Loads and validates a scenario bundle from a directory or `.tar` file.
pub fn load_scenario(bundle: &Path) -> Result<Scenario, IngestError> {
    load_scenario_with_report(bundle).map(|(s, _)| s)
}

pub fn load_scenario_with_report(bundle: &Path) -> Result<(Scenario, LoadReport), IngestError> {
    let files = read_bundle(bundle)?;
    scenario_from_files(&files)
}

/// Reads every file of a bundle into memory.
pub fn read_bundle(bundle: &Path) -> Result<BundleFiles, IngestError> {
    if bundle.is_dir() {
        let mut files = BundleFiles::new();
        read_dir_into(bundle, bundle, &mut files)?;
        Ok(files)
    } else if bundle.is_file() {
        read_tar(fs::File::open(bundle)?)
    } else {
        Err(IngestError::BundleIncomplete(bundle.display().to_string()))
    }
}

fn read_dir_into(root: &Path, dir: &Path, files: &mut BundleFiles) -> Result<(), IngestError> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            read_dir_into(root, &path, files)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked under root");
            let key: Vec<String> = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            files.insert(key.join("/"), fs::read(&path)?);
        }
    }
    Ok(())
}

/// Reads a tar archive. A single top-level directory wrapping the bundle is
/// stripped.
pub fn read_tar<R: Read>(reader: R) -> Result<BundleFiles, IngestError> {
    let mut archive = tar::Archive::new(reader);
    let mut files = BundleFiles::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let path = entry.path()?.to_string_lossy().trim_start_matches("./").to_string();
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf)?;
        files.insert(path, buf);
    }
    if !files.contains_key("scenario.json") {
        let prefixes: HashSet<&str> = files.keys().filter_map(|k| k.split_once('/').map(|p| p.0)).collect();
        if prefixes.len() == 1 {
            let prefix = format!("{}/", prefixes.into_iter().next().unwrap());
            files = files
                .into_iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v)))
                .collect();
        }
    }
    Ok(files)
}

fn utf8<'a>(files: &'a BundleFiles, name: &str) -> Result<&'a str, IngestError> {
    let bytes = files
        .get(name)
        .ok_or_else(|| IngestError::BundleIncomplete(name.to_string()))?;
    std::str::from_utf8(bytes).map_err(|_| {
        IngestError::Validation(ValidationErrors(vec![ValidationError::new(name, "not valid UTF-8")]))
    })
}

/// Builds a validated scenario from in-memory bundle files.
pub fn scenario_from_files(files: &BundleFiles) -> Result<(Scenario, LoadReport), IngestError> {
    let doc = ScenarioDocument::parse(utf8(files, "scenario.json")?)?;
    let (floorplan, embedded) = Floorplan::from_geojson(utf8(files, "floorplan.geojson")?)?;
    let mut report = LoadReport::default();

    let mut beacons = doc.beacons.clone();
    for b in embedded {
        if let Some(existing) = beacons.iter().find(|x| x.slug == b.slug) {
            if existing != &b {
                return Err(ValidationErrors(vec![ValidationError::new(
                    "floorplan.beacons",
                    format!("beacon {:?} declared twice with different properties", b.slug),
                )])
                .into());
            }
        } else {
            beacons.push(b);
        }
    }
    let slugs: HashSet<&str> = beacons.iter().map(|b| b.slug.as_str()).collect();

    let mut device_runs = Vec::with_capacity(doc.devices.len());
    for (i, d) in doc.devices.iter().enumerate() {
        let raw_path = d.raw_log_path();
        let bytes = files
            .get(&raw_path)
            .ok_or_else(|| IngestError::BundleIncomplete(raw_path.clone()))?;
        let raw_log = parse_raw_csv(&d.device_id, bytes.as_slice()).map_err(|e| match e {
            IngestError::BundleIncomplete(_) | IngestError::Io(_) => e,
            other => IngestError::Validation(ValidationErrors(vec![ValidationError::new(
                format!("devices[{i}].raw_log ({raw_path})"),
                other.to_string(),
            )])),
        })?;
        for slug in &raw_log.beacon_columns {
            if !slugs.contains(slug.as_str()) {
                let msg = format!("{raw_path}: unknown beacon {slug:?} retained");
                log::warn!("{msg}");
                report.warnings.push(msg);
            }
        }
        device_runs.push(DeviceRun {
            device_id: d.device_id.clone(),
            hardware: d.hardware.clone(),
            groundtruth_path: d.groundtruth_path.clone(),
            checkpoints: d.checkpoints.clone(),
            raw_log,
            params: d.params,
            error_counter: d.error_counter,
        });
    }

    let scenario = Scenario {
        id: doc.id,
        name: doc.name,
        floorplan,
        beacons,
        device_runs,
        time_alignment: doc.time_alignment,
    };
    scenario.validate()?;
    Ok((scenario, report))
}

/// Serialises a scenario into bundle files.
pub fn scenario_to_files(scenario: &Scenario) -> Result<BundleFiles, IngestError> {
    let mut files = BundleFiles::new();
    let doc = ScenarioDocument::from_scenario(scenario);
    files.insert(
        "scenario.json".into(),
        serde_json::to_vec_pretty(&doc).map_err(io::Error::from)?,
    );
    files.insert(
        "floorplan.geojson".into(),
        serde_json::to_vec_pretty(&scenario.floorplan.to_geojson()).map_err(io::Error::from)?,
    );
    for run in &scenario.device_runs {
        let mut buf = Vec::new();
        write_raw_csv(&run.raw_log, &mut buf)?;
        files.insert(format!("raw/{}.csv", run.device_id), buf);
    }
    Ok(files)
}

/// Writes bundle files below `dir`, creating directories as needed.
pub fn write_bundle_files(files: &BundleFiles, dir: &Path) -> Result<(), IngestError> {
    for (rel, bytes) in files {
        if rel.split('/').any(|c| c == ".." || c.is_empty()) {
            return Err(IngestError::Validation(ValidationErrors(vec![ValidationError::new(
                rel.clone(),
                "invalid bundle path",
            )])));
        }
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
    }
    Ok(())
}

pub fn write_bundle(scenario: &Scenario, dir: &Path) -> Result<(), IngestError> {
    write_bundle_files(&scenario_to_files(scenario)?, dir)
}
