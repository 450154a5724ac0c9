//! Domain types shared across the engine: trajectories, beacons, device
//! runs, floorplans and scenarios.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::eval::{AggregateReport, MetricReport};
use crate::geo::{self, GeoPoint};
use crate::ingest::RawLog;
use crate::plugins::PipelineConfig;

/// Milliseconds since a run epoch.
pub type Millis = i64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("trajectory must contain at least one point")]
    EmptyTrajectory,
    #[error("trajectory timestamps must be strictly increasing (index {0})")]
    NonIncreasingTimestamps(usize),
    #[error("timestamp {0} out of groundtruth range")]
    OutOfGroundtruthRange(Millis),
    #[error("negative timestamp {0}")]
    NegativeTimestamp(Millis),
    #[error(transparent)]
    Validation(#[from] ValidationErrors),
}

/// A single structural problem, qualified by the path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ValidationError {
    pub path: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub struct ValidationErrors(pub Vec<ValidationError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Groundtruth,
    Estimated,
    Corrected,
}

impl TrajectoryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrajectoryKind::Groundtruth => "groundtruth",
            TrajectoryKind::Estimated => "estimated",
            TrajectoryKind::Corrected => "corrected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub location: GeoPoint,
    pub timestamp: Millis,
}

impl TrajectoryPoint {
    pub fn new(location: GeoPoint, timestamp: Millis) -> Self {
        Self {
            location,
            timestamp,
        }
    }
}

/// Timestamped positions of one device; non-empty with strictly increasing
/// timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    kind: TrajectoryKind,
    device_id: String,
    points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn new(
        kind: TrajectoryKind,
        device_id: impl Into<String>,
        points: Vec<TrajectoryPoint>,
    ) -> Result<Self, ModelError> {
        if points.is_empty() {
            return Err(ModelError::EmptyTrajectory);
        }
        if let Some(i) = points
            .windows(2)
            .position(|w| w[1].timestamp <= w[0].timestamp)
        {
            return Err(ModelError::NonIncreasingTimestamps(i + 1));
        }
        Ok(Self {
            kind,
            device_id: device_id.into(),
            points,
        })
    }

    pub fn kind(&self) -> TrajectoryKind {
        self.kind
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> &TrajectoryPoint {
        &self.points[0]
    }

    pub fn last(&self) -> &TrajectoryPoint {
        &self.points[self.points.len() - 1]
    }

    pub fn locations(&self) -> impl Iterator<Item = GeoPoint> + '_ {
        self.points.iter().map(|p| p.location)
    }

    pub fn with_kind(mut self, kind: TrajectoryKind) -> Self {
        self.kind = kind;
        self
    }
}

/// Sum of consecutive ground distances, in meters.
pub fn trajectory_length(t: &Trajectory) -> f64 {
    polyline_length(&t.locations().collect::<Vec<_>>())
}

pub fn polyline_length(points: &[GeoPoint]) -> f64 {
    points.windows(2).map(|w| geo::distance(w[0], w[1])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum BeaconKind {
    Physical,
    Virtual,
}

pub const DEFAULT_RSSI_AT_1M_DBM: f64 = -59.0;
pub const DEFAULT_PATH_LOSS_EXPONENT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Beacon {
    #[serde(default)]
    pub id: String,
    pub slug: String,
    pub location: GeoPoint,
    #[serde(default = "default_beacon_kind")]
    pub kind: BeaconKind,
    #[serde(default = "default_tx_power")]
    pub tx_power_dbm: f64,
    #[serde(default = "default_path_loss_exponent")]
    pub path_loss_exponent: f64,
}

fn default_beacon_kind() -> BeaconKind {
    BeaconKind::Virtual
}

fn default_tx_power() -> f64 {
    DEFAULT_RSSI_AT_1M_DBM
}

fn default_path_loss_exponent() -> f64 {
    DEFAULT_PATH_LOSS_EXPONENT
}

impl Beacon {
    pub fn validate(&self, path: &str, errors: &mut Vec<ValidationError>) {
        if self.slug.is_empty() {
            errors.push(ValidationError::new(format!("{path}.slug"), "must not be empty"));
        }
        if let Err(e) = self.location.validate() {
            errors.push(ValidationError::new(format!("{path}.location"), e.to_string()));
        }
        if !(self.path_loss_exponent > 0.0) {
            errors.push(ValidationError::new(
                format!("{path}.path_loss_exponent"),
                "must be > 0",
            ));
        }
        if !self.tx_power_dbm.is_finite() {
            errors.push(ValidationError::new(format!("{path}.tx_power_dbm"), "must be finite"));
        }
    }
}

pub const DEFAULT_STEP_LENGTH_M: f64 = 0.7;
pub const DEFAULT_LOWER_THRESHOLD: f64 = 5.0;
pub const DEFAULT_COLLABORATION_RANGE_M: f64 = 4.0;
pub const DEFAULT_BEACON_CORRECTION_RANGE_M: f64 = 2.0;

/// Per-device tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct DeviceParams {
    #[serde(rename = "step_length_m", default = "default_step_length")]
    pub step_length: f64,
    /// Radians clockwise from north.
    #[serde(rename = "initial_heading_rad", default)]
    pub initial_heading: f64,
    #[serde(default = "default_lower_threshold")]
    pub lower_threshold: f64,
    #[serde(rename = "collaboration_range_m", default = "default_collaboration_range")]
    pub collaboration_range: f64,
    #[serde(
        rename = "beacon_correction_range_m",
        default = "default_beacon_correction_range"
    )]
    pub beacon_correction_range: f64,
}

fn default_step_length() -> f64 {
    DEFAULT_STEP_LENGTH_M
}
fn default_lower_threshold() -> f64 {
    DEFAULT_LOWER_THRESHOLD
}
fn default_collaboration_range() -> f64 {
    DEFAULT_COLLABORATION_RANGE_M
}
fn default_beacon_correction_range() -> f64 {
    DEFAULT_BEACON_CORRECTION_RANGE_M
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            step_length: DEFAULT_STEP_LENGTH_M,
            initial_heading: 0.0,
            lower_threshold: DEFAULT_LOWER_THRESHOLD,
            collaboration_range: DEFAULT_COLLABORATION_RANGE_M,
            beacon_correction_range: DEFAULT_BEACON_CORRECTION_RANGE_M,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self, path: &str, errors: &mut Vec<ValidationError>) {
        let mut check = |ok: bool, field: &str, msg: &str| {
            if !ok {
                errors.push(ValidationError::new(format!("{path}.{field}"), msg));
            }
        };
        check(self.step_length > 0.0, "step_length_m", "must be > 0");
        check(self.initial_heading.is_finite(), "initial_heading_rad", "must be finite");
        check(self.lower_threshold >= 0.0, "lower_threshold", "must be >= 0");
        check(self.collaboration_range > 0.0, "collaboration_range_m", "must be > 0");
        check(
            self.beacon_correction_range > 0.0,
            "beacon_correction_range_m",
            "must be > 0",
        );
    }
}

/// Moment a participant signalled reaching a groundtruth vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Checkpoint {
    pub vertex: usize,
    pub timestamp: Millis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRun {
    pub device_id: String,
    /// Physical handset the run was recorded on, when known.
    pub hardware: Option<String>,
    pub groundtruth_path: Vec<GeoPoint>,
    pub checkpoints: Vec<Checkpoint>,
    pub raw_log: RawLog,
    pub params: DeviceParams,
    pub error_counter: f64,
}

impl DeviceRun {
    pub fn validate(&self, path: &str, errors: &mut Vec<ValidationError>) {
        if self.device_id.is_empty() {
            errors.push(ValidationError::new(format!("{path}.device_id"), "must not be empty"));
        }
        if self.groundtruth_path.is_empty() {
            errors.push(ValidationError::new(
                format!("{path}.groundtruth_path"),
                "must contain at least one vertex",
            ));
        }
        for (i, v) in self.groundtruth_path.iter().enumerate() {
            if let Err(e) = v.validate() {
                errors.push(ValidationError::new(
                    format!("{path}.groundtruth_path[{i}]"),
                    e.to_string(),
                ));
            }
        }
        match self.checkpoints.first() {
            None => errors.push(ValidationError::new(
                format!("{path}.checkpoints"),
                "must contain at least one checkpoint",
            )),
            Some(c) if c.vertex != 0 => errors.push(ValidationError::new(
                format!("{path}.checkpoints[0].vertex"),
                "first checkpoint must be at vertex 0",
            )),
            _ => {}
        }
        for (i, c) in self.checkpoints.iter().enumerate() {
            if c.vertex >= self.groundtruth_path.len() {
                errors.push(ValidationError::new(
                    format!("{path}.checkpoints[{i}].vertex"),
                    format!("vertex {} out of range", c.vertex),
                ));
            }
            if c.timestamp < 0 {
                errors.push(ValidationError::new(
                    format!("{path}.checkpoints[{i}].timestamp"),
                    "must be >= 0",
                ));
            }
            if i > 0 {
                let prev = self.checkpoints[i - 1];
                if c.timestamp <= prev.timestamp {
                    errors.push(ValidationError::new(
                        format!("{path}.checkpoints[{i}].timestamp"),
                        "checkpoint timestamps must be strictly increasing",
                    ));
                }
                if c.vertex < prev.vertex {
                    errors.push(ValidationError::new(
                        format!("{path}.checkpoints[{i}].vertex"),
                        "checkpoint vertices must not go backwards",
                    ));
                }
            }
        }
        if !(self.error_counter >= 0.0) {
            errors.push(ValidationError::new(format!("{path}.error_counter"), "must be >= 0"));
        }
        self.params.validate(&format!("{path}.params"), errors);
    }

    /// Shifts every timestamp (checkpoints and raw log) by `-offset`.
    pub fn shift_time(&mut self, offset: Millis) {
        for c in &mut self.checkpoints {
            c.timestamp -= offset;
        }
        self.raw_log.shift_time(offset);
    }
}

/// Groundtruth position lookup for one run, walking the polyline at
/// constant speed between consecutive checkpoints.
#[derive(Debug, Clone)]
pub struct GroundtruthTrack {
    path: Vec<GeoPoint>,
    /// Cumulative arc length at each vertex.
    arc: Vec<f64>,
    checkpoints: Vec<Checkpoint>,
}

impl GroundtruthTrack {
    pub fn new(run: &DeviceRun) -> Self {
        let mut arc = Vec::with_capacity(run.groundtruth_path.len());
        let mut acc = 0.0;
        for (i, v) in run.groundtruth_path.iter().enumerate() {
            if i > 0 {
                acc += geo::distance(run.groundtruth_path[i - 1], *v);
            }
            arc.push(acc);
        }
        Self {
            path: run.groundtruth_path.clone(),
            arc,
            checkpoints: run.checkpoints.clone(),
        }
    }

    /// First and last checkpoint timestamps.
    pub fn span(&self) -> (Millis, Millis) {
        (
            self.checkpoints[0].timestamp,
            self.checkpoints[self.checkpoints.len() - 1].timestamp,
        )
    }

    pub fn position_at(&self, t: Millis) -> Result<GeoPoint, ModelError> {
        let (start, end) = self.span();
        if t < start || t > end {
            return Err(ModelError::OutOfGroundtruthRange(t));
        }
        let k = match self.checkpoints.binary_search_by_key(&t, |c| c.timestamp) {
            Ok(k) => return Ok(self.path[self.checkpoints[k].vertex]),
            Err(k) => k - 1,
        };
        let (c0, c1) = (self.checkpoints[k], self.checkpoints[k + 1]);
        let frac = (t - c0.timestamp) as f64 / (c1.timestamp - c0.timestamp) as f64;
        let s = self.arc[c0.vertex] + frac * (self.arc[c1.vertex] - self.arc[c0.vertex]);
        Ok(self.point_at_arc(s, c0.vertex, c1.vertex))
    }

    /// Like [`position_at`](Self::position_at) but clamps to the nearest
    /// endpoint; the flag reports whether clamping happened.
    pub fn position_clamped(&self, t: Millis) -> (GeoPoint, bool) {
        let (start, end) = self.span();
        let clamped = t.clamp(start, end);
        let p = self
            .position_at(clamped)
            .expect("clamped timestamp lies within span");
        (p, clamped != t)
    }

    fn point_at_arc(&self, s: f64, from: usize, to: usize) -> GeoPoint {
        if from == to {
            return self.path[from];
        }
        // last vertex in [from, to) whose arc position does not exceed s
        let mut seg = from;
        while seg + 1 < to && self.arc[seg + 1] <= s {
            seg += 1;
        }
        let len = self.arc[seg + 1] - self.arc[seg];
        if len <= 0.0 {
            return self.path[seg];
        }
        let ratio = ((s - self.arc[seg]) / len).clamp(0.0, 1.0);
        geo::intermediate_point(self.path[seg], self.path[seg + 1], ratio)
    }

    pub fn path(&self) -> &[GeoPoint] {
        &self.path
    }
}

/// Samples a run's groundtruth at the given strictly increasing timestamps.
pub fn interpolate_groundtruth(
    run: &DeviceRun,
    query_timestamps: &[Millis],
) -> Result<Trajectory, ModelError> {
    let track = GroundtruthTrack::new(run);
    let points = query_timestamps
        .iter()
        .map(|&t| track.position_at(t).map(|p| TrajectoryPoint::new(p, t)))
        .collect::<Result<Vec<_>, _>>()?;
    Trajectory::new(TrajectoryKind::Groundtruth, run.device_id.clone(), points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Room,
    Wall,
    Corridor,
    Door,
    #[serde(rename = "pointOfInterest")]
    PointOfInterest,
}

impl FeatureKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "room" => Self::Room,
            "wall" => Self::Wall,
            "corridor" => Self::Corridor,
            "door" => Self::Door,
            "pointOfInterest" => Self::PointOfInterest,
            _ => return None,
        })
    }
}

/// GeoJSON geometry; coordinates are `[lon, lat]` as in the GeoJSON standard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "coordinates")]
pub enum Geometry {
    Point([f64; 2]),
    LineString(Vec<[f64; 2]>),
    Polygon(Vec<Vec<[f64; 2]>>),
    MultiLineString(Vec<Vec<[f64; 2]>>),
    MultiPolygon(Vec<Vec<Vec<[f64; 2]>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorplanFeature {
    pub kind: FeatureKind,
    pub geometry: Geometry,
    pub properties: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Floorplan {
    pub features: Vec<FloorplanFeature>,
}

impl Floorplan {
    /// Parses a GeoJSON FeatureCollection. Point features with
    /// `kind: "beacon"` are returned separately as beacons.
    pub fn from_geojson(text: &str) -> Result<(Floorplan, Vec<Beacon>), ValidationErrors> {
        let root: Value = serde_json::from_str(text).map_err(|e| {
            ValidationErrors(vec![ValidationError::new("floorplan", format!("invalid JSON: {e}"))])
        })?;
        let mut errors = Vec::new();
        let mut floorplan = Floorplan::default();
        let mut beacons = Vec::new();
        if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            errors.push(ValidationError::new("floorplan.type", "expected \"FeatureCollection\""));
        }
        let Some(features) = root.get("features").and_then(Value::as_array) else {
            errors.push(ValidationError::new("floorplan.features", "expected an array"));
            return Err(ValidationErrors(errors));
        };
        for (i, f) in features.iter().enumerate() {
            let path = format!("floorplan.features[{i}]");
            if f.get("type").and_then(Value::as_str) != Some("Feature") {
                errors.push(ValidationError::new(format!("{path}.type"), "expected \"Feature\""));
                continue;
            }
            let properties = f
                .get("properties")
                .and_then(Value::as_object)
                .cloned()
                .unwrap_or_default();
            let geometry: Geometry = match f.get("geometry").cloned().map(serde_json::from_value) {
                Some(Ok(g)) => g,
                Some(Err(e)) => {
                    errors.push(ValidationError::new(format!("{path}.geometry"), e.to_string()));
                    continue;
                }
                None => {
                    errors.push(ValidationError::new(format!("{path}.geometry"), "missing"));
                    continue;
                }
            };
            validate_geometry(&geometry, &format!("{path}.geometry"), &mut errors);
            let Some(kind) = properties.get("kind").and_then(Value::as_str) else {
                errors.push(ValidationError::new(
                    format!("{path}.properties.kind"),
                    "missing feature kind",
                ));
                continue;
            };
            if kind == "beacon" {
                match beacon_from_feature(&geometry, &properties, &path) {
                    Ok(b) => beacons.push(b),
                    Err(e) => errors.push(e),
                }
                continue;
            }
            match FeatureKind::parse(kind) {
                Some(kind) => {
                    let mut properties = properties;
                    properties.remove("kind");
                    floorplan.features.push(FloorplanFeature {
                        kind,
                        geometry,
                        properties,
                    })
                }
                None => errors.push(ValidationError::new(
                    format!("{path}.properties.kind"),
                    format!("unknown feature kind {kind:?}"),
                )),
            }
        }
        if errors.is_empty() {
            Ok((floorplan, beacons))
        } else {
            Err(ValidationErrors(errors))
        }
    }

    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .features
            .iter()
            .map(|f| {
                let mut props = f.properties.clone();
                props.insert("kind".into(), serde_json::to_value(f.kind).unwrap());
                serde_json::json!({
                    "type": "Feature",
                    "geometry": f.geometry,
                    "properties": props,
                })
            })
            .collect();
        serde_json::json!({ "type": "FeatureCollection", "features": features })
    }
}

fn beacon_from_feature(
    geometry: &Geometry,
    props: &Map<String, Value>,
    path: &str,
) -> Result<Beacon, ValidationError> {
    let Geometry::Point([lon, lat]) = geometry else {
        return Err(ValidationError::new(
            format!("{path}.geometry"),
            "beacon features must be Points",
        ));
    };
    let slug = props
        .get("slug")
        .and_then(Value::as_str)
        .ok_or_else(|| ValidationError::new(format!("{path}.properties.slug"), "missing"))?;
    let num = |key: &str, default: f64| props.get(key).and_then(Value::as_f64).unwrap_or(default);
    let kind = match props.get("beacon_kind").and_then(Value::as_str) {
        Some("physical") => BeaconKind::Physical,
        _ => BeaconKind::Virtual,
    };
    Ok(Beacon {
        id: props
            .get("id")
            .and_then(Value::as_str)
            .unwrap_or(slug)
            .to_string(),
        slug: slug.to_string(),
        location: GeoPoint { lat: *lat, lon: *lon },
        kind,
        tx_power_dbm: num("tx_power_dbm", DEFAULT_RSSI_AT_1M_DBM),
        path_loss_exponent: num("path_loss_exponent", DEFAULT_PATH_LOSS_EXPONENT),
    })
}

fn validate_position(c: &[f64; 2], path: &str, errors: &mut Vec<ValidationError>) {
    if let Err(e) = GeoPoint::new(c[1], c[0]) {
        errors.push(ValidationError::new(path, e.to_string()));
    }
}

fn validate_ring(ring: &[[f64; 2]], path: &str, errors: &mut Vec<ValidationError>) {
    if ring.len() < 4 {
        errors.push(ValidationError::new(path, "linear ring needs at least 4 positions"));
    } else if ring.first() != ring.last() {
        errors.push(ValidationError::new(path, "linear ring is not closed"));
    }
    for (i, c) in ring.iter().enumerate() {
        validate_position(c, &format!("{path}[{i}]"), errors);
    }
}

fn validate_line(line: &[[f64; 2]], path: &str, errors: &mut Vec<ValidationError>) {
    if line.len() < 2 {
        errors.push(ValidationError::new(path, "line string needs at least 2 positions"));
    }
    for (i, c) in line.iter().enumerate() {
        validate_position(c, &format!("{path}[{i}]"), errors);
    }
}

fn validate_geometry(g: &Geometry, path: &str, errors: &mut Vec<ValidationError>) {
    let coords = format!("{path}.coordinates");
    match g {
        Geometry::Point(c) => validate_position(c, &coords, errors),
        Geometry::LineString(l) => validate_line(l, &coords, errors),
        Geometry::MultiLineString(ls) => {
            for (i, l) in ls.iter().enumerate() {
                validate_line(l, &format!("{coords}[{i}]"), errors);
            }
        }
        Geometry::Polygon(rings) => {
            for (i, r) in rings.iter().enumerate() {
                validate_ring(r, &format!("{coords}[{i}]"), errors);
            }
        }
        Geometry::MultiPolygon(polys) => {
            for (j, rings) in polys.iter().enumerate() {
                for (i, r) in rings.iter().enumerate() {
                    validate_ring(r, &format!("{coords}[{j}][{i}]"), errors);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TimeAlignment {
    AsRecorded,
    #[default]
    CommonStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub name: String,
    pub floorplan: Floorplan,
    pub beacons: Vec<Beacon>,
    pub device_runs: Vec<DeviceRun>,
    pub time_alignment: TimeAlignment,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ValidationErrors> {
        let mut errors = Vec::new();
        let mut slugs = HashSet::new();
        for (i, b) in self.beacons.iter().enumerate() {
            let path = format!("beacons[{i}]");
            b.validate(&path, &mut errors);
            if !slugs.insert(b.slug.as_str()) {
                errors.push(ValidationError::new(
                    format!("{path}.slug"),
                    format!("duplicate beacon slug {:?}", b.slug),
                ));
            }
        }
        let mut ids = HashSet::new();
        for (i, run) in self.device_runs.iter().enumerate() {
            let path = format!("devices[{i}]");
            run.validate(&path, &mut errors);
            if !ids.insert(run.device_id.as_str()) {
                errors.push(ValidationError::new(
                    format!("{path}.device_id"),
                    format!("duplicate device id {:?}", run.device_id),
                ));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(errors))
        }
    }

    pub fn beacon(&self, slug: &str) -> Option<&Beacon> {
        self.beacons.iter().find(|b| b.slug == slug)
    }

    /// Number of distinct handsets, falling back to one per run when the
    /// hardware is not recorded.
    pub fn hardware_count(&self) -> usize {
        let set: HashSet<&str> = self
            .device_runs
            .iter()
            .map(|r| r.hardware.as_deref().unwrap_or(r.device_id.as_str()))
            .collect();
        set.len()
    }

    pub fn total_groundtruth_length(&self) -> f64 {
        self.device_runs
            .iter()
            .map(|r| polyline_length(&r.groundtruth_path))
            .sum()
    }
}

/// Outcome of one replay for one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceResult {
    pub device_id: String,
    pub groundtruth: Trajectory,
    pub estimated: Trajectory,
    pub corrected: Trajectory,
    pub collaboration_count: u64,
    pub beacon_correction_count: u64,
    pub params: DeviceParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario_id: String,
    pub pipeline: PipelineConfig,
    pub alignment: TimeAlignment,
    pub seed: u64,
    pub beacons: Vec<Beacon>,
    pub devices: Vec<DeviceResult>,
    pub metrics: Vec<MetricReport>,
    pub aggregate: AggregateReport,
}

impl RunResult {
    pub fn device(&self, id: &str) -> Option<&DeviceResult> {
        self.devices.iter().find(|d| d.device_id == id)
    }

    pub fn metrics_by_device(&self) -> BTreeMap<&str, &MetricReport> {
        self.metrics.iter().map(|m| (m.device_id.as_str(), m)).collect()
    }
}
