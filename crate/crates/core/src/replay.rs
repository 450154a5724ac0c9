//! Execution replay: all device runs on one shared timeline.
//!
//! Filtering and positioning run once per device before the event loop, so
//! estimated trajectories are fixed. The loop then walks the merged tick
//! timeline, moves every corrected position by the estimated step
//! displacements, checks groundtruth proximity and beacon ranging, and
//! applies collaborative updates computed from the state before the tick.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{
    distance_to_rssi, rssi_to_distance, AlgorithmError, DeviceUpdate, DeviceView, ErrorAccrual,
    ParticipantKind, PathLossModel, UpdateSource,
};
use crate::eval::{self, EvalError};
use crate::geo::{self, EarthModel, GeoPoint, LocalFrame};
use crate::model::{
    Beacon, BeaconKind, DeviceResult, DeviceRun, GroundtruthTrack, Millis, ModelError, RunResult,
    Scenario, TimeAlignment, Trajectory, TrajectoryKind, TrajectoryPoint,
};
use crate::plugins::{Pipeline, PipelineConfig, PluginError, PositioningInput, Registry};

/// Groundtruth distances below this are treated as this when synthesising
/// virtual beacon RSSI, since the path-loss model is undefined at 0.
const MIN_RANGING_DISTANCE_M: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("scenario has no device runs")]
    EmptyScenario,
    #[error("device {0:?} has no raw log")]
    MissingRawLog(String),
    #[error("device {0:?} has no overlap between raw log and checkpoints")]
    NoActiveSpan(String),
    #[error(transparent)]
    Validation(#[from] crate::model::ValidationErrors),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum EncounterKind {
    PeerPeer,
    DeviceBeacon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct EncounterEvent {
    pub timestamp: Millis,
    pub kind: EncounterKind,
    /// Device id, then device id or beacon slug.
    pub participants: (String, String),
    pub groundtruth_distance: f64,
    /// Ranged distance for beacon encounters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_distance: Option<f64>,
    /// Whether the collaborative plugin produced an update for the first
    /// participant.
    #[serde(default)]
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct DeviceTickState {
    pub device_id: String,
    pub groundtruth: GeoPoint,
    pub estimated: GeoPoint,
    pub corrected: GeoPoint,
    pub error_counter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ReplayTick {
    pub timestamp: Millis,
    /// Active devices, ordered by id.
    pub devices: Vec<DeviceTickState>,
}

/// Everything one replay produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub result: RunResult,
    pub encounters: Vec<EncounterEvent>,
    pub ticks: Vec<ReplayTick>,
}

/// Copy of the scenario with each run shifted according to `alignment`.
pub fn align_scenario(scenario: &Scenario, alignment: TimeAlignment) -> Scenario {
    let mut s = scenario.clone();
    s.time_alignment = alignment;
    if alignment == TimeAlignment::CommonStart {
        for run in &mut s.device_runs {
            if let Some(t0) = run.raw_log.first_timestamp() {
                run.shift_time(t0);
            }
        }
    }
    s
}

/// Sorted, deduplicated union of the step timestamps and a heartbeat grid
/// covering `[start, end]`. The grid is anchored at multiples of the
/// heartbeat.
pub fn build_timeline(
    span: (Millis, Millis),
    step_timestamps: &[Vec<Millis>],
    heartbeat_ms: Millis,
) -> Vec<Millis> {
    let (start, end) = span;
    let mut ticks: Vec<Millis> = step_timestamps.iter().flatten().copied().collect();
    if heartbeat_ms > 0 && end >= start {
        let mut t = start.div_euclid(heartbeat_ms) * heartbeat_ms;
        while t <= end {
            if t >= start {
                ticks.push(t);
            }
            t += heartbeat_ms;
        }
    }
    ticks.sort_unstable();
    ticks.dedup();
    ticks
}

/// Timeline for a scenario given each device's step timestamps. The span
/// covers every raw log.
pub fn scenario_timeline(
    scenario: &Scenario,
    step_timestamps: &[Vec<Millis>],
    heartbeat_ms: Millis,
) -> Result<Vec<Millis>, ReplayError> {
    let mut span: Option<(Millis, Millis)> = None;
    for run in &scenario.device_runs {
        let (Some(a), Some(b)) = (run.raw_log.first_timestamp(), run.raw_log.last_timestamp()) else {
            return Err(ReplayError::MissingRawLog(run.device_id.clone()));
        };
        span = Some(match span {
            None => (a, b),
            Some((s, e)) => (s.min(a), e.max(b)),
        });
    }
    let span = span.ok_or(ReplayError::EmptyScenario)?;
    Ok(build_timeline(span, step_timestamps, heartbeat_ms))
}

/// Ground and estimated state of one participant as seen by encounter
/// detection.
#[derive(Debug, Clone)]
pub struct EncounterInput<'a> {
    pub device_id: &'a str,
    pub groundtruth: GeoPoint,
    pub collaboration_range: f64,
    pub beacon_correction_range: f64,
    pub run: &'a DeviceRun,
}

/// Peer and beacon encounters at one tick. Peer pairs are reported in both
/// directions when their groundtruth distance is strictly below the smaller
/// of the two collaboration ranges. Beacon encounters fire when the ranged
/// distance is strictly below the device's beacon-correction range. Events
/// come out sorted by (kind, participants).
pub fn detect_encounters<R: rand::Rng + ?Sized>(
    timestamp: Millis,
    devices: &[EncounterInput<'_>],
    beacons: &[Beacon],
    model_override: (Option<f64>, Option<f64>),
    noise_sigma_db: f64,
    rng: &mut R,
) -> Result<Vec<EncounterEvent>, ReplayError> {
    let mut events = Vec::new();
    for (i, a) in devices.iter().enumerate() {
        for b in &devices[i + 1..] {
            let d = geo::distance(a.groundtruth, b.groundtruth);
            if d < a.collaboration_range.min(b.collaboration_range) {
                for (x, y) in [(a, b), (b, a)] {
                    events.push(EncounterEvent {
                        timestamp,
                        kind: EncounterKind::PeerPeer,
                        participants: (x.device_id.to_string(), y.device_id.to_string()),
                        groundtruth_distance: d,
                        estimated_distance: None,
                        applied: false,
                    });
                }
            }
        }
    }
    for a in devices {
        for beacon in beacons {
            let model = PathLossModel {
                rssi_at_1m: model_override.0.unwrap_or(beacon.tx_power_dbm),
                exponent: model_override.1.unwrap_or(beacon.path_loss_exponent),
                noise_sigma_db,
            };
            let d = geo::distance(a.groundtruth, beacon.location);
            let rssi = match beacon.kind {
                BeaconKind::Virtual => Some(distance_to_rssi(d.max(MIN_RANGING_DISTANCE_M), &model, rng)?),
                BeaconKind::Physical => a
                    .run
                    .raw_log
                    .record_at(timestamp)
                    .and_then(|r| r.rssi.get(&beacon.slug).copied()),
            };
            let Some(rssi) = rssi else { continue };
            let ranged = rssi_to_distance(rssi, &model);
            if ranged < a.beacon_correction_range {
                events.push(EncounterEvent {
                    timestamp,
                    kind: EncounterKind::DeviceBeacon,
                    participants: (a.device_id.to_string(), beacon.slug.clone()),
                    groundtruth_distance: d,
                    estimated_distance: Some(ranged),
                    applied: false,
                });
            }
        }
    }
    events.sort_by(|x, y| (x.kind, &x.participants).cmp(&(y.kind, &y.participants)));
    Ok(events)
}

/// Per-device state carried through the event loop.
struct DeviceState<'a> {
    run: &'a DeviceRun,
    track: GroundtruthTrack,
    estimated: Trajectory,
    /// Index of the last estimated point already applied.
    cursor: usize,
    active: (Millis, Millis),
    corrected: GeoPoint,
    previous_corrected: Option<GeoPoint>,
    corrected_points: Vec<TrajectoryPoint>,
    errors: f64,
    last_accrual: Millis,
    collaboration_count: u64,
    beacon_correction_count: u64,
}

impl DeviceState<'_> {
    fn id(&self) -> &str {
        &self.run.device_id
    }

    fn is_active(&self, t: Millis) -> bool {
        self.active.0 <= t && t <= self.active.1
    }

    fn estimated_at(&self) -> GeoPoint {
        self.estimated.points()[self.cursor].location
    }

    /// Replays estimated steps up to `t` onto the corrected position;
    /// returns the number of steps taken.
    fn advance(&mut self, t: Millis) -> u64 {
        let pts = self.estimated.points();
        let mut steps = 0;
        while self.cursor + 1 < pts.len() && pts[self.cursor + 1].timestamp <= t {
            let (from, to) = (pts[self.cursor].location, pts[self.cursor + 1].location);
            let d = geo::distance(from, to);
            if d > 0.0 {
                let bearing = geo::initial_bearing(from, to).unwrap_or(0.0);
                self.corrected = geo::destination_point(self.corrected, bearing, d, EarthModel::default());
            }
            self.cursor += 1;
            steps += 1;
        }
        steps
    }

    fn view(&self) -> DeviceView {
        DeviceView {
            id: self.id().to_string(),
            kind: ParticipantKind::Mobile,
            location: self.corrected,
            previous_location: self.previous_corrected,
            errors: self.errors,
        }
    }

    fn record(&mut self, t: Millis) {
        match self.corrected_points.last_mut() {
            Some(last) if last.timestamp == t => last.location = self.corrected,
            Some(last) if last.location == self.corrected => {}
            _ => self.corrected_points.push(TrajectoryPoint::new(self.corrected, t)),
        }
    }
}

fn run_positioning(pipeline: &Pipeline, run: &DeviceRun) -> Result<Trajectory, ReplayError> {
    if run.raw_log.is_empty() {
        return Err(ReplayError::MissingRawLog(run.device_id.clone()));
    }
    let filtered = match (&pipeline.filtering, &pipeline.config.filtering) {
        (Some(f), Some(r)) => Some(f.get_filtered_data(&run.raw_log, &run.params, &r.params)?),
        _ => None,
    };
    let input = PositioningInput {
        device_id: &run.device_id,
        initial: run.groundtruth_path[run.checkpoints[0].vertex],
        groundtruth: &run.groundtruth_path,
        raw: &run.raw_log,
        filtered: filtered.as_ref(),
        device: &run.params,
    };
    let est = pipeline
        .positioning
        .get_positioning_data(&input, &pipeline.config.positioning.params)?;
    Ok(est.with_kind(TrajectoryKind::Estimated))
}

/// Mean of several proposed locations, taken in a local frame around the
/// first one.
fn mean_location(points: &[GeoPoint]) -> GeoPoint {
    if points.len() == 1 {
        return points[0];
    }
    let frame = LocalFrame::new(points[0]);
    let (mut e, mut n) = (0.0, 0.0);
    for p in points {
        let (pe, pn) = frame.to_local(*p);
        e += pe;
        n += pn;
    }
    let k = points.len() as f64;
    frame.to_geo(e / k, n / k)
}

/// Groundtruth sampled at every estimated and corrected timestamp and at
/// every checkpoint, restricted to the checkpoint span.
fn groundtruth_trajectory(
    run: &DeviceRun,
    track: &GroundtruthTrack,
    subjects: [&[TrajectoryPoint]; 2],
) -> Result<Trajectory, ReplayError> {
    let (start, end) = track.span();
    let mut ts: Vec<Millis> = run.checkpoints.iter().map(|c| c.timestamp).collect();
    for s in subjects {
        ts.extend(s.iter().map(|p| p.timestamp).filter(|t| (start..=end).contains(t)));
    }
    ts.sort_unstable();
    ts.dedup();
    let points = ts
        .into_iter()
        .map(|t| Ok(TrajectoryPoint::new(track.position_at(t)?, t)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(Trajectory::new(TrajectoryKind::Groundtruth, run.device_id.clone(), points)?)
}

/// Replays a scenario with the built-in plugin registry, using the
/// scenario's own time alignment.
pub fn run_replay(
    scenario: &Scenario,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<RunArtifacts, ReplayError> {
    run_replay_with(&Registry::with_builtins(), scenario, pipeline, seed)
}

pub fn run_replay_with(
    registry: &Registry,
    scenario: &Scenario,
    config: &PipelineConfig,
    seed: u64,
) -> Result<RunArtifacts, ReplayError> {
    if scenario.device_runs.is_empty() {
        return Err(ReplayError::EmptyScenario);
    }
    scenario.validate()?;
    let pipeline = registry.assemble(config)?;
    let settings = pipeline.collaboration;
    let scenario = align_scenario(scenario, scenario.time_alignment);

    let mut runs: Vec<&DeviceRun> = scenario.device_runs.iter().collect();
    runs.sort_by(|a, b| a.device_id.cmp(&b.device_id));

    let mut states = Vec::with_capacity(runs.len());
    for run in &runs {
        let estimated = run_positioning(&pipeline, run)?;
        let track = GroundtruthTrack::new(run);
        let (gt0, gt1) = track.span();
        let raw0 = run.raw_log.first_timestamp().unwrap_or(gt0);
        let raw1 = run.raw_log.last_timestamp().unwrap_or(gt1);
        let active = (gt0.max(raw0), gt1.min(raw1));
        if active.0 > active.1 {
            return Err(ReplayError::NoActiveSpan(run.device_id.clone()));
        }
        let start = *estimated.first();
        states.push(DeviceState {
            run,
            track,
            cursor: 0,
            active,
            corrected: start.location,
            previous_corrected: None,
            corrected_points: vec![start],
            errors: run.error_counter,
            last_accrual: start.timestamp,
            collaboration_count: 0,
            beacon_correction_count: 0,
            estimated,
        });
    }

    let steps: Vec<Vec<Millis>> = states
        .iter()
        .map(|s| s.estimated.points()[1..].iter().map(|p| p.timestamp).collect())
        .collect();
    let timeline = scenario_timeline(&scenario, &steps, settings.heartbeat_ms)?;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.unwrap_or(seed));
    let mut encounters = Vec::new();
    let mut ticks = Vec::with_capacity(timeline.len());

    for &t in &timeline {
        // (1) advance and (2) accrue
        for s in &mut states {
            if t < s.estimated.first().timestamp {
                continue;
            }
            s.previous_corrected = Some(s.corrected);
            let stepped = s.advance(t);
            s.errors = match settings.accrual {
                ErrorAccrual::PerStep(_) => settings.accrual.accrue(s.errors, stepped, 0),
                ErrorAccrual::PerSecond(_) => {
                    let elapsed = t - s.last_accrual;
                    settings.accrual.accrue(s.errors, 0, if s.is_active(t) { elapsed } else { 0 })
                }
            };
            s.last_accrual = t;
        }

        // (3) encounters among active devices
        let active: Vec<usize> = (0..states.len()).filter(|&i| states[i].is_active(t)).collect();
        let inputs: Vec<EncounterInput<'_>> = active
            .iter()
            .map(|&i| {
                let s = &states[i];
                EncounterInput {
                    device_id: s.id(),
                    groundtruth: s.track.position_clamped(t).0,
                    collaboration_range: s.run.params.collaboration_range,
                    beacon_correction_range: s.run.params.beacon_correction_range,
                    run: s.run,
                }
            })
            .collect();
        let mut tick_events = if pipeline.collaborative.is_some() {
            detect_encounters(
                t,
                &inputs,
                &scenario.beacons,
                (settings.rssi_at_1m_dbm, settings.path_loss_exponent),
                settings.noise_sigma_db,
                &mut rng,
            )?
        } else {
            Vec::new()
        };
        drop(inputs);

        // (4) updates from pre-tick state, applied together
        if let (Some(plugin), Some(r)) = (&pipeline.collaborative, &pipeline.config.collaborative) {
            let index: BTreeMap<&str, usize> = states.iter().enumerate().map(|(i, s)| (s.id(), i)).collect();
            let mut proposals: BTreeMap<usize, Vec<(usize, DeviceUpdate)>> = BTreeMap::new();
            for (k, ev) in tick_events.iter().enumerate() {
                let a = index[ev.participants.0.as_str()];
                let partner = match ev.kind {
                    EncounterKind::PeerPeer => states[index[ev.participants.1.as_str()]].view(),
                    EncounterKind::DeviceBeacon => match scenario.beacon(&ev.participants.1) {
                        Some(b) => DeviceView::beacon(b),
                        None => continue,
                    },
                };
                let lower = settings.lower_threshold.unwrap_or(states[a].run.params.lower_threshold);
                let views = [states[a].view(), partner];
                let updates = plugin.handle_matches(&views, t, lower, settings.secondary_threshold, &r.params);
                for u in updates.into_iter().filter(|u| u.device_id == views[0].id) {
                    proposals.entry(a).or_default().push((k, u));
                }
            }
            for (a, updates) in proposals {
                let (peer, beacon): (Vec<_>, Vec<_>) =
                    updates.into_iter().partition(|(_, u)| matches!(u.source, UpdateSource::Peer(_)));
                let s = &mut states[a];
                if !peer.is_empty() {
                    let locs: Vec<GeoPoint> = peer.iter().map(|(_, u)| u.location).collect();
                    s.corrected = mean_location(&locs);
                    s.errors = peer.iter().map(|(_, u)| u.errors).fold(f64::INFINITY, f64::min);
                    s.collaboration_count += peer.len() as u64;
                }
                if let Some((_, u)) = beacon.last() {
                    s.corrected = u.location;
                    s.errors = u.errors;
                    s.beacon_correction_count += 1;
                }
                for (k, _) in peer.iter().chain(beacon.iter()) {
                    tick_events[*k].applied = true;
                }
            }
        }
        encounters.extend(tick_events);

        // (5) record
        let mut tick = ReplayTick {
            timestamp: t,
            devices: Vec::new(),
        };
        for s in &mut states {
            if t < s.estimated.first().timestamp {
                continue;
            }
            s.record(t);
            if s.is_active(t) {
                tick.devices.push(DeviceTickState {
                    device_id: s.id().to_string(),
                    groundtruth: s.track.position_clamped(t).0,
                    estimated: s.estimated_at(),
                    corrected: s.corrected,
                    error_counter: s.errors,
                });
            }
        }
        ticks.push(tick);
    }

    let mut devices = Vec::with_capacity(states.len());
    for s in states {
        let corrected = Trajectory::new(TrajectoryKind::Corrected, s.run.device_id.clone(), s.corrected_points)?;
        let groundtruth = groundtruth_trajectory(s.run, &s.track, [s.estimated.points(), corrected.points()])?;
        devices.push(DeviceResult {
            device_id: s.run.device_id.clone(),
            groundtruth,
            estimated: s.estimated,
            corrected,
            collaboration_count: s.collaboration_count,
            beacon_correction_count: s.beacon_correction_count,
            params: s.run.params,
        });
    }
    let metrics = eval::build_report(&devices)?;
    Ok(RunArtifacts {
        result: RunResult {
            scenario_id: scenario.id.clone(),
            pipeline: config.clone(),
            alignment: scenario.time_alignment,
            seed,
            beacons: scenario.beacons.clone(),
            devices,
            metrics: metrics.devices,
            aggregate: metrics.aggregate,
        },
        encounters,
        ticks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timeline_is_union_of_steps_and_heartbeat() {
        let t = build_timeline((0, 2000), &[vec![500, 1100]], 500);
        assert_eq!(t, vec![0, 500, 1000, 1100, 1500, 2000]);
    }

    #[test]
    fn timeline_set_union_oracle() {
        let steps = vec![vec![120, 480, 990], vec![480, 1300, 1750]];
        let mut expected: std::collections::BTreeSet<Millis> = steps.iter().flatten().copied().collect();
        expected.extend((0..=1800).step_by(250));
        let got = build_timeline((0, 1800), &steps, 250);
        assert_eq!(got, expected.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn mean_of_one_is_identity() {
        let p = GeoPoint::new(46.5, 6.5).unwrap();
        assert_eq!(mean_location(&[p]), p);
    }
}
