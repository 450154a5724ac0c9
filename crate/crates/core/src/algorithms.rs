//! Built-in tracking algorithms: acceleration-magnitude smoothing, peak
//! based step detection, pedestrian dead reckoning, log-distance beacon
//! ranging and error-ratio drift correction.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, EarthModel, GeoPoint};
use crate::ingest::{RawLog, RSSI_OUT_OF_RANGE_DBM};
use crate::model::{
    Beacon, Millis, ModelError, Trajectory, TrajectoryKind, TrajectoryPoint,
    DEFAULT_RSSI_AT_1M_DBM, DEFAULT_PATH_LOSS_EXPONENT,
};

pub const DEFAULT_CUTOFF_HZ: f64 = 3.0;
pub const DEFAULT_MIN_PEAK_HEIGHT: f64 = 10.8;
pub const DEFAULT_MIN_STEP_INTERVAL_MS: Millis = 300;
/// Corrected positions closer than this across consecutive ticks count as
/// stationary.
pub const STATIONARY_TOLERANCE_M: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgorithmError {
    #[error("cutoff {cutoff_hz} Hz must be below the Nyquist frequency {nyquist_hz} Hz")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("empty input series")]
    Empty,
    #[error("series lengths differ")]
    LengthMismatch,
    #[error("series timestamps must be strictly increasing (index {0})")]
    NonIncreasing(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Smoothed acceleration magnitude and heading per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredSeries {
    timestamps: Vec<Millis>,
    magnitude: Vec<f64>,
    heading: Vec<f64>,
}

impl FilteredSeries {
    pub fn new(
        timestamps: Vec<Millis>,
        magnitude: Vec<f64>,
        heading: Vec<f64>,
    ) -> Result<Self, AlgorithmError> {
        if timestamps.len() != magnitude.len() || timestamps.len() != heading.len() {
            return Err(AlgorithmError::LengthMismatch);
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(AlgorithmError::NonIncreasing(i + 1));
        }
        Ok(Self {
            timestamps,
            magnitude,
            heading,
        })
    }

    pub fn timestamps(&self) -> &[Millis] {
        &self.timestamps
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn heading(&self) -> &[f64] {
        &self.heading
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Mean sample rate over the whole series.
    pub fn sample_rate_hz(&self) -> Option<f64> {
        let n = self.timestamps.len();
        if n < 2 {
            return None;
        }
        Some((n - 1) as f64 * 1000.0 / (self.timestamps[n - 1] - self.timestamps[0]) as f64)
    }

    /// Unsmoothed series straight from a raw log. Records sharing a
    /// timestamp collapse onto the first one.
    pub fn from_raw(
        raw: &RawLog,
        initial_heading: f64,
        mode: HeadingMode,
    ) -> Result<Self, AlgorithmError> {
        if raw.is_empty() {
            return Err(AlgorithmError::Empty);
        }
        let mut dedup = raw.clone();
        dedup.records.dedup_by_key(|r| r.timestamp);
        let heading = heading_series(&dedup, initial_heading, mode);
        let timestamps = dedup.records.iter().map(|r| r.timestamp).collect();
        let magnitude = dedup
            .records
            .iter()
            .map(|r| magnitude(r.acc_x, r.acc_y, r.acc_z))
            .collect();
        Self::new(timestamps, magnitude, heading)
    }

    pub fn with_magnitude(mut self, magnitude: Vec<f64>) -> Result<Self, AlgorithmError> {
        if magnitude.len() != self.timestamps.len() {
            return Err(AlgorithmError::LengthMismatch);
        }
        self.magnitude = magnitude;
        Ok(self)
    }
}

pub fn magnitude(x: f64, y: f64, z: f64) -> f64 {
    (x * x + y * y + z * z).sqrt()
}

/// Second-order Butterworth low-pass section (bilinear transform with
/// frequency pre-warping).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn butterworth_lowpass(cutoff_hz: f64, sample_rate_hz: f64) -> Self {
        let k = (PI * cutoff_hz / sample_rate_hz).tan();
        let k2 = k * k;
        let norm = 1.0 / (1.0 + std::f64::consts::SQRT_2 * k + k2);
        let b0 = k2 * norm;
        Self {
            b: [b0, 2.0 * b0, b0],
            a: [
                2.0 * (k2 - 1.0) * norm,
                (1.0 - std::f64::consts::SQRT_2 * k + k2) * norm,
            ],
        }
    }

    /// Transposed direct form II, started from the steady state for a
    /// constant input equal to `x[0]`.
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let x0 = x[0];
        let mut z1 = (1.0 - b0) * x0;
        let mut z2 = (b2 - a2) * x0;
        x.iter()
            .map(|&xi| {
                let y = b0 * xi + z1;
                z1 = b1 * xi - a1 * y + z2;
                z2 = b2 * xi - a2 * y;
                y
            })
            .collect()
    }
}

/// Zero-phase (forward-backward) second-order Butterworth low-pass.
///
/// The signal is padded with an odd reflection at both ends before
/// filtering so edge samples do not ring.
pub fn lowpass_filter(
    series: &[f64],
    cutoff_hz: f64,
    sample_rate_hz: f64,
) -> Result<Vec<f64>, AlgorithmError> {
    let nyquist_hz = sample_rate_hz / 2.0;
    if !(cutoff_hz > 0.0) || !(cutoff_hz < nyquist_hz) {
        return Err(AlgorithmError::CutoffAboveNyquist {
            cutoff_hz,
            nyquist_hz,
        });
    }
    let n = series.len();
    if n < 2 {
        return Ok(series.to_vec());
    }
    let pad = 9.min(n - 1);
    let (first, last) = (series[0], series[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - series[i]));
    ext.extend_from_slice(series);
    ext.extend((1..=pad).map(|i| 2.0 * last - series[n - 1 - i]));

    let filter = Biquad::butterworth_lowpass(cutoff_hz, sample_rate_hz);
    let mut forward = filter.run(&ext);
    forward.reverse();
    let mut backward = filter.run(&forward);
    backward.reverse();
    Ok(backward[pad..pad + n].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub timestamp: Millis,
    pub heading_at_step: f64,
}

/// Peak-based step detection.
///
/// Candidates are samples strictly above both neighbours and at least
/// `min_peak_height`. Candidates are then accepted from highest to lowest,
/// skipping any closer than `min_step_interval` to an accepted one.
pub fn detect_steps(
    series: &FilteredSeries,
    min_peak_height: f64,
    min_step_interval: Millis,
) -> Vec<StepEvent> {
    let mag = series.magnitude();
    let ts = series.timestamps();
    let mut candidates: Vec<usize> = (1..mag.len().saturating_sub(1))
        .filter(|&i| mag[i] > mag[i - 1] && mag[i] > mag[i + 1] && mag[i] >= min_peak_height)
        .collect();
    candidates.sort_by(|&i, &j| mag[j].total_cmp(&mag[i]).then(i.cmp(&j)));

    let mut kept: BTreeSet<Millis> = BTreeSet::new();
    let mut events = Vec::new();
    for i in candidates {
        let t = ts[i];
        let lo = kept.range(..=t).next_back();
        let hi = kept.range(t..).next();
        let clear = lo.is_none_or(|&p| t - p >= min_step_interval)
            && hi.is_none_or(|&n| n - t >= min_step_interval);
        if clear {
            kept.insert(t);
            events.push(StepEvent {
                timestamp: t,
                heading_at_step: series.heading()[i],
            });
        }
    }
    events.sort_by_key(|e| e.timestamp);
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadingMode {
    /// Integrate the yaw rate (`gyro_z`, positive clockwise) from the
    /// initial heading.
    #[default]
    GyroIntegration,
    /// Use the logged azimuth directly.
    Azimuth,
}

impl HeadingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gyro" | "gyro_integration" => Some(Self::GyroIntegration),
            "azimuth" => Some(Self::Azimuth),
            _ => None,
        }
    }
}

/// Heading per record in `[0, 2π)`, clockwise from north.
pub fn heading_series(raw: &RawLog, initial_heading: f64, mode: HeadingMode) -> Vec<f64> {
    match mode {
        HeadingMode::GyroIntegration => {
            let mut theta = initial_heading;
            let mut out = Vec::with_capacity(raw.len());
            for (i, r) in raw.records.iter().enumerate() {
                if i > 0 {
                    let prev = &raw.records[i - 1];
                    let dt = (r.timestamp - prev.timestamp) as f64 / 1000.0;
                    theta += 0.5 * (prev.gyro_z + r.gyro_z) * dt;
                }
                out.push(geo::normalize_angle(theta));
            }
            out
        }
        HeadingMode::Azimuth => {
            let mut out = Vec::with_capacity(raw.len());
            let mut prev: Option<f64> = None;
            for r in &raw.records {
                let mut a = r.azimuth.to_radians();
                if let Some(p) = prev {
                    // unwrap against the previous sample
                    a += TAU * ((p - a) / TAU).round();
                }
                prev = Some(a);
                out.push(geo::normalize_angle(a));
            }
            out
        }
    }
}

/// One dead-reckoning step of length `step_length` along heading `theta`
/// (radians clockwise from north).
///
/// The planar update `X += L cos θ`, `Y += L sin θ` is taken in a local
/// north/east frame, which is exactly a geodesic displacement of `L` at
/// bearing `θ`.
pub fn pdr_step(prev: GeoPoint, step_length: f64, theta: f64) -> GeoPoint {
    geo::destination_point(prev, theta, step_length, EarthModel::default())
}

/// Folds detected steps into an estimated trajectory starting at
/// `initial` at `start` ms. Steps at or before `start` are ignored.
pub fn pdr_positioning(
    device_id: &str,
    initial: GeoPoint,
    start: Millis,
    steps: &[StepEvent],
    step_length: f64,
) -> Result<Trajectory, AlgorithmError> {
    if !(step_length > 0.0) {
        return Err(AlgorithmError::Parameter("step_length_m must be > 0".into()));
    }
    let mut points = vec![TrajectoryPoint::new(initial, start)];
    let mut here = initial;
    for s in steps.iter().filter(|s| s.timestamp > start) {
        here = pdr_step(here, step_length, s.heading_at_step);
        points.push(TrajectoryPoint::new(here, s.timestamp));
    }
    Ok(Trajectory::new(TrajectoryKind::Estimated, device_id, points)?)
}

/// Log-distance path-loss model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossModel {
    pub rssi_at_1m: f64,
    pub exponent: f64,
    pub noise_sigma_db: f64,
}

impl Default for PathLossModel {
    fn default() -> Self {
        Self {
            rssi_at_1m: DEFAULT_RSSI_AT_1M_DBM,
            exponent: DEFAULT_PATH_LOSS_EXPONENT,
            noise_sigma_db: 0.0,
        }
    }
}

impl PathLossModel {
    pub fn new(rssi_at_1m: f64, exponent: f64, noise_sigma_db: f64) -> Result<Self, AlgorithmError> {
        if !(exponent > 0.0) {
            return Err(AlgorithmError::Parameter("path_loss_exponent must be > 0".into()));
        }
        if !(noise_sigma_db >= 0.0) {
            return Err(AlgorithmError::Parameter("noise_sigma_db must be >= 0".into()));
        }
        Ok(Self {
            rssi_at_1m,
            exponent,
            noise_sigma_db,
        })
    }

    pub fn for_beacon(beacon: &Beacon, noise_sigma_db: f64) -> Self {
        Self {
            rssi_at_1m: beacon.tx_power_dbm,
            exponent: beacon.path_loss_exponent,
            noise_sigma_db,
        }
    }
}

/// Inverts the path-loss model. The out-of-range sentinel (-100 dBm or
/// weaker) maps to infinity.
pub fn rssi_to_distance(rssi: f64, model: &PathLossModel) -> f64 {
    if rssi <= RSSI_OUT_OF_RANGE_DBM {
        return f64::INFINITY;
    }
    10f64.powf((model.rssi_at_1m - rssi) / (10.0 * model.exponent))
}

/// RSSI a receiver `d` meters away would observe, with optional Gaussian
/// shadowing, clamped to `[-100, 0]`.
pub fn distance_to_rssi<R: Rng + ?Sized>(
    d: f64,
    model: &PathLossModel,
    rng: &mut R,
) -> Result<f64, AlgorithmError> {
    if !(d > 0.0) {
        return Err(AlgorithmError::Parameter(format!("distance must be > 0, got {d}")));
    }
    let mut rssi = model.rssi_at_1m - 10.0 * model.exponent * d.log10();
    if model.noise_sigma_db > 0.0 {
        let normal = Normal::new(0.0, model.noise_sigma_db)
            .map_err(|e| AlgorithmError::Parameter(e.to_string()))?;
        rssi += normal.sample(rng);
    }
    Ok(rssi.clamp(RSSI_OUT_OF_RANGE_DBM, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParticipantKind {
    Mobile,
    Beacon,
}

/// What a collaborative algorithm sees of one participant at a tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceView {
    pub id: String,
    pub kind: ParticipantKind,
    pub location: GeoPoint,
    /// Corrected location at the previous replay tick.
    pub previous_location: Option<GeoPoint>,
    pub errors: f64,
}

impl DeviceView {
    pub fn beacon(beacon: &Beacon) -> Self {
        Self {
            id: beacon.slug.clone(),
            kind: ParticipantKind::Beacon,
            location: beacon.location,
            previous_location: Some(beacon.location),
            errors: 0.0,
        }
    }

    fn is_stationary(&self) -> bool {
        self.previous_location
            .is_some_and(|p| geo::distance(p, self.location) < STATIONARY_TOLERANCE_M)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum UpdateSource {
    Peer(String),
    Beacon(String),
}

/// New state proposed for one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceUpdate {
    pub device_id: String,
    pub location: GeoPoint,
    pub errors: f64,
    pub source: UpdateSource,
}

/// Corrects `a` using `b` (a peer or a beacon). Returns `None` when the
/// error guard does not fire.
///
/// Peer: `a` moves toward `b` by the fraction `a.errors / (a.errors +
/// b.errors)`, so the more divergent side moves more. If `a` had not moved
/// since the previous tick its error counter drops by one (floored at 0).
/// Beacon: `a` snaps to the beacon and its errors reset to 0.
pub fn drift_correction(a: &DeviceView, b: &DeviceView, lower_threshold: f64) -> Option<DeviceUpdate> {
    if a.kind != ParticipantKind::Mobile || !(a.errors > lower_threshold) {
        return None;
    }
    match b.kind {
        ParticipantKind::Mobile => {
            let sum = a.errors + b.errors;
            if sum == 0.0 {
                return None;
            }
            let ratio = a.errors / sum;
            let location = geo::intermediate_point(a.location, b.location, ratio);
            let errors = if a.is_stationary() {
                (a.errors - 1.0).max(0.0)
            } else {
                a.errors
            };
            Some(DeviceUpdate {
                device_id: a.id.clone(),
                location,
                errors,
                source: UpdateSource::Peer(b.id.clone()),
            })
        }
        ParticipantKind::Beacon => Some(DeviceUpdate {
            device_id: a.id.clone(),
            location: b.location,
            errors: 0.0,
            source: UpdateSource::Beacon(b.id.clone()),
        }),
    }
}

/// Growth policy of the per-device error counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "rate", rename_all = "snake_case")]
pub enum ErrorAccrual {
    PerStep(f64),
    PerSecond(f64),
}

impl Default for ErrorAccrual {
    fn default() -> Self {
        Self::PerStep(1.0)
    }
}

impl ErrorAccrual {
    pub fn accrue(&self, errors: f64, steps: u64, elapsed_ms: Millis) -> f64 {
        let delta = match *self {
            ErrorAccrual::PerStep(rate) => rate * steps as f64,
            ErrorAccrual::PerSecond(rate) => rate * elapsed_ms.max(0) as f64 / 1000.0,
        };
        (errors + delta).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{distance, initial_bearing, LocalFrame};
    use crate::ingest::RawMeasurementRecord;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn origin() -> GeoPoint {
        GeoPoint::new(46.52, 6.58).unwrap()
    }

    fn series(ts: Vec<Millis>, mag: Vec<f64>) -> FilteredSeries {
        let n = ts.len();
        FilteredSeries::new(ts, mag, vec![0.0; n]).unwrap()
    }

    #[test]
    fn magnitude_cases() {
        assert_eq!(magnitude(0.0, 0.0, 0.0), 0.0);
        assert_eq!(magnitude(3.0, 4.0, 0.0), 5.0);
        assert_eq!(magnitude(0.0, 0.0, 9.81), 9.81);
    }

    #[test]
    fn lowpass_dc_gain_is_one() {
        let x = vec![9.81; 500];
        let y = lowpass_filter(&x, 3.0, 50.0).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(y.iter().all(|v| (v - 9.81).abs() < 1e-9));
    }

    #[test]
    fn lowpass_rejects_cutoff_at_nyquist() {
        assert!(matches!(
            lowpass_filter(&[1.0, 2.0], 25.0, 50.0),
            Err(AlgorithmError::CutoffAboveNyquist { .. })
        ));
    }

    fn amplitude_after_filter(freq: f64) -> f64 {
        // 10 s at 50 Hz, amplitude measured away from the edges
        let fs = 50.0;
        let x: Vec<f64> = (0..500).map(|i| (TAU * freq * i as f64 / fs).sin()).collect();
        let y = lowpass_filter(&x, 3.0, fs).unwrap();
        y[100..400].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn lowpass_stopband_and_passband() {
        assert!(amplitude_after_filter(12.0) < 0.1);
        assert!(amplitude_after_filter(0.75) > 0.9);
        // monotone attenuation across the cutoff
        let (lo, mid, hi) = (
            amplitude_after_filter(1.5),
            amplitude_after_filter(3.0),
            amplitude_after_filter(6.0),
        );
        assert!(lo > mid && mid > hi, "{lo} {mid} {hi}");
    }

    #[test]
    fn flat_series_has_no_steps() {
        let s = series((0..50).map(|i| i * 20).collect(), vec![12.0; 50]);
        assert!(detect_steps(&s, 10.8, 300).is_empty());
    }

    #[test]
    fn single_pulse_is_one_step_at_apex() {
        let mag = vec![9.8, 10.5, 11.5, 12.5, 11.5, 10.5, 9.8];
        let s = series((0..7).map(|i| i * 20).collect(), mag);
        let steps = detect_steps(&s, 10.8, 300);
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].timestamp, 60);
    }

    /// Largest feasible subset of candidates (max count, then max height).
    fn best_subset_oracle(ts: &[Millis], heights: &[f64], min_gap: Millis) -> Vec<Millis> {
        let n = ts.len();
        let mut best: (usize, f64, Vec<Millis>) = (0, 0.0, vec![]);
        for mask in 0u32..(1 << n) {
            let chosen: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let ok = chosen.windows(2).all(|w| ts[w[1]] - ts[w[0]] >= min_gap);
            if !ok {
                continue;
            }
            let h: f64 = chosen.iter().map(|&i| heights[i]).sum();
            if chosen.len() > best.0 || (chosen.len() == best.0 && h > best.1) {
                best = (chosen.len(), h, chosen.iter().map(|&i| ts[i]).collect());
            }
        }
        best.2
    }

    #[test]
    fn close_pulses_keep_the_higher_one() {
        // apexes at 100 ms (12.0) and 300 ms (13.0), 200 ms apart
        let ts: Vec<Millis> = (0..10).map(|i| i * 50).collect();
        let mag = vec![9.8, 10.9, 12.0, 10.9, 11.5, 12.4, 13.0, 12.0, 10.0, 9.8];
        let s = series(ts.clone(), mag.clone());
        let got: Vec<Millis> = detect_steps(&s, 10.8, 300).iter().map(|e| e.timestamp).collect();
        let expected = best_subset_oracle(&[100, 300], &[12.0, 13.0], 300);
        assert_eq!(expected, vec![300]);
        assert_eq!(got, expected);
    }

    fn raw_with_gyro(gyro: &[(Millis, f64)]) -> RawLog {
        let mut log = RawLog::empty("d");
        for &(t, g) in gyro {
            let mut r = RawMeasurementRecord::at(t);
            r.gyro_z = g;
            log.records.push(r);
        }
        log
    }

    #[test]
    fn zero_gyro_keeps_initial_heading() {
        let log = raw_with_gyro(&(0..20).map(|i| (i * 20, 0.0)).collect::<Vec<_>>());
        let h = heading_series(&log, 1.2, HeadingMode::GyroIntegration);
        assert!(h.iter().all(|&v| v == 1.2));
    }

    #[test]
    fn constant_gyro_integrates_exactly() {
        let log = raw_with_gyro(&(0..=500).map(|i| (i * 20, 0.1)).collect::<Vec<_>>());
        let h = heading_series(&log, 0.5, HeadingMode::GyroIntegration);
        assert_relative_eq!(*h.last().unwrap(), 1.5, epsilon = 1e-9);
    }

    #[test]
    fn piecewise_gyro_matches_closed_form() {
        // 0.2 rad/s for samples [0, 2 s), -0.1 rad/s afterwards, 10 ms spacing
        let rate = |i: i64| if i < 200 { 0.2 } else { -0.1 };
        let log = raw_with_gyro(&(0..=400).map(|i| (i * 10, rate(i))).collect::<Vec<_>>());
        let h = heading_series(&log, 0.0, HeadingMode::GyroIntegration);
        // trapezoid over the switch interval averages the two rates
        let oracle = |i: i64| -> f64 {
            if i <= 199 {
                0.2 * i as f64 * 0.01
            } else {
                0.2 * 1.99 + 0.5 * (0.2 - 0.1) * 0.01 - 0.1 * (i - 200) as f64 * 0.01
            }
        };
        for i in [0, 50, 199, 200, 300, 400] {
            assert_relative_eq!(h[i as usize], geo::normalize_angle(oracle(i)), epsilon = 1e-9);
        }
    }

    #[test]
    fn azimuth_mode_unwraps_and_normalizes() {
        let mut log = RawLog::empty("d");
        for (i, az) in [350.0, 355.0, 2.0, -90.0].iter().enumerate() {
            let mut r = RawMeasurementRecord::at(i as i64 * 10);
            r.azimuth = *az;
            log.records.push(r);
        }
        let h = heading_series(&log, 0.0, HeadingMode::Azimuth);
        assert_relative_eq!(h[0], 350f64.to_radians(), epsilon = 1e-12);
        assert_relative_eq!(h[2], 2f64.to_radians(), epsilon = 1e-12);
        assert_relative_eq!(h[3], 270f64.to_radians(), epsilon = 1e-12);
    }

    #[test]
    fn pdr_step_due_north() {
        let q = pdr_step(origin(), 0.7, 0.0);
        assert!((distance(origin(), q) - 0.7).abs() < 1e-3);
        assert!(q.lat > origin().lat && (q.lon - origin().lon).abs() < 1e-12);
    }

    #[test]
    fn pdr_square_closes() {
        let mut here = origin();
        for k in 0..4 {
            here = pdr_step(here, 1.0, k as f64 * PI / 2.0);
        }
        assert!(distance(origin(), here) < 0.01);
    }

    #[test]
    fn pdr_diagonal_walk() {
        // closed form: 100 * 0.75 m along bearing π/4
        let steps: Vec<StepEvent> = (1..=100)
            .map(|k| StepEvent {
                timestamp: k * 500,
                heading_at_step: PI / 4.0,
            })
            .collect();
        let t = pdr_positioning("d", origin(), 0, &steps, 0.75).unwrap();
        assert_eq!(t.len(), 101);
        let end = t.last().location;
        assert!((distance(origin(), end) - 75.0).abs() < 0.05);
        assert!((initial_bearing(origin(), end).unwrap() - PI / 4.0).abs() < 1e-3);
    }

    #[test]
    fn pdr_matches_planar_fold() {
        let frame = LocalFrame::new(origin());
        let headings = [0.3, 0.3, 1.2, 2.0, 2.0, 3.5, 5.9];
        let steps: Vec<StepEvent> = headings
            .iter()
            .enumerate()
            .map(|(k, &h)| StepEvent {
                timestamp: 100 * (k as i64 + 1),
                heading_at_step: h,
            })
            .collect();
        let t = pdr_positioning("d", origin(), 0, &steps, 0.8).unwrap();
        // independent fold in the local east/north plane
        let (mut east, mut north) = (0.0, 0.0);
        for (k, &h) in headings.iter().enumerate() {
            north += 0.8 * f64::cos(h);
            east += 0.8 * f64::sin(h);
            let expected = frame.to_geo(east, north);
            assert!(distance(t.points()[k + 1].location, expected) < 1e-4);
        }
    }

    #[test]
    fn pdr_without_steps_is_single_point() {
        let t = pdr_positioning("d", origin(), 40, &[], 0.7).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.first().timestamp, 40);
    }

    #[test]
    fn path_loss_cases() {
        let m = PathLossModel::default();
        assert_relative_eq!(rssi_to_distance(-59.0, &m), 1.0);
        assert_relative_eq!(rssi_to_distance(-79.0, &m), 10.0, epsilon = 1e-12);
        assert_eq!(rssi_to_distance(-100.0, &m), f64::INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_relative_eq!(distance_to_rssi(1.0, &m, &mut rng).unwrap(), -59.0);
        assert_relative_eq!(distance_to_rssi(10.0, &m, &mut rng).unwrap(), -79.0);
        assert!(distance_to_rssi(0.0, &m, &mut rng).is_err());
    }

    #[test]
    fn noisy_rssi_is_seed_deterministic() {
        let m = PathLossModel::new(-59.0, 2.0, 4.0).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| distance_to_rssi(3.0, &m, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    fn mobile(id: &str, at: GeoPoint, errors: f64) -> DeviceView {
        DeviceView {
            id: id.into(),
            kind: ParticipantKind::Mobile,
            location: at,
            previous_location: None,
            errors,
        }
    }

    #[test]
    fn equal_errors_meet_in_the_middle() {
        let frame = LocalFrame::new(origin());
        let (pa, pb) = (origin(), frame.to_geo(3.0, 0.0));
        let a = mobile("a", pa, 10.0);
        let b = mobile("b", pb, 10.0);
        let ua = drift_correction(&a, &b, 5.0).unwrap();
        let ub = drift_correction(&b, &a, 5.0).unwrap();
        let mid = frame.to_geo(1.5, 0.0);
        for u in [&ua, &ub] {
            assert!((u.location.lat - mid.lat).abs() < 1e-9);
            assert!((u.location.lon - mid.lon).abs() < 1e-9);
        }
    }

    #[test]
    fn guard_blocks_low_error_devices() {
        let a = mobile("a", origin(), 0.0);
        let b = mobile("b", origin(), 10.0);
        assert!(drift_correction(&a, &b, 5.0).is_none());
        let a = mobile("a", origin(), 5.0);
        assert!(drift_correction(&a, &b, 5.0).is_none());
    }

    #[test]
    fn three_quarter_ratio() {
        let frame = LocalFrame::new(origin());
        let pb = frame.to_geo(0.0, 8.0);
        let u = drift_correction(&mobile("a", origin(), 30.0), &mobile("b", pb, 10.0), 5.0).unwrap();
        assert!((distance(origin(), u.location) - 6.0).abs() < 1e-3);
        assert_eq!(u.errors, 30.0);
        assert_eq!(u.source, UpdateSource::Peer("b".into()));
    }

    #[test]
    fn stationary_device_decrements_once() {
        let frame = LocalFrame::new(origin());
        let mut a = mobile("a", origin(), 0.5 + 5.0);
        a.previous_location = Some(frame.to_geo(0.004, 0.0));
        let u = drift_correction(&a, &mobile("b", frame.to_geo(2.0, 0.0), 1.0), 5.0).unwrap();
        assert_eq!(u.errors, 4.5);
        a.previous_location = Some(frame.to_geo(0.5, 0.0));
        let u = drift_correction(&a, &mobile("b", frame.to_geo(2.0, 0.0), 1.0), 5.0).unwrap();
        assert_eq!(u.errors, 5.5);
    }

    #[test]
    fn beacon_snaps_and_resets() {
        let beacon = Beacon {
            id: "b1".into(),
            slug: "b1".into(),
            location: LocalFrame::new(origin()).to_geo(1.0, 1.0),
            kind: crate::model::BeaconKind::Virtual,
            tx_power_dbm: -59.0,
            path_loss_exponent: 2.0,
        };
        let u = drift_correction(&mobile("a", origin(), 7.0), &DeviceView::beacon(&beacon), 5.0).unwrap();
        assert_eq!(u.location, beacon.location);
        assert_eq!(u.errors, 0.0);
        assert!(drift_correction(&mobile("a", origin(), 4.0), &DeviceView::beacon(&beacon), 5.0).is_none());
    }

    #[test]
    fn error_accrual_cases() {
        let acc = ErrorAccrual::default();
        assert_eq!(acc.accrue(0.0, 0, 0), 0.0);
        assert_eq!(acc.accrue(0.0, 10, 5_000), 10.0);
        // beacon reset followed by three steps
        assert_eq!(acc.accrue(0.0, 3, 1_500), 3.0);
        assert_eq!(ErrorAccrual::PerSecond(0.5).accrue(1.0, 0, 4_000), 3.0);
    }

    proptest! {
        #[test]
        fn rssi_round_trip(d in 0.05..200.0f64, tx in -80.0..-40.0f64, n in 1.5..4.0f64) {
            let m = PathLossModel::new(tx, n, 0.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let rssi = distance_to_rssi(d, &m, &mut rng).unwrap();
            prop_assume!(rssi > -100.0 && rssi < 0.0);
            let back = rssi_to_distance(rssi, &m);
            prop_assert!(((back - d) / d).abs() < 1e-9);
        }

        #[test]
        fn peer_correction_stays_on_segment(
            ea in 5.01..100.0f64, eb in 0.0..100.0f64,
            de in -4.0..4.0f64, dn in -4.0..4.0f64,
        ) {
            let frame = LocalFrame::new(origin());
            let pb = frame.to_geo(de, dn);
            let u = drift_correction(&mobile("a", origin(), ea), &mobile("b", pb, eb), 5.0).unwrap();
            let ratio = ea / (ea + eb);
            prop_assert!((u.location.lat - (origin().lat + ratio * (pb.lat - origin().lat))).abs() < 1e-9);
            prop_assert!((u.location.lon - (origin().lon + ratio * (pb.lon - origin().lon))).abs() < 1e-9);
            let (ue, un) = frame.to_local(u.location);
            let t = if de.abs() + dn.abs() > 0.0 { (ue * de + un * dn) / (de * de + dn * dn) } else { 0.0 };
            prop_assert!((-1e-6..=1.0 + 1e-6).contains(&t));
        }

        #[test]
        fn displacement_monotone_in_own_errors(e1 in 5.01..50.0f64, bump in 0.1..50.0f64, eb in 0.5..50.0f64) {
            let pb = LocalFrame::new(origin()).to_geo(3.0, 1.0);
            let b = mobile("b", pb, eb);
            let d1 = distance(origin(), drift_correction(&mobile("a", origin(), e1), &b, 5.0).unwrap().location);
            let d2 = distance(origin(), drift_correction(&mobile("a", origin(), e1 + bump), &b, 5.0).unwrap().location);
            prop_assert!(d2 > d1);
        }

        #[test]
        fn pdr_translation_covariant(de in -300.0..300.0f64, dn in -300.0..300.0f64,
                                     headings in proptest::collection::vec(0.0..TAU, 1..30)) {
            let frame = LocalFrame::new(origin());
            let shifted = frame.to_geo(de, dn);
            let steps: Vec<StepEvent> = headings.iter().enumerate()
                .map(|(k, &h)| StepEvent { timestamp: 100 * (k as i64 + 1), heading_at_step: h })
                .collect();
            let a = pdr_positioning("d", origin(), 0, &steps, 0.7).unwrap();
            let b = pdr_positioning("d", shifted, 0, &steps, 0.7).unwrap();
            for (p, q) in a.points().iter().zip(b.points()) {
                prop_assert!(((q.location.lat - p.location.lat) - (shifted.lat - origin().lat)).abs() < 1e-7);
                prop_assert!(((q.location.lon - p.location.lon) - (shifted.lon - origin().lon)).abs() < 1e-7);
            }
        }
    }
}
