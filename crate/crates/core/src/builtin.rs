//! Plugin wrappers around the built-in algorithms.

use std::sync::Arc;

use crate::algorithms::{
    self, detect_steps, drift_correction, DeviceUpdate, DeviceView, FilteredSeries, HeadingMode,
    DEFAULT_CUTOFF_HZ, DEFAULT_MIN_PEAK_HEIGHT, DEFAULT_MIN_STEP_INTERVAL_MS,
};
use crate::ingest::RawLog;
use crate::model::{DeviceParams, Millis, Trajectory};
use crate::plugins::{
    CollaborativePlugin, FilterPlugin, ParamMap, Params, Plugin, PluginCategory, PluginError,
    PluginHandle, PositioningInput, PositioningPlugin, Registry, COLLABORATION_PARAM_KEYS,
};

pub fn register_builtins(registry: &mut Registry) -> Result<(), PluginError> {
    registry.register(PluginHandle::Filtering(Arc::new(LowPassFilter)))?;
    registry.register(PluginHandle::Positioning(Arc::new(Pdr)))?;
    registry.register(PluginHandle::Collaborative(Arc::new(DriftCorrection)))?;
    Ok(())
}

fn heading_mode(p: &Params<'_>) -> Result<HeadingMode, PluginError> {
    match p.opt_str("heading_mode")? {
        None => Ok(HeadingMode::default()),
        Some(s) => HeadingMode::parse(s)
            .ok_or_else(|| p.invalid("heading_mode", "must be \"gyro\" or \"azimuth\"")),
    }
}

fn initial_heading(p: &Params<'_>, device: &DeviceParams) -> Result<f64, PluginError> {
    p.f64_or("initial_heading_rad", device.initial_heading)
}

/// Zero-phase Butterworth smoothing of the acceleration magnitude.
#[derive(Debug, Default, Clone, Copy)]
pub struct LowPassFilter;

impl LowPassFilter {
    const SLUG: &'static str = "lowpass";
    const PARAMS: [&'static str; 3] = ["cutoff_hz", "heading_mode", "initial_heading_rad"];
}

impl Plugin for LowPassFilter {
    fn get_plugin_name(&self) -> String {
        "Zero-phase Butterworth low-pass filter".into()
    }
    fn get_plugin_slug(&self) -> String {
        Self::SLUG.into()
    }
    fn get_plugin_display_name(&self) -> String {
        "Low-pass filter".into()
    }
    fn get_plugin_category(&self) -> PluginCategory {
        PluginCategory::Filtering
    }

    fn validate_params(&self, params: &ParamMap) -> Result<(), PluginError> {
        let p = Params::new(Self::SLUG, params);
        p.only(&Self::PARAMS)?;
        p.positive("cutoff_hz", p.f64_or("cutoff_hz", DEFAULT_CUTOFF_HZ)?)?;
        heading_mode(&p)?;
        p.opt_f64("initial_heading_rad")?;
        Ok(())
    }
}

impl FilterPlugin for LowPassFilter {
    fn get_filtered_data(
        &self,
        raw: &RawLog,
        device: &DeviceParams,
        params: &ParamMap,
    ) -> Result<FilteredSeries, PluginError> {
        let p = Params::new(Self::SLUG, params);
        let cutoff = p.f64_or("cutoff_hz", DEFAULT_CUTOFF_HZ)?;
        let series = FilteredSeries::from_raw(raw, initial_heading(&p, device)?, heading_mode(&p)?)?;
        let Some(rate) = series.sample_rate_hz() else {
            return Ok(series);
        };
        let smoothed = algorithms::lowpass_filter(series.magnitude(), cutoff, rate)?;
        Ok(series.with_magnitude(smoothed)?)
    }
}

/// Step-triggered pedestrian dead reckoning.
#[derive(Debug, Default, Clone, Copy)]
pub struct Pdr;

impl Pdr {
    const SLUG: &'static str = "pdr";
    const PARAMS: [&'static str; 5] = [
        "min_peak_height",
        "min_step_interval_ms",
        "step_length_m",
        "initial_heading_rad",
        "heading_mode",
    ];
}

impl Plugin for Pdr {
    fn get_plugin_name(&self) -> String {
        "Pedestrian dead reckoning".into()
    }
    fn get_plugin_slug(&self) -> String {
        Self::SLUG.into()
    }
    fn get_plugin_display_name(&self) -> String {
        "PDR".into()
    }
    fn get_plugin_category(&self) -> PluginCategory {
        PluginCategory::Positioning
    }

    fn validate_params(&self, params: &ParamMap) -> Result<(), PluginError> {
        let p = Params::new(Self::SLUG, params);
        p.only(&Self::PARAMS)?;
        p.opt_f64("min_peak_height")?;
        p.opt_u64("min_step_interval_ms")?;
        if let Some(l) = p.opt_f64("step_length_m")? {
            p.positive("step_length_m", l)?;
        }
        p.opt_f64("initial_heading_rad")?;
        heading_mode(&p)?;
        Ok(())
    }
}

impl PositioningPlugin for Pdr {
    fn get_positioning_data(
        &self,
        input: &PositioningInput<'_>,
        params: &ParamMap,
    ) -> Result<Trajectory, PluginError> {
        let p = Params::new(Self::SLUG, params);
        let owned;
        let series = match input.filtered {
            Some(f) => f,
            None => {
                owned = FilteredSeries::from_raw(
                    input.raw,
                    initial_heading(&p, input.device)?,
                    heading_mode(&p)?,
                )?;
                &owned
            }
        };
        if series.is_empty() {
            return Err(algorithms::AlgorithmError::Empty.into());
        }
        let min_height = p.f64_or("min_peak_height", DEFAULT_MIN_PEAK_HEIGHT)?;
        let min_interval = p
            .opt_u64("min_step_interval_ms")?
            .map(|v| v as Millis)
            .unwrap_or(DEFAULT_MIN_STEP_INTERVAL_MS);
        let step_length = p.f64_or("step_length_m", input.device.step_length)?;
        let steps = detect_steps(series, min_height, min_interval);
        Ok(algorithms::pdr_positioning(
            input.device_id,
            input.initial,
            series.timestamps()[0],
            &steps,
            step_length,
        )?)
    }
}

/// Error-ratio drift correction against peers and beacons.
#[derive(Debug, Default, Clone, Copy)]
pub struct DriftCorrection;

impl DriftCorrection {
    const SLUG: &'static str = "drift-correction";
}

impl Plugin for DriftCorrection {
    fn get_plugin_name(&self) -> String {
        "Drift correction with a mobile device or a beacon".into()
    }
    fn get_plugin_slug(&self) -> String {
        Self::SLUG.into()
    }
    fn get_plugin_display_name(&self) -> String {
        "Drift correction".into()
    }
    fn get_plugin_category(&self) -> PluginCategory {
        PluginCategory::Collaborative
    }

    fn validate_params(&self, params: &ParamMap) -> Result<(), PluginError> {
        Params::new(Self::SLUG, params).only(&COLLABORATION_PARAM_KEYS)?;
        self.settings(params).map(|_| ())
    }
}

impl CollaborativePlugin for DriftCorrection {
    fn handle_matches(
        &self,
        devices: &[DeviceView],
        _timestamp: Millis,
        lower_threshold: f64,
        _secondary_threshold: f64,
        _params: &ParamMap,
    ) -> Vec<DeviceUpdate> {
        let Some((a, others)) = devices.split_first() else {
            return Vec::new();
        };
        others
            .iter()
            .filter_map(|b| drift_correction(a, b, lower_threshold))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::ParticipantKind;
    use crate::geo::{GeoPoint, LocalFrame};
    use crate::ingest::RawMeasurementRecord;
    use crate::model::{Beacon, BeaconKind};

    fn raw_log(acc_z: &[f64], dt: Millis) -> RawLog {
        let mut log = RawLog::empty("d");
        for (i, &z) in acc_z.iter().enumerate() {
            let mut r = RawMeasurementRecord::at(i as Millis * dt);
            r.acc_z = z;
            log.records.push(r);
        }
        log
    }

    #[test]
    fn filter_constant_passthrough_and_length() {
        let log = raw_log(&[9.81; 200], 20);
        let out = LowPassFilter
            .get_filtered_data(&log, &DeviceParams::default(), &ParamMap::new())
            .unwrap();
        assert_eq!(out.len(), log.len());
        assert!(out.magnitude().iter().all(|m| (m - 9.81).abs() < 1e-9));
    }

    #[test]
    fn filter_empty_log_errors() {
        let r = LowPassFilter.get_filtered_data(&RawLog::empty("d"), &DeviceParams::default(), &ParamMap::new());
        assert!(r.is_err());
    }

    #[test]
    fn filter_rejects_cutoff_above_nyquist() {
        let log = raw_log(&[9.81; 20], 100);
        let mut params = ParamMap::new();
        params.insert("cutoff_hz".into(), 6.0.into());
        let r = LowPassFilter.get_filtered_data(&log, &DeviceParams::default(), &params);
        assert!(matches!(
            r,
            Err(PluginError::Algorithm(algorithms::AlgorithmError::CutoffAboveNyquist { .. }))
        ));
    }

    fn pulses(n_steps: usize) -> Vec<f64> {
        // 50 Hz, one triangular pulse every 500 ms
        let mut z = vec![9.81; 25 * (n_steps + 1)];
        for k in 1..=n_steps {
            let c = 25 * k;
            for (off, h) in [(-2i64, 0.8), (-1, 1.6), (0, 2.4), (1, 1.6), (2, 0.8)] {
                z[(c as i64 + off) as usize] += h;
            }
        }
        z
    }

    #[test]
    fn pdr_positions_from_raw() {
        let origin = GeoPoint::new(46.52, 6.58).unwrap();
        let log = raw_log(&pulses(6), 20);
        let device = DeviceParams {
            step_length: 0.5,
            initial_heading: std::f64::consts::FRAC_PI_2,
            ..Default::default()
        };
        let input = PositioningInput {
            device_id: "d",
            initial: origin,
            groundtruth: &[],
            raw: &log,
            filtered: None,
            device: &device,
        };
        let t = Pdr.get_positioning_data(&input, &ParamMap::new()).unwrap();
        assert_eq!(t.len(), 7);
        assert_eq!(t.first().location, origin);
        assert_eq!(t.first().timestamp, 0);
        let (e, n) = LocalFrame::new(origin).to_local(t.last().location);
        assert!((e - 3.0).abs() < 0.01 && n.abs() < 0.01, "{e} {n}");
    }

    #[test]
    fn pdr_without_steps() {
        let origin = GeoPoint::new(46.52, 6.58).unwrap();
        let log = raw_log(&[9.81; 100], 20);
        let device = DeviceParams::default();
        let input = PositioningInput {
            device_id: "d",
            initial: origin,
            groundtruth: &[],
            raw: &log,
            filtered: None,
            device: &device,
        };
        let t = Pdr.get_positioning_data(&input, &ParamMap::new()).unwrap();
        assert_eq!(t.len(), 1);
    }

    fn view(id: &str, kind: ParticipantKind, at: GeoPoint, errors: f64) -> DeviceView {
        DeviceView {
            id: id.into(),
            kind,
            location: at,
            previous_location: None,
            errors,
        }
    }

    #[test]
    fn handle_matches_cases() {
        let origin = GeoPoint::new(46.52, 6.58).unwrap();
        let near = LocalFrame::new(origin).to_geo(1.0, 0.0);
        let lone = [view("a", ParticipantKind::Mobile, origin, 50.0)];
        assert!(DriftCorrection.handle_matches(&lone, 0, 5.0, 0.0, &ParamMap::new()).is_empty());

        let calm = [
            view("a", ParticipantKind::Mobile, origin, 3.0),
            view("b", ParticipantKind::Mobile, near, 4.0),
        ];
        assert!(DriftCorrection.handle_matches(&calm, 0, 5.0, 0.0, &ParamMap::new()).is_empty());

        let beacon = Beacon {
            id: "b1".into(),
            slug: "b1".into(),
            location: near,
            kind: BeaconKind::Virtual,
            tx_power_dbm: -59.0,
            path_loss_exponent: 2.0,
        };
        let encounter = [view("a", ParticipantKind::Mobile, origin, 8.0), DeviceView::beacon(&beacon)];
        let updates = DriftCorrection.handle_matches(&encounter, 0, 5.0, 0.0, &ParamMap::new());
        assert_eq!(updates.len(), 1);
        assert_eq!(updates[0].location, near);
        assert_eq!(updates[0].errors, 0.0);
    }
}
