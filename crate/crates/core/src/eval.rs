//! Trajectory similarity and positioning accuracy metrics.
//!
//! Two measures are reported per device: the discrete Fréchet distance
//! between groundtruth and subject trajectories, and the third quartile of
//! pointwise localization errors. Quantiles use linear interpolation between
//! order statistics (the "inclusive" method).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoPoint};
use crate::model::{DeviceResult, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("empty sample list")]
    EmptySamples,
    #[error("quantile {0} outside [0, 1]")]
    QuantileRange(f64),
    #[error("malformed cdf file at line {line}: {message}")]
    CdfFormat { line: usize, message: String },
}

/// Discrete Fréchet distance between two point sequences under an arbitrary
/// ground distance.
///
/// Dynamic programming over the coupling recurrence, `O(m·n)` time and
/// `O(min(m, n))` memory.
pub fn discrete_frechet_with<F>(p: &[GeoPoint], q: &[GeoPoint], dist: F) -> Result<f64, EvalError>
where
    F: Fn(GeoPoint, GeoPoint) -> f64,
{
    if p.is_empty() || q.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    // iterate rows over the longer sequence, keep one row of the shorter one
    let (outer, inner, swapped) = if p.len() >= q.len() { (p, q, false) } else { (q, p, true) };
    let d = |i: usize, j: usize| {
        if swapped {
            dist(inner[j], outer[i])
        } else {
            dist(outer[i], inner[j])
        }
    };
    let n = inner.len();
    let mut row = vec![0.0f64; n];
    for i in 0..outer.len() {
        let mut diag = 0.0; // row[j - 1] from the previous outer index
        for j in 0..n {
            let cost = d(i, j);
            let up = row[j];
            let value = match (i, j) {
                (0, 0) => cost,
                (0, _) => cost.max(row[j - 1]),
                (_, 0) => cost.max(up),
                _ => cost.max(up.min(row[j - 1]).min(diag)),
            };
            diag = up;
            row[j] = value;
        }
    }
    Ok(row[n - 1])
}

/// Discrete Fréchet distance with haversine ground distance, in meters.
pub fn discrete_frechet(p: &Trajectory, q: &Trajectory) -> Result<f64, EvalError> {
    let a: Vec<GeoPoint> = p.locations().collect();
    let b: Vec<GeoPoint> = q.locations().collect();
    discrete_frechet_with(&a, &b, geo::distance)
}

/// Position of a sampled trajectory at `t`, linearly interpolated between
/// neighbouring samples. Outside the sampled span the nearest endpoint is
/// returned and the flag is set.
pub fn position_at(reference: &Trajectory, t: i64) -> (GeoPoint, bool) {
    let pts = reference.points();
    if t <= pts[0].timestamp {
        return (pts[0].location, t < pts[0].timestamp);
    }
    let last = pts[pts.len() - 1];
    if t >= last.timestamp {
        return (last.location, t > last.timestamp);
    }
    let k = pts.partition_point(|p| p.timestamp <= t);
    let (a, b) = (pts[k - 1], pts[k]);
    if a.timestamp == t {
        return (a.location, false);
    }
    let ratio = (t - a.timestamp) as f64 / (b.timestamp - a.timestamp) as f64;
    (geo::intermediate_point(a.location, b.location, ratio), false)
}

/// Pointwise localization errors of `subject` against `reference`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationErrors {
    /// One error per subject point, in subject order.
    pub errors: Vec<f64>,
    /// Subject points outside the reference span (clamped).
    pub clamped: usize,
}

/// Distance from every subject point to the reference position at the same
/// timestamp.
pub fn localization_errors(reference: &Trajectory, subject: &Trajectory) -> LocalizationErrors {
    let mut clamped = 0;
    let errors = subject
        .points()
        .iter()
        .map(|p| {
            let (g, was_clamped) = position_at(reference, p.timestamp);
            if was_clamped {
                clamped += 1;
            }
            geo::distance(g, p.location)
        })
        .collect();
    if clamped > 0 {
        log::warn!(
            "{}: {clamped} {} point(s) outside the groundtruth span were clamped",
            subject.device_id(),
            subject.kind().as_str()
        );
    }
    LocalizationErrors { errors, clamped }
}

/// Quantile with linear interpolation between closest ranks.
pub fn quantile(samples: &[f64], q: f64) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(EvalError::QuantileRange(q));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Relative reduction from `before` to `after`; 0 when `before` is 0.
pub fn improvement(before: f64, after: f64) -> f64 {
    if before > 0.0 {
        (before - after) / before
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct MetricReport {
    pub device_id: String,
    pub dfd_estimated: f64,
    pub dfd_corrected: f64,
    pub q3_estimated: f64,
    pub q3_corrected: f64,
    pub mean_error_estimated: f64,
    pub mean_error_corrected: f64,
    /// `(q3_estimated - q3_corrected) / q3_estimated`.
    pub improvement: f64,
    /// Sorted ascending.
    pub error_samples_estimated: Vec<f64>,
    /// Sorted ascending.
    pub error_samples_corrected: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct AggregateReport {
    pub device_count: usize,
    pub mean_q3_estimated: f64,
    pub mean_q3_corrected: f64,
    pub improvement: f64,
    pub improved_devices: usize,
    pub mean_dfd_estimated: f64,
    pub mean_dfd_corrected: f64,
    pub mean_error_estimated: f64,
    pub mean_error_corrected: f64,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct MetricsDocument {
    pub devices: Vec<MetricReport>,
    pub aggregate: AggregateReport,
}

pub fn device_report(device: &DeviceResult) -> Result<MetricReport, EvalError> {
    let sorted_errors = |subject: &Trajectory| {
        let mut e = localization_errors(&device.groundtruth, subject).errors;
        e.sort_by(f64::total_cmp);
        e
    };
    let est = sorted_errors(&device.estimated);
    let corr = sorted_errors(&device.corrected);
    let q3_estimated = quantile_sorted(&est, 0.75);
    let q3_corrected = quantile_sorted(&corr, 0.75);
    Ok(MetricReport {
        device_id: device.device_id.clone(),
        dfd_estimated: discrete_frechet(&device.groundtruth, &device.estimated)?,
        dfd_corrected: discrete_frechet(&device.groundtruth, &device.corrected)?,
        q3_estimated,
        q3_corrected,
        mean_error_estimated: mean(&est),
        mean_error_corrected: mean(&corr),
        improvement: improvement(q3_estimated, q3_corrected),
        error_samples_estimated: est,
        error_samples_corrected: corr,
    })
}

pub fn aggregate(reports: &[MetricReport]) -> AggregateReport {
    let col = |f: fn(&MetricReport) -> f64| mean(&reports.iter().map(f).collect::<Vec<_>>());
    let pooled = |f: fn(&MetricReport) -> &Vec<f64>| {
        mean(&reports.iter().flat_map(|r| f(r).iter().copied()).collect::<Vec<_>>())
    };
    let mean_q3_estimated = col(|r| r.q3_estimated);
    let mean_q3_corrected = col(|r| r.q3_corrected);
    AggregateReport {
        device_count: reports.len(),
        mean_q3_estimated,
        mean_q3_corrected,
        improvement: improvement(mean_q3_estimated, mean_q3_corrected),
        improved_devices: reports.iter().filter(|r| r.q3_corrected < r.q3_estimated).count(),
        mean_dfd_estimated: col(|r| r.dfd_estimated),
        mean_dfd_corrected: col(|r| r.dfd_corrected),
        mean_error_estimated: pooled(|r| &r.error_samples_estimated),
        mean_error_corrected: pooled(|r| &r.error_samples_corrected),
    }
}

/// Per-device reports plus their aggregate.
pub fn build_report(devices: &[DeviceResult]) -> Result<MetricsDocument, EvalError> {
    let reports = devices.iter().map(device_report).collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsDocument {
        aggregate: aggregate(&reports),
        devices: reports,
    })
}

/// Empirical CDFs of estimated and corrected errors on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    pub q3_estimated: f64,
    pub q3_corrected: f64,
    /// `(error_m, cdf_estimated, cdf_corrected)`, ascending in error.
    pub rows: Vec<(f64, f64, f64)>,
}

fn ecdf(sorted: &[f64], x: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64
}

impl CdfTable {
    /// Pools the samples of every device. The grid starts at 0 so the
    /// first step of each curve is visible.
    pub fn from_reports(reports: &[MetricReport]) -> Result<Self, EvalError> {
        let mut est: Vec<f64> = reports.iter().flat_map(|r| r.error_samples_estimated.iter().copied()).collect();
        let mut corr: Vec<f64> = reports.iter().flat_map(|r| r.error_samples_corrected.iter().copied()).collect();
        Self::from_samples(&mut est, &mut corr)
    }

    pub fn from_samples(est: &mut [f64], corr: &mut [f64]) -> Result<Self, EvalError> {
        if est.is_empty() && corr.is_empty() {
            return Err(EvalError::EmptySamples);
        }
        est.sort_by(f64::total_cmp);
        corr.sort_by(f64::total_cmp);
        let mut grid: Vec<f64> = std::iter::once(0.0).chain(est.iter().copied()).chain(corr.iter().copied()).collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let rows = grid.into_iter().map(|x| (x, ecdf(est, x), ecdf(corr, x))).collect();
        let q3 = |s: &[f64]| if s.is_empty() { 0.0 } else { quantile_sorted(s, 0.75) };
        Ok(Self {
            q3_estimated: q3(est),
            q3_corrected: q3(corr),
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# q3_estimated,{}", self.q3_estimated).unwrap();
        writeln!(out, "# q3_corrected,{}", self.q3_corrected).unwrap();
        out.push_str("error_m,cdf_estimated,cdf_corrected\n");
        for (x, e, c) in &self.rows {
            writeln!(out, "{x},{e},{c}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut table = CdfTable {
            q3_estimated: f64::NAN,
            q3_corrected: f64::NAN,
            rows: Vec::new(),
        };
        let mut seen_header = false;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: &str| EvalError::CdfFormat {
                line: line_no,
                message: message.to_string(),
            };
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| err("not a number"));
            if let Some(meta) = line.strip_prefix("# ") {
                let (key, value) = meta.split_once(',').ok_or_else(|| err("bad metadata row"))?;
                match key {
                    "q3_estimated" => table.q3_estimated = num(value)?,
                    "q3_corrected" => table.q3_corrected = num(value)?,
                    _ => return Err(err("unknown metadata key")),
                }
            } else if !seen_header {
                if line.trim() != "error_m,cdf_estimated,cdf_corrected" {
                    return Err(err("unexpected header"));
                }
                seen_header = true;
            } else if !line.trim().is_empty() {
                let cells: Vec<&str> = line.split(',').collect();
                let [x, e, c] = cells.as_slice() else {
                    return Err(err("expected 3 columns"));
                };
                table.rows.push((num(x)?, num(e)?, num(c)?));
            }
        }
        if !seen_header {
            return Err(EvalError::CdfFormat {
                line: 0,
                message: "missing header".into(),
            });
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{destination_point, EarthModel, LocalFrame};
    use crate::model::{TrajectoryKind, TrajectoryPoint};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn origin() -> GeoPoint {
        GeoPoint::new(46.52, 6.58).unwrap()
    }

    fn traj(kind: TrajectoryKind, pts: &[(f64, f64)]) -> Trajectory {
        let frame = LocalFrame::new(origin());
        let points = pts
            .iter()
            .enumerate()
            .map(|(i, &(e, n))| TrajectoryPoint::new(frame.to_geo(e, n), i as i64 * 1000))
            .collect();
        Trajectory::new(kind, "d", points).unwrap()
    }

    /// Direct transcription of the recursive definition; exponential time.
    fn naive_dfd(p: &[GeoPoint], q: &[GeoPoint], i: usize, j: usize) -> f64 {
        let d = geo::distance(p[i], q[j]);
        if i == 0 && j == 0 {
            return d;
        }
        let mut best = f64::INFINITY;
        if i > 0 {
            best = best.min(naive_dfd(p, q, i - 1, j));
        }
        if j > 0 {
            best = best.min(naive_dfd(p, q, i, j - 1));
        }
        if i > 0 && j > 0 {
            best = best.min(naive_dfd(p, q, i - 1, j - 1));
        }
        d.max(best)
    }

    #[test]
    fn dfd_identical_is_zero() {
        let t = traj(TrajectoryKind::Estimated, &[(0.0, 0.0), (3.0, 1.0), (5.0, 5.0)]);
        assert_eq!(discrete_frechet(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn dfd_single_points_is_ground_distance() {
        let p = traj(TrajectoryKind::Groundtruth, &[(0.0, 0.0)]);
        let q = traj(TrajectoryKind::Estimated, &[(3.0, 4.0)]);
        let d = discrete_frechet(&p, &q).unwrap();
        assert_eq!(d, geo::distance(p.first().location, q.first().location));
        assert!((d - 5.0).abs() < 1e-3);
    }

    #[test]
    fn dfd_empty_errors() {
        assert_eq!(discrete_frechet_with(&[], &[origin()], geo::distance), Err(EvalError::EmptyTrajectory));
    }

    #[test]
    fn dfd_matches_naive_on_random_6x7() {
        let frame = LocalFrame::new(origin());
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let mut pts = |n: usize| -> Vec<GeoPoint> {
                (0..n).map(|_| frame.to_geo(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect()
            };
            let (p, q) = (pts(6), pts(7));
            let dp = discrete_frechet_with(&p, &q, geo::distance).unwrap();
            assert_eq!(dp, naive_dfd(&p, &q, 5, 6));
        }
    }

    #[test]
    fn quantile_cases() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.75).unwrap(), 4.0);
        let xs = [7.0, -2.0, 3.5, 10.0];
        assert_eq!(quantile(&xs, 0.0).unwrap(), -2.0);
        assert_eq!(quantile(&xs, 1.0).unwrap(), 10.0);
        let outlier = [1.0, 1.0, 1.0, 1000.0];
        assert_eq!(quantile(&outlier, 0.75).unwrap(), 1.0 + 0.25 * 999.0);
        assert!(quantile(&outlier, 0.75).unwrap() < 1000.0);
        assert_eq!(quantile(&[], 0.5), Err(EvalError::EmptySamples));
        assert_eq!(quantile(&[1.0], 1.5), Err(EvalError::QuantileRange(1.5)));
    }

    #[test]
    fn errors_against_sampled_groundtruth() {
        let g = traj(TrajectoryKind::Groundtruth, &[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0)]);
        let same = g.clone().with_kind(TrajectoryKind::Estimated);
        assert!(localization_errors(&g, &same).errors.iter().all(|&e| e == 0.0));

        let shifted: Vec<TrajectoryPoint> = g
            .points()
            .iter()
            .map(|p| {
                let q = destination_point(p.location, std::f64::consts::FRAC_PI_2, 5.0, EarthModel::default());
                TrajectoryPoint::new(q, p.timestamp)
            })
            .collect();
        let shifted = Trajectory::new(TrajectoryKind::Estimated, "d", shifted).unwrap();
        let errs = localization_errors(&g, &shifted);
        assert!(errs.errors.iter().all(|e| (e - 5.0).abs() < 0.01), "{:?}", errs.errors);
    }

    #[test]
    fn errors_interpolate_in_time_and_clamp() {
        let g = traj(TrajectoryKind::Groundtruth, &[(0.0, 0.0), (10.0, 0.0)]);
        let frame = LocalFrame::new(origin());
        let s = Trajectory::new(
            TrajectoryKind::Estimated,
            "d",
            vec![
                TrajectoryPoint::new(frame.to_geo(5.0, 0.0), 500),
                TrajectoryPoint::new(frame.to_geo(10.0, 0.0), 3000),
            ],
        )
        .unwrap();
        let e = localization_errors(&g, &s);
        assert!(e.errors[0] < 1e-6);
        assert_eq!(e.clamped, 1);
    }

    #[test]
    fn report_for_identical_corrected_has_zero_improvement() {
        let g = traj(TrajectoryKind::Groundtruth, &[(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)]);
        let est = traj(TrajectoryKind::Estimated, &[(0.0, 0.0), (10.0, 2.0), (20.0, 5.0)]);
        let dev = DeviceResult {
            device_id: "d".into(),
            groundtruth: g,
            corrected: est.clone().with_kind(TrajectoryKind::Corrected),
            estimated: est,
            collaboration_count: 0,
            beacon_correction_count: 0,
            params: Default::default(),
        };
        let doc = build_report(&[dev]).unwrap();
        assert_eq!(doc.devices[0].improvement, 0.0);
        assert_eq!(doc.aggregate.improvement, 0.0);
        assert_eq!(doc.aggregate.improved_devices, 0);
        assert!(doc.devices[0].dfd_estimated >= 5.0 - 1e-3);
    }

    #[test]
    fn cdf_single_sample_is_a_step() {
        let t = CdfTable::from_samples(&mut [2.5], &mut [2.5]).unwrap();
        assert_eq!(t.rows, vec![(0.0, 0.0, 0.0), (2.5, 1.0, 1.0)]);
    }

    #[test]
    fn cdf_of_uniform_errors_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut est: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut corr = est.clone();
        let t = CdfTable::from_samples(&mut est, &mut corr).unwrap();
        let ks = t.rows.iter().map(|(x, e, _)| (e - x / 10.0).abs()).fold(0.0, f64::max);
        assert!(ks < 0.05, "Kolmogorov distance {ks}");
    }

    #[test]
    fn cdf_round_trip() {
        let mut est = vec![0.3, 1.7, 2.2, 9.81];
        let mut corr = vec![0.1, 0.4, 1.0 / 3.0];
        let t = CdfTable::from_samples(&mut est, &mut corr).unwrap();
        assert_eq!(CdfTable::parse(&t.to_csv()).unwrap(), t);
    }

    fn arb_points(max: usize) -> impl Strategy<Value = Vec<GeoPoint>> {
        proptest::collection::vec((0.0..100.0f64, 0.0..100.0f64), 1..max)
            .prop_map(|v| v.into_iter().map(|(e, n)| LocalFrame::new(origin()).to_geo(e, n)).collect())
    }

    proptest! {
        #[test]
        fn dfd_symmetric_and_bounded(p in arb_points(8), q in arb_points(8)) {
            let a = discrete_frechet_with(&p, &q, geo::distance).unwrap();
            let b = discrete_frechet_with(&q, &p, geo::distance).unwrap();
            prop_assert_eq!(a, b);
            let ends = geo::distance(p[0], q[0]).max(geo::distance(p[p.len() - 1], q[q.len() - 1]));
            prop_assert!(a >= ends);
        }

        #[test]
        fn quantile_permutation_invariant(mut xs in proptest::collection::vec(-1e3..1e3f64, 1..40), seed in any::<u64>()) {
            let q = quantile(&xs, 0.75).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..xs.len()).rev() {
                xs.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(quantile(&xs, 0.75).unwrap(), q);
        }
    }
}
