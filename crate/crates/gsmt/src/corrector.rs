//! The spatiotemporal task corrector: cluster historical speeds into three
//! motion modes, classify each bus's current state, and blend the raw model
//! forecast with a kinematic extrapolation along the velocity-aligned
//! heading.
//!
//! Correction happens in denormalized (degree) space, where headings and
//! speeds are physical. With all blend weights at zero the corrector is a
//! no-op, so the pipeline degrades gracefully to the raw model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LocalFrame;

#[derive(Debug, Error)]
pub enum CorrectorError {
    #[error("fit_modes: need >= 3 distinct speed values, got {0}")]
    DegenerateData(usize),
    #[error("correct: {0}")]
    Shape(String),
}

/// Motion mode by speed band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    Low,
    Medium,
    High,
}

impl MotionMode {
    pub const ALL: [MotionMode; 3] = [MotionMode::Low, MotionMode::Medium, MotionMode::High];

    pub fn index(self) -> usize {
        match self {
            MotionMode::Low => 0,
            MotionMode::Medium => 1,
            MotionMode::High => 2,
        }
    }
}

/// Per-mode blend weight toward the kinematic extrapolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendWeights {
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

impl Default for BlendWeights {
    fn default() -> Self {
        BlendWeights {
            low: 0.1,
            medium: 0.2,
            high: 0.3,
        }
    }
}

impl BlendWeights {
    pub fn get(&self, mode: MotionMode) -> f64 {
        match mode {
            MotionMode::Low => self.low,
            MotionMode::Medium => self.medium,
            MotionMode::High => self.high,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, b) in [("low", self.low), ("medium", self.medium), ("high", self.high)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(format!("corrector.beta_{name} must be in [0, 1], got {b}"));
            }
        }
        Ok(())
    }
}

/// Three speed centroids (km/h, ascending) plus the blend weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionModeModel {
    pub centroids: [f64; 3],
    pub betas: BlendWeights,
}

/// 1-D k-means with k=3, centroids seeded at the 10th/50th/90th percentiles
/// of the speed distribution and iterated to assignment convergence.
/// Deterministic: no randomness anywhere, so input order cannot matter.
pub fn fit_modes(speeds_kmh: &[f64], betas: BlendWeights) -> Result<MotionModeModel, CorrectorError> {
    let mut sorted: Vec<f64> = speeds_kmh
        .iter()
        .copied()
        .filter(|v| v.is_finite() && *v >= 0.0)
        .collect();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(CorrectorError::DegenerateData(distinct.len()));
    }

    let percentile = |p: f64| -> f64 {
        let idx = p * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let w = idx - lo as f64;
        sorted[lo] + w * (sorted[hi] - sorted[lo])
    };
    let mut centroids = [percentile(0.10), percentile(0.50), percentile(0.90)];

    let mut assign = vec![0usize; sorted.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (v, a) in sorted.iter().zip(&mut assign) {
            let nearest = nearest_centroid(*v, &centroids);
            if nearest != *a {
                *a = nearest;
                changed = true;
            }
        }
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for (v, a) in sorted.iter().zip(&assign) {
            sums[*a] += v;
            counts[*a] += 1;
        }
        for k in 0..3 {
            if counts[k] > 0 {
                centroids[k] = sums[k] / counts[k] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    centroids.sort_unstable_by(f64::total_cmp);
    Ok(MotionModeModel { centroids, betas })
}

fn nearest_centroid(v: f64, centroids: &[f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = (v - centroids[0]).abs();
    for (k, c) in centroids.iter().enumerate().skip(1) {
        let d = (v - c).abs();
        // Strict inequality breaks ties toward the lower mode.
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Nearest centroid by absolute difference; ties go to the lower mode.
pub fn classify(speed_kmh: f64, model: &MotionModeModel) -> MotionMode {
    MotionMode::ALL[nearest_centroid(speed_kmh.max(0.0), &model.centroids)]
}

/// A bus's kinematic situation at the end of the input window.
#[derive(Debug, Clone, Copy)]
pub struct KinematicState {
    /// Most recent observed position.
    pub position: (f64, f64),
    /// Position one model step earlier, for the heading.
    pub previous: (f64, f64),
    /// Mean speed over the recent input steps, km/h.
    pub recent_speed_kmh: f64,
}

impl KinematicState {
    /// Unit heading in the local east/north plane, or `None` when the last
    /// two fixes coincide.
    pub fn heading(&self) -> Option<(f64, f64)> {
        let frame = LocalFrame::new(self.previous.0, self.previous.1);
        let (dx, dy) = frame.to_local(self.position.0, self.position.1);
        let norm = (dx * dx + dy * dy).sqrt();
        if norm > 0.0 {
            Some((dx / norm, dy / norm))
        } else {
            None
        }
    }
}

/// Advances the last position along the heading at the classified mode's
/// centroid speed, one step per output frame. A degenerate heading holds
/// the last position.
pub fn kinematic_extrapolate(
    state: &KinematicState,
    mode: MotionMode,
    model: &MotionModeModel,
    steps: usize,
    step_duration_s: f64,
) -> Vec<(f64, f64)> {
    let Some((hx, hy)) = state.heading() else {
        return vec![state.position; steps];
    };
    let speed_ms = model.centroids[mode.index()].max(0.0) / 3.6;
    let frame = LocalFrame::new(state.position.0, state.position.1);
    (1..=steps)
        .map(|k| {
            let dist = speed_ms * step_duration_s * k as f64;
            frame.to_geo(hx * dist, hy * dist)
        })
        .collect()
}

/// Convex blend per step: `(1 - beta) * raw + beta * extrapolated`. A zero
/// beta returns the raw frames untouched (bit-identical).
pub fn correct(
    raw: &[(f64, f64)],
    extrapolated: &[(f64, f64)],
    mode: MotionMode,
    model: &MotionModeModel,
) -> Result<Vec<(f64, f64)>, CorrectorError> {
    if raw.len() != extrapolated.len() {
        return Err(CorrectorError::Shape(format!(
            "raw has {} frames, extrapolation has {}",
            raw.len(),
            extrapolated.len()
        )));
    }
    let beta = model.betas.get(mode);
    if beta == 0.0 {
        return Ok(raw.to_vec());
    }
    Ok(raw
        .iter()
        .zip(extrapolated)
        .map(|(r, e)| {
            (
                (1.0 - beta) * r.0 + beta * e.0,
                (1.0 - beta) * r.1 + beta * e.1,
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_with(centroids: [f64; 3]) -> MotionModeModel {
        MotionModeModel {
            centroids,
            betas: BlendWeights::default(),
        }
    }

    #[test]
    fn six_point_clusters_match_exhaustive_oracle() {
        // {1, 1.1, 20, 20.1, 50, 50.2}: the best 3-cluster assignment is
        // the three obvious pairs (verified by enumerating all splits).
        let speeds = [1.0, 1.1, 20.0, 20.1, 50.0, 50.2];
        let m = fit_modes(&speeds, BlendWeights::default()).unwrap();
        assert!((m.centroids[0] - 1.05).abs() < 1e-9);
        assert!((m.centroids[1] - 20.05).abs() < 1e-9);
        assert!((m.centroids[2] - 50.1).abs() < 1e-9);

        // Oracle: exhaustive contiguous 3-partitions of the sorted list.
        let mut best = (f64::INFINITY, [0.0; 3]);
        let sorted = speeds;
        for a in 1..5 {
            for b in a + 1..6 {
                let parts: [&[f64]; 3] = [&sorted[..a], &sorted[a..b], &sorted[b..]];
                let centroids: Vec<f64> = parts
                    .iter()
                    .map(|p| p.iter().sum::<f64>() / p.len() as f64)
                    .collect();
                let cost: f64 = parts
                    .iter()
                    .zip(&centroids)
                    .map(|(p, c)| p.iter().map(|v| (v - c) * (v - c)).sum::<f64>())
                    .sum();
                if cost < best.0 {
                    best = (cost, [centroids[0], centroids[1], centroids[2]]);
                }
            }
        }
        for (got, expect) in m.centroids.iter().zip(&best.1) {
            assert!((got - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn converged_centroids_are_fixed_points() {
        let speeds: Vec<f64> = (0..60)
            .map(|i| match i % 3 {
                0 => 5.0 + (i as f64 * 0.01),
                1 => 25.0 + (i as f64 * 0.01),
                _ => 45.0 + (i as f64 * 0.01),
            })
            .collect();
        let m = fit_modes(&speeds, BlendWeights::default()).unwrap();
        // One more assign+update round must not move the centroids.
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for v in &speeds {
            let k = nearest_centroid(*v, &m.centroids);
            sums[k] += v;
            counts[k] += 1;
        }
        for k in 0..3 {
            let next = sums[k] / counts[k] as f64;
            assert!((next - m.centroids[k]).abs() < 1e-9, "centroid {k} moved");
        }
    }

    #[test]
    fn input_order_does_not_matter() {
        let a: Vec<f64> = (0..40).map(|i| (i as f64 * 7.3) % 55.0).collect();
        let mut b = a.clone();
        b.reverse();
        b.swap(3, 17);
        let ma = fit_modes(&a, BlendWeights::default()).unwrap();
        let mb = fit_modes(&b, BlendWeights::default()).unwrap();
        assert_eq!(ma.centroids, mb.centroids);
    }

    #[test]
    fn too_few_distinct_values_rejected() {
        let err = fit_modes(&[5.0, 5.0, 9.0, 9.0], BlendWeights::default()).unwrap_err();
        assert!(matches!(err, CorrectorError::DegenerateData(2)));
    }

    #[test]
    fn classify_exact_centroid_and_tie_break() {
        let m = model_with([10.0, 30.0, 50.0]);
        assert_eq!(classify(10.0, &m), MotionMode::Low);
        // Exact midpoint of low and medium goes low.
        assert_eq!(classify(20.0, &m), MotionMode::Low);
        assert_eq!(classify(20.000001, &m), MotionMode::Medium);
        assert_eq!(classify(40.0, &m), MotionMode::Medium); // midpoint again
        assert_eq!(classify(49.0, &m), MotionMode::High);
    }

    #[test]
    fn classify_matches_argmin_oracle_and_is_monotone() {
        let m = model_with([8.0, 22.0, 47.0]);
        let mut last = MotionMode::Low;
        for i in 0..600 {
            let v = i as f64 * 0.1;
            let got = classify(v, &m);
            let mut best = 0;
            for k in 1..3 {
                // Mirror of the documented tie rule: strictly closer wins.
                if (v - m.centroids[k]).abs() < (v - m.centroids[best]).abs() {
                    best = k;
                }
            }
            assert_eq!(got.index(), best, "speed {v}");
            assert!(got >= last, "monotonicity broke at {v}");
            last = got;
        }
    }

    #[test]
    fn northbound_extrapolation_matches_conversion_oracle() {
        // Heading due north at 36 km/h for 300 s steps: 3000 m per step,
        // which is 3000 / R in radians of latitude (~0.02697 degrees).
        let m = model_with([36.0, 60.0, 80.0]);
        let state = KinematicState {
            position: (3.15, 101.69),
            previous: (3.14, 101.69),
            recent_speed_kmh: 36.0,
        };
        let path = kinematic_extrapolate(&state, MotionMode::Low, &m, 3, 300.0);
        let step_deg = (3000.0 / crate::geo::EARTH_RADIUS_M).to_degrees();
        assert!((step_deg - 0.02697).abs() < 1e-5);
        for (k, (lat, lon)) in path.iter().enumerate() {
            let expect = 3.15 + step_deg * (k + 1) as f64;
            assert!((lat - expect).abs() < 1e-9, "step {k}: {lat} vs {expect}");
            assert!((lon - 101.69).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_speed_centroid_holds_position() {
        let m = model_with([0.0, 20.0, 40.0]);
        let state = KinematicState {
            position: (3.15, 101.69),
            previous: (3.14, 101.69),
            recent_speed_kmh: 0.0,
        };
        let path = kinematic_extrapolate(&state, MotionMode::Low, &m, 4, 300.0);
        assert!(path.iter().all(|&p| p == (3.15, 101.69)));
    }

    #[test]
    fn degenerate_heading_holds_position() {
        let m = model_with([10.0, 20.0, 40.0]);
        let state = KinematicState {
            position: (3.15, 101.69),
            previous: (3.15, 101.69),
            recent_speed_kmh: 15.0,
        };
        let path = kinematic_extrapolate(&state, MotionMode::Medium, &m, 3, 300.0);
        assert!(path.iter().all(|&p| p == (3.15, 101.69)));
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let raw = vec![(3.10, 101.60), (3.11, 101.61)];
        let ext = vec![(3.12, 101.62), (3.13, 101.63)];

        let mut m = model_with([10.0, 20.0, 30.0]);
        m.betas = BlendWeights {
            low: 0.0,
            medium: 1.0,
            high: 0.5,
        };
        let c0 = correct(&raw, &ext, MotionMode::Low, &m).unwrap();
        assert_eq!(c0, raw);
        let c1 = correct(&raw, &ext, MotionMode::Medium, &m).unwrap();
        assert_eq!(c1, ext);
        let ch = correct(&raw, &ext, MotionMode::High, &m).unwrap();
        assert!((ch[0].0 - 3.11).abs() < 1e-12);
        assert!((ch[0].1 - 101.61).abs() < 1e-12);
    }

    #[test]
    fn blend_output_is_coordinatewise_convex() {
        let raw = vec![(3.10, 101.72), (3.18, 101.55)];
        let ext = vec![(3.16, 101.66), (3.12, 101.70)];
        for beta in [0.0, 0.17, 0.5, 0.83, 1.0] {
            let m = MotionModeModel {
                centroids: [10.0, 20.0, 30.0],
                betas: BlendWeights {
                    low: beta,
                    medium: beta,
                    high: beta,
                },
            };
            let out = correct(&raw, &ext, MotionMode::Low, &m).unwrap();
            for ((o, r), e) in out.iter().zip(&raw).zip(&ext) {
                for (ov, rv, ev) in [(o.0, r.0, e.0), (o.1, r.1, e.1)] {
                    let (lo, hi) = (rv.min(ev), rv.max(ev));
                    assert!(ov >= lo - 1e-12 && ov <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = model_with([10.0, 20.0, 30.0]);
        assert!(correct(&[(3.0, 101.0)], &[], MotionMode::Low, &m).is_err());
    }
}
