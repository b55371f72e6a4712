//! Deterministic synthetic bus-fleet GPS generator: buses traverse a route
//! polyline with staggered departures, congestion slowdowns, GPS noise, and
//! dropout. Stands in for proprietary fleet data so the full pipeline runs
//! anywhere.
//!
//! Randomness is counter-based: every (bus, fix index) pair seeds its own
//! stream, so dropout and noise decisions are independent of evaluation
//! order and identical seeds reproduce record streams bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_m, LocalFrame};
use crate::ingest::GpsRecord;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("route: {0}")]
    Route(String),
    #[error("fleet: {0}")]
    Fleet(String),
}

/// Anchor for generated routes: central Kuala Lumpur, so degree scales are
/// realistic for the default cleaning bbox.
pub const ANCHOR_LAT: f64 = 3.14;
pub const ANCHOR_LON: f64 = 101.69;

// ── Route ───────────────────────────────────────────────────────────────

/// An ordered polyline with cumulative arc lengths in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub waypoints: Vec<(f64, f64)>,
    pub cum_len_m: Vec<f64>,
}

impl RouteSpec {
    pub fn new(waypoints: Vec<(f64, f64)>) -> Result<Self, SynthError> {
        if waypoints.len() < 2 {
            return Err(SynthError::Route(format!(
                "need >= 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        let mut cum = Vec::with_capacity(waypoints.len());
        cum.push(0.0);
        for pair in waypoints.windows(2) {
            let seg = haversine_m(pair[0], pair[1]);
            if !(seg > 0.0) {
                return Err(SynthError::Route(
                    "consecutive waypoints must be distinct".into(),
                ));
            }
            cum.push(cum.last().unwrap() + seg);
        }
        Ok(RouteSpec {
            waypoints,
            cum_len_m: cum,
        })
    }

    pub fn total_len_m(&self) -> f64 {
        *self.cum_len_m.last().unwrap()
    }

    /// Point at the given arc length, clamped to the polyline's extent.
    /// Linear interpolation between the bracketing waypoints.
    pub fn point_at_arc(&self, arc_m: f64) -> (f64, f64) {
        let total = self.total_len_m();
        let arc = arc_m.clamp(0.0, total);
        let seg = self
            .cum_len_m
            .partition_point(|&c| c <= arc)
            .min(self.cum_len_m.len() - 1);
        let (i0, i1) = (seg - 1, seg);
        let seg_len = self.cum_len_m[i1] - self.cum_len_m[i0];
        let w = (arc - self.cum_len_m[i0]) / seg_len;
        let (a, b) = (self.waypoints[i0], self.waypoints[i1]);
        (a.0 + w * (b.0 - a.0), a.1 + w * (b.1 - a.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKind {
    /// Closed circuit: arc position wraps around.
    Loop,
    /// Open corridor: buses ping-pong between the endpoints.
    Corridor,
}

/// Generates a smooth random polyline of roughly `extent_km` total length
/// anchored near Kuala Lumpur. Deterministic in the seed.
pub fn make_route(
    kind: RouteKind,
    n_waypoints: usize,
    extent_km: f64,
    seed: u64,
) -> Result<RouteSpec, SynthError> {
    if n_waypoints < 2 {
        return Err(SynthError::Route(format!(
            "need >= 2 waypoints, got {n_waypoints}"
        )));
    }
    if !(extent_km > 0.0) {
        return Err(SynthError::Route("extent_km must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x526F_7574, 0));
    let frame = LocalFrame::new(ANCHOR_LAT, ANCHOR_LON);
    let extent_m = extent_km * 1000.0;

    let pts: Vec<(f64, f64)> = match kind {
        RouteKind::Loop => {
            // Jittered radii around a circle whose circumference matches the
            // requested extent; chords undershoot by < 2% at 8+ waypoints.
            let radius = extent_m / (2.0 * std::f64::consts::PI);
            let n = n_waypoints.max(3);
            let mut pts = Vec::with_capacity(n + 1);
            for i in 0..n {
                let angle = i as f64 / n as f64 * std::f64::consts::TAU;
                let r = radius * (1.0 + rng.gen_range(-0.08..0.08));
                pts.push((r * angle.cos(), r * angle.sin()));
            }
            pts.push(pts[0]);
            pts
        }
        RouteKind::Corridor => {
            let step = extent_m / (n_waypoints - 1) as f64;
            let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (mut x, mut y) = (0.0, 0.0);
            let mut pts = vec![(x, y)];
            for _ in 1..n_waypoints {
                heading += rng.gen_range(-0.35..0.35);
                x += step * heading.cos();
                y += step * heading.sin();
                pts.push((x, y));
            }
            pts
        }
    };
    RouteSpec::new(pts.into_iter().map(|(x, y)| frame.to_geo(x, y)).collect())
}

// ── Fleet ───────────────────────────────────────────────────────────────

/// A congestion slowdown: buses inside the arc interval during the active
/// wall-clock interval move at `base_speed * multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionZone {
    pub arc_from_m: f64,
    pub arc_to_m: f64,
    pub multiplier: f64,
    pub active_from_s: i64,
    pub active_to_s: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSpec {
    pub n_buses: usize,
    /// Seconds between consecutive departures.
    pub headway_s: i64,
    pub base_speed_kmh: f64,
    pub congestion_zones: Vec<CongestionZone>,
    pub gps_noise_sigma_m: f64,
    pub dropout_prob: f64,
    pub fix_interval_s: i64,
    pub route_kind: RouteKind,
    pub seed: u64,
    /// Unix time of the first departure.
    pub start_unix: i64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            n_buses: 5,
            headway_s: 600,
            base_speed_kmh: 36.0,
            congestion_zones: Vec::new(),
            gps_noise_sigma_m: 10.0,
            dropout_prob: 0.05,
            fix_interval_s: 30,
            route_kind: RouteKind::Loop,
            seed: 42,
            start_unix: 1_704_067_200, // 2024-01-01T00:00:00Z
        }
    }
}

impl FleetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_buses < 1 {
            return Err(SynthError::Fleet("n_buses must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(SynthError::Fleet(format!(
                "dropout_prob must be in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        if !(self.base_speed_kmh > 0.0) {
            return Err(SynthError::Fleet("base_speed_kmh must be > 0".into()));
        }
        if self.fix_interval_s < 1 {
            return Err(SynthError::Fleet("fix_interval_s must be >= 1".into()));
        }
        if self.headway_s < 0 {
            return Err(SynthError::Fleet("headway_s must be >= 0".into()));
        }
        if !(self.gps_noise_sigma_m >= 0.0) {
            return Err(SynthError::Fleet("gps_noise_sigma_m must be >= 0".into()));
        }
        for z in &self.congestion_zones {
            if !(z.multiplier > 0.0 && z.multiplier <= 1.0) {
                return Err(SynthError::Fleet(format!(
                    "congestion multiplier must be in (0, 1], got {}",
                    z.multiplier
                )));
            }
            if z.arc_from_m >= z.arc_to_m || z.active_from_s >= z.active_to_s {
                return Err(SynthError::Fleet("congestion zone intervals must be non-empty".into()));
            }
        }
        Ok(())
    }
}

/// Simulation output plus anything the caller should surface to users.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub records: Vec<GpsRecord>,
    pub warnings: Vec<String>,
}

/// Runs the scenario for `duration_s` seconds of wall clock. Bus `i`
/// departs at `i * headway` and drives until the end of the scenario, so a
/// duration smaller than `headway * n_buses` leaves some buses undeparted
/// (warned). Speeds integrate at 1 Hz, so a congestion boundary takes
/// effect on the next whole second. The emitted speed field is the
/// noiseless speed at the fix instant; only positions carry noise.
pub fn simulate(
    route: &RouteSpec,
    fleet: &FleetSpec,
    duration_s: i64,
) -> Result<SimOutput, SynthError> {
    fleet.validate()?;
    if duration_s < fleet.fix_interval_s {
        return Err(SynthError::Fleet(format!(
            "duration {duration_s}s shorter than one fix interval"
        )));
    }
    let mut warnings = Vec::new();
    if duration_s <= fleet.headway_s * fleet.n_buses as i64 {
        warnings.push(format!(
            "duration {duration_s}s does not exceed headway*n_buses = {}s; \
             some buses barely run (or never depart)",
            fleet.headway_s * fleet.n_buses as i64
        ));
    }

    let total = route.total_len_m();
    let fixes_per_bus = (duration_s / fleet.fix_interval_s) as usize + 1;
    let mut records = Vec::with_capacity(fleet.n_buses * fixes_per_bus);

    for bus in 0..fleet.n_buses {
        let offset = bus as i64 * fleet.headway_s;
        let journey = duration_s - offset;
        if journey < 0 {
            continue; // never departs within the scenario
        }
        let depart = fleet.start_unix + offset;
        let bus_id = format!("bus-{bus:02}");
        let mut arc = 0.0f64;
        let mut next_fix = 0usize;
        // 1 Hz integration of arc += v(arc, t) dt.
        for elapsed in 0..=journey {
            let t = depart + elapsed;
            if elapsed == next_fix as i64 * fleet.fix_interval_s {
                let speed = speed_at(fleet, total, arc, t);
                if let Some(rec) =
                    emit_fix(route, fleet, &bus_id, bus, next_fix, t, arc, speed, total)
                {
                    records.push(rec);
                }
                next_fix += 1;
            }
            if elapsed < journey {
                arc += speed_at(fleet, total, arc, t) / 3.6;
            }
        }
    }

    records.sort_by(|a, b| {
        a.bus_id
            .cmp(&b.bus_id)
            .then_with(|| a.timestamp.cmp(&b.timestamp))
    });
    Ok(SimOutput { records, warnings })
}

/// Effective position on the polyline for a raw (unbounded) arc length.
fn effective_arc(kind: RouteKind, arc: f64, total: f64) -> f64 {
    match kind {
        RouteKind::Loop => arc.rem_euclid(total),
        RouteKind::Corridor => {
            let p = arc.rem_euclid(2.0 * total);
            if p <= total {
                p
            } else {
                2.0 * total - p
            }
        }
    }
}

fn speed_at(fleet: &FleetSpec, total: f64, arc: f64, t: i64) -> f64 {
    let pos = effective_arc(fleet.route_kind, arc, total);
    let mut v = fleet.base_speed_kmh;
    for z in &fleet.congestion_zones {
        if pos >= z.arc_from_m && pos < z.arc_to_m && t >= z.active_from_s && t < z.active_to_s {
            v *= z.multiplier;
        }
    }
    v
}

#[allow(clippy::too_many_arguments)]
fn emit_fix(
    route: &RouteSpec,
    fleet: &FleetSpec,
    bus_id: &str,
    bus: usize,
    fix_idx: usize,
    t: i64,
    arc: f64,
    speed: f64,
    total: f64,
) -> Option<GpsRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(fleet.seed, bus as u64, fix_idx as u64));
    if fleet.dropout_prob > 0.0 && rng.gen::<f64>() < fleet.dropout_prob {
        return None;
    }
    let (lat, lon) = route.point_at_arc(effective_arc(fleet.route_kind, arc, total));
    let (lat, lon) = if fleet.gps_noise_sigma_m > 0.0 {
        let east = fleet.gps_noise_sigma_m * gaussian(&mut rng);
        let north = fleet.gps_noise_sigma_m * gaussian(&mut rng);
        let frame = LocalFrame::new(lat, lon);
        frame.to_geo(east, north)
    } else {
        (lat, lon)
    };
    Some(GpsRecord {
        bus_id: bus_id.to_string(),
        timestamp: t,
        lat,
        lon,
        speed_kmh: speed,
    })
}

/// Box-Muller standard normal; two uniform draws per sample keeps the
/// counter math independent of any library's rejection loops.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// SplitMix64-style mixing of (seed, bus, counter) into one stream seed.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_fleet() -> FleetSpec {
        FleetSpec {
            gps_noise_sigma_m: 0.0,
            dropout_prob: 0.0,
            congestion_zones: Vec::new(),
            ..FleetSpec::default()
        }
    }

    #[test]
    fn straight_route_from_two_waypoints() {
        let r = make_route(RouteKind::Corridor, 2, 5.0, 7).unwrap();
        assert_eq!(r.waypoints.len(), 2);
        assert!((r.total_len_m() - 5000.0).abs() < 5.0);
    }

    #[test]
    fn route_arc_length_within_20_percent() {
        for seed in [1u64, 2, 3, 9, 40] {
            for kind in [RouteKind::Loop, RouteKind::Corridor] {
                let r = make_route(kind, 12, 15.0, seed).unwrap();
                let total = r.total_len_m();
                assert!(
                    (12_000.0..=18_000.0).contains(&total),
                    "{kind:?} seed {seed}: {total}"
                );
                // Oracle: cumulative lengths match independent summation.
                let mut acc = 0.0;
                for (i, pair) in r.waypoints.windows(2).enumerate() {
                    acc += haversine_m(pair[0], pair[1]);
                    assert!((r.cum_len_m[i + 1] - acc).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_route() {
        let a = make_route(RouteKind::Loop, 10, 12.0, 99).unwrap();
        let b = make_route(RouteKind::Loop, 10, 12.0, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_fix_sits_at_closed_form_arc() {
        // No noise, no dropout, no congestion: arc(t) = v * elapsed exactly.
        let route = make_route(RouteKind::Loop, 12, 15.0, 5).unwrap();
        let fleet = quiet_fleet();
        let out = simulate(&route, &fleet, 3600).unwrap();
        let v_ms = fleet.base_speed_kmh / 3.6;
        let total = route.total_len_m();
        for rec in out.records.iter().filter(|r| r.bus_id == "bus-00") {
            let elapsed = (rec.timestamp - fleet.start_unix) as f64;
            let expect_arc = (v_ms * elapsed).rem_euclid(total);
            let (lat, lon) = route.point_at_arc(expect_arc);
            assert!(
                (rec.lat - lat).abs() < 1e-9 * lat.abs().max(1.0),
                "t={elapsed}: {} vs {lat}",
                rec.lat
            );
            assert!((rec.lon - lon).abs() < 1e-9 * lon.abs().max(1.0));
        }
    }

    #[test]
    fn fix_count_without_dropout() {
        // Simultaneous departures: every bus runs the whole hour and emits
        // floor(3600/30) + 1 fixes.
        let route = make_route(RouteKind::Loop, 8, 10.0, 3).unwrap();
        let fleet = FleetSpec {
            headway_s: 0,
            ..quiet_fleet()
        };
        let out = simulate(&route, &fleet, 3600).unwrap();
        for bus in 0..fleet.n_buses {
            let id = format!("bus-{bus:02}");
            let n = out.records.iter().filter(|r| r.bus_id == id).count();
            assert_eq!(n, 121, "{id}");
        }
        // Staggered departures shorten later journeys accordingly.
        let staggered = simulate(&route, &quiet_fleet(), 3600).unwrap();
        let n_last = staggered
            .records
            .iter()
            .filter(|r| r.bus_id == "bus-04")
            .count();
        assert_eq!(n_last, (3600 - 4 * 600) / 30 + 1);
    }

    #[test]
    fn same_seed_bit_identical_streams() {
        let route = make_route(RouteKind::Loop, 10, 14.0, 11).unwrap();
        let fleet = FleetSpec::default();
        let a = simulate(&route, &fleet, 7200).unwrap();
        let b = simulate(&route, &fleet, 7200).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.bus_id, y.bus_id);
            assert_eq!(x.timestamp, y.timestamp);
            assert_eq!(x.lat.to_bits(), y.lat.to_bits());
            assert_eq!(x.lon.to_bits(), y.lon.to_bits());
            assert_eq!(x.speed_kmh.to_bits(), y.speed_kmh.to_bits());
        }
    }

    #[test]
    fn speed_field_matches_arc_displacement() {
        // Constant speed on a meridian segment, short of the turnaround:
        // chord distance equals arc displacement, which equals v * dt.
        let route = RouteSpec::new(vec![(3.10, 101.69), (3.30, 101.69)]).unwrap();
        let fleet = FleetSpec {
            route_kind: RouteKind::Corridor,
            n_buses: 1,
            ..quiet_fleet()
        };
        let out = simulate(&route, &fleet, 400).unwrap();
        assert!(out.records.len() > 10);
        for pair in out.records.windows(2) {
            let dt = (pair[1].timestamp - pair[0].timestamp) as f64;
            let dist = haversine_m((pair[0].lat, pair[0].lon), (pair[1].lat, pair[1].lon));
            let v_ms = pair[0].speed_kmh / 3.6;
            assert!(
                (dist - v_ms * dt).abs() < 1e-6 * v_ms * dt,
                "dist {dist} vs {}",
                v_ms * dt
            );
        }
    }

    #[test]
    fn fixes_stay_near_polyline() {
        let route = make_route(RouteKind::Loop, 12, 15.0, 8).unwrap();
        let fleet = FleetSpec {
            gps_noise_sigma_m: 10.0,
            ..quiet_fleet()
        };
        let out = simulate(&route, &fleet, 3600).unwrap();
        let frame = LocalFrame::new(ANCHOR_LAT, ANCHOR_LON);
        let pts: Vec<(f64, f64)> = route
            .waypoints
            .iter()
            .map(|&(lat, lon)| frame.to_local(lat, lon))
            .collect();
        for rec in &out.records {
            let p = frame.to_local(rec.lat, rec.lon);
            let d = pts
                .windows(2)
                .map(|seg| point_segment_dist(p, seg[0], seg[1]))
                .fold(f64::INFINITY, f64::min);
            assert!(d <= 6.0 * fleet.gps_noise_sigma_m, "fix {d} m off the route");
        }
    }

    #[test]
    fn congestion_slows_traversal() {
        let route = make_route(RouteKind::Loop, 12, 15.0, 5).unwrap();
        let total = route.total_len_m();
        let quiet = quiet_fleet();
        let slowed = FleetSpec {
            congestion_zones: vec![CongestionZone {
                arc_from_m: 0.2 * total,
                arc_to_m: 0.5 * total,
                multiplier: 0.5,
                active_from_s: 0,
                active_to_s: i64::MAX / 2,
            }],
            ..quiet_fleet()
        };
        let lap = |fleet: &FleetSpec| -> f64 {
            // Integrate until one full lap; mirror of the sim's stepper.
            let mut arc = 0.0;
            let mut t = fleet.start_unix;
            while arc < total {
                arc += speed_at(fleet, total, arc, t) / 3.6;
                t += 1;
            }
            (t - fleet.start_unix) as f64
        };
        assert!(lap(&slowed) > lap(&quiet));
    }

    #[test]
    fn degenerate_route_rejected() {
        assert!(RouteSpec::new(vec![(3.0, 101.0)]).is_err());
        assert!(RouteSpec::new(vec![(3.0, 101.0), (3.0, 101.0)]).is_err());
    }

    fn point_segment_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
        let (px, py) = (p.0 - a.0, p.1 - a.1);
        let (bx, by) = (b.0 - a.0, b.1 - a.1);
        let len2 = bx * bx + by * by;
        let t = if len2 > 0.0 {
            ((px * bx + py * by) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (dx, dy) = (px - t * bx, py - t * by);
        (dx * dx + dy * dy).sqrt()
    }
}
