//! Reference path geometry, pure-pursuit conversion of paths into twist
//! commands, and tracking-error metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::wrap_angle;
use crate::envsim::DT;
use crate::error::{Error, Result};
use crate::vaepolicy::Command;

/// Maximum waypoint spacing after densification, in meters.
pub const MAX_SPACING: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Oblong,
    Lemniscate,
    UShape,
    Star,
}

impl std::str::FromStr for PathKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oblong" => Ok(PathKind::Oblong),
            "lemniscate" => Ok(PathKind::Lemniscate),
            "u_shape" | "ushape" | "u-shape" => Ok(PathKind::UShape),
            "star" => Ok(PathKind::Star),
            other => Err(Error::InvalidArgument(format!("unknown path kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for PathKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PathKind::Oblong => "oblong",
            PathKind::Lemniscate => "lemniscate",
            PathKind::UShape => "u_shape",
            PathKind::Star => "star",
        };
        f.write_str(s)
    }
}

/// Densified polyline with a cumulative arc-length table. For closed paths
/// the table has one extra entry holding the total length including the
/// closing segment back to the start.
#[derive(Debug, Clone)]
pub struct Path {
    pub points: Vec<[f64; 2]>,
    pub arc_length: Vec<f64>,
    pub closed: bool,
}

impl Path {
    pub fn from_polyline(raw: &[[f64; 2]], closed: bool) -> Self {
        let mut points = Vec::new();
        let n = raw.len();
        let segs = if closed { n } else { n - 1 };
        for i in 0..segs {
            let a = raw[i];
            let b = raw[(i + 1) % n];
            let d = dist(a, b);
            if d < 1e-12 {
                continue;
            }
            let pieces = (d / MAX_SPACING).ceil().max(1.0) as usize;
            for k in 0..pieces {
                let t = k as f64 / pieces as f64;
                points.push([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]);
            }
        }
        if !closed {
            points.push(*raw.last().unwrap());
        }
        let mut arc_length = Vec::with_capacity(points.len() + 1);
        arc_length.push(0.0);
        for i in 1..points.len() {
            arc_length.push(arc_length[i - 1] + dist(points[i - 1], points[i]));
        }
        if closed {
            let total = arc_length.last().unwrap() + dist(*points.last().unwrap(), points[0]);
            arc_length.push(total);
        }
        Path { points, arc_length, closed }
    }

    pub fn total_length(&self) -> f64 {
        *self.arc_length.last().unwrap()
    }

    /// Interpolated point at arc length `s`; wraps on closed paths, clamps on
    /// open ones.
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let total = self.total_length();
        let s = if self.closed { s.rem_euclid(total) } else { s.clamp(0.0, total) };
        let n = self.points.len();
        let idx = match self.arc_length[..n].binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(n - 1);
        let next = if self.closed { (idx + 1) % n } else { (idx + 1).min(n - 1) };
        let s0 = self.arc_length[idx];
        let s1 = if idx + 1 < self.arc_length.len() { self.arc_length[idx + 1] } else { total };
        let seg = s1 - s0;
        let t = if seg > 0.0 { (s - s0) / seg } else { 0.0 };
        let (a, b) = (self.points[idx], self.points[next]);
        [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
    }

    /// Tangent heading at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> f64 {
        let eps = MAX_SPACING / 2.0;
        let a = self.point_at(s);
        let b = self.point_at(s + eps);
        if dist(a, b) < 1e-12 {
            let c = self.point_at(s - eps);
            return (a[1] - c[1]).atan2(a[0] - c[0]);
        }
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Arc length of the globally nearest waypoint to `p`.
    pub fn nearest_arc(&self, p: [f64; 2]) -> f64 {
        let mut best = f64::INFINITY;
        let mut best_s = 0.0;
        for (i, q) in self.points.iter().enumerate() {
            let d = dist(p, *q);
            if d < best {
                best = d;
                best_s = self.arc_length[i];
            }
        }
        best_s
    }

    /// Nearest point restricted to a window around a previous arc position.
    /// Keeps tracking on the correct branch of self-intersecting paths.
    pub fn nearest_arc_windowed(&self, p: [f64; 2], prev: f64, back: f64, forward: f64) -> f64 {
        let total = self.total_length();
        let mut best = f64::INFINITY;
        let mut best_s = prev;
        let step = MAX_SPACING / 2.0;
        let mut s = prev - back;
        while s <= prev + forward {
            let q = self.point_at(s);
            let d = dist(p, q);
            if d < best {
                best = d;
                best_s = s;
            }
            s += step;
        }
        if self.closed {
            best_s.rem_euclid(total)
        } else {
            best_s.clamp(0.0, total)
        }
    }

    pub fn to_doc(&self, kind: PathKind, scale: f64) -> PathDoc {
        PathDoc { kind, scale, closed: self.closed, points: self.points.clone() }
    }
}

/// JSON waypoint-list export.
#[derive(Debug, Serialize, Deserialize)]
pub struct PathDoc {
    pub kind: PathKind,
    pub scale: f64,
    pub closed: bool,
    pub points: Vec<[f64; 2]>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn arc_points(center: [f64; 2], r: f64, a0: f64, a1: f64, step: f64) -> Vec<[f64; 2]> {
    let n = ((a1 - a0).abs() * r / step).ceil().max(2.0) as usize;
    (0..n)
        .map(|k| {
            let t = a0 + (a1 - a0) * k as f64 / n as f64;
            [center[0] + r * t.cos(), center[1] + r * t.sin()]
        })
        .collect()
}

/// Rotate a closed polyline so it starts at its leftmost point (ties broken
/// by lower y).
fn start_at_leftmost(points: &mut [[f64; 2]]) {
    let mut i0 = 0;
    for (i, p) in points.iter().enumerate() {
        let q = points[i0];
        if p[0] < q[0] - 1e-12 || ((p[0] - q[0]).abs() <= 1e-12 && p[1] < q[1]) {
            i0 = i;
        }
    }
    points.rotate_left(i0);
}

/// Build one of the four reference paths at the given scale.
pub fn make_path(kind: PathKind, scale: f64) -> Result<Path> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
    }
    use std::f64::consts::{FRAC_PI_2, PI, TAU};
    let mut raw: Vec<[f64; 2]> = Vec::new();
    let closed;
    match kind {
        PathKind::Oblong => {
            // two 3 m straights joined by semicircles of radius 1; start at
            // the leftmost point, counterclockwise (initial motion -y)
            raw.extend(arc_points([-1.5, 0.0], 1.0, PI, 1.5 * PI, 0.02));
            for k in 0..60 {
                raw.push([-1.5 + 3.0 * k as f64 / 60.0, -1.0]);
            }
            raw.extend(arc_points([1.5, 0.0], 1.0, -FRAC_PI_2, FRAC_PI_2, 0.02));
            for k in 0..60 {
                raw.push([1.5 - 3.0 * k as f64 / 60.0, 1.0]);
            }
            raw.extend(arc_points([-1.5, 0.0], 1.0, FRAC_PI_2, PI, 0.02));
            closed = true;
        }
        PathKind::Lemniscate => {
            // Bernoulli lemniscate with half-width 2
            let a = 2.0;
            for k in 0..1000 {
                let t = TAU * k as f64 / 1000.0;
                let denom = 1.0 + t.sin().powi(2);
                raw.push([a * t.cos() / denom, a * t.sin() * t.cos() / denom]);
            }
            closed = true;
        }
        PathKind::UShape => {
            // three 3 m straights joined by two 90-degree arcs of radius 0.5,
            // opening upward, traversed from the top-left end
            for k in 0..60 {
                raw.push([0.0, 3.5 - 3.0 * k as f64 / 60.0]);
            }
            raw.extend(arc_points([0.5, 0.5], 0.5, PI, 1.5 * PI, 0.02));
            for k in 0..60 {
                raw.push([0.5 + 3.0 * k as f64 / 60.0, 0.0]);
            }
            raw.extend(arc_points([3.5, 0.5], 0.5, -FRAC_PI_2, 0.0, 0.02));
            for k in 0..=60 {
                raw.push([4.0, 0.5 + 3.0 * k as f64 / 60.0]);
            }
            closed = false;
        }
        PathKind::Star => {
            // five-pointed star (pentagram), circumradius 2, vertices rounded
            // with radius 0.2, counterclockwise winding
            let big_r = 2.0;
            let rr = 0.2;
            let vertices: Vec<[f64; 2]> = (0..5)
                .map(|k| {
                    let a = PI + k as f64 * (4.0 * PI / 5.0);
                    [big_r * a.cos(), big_r * a.sin()]
                })
                .collect();
            let half_point = 18f64.to_radians();
            let cut = rr / half_point.tan();
            for k in 0..5 {
                let p_prev = vertices[(k + 4) % 5];
                let p = vertices[k];
                let p_next = vertices[(k + 1) % 5];
                let din = normalize([p[0] - p_prev[0], p[1] - p_prev[1]]);
                let dout = normalize([p_next[0] - p[0], p_next[1] - p[1]]);
                let t_in = [p[0] - din[0] * cut, p[1] - din[1] * cut];
                let t_out = [p[0] + dout[0] * cut, p[1] + dout[1] * cut];
                let bis = normalize([dout[0] - din[0], dout[1] - din[1]]);
                let center = [
                    p[0] + bis[0] * rr / half_point.sin(),
                    p[1] + bis[1] * rr / half_point.sin(),
                ];
                raw.push(t_in);
                let a0 = (t_in[1] - center[1]).atan2(t_in[0] - center[0]);
                let a1 = (t_out[1] - center[1]).atan2(t_out[0] - center[0]);
                let mut da = (a1 - a0).rem_euclid(TAU);
                if da > PI {
                    da -= TAU;
                }
                let n = ((da.abs() * rr) / 0.02).ceil().max(3.0) as usize;
                for i in 0..n {
                    let t = a0 + da * i as f64 / n as f64;
                    raw.push([center[0] + rr * t.cos(), center[1] + rr * t.sin()]);
                }
                raw.push(t_out);
            }
            closed = true;
        }
    }
    for p in &mut raw {
        p[0] *= scale;
        p[1] *= scale;
    }
    if closed {
        start_at_leftmost(&mut raw);
    }
    Ok(Path::from_polyline(&raw, closed))
}

fn normalize(v: [f64; 2]) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    [v[0] / n, v[1] / n]
}

/// Pure-pursuit configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PursuitConfig {
    pub lookahead: f64,
    pub speed: f64,
    pub omega_clamp: f64,
}

impl PursuitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookahead <= MAX_SPACING {
            return Err(Error::InvalidArgument(format!(
                "lookahead {} must exceed waypoint spacing {MAX_SPACING}",
                self.lookahead
            )));
        }
        if !(0.0..=1.5).contains(&self.speed) {
            return Err(Error::InvalidArgument(format!(
                "target speed {} outside command range [0, 1.5]",
                self.speed
            )));
        }
        Ok(())
    }
}

/// Pursuit output: the command plus a completion flag for open paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PursuitOutput {
    pub command: Command,
    pub finished: bool,
}

/// Stateless pure pursuit with a global nearest-point search. Fine for paths
/// without self-intersections; rollouts use `PursuitTracker`.
pub fn pure_pursuit(pose: (f64, f64, f64), path: &Path, cfg: &PursuitConfig) -> PursuitOutput {
    let s = path.nearest_arc([pose.0, pose.1]);
    command_at(pose, path, cfg, s)
}

/// Progress-tracking pursuit cursor. Restricting the nearest-point search to
/// a window around the last progress keeps the lookahead on the correct
/// branch where the path crosses itself (the star does).
#[derive(Debug, Clone, Default)]
pub struct PursuitTracker {
    progress: Option<f64>,
}

impl PursuitTracker {
    pub fn new() -> Self {
        PursuitTracker::default()
    }

    pub fn progress(&self) -> Option<f64> {
        self.progress
    }

    pub fn command(
        &mut self,
        pose: (f64, f64, f64),
        path: &Path,
        cfg: &PursuitConfig,
    ) -> PursuitOutput {
        let s = match self.progress {
            None => path.nearest_arc([pose.0, pose.1]),
            Some(prev) => path.nearest_arc_windowed([pose.0, pose.1], prev, 0.5, 1.0),
        };
        self.progress = Some(s);
        command_at(pose, path, cfg, s)
    }
}

fn command_at(
    pose: (f64, f64, f64),
    path: &Path,
    cfg: &PursuitConfig,
    s_near: f64,
) -> PursuitOutput {
    let target_s = s_near + cfg.lookahead;
    if !path.closed && target_s > path.total_length() {
        return PursuitOutput { command: Command { linear: 0.0, angular: 0.0 }, finished: true };
    }
    let target = path.point_at(target_s);
    let (sin_h, cos_h) = pose.2.sin_cos();
    let dx = target[0] - pose.0;
    let dy = target[1] - pose.1;
    let y_l = -sin_h * dx + cos_h * dy;
    let curvature = 2.0 * y_l / (cfg.lookahead * cfg.lookahead);
    let omega = (curvature * cfg.speed).clamp(-cfg.omega_clamp, cfg.omega_clamp);
    PursuitOutput { command: Command { linear: cfg.speed, angular: omega }, finished: false }
}

/// One tracked sample: world position plus measured body-frame twist.
#[derive(Debug, Clone, Copy)]
pub struct TrackSample {
    pub position: [f64; 2],
    pub forward_velocity: f64,
    pub yaw_rate: f64,
}

/// Time-averaged tracking errors (e_v, e_omega, e_p): linear velocity error
/// against the command log, angular velocity error, and distance to the
/// reference point advanced along the path at the constant target speed.
pub fn metrics(
    samples: &[TrackSample],
    commands: &[Command],
    path: &Path,
    target_speed: f64,
) -> Result<(f64, f64, f64)> {
    if samples.len() != commands.len() {
        return Err(Error::ShapeMismatch {
            context: "metrics trajectory vs command log".into(),
            expected: vec![samples.len()],
            got: vec![commands.len()],
        });
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("metrics on empty trajectory".into()));
    }
    let n = samples.len() as f64;
    let mut e_v = 0.0;
    let mut e_w = 0.0;
    let mut e_p = 0.0;
    for (k, (s, c)) in samples.iter().zip(commands).enumerate() {
        e_v += (c.linear - s.forward_velocity).abs();
        e_w += (c.angular - s.yaw_rate).abs();
        let target = path.point_at(target_speed * (k + 1) as f64 * DT);
        e_p += dist(s.position, target);
    }
    Ok((e_v / n, e_w / n, e_p / n))
}

/// Kinematic unicycle with exact twist execution, driven by the pursuit
/// tracker from the path start. Returns samples and the command log for
/// `metrics`.
pub fn unicycle_track(
    path: &Path,
    cfg: &PursuitConfig,
    duration: f64,
) -> (Vec<TrackSample>, Vec<Command>) {
    let start = path.point_at(0.0);
    let mut x = start[0];
    let mut y = start[1];
    let mut h = path.tangent_at(0.0);
    let mut tracker = PursuitTracker::new();
    let steps = (duration / DT).round() as usize;
    let mut samples = Vec::with_capacity(steps);
    let mut commands = Vec::with_capacity(steps);
    for _ in 0..steps {
        let out = tracker.command((x, y, h), path, cfg);
        if out.finished {
            break;
        }
        h = wrap_angle(h + out.command.angular * DT);
        x += out.command.linear * h.cos() * DT;
        y += out.command.linear * h.sin() * DT;
        samples.push(TrackSample {
            position: [x, y],
            forward_velocity: out.command.linear,
            yaw_rate: out.command.angular,
        });
        commands.push(out.command);
    }
    (samples, commands)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_cfg() -> PursuitConfig {
        PursuitConfig { lookahead: 0.6, speed: 0.9, omega_clamp: 1.5 }
    }

    #[test]
    fn oblong_total_length_matches_closed_form() {
        let p = make_path(PathKind::Oblong, 1.0).unwrap();
        let expect = 2.0 * 3.0 + std::f64::consts::TAU; // two straights plus a full circle
        assert!((p.total_length() - expect).abs() < 2e-3, "{}", p.total_length());
        assert!(p.closed);
    }

    #[test]
    fn ushape_total_length_matches_closed_form() {
        let p = make_path(PathKind::UShape, 1.0).unwrap();
        let expect = 3.0 * 3.0 + std::f64::consts::PI * 0.5;
        assert!((p.total_length() - expect).abs() < 2e-3, "{}", p.total_length());
        assert!(!p.closed);
    }

    #[test]
    fn star_total_length_matches_closed_form() {
        let p = make_path(PathKind::Star, 1.0).unwrap();
        let chord = 2.0 * 2.0 * (72f64.to_radians()).sin();
        let cut = 0.2 / (18f64.to_radians()).tan();
        let arc = 0.2 * 144f64.to_radians();
        let expect = 5.0 * (chord - 2.0 * cut + arc);
        assert!((p.total_length() - expect).abs() < 5e-3, "{} vs {expect}", p.total_length());
    }

    #[test]
    fn lemniscate_length_matches_quadrature() {
        let a = 2.0;
        let n = 1_000_000;
        let mut expect = 0.0;
        let mut prev = [a, 0.0];
        for k in 1..=n {
            let t = std::f64::consts::TAU * k as f64 / n as f64;
            let denom = 1.0 + t.sin().powi(2);
            let p = [a * t.cos() / denom, a * t.sin() * t.cos() / denom];
            expect += dist(prev, p);
            prev = p;
        }
        let p = make_path(PathKind::Lemniscate, 1.0).unwrap();
        assert!((p.total_length() - expect).abs() < 5e-3, "{} vs {expect}", p.total_length());
    }

    #[test]
    fn scale_doubles_arc_length() {
        for kind in [PathKind::Oblong, PathKind::Lemniscate, PathKind::UShape, PathKind::Star] {
            let p1 = make_path(kind, 1.0).unwrap();
            let p2 = make_path(kind, 2.0).unwrap();
            let ratio = p2.total_length() / p1.total_length();
            assert!((ratio - 2.0).abs() < 1e-3, "{kind}: ratio {ratio}");
        }
    }

    #[test]
    fn closedness_per_kind() {
        assert!(make_path(PathKind::Oblong, 1.0).unwrap().closed);
        assert!(make_path(PathKind::Lemniscate, 1.0).unwrap().closed);
        assert!(make_path(PathKind::Star, 1.0).unwrap().closed);
        assert!(!make_path(PathKind::UShape, 1.0).unwrap().closed);
    }

    #[test]
    fn starts_at_leftmost_point() {
        for kind in [PathKind::Oblong, PathKind::Lemniscate, PathKind::Star] {
            let p = make_path(kind, 1.0).unwrap();
            let x0 = p.points[0][0];
            let min_x = p.points.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
            assert!(x0 - min_x < 1e-6, "{kind}: starts at x={x0}, min {min_x}");
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!("hexagon".parse::<PathKind>().is_err());
    }

    #[test]
    fn straight_ahead_gives_zero_omega() {
        let raw: Vec<[f64; 2]> = (0..100).map(|k| [k as f64 * 0.1, 0.0]).collect();
        let p = Path::from_polyline(&raw, false);
        let out = pure_pursuit((0.0, 0.0, 0.0), &p, &default_cfg());
        assert!(!out.finished);
        assert_eq!(out.command.angular, 0.0);
        assert_eq!(out.command.linear, 0.9);
    }

    #[test]
    fn curvature_matches_circle_through_lookahead_point() {
        // a lookahead point at body-frame (0, L) must command the curvature
        // of the circle through the origin tangent to the heading: 2/L
        let l = 0.6;
        let raw: Vec<[f64; 2]> = (0..200).map(|k| [0.0, -1.0 + k as f64 * 0.01]).collect();
        let p = Path::from_polyline(&raw, false);
        // pose at the path start (0, -1) heading +x: the path runs along +y,
        // so the lookahead lands at body (0, L)
        let cfg = PursuitConfig { lookahead: l, speed: 0.9, omega_clamp: 10.0 };
        let out = pure_pursuit((0.0, -1.0, 0.0), &p, &cfg);
        // independent geometric oracle: r = (x^2 + y^2) / (2 y) at (0, L)
        let kappa_geom = 2.0 * l / (l * l);
        let omega_expect = kappa_geom * 0.9;
        assert!(
            (out.command.angular - omega_expect).abs() < 1e-9,
            "{} vs {omega_expect}",
            out.command.angular
        );
    }

    #[test]
    fn mirrored_pose_negates_omega() {
        let raw: Vec<[f64; 2]> = (0..200).map(|k| [k as f64 * 0.05, 0.0]).collect();
        let p = Path::from_polyline(&raw, false);
        let cfg = default_cfg();
        let up = pure_pursuit((1.0, 0.3, 0.0), &p, &cfg);
        let down = pure_pursuit((1.0, -0.3, 0.0), &p, &cfg);
        assert!((up.command.angular + down.command.angular).abs() < 1e-12);
        assert_eq!(up.command.linear, down.command.linear);
    }

    #[test]
    fn open_path_completion_yields_zero_command() {
        let raw: Vec<[f64; 2]> = (0..20).map(|k| [k as f64 * 0.05, 0.0]).collect();
        let p = Path::from_polyline(&raw, false);
        let out = pure_pursuit((0.9, 0.0, 0.0), &p, &default_cfg());
        assert!(out.finished);
        assert_eq!(out.command, Command { linear: 0.0, angular: 0.0 });
    }

    #[test]
    fn metrics_zero_for_exact_replay() {
        let path = make_path(PathKind::Oblong, 1.0).unwrap();
        let speed = 0.9;
        let mut samples = Vec::new();
        let mut commands = Vec::new();
        for k in 0..500usize {
            let s = speed * (k + 1) as f64 * DT;
            let pos = path.point_at(s);
            samples.push(TrackSample { position: pos, forward_velocity: speed, yaw_rate: 0.3 });
            commands.push(Command { linear: speed, angular: 0.3 });
        }
        let (e_v, e_w, e_p) = metrics(&samples, &commands, &path, speed).unwrap();
        assert_eq!(e_v, 0.0);
        assert_eq!(e_w, 0.0);
        assert!(e_p < 1e-9);
    }

    #[test]
    fn metrics_constant_lag_on_straight() {
        let raw: Vec<[f64; 2]> = (0..2000).map(|k| [k as f64 * 0.05, 0.0]).collect();
        let path = Path::from_polyline(&raw, false);
        let speed = 1.0;
        let mut samples = Vec::new();
        let mut commands = Vec::new();
        for k in 0..300usize {
            let s = speed * (k + 1) as f64 * DT;
            samples.push(TrackSample {
                position: [s - 0.5, 0.0],
                forward_velocity: speed,
                yaw_rate: 0.0,
            });
            commands.push(Command { linear: speed, angular: 0.0 });
        }
        let (_, _, e_p) = metrics(&samples, &commands, &path, speed).unwrap();
        assert!((e_p - 0.5).abs() < 1e-9, "e_p = {e_p}");
    }

    #[test]
    fn metrics_rejects_length_mismatch() {
        let path = make_path(PathKind::Oblong, 1.0).unwrap();
        let s = vec![TrackSample { position: [0.0, 0.0], forward_velocity: 0.0, yaw_rate: 0.0 }];
        assert!(metrics(&s, &[], &path, 0.9).is_err());
    }

    #[test]
    fn unicycle_oracle_stays_within_a_lookahead_on_simple_paths() {
        for kind in [PathKind::Oblong, PathKind::Lemniscate, PathKind::UShape] {
            let path = make_path(kind, 1.0).unwrap();
            let cfg = PursuitConfig { lookahead: 0.6, speed: 0.9, omega_clamp: 6.0 };
            let (samples, commands) = unicycle_track(&path, &cfg, 30.0);
            let (_, _, e_p) = metrics(&samples, &commands, &path, 0.9).unwrap();
            assert!(e_p < 0.6, "{kind}: e_p = {e_p}");
        }
    }

    #[test]
    fn metrics_invariant_under_rigid_transform() {
        // transform path and trajectory together: errors unchanged
        let path = make_path(PathKind::Oblong, 1.0).unwrap();
        let cfg = PursuitConfig { lookahead: 0.6, speed: 0.9, omega_clamp: 6.0 };
        let (samples, commands) = unicycle_track(&path, &cfg, 10.0);
        let (ev0, ew0, ep0) = metrics(&samples, &commands, &path, 0.9).unwrap();

        let ang = 0.83f64;
        let (sn, cs) = ang.sin_cos();
        let shift = [4.2, -1.7];
        let xf = |p: [f64; 2]| [cs * p[0] - sn * p[1] + shift[0], sn * p[0] + cs * p[1] + shift[1]];
        let moved_pts: Vec<[f64; 2]> = path.points.iter().map(|&p| xf(p)).collect();
        let moved_path =
            Path { points: moved_pts, arc_length: path.arc_length.clone(), closed: path.closed };
        let moved_samples: Vec<TrackSample> = samples
            .iter()
            .map(|s| TrackSample { position: xf(s.position), ..*s })
            .collect();
        let (ev1, ew1, ep1) = metrics(&moved_samples, &commands, &moved_path, 0.9).unwrap();
        assert!((ev0 - ev1).abs() < 1e-12);
        assert!((ew0 - ew1).abs() < 1e-12);
        assert!((ep0 - ep1).abs() < 1e-9, "{ep0} vs {ep1}");
    }

    #[test]
    fn pursuit_output_is_continuous_along_a_pose_sweep() {
        let path = make_path(PathKind::Oblong, 1.0).unwrap();
        let cfg = default_cfg();
        let mut prev: Option<f64> = None;
        for k in 0..400 {
            let t = k as f64 / 400.0;
            let pose = (-2.4 + t * 0.5, -0.2 + 0.1 * t, -1.4);
            let out = pure_pursuit(pose, &path, &cfg);
            if let Some(p) = prev {
                assert!(
                    (out.command.angular - p).abs() < 0.15,
                    "jump at k={k}: {} -> {}",
                    p,
                    out.command.angular
                );
            }
            prev = Some(out.command.angular);
        }
    }
}
