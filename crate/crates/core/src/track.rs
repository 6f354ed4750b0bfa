//! Closed racing track: centerline geometry, projection and speed profile.

use crate::error::{Error, Result};
use crate::geometry::{closest_on_segment, signed_offset, Vec2};
use crate::spatial::GridIndex;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Speed-profile constants for the curvature-limited target speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedLimits {
    pub v_max: f64,
    pub a_lat_max: f64,
}

impl Default for SpeedLimits {
    fn default() -> Self {
        Self {
            v_max: 30.0,
            a_lat_max: 6.0,
        }
    }
}

/// On-disk track description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackFile {
    pub centerline: Vec<Vec2>,
    pub half_width: f64,
    #[serde(default)]
    pub start_index: usize,
}

/// Result of projecting a point onto the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arclength of the foot point, in [0, L).
    pub progress: f64,
    /// Signed perpendicular distance, positive to the left of travel.
    pub lateral: f64,
    /// Index of the centerline segment holding the foot point.
    pub segment: usize,
}

#[derive(Debug, Clone)]
pub struct Track {
    points: Vec<Vec2>,
    half_width: f64,
    start_index: usize,
    /// Arclength of each vertex measured from the start vertex.
    arclength: Vec<f64>,
    length: f64,
    curvature: Vec<f64>,
    target_speed: Vec<f64>,
    grid: GridIndex,
}

impl Track {
    pub fn new(file: TrackFile) -> Result<Self> {
        Self::with_limits(file, SpeedLimits::default())
    }

    pub fn with_limits(file: TrackFile, limits: SpeedLimits) -> Result<Self> {
        let TrackFile {
            mut centerline,
            half_width,
            start_index,
        } = file;
        if centerline.len() >= 2 && centerline.first() == centerline.last() {
            centerline.pop();
        }
        if centerline.len() < 3 {
            return Err(Error::invalid("track centerline needs at least 3 distinct points"));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::invalid("track half_width must be positive"));
        }
        if start_index >= centerline.len() {
            return Err(Error::invalid(format!(
                "start_index {start_index} out of range for {} points",
                centerline.len()
            )));
        }
        if centerline.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("track centerline contains non-finite coordinates"));
        }
        let n = centerline.len();
        // Rotate so the start vertex is index 0; arclength is then measured from the start line.
        centerline.rotate_left(start_index);
        for i in 0..n {
            if centerline[i] == centerline[(i + 1) % n] {
                return Err(Error::invalid(format!("consecutive centerline points {i} coincide")));
            }
        }
        let mut arclength = Vec::with_capacity(n);
        let mut acc = 0.0;
        for i in 0..n {
            arclength.push(acc);
            acc += centerline[i].dist(centerline[(i + 1) % n]);
        }
        let length = acc;
        let curvature: Vec<f64> = (0..n)
            .map(|i| menger_curvature(centerline[(i + n - 1) % n], centerline[i], centerline[(i + 1) % n]))
            .collect();
        let target_speed = curvature
            .iter()
            .map(|k| {
                let k = k.abs();
                if k < 1e-9 {
                    limits.v_max
                } else {
                    limits.v_max.min((limits.a_lat_max / k).sqrt())
                }
            })
            .collect();
        let mut grid = GridIndex::new(10.0);
        for i in 0..n {
            grid.insert_segment(i, centerline[i], centerline[(i + 1) % n]);
        }
        Ok(Self {
            points: centerline,
            half_width,
            start_index: 0,
            arclength,
            length,
            curvature,
            target_speed,
            grid,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TrackFile = crate::io::read_json(path)?;
        Self::new(file)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: TrackFile = serde_json::from_str(s).map_err(|e| Error::invalid(format!("track json: {e}")))?;
        Self::new(file)
    }

    pub fn to_file(&self) -> TrackFile {
        TrackFile {
            centerline: self.points.clone(),
            half_width: self.half_width,
            start_index: self.start_index,
        }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn arclength(&self, i: usize) -> f64 {
        self.arclength[i]
    }

    pub fn curvature_at_vertex(&self, i: usize) -> f64 {
        self.curvature[i]
    }

    pub fn target_speed_profile(&self) -> &[f64] {
        &self.target_speed
    }

    /// Start line position and travel direction.
    pub fn start_pose(&self) -> (Vec2, f64) {
        (self.points[0], (self.points[1] - self.points[0]).angle())
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = self.wrap(s);
        let i = match self.arclength.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let seg_len = self.points[i].dist(self.points[(i + 1) % self.len()]);
        (i, ((s - self.arclength[i]) / seg_len).clamp(0.0, 1.0))
    }

    pub fn wrap(&self, s: f64) -> f64 {
        let w = s.rem_euclid(self.length);
        if w >= self.length {
            0.0
        } else {
            w
        }
    }

    /// Point on the centerline at arclength `s`.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, t) = self.segment_at(s);
        self.points[i].lerp(self.points[(i + 1) % self.len()], t)
    }

    /// Travel direction of the centerline at arclength `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let (i, _) = self.segment_at(s);
        (self.points[(i + 1) % self.len()] - self.points[i]).angle()
    }

    /// Signed curvature at arclength `s`, interpolated between vertices.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, t) = self.segment_at(s);
        let j = (i + 1) % self.len();
        self.curvature[i] * (1.0 - t) + self.curvature[j] * t
    }

    /// Curvature-limited target speed at arclength `s`.
    pub fn target_speed_at(&self, s: f64) -> f64 {
        let (i, t) = self.segment_at(s);
        let j = (i + 1) % self.len();
        self.target_speed[i] * (1.0 - t) + self.target_speed[j] * t
    }

    /// Nearest centerline foot point of `p`.
    pub fn project(&self, p: Vec2) -> Projection {
        let n = self.len();
        let mut best = (f64::INFINITY, 0usize, Vec2::default(), 0.0);
        self.grid.search(p, |i| {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            let (q, t) = closest_on_segment(p, a, b);
            let d = p.dist_sq(q);
            if d < best.0 || (d == best.0 && i < best.1) {
                best = (d, i, q, t);
            }
            Some(best.0.sqrt())
        });
        self.projection_from(p, best.1, best.3)
    }

    /// Exhaustive projection over every segment, used to check the grid.
    pub fn project_brute(&self, p: Vec2) -> Projection {
        let n = self.len();
        let mut best = (f64::INFINITY, 0usize, 0.0);
        for i in 0..n {
            let (q, t) = closest_on_segment(p, self.points[i], self.points[(i + 1) % n]);
            let d = p.dist_sq(q);
            if d < best.0 {
                best = (d, i, t);
            }
        }
        self.projection_from(p, best.1, best.2)
    }

    fn projection_from(&self, p: Vec2, i: usize, t: f64) -> Projection {
        let n = self.len();
        let a = self.points[i];
        let b = self.points[(i + 1) % n];
        let seg_len = a.dist(b);
        let progress = self.wrap(self.arclength[i] + t * seg_len);
        let foot = a.lerp(b, t);
        let dir = b - a;
        let lateral = if p.dist_sq(foot) == 0.0 {
            0.0
        } else {
            signed_offset(p, a, dir)
        };
        Projection {
            progress,
            lateral,
            segment: i,
        }
    }

    pub fn is_off_track(&self, lateral: f64) -> bool {
        lateral.abs() > self.half_width
    }

    /// Progress difference `to - from` taken the short way around the loop.
    pub fn progress_delta(&self, from: f64, to: f64) -> f64 {
        let mut d = to - from;
        let l = self.length;
        if d < -0.5 * l {
            d += l;
        } else if d > 0.5 * l {
            d -= l;
        }
        d
    }

    /// Resamples the centerline at fixed arclength spacing.
    pub fn dense_points(&self, spacing: f64) -> Vec<(f64, Vec2)> {
        let k = (self.length / spacing).ceil() as usize;
        (0..k)
            .map(|j| {
                let s = j as f64 * self.length / k as f64;
                (s, self.point_at(s))
            })
            .collect()
    }
}

fn menger_curvature(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let ab = b - a;
    let bc = c - b;
    let ac = c - a;
    let denom = ab.norm() * bc.norm() * ac.norm();
    if denom == 0.0 {
        return 0.0;
    }
    2.0 * ab.cross(bc) / denom
}

/// A piece of a track recipe, traversed in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecipeSegment {
    /// Straight of given length. `free` straights have their length solved
    /// so the loop closes; exactly two must be free.
    Straight {
        #[serde(default)]
        length: f64,
        #[serde(default)]
        free: bool,
    },
    /// Circular arc; positive `angle_deg` turns left.
    Arc { radius: f64, angle_deg: f64 },
}

/// Parametric description of a closed track built from straights and arcs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRecipe {
    pub half_width: f64,
    pub spacing: f64,
    pub segments: Vec<RecipeSegment>,
}

impl TrackRecipe {
    pub fn default_recipe() -> Self {
        serde_json::from_str(include_str!("../data/default_track_recipe.json"))
            .expect("bundled track recipe parses")
    }

    /// Builds the centerline, solving the two free straights for closure.
    pub fn build(&self) -> Result<TrackFile> {
        if !(self.spacing > 0.0) {
            return Err(Error::invalid("recipe spacing must be positive"));
        }
        let total_turn: f64 = self
            .segments
            .iter()
            .map(|s| match s {
                RecipeSegment::Arc { angle_deg, .. } => angle_deg.to_radians(),
                _ => 0.0,
            })
            .sum();
        if (total_turn.abs() - 2.0 * PI).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "recipe turns through {:.3} deg; a simple loop needs +-360",
                total_turn.to_degrees()
            )));
        }
        // Walk once with free straights at zero length to find the closure gap.
        let mut heading = 0.0f64;
        let mut pos = Vec2::default();
        let mut free_dirs = Vec::new();
        for (idx, seg) in self.segments.iter().enumerate() {
            match *seg {
                RecipeSegment::Straight { length, free } => {
                    if free {
                        free_dirs.push((idx, Vec2::from_angle(heading)));
                    } else {
                        pos = pos + Vec2::from_angle(heading) * length;
                    }
                }
                RecipeSegment::Arc { radius, angle_deg } => {
                    let (p, h) = arc_end(pos, heading, radius, angle_deg.to_radians());
                    pos = p;
                    heading = h;
                }
            }
        }
        if free_dirs.len() != 2 {
            return Err(Error::invalid("recipe must mark exactly two straights as free"));
        }
        let (u, v) = (free_dirs[0].1, free_dirs[1].1);
        let det = u.cross(v);
        if det.abs() < 1e-9 {
            return Err(Error::invalid("free straights must not be parallel"));
        }
        // Solve l1*u + l2*v = -pos.
        let rhs = pos * -1.0;
        let l1 = rhs.cross(v) / det;
        let l2 = u.cross(rhs) / det;
        if l1 <= 0.0 || l2 <= 0.0 {
            return Err(Error::invalid(format!(
                "recipe cannot close with positive straights (solved {l1:.2}, {l2:.2})"
            )));
        }
        let lengths = [(free_dirs[0].0, l1), (free_dirs[1].0, l2)];

        let mut pts = vec![Vec2::default()];
        let mut heading = 0.0f64;
        let mut pos = Vec2::default();
        for (idx, seg) in self.segments.iter().enumerate() {
            match *seg {
                RecipeSegment::Straight { length, free } => {
                    let len = if free {
                        lengths.iter().find(|(i, _)| *i == idx).map(|x| x.1).unwrap_or(0.0)
                    } else {
                        length
                    };
                    let k = (len / self.spacing).ceil().max(1.0) as usize;
                    let dir = Vec2::from_angle(heading);
                    for j in 1..=k {
                        pts.push(pos + dir * (len * j as f64 / k as f64));
                    }
                    pos = pos + dir * len;
                }
                RecipeSegment::Arc { radius, angle_deg } => {
                    let theta = angle_deg.to_radians();
                    let k = ((radius * theta.abs()) / self.spacing).ceil().max(1.0) as usize;
                    for j in 1..=k {
                        let (p, _) = arc_end(pos, heading, radius, theta * j as f64 / k as f64);
                        pts.push(p);
                    }
                    let (p, h) = arc_end(pos, heading, radius, theta);
                    pos = p;
                    heading = h;
                }
            }
        }
        // The walk ends on the start point; drop the duplicate.
        if let Some(last) = pts.last() {
            if last.dist(pts[0]) < 1e-6 {
                pts.pop();
            }
        }
        // Snap near-zero coordinates produced by trig round-off.
        for p in &mut pts {
            p.x = round_mm(p.x);
            p.y = round_mm(p.y);
        }
        Ok(TrackFile {
            centerline: pts,
            half_width: self.half_width,
            start_index: 0,
        })
    }
}

fn round_mm(x: f64) -> f64 {
    let r = (x * 1000.0).round() / 1000.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn arc_end(pos: Vec2, heading: f64, radius: f64, theta: f64) -> (Vec2, f64) {
    let side = if theta >= 0.0 { 1.0 } else { -1.0 };
    let normal = Vec2::from_angle(heading + side * PI / 2.0);
    let center = pos + normal * radius;
    let start_angle = (pos - center).angle();
    let end = center + Vec2::from_angle(start_angle + theta) * radius;
    (end, heading + theta)
}

/// The bundled default track.
pub fn default_track() -> Track {
    Track::from_json_str(include_str!("../data/default_track.json")).expect("bundled track is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square() -> Track {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(Vec2::new(i as f64 * 10.0, 0.0));
        }
        for i in 0..10 {
            pts.push(Vec2::new(100.0, i as f64 * 10.0));
        }
        for i in 0..10 {
            pts.push(Vec2::new(100.0 - i as f64 * 10.0, 100.0));
        }
        for i in 0..10 {
            pts.push(Vec2::new(0.0, 100.0 - i as f64 * 10.0));
        }
        Track::new(TrackFile {
            centerline: pts,
            half_width: 4.0,
            start_index: 0,
        })
        .unwrap()
    }

    #[test]
    fn rejects_bad_tracks() {
        let bad = TrackFile {
            centerline: vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)],
            half_width: 4.0,
            start_index: 0,
        };
        assert!(Track::new(bad).is_err());
        let dup = TrackFile {
            centerline: vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)],
            half_width: 4.0,
            start_index: 0,
        };
        assert!(Track::new(dup).is_err());
        let mut ok = square().to_file();
        ok.half_width = 0.0;
        assert!(Track::new(ok).is_err());
    }

    #[test]
    fn closed_duplicate_endpoint_is_accepted() {
        let mut f = square().to_file();
        f.centerline.push(f.centerline[0]);
        let t = Track::new(f).unwrap();
        assert_eq!(t.len(), 40);
        assert!((t.length() - 400.0).abs() < 1e-9);
    }

    #[test]
    fn projection_on_vertex_is_exact() {
        let t = square();
        for i in 0..t.len() {
            let p = t.project(t.points()[i]);
            assert!(p.lateral.abs() < 1e-12);
            assert!((p.progress - t.arclength(i)).abs() < 1e-9 || (p.progress - t.arclength(i)).abs() > 399.0);
        }
    }

    #[test]
    fn offset_beyond_half_width_is_off_track() {
        let t = square();
        // Left of travel on the bottom straight is +y (inside the loop).
        let p = t.project(Vec2::new(35.0, 5.0));
        assert!(p.lateral > 4.0 && t.is_off_track(p.lateral));
        let p = t.project(Vec2::new(35.0, -3.0));
        assert!(!t.is_off_track(p.lateral));
        assert!((p.lateral + 3.0).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_dense_brute_force() {
        let track = default_track();
        let dense = track.dense_points(0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let s = rng.random_range(0.0..track.length());
            let off = rng.random_range(-6.0..6.0);
            let base = track.point_at(s);
            let h = track.heading_at(s);
            let p = base + Vec2::from_angle(h + PI / 2.0) * off;
            let proj = track.project(p);
            let (s_dense, _) = dense
                .iter()
                .min_by(|a, b| p.dist_sq(a.1).total_cmp(&p.dist_sq(b.1)))
                .copied()
                .unwrap();
            let gap = track.progress_delta(s_dense, proj.progress).abs();
            // One resample step, plus the spread of equidistant candidates at
            // inside corners.
            assert!(gap <= 0.25 + 1e-6 || proj.lateral.abs() > 3.0, "gap {gap} at s={s} off={off}");
            assert_eq!(proj, track.project_brute(p));
        }
    }

    #[test]
    fn default_recipe_rebuilds_bundled_track() {
        let built = TrackRecipe::default_recipe().build().unwrap();
        let bundled: TrackFile = serde_json::from_str(include_str!("../data/default_track.json")).unwrap();
        assert_eq!(built.centerline, bundled.centerline);
        let t = Track::new(built).unwrap();
        assert!((1100.0..1300.0).contains(&t.length()), "length {}", t.length());
        assert!(t.target_speed_profile().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn default_track_has_straight_sweeper_and_hairpin() {
        let t = default_track();
        let kmax = (0..t.len()).map(|i| t.curvature_at_vertex(i).abs()).fold(0.0, f64::max);
        assert!(kmax > 1.0 / 20.0, "needs a hairpin");
        let straight = (0..t.len()).filter(|&i| t.curvature_at_vertex(i).abs() < 1e-6).count();
        assert!(straight > t.len() / 3);
        let sweep = (0..t.len())
            .filter(|&i| (1.0 / 100.0..1.0 / 40.0).contains(&t.curvature_at_vertex(i).abs()))
            .count();
        assert!(sweep > 20);
    }
}
