//! Rigid-body SE(2) geometry: poses, robot shapes, rectangular obstacles,
//! exact pose collision checks and sampled segment checks.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight of the rotational term in the SE(2) metric, meters per radian.
pub const DEFAULT_ROT_WEIGHT: f64 = 25.0;
/// Default pose spacing for segment checks, meters (weighted metric).
pub const DEFAULT_STEP: f64 = 2.0;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = theta - two_pi * ((theta + PI) / two_pi).floor();
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w = -PI;
    }
    w
}

/// Shortest signed arc from `from` to `to`.
pub fn angle_diff(from: f64, to: f64) -> f64 {
    wrap_angle(to - from)
}

/// A robot pose: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Config {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Config {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn position_distance(&self, other: &Config) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }

    /// Weighted SE(2) distance: Euclidean position term plus
    /// `rot_weight · |Δθ|` over the shortest arc.
    pub fn distance(&self, other: &Config, rot_weight: f64) -> f64 {
        self.position_distance(other) + rot_weight * angle_diff(self.theta, other.theta).abs()
    }

    /// Linear interpolation in position, shortest arc in heading.
    pub fn interpolate(&self, other: &Config, s: f64) -> Config {
        Config {
            x: self.x + (other.x - self.x) * s,
            y: self.y + (other.y - self.y) * s,
            theta: wrap_angle(self.theta + angle_diff(self.theta, other.theta) * s),
        }
    }

    fn total_cmp(&self, other: &Config) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.theta.total_cmp(&other.theta))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

impl From<[f64; 3]> for Config {
    fn from(v: [f64; 3]) -> Self {
        Config::new(v[0], v[1], v[2])
    }
}

/// Convex polygon in the robot body frame, counterclockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::InvalidInput(format!("polygon needs >= 3 vertices, got {n}")));
        }
        if vertices.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::InvalidInput("non-finite polygon vertex".into()));
        }
        let mut area2 = 0.0;
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            area2 += a[0] * b[1] - b[0] * a[1];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross < -1e-12 {
                return Err(Error::InvalidInput("polygon is not convex counterclockwise".into()));
            }
        }
        if area2 <= 0.0 {
            return Err(Error::InvalidInput("polygon must be counterclockwise with positive area".into()));
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned rectangle `[x0,x1]×[y0,y1]` as a CCW polygon.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Outward offset of every edge by `delta`. The result contains the
    /// Minkowski sum of the polygon with a disk of radius `delta`.
    pub fn offset(&self, delta: f64) -> ConvexPolygon {
        let n = self.vertices.len();
        // Offset line i: normal_i · p = c_i
        let lines: Vec<([f64; 2], f64)> = (0..n)
            .map(|i| {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len = dx.hypot(dy);
                let nrm = [dy / len, -dx / len];
                (nrm, nrm[0] * a[0] + nrm[1] * a[1] + delta)
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (n1, c1) = lines[(i + n - 1) % n];
            let (n2, c2) = lines[i];
            let det = n1[0] * n2[1] - n1[1] * n2[0];
            if det.abs() < 1e-12 {
                // collinear consecutive edges: shift the shared vertex along the normal
                let v = self.vertices[i];
                out.push([v[0] + n2[0] * delta, v[1] + n2[1] * delta]);
            } else {
                out.push([(c1 * n2[1] - c2 * n1[1]) / det, (n1[0] * c2 - n2[0] * c1) / det]);
            }
        }
        ConvexPolygon { vertices: out }
    }
}

/// Union of convex polygons in the body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotShape {
    polygons: Vec<ConvexPolygon>,
    radius: f64,
}

impl RobotShape {
    pub fn new(polygons: Vec<ConvexPolygon>) -> Result<Self> {
        if polygons.is_empty() {
            return Err(Error::InvalidInput("robot shape needs at least one polygon".into()));
        }
        let radius = polygons
            .iter()
            .flat_map(|p| p.vertices.iter())
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max);
        Ok(Self { polygons, radius })
    }

    /// Rigid L-shaped robot: two 36 m × 10 m arms sharing a corner, with the
/// body origin at the center of its bounding square.
    pub fn l_shape() -> Self {
        Self::new(vec![
            ConvexPolygon::rectangle(-18.0, -18.0, 18.0, -8.0).unwrap(),
            ConvexPolygon::rectangle(-18.0, -8.0, -8.0, 18.0).unwrap(),
        ])
        .unwrap()
    }

    /// Axis-aligned rectangular robot centered on the body origin.
    pub fn rectangle(width: f64, height: f64) -> Result<Self> {
        Self::new(vec![ConvexPolygon::rectangle(
            -width / 2.0,
            -height / 2.0,
            width / 2.0,
            height / 2.0,
        )?])
    }

    pub fn polygons(&self) -> &[ConvexPolygon] {
        &self.polygons
    }

    /// Radius of the smallest origin-centered disk containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        self.radius
    }

    pub fn inflated(&self, delta: f64) -> RobotShape {
        RobotShape::new(self.polygons.iter().map(|p| p.offset(delta)).collect()).unwrap()
    }
}

/// Axis-aligned rectangular obstacle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Obstacle {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::InvalidInput(format!(
                "degenerate obstacle [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    fn distance_to_point(&self, x: f64, y: f64) -> f64 {
        let dx = (self.x_min - x).max(0.0).max(x - self.x_max);
        let dy = (self.y_min - y).max(0.0).max(y - self.y_max);
        dx.hypot(dy)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub width: f64,
    pub height: f64,
    pub obstacles: Vec<Obstacle>,
    pub start: Config,
    pub goal: Config,
}

impl Workspace {
    pub fn new(width: f64, height: f64, obstacles: Vec<Obstacle>, start: Config, goal: Config) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::InvalidInput("workspace dimensions must be positive".into()));
        }
        if !start.is_finite() || !goal.is_finite() {
            return Err(Error::InvalidInput("non-finite start or goal".into()));
        }
        Ok(Self { width, height, obstacles, start, goal })
    }

    /// Checks the start/goal invariant for a given robot.
    pub fn validate(&self, shape: &RobotShape) -> Result<()> {
        if config_in_collision(self, shape, &self.start) || config_in_collision(self, shape, &self.goal) {
            return Err(Error::InvalidStart);
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

const STACK_VERTS: usize = 16;

/// True iff any transformed robot polygon overlaps an obstacle or leaves the
/// workspace. Separating-axis test; touching boundaries do not collide.
pub fn config_in_collision(ws: &Workspace, shape: &RobotShape, c: &Config) -> bool {
    let r = shape.radius;
    let inside = c.x - r >= 0.0 && c.x + r <= ws.width && c.y - r >= 0.0 && c.y + r <= ws.height;
    if inside && ws.obstacles.iter().all(|o| o.distance_to_point(c.x, c.y) > r) {
        return false;
    }
    let (sin, cos) = c.theta.sin_cos();
    let mut stack = [[0.0f64; 2]; STACK_VERTS];
    let mut heap = Vec::new();
    for poly in &shape.polygons {
        let n = poly.vertices.len();
        let verts: &mut [[f64; 2]] = if n <= STACK_VERTS {
            &mut stack[..n]
        } else {
            heap.resize(n, [0.0; 2]);
            &mut heap[..]
        };
        for (dst, v) in verts.iter_mut().zip(&poly.vertices) {
            *dst = [c.x + cos * v[0] - sin * v[1], c.y + sin * v[0] + cos * v[1]];
        }
        if polygon_hits(verts, ws) {
            return true;
        }
    }
    false
}

fn polygon_hits(verts: &[[f64; 2]], ws: &Workspace) -> bool {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in verts {
        x0 = x0.min(v[0]);
        y0 = y0.min(v[1]);
        x1 = x1.max(v[0]);
        y1 = y1.max(v[1]);
    }
    if x0 < 0.0 || y0 < 0.0 || x1 > ws.width || y1 > ws.height {
        return true;
    }
    let n = verts.len();
    'obstacles: for o in &ws.obstacles {
        if x1 <= o.x_min || x0 >= o.x_max || y1 <= o.y_min || y0 >= o.y_max {
            continue;
        }
        let corners = [[o.x_min, o.y_min], [o.x_max, o.y_min], [o.x_max, o.y_max], [o.x_min, o.y_max]];
        for i in 0..n {
            let a = verts[i];
            let b = verts[(i + 1) % n];
            // outward normal of a CCW edge; the polygon lies on the non-positive side
            let (nx, ny) = (b[1] - a[1], a[0] - b[0]);
            let separated = corners
                .iter()
                .all(|p| nx * (p[0] - a[0]) + ny * (p[1] - a[1]) >= 0.0);
            if separated {
                continue 'obstacles;
            }
        }
        return true;
    }
    false
}

/// Sampled local planner in the weighted SE(2) metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPlanner {
    pub step: f64,
    pub rot_weight: f64,
}

impl Default for LocalPlanner {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            rot_weight: DEFAULT_ROT_WEIGHT,
        }
    }
}

impl LocalPlanner {
    pub fn new(step: f64, rot_weight: f64) -> Self {
        assert!(step > 0.0, "segment step must be positive");
        Self { step, rot_weight }
    }

    /// Endpoints in canonical order and the number of sub-segments. Ordering
    /// the endpoints makes the sampled poses independent of direction.
    fn samples(&self, a: &Config, b: &Config) -> (Config, Config, usize) {
        let (p, q) = if a.total_cmp(b) == Ordering::Greater { (*b, *a) } else { (*a, *b) };
        let d = p.distance(&q, self.rot_weight);
        let n = ((d / self.step).ceil() as usize).max(1);
        (p, q, n)
    }

    /// True iff every pose sampled at spacing `<= step` along the segment,
    /// both endpoints included, is collision-free.
    pub fn segment_valid(&self, ws: &Workspace, shape: &RobotShape, a: &Config, b: &Config) -> bool {
        let (p, q, n) = self.samples(a, b);
        (0..=n).all(|k| !config_in_collision(ws, shape, &p.interpolate(&q, k as f64 / n as f64)))
    }

    /// Margin that makes the sampled check cover the continuous sweep: no
    /// point of the robot moves farther than this between two samples' midpoint
    /// and the nearer sample.
    pub fn sweep_margin(&self, shape: &RobotShape) -> f64 {
        0.5 * self.step * (shape.bounding_radius() / self.rot_weight).max(1.0)
    }

    /// Sampled check of `shape` inflated by [`sweep_margin`](Self::sweep_margin).
    /// Passing implies the exact swept volume is free, so the segment also
    /// passes [`segment_valid`](Self::segment_valid) at any finer step.
    pub fn segment_swept_free(&self, ws: &Workspace, inflated: &RobotShape, a: &Config, b: &Config) -> bool {
        self.segment_valid(ws, inflated, a, b)
    }
}

/// [`LocalPlanner::segment_valid`] with the default rotation weight.
pub fn segment_valid(ws: &Workspace, shape: &RobotShape, a: &Config, b: &Config, step: f64) -> bool {
    LocalPlanner::new(step, DEFAULT_ROT_WEIGHT).segment_valid(ws, shape, a, b)
}

/// A collision-free pose sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    waypoints: Vec<Config>,
}

impl Path {
    /// Validates every consecutive segment with `local`.
    pub fn new(ws: &Workspace, shape: &RobotShape, waypoints: Vec<Config>, local: &LocalPlanner) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::InvalidInput("path needs at least one waypoint".into()));
        }
        if waypoints.len() == 1 && config_in_collision(ws, shape, &waypoints[0]) {
            return Err(Error::InvalidInput("single waypoint is in collision".into()));
        }
        if let Some(i) = waypoints
            .windows(2)
            .position(|w| !local.segment_valid(ws, shape, &w[0], &w[1]))
        {
            return Err(Error::InvalidInput(format!("segment {i} is not collision-free")));
        }
        Ok(Self { waypoints })
    }

    /// For planner output whose edges were already validated.
    pub(crate) fn from_validated(waypoints: Vec<Config>) -> Self {
        debug_assert!(!waypoints.is_empty());
        Self { waypoints }
    }

    pub fn waypoints(&self) -> &[Config] {
        &self.waypoints
    }

    pub fn length(&self, rot_weight: f64) -> f64 {
        path_length(self, rot_weight)
    }
}

/// Sum of weighted SE(2) distances between consecutive waypoints.
pub fn path_length(p: &Path, rot_weight: f64) -> f64 {
    p.waypoints
        .windows(2)
        .fold(0.0, |acc, w| acc + w[0].distance(&w[1], rot_weight))
}

/// On-disk workspace document: the workspace plus the robot bound to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkspaceDoc {
    pub width: f64,
    pub height: f64,
    pub obstacles: Vec<[f64; 4]>,
    pub start: [f64; 3],
    pub goal: [f64; 3],
    pub robot: Vec<Vec<[f64; 2]>>,
}

impl WorkspaceDoc {
    pub fn from_parts(ws: &Workspace, shape: &RobotShape) -> Self {
        Self {
            width: ws.width,
            height: ws.height,
            obstacles: ws.obstacles.iter().map(|o| o.to_array()).collect(),
            start: ws.start.to_array(),
            goal: ws.goal.to_array(),
            robot: shape.polygons.iter().map(|p| p.vertices.clone()).collect(),
        }
    }

    pub fn into_parts(self) -> Result<(Workspace, RobotShape)> {
        let obstacles = self
            .obstacles
            .iter()
            .map(|o| Obstacle::new(o[0], o[1], o[2], o[3]))
            .collect::<Result<Vec<_>>>()?;
        let ws = Workspace::new(self.width, self.height, obstacles, self.start.into(), self.goal.into())?;
        let shape = RobotShape::new(self.robot.into_iter().map(ConvexPolygon::new).collect::<Result<_>>()?)?;
        ws.validate(&shape)?;
        Ok((ws, shape))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workspace serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty(w: f64, h: f64) -> Workspace {
        Workspace::new(w, h, vec![], Config::new(1.0, 1.0, 0.0), Config::new(w - 1.0, h - 1.0, 0.0)).unwrap()
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for k in -20..20 {
            let w = wrap_angle(0.37 * k as f64);
            assert!((-PI..PI).contains(&w));
        }
    }

    #[test]
    fn square_robot_in_empty_workspace() {
        let ws = empty(10.0, 10.0);
        let sq = RobotShape::rectangle(1.0, 1.0).unwrap();
        for &(x, y, t) in &[(5.0, 5.0, 0.0), (2.0, 7.0, 1.0), (0.8, 0.8, 0.3)] {
            assert!(!config_in_collision(&ws, &sq, &Config::new(x, y, t)));
        }
        // leaves the workspace
        assert!(config_in_collision(&ws, &sq, &Config::new(0.2, 5.0, 0.0)));
    }

    #[test]
    fn robot_inside_obstacle_collides() {
        let mut ws = empty(10.0, 10.0);
        ws.obstacles.push(Obstacle::new(3.0, 3.0, 7.0, 7.0).unwrap());
        let sq = RobotShape::rectangle(1.0, 1.0).unwrap();
        assert!(config_in_collision(&ws, &sq, &Config::new(5.0, 5.0, 0.4)));
    }

    #[test]
    fn touching_is_not_collision() {
        let mut ws = empty(10.0, 10.0);
        ws.obstacles.push(Obstacle::new(5.5, 0.0, 6.0, 10.0).unwrap());
        let sq = RobotShape::rectangle(1.0, 1.0).unwrap();
        assert!(!config_in_collision(&ws, &sq, &Config::new(5.0, 5.0, 0.0)));
        assert!(config_in_collision(&ws, &sq, &Config::new(5.001, 5.0, 0.0)));
    }

    #[test]
    fn path_length_examples() {
        let p = Path::from_validated(vec![Config::new(0.0, 0.0, 0.0), Config::new(3.0, 4.0, 0.0)]);
        assert_eq!(path_length(&p, 0.0), 5.0);
        let single = Path::from_validated(vec![Config::new(1.0, 2.0, 0.5)]);
        assert_eq!(path_length(&single, 25.0), 0.0);
        let rot = Path::from_validated(vec![Config::new(0.0, 0.0, 0.0), Config::new(0.0, 0.0, PI / 2.0)]);
        assert!((path_length(&rot, 2.0) - PI).abs() < 1e-12);
    }

    #[test]
    fn segment_examples() {
        let ws = empty(20.0, 10.0);
        let sq = RobotShape::rectangle(1.0, 1.0).unwrap();
        let a = Config::new(2.0, 5.0, 0.0);
        assert!(segment_valid(&ws, &sq, &a, &a, 0.5));
        let mut walled = ws.clone();
        walled.obstacles.push(Obstacle::new(9.0, 0.0, 11.0, 10.0).unwrap());
        let b = Config::new(18.0, 5.0, 0.0);
        assert!(!segment_valid(&walled, &sq, &a, &b, 0.5));
        assert!(segment_valid(&ws, &sq, &a, &b, 0.5));
    }

    #[test]
    fn path_constructor_rejects_invalid_segments() {
        let mut ws = empty(20.0, 10.0);
        ws.obstacles.push(Obstacle::new(9.0, 0.0, 11.0, 10.0).unwrap());
        let sq = RobotShape::rectangle(1.0, 1.0).unwrap();
        let lp = LocalPlanner::new(0.5, 1.0);
        let wps = vec![Config::new(2.0, 5.0, 0.0), Config::new(5.0, 5.0, 0.0), Config::new(18.0, 5.0, 0.0)];
        assert!(Path::new(&ws, &sq, wps[..2].to_vec(), &lp).is_ok());
        assert!(Path::new(&ws, &sq, wps, &lp).is_err());
    }

    #[test]
    fn offset_contains_original() {
        let p = ConvexPolygon::rectangle(0.0, 0.0, 2.0, 1.0).unwrap();
        let o = p.offset(0.5);
        assert_eq!(o.vertices()[0], [-0.5, -0.5]);
        assert_eq!(o.vertices()[2], [2.5, 1.5]);
        let tri = ConvexPolygon::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(ConvexPolygon::new(tri.offset(0.1).vertices().to_vec()).is_ok());
    }

    #[test]
    fn rejects_bad_polygons() {
        assert!(ConvexPolygon::new(vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
        // clockwise
        assert!(ConvexPolygon::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).is_err());
        // non-convex
        assert!(ConvexPolygon::new(vec![[0.0, 0.0], [2.0, 0.0], [1.0, 0.5], [2.0, 2.0], [0.0, 2.0]]).is_err());
    }

    #[test]
    fn workspace_doc_round_trip() {
        let mut ws = empty(500.0, 500.0);
        ws.start = Config::new(100.0, 250.0, 0.0);
        ws.goal = Config::new(400.0, 250.0, 1.0);
        ws.obstacles.push(Obstacle::new(240.0, 0.0, 260.0, 200.0).unwrap());
        let shape = RobotShape::l_shape();
        let doc = WorkspaceDoc::from_parts(&ws, &shape);
        let (ws2, shape2) = WorkspaceDoc::from_json(&doc.to_json()).unwrap().into_parts().unwrap();
        assert_eq!(ws, ws2);
        assert_eq!(shape, shape2);
    }
}
