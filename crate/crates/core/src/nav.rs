//! Anticipatory navigation: virtual person point clouds, the layered cost
//! map, a simulated 2D lidar, 8-connected A* and a path follower.

use crate::error::{Error, Result};
use crate::fusion::PersonFeedback;
use crate::geometry::grid::first_blocked;
use crate::geometry::{angle_diff, cost, Cell, Grid2, Point2, Pose2, Velocity2};
use crate::model::{PERSON_RADIUS, ROBOT_RADIUS};
use crate::world::WorldState;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnticipationParams {
    pub t_pred: f64,
    pub t_step: f64,
    pub inflation_radius: f64,
    pub person_range: f64,
    pub min_keypoints: usize,
}

impl Default for AnticipationParams {
    fn default() -> Self {
        Self {
            t_pred: 2.0,
            t_step: 0.5,
            inflation_radius: 0.35,
            person_range: 6.0,
            min_keypoints: 5,
        }
    }
}

impl AnticipationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_step > 0.0 && self.t_step <= self.t_pred) {
            return Err(Error::InvalidScenario("anticipation: need 0 < t_step <= t_pred".into()));
        }
        if self.inflation_radius < ROBOT_RADIUS {
            return Err(Error::InvalidScenario("anticipation: inflation below robot radius".into()));
        }
        if !(self.person_range > 0.0) {
            return Err(Error::InvalidScenario("anticipation: person_range must be positive".into()));
        }
        Ok(())
    }

    /// Extrapolation offsets `0, t_step, …, t_pred`.
    pub fn horizons(&self) -> Vec<f64> {
        let n = (self.t_pred / self.t_step + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 * self.t_step).collect()
    }
}

/// Keeps persons close enough to the robot with enough keypoints.
pub fn filter_outlier(persons: &[PersonFeedback], robot: &Pose2, params: &AnticipationParams) -> Vec<PersonFeedback> {
    persons
        .iter()
        .filter(|p| p.root.distance(robot.position()) <= params.person_range && p.keypoints.len() >= params.min_keypoints)
        .cloned()
        .collect()
}

fn point_key(p: Point2) -> (u64, u64) {
    // adding +0.0 maps -0.0 onto +0.0
    ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits())
}

/// Virtual point cloud in the robot frame: every keypoint of every person,
/// replicated along the person's velocity at each prediction horizon.
/// Bit-identical points are kept once, in first-seen order.
pub fn build_virtual_cloud(persons: &[PersonFeedback], robot: &Pose2, params: &AnticipationParams) -> Vec<Point2> {
    let horizons = params.horizons();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for p in persons {
        let v_local = p.velocity.rotate(-robot.theta);
        let kp_local: Vec<Point2> = p.keypoints.iter().map(|k| robot.transform_to(*k)).collect();
        for dt in &horizons {
            for k in &kp_local {
                let q = *k + v_local.scale(*dt);
                if seen.insert(point_key(q)) {
                    out.push(q);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRay {
    /// Bearing in the robot frame.
    pub angle: f64,
    pub range: f64,
    pub hit: bool,
    /// Person the ray stopped on, if any.
    #[serde(default)]
    pub person: Option<u32>,
}

impl ScanRay {
    pub fn endpoint(&self) -> Point2 {
        Point2::new(self.angle.cos(), self.angle.sin()).scale(self.range)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarParams {
    pub rays: usize,
    pub fov: f64,
    pub max_range: f64,
}

impl Default for LidarParams {
    fn default() -> Self {
        Self {
            rays: 440,
            fov: 220f64.to_radians(),
            max_range: 5.6,
        }
    }
}

fn ray_circle(origin: Point2, dir: Point2, center: Point2, r: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.dot(oc) - r * r;
    if c <= 0.0 {
        // origin inside the body: ignore it
        return None;
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

/// Planar lidar on the robot: static map via DDA, persons as discs and
/// loose furniture as polygons. The attached object is not seen.
pub fn simulate_lidar(world: &WorldState, robot: &Pose2, params: &LidarParams) -> Vec<ScanRay> {
    let attached = world.robot.attached.map(|a| a.object_id);
    let origin = robot.position();
    let polys: Vec<_> = world
        .objects
        .iter()
        .filter(|o| Some(o.id) != attached)
        .map(|o| o.world_footprint())
        .filter(|p| !p.contains(origin))
        .collect();
    let n = params.rays.max(2);
    (0..n)
        .map(|k| {
            let angle = -params.fov / 2.0 + params.fov * k as f64 / (n - 1) as f64;
            let dir = Point2::new((robot.theta + angle).cos(), (robot.theta + angle).sin());
            let end = origin + dir.scale(params.max_range);
            let mut range = params.max_range;
            let mut hit = false;
            let mut person = None;
            if let Some((_, t)) = first_blocked(&world.static_map, origin, end, cost::LETHAL) {
                range = t * params.max_range;
                hit = true;
            }
            for h in &world.humans {
                if let Some(t) = ray_circle(origin, dir, h.root, PERSON_RADIUS) {
                    if t < range {
                        range = t;
                        hit = true;
                        person = Some(h.id);
                    }
                }
            }
            for p in &polys {
                if let Some(t) = p.ray_intersection(origin, dir) {
                    if t < range {
                        range = t;
                        hit = true;
                        person = None;
                    }
                }
            }
            ScanRay { angle, range, hit, person }
        })
        .collect()
}

/// Layered world-frame cost map.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub static_layer: Grid2,
    pub onboard: Grid2,
    pub virtual_layer: Grid2,
    pub combined: Grid2,
    pub inflation_radius: f64,
}

impl CostMap {
    /// Builds the static layer by inflating every lethal map cell.
    pub fn new(static_map: &Grid2, inflation_radius: f64) -> Self {
        let static_layer = static_map.inflated(cost::LETHAL, inflation_radius);
        let empty = static_map.like(cost::FREE);
        Self {
            combined: static_layer.clone(),
            static_layer,
            onboard: empty.clone(),
            virtual_layer: empty,
            inflation_radius,
        }
    }

    fn recombine(&mut self) -> bool {
        let mut changed = false;
        let c = self.combined.cells_mut();
        let (s, o, v) = (self.static_layer.cells(), self.onboard.cells(), self.virtual_layer.cells());
        for i in 0..c.len() {
            let m = s[i].max(o[i]).max(v[i]);
            if c[i] != m {
                c[i] = m;
                changed = true;
            }
        }
        changed
    }
}

/// Rebuilds the onboard layer from the scan and the virtual layer from the
/// cloud (both given in the robot frame), then recombines. Returns whether
/// the combined layer changed.
pub fn update_costmap(map: &mut CostMap, robot: &Pose2, scan: Option<&[ScanRay]>, cloud: Option<&[Point2]>) -> bool {
    let r = map.inflation_radius;
    if let Some(scan) = scan {
        map.onboard.cells_mut().fill(cost::FREE);
        for ray in scan.iter().filter(|r| r.hit) {
            let p = robot.transform_from(ray.endpoint());
            map.onboard.stamp_disk(p, r, cost::INSCRIBED);
            if let Some(c) = map.onboard.world_to_cell(p) {
                let _ = map.onboard.set(c, cost::LETHAL);
            }
        }
    }
    if let Some(cloud) = cloud {
        map.virtual_layer.cells_mut().fill(cost::FREE);
        for p in cloud {
            map.virtual_layer.stamp_disk(robot.transform_from(*p), r, cost::LETHAL);
        }
    }
    map.recombine()
}

/// Weight of cell cost relative to metric step length.
pub const CELL_COST_WEIGHT: f64 = 0.02;
/// Search radius for substituting a blocked goal.
pub const GOAL_SUBSTITUTE_RADIUS: f64 = 0.5;

const NEIGHBOURS: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPath {
    pub waypoints: Vec<Point2>,
    pub cost: f64,
    /// Goal actually planned to (differs when the requested goal was blocked).
    pub goal: Point2,
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    idx: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then(other.g.total_cmp(&self.g).reverse()).then(other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Nearest traversable cell centre within `radius` of `p`.
pub fn nearest_free(grid: &Grid2, p: Point2, radius: f64) -> Option<Cell> {
    let c = grid.world_to_cell(p)?;
    let reach = (radius / grid.resolution()).ceil() as i64 + 1;
    let mut best: Option<(f64, Cell)> = None;
    for dj in -reach..=reach {
        for di in -reach..=reach {
            let (i, j) = (c.i as i64 + di, c.j as i64 + dj);
            if i < 0 || j < 0 || i >= grid.width() as i64 || j >= grid.height() as i64 {
                continue;
            }
            let cell = Cell::new(i as usize, j as usize);
            if !cost::traversable(grid.get(cell).unwrap_or(cost::UNKNOWN)) {
                continue;
            }
            let d = grid.cell_center(cell).distance(p);
            if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, cell));
            }
        }
    }
    best.map(|b| b.1)
}

/// Step cost from a cell into its neighbour `next`.
pub fn step_cost(grid: &Grid2, di: i64, dj: i64, next: Cell) -> f64 {
    let len = if di != 0 && dj != 0 { std::f64::consts::SQRT_2 } else { 1.0 } * grid.resolution();
    len + CELL_COST_WEIGHT * grid.get(next).unwrap_or(cost::UNKNOWN) as f64
}

/// 8-connected A* over `grid`. Cells with value ≥ inscribed are blocked.
pub fn plan_path(grid: &Grid2, start: Point2, goal: Point2) -> Result<PlannedPath> {
    let s = grid.world_to_cell(start).ok_or(Error::StartBlocked)?;
    if !cost::traversable(grid.get(s).unwrap_or(cost::UNKNOWN)) {
        return Err(Error::StartBlocked);
    }
    let gc = match grid.world_to_cell(goal) {
        Some(c) if cost::traversable(grid.get(c).unwrap_or(cost::UNKNOWN)) => c,
        _ => nearest_free(grid, goal, GOAL_SUBSTITUTE_RADIUS).ok_or(Error::GoalUnreachable)?,
    };
    let substituted = grid.world_to_cell(goal) != Some(gc);
    let res = grid.resolution();
    let w = grid.width();
    let h = |c: Cell| {
        let dx = (c.i as f64 - gc.i as f64).abs();
        let dy = (c.j as f64 - gc.j as f64).abs();
        (dx.max(dy) + (std::f64::consts::SQRT_2 - 1.0) * dx.min(dy)) * res
    };
    let n = grid.cells().len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let si = grid.index(s);
    g[si] = 0.0;
    open.push(Open { f: h(s), g: 0.0, idx: si });
    let goal_idx = grid.index(gc);
    while let Some(Open { g: gcur, idx, .. }) = open.pop() {
        if closed[idx] {
            continue;
        }
        closed[idx] = true;
        if idx == goal_idx {
            break;
        }
        let c = grid.cell_of_index(idx);
        for (di, dj) in NEIGHBOURS {
            let (i, j) = (c.i as i64 + di, c.j as i64 + dj);
            if i < 0 || j < 0 || i >= w as i64 || j >= grid.height() as i64 {
                continue;
            }
            let nc = Cell::new(i as usize, j as usize);
            let ni = grid.index(nc);
            if closed[ni] || !cost::traversable(grid.cells()[ni]) {
                continue;
            }
            let ng = gcur + step_cost(grid, di, dj, nc);
            if ng < g[ni] {
                g[ni] = ng;
                parent[ni] = idx;
                open.push(Open { f: ng + h(nc), g: ng, idx: ni });
            }
        }
    }
    if !g[goal_idx].is_finite() {
        return Err(Error::GoalUnreachable);
    }
    let mut cells = vec![goal_idx];
    while *cells.last().unwrap() != si {
        cells.push(parent[*cells.last().unwrap()]);
    }
    cells.reverse();
    let mut waypoints: Vec<Point2> = cells.iter().map(|&i| grid.cell_center(grid.cell_of_index(i))).collect();
    waypoints[0] = start;
    let planned_goal = if substituted { *waypoints.last().unwrap() } else { goal };
    if waypoints.len() > 1 {
        *waypoints.last_mut().unwrap() = planned_goal;
    } else {
        waypoints.push(planned_goal);
    }
    Ok(PlannedPath {
        waypoints,
        cost: g[goal_idx],
        goal: planned_goal,
    })
}

/// Surface-to-surface distance between robot and person discs, clamped at 0.
pub fn surface_distance(robot: Point2, person: Point2, robot_radius: f64) -> f64 {
    (robot.distance(person) - robot_radius - PERSON_RADIUS).max(0.0)
}

/// One tick of a recorded run: robot centre and person roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySample {
    pub robot: Point2,
    pub persons: Vec<Point2>,
}

/// Minimum surface distance over all ticks and persons, or `None` when no
/// tick contains a person.
pub fn min_safety_distance(trace: &[SafetySample], robot_radius: f64) -> Option<f64> {
    trace
        .iter()
        .flat_map(|s| s.persons.iter().map(move |p| surface_distance(s.robot, *p, robot_radius)))
        .min_by(f64::total_cmp)
}

/// Mean over ticks of the per-tick minimum surface distance.
pub fn avg_safety_distance(trace: &[SafetySample], robot_radius: f64) -> Option<f64> {
    let per_tick: Vec<f64> = trace
        .iter()
        .filter_map(|s| s.persons.iter().map(|p| surface_distance(s.robot, *p, robot_radius)).min_by(f64::total_cmp))
        .collect();
    (!per_tick.is_empty()).then(|| per_tick.iter().sum::<f64>() / per_tick.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FollowerParams {
    pub v_max: f64,
    pub w_max: f64,
    pub lookahead: f64,
    /// Within this distance of the goal the follower servos straight to it.
    pub direct_radius: f64,
    pub k_lin: f64,
    pub k_rot: f64,
}

impl Default for FollowerParams {
    fn default() -> Self {
        Self {
            v_max: 0.5,
            w_max: 1.0,
            lookahead: 0.6,
            direct_radius: 1.0,
            k_lin: 1.2,
            k_rot: 1.5,
        }
    }
}

/// Proportional pose servo in the robot frame.
pub fn servo_to(robot: &Pose2, goal: &Pose2, k_lin: f64, k_rot: f64, v_max: f64, w_max: f64) -> Velocity2 {
    let d = robot.transform_to(goal.position()).scale(k_lin);
    Velocity2::new(d.x, d.y, k_rot * angle_diff(goal.theta, robot.theta)).clamped(v_max, w_max)
}

/// Velocity along `path` towards `goal`: heading follows the direction of
/// travel until the goal is near, where it servos onto the goal pose.
pub fn follow_path(robot: &Pose2, path: &[Point2], goal: &Pose2, p: &FollowerParams) -> Velocity2 {
    let pos = robot.position();
    if pos.distance(goal.position()) <= p.direct_radius || path.len() < 2 {
        return servo_to(robot, goal, p.k_lin, p.k_rot, p.v_max, p.w_max);
    }
    // closest segment, then walk ahead by the lookahead distance
    let (mut best, mut best_d, mut best_t) = (0, f64::INFINITY, 0.0);
    for k in 0..path.len() - 1 {
        let (a, b) = (path[k], path[k + 1]);
        let ab = b - a;
        let l2 = ab.dot(ab);
        let t = if l2 > 0.0 { ((pos - a).dot(ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
        let d = pos.distance(a + ab.scale(t));
        if d < best_d {
            best = k;
            best_d = d;
            best_t = t;
        }
    }
    let mut remaining = p.lookahead;
    let mut cur = path[best] + (path[best + 1] - path[best]).scale(best_t);
    let mut k = best;
    let target = loop {
        let next = path[k + 1];
        let d = cur.distance(next);
        if d >= remaining {
            break cur + (next - cur).scale(remaining / d);
        }
        remaining -= d;
        cur = next;
        k += 1;
        if k + 1 >= path.len() {
            break cur;
        }
    };
    let local = robot.transform_to(target);
    let speed = p.v_max.min(p.k_lin * pos.distance(goal.position()));
    let dir = local.normalized();
    let heading = (target - pos).y.atan2((target - pos).x);
    Velocity2::new(dir.x * speed, dir.y * speed, p.k_rot * angle_diff(heading, robot.theta)).clamped(p.v_max, p.w_max)
}
