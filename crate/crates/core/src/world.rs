//! Ground-truth world: omnidirectional robot base, scripted humans,
//! furniture, rigid attachment while carrying and the end-effector
//! displacement produced by a human co-carrier.

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, cost, fold_half_turn, integrate_twist, Grid2, Point2, Polygon2, Pose2, Velocity2};
use crate::model::{skeleton_at, ObjectClass, EE_REACH, HUMAN_SPEED_MAX, ROBOT_RADIUS, ROBOT_V_MAX, ROBOT_W_MAX};
use crate::perception::{chair_grasp_pair, table_grasp_pair};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Fixed simulation tick.
pub const TICK: f64 = 0.05;
/// Largest end-effector displacement an operator produces.
pub const OPERATOR_DISPLACEMENT_CAP: f64 = 0.12;
/// Operator stops pushing once the carried object is this close to its intent.
pub const OPERATOR_STOP_RADIUS: f64 = 0.15;
pub const ATTACH_POS_TOL: f64 = 0.15;
pub const ATTACH_ANGLE_TOL: f64 = 10.0 * std::f64::consts::PI / 180.0;
/// Resting end-effector position in the robot frame, between the grippers.
pub const EE_REST: Point2 = Point2::new(0.3, 0.0);

const CONTACT_BISECTIONS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub object_id: u32,
    /// Object pose in the robot frame, frozen at grasp time.
    pub relative: Pose2,
    pub side_sign: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotBody {
    pub pose: Pose2,
    pub velocity: Velocity2,
    pub footprint_radius: f64,
    pub ee_init: Point2,
    pub ee: Point2,
    pub attached: Option<Attachment>,
}

impl RobotBody {
    pub fn new(pose: Pose2) -> Self {
        Self {
            pose,
            velocity: Velocity2::ZERO,
            footprint_radius: ROBOT_RADIUS,
            ee_init: EE_REST,
            ee: EE_REST,
            attached: None,
        }
    }

    pub fn ee_displacement(&self) -> Point2 {
        self.ee - self.ee_init
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HumanPolicy {
    Waypoint { points: Vec<Point2>, speed: f64 },
    Operator { intent: Pose2, gain: f64 },
    Idle,
}

/// One entry of a human's behaviour script, executed in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptStep {
    Walk { points: Vec<Point2>, speed: f64 },
    Wait { seconds: f64 },
    /// Wait beside `object` until the robot grasps it, then steer it towards
    /// `intent` until the robot releases it.
    Carry { object: u32, intent: Pose2, gain: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAgent {
    pub id: u32,
    pub root: Point2,
    pub velocity: Point2,
    pub policy: HumanPolicy,
    pub script: Vec<ScriptStep>,
    /// Index of the next script step to start.
    pub next_step: usize,
    wait_until: Option<f64>,
    awaiting_grasp: Option<u32>,
    /// Root position in the carried object's frame.
    carry_offset: Option<Point2>,
    /// Set once the carried object first reaches the intent; the operator
    /// then lets go of the steering for the rest of that carry.
    settled: bool,
}

impl HumanAgent {
    pub fn new(id: u32, root: Point2, script: Vec<ScriptStep>) -> Self {
        Self {
            id,
            root,
            velocity: Point2::ZERO,
            policy: HumanPolicy::Idle,
            script,
            next_step: 0,
            wait_until: None,
            awaiting_grasp: None,
            carry_offset: None,
            settled: false,
        }
    }

    pub fn with_policy(id: u32, root: Point2, policy: HumanPolicy) -> Self {
        Self {
            policy,
            ..Self::new(id, root, Vec::new())
        }
    }

    pub fn keypoints(&self) -> Vec<Point2> {
        skeleton_at(self.root)
    }

    /// Object this human is waiting beside or carrying.
    pub fn carry_target(&self) -> Option<u32> {
        self.awaiting_grasp.or(match (&self.policy, self.next_step.checked_sub(1).and_then(|k| self.script.get(k))) {
            (HumanPolicy::Operator { .. }, Some(ScriptStep::Carry { object, .. })) => Some(*object),
            _ => None,
        })
    }

    pub fn operator_settled(&self) -> bool {
        self.settled
    }

    pub fn script_done(&self) -> bool {
        self.next_step >= self.script.len()
            && matches!(self.policy, HumanPolicy::Idle)
            && self.wait_until.is_none()
            && self.awaiting_grasp.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarriedBy {
    None,
    Robot,
    RobotAndHuman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FurnitureObject {
    pub id: u32,
    pub class: ObjectClass,
    pub pose: Pose2,
    pub carried_by: CarriedBy,
}

impl FurnitureObject {
    pub fn new(id: u32, class: ObjectClass, pose: Pose2) -> Self {
        Self {
            id,
            class,
            pose: canonical_pose(class, pose),
            carried_by: CarriedBy::None,
        }
    }

    pub fn footprint(&self) -> Polygon2 {
        self.class.footprint()
    }

    pub fn world_footprint(&self) -> Polygon2 {
        self.class.footprint().transformed(&self.pose)
    }
}

/// Tables are reported with yaw in `[0, π)`.
pub fn canonical_pose(class: ObjectClass, pose: Pose2) -> Pose2 {
    if class.half_turn_symmetric() {
        Pose2 {
            theta: fold_half_turn(pose.theta),
            ..pose
        }
    } else {
        pose
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub time: f64,
    pub tick: u64,
    pub robot: RobotBody,
    pub humans: Vec<HumanAgent>,
    pub objects: Vec<FurnitureObject>,
    pub static_map: Arc<Grid2>,
}

impl WorldState {
    pub fn new(static_map: Arc<Grid2>, robot: RobotBody, humans: Vec<HumanAgent>, objects: Vec<FurnitureObject>) -> Self {
        Self {
            time: 0.0,
            tick: 0,
            robot,
            humans,
            objects,
            static_map,
        }
    }

    pub fn object(&self, id: u32) -> Result<&FurnitureObject> {
        self.objects.iter().find(|o| o.id == id).ok_or(Error::UnknownObject(id))
    }

    fn object_index(&self, id: u32) -> Result<usize> {
        self.objects.iter().position(|o| o.id == id).ok_or(Error::UnknownObject(id))
    }

    pub fn attached_object(&self) -> Option<&FurnitureObject> {
        self.robot.attached.and_then(|a| self.object(a.object_id).ok())
    }

    /// Advances one tick in place.
    pub fn step(&mut self, cmd: Velocity2, dt: f64) {
        let cmd = cmd.clamped(ROBOT_V_MAX, ROBOT_W_MAX);
        let start = self.robot.pose;
        let full = integrate_twist(&start, &cmd, dt);
        let r = self.robot.footprint_radius;
        let (pose, vel) = if disk_blocked(&self.static_map, full.position(), r) && !disk_blocked(&self.static_map, start.position(), r) {
            // largest collision-free fraction of the step
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..CONTACT_BISECTIONS {
                let mid = 0.5 * (lo + hi);
                let p = integrate_twist(&start, &cmd, dt * mid);
                if disk_blocked(&self.static_map, p.position(), r) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            (integrate_twist(&start, &cmd, dt * lo), Velocity2::ZERO)
        } else {
            (full, cmd)
        };
        self.robot.pose = pose;
        self.robot.velocity = vel;

        if let (Some(a), true) = (self.robot.attached, pose != start) {
            if let Ok(idx) = self.object_index(a.object_id) {
                let o = &mut self.objects[idx];
                o.pose = canonical_pose(o.class, pose.compose(&a.relative));
            }
        }

        self.time = (self.tick + 1) as f64 * dt;
        self.tick += 1;
        for k in 0..self.humans.len() {
            self.step_human(k, dt);
        }
        self.update_end_effector();
    }

    fn step_human(&mut self, k: usize, dt: f64) {
        let old = self.humans[k].root;
        self.advance_script(k);
        let attached_id = self.robot.attached.map(|a| a.object_id);
        let h = &mut self.humans[k];
        match &mut h.policy {
            HumanPolicy::Idle => {}
            HumanPolicy::Waypoint { points, speed } => {
                let mut budget = speed.clamp(0.0, HUMAN_SPEED_MAX) * dt;
                let mut p = h.root;
                while budget > 0.0 && !points.is_empty() {
                    let d = points[0].distance(p);
                    if d <= budget {
                        p = points.remove(0);
                        budget -= d;
                    } else {
                        p = p + (points[0] - p).scale(budget / d);
                        budget = 0.0;
                    }
                }
                if !disk_blocked(&self.static_map, p, 0.0) {
                    h.root = p;
                }
                if points.is_empty() {
                    h.policy = HumanPolicy::Idle;
                }
            }
            HumanPolicy::Operator { .. } => {
                let carried = h.next_step.checked_sub(1).and_then(|i| match &h.script[i] {
                    ScriptStep::Carry { object, .. } => Some(*object),
                    _ => None,
                });
                match (carried, attached_id) {
                    (Some(id), Some(att)) if id == att => {
                        if let (Some(off), Some(o)) = (h.carry_offset, self.objects.iter().find(|o| o.id == id)) {
                            if let HumanPolicy::Operator { intent, .. } = h.policy {
                                h.settled |= intent.position().distance(o.pose.position()) <= OPERATOR_STOP_RADIUS;
                            }
                            let target = o.pose.transform_from(off);
                            // walking speed bound still applies
                            let step = target - h.root;
                            let max = HUMAN_SPEED_MAX * dt;
                            h.root = if step.norm() > max { h.root + step.scale(max / step.norm()) } else { target };
                        }
                    }
                    _ => {
                        h.policy = HumanPolicy::Idle;
                        h.carry_offset = None;
                    }
                }
            }
        }
        let h = &mut self.humans[k];
        h.velocity = (h.root - old).scale(1.0 / dt);
    }

    fn advance_script(&mut self, k: usize) {
        let now = self.time;
        let attached_id = self.robot.attached.map(|a| a.object_id);
        let h = &mut self.humans[k];
        if let Some(t) = h.wait_until {
            if now + 1e-9 < t {
                return;
            }
            h.wait_until = None;
        }
        if let Some(id) = h.awaiting_grasp {
            if attached_id != Some(id) {
                return;
            }
            h.awaiting_grasp = None;
            let ScriptStep::Carry { intent, gain, .. } = h.script[h.next_step - 1] else {
                unreachable!("awaiting grasp only set by a carry step")
            };
            if let Some(o) = self.objects.iter().find(|o| o.id == id) {
                h.carry_offset = Some(o.pose.transform_to(h.root));
            }
            h.policy = HumanPolicy::Operator { intent, gain };
            h.settled = false;
            return;
        }
        if !matches!(h.policy, HumanPolicy::Idle) || h.next_step >= h.script.len() {
            return;
        }
        let step = h.script[h.next_step].clone();
        h.next_step += 1;
        match step {
            ScriptStep::Walk { points, speed } => h.policy = HumanPolicy::Waypoint { points, speed },
            ScriptStep::Wait { seconds } => h.wait_until = Some(now + seconds),
            ScriptStep::Carry { object, .. } => h.awaiting_grasp = Some(object),
        }
    }

    fn update_end_effector(&mut self) {
        let disp = self
            .attached_object()
            .and_then(|o| {
                self.humans
                    .iter()
                    .filter(|h| matches!(h.policy, HumanPolicy::Operator { .. }) && h.carry_target() == Some(o.id))
                    .find_map(|h| operator_displacement(h, &self.robot, o).ok())
            })
            .unwrap_or(Point2::ZERO);
        let mut ee = self.robot.ee_init + disp;
        if ee.norm() > EE_REACH {
            ee = ee.scale(EE_REACH / ee.norm());
        }
        self.robot.ee = ee;
    }
}

/// Pure form of [`WorldState::step`].
pub fn step_world(state: &WorldState, robot_cmd: Velocity2, dt: f64) -> WorldState {
    let mut next = state.clone();
    next.step(robot_cmd, dt);
    next
}

/// True when a disk (or a point for `radius == 0`) overlaps a lethal or
/// off-map cell.
pub fn disk_blocked(grid: &Grid2, center: Point2, radius: f64) -> bool {
    if grid.value_at(center) >= cost::LETHAL {
        return true;
    }
    if radius <= 0.0 {
        return false;
    }
    let res = grid.resolution();
    let o = grid.origin().position();
    let ext = grid.extent();
    if center.x - radius < o.x || center.y - radius < o.y || center.x + radius > ext.x || center.y + radius > ext.y {
        return true;
    }
    let i0 = ((center.x - radius - o.x) / res).floor() as usize;
    let j0 = ((center.y - radius - o.y) / res).floor() as usize;
    let i1 = (((center.x + radius - o.x) / res).floor() as usize).min(grid.width() - 1);
    let j1 = (((center.y + radius - o.y) / res).floor() as usize).min(grid.height() - 1);
    let r2 = radius * radius;
    let cells = grid.cells();
    for j in j0..=j1 {
        for i in i0..=i1 {
            if cells[j * grid.width() + i] < cost::LETHAL {
                continue;
            }
            let lo = Point2::new(o.x + i as f64 * res, o.y + j as f64 * res);
            let nx = center.x.clamp(lo.x, lo.x + res);
            let ny = center.y.clamp(lo.y, lo.y + res);
            let d = Point2::new(nx, ny) - center;
            if d.dot(d) < r2 {
                return true;
            }
        }
    }
    false
}

/// End-effector displacement (robot frame) an operator imposes while
/// co-carrying `carried`: proportional to the remaining offset of the object
/// from the operator's intent, capped, and zero once the intent is reached.
pub fn operator_displacement(agent: &HumanAgent, robot: &RobotBody, carried: &FurnitureObject) -> Result<Point2> {
    let HumanPolicy::Operator { intent, gain } = agent.policy else {
        return Err(Error::NotAnOperator);
    };
    let to_goal = intent.position() - carried.pose.position();
    if agent.settled || to_goal.norm() <= OPERATOR_STOP_RADIUS {
        return Ok(Point2::ZERO);
    }
    let local = to_goal.rotate(-robot.pose.theta).scale(gain);
    let n = local.norm();
    Ok(if n > OPERATOR_DISPLACEMENT_CAP {
        local.scale(OPERATOR_DISPLACEMENT_CAP / n)
    } else {
        local
    })
}

/// Base pose from which the robot can grasp `object` on side `side_sign`.
pub fn grasp_base_pose(object: &FurnitureObject, side_sign: i8) -> Pose2 {
    match object.class {
        ObjectClass::Table => table_grasp_pair(&object.pose, side_sign).base_pose(),
        ObjectClass::Chair => chair_grasp_pair(&object.pose).base_pose(),
    }
}

pub fn attach_object(state: &WorldState, object_id: u32, grasp_side: i8) -> Result<WorldState> {
    let mut next = state.clone();
    next.attach(object_id, grasp_side)?;
    Ok(next)
}

pub fn detach_object(state: &WorldState) -> WorldState {
    let mut next = state.clone();
    next.detach();
    next
}

impl WorldState {
    pub fn attach(&mut self, object_id: u32, grasp_side: i8) -> Result<()> {
        if self.robot.attached.is_some() {
            return Err(Error::AlreadyAttached);
        }
        let idx = self.object_index(object_id)?;
        let o = &self.objects[idx];
        let target = grasp_base_pose(o, grasp_side);
        let aligned = target.position().distance(self.robot.pose.position()) <= ATTACH_POS_TOL
            && angle_diff(target.theta, self.robot.pose.theta).abs() <= ATTACH_ANGLE_TOL;
        if !aligned {
            return Err(Error::GraspAlignmentFailed);
        }
        let relative = self.robot.pose.relative(&o.pose);
        let co_carried = self.humans.iter().any(|h| h.awaiting_grasp == Some(object_id));
        self.objects[idx].carried_by = if co_carried { CarriedBy::RobotAndHuman } else { CarriedBy::Robot };
        self.robot.attached = Some(Attachment {
            object_id,
            relative,
            side_sign: if grasp_side >= 0 { 1 } else { -1 },
        });
        Ok(())
    }

    pub fn detach(&mut self) {
        if let Some(a) = self.robot.attached.take() {
            if let Ok(idx) = self.object_index(a.object_id) {
                self.objects[idx].carried_by = CarriedBy::None;
            }
        }
        self.robot.ee = self.robot.ee_init;
    }
}
