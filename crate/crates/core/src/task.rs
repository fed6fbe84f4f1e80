//! Furniture task control: pickup pose anticipation, base alignment,
//! compliant carrying with goal anticipation, placement bookkeeping, the
//! autonomous chair task and the phase machine driving all of them.

use crate::error::{Error, Result};
use crate::fusion::{FeedbackMsg, ObjectFeedback, PersonFeedback};
use crate::geometry::{angle_diff, cost, fold_half_turn, half_turn_diff, Grid2, Point2, Polygon2, Pose2, Velocity2};
use crate::model::ObjectClass;
use crate::nav::{
    build_virtual_cloud, filter_outlier, follow_path, nearest_free, plan_path, servo_to, update_costmap, AnticipationParams, CostMap,
    FollowerParams, PlannedPath, ScanRay,
};
use crate::perception::{chair_grasp_pair, table_grasp_pair};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickupArea {
    pub polygon: Polygon2,
    pub center: Point2,
    pub class_filter: ObjectClass,
}

impl PickupArea {
    pub fn new(polygon: Polygon2, class_filter: ObjectClass) -> Result<Self> {
        if !polygon.is_convex() {
            return Err(Error::InvalidScenario("pickup area must be convex".into()));
        }
        Ok(Self {
            center: polygon.centroid(),
            polygon,
            class_filter,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub class: ObjectClass,
    pub target: Pose2,
    pub occupied: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn new(targets: impl IntoIterator<Item = (ObjectClass, Pose2)>) -> Self {
        let entries = targets
            .into_iter()
            .map(|(class, target)| LayoutEntry {
                class,
                target: crate::world::canonical_pose(class, target),
                occupied: false,
            })
            .collect();
        Self { entries }
    }

    pub fn unoccupied(&self, class: ObjectClass) -> impl Iterator<Item = (usize, &LayoutEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| !e.occupied && e.class == class)
    }

    pub fn remaining(&self) -> usize {
        self.entries.iter().filter(|e| !e.occupied).count()
    }

    pub fn is_complete(&self) -> bool {
        self.remaining() == 0
    }

    pub fn occupy(&mut self, idx: usize) -> Result<()> {
        match self.entries.get_mut(idx) {
            Some(e) if !e.occupied => {
                e.occupied = true;
                Ok(())
            }
            _ => Err(Error::LayoutComplete),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarryParams {
    pub tau_ee: f64,
    pub tau_goal: f64,
    pub tau_vel: f64,
    pub tau_p: f64,
    pub tau_direct: f64,
    pub delta_grasp: f64,
    pub k_e_lin: f64,
    pub k_e_rot: f64,
    pub k_a_lin: f64,
    pub k_a_rot: f64,
    pub k_direct: f64,
    pub v_max: f64,
    pub w_max: f64,
    /// Rotate the goal vector into the robot frame before scaling it.
    pub goal_in_robot_frame: bool,
}

impl Default for CarryParams {
    fn default() -> Self {
        Self {
            tau_ee: 0.03,
            tau_goal: 0.05,
            tau_vel: 0.05,
            tau_p: 2.5,
            tau_direct: 1.0,
            delta_grasp: 0.9,
            k_e_lin: 1.0,
            k_e_rot: 1.5,
            k_a_lin: 0.2,
            k_a_rot: 0.5,
            k_direct: 2.0,
            v_max: 0.3,
            w_max: 0.6,
            goal_in_robot_frame: true,
        }
    }
}

impl CarryParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.tau_ee,
            self.tau_goal,
            self.tau_vel,
            self.tau_p,
            self.tau_direct,
            self.delta_grasp,
            self.k_e_lin,
            self.k_e_rot,
            self.k_a_lin,
            self.k_a_rot,
            self.k_direct,
            self.v_max,
            self.w_max,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidScenario("carry parameters must be positive".into()));
        }
        if self.tau_goal >= self.tau_direct {
            return Err(Error::InvalidScenario("tau_goal must be below tau_direct".into()));
        }
        Ok(())
    }
}

/// Object the task refers to: a fused track for world-frame goals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskObject {
    pub track: u32,
    pub class: ObjectClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum TaskPhase {
    Idle,
    ApproachPickup { object: TaskObject, side: i8, goal: Pose2 },
    AlignBase { object: TaskObject, since: f64 },
    Grasp { object: TaskObject, handle: u32 },
    CarryCompliant { object: TaskObject, entry: Option<usize> },
    DirectApproach { object: TaskObject, entry: usize },
    Place { object: TaskObject, entry: usize },
    ChairFetch { object: TaskObject, goal: Pose2 },
    ChairPush { object: TaskObject, entry: usize, goal: Pose2 },
    ReturnToStandby { goal: Pose2 },
}

impl TaskPhase {
    pub fn name(&self) -> &'static str {
        match self {
            TaskPhase::Idle => "idle",
            TaskPhase::ApproachPickup { .. } => "approach_pickup",
            TaskPhase::AlignBase { .. } => "align_base",
            TaskPhase::Grasp { .. } => "grasp",
            TaskPhase::CarryCompliant { .. } => "carry_compliant",
            TaskPhase::DirectApproach { .. } => "direct_approach",
            TaskPhase::Place { .. } => "place",
            TaskPhase::ChairFetch { .. } => "chair_fetch",
            TaskPhase::ChairPush { .. } => "chair_push",
            TaskPhase::ReturnToStandby { .. } => "return_to_standby",
        }
    }

    /// Edges of the phase graph. Staying in the same phase is always legal.
    pub fn can_transition(from: &str, to: &str) -> bool {
        if from == to {
            return true;
        }
        let allowed: &[&str] = match from {
            "idle" => &["approach_pickup", "chair_fetch", "return_to_standby"],
            "approach_pickup" => &["align_base", "idle"],
            "chair_fetch" => &["align_base", "idle"],
            "align_base" => &["grasp", "approach_pickup", "chair_fetch", "idle"],
            "grasp" => &["carry_compliant", "chair_push", "align_base"],
            "carry_compliant" => &["direct_approach", "place"],
            "direct_approach" => &["carry_compliant", "place"],
            "chair_push" => &["place"],
            "place" => &["idle", "approach_pickup", "chair_fetch", "return_to_standby"],
            "return_to_standby" => &["idle", "approach_pickup", "chair_fetch"],
            _ => &[],
        };
        allowed.contains(&to)
    }

    pub fn transition(self, to: TaskPhase) -> Result<TaskPhase> {
        if Self::can_transition(self.name(), to.name()) {
            Ok(to)
        } else {
            Err(Error::IllegalTransition {
                from: self.name(),
                to: to.name(),
            })
        }
    }
}

/// Tables whose centre lies inside the area, excluding `carried`.
pub fn select_tables(objects: &[ObjectFeedback], area: &PickupArea, carried: Option<u32>) -> Vec<ObjectFeedback> {
    objects
        .iter()
        .filter(|o| o.class == ObjectClass::Table && Some(o.id) != carried && area.polygon.contains(o.pose.position()))
        .cloned()
        .collect()
}

/// Person closest to the area centre within `tau_p`; ties go to the lower id.
pub fn select_person<'a>(persons: &'a [PersonFeedback], area: &PickupArea, tau_p: f64) -> Option<&'a PersonFeedback> {
    persons
        .iter()
        .map(|p| (p.root.distance(area.center), p))
        .filter(|(d, _)| *d <= tau_p)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)))
        .map(|(_, p)| p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PickupGoal {
    pub table: u32,
    pub side_sign: i8,
    pub pose: Pose2,
}

/// Side of the table opposite the person, as a sign along the long axis.
pub fn pickup_side(table: &Pose2, person: Point2) -> i8 {
    let n_t = Point2::new(table.theta.cos(), table.theta.sin());
    let n_p = table.position() - person;
    if n_p.dot(n_t) < 0.0 {
        -1
    } else {
        1
    }
}

/// Goal on the far side of the table closest to the person, facing the
/// table centre.
pub fn anticipate_pickup_pose(person: Point2, tables: &[ObjectFeedback], delta_grasp: f64) -> Option<PickupGoal> {
    let t = tables
        .iter()
        .min_by(|a, b| a.pose.position().distance(person).total_cmp(&b.pose.position().distance(person)).then(a.id.cmp(&b.id)))?;
    let side = pickup_side(&t.pose, person);
    let n_t = Point2::new(t.pose.theta.cos(), t.pose.theta.sin());
    let x_goal = t.pose.position() + n_t.scale(side as f64 * delta_grasp);
    let face = t.pose.position() - x_goal;
    Some(PickupGoal {
        table: t.id,
        side_sign: side,
        pose: Pose2::from_point(x_goal, face.y.atan2(face.x)),
    })
}

/// Heading tolerance added to the position/speed test.
pub const GOAL_HEADING_TOL: f64 = 10.0 * std::f64::consts::PI / 180.0;

pub fn goal_reached(goal: &Pose2, robot: &Pose2, velocity: &Velocity2, params: &CarryParams) -> bool {
    goal.position().distance(robot.position()) < params.tau_goal
        && velocity.linear_speed() < params.tau_vel
        && angle_diff(goal.theta, robot.theta).abs() < GOAL_HEADING_TOL
}

pub const ALIGN_POS_TOL: f64 = 0.1;
pub const ALIGN_ANGLE_TOL: f64 = 5.0 * std::f64::consts::PI / 180.0;
pub const ALIGN_TIMEOUT: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlignCommand {
    Aligned,
    Move(Velocity2),
}

/// Proportional servo onto the grasp approach pose.
pub fn align_base(robot: &Pose2, grasp_base: &Pose2, params: &CarryParams) -> AlignCommand {
    if grasp_base.position().distance(robot.position()) <= ALIGN_POS_TOL && angle_diff(grasp_base.theta, robot.theta).abs() <= ALIGN_ANGLE_TOL {
        return AlignCommand::Aligned;
    }
    AlignCommand::Move(servo_to(robot, grasp_base, params.k_e_lin, params.k_e_rot, params.v_max, params.w_max))
}

/// Base pose that puts an object held at `grasp` (object pose in the robot
/// frame) onto `target`. Tables may be set down either way round; the
/// variant needing the smaller turn from `robot` is used.
pub fn placement_pose(target: &Pose2, class: ObjectClass, grasp: &Pose2, robot: &Pose2) -> Pose2 {
    let inv = grasp.inverse();
    let a = target.compose(&inv);
    if !class.half_turn_symmetric() {
        return a;
    }
    let flipped = Pose2::new(target.x, target.y, target.theta + std::f64::consts::PI).compose(&inv);
    if angle_diff(flipped.theta, robot.theta).abs() < angle_diff(a.theta, robot.theta).abs() {
        flipped
    } else {
        a
    }
}

/// Nearest unoccupied layout entry of `class` and the base pose that
/// places the held object there.
pub fn update_goal(layout: &Layout, class: ObjectClass, robot: &Pose2, grasp: &Pose2) -> Result<(usize, Pose2)> {
    let (idx, e) = layout
        .unoccupied(class)
        .min_by(|a, b| a.1.target.position().distance(robot.position()).total_cmp(&b.1.target.position().distance(robot.position())))
        .ok_or(Error::LayoutComplete)?;
    Ok((idx, placement_pose(&e.target, class, grasp, robot)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CarryCommand {
    Reached,
    /// Operator and goal terms blended.
    Blend(Velocity2),
    /// Close and stopped: scaled goal attraction only.
    Direct(Velocity2),
}

impl CarryCommand {
    pub fn velocity(&self) -> Velocity2 {
        match self {
            CarryCommand::Reached => Velocity2::ZERO,
            CarryCommand::Blend(v) | CarryCommand::Direct(v) => *v,
        }
    }
}

/// Goal vector as used by [`carry_velocity`].
pub fn goal_vector(robot: &Pose2, goal: &Pose2, params: &CarryParams) -> Point2 {
    let d = goal.position() - robot.position();
    if params.goal_in_robot_frame {
        d.rotate(-robot.theta)
    } else {
        d
    }
}

/// Base velocity from end-effector displacement blended with attraction
/// towards the goal.
pub fn carry_velocity(ee_disp: Point2, goal_vec: Point2, heading_err: f64, params: &CarryParams) -> CarryCommand {
    if goal_vec.norm() < params.tau_goal {
        return CarryCommand::Reached;
    }
    let forward = ee_disp.x.abs() > params.tau_ee;
    let mut v_ee = Velocity2::ZERO;
    if forward {
        v_ee.vx = params.k_e_lin * ee_disp.x;
    }
    if ee_disp.y.abs() > params.tau_ee {
        if forward {
            v_ee.omega = params.k_e_rot * ee_disp.y;
        } else {
            v_ee.vy = params.k_e_lin * ee_disp.y;
        }
    }
    let v_a = Velocity2::new(params.k_a_lin * goal_vec.x, params.k_a_lin * goal_vec.y, params.k_a_rot * heading_err);
    if goal_vec.norm() > params.tau_direct || forward {
        CarryCommand::Blend((v_ee + v_a).clamped(params.v_max, params.w_max))
    } else {
        CarryCommand::Direct(v_a.scale(params.k_direct).clamped(params.v_max, params.w_max))
    }
}

/// Operator-only carrying: the end-effector term without goal attraction.
pub fn follow_operator(ee_disp: Point2, params: &CarryParams) -> Velocity2 {
    let far_goal = Point2::new(2.0 * params.tau_direct, 0.0);
    let zero_gain = CarryParams {
        k_a_lin: 0.0,
        k_a_rot: 0.0,
        ..*params
    };
    carry_velocity(ee_disp, far_goal, 0.0, &zero_gain).velocity()
}

/// Placement angular tolerance.
pub const PLACE_ANGLE_TOL: f64 = 3.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub entry: usize,
    pub class: ObjectClass,
    pub translation_error: f64,
    pub angular_error_deg: f64,
}

/// Placement error of an object pose against a layout target; tables are
/// compared modulo a half turn.
pub fn placement_error(class: ObjectClass, pose: &Pose2, target: &Pose2) -> (f64, f64) {
    let t = pose.position().distance(target.position());
    let a = if class.half_turn_symmetric() {
        half_turn_diff(fold_half_turn(pose.theta), target.theta)
    } else {
        angle_diff(pose.theta, target.theta)
    };
    (t, a.abs().to_degrees())
}

/// Releases the held object, marks `entry` occupied and verifies the
/// resulting pose. The entry is occupied even when verification fails.
pub fn place_object(world: &mut crate::world::WorldState, layout: &mut Layout, entry: usize, tau_goal: f64) -> Result<PlacementReport> {
    let o = world.attached_object().ok_or(Error::UnknownObject(u32::MAX))?.clone();
    let e = *layout.entries.get(entry).ok_or(Error::LayoutComplete)?;
    world.detach();
    layout.occupy(entry)?;
    let (translation_error, angular_error_deg) = placement_error(o.class, &o.pose, &e.target);
    if translation_error > tau_goal || angular_error_deg > PLACE_ANGLE_TOL.to_degrees() {
        return Err(Error::PlacementVerificationFailed {
            translation: translation_error,
            angle_deg: angular_error_deg,
        });
    }
    Ok(PlacementReport {
        entry,
        class: o.class,
        translation_error,
        angular_error_deg,
    })
}

/// Onboard detection of a nearby object, in the robot frame. `handle`
/// identifies the physical object for grasping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnboardDetection {
    pub handle: u32,
    pub class: ObjectClass,
    pub relative: Pose2,
}

/// Operator input through the touchscreen: which object to fetch, a point
/// on the side to grasp it from and, for autonomous tasks, the slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TouchCommand {
    pub object_at: Point2,
    pub grasp_hint: Point2,
    pub slot: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Attach { handle: u32 },
    Detach { entry: usize },
}

/// Planner status reported for each tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Off,
    Straight,
    Deviating,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerParams {
    pub carry: CarryParams,
    pub follower: FollowerParams,
    pub anticipation: AnticipationParams,
    /// Hold-still time after which an operator-only carry is set down.
    pub settle_time: f64,
    /// Grace period after grasping before settling is considered.
    pub settle_grace: f64,
    /// A tracked person within this distance of the table lets the grasp go ahead.
    pub partner_radius: f64,
    /// Tighter stop tolerance for autonomous chair placement.
    pub chair_pos_tol: f64,
    pub chair_angle_tol: f64,
    /// Lateral offset above which a plan counts as leaving the straight line.
    pub deviation_tol: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            carry: CarryParams::default(),
            follower: FollowerParams::default(),
            anticipation: AnticipationParams::default(),
            settle_time: 1.0,
            settle_grace: 2.0,
            partner_radius: 1.5,
            chair_pos_tol: 0.02,
            chair_angle_tol: 1.0f64.to_radians(),
            deviation_tol: 0.15,
        }
    }
}

pub struct ControlInput<'a> {
    pub now: f64,
    /// Estimated robot pose.
    pub pose: Pose2,
    pub velocity: Velocity2,
    pub ee_disp: Point2,
    pub attached: bool,
    pub feedback: Option<&'a FeedbackMsg>,
    /// Whether `feedback` is new this tick.
    pub fresh_feedback: bool,
    pub scan: Option<&'a [ScanRay]>,
    pub onboard: &'a [OnboardDetection],
    pub command: Option<TouchCommand>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlOutput {
    pub cmd: Velocity2,
    pub actions: Vec<Action>,
    pub events: Vec<String>,
    pub plan: Option<PlanStatus>,
}

/// Single-robot task controller. Owns the cost map and the phase.
pub struct Controller {
    pub params: ControllerParams,
    pub anticipation: bool,
    pub phase: TaskPhase,
    pub layout: Layout,
    pub areas: Vec<PickupArea>,
    pub standby: Option<Pose2>,
    pub costmap: CostMap,
    path: Option<PlannedPath>,
    grasp: Option<Pose2>,
    carry_start: f64,
    settle_since: Option<f64>,
    last_look: Option<usize>,
    plan_failures: u32,
    pending_slot: Option<usize>,
    done: bool,
    failed: bool,
}

impl Controller {
    pub fn new(params: ControllerParams, anticipation: bool, static_map: &Grid2, layout: Layout, areas: Vec<PickupArea>, standby: Option<Pose2>) -> Self {
        Self {
            costmap: CostMap::new(static_map, params.anticipation.inflation_radius),
            params,
            anticipation,
            phase: TaskPhase::Idle,
            layout,
            areas,
            standby,
            path: None,
            grasp: None,
            carry_start: 0.0,
            settle_since: None,
            last_look: None,
            plan_failures: 0,
            pending_slot: None,
            done: false,
            failed: false,
        }
    }

    /// Layout complete and standby (if any) reached.
    pub fn is_done(&self) -> bool {
        self.done
    }

    /// An unrecoverable task failure was reported.
    pub fn has_failed(&self) -> bool {
        self.failed
    }

    /// No work in hand: waiting for a person or a command.
    pub fn is_idle(&self) -> bool {
        matches!(self.phase, TaskPhase::Idle)
    }

    fn set_phase(&mut self, to: TaskPhase, out: &mut ControlOutput) {
        let from = self.phase;
        match from.transition(to) {
            Ok(p) => {
                if from.name() != p.name() {
                    out.events.push(format!("phase {} -> {}", from.name(), p.name()));
                    self.path = None;
                }
                self.phase = p;
            }
            Err(e) => out.events.push(format!("error {e}")),
        }
    }

    fn objects<'a>(&self, input: &ControlInput<'a>) -> &'a [ObjectFeedback] {
        input.feedback.map_or(&[], |f| f.objects.as_slice())
    }

    fn track(&self, input: &ControlInput, id: u32) -> Option<ObjectFeedback> {
        self.objects(input).iter().find(|o| o.id == id).cloned()
    }

    fn refresh_costmap(&mut self, input: &ControlInput) {
        let cloud = if self.anticipation && input.fresh_feedback {
            input.feedback.map(|f| {
                let persons = filter_outlier(f.persons(), &input.pose, &self.params.anticipation);
                build_virtual_cloud(&persons, &input.pose, &self.params.anticipation)
            })
        } else {
            None
        };
        update_costmap(&mut self.costmap, &input.pose, input.scan, cloud.as_deref());
    }

    /// Drive towards `goal`: servo when close, otherwise plan and follow.
    fn navigate(&mut self, input: &ControlInput, goal: &Pose2, out: &mut ControlOutput) -> Velocity2 {
        let fp = self.params.follower;
        if input.pose.position().distance(goal.position()) <= fp.direct_radius {
            out.plan = Some(PlanStatus::Off);
            return servo_to(&input.pose, goal, fp.k_lin, fp.k_rot, fp.v_max, fp.w_max);
        }
        let grid = &self.costmap.combined;
        let here = input.pose.position();
        let start = match grid.world_to_cell(here).and_then(|c| grid.get(c)) {
            Some(v) if cost::traversable(v) => Some(here),
            Some(cost::INSCRIBED) => nearest_free(grid, here, 0.5).map(|c| grid.cell_center(c)),
            _ => None,
        };
        let planned = start.ok_or(Error::StartBlocked).and_then(|s| plan_path(grid, s, goal.position()));
        match planned {
            Ok(mut p) => {
                if p.waypoints[0] != here {
                    p.waypoints.insert(0, here);
                }
                let dir = goal.position() - here;
                let len = dir.norm();
                let off = p
                    .waypoints
                    .iter()
                    .map(|w| if len > 0.0 { (*w - here).cross(dir).abs() / len } else { 0.0 })
                    .fold(0.0, f64::max);
                out.plan = Some(if off > self.params.deviation_tol { PlanStatus::Deviating } else { PlanStatus::Straight });
                let v = follow_path(&input.pose, &p.waypoints, goal, &fp);
                self.path = Some(p);
                self.plan_failures = 0;
                v
            }
            Err(e) => {
                if self.plan_failures == 0 {
                    out.events.push(format!("hold: {e}"));
                }
                self.plan_failures += 1;
                self.path = None;
                out.plan = Some(PlanStatus::Blocked);
                Velocity2::ZERO
            }
        }
    }

    pub fn current_path(&self) -> Option<&PlannedPath> {
        self.path.as_ref()
    }

    /// Next task when nothing is in hand.
    fn choose_task(&mut self, input: &ControlInput, out: &mut ControlOutput) {
        if self.layout.is_complete() || self.layout.entries.is_empty() {
            match self.standby {
                Some(goal) if !goal_reached(&goal, &input.pose, &input.velocity, &self.params.carry) => {
                    self.set_phase(TaskPhase::ReturnToStandby { goal }, out)
                }
                _ => {
                    if !self.done {
                        out.events.push("done".into());
                    }
                    self.done = true;
                }
            }
            return;
        }
        if self.anticipation {
            if self.layout.unoccupied(ObjectClass::Table).next().is_some() {
                if let Some(g) = self.anticipate(input) {
                    let object = TaskObject {
                        track: g.table,
                        class: ObjectClass::Table,
                    };
                    self.set_phase(TaskPhase::ApproachPickup { object, side: g.side_sign, goal: g.pose }, out);
                    return;
                }
                if self.waiting_tables(input) {
                    return;
                }
            }
            if self.layout.unoccupied(ObjectClass::Chair).next().is_some() {
                if let Some(c) = self.waiting_chair(input) {
                    let goal = chair_grasp_pair(&c.pose).base_pose();
                    let object = TaskObject {
                        track: c.id,
                        class: ObjectClass::Chair,
                    };
                    self.pending_slot = None;
                    self.set_phase(TaskPhase::ChairFetch { object, goal }, out);
                }
            }
        } else if let Some(cmd) = input.command {
            let Some(o) = self
                .objects(input)
                .iter()
                .min_by(|a, b| a.pose.position().distance(cmd.object_at).total_cmp(&b.pose.position().distance(cmd.object_at)))
                .cloned()
            else {
                out.events.push("command ignored: no tracked object".into());
                return;
            };
            let object = TaskObject { track: o.id, class: o.class };
            self.pending_slot = cmd.slot;
            match o.class {
                ObjectClass::Table => {
                    let n_t = Point2::new(o.pose.theta.cos(), o.pose.theta.sin());
                    let side: i8 = if (cmd.grasp_hint - o.pose.position()).dot(n_t) < 0.0 { -1 } else { 1 };
                    let goal = table_grasp_pair(&o.pose, side).base_pose();
                    self.set_phase(TaskPhase::ApproachPickup { object, side, goal }, out);
                }
                ObjectClass::Chair => {
                    let goal = chair_grasp_pair(&o.pose).base_pose();
                    self.set_phase(TaskPhase::ChairFetch { object, goal }, out);
                }
            }
        }
    }

    /// Pickup goal from the tracked persons and tables.
    fn anticipate(&self, input: &ControlInput) -> Option<PickupGoal> {
        let f = input.feedback?;
        let carry = &self.params.carry;
        self.areas.iter().filter(|a| a.class_filter == ObjectClass::Table).find_map(|area| {
            let tables = select_tables(&f.objects, area, None);
            if tables.is_empty() {
                return None;
            }
            let p = select_person(f.persons(), area, carry.tau_p)?;
            anticipate_pickup_pose(p.root, &tables, carry.delta_grasp)
        })
    }

    fn waiting_tables(&self, input: &ControlInput) -> bool {
        let objs = self.objects(input);
        self.areas
            .iter()
            .filter(|a| a.class_filter == ObjectClass::Table)
            .any(|a| !select_tables(objs, a, None).is_empty())
    }

    fn waiting_chair(&self, input: &ControlInput) -> Option<ObjectFeedback> {
        let objs = self.objects(input);
        self.areas
            .iter()
            .filter(|a| a.class_filter == ObjectClass::Chair)
            .flat_map(|a| objs.iter().filter(move |o| o.class == ObjectClass::Chair && a.polygon.contains(o.pose.position())))
            .min_by(|a, b| a.pose.position().distance(input.pose.position()).total_cmp(&b.pose.position().distance(input.pose.position())))
            .cloned()
    }

    /// Onboard detection matching a track, and the grasp base pose in the
    /// robot frame.
    fn onboard_grasp(&self, input: &ControlInput, object: &TaskObject) -> Option<(OnboardDetection, Pose2)> {
        let expected = self.track(input, object.track).map(|t| input.pose.transform_to(t.pose.position()));
        let det = input
            .onboard
            .iter()
            .filter(|d| d.class == object.class)
            .filter(|d| expected.is_none_or(|e| e.distance(d.relative.position()) < 0.6))
            .min_by(|a, b| a.relative.position().norm().total_cmp(&b.relative.position().norm()))?;
        let base = match object.class {
            ObjectClass::Table => {
                let a = table_grasp_pair(&det.relative, 1).base_pose();
                let b = table_grasp_pair(&det.relative, -1).base_pose();
                if a.position().norm() <= b.position().norm() {
                    a
                } else {
                    b
                }
            }
            ObjectClass::Chair => chair_grasp_pair(&det.relative).base_pose(),
        };
        Some((*det, base))
    }

    fn partner_ready(&self, input: &ControlInput, object: &TaskObject) -> bool {
        if !self.anticipation || object.class == ObjectClass::Chair {
            return true;
        }
        let (Some(f), Some(t)) = (input.feedback, self.track(input, object.track)) else {
            return false;
        };
        f.persons().iter().any(|p| p.root.distance(t.pose.position()) <= self.params.partner_radius)
    }

    pub fn step(&mut self, input: &ControlInput) -> ControlOutput {
        let mut out = ControlOutput::default();
        self.refresh_costmap(input);
        let carry = self.params.carry;
        if matches!(self.phase, TaskPhase::Idle) {
            self.choose_task(input, &mut out);
        }
        let cmd = match self.phase {
            TaskPhase::Idle => Velocity2::ZERO,
            TaskPhase::ApproachPickup { object, mut side, mut goal } => {
                if self.anticipation {
                    if let Some(g) = self.anticipate(input) {
                        if g.table != object.track || g.side_sign != side || g.pose.position().distance(goal.position()) > 1e-9 {
                            side = g.side_sign;
                            goal = g.pose;
                            let object = TaskObject {
                                track: g.table,
                                class: ObjectClass::Table,
                            };
                            self.phase = TaskPhase::ApproachPickup { object, side, goal };
                        }
                    }
                }
                if goal_reached(&goal, &input.pose, &input.velocity, &carry) {
                    self.set_phase(TaskPhase::AlignBase { object, since: input.now }, &mut out);
                    Velocity2::ZERO
                } else {
                    self.navigate(input, &goal, &mut out)
                }
            }
            TaskPhase::ChairFetch { object, goal } => {
                if goal_reached(&goal, &input.pose, &input.velocity, &carry) {
                    self.set_phase(TaskPhase::AlignBase { object, since: input.now }, &mut out);
                    Velocity2::ZERO
                } else {
                    self.navigate(input, &goal, &mut out)
                }
            }
            TaskPhase::AlignBase { object, since } => {
                if input.now - since > ALIGN_TIMEOUT {
                    out.events.push(format!("error {}", Error::AlignmentTimeout));
                    self.set_phase(TaskPhase::Idle, &mut out);
                    Velocity2::ZERO
                } else {
                    match self.onboard_grasp(input, &object) {
                        None => Velocity2::ZERO,
                        Some((det, base)) => match align_base(&Pose2::IDENTITY, &base, &carry) {
                            AlignCommand::Move(v) => v,
                            AlignCommand::Aligned => {
                                if self.partner_ready(input, &object) {
                                    self.grasp = Some(det.relative);
                                    out.actions.push(Action::Attach { handle: det.handle });
                                    self.set_phase(TaskPhase::Grasp { object, handle: det.handle }, &mut out);
                                }
                                Velocity2::ZERO
                            }
                        },
                    }
                }
            }
            TaskPhase::Grasp { object, .. } => {
                if input.attached {
                    self.carry_start = input.now;
                    self.settle_since = None;
                    self.last_look = None;
                    match object.class {
                        ObjectClass::Table => self.set_phase(TaskPhase::CarryCompliant { object, entry: None }, &mut out),
                        ObjectClass::Chair => {
                            let grasp = self.grasp.unwrap_or(Pose2::IDENTITY);
                            let chosen = match self.pending_slot.take() {
                                Some(slot) if self.layout.entries.get(slot).is_some_and(|e| !e.occupied) => {
                                    Ok((slot, placement_pose(&self.layout.entries[slot].target, object.class, &grasp, &input.pose)))
                                }
                                _ => update_goal(&self.layout, object.class, &input.pose, &grasp),
                            };
                            match chosen {
                                Ok((entry, goal)) => self.set_phase(TaskPhase::ChairPush { object, entry, goal }, &mut out),
                                Err(e) => out.events.push(format!("error {e}")),
                            }
                        }
                    }
                } else {
                    out.events.push(format!("error {}", Error::GraspAlignmentFailed));
                    self.set_phase(TaskPhase::AlignBase { object, since: input.now }, &mut out);
                }
                Velocity2::ZERO
            }
            TaskPhase::CarryCompliant { object, .. } | TaskPhase::DirectApproach { object, .. } => self.carry_step(input, object, &mut out),
            TaskPhase::ChairPush { object, entry, goal } => {
                let close = input.pose.position().distance(goal.position()) < self.params.chair_pos_tol
                    && angle_diff(goal.theta, input.pose.theta).abs() < self.params.chair_angle_tol;
                if close {
                    self.set_phase(TaskPhase::Place { object, entry }, &mut out);
                    Velocity2::ZERO
                } else {
                    let v = self.navigate(input, &goal, &mut out);
                    if self.plan_failures == 1 + (1.0 / crate::world::TICK) as u32 {
                        // retried for a second without a path
                        out.events.push(format!("error {}", Error::ChairTaskFailed));
                        self.failed = true;
                    }
                    v
                }
            }
            TaskPhase::Place { .. } | TaskPhase::ReturnToStandby { .. } => Velocity2::ZERO,
        };
        let cmd = match self.phase {
            TaskPhase::Place { entry, .. } => {
                out.actions.push(Action::Detach { entry });
                if let Err(e) = self.layout.occupy(entry) {
                    out.events.push(format!("error {e}"));
                }
                self.grasp = None;
                self.set_phase(TaskPhase::Idle, &mut out);
                Velocity2::ZERO
            }
            TaskPhase::ReturnToStandby { goal } => {
                if goal_reached(&goal, &input.pose, &input.velocity, &carry) {
                    self.set_phase(TaskPhase::Idle, &mut out);
                    self.choose_task(input, &mut out);
                    Velocity2::ZERO
                } else {
                    self.navigate(input, &goal, &mut out)
                }
            }
            _ => cmd,
        };
        out.cmd = cmd;
        out
    }

    fn carry_step(&mut self, input: &ControlInput, object: TaskObject, out: &mut ControlOutput) -> Velocity2 {
        let carry = self.params.carry;
        let grasp = self.grasp.unwrap_or(Pose2::new(carry.delta_grasp, 0.0, 0.0));
        if self.anticipation {
            let (entry, goal) = match update_goal(&self.layout, object.class, &input.pose, &grasp) {
                Ok(g) => g,
                Err(e) => {
                    out.events.push(format!("error {e}"));
                    return Velocity2::ZERO;
                }
            };
            if self.last_look != Some(entry) {
                out.events.push(format!("look_at entry {entry}"));
                self.last_look = Some(entry);
            }
            let g = goal_vector(&input.pose, &goal, &carry);
            match carry_velocity(input.ee_disp, g, angle_diff(goal.theta, input.pose.theta), &carry) {
                CarryCommand::Reached => {
                    self.set_phase(TaskPhase::Place { object, entry }, out);
                    Velocity2::ZERO
                }
                CarryCommand::Blend(v) => {
                    self.set_phase(TaskPhase::CarryCompliant { object, entry: Some(entry) }, out);
                    v
                }
                CarryCommand::Direct(v) => {
                    self.set_phase(TaskPhase::DirectApproach { object, entry }, out);
                    v
                }
            }
        } else {
            let v = follow_operator(input.ee_disp, &carry);
            let still = input.ee_disp.x.abs() <= carry.tau_ee && input.ee_disp.y.abs() <= carry.tau_ee && input.velocity.linear_speed() < carry.tau_vel;
            if !still || input.now - self.carry_start < self.params.settle_grace {
                self.settle_since = None;
                return v;
            }
            let since = *self.settle_since.get_or_insert(input.now);
            if input.now - since < self.params.settle_time {
                return v;
            }
            // operator set it down: the slot nearest the held object
            let held = input.pose.compose(&grasp).position();
            let entry = self
                .layout
                .unoccupied(object.class)
                .min_by(|a, b| a.1.target.position().distance(held).total_cmp(&b.1.target.position().distance(held)))
                .map(|(i, _)| i);
            match entry {
                Some(entry) => self.set_phase(TaskPhase::Place { object, entry }, out),
                None => out.events.push(format!("error {}", Error::LayoutComplete)),
            }
            Velocity2::ZERO
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{FurnitureObject, RobotBody, WorldState, TICK};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn square_area(cx: f64, cy: f64, half: f64, class: ObjectClass) -> PickupArea {
        let poly = Polygon2::new(vec![
            Point2::new(cx - half, cy - half),
            Point2::new(cx + half, cy - half),
            Point2::new(cx + half, cy + half),
            Point2::new(cx - half, cy + half),
        ])
        .unwrap();
        PickupArea::new(poly, class).unwrap()
    }

    fn table(id: u32, x: f64, y: f64, th: f64) -> ObjectFeedback {
        ObjectFeedback {
            id,
            class: ObjectClass::Table,
            pose: Pose2::new(x, y, th),
        }
    }

    fn person(id: u32, x: f64, y: f64) -> PersonFeedback {
        PersonFeedback {
            id,
            root: Point2::new(x, y),
            velocity: Point2::ZERO,
            keypoints: Vec::new(),
        }
    }

    #[test]
    fn table_selection_boundary() {
        let area = square_area(0.0, 0.0, 1.0, ObjectClass::Table);
        let got = select_tables(&[table(1, 0.0, 0.0, 0.0), table(2, 1.01, 0.0, 0.0)], &area, None);
        assert_eq!(got.iter().map(|t| t.id).collect::<Vec<_>>(), vec![1]);
        assert!(select_tables(&[table(1, 0.0, 0.0, 0.0)], &area, Some(1)).is_empty());
    }

    #[test]
    fn table_selection_matches_predicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let area = square_area(1.0, -1.0, 1.5, ObjectClass::Table);
        let ts: Vec<ObjectFeedback> = (0..10).map(|k| table(k, rng.random_range(-2.0..4.0), rng.random_range(-4.0..2.0), 0.0)).collect();
        let expect: Vec<u32> = ts
            .iter()
            .filter(|t| (t.pose.x - 1.0).abs() <= 1.5 && (t.pose.y + 1.0).abs() <= 1.5)
            .map(|t| t.id)
            .collect();
        let got: Vec<u32> = select_tables(&ts, &area, None).iter().map(|t| t.id).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn person_selection() {
        let area = square_area(0.0, 0.0, 1.0, ObjectClass::Table);
        assert!(select_person(&[person(1, 3.0, 0.0)], &area, 2.5).is_none());
        let ps = [person(1, 2.0, 0.0), person(2, 0.0, 1.0)];
        assert_eq!(select_person(&ps, &area, 2.5).unwrap().id, 2);
        let tie = [person(5, 1.0, 0.0), person(3, 0.0, -1.0)];
        assert_eq!(select_person(&tie, &area, 2.5).unwrap().id, 3);
    }

    #[test]
    fn person_selection_matches_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let area = square_area(0.5, 0.5, 1.0, ObjectClass::Table);
        for _ in 0..200 {
            // coarse coordinates make ties common
            let ps: Vec<PersonFeedback> = (0..rng.random_range(0..6))
                .map(|k| person(rng.random_range(0..50) * 10 + k, rng.random_range(-4..5) as f64 * 0.5, rng.random_range(-4..5) as f64 * 0.5))
                .collect();
            let mut best: Option<(f64, u32)> = None;
            for p in &ps {
                let d = ((p.root.x - 0.5).powi(2) + (p.root.y - 0.5).powi(2)).sqrt();
                if d > 2.5 {
                    continue;
                }
                best = match best {
                    Some((bd, bid)) if bd < d || (bd == d && bid < p.id) => Some((bd, bid)),
                    _ => Some((d, p.id)),
                };
            }
            assert_eq!(select_person(&ps, &area, 2.5).map(|p| p.id), best.map(|b| b.1));
        }
    }

    #[test]
    fn pickup_pose_examples() {
        let t = [table(1, 0.0, 0.0, 0.0)];
        let g = anticipate_pickup_pose(Point2::new(2.0, 0.0), &t, 0.9).unwrap();
        assert_eq!((g.pose.x, g.pose.y, g.pose.theta), (-0.9, 0.0, 0.0));
        assert_eq!(g.side_sign, -1);
        let g = anticipate_pickup_pose(Point2::new(-2.0, 0.0), &t, 0.9).unwrap();
        assert_eq!((g.pose.x, g.pose.y), (0.9, 0.0));
        assert!((g.pose.theta - PI).abs() < 1e-12);
        let g = anticipate_pickup_pose(Point2::new(0.0, 2.0), &t, 0.9).unwrap();
        assert_eq!((g.pose.x, g.pose.y), (0.9, 0.0));
        assert!((g.pose.theta - PI).abs() < 1e-12);
        assert_eq!(g.side_sign, 1);
    }

    #[test]
    fn pickup_pose_agrees_with_grasp_pair() {
        let t = table(3, 1.0, 2.0, 0.7);
        let g = anticipate_pickup_pose(Point2::new(3.0, 3.5), &[t.clone()], 0.9).unwrap();
        let b = table_grasp_pair(&t.pose, g.side_sign).base_pose();
        assert!(b.position().distance(g.pose.position()) < 1e-12);
        assert!(angle_diff(b.theta, g.pose.theta).abs() < 1e-12);
    }

    #[test]
    fn pickup_picks_closest_table() {
        let ts = [table(1, 0.0, 0.0, 0.0), table(2, 3.0, 0.0, 0.0)];
        assert_eq!(anticipate_pickup_pose(Point2::new(2.2, 1.0), &ts, 0.9).unwrap().table, 2);
        assert!(anticipate_pickup_pose(Point2::ZERO, &[], 0.9).is_none());
    }

    #[test]
    fn goal_reached_thresholds() {
        let p = CarryParams::default();
        let g = Pose2::new(1.0, 1.0, 0.2);
        assert!(goal_reached(&g, &g, &Velocity2::ZERO, &p));
        assert!(goal_reached(&g, &Pose2::new(1.04, 1.0, 0.2), &Velocity2::new(0.04, 0.0, 0.0), &p));
        assert!(!goal_reached(&g, &Pose2::new(1.06, 1.0, 0.2), &Velocity2::ZERO, &p));
        for ex in 0..20 {
            for v in 0..20 {
                for th in 0..5 {
                    let (e, s, a) = (ex as f64 * 0.005, v as f64 * 0.005, th as f64 * 0.06);
                    let expect = e < 0.05 && s < 0.05 && a < 10f64.to_radians();
                    let r = Pose2::new(1.0 + e, 1.0, 0.2 + a);
                    assert_eq!(goal_reached(&g, &r, &Velocity2::new(0.0, s, 0.0), &p), expect, "{e} {s} {a}");
                }
            }
        }
    }

    #[test]
    fn align_examples() {
        let p = CarryParams::default();
        assert_eq!(align_base(&Pose2::IDENTITY, &Pose2::IDENTITY, &p), AlignCommand::Aligned);
        let AlignCommand::Move(v) = align_base(&Pose2::IDENTITY, &Pose2::new(0.0, 0.3, 0.0), &p) else {
            panic!("expected a command");
        };
        assert!(v.vy > 0.0);
    }

    #[test]
    fn align_converges_from_random_starts() {
        let p = CarryParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let target = Pose2::new(2.0, 1.0, 0.4);
            let r = rng.random_range(0.0..1.0);
            let a = rng.random_range(-PI..PI);
            let mut robot = Pose2::new(2.0 + r * a.cos(), 1.0 + r * a.sin(), 0.4 + rng.random_range(-0.8..0.8));
            let mut t = 0.0;
            loop {
                match align_base(&robot, &target, &p) {
                    AlignCommand::Aligned => break,
                    AlignCommand::Move(v) => robot = crate::geometry::integrate_twist(&robot, &v, TICK),
                }
                t += TICK;
                assert!(t < ALIGN_TIMEOUT, "no convergence from {robot:?}");
            }
        }
    }

    #[test]
    fn update_goal_examples() {
        let grasp = Pose2::new(0.9, 0.0, 0.0);
        let mut layout = Layout::new([(ObjectClass::Table, Pose2::new(2.0, 0.0, 0.0))]);
        let (e, g) = update_goal(&layout, ObjectClass::Table, &Pose2::new(-10.0, 5.0, 0.0), &grasp).unwrap();
        assert_eq!(e, 0);
        assert!(g.position().distance(Point2::new(1.1, 0.0)) < 1e-12);
        layout.entries.push(LayoutEntry {
            class: ObjectClass::Table,
            target: Pose2::new(7.0, 0.0, 0.0),
            occupied: false,
        });
        assert_eq!(update_goal(&layout, ObjectClass::Table, &Pose2::new(0.0, 0.0, 0.0), &grasp).unwrap().0, 0);
        assert_eq!(update_goal(&layout, ObjectClass::Table, &Pose2::new(4.6, 0.0, 0.0), &grasp).unwrap().0, 1);
        layout.occupy(0).unwrap();
        assert_eq!(update_goal(&layout, ObjectClass::Table, &Pose2::new(0.0, 0.0, 0.0), &grasp).unwrap().0, 1);
        layout.occupy(1).unwrap();
        assert_eq!(update_goal(&layout, ObjectClass::Table, &Pose2::IDENTITY, &grasp), Err(Error::LayoutComplete));
    }

    #[test]
    fn placement_pose_puts_object_on_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let target = Pose2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..PI));
            let grasp = Pose2::new(0.9 + rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.1..0.1));
            let robot = Pose2::new(0.0, 0.0, rng.random_range(-PI..PI));
            for class in [ObjectClass::Table, ObjectClass::Chair] {
                let base = placement_pose(&target, class, &grasp, &robot);
                let (t, a) = placement_error(class, &base.compose(&grasp), &target);
                assert!(t < 1e-9 && a < 1e-6);
            }
        }
    }

    #[test]
    fn update_goal_matches_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let layout = Layout::new((0..rng.random_range(1..6)).map(|_| (ObjectClass::Table, Pose2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.3))));
            let robot = Pose2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0);
            let mut best = (f64::INFINITY, 0);
            for (i, e) in layout.entries.iter().enumerate() {
                let d = ((e.target.x - robot.x).powi(2) + (e.target.y - robot.y).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, i);
                }
            }
            assert_eq!(update_goal(&layout, ObjectClass::Table, &robot, &Pose2::new(0.9, 0.0, 0.0)).unwrap().0, best.1);
        }
    }

    /// Independent evaluation of the carrying pseudocode, line by line.
    fn carry_oracle(ee: (f64, f64), goal: (f64, f64), dth: f64, p: &CarryParams) -> Option<(f64, f64, f64)> {
        let (dx_ee, dy_ee) = ee;
        let (mut vee_x, mut vee_y, mut wee) = (0.0, 0.0, 0.0);
        let gn = (goal.0 * goal.0 + goal.1 * goal.1).sqrt();
        if gn < p.tau_goal {
            return None;
        }
        if dx_ee.abs() > p.tau_ee {
            vee_x = p.k_e_lin * dx_ee;
        }
        if dy_ee.abs() > p.tau_ee {
            if dx_ee.abs() > p.tau_ee {
                wee = p.k_e_rot * dy_ee;
            } else {
                vee_y = p.k_e_lin * dy_ee;
            }
        }
        let (va_x, va_y, wa) = (p.k_a_lin * goal.0, p.k_a_lin * goal.1, p.k_a_rot * dth);
        let (vx, vy, w) = if gn > p.tau_direct || dx_ee.abs() > p.tau_ee {
            (vee_x + va_x, vee_y + va_y, wee + wa)
        } else {
            (p.k_direct * va_x, p.k_direct * va_y, p.k_direct * wa)
        };
        let s = (vx * vx + vy * vy).sqrt();
        let k = if s > p.v_max { p.v_max / s } else { 1.0 };
        Some((vx * k, vy * k, w.max(-p.w_max).min(p.w_max)))
    }

    #[test]
    fn carry_examples() {
        let p = CarryParams::default();
        assert_eq!(carry_velocity(Point2::ZERO, Point2::new(0.03, 0.0), 0.0, &p), CarryCommand::Reached);
        // pure attraction beyond the direct-approach radius
        let v = carry_velocity(Point2::ZERO, Point2::new(1.2, 0.0), 0.0, &p).velocity();
        assert!((v.vx - 0.24).abs() < 1e-12 && v.vy == 0.0 && v.omega == 0.0);
        // exactly on the radius the strict comparison selects the direct branch
        let c = carry_velocity(Point2::ZERO, Point2::new(1.0, 0.0), 0.0, &p);
        assert_eq!(c, CarryCommand::Direct(Velocity2::new(0.3, 0.0, 0.0)));
        let v = carry_velocity(Point2::new(0.10, 0.05), Point2::new(2.0, 0.0), 0.1, &p).velocity();
        assert!((v.vx - 0.3).abs() < 1e-12 && v.vy.abs() < 1e-12 && (v.omega - 0.125).abs() < 1e-12);
        let c = carry_velocity(Point2::new(0.01, 0.01), Point2::new(0.5, 0.0), 0.2, &p);
        assert!(matches!(c, CarryCommand::Direct(_)));
        let v = c.velocity();
        assert!((v.vx - 0.2).abs() < 1e-12 && v.vy == 0.0 && (v.omega - 2.0 * 0.5 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn carry_grid_matches_oracle() {
        let p = CarryParams::default();
        let ees = [-0.1, -0.03, -0.02, 0.0, 0.02, 0.03, 0.1];
        let goals = [0.0, 0.04, 0.3, 0.99, 1.5, -2.0];
        for &ex in &ees {
            for &ey in &ees {
                for &gx in &goals {
                    for &gy in &goals {
                        for &th in &[-1.0, 0.0, 0.3] {
                            let got = carry_velocity(Point2::new(ex, ey), Point2::new(gx, gy), th, &p);
                            match carry_oracle((ex, ey), (gx, gy), th, &p) {
                                None => assert_eq!(got, CarryCommand::Reached),
                                Some((vx, vy, w)) => {
                                    let v = got.velocity();
                                    assert!((v.vx - vx).abs() < 1e-9 && (v.vy - vy).abs() < 1e-9 && (v.omega - w).abs() < 1e-9);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_inputs_far_from_goal_give_zero() {
        let p = CarryParams {
            k_a_lin: 0.2,
            ..Default::default()
        };
        assert_eq!(follow_operator(Point2::ZERO, &p), Velocity2::ZERO);
        let v = carry_velocity(Point2::ZERO, Point2::new(3.0, 0.0), 0.0, &CarryParams { k_a_lin: 0.0, k_a_rot: 0.0, ..p }).velocity();
        assert_eq!(v, Velocity2::ZERO);
    }

    #[test]
    fn passive_operator_progress() {
        let p = CarryParams::default();
        let goal = Pose2::new(4.0, 1.0, 0.5);
        let mut robot = Pose2::new(0.0, 0.0, 0.0);
        let mut d = robot.position().distance(goal.position());
        loop {
            let g = goal_vector(&robot, &goal, &p);
            match carry_velocity(Point2::ZERO, g, angle_diff(goal.theta, robot.theta), &p) {
                CarryCommand::Reached => break,
                c => robot = crate::geometry::integrate_twist(&robot, &c.velocity(), TICK),
            }
            let nd = robot.position().distance(goal.position());
            assert!(nd < d, "distance grew to {nd}");
            d = nd;
        }
        assert!(d < p.tau_goal);
    }

    #[test]
    fn phase_graph() {
        let o = TaskObject {
            track: 1,
            class: ObjectClass::Table,
        };
        let idle = TaskPhase::Idle;
        assert!(idle.transition(TaskPhase::Place { object: o, entry: 0 }).is_err());
        let c = TaskPhase::CarryCompliant { object: o, entry: None };
        assert!(c.transition(TaskPhase::Place { object: o, entry: 0 }).is_ok());
        assert!(TaskPhase::DirectApproach { object: o, entry: 0 }.transition(TaskPhase::Place { object: o, entry: 0 }).is_ok());
        assert!(TaskPhase::ApproachPickup { object: o, side: 1, goal: Pose2::IDENTITY }.transition(TaskPhase::Place { object: o, entry: 0 }).is_err());
    }

    fn open_world(objects: Vec<FurnitureObject>, robot: Pose2) -> WorldState {
        let g = Grid2::new(0.05, Point2::new(-1.0, -3.0), 240, 160).unwrap();
        WorldState::new(Arc::new(g), RobotBody::new(robot), Vec::new(), objects)
    }

    #[test]
    fn place_bookkeeping() {
        let mut w = open_world(vec![FurnitureObject::new(1, ObjectClass::Table, Pose2::new(0.9, 0.0, 0.0))], Pose2::IDENTITY);
        w.attach(1, -1).unwrap();
        let mut layout = Layout::new([(ObjectClass::Table, Pose2::new(0.9, 0.0, 0.0)), (ObjectClass::Table, Pose2::new(5.0, 0.0, 0.0))]);
        let r = place_object(&mut w, &mut layout, 0, 0.05).unwrap();
        assert_eq!(r.translation_error, 0.0);
        assert_eq!(layout.remaining(), 1);
        assert!(w.robot.attached.is_none());
        let (e, _) = update_goal(&layout, ObjectClass::Table, &Pose2::IDENTITY, &Pose2::new(0.9, 0.0, 0.0)).unwrap();
        assert_eq!(e, 1);
        w.attach(1, -1).unwrap();
        let err = place_object(&mut w, &mut layout, 1, 0.05).unwrap_err();
        assert!(matches!(err, Error::PlacementVerificationFailed { .. }));
        assert!(layout.is_complete());
    }

    /// Closed loop with perfect localization and onboard perception.
    fn run_chair(world: &mut WorldState, layout: Layout, max_ticks: usize) -> (Controller, Vec<String>) {
        let area = square_area(world.objects[0].pose.x, world.objects[0].pose.y, 0.6, ObjectClass::Chair);
        let mut ctl = Controller::new(ControllerParams::default(), true, &world.static_map, layout, vec![area], None);
        let probe = crate::fusion::ReadProbe::default();
        let mut log = Vec::new();
        for _ in 0..max_ticks {
            let model = crate::fusion::SceneModel {
                static_grid: world.static_map.clone(),
                persons: Vec::new(),
                robot: Default::default(),
                objects: world
                    .objects
                    .iter()
                    .map(|o| crate::fusion::ObjectTrack::new(o.id, o.class, o.pose, nalgebra::Matrix3::identity(), world.time))
                    .collect(),
                stamp: world.time,
            };
            let fb = crate::fusion::emit_feedback(&model, world.robot.pose, Vec::new(), 6.0, &probe);
            let scan = crate::nav::simulate_lidar(world, &world.robot.pose, &Default::default());
            let onboard: Vec<OnboardDetection> = world
                .objects
                .iter()
                .filter(|o| Some(o.id) != world.robot.attached.map(|a| a.object_id))
                .map(|o| OnboardDetection {
                    handle: o.id,
                    class: o.class,
                    relative: world.robot.pose.relative(&o.pose),
                })
                .collect();
            let input = ControlInput {
                now: world.time,
                pose: world.robot.pose,
                velocity: world.robot.velocity,
                ee_disp: world.robot.ee_displacement(),
                attached: world.robot.attached.is_some(),
                feedback: Some(&fb),
                fresh_feedback: true,
                scan: Some(&scan),
                onboard: &onboard,
                command: None,
            };
            let out = ctl.step(&input);
            log.extend(out.events.iter().cloned());
            for a in &out.actions {
                match a {
                    Action::Attach { handle } => {
                        let _ = world.attach(*handle, 1);
                    }
                    Action::Detach { .. } => world.detach(),
                }
            }
            if ctl.is_done() {
                break;
            }
            world.step(out.cmd, TICK);
        }
        (ctl, log)
    }

    #[test]
    fn chair_task_unobstructed() {
        let mut w = open_world(vec![FurnitureObject::new(1, ObjectClass::Chair, Pose2::new(3.0, 0.0, 0.5))], Pose2::new(0.0, 0.0, 0.0));
        let target = Pose2::new(8.0, 2.0, -1.0);
        let (ctl, log) = run_chair(&mut w, Layout::new([(ObjectClass::Chair, target)]), 3000);
        assert!(ctl.is_done(), "{log:?}");
        let (t, a) = placement_error(ObjectClass::Chair, &w.objects[0].pose, &target);
        assert!(t <= 0.05 && a <= 3.0, "{t} {a}");
    }

    #[test]
    fn chair_task_detours_around_table() {
        let mut w = open_world(
            vec![
                FurnitureObject::new(1, ObjectClass::Chair, Pose2::new(2.0, 0.0, 0.0)),
                FurnitureObject::new(2, ObjectClass::Table, Pose2::new(5.0, 0.0, PI / 2.0)),
            ],
            Pose2::new(0.0, 0.0, 0.0),
        );
        let target = Pose2::new(8.5, 0.0, 0.0);
        let (ctl, log) = run_chair(&mut w, Layout::new([(ObjectClass::Chair, target)]), 4000);
        assert!(ctl.is_done(), "{log:?}");
        let (t, a) = placement_error(ObjectClass::Chair, &w.objects[0].pose, &target);
        assert!(t <= 0.05 && a <= 3.0, "{t} {a}");
        // the table never moved
        assert_eq!(w.objects[1].pose, Pose2::new(5.0, 0.0, PI / 2.0));
    }

    #[test]
    fn chair_already_placed() {
        let mut w = open_world(vec![FurnitureObject::new(1, ObjectClass::Chair, Pose2::new(3.0, 0.0, 0.0))], Pose2::new(2.475, 0.0, 0.0));
        let target = Pose2::new(3.0, 0.0, 0.0);
        let (ctl, log) = run_chair(&mut w, Layout::new([(ObjectClass::Chair, target)]), 50);
        assert!(ctl.is_done(), "{log:?}");
        assert!(placement_error(ObjectClass::Chair, &w.objects[0].pose, &target).0 < 1e-9);
    }

    proptest! {
        #[test]
        fn pickup_mirror_symmetry(tx in -3.0..3.0f64, ty in -3.0..3.0f64, th in 0.0..PI, px in -4.0..4.0f64, py in -4.0..4.0f64) {
            let t = table(1, tx, ty, th);
            let n = Point2::new(t.pose.theta.cos(), t.pose.theta.sin());
            let rel = Point2::new(px, py) - t.pose.position();
            let along = rel.dot(n);
            prop_assume!(along.abs() > 1e-6);
            let mirrored = Point2::new(px, py) - n.scale(2.0 * along);
            let a = anticipate_pickup_pose(Point2::new(px, py), &[t.clone()], 0.9).unwrap();
            let b = anticipate_pickup_pose(mirrored, &[t.clone()], 0.9).unwrap();
            prop_assert_eq!(a.side_sign, -b.side_sign);
            let mid = (a.pose.position() + b.pose.position()).scale(0.5);
            prop_assert!(mid.distance(t.pose.position()) < 1e-9);
            // goal on the side away from the person
            let dot = (t.pose.position() - Point2::new(px, py)).dot(n);
            prop_assert!(dot.signum() * (a.pose.position() - t.pose.position()).dot(n) > 0.0);
        }

        #[test]
        fn carry_continuous_in_blend_region(gx in 1.1..3.0f64, gy in -1.0..1.0f64, ex in 0.04..0.1f64, ey in -0.1..0.1f64) {
            let p = CarryParams::default();
            let a = carry_velocity(Point2::new(ex, ey), Point2::new(gx, gy), 0.1, &p).velocity();
            let b = carry_velocity(Point2::new(ex, ey), Point2::new(gx + 1e-7, gy), 0.1, &p).velocity();
            prop_assert!((a.vx - b.vx).abs() < 1e-6 && (a.vy - b.vy).abs() < 1e-6 && (a.omega - b.omega).abs() < 1e-6);
        }
    }
}
