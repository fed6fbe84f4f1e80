//! Closed-loop experiment harness: world → sensor nodes → channel → fusion
//! backend → semantic feedback → robot controller → world, with per-run
//! reports, line-delimited traces, batch aggregation and replay.

pub mod report;
pub mod scenario;

pub use report::{batch_summary, mean_std, paired_deltas, write_csv, write_jsonl, DeltaRow, PlacementMetric, RunReport, SummaryRow};
pub use scenario::{AreaConfig, HumanConfig, LayoutConfig, MapConfig, ObjectConfig, RobotConfig, ScenarioConfig};

use crate::error::{Error, Result};
use crate::fusion::{emit_feedback, Backend, FeedbackMsg, ReadProbe, RobotState};
use crate::geometry::{integrate_twist, Point2, Pose2};
use crate::model::ObjectClass;
use crate::nav::{avg_safety_distance, min_safety_distance, simulate_lidar, LidarParams, SafetySample};
use crate::sensors::{observe, Channel, SensorNode};
use crate::task::{placement_error, Action, ControlInput, Controller, OnboardDetection, PlanStatus, TaskPhase, TouchCommand, PLACE_ANGLE_TOL};
use crate::world::{grasp_base_pose, ScriptStep, WorldState, TICK};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};

/// Feedback messages are emitted at this rate.
pub const FEEDBACK_RATE: f64 = 10.0;
/// Node id reserved for the robot's own short-range perception.
pub const ONBOARD_NODE_ID: u32 = u32::MAX - 1;
const ONBOARD_RANGE: f64 = 2.0;
const ONBOARD_SIGMA_POS: f64 = 0.01;
const ONBOARD_SIGMA_THETA: f64 = 0.01;

/// First line of every trace file: everything needed to rerun the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub anticipation: bool,
}

pub const TRACE_FORMAT: &str = "semfeed-trace v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TickRecord<'a> {
    tick: u64,
    phase: &'a str,
    cmd: [f64; 3],
    robot: Pose2,
    estimate: Pose2,
    humans: Vec<Point2>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attached: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    plan: Option<PlanStatus>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    events: Vec<String>,
}

/// Result of one run: its report and the full trace.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: Vec<String>,
}

impl RunOutcome {
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut text = self.trace.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Robot-side localization: odometry between external corrections. Each
/// correction is shifted by the odometry motion since its capture stamp.
struct Localizer {
    state: RobotState,
    odometry: Pose2,
    history: VecDeque<(f64, Pose2)>,
}

impl Localizer {
    fn new(pose: Pose2) -> Self {
        Self {
            state: RobotState {
                pose: Some(pose),
                ..Default::default()
            },
            odometry: pose,
            history: VecDeque::from([(0.0, pose)]),
        }
    }

    fn pose(&self) -> Pose2 {
        self.state.pose.expect("initialized")
    }

    fn predict(&mut self, body_velocity: crate::geometry::Velocity2, now: f64) {
        self.state.pose = Some(integrate_twist(&self.pose(), &body_velocity, TICK));
        self.state.velocity = body_velocity;
        self.odometry = integrate_twist(&self.odometry, &body_velocity, TICK);
        self.history.push_back((now, self.odometry));
        while self.history.len() > 64 {
            self.history.pop_front();
        }
    }

    fn correct(&mut self, stamp: f64, external: Pose2, now: f64, alpha: f64, stale_after: f64) {
        let then = self
            .history
            .iter()
            .min_by(|a, b| (a.0 - stamp).abs().total_cmp(&(b.0 - stamp).abs()))
            .map_or(self.odometry, |h| h.1);
        let moved = then.relative(&self.odometry);
        let shifted = external.compose(&moved);
        self.state = crate::fusion::correct_robot_localization(&self.state, shifted, stamp, now, alpha, stale_after);
    }
}

fn onboard_detections(world: &WorldState, seed: u64) -> Vec<OnboardDetection> {
    let mut node = SensorNode::new(ONBOARD_NODE_ID, world.robot.pose);
    node.fov_halfangle = 110f64.to_radians();
    node.range = ONBOARD_RANGE;
    node.noise_sigma_pos = ONBOARD_SIGMA_POS;
    node.noise_sigma_theta = ONBOARD_SIGMA_THETA;
    node.detection_prob = 1.0;
    let attached = world.robot.attached.map(|a| a.object_id);
    observe(&node, world, seed, world.tick)
        .object_obs
        .into_iter()
        .filter(|o| Some(o.truth_id) != attached)
        .map(|o| OnboardDetection {
            handle: o.truth_id,
            class: o.class,
            relative: world.robot.pose.relative(&o.pose),
        })
        .collect()
}

/// Touchscreen stand-in for the condition without anticipation: once the
/// robot is idle and a task is available, the command arrives after the
/// configured delay.
struct TouchScreen {
    delay: f64,
    pending: Option<(f64, TouchCommand)>,
    placed: Vec<u32>,
}

impl TouchScreen {
    fn next_task(&self, world: &WorldState, ctl: &Controller) -> Option<TouchCommand> {
        let attached = world.robot.attached.map(|a| a.object_id);
        for h in &world.humans {
            if let Some(id) = h.carry_target() {
                if Some(id) != attached && !self.placed.contains(&id) {
                    let o = world.object(id).ok()?;
                    let at = o.pose.position();
                    return Some(TouchCommand {
                        object_at: at,
                        grasp_hint: at + (at - h.root),
                        slot: None,
                    });
                }
            }
        }
        let carries_left = world.humans.iter().any(|h| {
            h.carry_target().is_some() || h.script[h.next_step..].iter().any(|s| matches!(s, ScriptStep::Carry { .. }))
        });
        if carries_left {
            return None;
        }
        let slot = ctl.layout.unoccupied(ObjectClass::Chair).next()?.0;
        let chair = world
            .objects
            .iter()
            .filter(|o| o.class == ObjectClass::Chair && !self.placed.contains(&o.id))
            .find(|o| ctl.areas.iter().any(|a| a.class_filter == ObjectClass::Chair && a.polygon.contains(o.pose.position())))?;
        Some(TouchCommand {
            object_at: chair.pose.position(),
            grasp_hint: chair.pose.position(),
            slot: Some(slot),
        })
    }

    fn poll(&mut self, now: f64, world: &WorldState, ctl: &Controller) -> Option<TouchCommand> {
        if !ctl.is_idle() || ctl.layout.is_complete() {
            self.pending = None;
            return None;
        }
        if self.pending.is_none() {
            self.pending = self.next_task(world, ctl).map(|c| (now + self.delay, c));
        }
        match self.pending {
            Some((at, c)) if now + 1e-9 >= at => {
                self.pending = None;
                Some(c)
            }
            _ => None,
        }
    }
}

fn digest(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// One closed-loop run.
pub fn run(scenario: &ScenarioConfig, seed: u64, anticipation: bool) -> Result<RunOutcome> {
    scenario.validate()?;
    let header = TraceHeader {
        format: TRACE_FORMAT.into(),
        scenario: scenario.clone(),
        seed,
        anticipation,
    };
    let mut trace = vec![serde_json::to_string(&header).map_err(|e| Error::Trace(e.to_string()))?];

    let mut world = scenario.build_world()?;
    let mut backend = Backend::new(scenario.fusion, &scenario.nodes);
    let mut channel = Channel::new(scenario.channel, seed);
    let mut ctl = Controller::new(
        scenario.controller,
        anticipation,
        &world.static_map,
        scenario.build_layout(),
        scenario.build_areas()?,
        scenario.robot.standby,
    );
    let mut truth_layout = scenario.build_layout();
    let mut localizer = Localizer::new(world.robot.pose);
    let probe = ReadProbe::default();
    let mut touch = TouchScreen {
        delay: scenario.human_input_delay,
        pending: None,
        placed: Vec::new(),
    };
    let lidar = LidarParams::default();
    let feedback_period = ((1.0 / TICK) / FEEDBACK_RATE).round() as u64;
    let max_ticks = (scenario.max_duration / TICK).round() as u64;

    let mut feedback: Option<FeedbackMsg> = None;
    let mut seq = 0u64;
    let mut safety = Vec::new();
    let mut placements = Vec::new();
    let mut path_length = 0.0;
    let mut first_deviation = None;
    let mut first_visible = None;
    let mut completed = false;

    while world.tick <= max_ticks {
        let now = world.time;
        let tick = world.tick;
        for node in &scenario.nodes {
            if node.emits_at(tick, 1.0 / TICK) {
                channel.submit(observe(node, &world, seed, seq));
                seq += 1;
            }
        }
        for (_, msg) in channel.deliver(now) {
            backend.ingest(&msg, now);
        }
        backend.maintain(now);
        let fresh = tick % feedback_period == 0;
        if fresh {
            let model = backend.snapshot(world.static_map.clone(), now);
            let fb = emit_feedback(&model, localizer.pose(), backend.take_robot_observations(), scenario.fusion.feedback_range, &probe);
            for (stamp, pose) in &fb.robot_poses {
                localizer.correct(*stamp, *pose, now, scenario.fusion.localization_alpha, scenario.fusion.stale_after);
            }
            feedback = Some(fb);
        }

        let navigating = matches!(
            ctl.phase,
            TaskPhase::Idle | TaskPhase::ApproachPickup { .. } | TaskPhase::ChairFetch { .. } | TaskPhase::ChairPush { .. } | TaskPhase::ReturnToStandby { .. }
        );
        let scan = navigating.then(|| simulate_lidar(&world, &world.robot.pose, &lidar));
        if first_visible.is_none() && scan.as_ref().is_some_and(|s| s.iter().any(|r| r.person.is_some())) {
            first_visible = Some(now);
        }
        let onboard = if matches!(ctl.phase, TaskPhase::AlignBase { .. } | TaskPhase::Grasp { .. }) {
            onboard_detections(&world, seed)
        } else {
            Vec::new()
        };
        let command = if anticipation { None } else { touch.poll(now, &world, &ctl) };

        let input = ControlInput {
            now,
            pose: localizer.pose(),
            velocity: world.robot.velocity,
            ee_disp: world.robot.ee_displacement(),
            attached: world.robot.attached.is_some(),
            feedback: feedback.as_ref(),
            fresh_feedback: fresh,
            scan: scan.as_deref(),
            onboard: &onboard,
            command,
        };
        let mut out = ctl.step(&input);
        if let Some(c) = command {
            out.events.insert(0, format!("touch command at ({:.3}, {:.3})", c.object_at.x, c.object_at.y));
        }
        if first_deviation.is_none() && matches!(out.plan, Some(PlanStatus::Deviating | PlanStatus::Blocked)) {
            first_deviation = Some(now);
        }

        for a in &out.actions {
            match *a {
                Action::Attach { handle } => {
                    let side = match world.object(handle) {
                        Ok(o) => {
                            let d = |s: i8| grasp_base_pose(o, s).position().distance(world.robot.pose.position());
                            if d(1) <= d(-1) {
                                1
                            } else {
                                -1
                            }
                        }
                        Err(_) => 1,
                    };
                    if let Err(e) = world.attach(handle, side) {
                        out.events.push(format!("attach failed: {e}"));
                    }
                }
                Action::Detach { entry } => {
                    let Some(o) = world.attached_object().cloned() else {
                        out.events.push("detach without object".into());
                        continue;
                    };
                    let co_carried = o.carried_by == crate::world::CarriedBy::RobotAndHuman;
                    let report = crate::task::place_object(&mut world, &mut truth_layout, entry, scenario.controller.carry.tau_goal);
                    let target = truth_layout.entries[entry].target;
                    let (t, deg) = placement_error(o.class, &o.pose, &target);
                    if let Err(e) = &report {
                        out.events.push(format!("{e}"));
                    }
                    touch.placed.push(o.id);
                    placements.push(PlacementMetric {
                        object: o.id,
                        class: o.class,
                        entry,
                        co_carried,
                        translation_error: t,
                        angular_error_deg: deg,
                        verified: t <= scenario.controller.carry.tau_goal && deg <= PLACE_ANGLE_TOL.to_degrees(),
                        time: now,
                    });
                }
            }
        }

        if !world.humans.is_empty() {
            safety.push(SafetySample {
                robot: world.robot.pose.position(),
                persons: world.humans.iter().map(|h| h.root).collect(),
            });
        }
        let record = TickRecord {
            tick,
            phase: ctl.phase.name(),
            cmd: [out.cmd.vx, out.cmd.vy, out.cmd.omega],
            robot: world.robot.pose,
            estimate: localizer.pose(),
            humans: world.humans.iter().map(|h| h.root).collect(),
            attached: world.robot.attached.map(|a| a.object_id),
            plan: out.plan,
            events: out.events,
        };
        trace.push(serde_json::to_string(&record).map_err(|e| Error::Trace(e.to_string()))?);

        if ctl.is_done() {
            completed = true;
            break;
        }
        if ctl.has_failed() || world.tick == max_ticks {
            break;
        }
        let before = world.robot.pose.position();
        world.step(out.cmd, TICK);
        path_length += world.robot.pose.position().distance(before);
        localizer.predict(world.robot.velocity, world.time);
    }

    let duration = world.time;
    let report = RunReport::new(
        scenario,
        seed,
        anticipation,
        completed,
        min_safety_distance(&safety, world.robot.footprint_radius),
        avg_safety_distance(&safety, world.robot.footprint_radius),
        path_length,
        duration,
        world.tick,
        placements,
        first_deviation,
        first_visible,
        probe.count(),
        digest(&trace),
    );
    Ok(RunOutcome { report, trace })
}

/// File name of a run's trace.
pub fn trace_file_name(scenario: &str, seed: u64, anticipation: bool, rep: u32) -> String {
    format!("trace_{scenario}_s{seed}_r{rep}_{}.jsonl", if anticipation { "on" } else { "off" })
}

/// One batch job.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub scenario: usize,
    pub seed: u64,
    pub rep: u32,
    pub anticipation: bool,
}

/// Runs every (scenario, seed, repetition, condition) in parallel and
/// returns the reports in job order. Traces are written to `trace_dir`.
pub fn batch(scenarios: &[ScenarioConfig], seeds: &[u64], reps: u32, trace_dir: Option<&Path>) -> Result<Vec<RunReport>> {
    let mut jobs = Vec::new();
    for (scenario, _) in scenarios.iter().enumerate() {
        for &seed in seeds {
            for rep in 0..reps.max(1) {
                for anticipation in [true, false] {
                    jobs.push(Job {
                        scenario,
                        seed,
                        rep,
                        anticipation,
                    });
                }
            }
        }
    }
    jobs.par_iter()
        .map(|j| {
            let s = &scenarios[j.scenario];
            let out = run(s, j.seed, j.anticipation)?;
            if let Some(dir) = trace_dir {
                out.write_trace(&dir.join(trace_file_name(&s.id, j.seed, j.anticipation, j.rep)))?;
            }
            let mut r = out.report;
            r.rep = j.rep;
            Ok(r)
        })
        .collect()
}

/// Outcome of replaying a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayResult {
    pub recorded_digest: String,
    pub replayed_digest: String,
    /// First differing line (0 is the header), if any.
    pub first_mismatch: Option<usize>,
    pub report: RunReport,
}

impl ReplayResult {
    pub fn matches(&self) -> bool {
        self.first_mismatch.is_none() && self.recorded_digest == self.replayed_digest
    }
}

/// Re-runs the scenario stored in a trace header and compares line by line.
pub fn replay_lines(lines: &[String]) -> Result<ReplayResult> {
    let first = lines.first().ok_or_else(|| Error::Trace("empty trace".into()))?;
    let header: TraceHeader = serde_json::from_str(first).map_err(|e| Error::Trace(format!("header: {e}")))?;
    if header.format != TRACE_FORMAT {
        return Err(Error::Trace(format!("unsupported trace format `{}`", header.format)));
    }
    let out = run(&header.scenario, header.seed, header.anticipation)?;
    let first_mismatch = (0..lines.len().max(out.trace.len())).find(|&k| lines.get(k) != out.trace.get(k));
    Ok(ReplayResult {
        recorded_digest: digest(lines),
        replayed_digest: out.report.digest.clone(),
        first_mismatch,
        report: out.report,
    })
}

pub fn replay(path: &Path) -> Result<ReplayResult> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    replay_lines(&lines)
}

/// Scenario files (`*.toml`) in a directory, sorted by name.
pub fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EMPTY: &str = r#"
id = "empty"
max_duration = 10.0

[map]
size = [4.0, 4.0]

[robot]
pose = { x = 1.0, y = 1.0, theta = 0.0 }
"#;

    #[test]
    fn empty_scenario_completes_instantly() {
        let s = ScenarioConfig::from_toml(EMPTY, None).unwrap();
        for anticipation in [true, false] {
            let out = run(&s, 3, anticipation).unwrap();
            assert!(out.report.completed);
            assert_eq!(out.report.ticks, 0);
            assert_eq!(out.report.min_safety_distance, None);
            assert!(out.report.placements.is_empty());
            assert_eq!(out.trace.len(), 2);
        }
    }

    #[test]
    fn standby_run_replays_bit_exact() {
        let text = EMPTY.replace(
            "pose = { x = 1.0, y = 1.0, theta = 0.0 }",
            "pose = { x = 1.0, y = 1.0, theta = 0.0 }\nstandby = { x = 3.0, y = 2.5, theta = 1.0 }",
        ) + "\n[[nodes]]\nid = 1\npose = { x = 0.2, y = 0.2, theta = 0.78 }\n[[humans]]\nid = 1\nstart = { x = 3.0, y = 1.0 }\n";
        let s = ScenarioConfig::from_toml(&text, None).unwrap();
        let a = run(&s, 7, true).unwrap();
        assert!(a.report.completed, "{:?}", a.trace.last());
        let r = replay_lines(&a.trace).unwrap();
        assert!(r.matches());
        assert_eq!(r.replayed_digest, a.report.digest);
        let mut tampered = a.trace.clone();
        tampered[3] = tampered[3].replace("\"tick\":2", "\"tick\":99");
        let r = replay_lines(&tampered).unwrap();
        assert_eq!(r.first_mismatch, Some(3));
        assert!(!r.matches());
    }

    #[test]
    fn localizer_compensates_lag() {
        let mut l = Localizer::new(Pose2::IDENTITY);
        let v = crate::geometry::Velocity2::new(0.4, 0.0, 0.0);
        for k in 1..=10 {
            l.predict(v, k as f64 * TICK);
        }
        // an exact but 0.1 s old external fix leaves the estimate unchanged
        let truth_then = Pose2::new(0.02 * 8.0, 0.0, 0.0);
        let before = l.pose();
        l.correct(0.4, truth_then, 0.5, 0.2, 0.5);
        assert!(l.pose().position().distance(before.position()) < 1e-9);
        // earlier corrections are not counted as motion
        let mut l = Localizer::new(Pose2::IDENTITY);
        for k in 1..=10 {
            l.predict(crate::geometry::Velocity2::ZERO, k as f64 * TICK);
        }
        for _ in 0..200 {
            l.correct(0.4, Pose2::new(0.1, 0.0, 0.0), 0.5, 0.2, 0.5);
        }
        assert!((l.pose().x - 0.1).abs() < 1e-9, "{:?}", l.pose());
    }
}
