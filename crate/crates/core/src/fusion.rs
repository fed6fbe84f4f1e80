//! Backend scene model: Kalman-filtered person and object tracks fused from
//! multiple sensor views, robot localization correction and the semantic
//! feedback message sent back to the robot.

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, fold_half_turn, half_turn_diff, wrap_angle, Grid2, Point2, Pose2, Velocity2};
use crate::model::ObjectClass;
use crate::sensors::{PerceptMsg, SensorNode};
use nalgebra::{Matrix2, Matrix2x4, Matrix3, Matrix4, Matrix4x2, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

const SPD_JITTER: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    pub person_gate: f64,
    pub object_gate: f64,
    /// Process noise spectral density of the constant-velocity person model.
    pub person_q: f64,
    /// Process noise of the static object model.
    pub object_q: f64,
    pub birth_hits: u32,
    pub death_after: f64,
    pub localization_alpha: f64,
    pub stale_after: f64,
    pub feedback_range: f64,
    pub initial_velocity_var: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            person_gate: 0.7,
            object_gate: 0.5,
            person_q: 0.05,
            object_q: 0.001,
            birth_hits: 3,
            death_after: 1.0,
            localization_alpha: 0.2,
            stale_after: 0.5,
            feedback_range: 6.0,
            initial_velocity_var: 1.0,
        }
    }
}

fn ensure_spd4(p: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let sym = (p + p.transpose()) * 0.5;
    if sym.iter().all(|v| v.is_finite()) && (sym + Matrix4::identity() * SPD_JITTER).cholesky().is_some() {
        Ok(sym)
    } else {
        Err(Error::FilterDivergence)
    }
}

fn ensure_spd3(p: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let sym = (p + p.transpose()) * 0.5;
    if sym.iter().all(|v| v.is_finite()) && (sym + Matrix3::identity() * SPD_JITTER).cholesky().is_some() {
        Ok(sym)
    } else {
        Err(Error::FilterDivergence)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonTrack {
    pub id: u32,
    /// `[x, y, vx, vy]`.
    pub state: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub keypoints: Vec<Point2>,
    /// Time the state refers to.
    pub time: f64,
    pub last_update: f64,
    pub hits: u32,
}

impl PersonTrack {
    pub fn new(id: u32, root: Point2, keypoints: Vec<Point2>, r: Matrix2<f64>, velocity_var: f64, stamp: f64) -> Self {
        let mut cov = Matrix4::zeros();
        cov.fixed_view_mut::<2, 2>(0, 0).copy_from(&r);
        cov[(2, 2)] = velocity_var;
        cov[(3, 3)] = velocity_var;
        Self {
            id,
            state: Vector4::new(root.x, root.y, 0.0, 0.0),
            cov,
            keypoints,
            time: stamp,
            last_update: stamp,
            hits: 1,
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.state[0], self.state[1])
    }

    pub fn velocity(&self) -> Point2 {
        Point2::new(self.state[2], self.state[3])
    }

    /// Constant-velocity prediction with white-acceleration process noise.
    pub fn predict(&mut self, dt: f64, q: f64) {
        if dt <= 0.0 {
            return;
        }
        let mut f = Matrix4::identity();
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;
        let q2 = q * q;
        let (a, b, c) = (dt.powi(3) / 3.0 * q2, dt.powi(2) / 2.0 * q2, dt * q2);
        let qm = Matrix4::new(a, 0.0, b, 0.0, 0.0, a, 0.0, b, b, 0.0, c, 0.0, 0.0, b, 0.0, c);
        self.state = f * self.state;
        self.cov = f * self.cov * f.transpose() + qm;
        self.time += dt;
        // the translation keeps keypoints attached to the moving root
        let shift = Point2::new(self.state[2], self.state[3]).scale(dt);
        for k in &mut self.keypoints {
            *k = *k + shift;
        }
    }

    pub fn innovation_cov(&self, r: &Matrix2<f64>) -> Matrix2<f64> {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned() + r
    }

    /// Joseph-form position update. A singular innovation covariance (only
    /// possible with zero noise) leaves the track unchanged.
    pub fn update(&mut self, z: Point2, r: &Matrix2<f64>) -> Result<()> {
        let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let s = h * self.cov * h.transpose() + r;
        let Some(s_inv) = s.try_inverse() else {
            return Ok(());
        };
        let k: Matrix4x2<f64> = self.cov * h.transpose() * s_inv;
        let nu = Vector2::new(z.x, z.y) - h * self.state;
        let shift = Point2::new(k[(0, 0)] * nu[0] + k[(0, 1)] * nu[1], k[(1, 0)] * nu[0] + k[(1, 1)] * nu[1]);
        self.state += k * nu;
        let ikh = Matrix4::identity() - k * h;
        self.cov = ensure_spd4(&(ikh * self.cov * ikh.transpose() + k * r * k.transpose()))?;
        for p in &mut self.keypoints {
            *p = *p + shift;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub id: u32,
    pub class: ObjectClass,
    /// `[x, y, θ]`, θ folded into `[0, π)` for tables.
    pub state: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub time: f64,
    pub last_update: f64,
    pub hits: u32,
}

impl ObjectTrack {
    pub fn new(id: u32, class: ObjectClass, pose: Pose2, r: Matrix3<f64>, stamp: f64) -> Self {
        let mut t = Self {
            id,
            class,
            state: Vector3::new(pose.x, pose.y, pose.theta),
            cov: r,
            time: stamp,
            last_update: stamp,
            hits: 1,
        };
        t.normalize_yaw();
        t
    }

    fn normalize_yaw(&mut self) {
        self.state[2] = if self.class.half_turn_symmetric() {
            fold_half_turn(self.state[2])
        } else {
            wrap_angle(self.state[2])
        };
    }

    pub fn pose(&self) -> Pose2 {
        Pose2 {
            x: self.state[0],
            y: self.state[1],
            theta: self.state[2],
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.state[0], self.state[1])
    }

    /// Static model: only the covariance grows.
    pub fn predict(&mut self, dt: f64, q: f64) {
        if dt <= 0.0 {
            return;
        }
        self.cov += Matrix3::identity() * (q * q * dt);
        self.time += dt;
    }

    pub fn innovation_cov(&self, r: &Matrix3<f64>) -> Matrix2<f64> {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned() + r.fixed_view::<2, 2>(0, 0)
    }

    /// Pose update; the yaw innovation honours the half-turn symmetry of tables.
    pub fn update(&mut self, z: Pose2, r: &Matrix3<f64>) -> Result<()> {
        let s = self.cov + r;
        let Some(s_inv) = s.try_inverse() else {
            return Ok(());
        };
        let k = self.cov * s_inv;
        let dth = if self.class.half_turn_symmetric() {
            half_turn_diff(z.theta, self.state[2])
        } else {
            angle_diff(z.theta, self.state[2])
        };
        let nu = Vector3::new(z.x - self.state[0], z.y - self.state[1], dth);
        self.state += k * nu;
        self.normalize_yaw();
        let ikh = Matrix3::identity() - k;
        self.cov = ensure_spd3(&(ikh * self.cov * ikh.transpose() + k * r * k.transpose()))?;
        Ok(())
    }
}

pub fn kf_predict_person(track: &PersonTrack, dt: f64, q: f64) -> PersonTrack {
    let mut t = track.clone();
    t.predict(dt, q);
    t
}

pub fn kf_update_person(track: &PersonTrack, z: Point2, r: &Matrix2<f64>) -> Result<PersonTrack> {
    let mut t = track.clone();
    t.update(z, r)?;
    Ok(t)
}

pub fn kf_predict_object(track: &ObjectTrack, dt: f64, q: f64) -> ObjectTrack {
    let mut t = track.clone();
    t.predict(dt, q);
    t
}

pub fn kf_update_object(track: &ObjectTrack, z: Pose2, r: &Matrix3<f64>) -> Result<ObjectTrack> {
    let mut t = track.clone();
    t.update(z, r)?;
    Ok(t)
}

/// Greedy nearest-neighbour assignment. Pairs farther apart than `gate`
/// (Euclidean) are never matched; the remaining pairs are taken in order of
/// increasing Mahalanobis distance under `innovation`.
pub fn associate(predicted: &[Point2], innovation: &[Matrix2<f64>], observations: &[Point2], gate: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (t, (p, s)) in predicted.iter().zip(innovation).enumerate() {
        let s_inv = s.try_inverse().unwrap_or_else(Matrix2::identity);
        for (o, z) in observations.iter().enumerate() {
            let d = *z - *p;
            if d.norm() > gate {
                continue;
            }
            let v = Vector2::new(d.x, d.y);
            pairs.push(((v.transpose() * s_inv * v)[0], t, o));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_t = vec![false; predicted.len()];
    let mut used_o = vec![false; observations.len()];
    let mut out = Vec::new();
    for (_, t, o) in pairs {
        if !used_t[t] && !used_o[o] {
            used_t[t] = true;
            used_o[o] = true;
            out.push((t, o));
        }
    }
    out.sort();
    out
}

/// Tracked robot pose with its velocity and the staleness bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Option<Pose2>,
    pub velocity: Velocity2,
    pub stale_ignored: u64,
}

/// Complementary blend of the estimate towards an external pose. Messages
/// older than `stale_after` are counted and ignored; the first accepted
/// message initializes the estimate.
pub fn correct_robot_localization(est: &RobotState, external: Pose2, stamp: f64, now: f64, alpha: f64, stale_after: f64) -> RobotState {
    let mut out = *est;
    if now - stamp > stale_after {
        out.stale_ignored += 1;
        return out;
    }
    out.pose = Some(match est.pose {
        None => external,
        Some(p) => Pose2::new(
            p.x + alpha * (external.x - p.x),
            p.y + alpha * (external.y - p.y),
            p.theta + alpha * angle_diff(external.theta, p.theta),
        ),
    });
    out
}

#[derive(Debug, Clone, Copy)]
struct NodeNoise {
    sigma_pos: f64,
    sigma_theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FusionStats {
    pub messages: u64,
    pub person_updates: u64,
    pub object_updates: u64,
    pub births: u64,
    pub deaths: u64,
    pub divergences: u64,
}

/// Single logical event loop consuming delivered percepts in channel order.
#[derive(Debug, Clone)]
pub struct Backend {
    pub params: FusionParams,
    nodes: BTreeMap<u32, NodeNoise>,
    persons: Vec<PersonTrack>,
    objects: Vec<ObjectTrack>,
    robot: RobotState,
    robot_obs: Vec<(f64, Pose2)>,
    next_person_id: u32,
    next_object_id: u32,
    pub stats: FusionStats,
}

impl Backend {
    pub fn new(params: FusionParams, nodes: &[SensorNode]) -> Self {
        Self {
            params,
            nodes: nodes
                .iter()
                .map(|n| {
                    (
                        n.id,
                        NodeNoise {
                            sigma_pos: n.noise_sigma_pos,
                            sigma_theta: n.noise_sigma_theta,
                        },
                    )
                })
                .collect(),
            persons: Vec::new(),
            objects: Vec::new(),
            robot: RobotState::default(),
            robot_obs: Vec::new(),
            next_person_id: 1,
            next_object_id: 1,
            stats: FusionStats::default(),
        }
    }

    fn noise(&self, node: u32) -> NodeNoise {
        self.nodes.get(&node).copied().unwrap_or(NodeNoise {
            sigma_pos: 0.05,
            sigma_theta: 0.03,
        })
    }

    pub fn ingest(&mut self, msg: &PerceptMsg, now: f64) {
        self.stats.messages += 1;
        let n = self.noise(msg.node_id);
        let rp = Matrix2::identity() * (n.sigma_pos * n.sigma_pos);
        let ro = Matrix3::from_diagonal(&Vector3::new(
            n.sigma_pos * n.sigma_pos,
            n.sigma_pos * n.sigma_pos,
            n.sigma_theta * n.sigma_theta,
        ));
        self.ingest_persons(msg, &rp);
        self.ingest_objects(msg, &ro);
        if let Some(p) = msg.robot_obs {
            self.robot = correct_robot_localization(&self.robot, p, msg.stamp, now, self.params.localization_alpha, self.params.stale_after);
            if now - msg.stamp <= self.params.stale_after {
                self.robot_obs.push((msg.stamp, p));
            }
        }
    }

    fn ingest_persons(&mut self, msg: &PerceptMsg, r: &Matrix2<f64>) {
        let q = self.params.person_q;
        for t in &mut self.persons {
            t.predict(msg.stamp - t.time, q);
        }
        let predicted: Vec<Point2> = self.persons.iter().map(|t| t.position()).collect();
        let innov: Vec<Matrix2<f64>> = self.persons.iter().map(|t| t.innovation_cov(r)).collect();
        let obs: Vec<Point2> = msg.person_obs.iter().map(|o| o.root).collect();
        let matches = associate(&predicted, &innov, &obs, self.params.person_gate);
        let mut matched = vec![false; obs.len()];
        for (ti, oi) in matches {
            matched[oi] = true;
            let o = &msg.person_obs[oi];
            let t = &mut self.persons[ti];
            t.keypoints = o.keypoints.clone();
            match t.update(o.root, r) {
                Ok(()) => {
                    t.hits += 1;
                    t.last_update = t.last_update.max(msg.stamp);
                    self.stats.person_updates += 1;
                }
                Err(_) => {
                    self.stats.divergences += 1;
                    let id = t.id;
                    *t = PersonTrack::new(id, o.root, o.keypoints.clone(), *r, self.params.initial_velocity_var, msg.stamp);
                }
            }
        }
        for (oi, o) in msg.person_obs.iter().enumerate() {
            if !matched[oi] {
                let id = self.next_person_id;
                self.next_person_id += 1;
                self.stats.births += 1;
                self.persons
                    .push(PersonTrack::new(id, o.root, o.keypoints.clone(), *r, self.params.initial_velocity_var, msg.stamp));
            }
        }
    }

    fn ingest_objects(&mut self, msg: &PerceptMsg, r: &Matrix3<f64>) {
        let q = self.params.object_q;
        for t in &mut self.objects {
            t.predict(msg.stamp - t.time, q);
        }
        for class in [ObjectClass::Table, ObjectClass::Chair] {
            let tracks: Vec<usize> = (0..self.objects.len()).filter(|&i| self.objects[i].class == class).collect();
            let obs: Vec<usize> = (0..msg.object_obs.len()).filter(|&i| msg.object_obs[i].class == class).collect();
            let predicted: Vec<Point2> = tracks.iter().map(|&i| self.objects[i].position()).collect();
            let innov: Vec<Matrix2<f64>> = tracks.iter().map(|&i| self.objects[i].innovation_cov(r)).collect();
            let zs: Vec<Point2> = obs.iter().map(|&i| msg.object_obs[i].pose.position()).collect();
            let matches = associate(&predicted, &innov, &zs, self.params.object_gate);
            let mut matched = vec![false; obs.len()];
            for (ti, oi) in matches {
                matched[oi] = true;
                let z = msg.object_obs[obs[oi]].pose;
                let t = &mut self.objects[tracks[ti]];
                match t.update(z, r) {
                    Ok(()) => {
                        t.hits += 1;
                        t.last_update = t.last_update.max(msg.stamp);
                        self.stats.object_updates += 1;
                    }
                    Err(_) => {
                        self.stats.divergences += 1;
                        let id = t.id;
                        *t = ObjectTrack::new(id, class, z, *r, msg.stamp);
                    }
                }
            }
            for (k, &oi) in obs.iter().enumerate() {
                if !matched[k] {
                    let id = self.next_object_id;
                    self.next_object_id += 1;
                    self.stats.births += 1;
                    self.objects.push(ObjectTrack::new(id, class, msg.object_obs[oi].pose, *r, msg.stamp));
                }
            }
        }
    }

    /// Drops tracks without an update for longer than the death time.
    pub fn maintain(&mut self, now: f64) {
        let limit = self.params.death_after;
        let before = self.persons.len() + self.objects.len();
        self.persons.retain(|t| now - t.last_update <= limit);
        self.objects.retain(|t| now - t.last_update <= limit);
        self.stats.deaths += (before - self.persons.len() - self.objects.len()) as u64;
    }

    /// Confirmed person tracks.
    pub fn persons(&self) -> impl Iterator<Item = &PersonTrack> {
        let h = self.params.birth_hits;
        self.persons.iter().filter(move |t| t.hits >= h)
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectTrack> {
        let h = self.params.birth_hits;
        self.objects.iter().filter(move |t| t.hits >= h)
    }

    pub fn tentative_persons(&self) -> usize {
        self.persons.iter().filter(|t| t.hits < self.params.birth_hits).count()
    }

    pub fn robot(&self) -> RobotState {
        self.robot
    }

    /// Snapshot with every confirmed track predicted to `now`.
    pub fn snapshot(&self, static_grid: Arc<Grid2>, now: f64) -> SceneModel {
        SceneModel {
            static_grid,
            persons: self
                .persons()
                .map(|t| kf_predict_person(t, now - t.time, self.params.person_q))
                .collect(),
            robot: self.robot,
            objects: self.objects().cloned().collect(),
            stamp: now,
        }
    }

    /// Robot observations accepted since the last call.
    pub fn take_robot_observations(&mut self) -> Vec<(f64, Pose2)> {
        std::mem::take(&mut self.robot_obs)
    }
}

#[derive(Debug, Clone)]
pub struct SceneModel {
    pub static_grid: Arc<Grid2>,
    pub persons: Vec<PersonTrack>,
    pub robot: RobotState,
    pub objects: Vec<ObjectTrack>,
    pub stamp: f64,
}

#[derive(Serialize)]
struct PersonLine<'a> {
    id: u32,
    state: [f64; 4],
    cov: [f64; 16],
    keypoints: &'a [Point2],
    last_update: f64,
    hits: u32,
}

#[derive(Serialize)]
struct ObjectLine {
    id: u32,
    class: ObjectClass,
    state: [f64; 3],
    cov: [f64; 9],
    last_update: f64,
    hits: u32,
}

#[derive(Serialize)]
struct SceneLine<'a> {
    stamp: f64,
    robot: RobotState,
    persons: Vec<PersonLine<'a>>,
    objects: Vec<ObjectLine>,
}

impl SceneModel {
    /// One JSON line with tracks ordered by id.
    pub fn to_line(&self) -> String {
        let mut persons: Vec<PersonLine> = self
            .persons
            .iter()
            .map(|t| PersonLine {
                id: t.id,
                state: t.state.into(),
                cov: t.cov.as_slice().try_into().expect("4x4"),
                keypoints: &t.keypoints,
                last_update: t.last_update,
                hits: t.hits,
            })
            .collect();
        persons.sort_by_key(|p| p.id);
        let mut objects: Vec<ObjectLine> = self
            .objects
            .iter()
            .map(|t| ObjectLine {
                id: t.id,
                class: t.class,
                state: t.state.into(),
                cov: t.cov.as_slice().try_into().expect("3x3"),
                last_update: t.last_update,
                hits: t.hits,
            })
            .collect();
        objects.sort_by_key(|o| o.id);
        serde_json::to_string(&SceneLine {
            stamp: self.stamp,
            robot: self.robot,
            persons,
            objects,
        })
        .expect("scene serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonFeedback {
    pub id: u32,
    pub root: Point2,
    pub velocity: Point2,
    pub keypoints: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeedback {
    pub id: u32,
    pub class: ObjectClass,
    pub pose: Pose2,
}

/// Counts every read of the person channel of a feedback message.
#[derive(Debug, Clone, Default)]
pub struct ReadProbe(Arc<AtomicU64>);

impl ReadProbe {
    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Backend-to-robot semantic feedback.
#[derive(Debug, Clone)]
pub struct FeedbackMsg {
    pub stamp: f64,
    /// External robot pose observations, with their capture stamps.
    pub robot_poses: Vec<(f64, Pose2)>,
    persons: Vec<PersonFeedback>,
    pub objects: Vec<ObjectFeedback>,
    probe: ReadProbe,
}

impl FeedbackMsg {
    pub fn persons(&self) -> &[PersonFeedback] {
        self.probe.0.fetch_add(1, Ordering::Relaxed);
        &self.persons
    }

    pub fn person_ids(&self) -> Vec<u32> {
        self.persons().iter().map(|p| p.id).collect()
    }
}

/// Bundles localization, nearby persons and object tracks for the robot.
pub fn emit_feedback(model: &SceneModel, robot_pose: Pose2, robot_poses: Vec<(f64, Pose2)>, range: f64, probe: &ReadProbe) -> FeedbackMsg {
    let persons = model
        .persons
        .iter()
        .filter(|t| t.position().distance(robot_pose.position()) <= range)
        .map(|t| PersonFeedback {
            id: t.id,
            root: t.position(),
            velocity: t.velocity(),
            keypoints: t.keypoints.clone(),
        })
        .collect();
    let objects = model
        .objects
        .iter()
        .map(|t| ObjectFeedback {
            id: t.id,
            class: t.class,
            pose: t.pose(),
        })
        .collect();
    FeedbackMsg {
        stamp: model.stamp,
        robot_poses,
        persons,
        objects,
        probe: probe.clone(),
    }
}
