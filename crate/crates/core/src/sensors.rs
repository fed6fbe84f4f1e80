//! Smart edge sensor nodes observing the world at the detection level, and
//! the lossy, jittery channel that carries their percepts to the backend.

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, cost, ray_cast, Grid2, Point2, Polygon2, Pose2, RayHit};
use crate::model::ObjectClass;
use crate::perception::table_pose_from_contour;
use crate::world::WorldState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_fov() -> f64 {
    0.6
}
fn default_range() -> f64 {
    8.0
}
fn default_rate() -> f64 {
    10.0
}
fn default_sigma_pos() -> f64 {
    0.05
}
fn default_sigma_theta() -> f64 {
    0.03
}
fn default_detection() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorNode {
    pub id: u32,
    pub pose: Pose2,
    #[serde(default = "default_fov")]
    pub fov_halfangle: f64,
    #[serde(default = "default_range")]
    pub range: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_sigma_pos")]
    pub noise_sigma_pos: f64,
    #[serde(default = "default_sigma_theta")]
    pub noise_sigma_theta: f64,
    #[serde(default = "default_detection")]
    pub detection_prob: f64,
}

impl SensorNode {
    pub fn new(id: u32, pose: Pose2) -> Self {
        Self {
            id,
            pose,
            fov_halfangle: default_fov(),
            range: default_range(),
            rate: default_rate(),
            noise_sigma_pos: default_sigma_pos(),
            noise_sigma_theta: default_sigma_theta(),
            detection_prob: default_detection(),
        }
    }

    /// Same node with all noise and misses switched off.
    pub fn ideal(mut self) -> Self {
        self.noise_sigma_pos = 0.0;
        self.noise_sigma_theta = 0.0;
        self.detection_prob = 1.0;
        self
    }

    pub fn validate(&self, tick_rate: f64) -> Result<()> {
        let ratio = tick_rate / self.rate;
        if !(self.rate > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::InvalidScenario(format!("node {}: rate {} does not divide {}", self.id, self.rate, tick_rate)));
        }
        if !(self.noise_sigma_pos >= 0.0 && self.noise_sigma_theta >= 0.0) {
            return Err(Error::InvalidScenario(format!("node {}: negative noise", self.id)));
        }
        if !(0.0..=1.0).contains(&self.detection_prob) || !(self.fov_halfangle > 0.0) || !(self.range > 0.0) {
            return Err(Error::InvalidScenario(format!("node {}: bad detection parameters", self.id)));
        }
        Ok(())
    }

    pub fn emits_at(&self, tick: u64, tick_rate: f64) -> bool {
        let period = (tick_rate / self.rate).round().max(1.0) as u64;
        tick % period == 0
    }

    /// Field of view, range and line of sight against the static map.
    pub fn can_see(&self, map: &Grid2, p: Point2) -> bool {
        let rel = p - self.pose.position();
        if rel.norm() > self.range {
            return false;
        }
        if rel.norm() > 0.0 && angle_diff(rel.y.atan2(rel.x), self.pose.theta).abs() > self.fov_halfangle {
            return false;
        }
        matches!(ray_cast(map, self.pose.position(), p, cost::LETHAL), Ok(RayHit::Clear))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonObs {
    /// Ground-truth identity, kept for evaluation only; fusion never reads it.
    pub truth_id: u32,
    pub root: Point2,
    pub keypoints: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectObs {
    pub truth_id: u32,
    pub class: ObjectClass,
    pub pose: Pose2,
    pub contour: Polygon2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptMsg {
    pub node_id: u32,
    pub seq: u64,
    pub stamp: f64,
    pub person_obs: Vec<PersonObs>,
    pub object_obs: Vec<ObjectObs>,
    pub robot_obs: Option<Pose2>,
}

impl PerceptMsg {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("percept serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Trace(e.to_string()))
    }
}

/// Independent random stream per (seed, node, tick), so nodes can be
/// evaluated in any order.
fn node_rng(seed: u64, node: u32, tick: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(node as u64);
    rng.set_word_pos((tick as u128) << 32);
    rng
}

struct Noise {
    pos: Option<Normal<f64>>,
    theta: Option<Normal<f64>>,
}

impl Noise {
    fn new(node: &SensorNode) -> Self {
        let mk = |s: f64| (s > 0.0).then(|| Normal::new(0.0, s).expect("finite sigma"));
        Self {
            pos: mk(node.noise_sigma_pos),
            theta: mk(node.noise_sigma_theta),
        }
    }

    fn point(&self, rng: &mut ChaCha8Rng, p: Point2) -> Point2 {
        match &self.pos {
            Some(n) => p + Point2::new(n.sample(rng), n.sample(rng)),
            None => p,
        }
    }

    fn pose(&self, rng: &mut ChaCha8Rng, p: Pose2) -> Pose2 {
        let q = self.point(rng, p.position());
        let dt = self.theta.as_ref().map_or(0.0, |n| n.sample(rng));
        Pose2::from_point(q, p.theta + dt)
    }
}

/// Noisy table mask contour: each corner perturbed, with two points inserted
/// on every edge between the perturbed corners.
pub fn synth_table_contour(rng: &mut ChaCha8Rng, node: &SensorNode, pose: &Pose2) -> Vec<Point2> {
    let noise = Noise::new(node);
    let corners: Vec<Point2> = ObjectClass::Table
        .model_corners()
        .iter()
        .map(|c| noise.point(rng, pose.transform_from(*c)))
        .collect();
    let mut out = Vec::with_capacity(12);
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        out.push(a);
        out.push(a + (b - a).scale(1.0 / 3.0));
        out.push(a + (b - a).scale(2.0 / 3.0));
    }
    out
}

/// One percept from `node` at the world's current tick.
pub fn observe(node: &SensorNode, world: &WorldState, seed: u64, seq: u64) -> PerceptMsg {
    let mut rng = node_rng(seed, node.id, world.tick);
    let noise = Noise::new(node);
    let map = &world.static_map;
    let detect = |rng: &mut ChaCha8Rng| node.detection_prob >= 1.0 || rng.random::<f64>() < node.detection_prob;

    let mut person_obs = Vec::new();
    for h in &world.humans {
        if !node.can_see(map, h.root) || !detect(&mut rng) {
            continue;
        }
        let root = noise.point(&mut rng, h.root);
        let keypoints = h.keypoints().into_iter().map(|k| noise.point(&mut rng, k)).collect();
        person_obs.push(PersonObs {
            truth_id: h.id,
            root,
            keypoints,
        });
    }

    let mut object_obs = Vec::new();
    for o in &world.objects {
        if !node.can_see(map, o.pose.position()) || !detect(&mut rng) {
            continue;
        }
        let pose = match o.class {
            ObjectClass::Table => {
                let contour = synth_table_contour(&mut rng, node, &o.pose);
                match table_pose_from_contour(&contour) {
                    Ok(fit) => fit.pose,
                    Err(_) => continue,
                }
            }
            ObjectClass::Chair => noise.pose(&mut rng, o.pose),
        };
        object_obs.push(ObjectObs {
            truth_id: o.id,
            class: o.class,
            pose,
            contour: o.class.footprint().transformed(&pose),
        });
    }

    let robot = world.robot.pose;
    let robot_obs = (node.can_see(map, robot.position()) && detect(&mut rng)).then(|| noise.pose(&mut rng, robot));

    PerceptMsg {
        node_id: node.id,
        seq,
        stamp: world.time,
        person_obs,
        object_obs,
        robot_obs,
    }
}

fn default_latency() -> f64 {
    0.05
}
fn default_jitter() -> f64 {
    0.02
}
fn default_drop() -> f64 {
    0.02
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    #[serde(default = "default_latency")]
    pub latency: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_drop")]
    pub drop_prob: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            latency: default_latency(),
            jitter: default_jitter(),
            drop_prob: default_drop(),
        }
    }
}

impl ChannelParams {
    pub const IDEAL: ChannelParams = ChannelParams {
        latency: 0.0,
        jitter: 0.0,
        drop_prob: 0.0,
    };
}

#[derive(Debug, Clone)]
struct InFlight {
    arrival: f64,
    node: u32,
    seq: u64,
    msg: PerceptMsg,
}

/// Delivery channel from all nodes to the backend. Per-node FIFO is kept by
/// never letting a message arrive before its predecessor from the same node.
#[derive(Debug, Clone)]
pub struct Channel {
    params: ChannelParams,
    rng: ChaCha8Rng,
    in_flight: Vec<InFlight>,
    last_arrival: BTreeMap<u32, f64>,
    next_seq: u64,
    pub dropped: u64,
}

impl Channel {
    pub fn new(params: ChannelParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Self {
            params,
            rng,
            in_flight: Vec::new(),
            last_arrival: BTreeMap::new(),
            next_seq: 0,
            dropped: 0,
        }
    }

    pub fn params(&self) -> ChannelParams {
        self.params
    }

    pub fn submit(&mut self, msg: PerceptMsg) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let drop = self.params.drop_prob > 0.0 && self.rng.random::<f64>() < self.params.drop_prob;
        let jitter = if self.params.jitter > 0.0 {
            self.rng.random_range(-self.params.jitter..=self.params.jitter)
        } else {
            0.0
        };
        if drop {
            self.dropped += 1;
            return;
        }
        let mut arrival = (msg.stamp + self.params.latency + jitter).max(msg.stamp);
        let last = self.last_arrival.entry(msg.node_id).or_insert(f64::NEG_INFINITY);
        arrival = arrival.max(*last);
        *last = arrival;
        self.in_flight.push(InFlight {
            arrival,
            node: msg.node_id,
            seq,
            msg,
        });
    }

    /// Messages due at `now`, ordered by (arrival, node, sequence).
    pub fn deliver(&mut self, now: f64) -> Vec<(f64, PerceptMsg)> {
        let (mut due, keep): (Vec<_>, Vec<_>) = self.in_flight.drain(..).partition(|m| m.arrival <= now + 1e-9);
        self.in_flight = keep;
        due.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.node.cmp(&b.node)).then(a.seq.cmp(&b.seq)));
        due.into_iter().map(|m| (m.arrival, m.msg)).collect()
    }

    pub fn pending(&self) -> usize {
        self.in_flight.len()
    }
}
