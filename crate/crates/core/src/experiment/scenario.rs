//! Scenario files: map, sensor network, scripted humans, furniture, pickup
//! areas, target layout and every tunable parameter, loaded from TOML.

use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::geometry::{cost, Grid2, Point2, Polygon2, Pose2};
use crate::model::ObjectClass;
use crate::sensors::{ChannelParams, SensorNode};
use crate::task::{ControllerParams, Layout, PickupArea};
use crate::world::{FurnitureObject, HumanAgent, RobotBody, ScriptStep, WorldState, TICK};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Static map: either a grid file or an inline rectangle list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    /// Grid file in the `GRID2 v1` format, relative to the scenario file.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub origin: [f64; 2],
    /// Width and height in metres.
    #[serde(default)]
    pub size: [f64; 2],
    /// Surround the map with a one-cell wall.
    #[serde(default = "yes")]
    pub border: bool,
    /// Lethal rectangles `[x0, y0, x1, y1]`.
    #[serde(default)]
    pub walls: Vec<[f64; 4]>,
}

fn default_resolution() -> f64 {
    0.05
}

fn yes() -> bool {
    true
}

fn default_delay() -> f64 {
    20.0
}

impl MapConfig {
    pub fn build(&self) -> Result<Grid2> {
        if let Some(f) = &self.file {
            let file = std::fs::File::open(f).map_err(|e| Error::InvalidScenario(format!("map file {}: {e}", f.display())))?;
            return Grid2::read_from(std::io::BufReader::new(file));
        }
        let w = (self.size[0] / self.resolution).round() as usize;
        let h = (self.size[1] / self.resolution).round() as usize;
        let mut g = Grid2::new(self.resolution, Point2::new(self.origin[0], self.origin[1]), w, h)
            .map_err(|e| Error::InvalidScenario(format!("map: {e}")))?;
        for r in &self.walls {
            let poly = Polygon2::new(vec![
                Point2::new(r[0], r[1]),
                Point2::new(r[2], r[1]),
                Point2::new(r[2], r[3]),
                Point2::new(r[0], r[3]),
            ])
            .map_err(|e| Error::InvalidScenario(format!("wall {r:?}: {e}")))?;
            g.stamp_polygon(&poly, cost::LETHAL);
        }
        if self.border {
            let (w, h) = (g.width(), g.height());
            for i in 0..w {
                for j in [0, h - 1] {
                    g.set(crate::geometry::Cell::new(i, j), cost::LETHAL)?;
                }
            }
            for j in 0..h {
                for i in [0, w - 1] {
                    g.set(crate::geometry::Cell::new(i, j), cost::LETHAL)?;
                }
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub pose: Pose2,
    /// Pose to drive to once the layout is complete.
    #[serde(default)]
    pub standby: Option<Pose2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanConfig {
    pub id: u32,
    pub start: Point2,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub id: u32,
    pub class: ObjectClass,
    pub pose: Pose2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaConfig {
    pub class: ObjectClass,
    pub polygon: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    pub class: ObjectClass,
    pub target: Pose2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: String,
    pub max_duration: f64,
    #[serde(default)]
    pub seed: u64,
    /// Touchscreen input delay standing in for the interaction that
    /// anticipation replaces.
    #[serde(default = "default_delay")]
    pub human_input_delay: f64,
    pub map: MapConfig,
    pub robot: RobotConfig,
    #[serde(default)]
    pub nodes: Vec<SensorNode>,
    #[serde(default)]
    pub humans: Vec<HumanConfig>,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
    #[serde(default)]
    pub pickup_areas: Vec<AreaConfig>,
    #[serde(default)]
    pub layout: Vec<LayoutConfig>,
    #[serde(default)]
    pub controller: ControllerParams,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub fusion: FusionParams,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::InvalidScenario(e.to_string()))?;
        if let (Some(f), Some(dir)) = (&cfg.map.file, base_dir) {
            if f.is_relative() {
                cfg.map.file = Some(dir.join(f));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidScenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(format!("{}: {m}", self.id)));
        if self.id.is_empty() {
            return bad("empty id".into());
        }
        if !(self.max_duration > 0.0 && self.max_duration.is_finite()) {
            return bad("max_duration must be positive".into());
        }
        if !(self.human_input_delay >= 0.0) {
            return bad("human_input_delay must be non-negative".into());
        }
        let grid = self.map.build()?;
        let inside = |p: Point2| grid.contains_point(p);
        if !inside(self.robot.pose.position()) {
            return bad("robot starts off the map".into());
        }
        if self.robot.standby.is_some_and(|s| !inside(s.position())) {
            return bad("standby pose off the map".into());
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return bad(format!("duplicate node id {}", n.id));
            }
            n.validate(1.0 / TICK)?;
        }
        let object_ids: BTreeSet<u32> = self.objects.iter().map(|o| o.id).collect();
        if object_ids.len() != self.objects.len() {
            return bad("duplicate object id".into());
        }
        for o in &self.objects {
            if !inside(o.pose.position()) {
                return bad(format!("object {} off the map", o.id));
            }
        }
        let mut human_ids = BTreeSet::new();
        for h in &self.humans {
            if !human_ids.insert(h.id) {
                return bad(format!("duplicate human id {}", h.id));
            }
            if !inside(h.start) {
                return bad(format!("human {} starts off the map", h.id));
            }
            for s in &h.script {
                match s {
                    ScriptStep::Walk { points, speed } => {
                        if !(*speed > 0.0) || points.iter().any(|p| !inside(*p)) {
                            return bad(format!("human {}: bad walk step", h.id));
                        }
                    }
                    ScriptStep::Wait { seconds } => {
                        if !(*seconds >= 0.0) {
                            return bad(format!("human {}: negative wait", h.id));
                        }
                    }
                    ScriptStep::Carry { object, gain, .. } => {
                        if !object_ids.contains(object) {
                            return bad(format!("human {}: carry refers to unknown object {object}", h.id));
                        }
                        if !(*gain > 0.0) {
                            return bad(format!("human {}: carry gain must be positive", h.id));
                        }
                    }
                }
            }
        }
        for a in &self.pickup_areas {
            let poly = Polygon2::new(a.polygon.clone()).map_err(|e| Error::InvalidScenario(format!("{}: pickup area: {e}", self.id)))?;
            if a.polygon.iter().any(|p| !inside(*p)) {
                return bad("pickup area leaves the map".into());
            }
            PickupArea::new(poly, a.class)?;
        }
        for l in &self.layout {
            if !inside(l.target.position()) {
                return bad("layout target off the map".into());
            }
        }
        for class in [ObjectClass::Table, ObjectClass::Chair] {
            let slots = self.layout.iter().filter(|l| l.class == class).count();
            let have = self.objects.iter().filter(|o| o.class == class).count();
            if slots > have {
                return bad(format!("{} {} slots but only {} objects", slots, class.name(), have));
            }
        }
        self.controller.carry.validate()?;
        self.controller.anticipation.validate()?;
        let c = &self.channel;
        if !(c.latency >= 0.0 && c.jitter >= 0.0 && (0.0..=1.0).contains(&c.drop_prob)) {
            return bad("bad channel parameters".into());
        }
        Ok(())
    }

    pub fn build_world(&self) -> Result<WorldState> {
        let grid = Arc::new(self.map.build()?);
        let humans = self.humans.iter().map(|h| HumanAgent::new(h.id, h.start, h.script.clone())).collect();
        let objects = self.objects.iter().map(|o| FurnitureObject::new(o.id, o.class, o.pose)).collect();
        Ok(WorldState::new(grid, RobotBody::new(self.robot.pose), humans, objects))
    }

    pub fn build_layout(&self) -> Layout {
        Layout::new(self.layout.iter().map(|l| (l.class, l.target)))
    }

    pub fn build_areas(&self) -> Result<Vec<PickupArea>> {
        self.pickup_areas
            .iter()
            .map(|a| PickupArea::new(Polygon2::new(a.polygon.clone())?, a.class))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
id = "minimal"
max_duration = 5.0

[map]
size = [4.0, 3.0]

[robot]
pose = { x = 1.0, y = 1.0, theta = 0.0 }
"#;

    #[test]
    fn minimal_scenario_loads() {
        let s = ScenarioConfig::from_toml(MINIMAL, None).unwrap();
        assert_eq!(s.human_input_delay, 20.0);
        let g = s.map.build().unwrap();
        assert_eq!((g.width(), g.height()), (80, 60));
        assert_eq!(g.value_at(Point2::new(0.01, 1.0)), cost::LETHAL);
        assert_eq!(g.value_at(Point2::new(1.0, 1.0)), cost::FREE);
    }

    #[test]
    fn unknown_carry_object_rejected() {
        let text = format!(
            "{MINIMAL}\n[[humans]]\nid = 1\nstart = {{ x = 2.0, y = 2.0 }}\n[[humans.script]]\nkind = \"carry\"\nobject = 9\nintent = {{ x = 1.0, y = 1.0, theta = 0.0 }}\ngain = 0.5\n"
        );
        let err = ScenarioConfig::from_toml(&text, None).unwrap_err();
        assert!(matches!(err, Error::InvalidScenario(m) if m.contains("unknown object 9")));
    }

    #[test]
    fn invalid_values_rejected() {
        for (from, to) in [
            ("max_duration = 5.0", "max_duration = -1.0"),
            ("pose = { x = 1.0, y = 1.0, theta = 0.0 }", "pose = { x = 9.0, y = 1.0, theta = 0.0 }"),
            ("size = [4.0, 3.0]", "size = [4.0, 3.0]\nbogus = 1"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(ScenarioConfig::from_toml(&text, None).is_err(), "{to}");
        }
        let nonconvex = format!(
            "{MINIMAL}\n[[pickup_areas]]\nclass = \"table\"\npolygon = [{{x=0.5,y=0.5}},{{x=2.0,y=0.5}},{{x=1.0,y=1.0}},{{x=2.0,y=2.0}},{{x=0.5,y=2.0}}]\n"
        );
        assert!(ScenarioConfig::from_toml(&nonconvex, None).is_err());
    }

    #[test]
    fn map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = ScenarioConfig::from_toml(MINIMAL, None).unwrap();
        let g = s.map.build().unwrap();
        g.write_to(std::fs::File::create(dir.path().join("m.grid")).unwrap()).unwrap();
        let text = MINIMAL.replace("size = [4.0, 3.0]", "file = \"m.grid\"");
        std::fs::write(dir.path().join("s.toml"), text).unwrap();
        let loaded = ScenarioConfig::load(&dir.path().join("s.toml")).unwrap();
        assert_eq!(loaded.map.build().unwrap(), g);
    }
}
