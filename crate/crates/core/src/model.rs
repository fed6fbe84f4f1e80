//! Physical constants and body models shared by simulator, perception and control.

use crate::geometry::{Point2, Polygon2};
use serde::{Deserialize, Serialize};

pub const TABLE_LENGTH: f64 = 1.2;
pub const TABLE_WIDTH: f64 = 0.8;
pub const CHAIR_SIZE: f64 = 0.45;

/// Robot base radius used for collision and safety metrics.
pub const ROBOT_RADIUS: f64 = 0.27;
/// Person body radius used by the safety metric and the lidar model.
pub const PERSON_RADIUS: f64 = 0.25;

pub const ROBOT_V_MAX: f64 = 0.5;
pub const ROBOT_W_MAX: f64 = 1.0;
pub const HUMAN_SPEED_MAX: f64 = 2.0;
/// End-effector reach disk radius in the robot frame.
pub const EE_REACH: f64 = 0.9;

/// Distance from a grasp edge midpoint back to the robot base centre.
pub const GRASP_STANDOFF: f64 = 0.3;
pub const TABLE_GRASP_SEPARATION: f64 = 0.4;
pub const CHAIR_GRASP_SEPARATION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Table,
    Chair,
}

impl ObjectClass {
    /// Footprint in the object frame. Tables are long along x; the chair
    /// backrest is the `-x` edge.
    pub fn footprint(self) -> Polygon2 {
        match self {
            ObjectClass::Table => Polygon2::rectangle(TABLE_LENGTH, TABLE_WIDTH),
            ObjectClass::Chair => Polygon2::rectangle(CHAIR_SIZE, CHAIR_SIZE),
        }
        .expect("static footprint is valid")
    }

    /// Corners in the object frame, counter-clockwise from `(-x, -y)`.
    pub fn model_corners(self) -> [Point2; 4] {
        let (a, b) = match self {
            ObjectClass::Table => (TABLE_LENGTH / 2.0, TABLE_WIDTH / 2.0),
            ObjectClass::Chair => (CHAIR_SIZE / 2.0, CHAIR_SIZE / 2.0),
        };
        [
            Point2::new(-a, -b),
            Point2::new(a, -b),
            Point2::new(a, b),
            Point2::new(-a, b),
        ]
    }

    /// Tables are indistinguishable under a half turn.
    pub fn half_turn_symmetric(self) -> bool {
        matches!(self, ObjectClass::Table)
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Table => "table",
            ObjectClass::Chair => "chair",
        }
    }
}

/// Number of body keypoints per person.
pub const NUM_KEYPOINTS: usize = 17;

/// Ground-plane projection of a standing 17-joint skeleton, as offsets from
/// the root joint (nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles).
pub const SKELETON_TEMPLATE: [Point2; NUM_KEYPOINTS] = [
    Point2::new(0.10, 0.00),
    Point2::new(0.08, 0.03),
    Point2::new(0.08, -0.03),
    Point2::new(0.03, 0.07),
    Point2::new(0.03, -0.07),
    Point2::new(0.00, 0.19),
    Point2::new(0.00, -0.19),
    Point2::new(-0.02, 0.23),
    Point2::new(-0.02, -0.23),
    Point2::new(0.06, 0.21),
    Point2::new(0.06, -0.21),
    Point2::new(0.00, 0.10),
    Point2::new(0.00, -0.10),
    Point2::new(0.05, 0.11),
    Point2::new(0.05, -0.11),
    Point2::new(0.00, 0.12),
    Point2::new(0.00, -0.12),
];

pub fn skeleton_at(root: Point2) -> Vec<Point2> {
    SKELETON_TEMPLATE.iter().map(|o| root + *o).collect()
}
