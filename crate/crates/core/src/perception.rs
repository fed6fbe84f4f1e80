//! Geometric perception on ground-plane footprint contours: corner
//! extraction, planar pose fitting with half-turn symmetry, and grasp points.

use crate::error::{Error, Result};
use crate::geometry::{fold_half_turn, polygon_iou, Point2, Polygon2, Pose2};
use crate::model::{
    ObjectClass, CHAIR_GRASP_SEPARATION, CHAIR_SIZE, GRASP_STANDOFF, TABLE_GRASP_SEPARATION, TABLE_LENGTH,
};
use serde::{Deserialize, Serialize};

pub const DEFAULT_DP_EPSILON: f64 = 0.02;
/// Residual RMS above which a pose estimate is rejected as an outlier.
pub const POSE_OUTLIER_RMS: f64 = 0.15;
const EDGE_SUPPORT_DIST: f64 = 0.05;
const MAX_CORNER_SHIFT: f64 = 10.0;

/// Four corners in counter-clockwise order, starting at the corner with the
/// smallest `(y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourQuad {
    pub corners: [Point2; 4],
    pub iou_with_contour: f64,
}

impl ContourQuad {
    pub fn polygon(&self) -> Result<Polygon2> {
        Polygon2::new(self.corners.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefineOutcome {
    Refined,
    NoImprovement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPair {
    pub left: Point2,
    pub right: Point2,
    /// Unit vector from the robot side into the object.
    pub approach_dir: Point2,
    pub side_sign: i8,
}

impl GraspPair {
    pub fn midpoint(&self) -> Point2 {
        (self.left + self.right).scale(0.5)
    }

    /// Base pose that puts the gripper midpoint `standoff` ahead of the robot.
    pub fn approach_pose(&self, standoff: f64) -> Pose2 {
        let p = self.midpoint() - self.approach_dir.scale(standoff);
        Pose2::from_point(p, self.approach_dir.y.atan2(self.approach_dir.x))
    }

    pub fn base_pose(&self) -> Pose2 {
        self.approach_pose(GRASP_STANDOFF)
    }
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab.scale(t))
}

fn dp_keep(points: &[Point2], lo: usize, hi: usize, eps: f64, keep: &mut Vec<bool>) {
    if hi <= lo + 1 {
        return;
    }
    let (mut best, mut best_d) = (lo, -1.0);
    for k in lo + 1..hi {
        let d = segment_distance(points[k], points[lo], points[hi]);
        if d > best_d {
            best = k;
            best_d = d;
        }
    }
    if best_d > eps {
        keep[best] = true;
        dp_keep(points, lo, best, eps, keep);
        dp_keep(points, best, hi, eps, keep);
    }
}

/// Douglas–Peucker simplification of an open polyline. Endpoints are kept.
pub fn douglas_peucker(polyline: &[Point2], epsilon: f64) -> Vec<Point2> {
    if polyline.len() < 3 {
        return polyline.to_vec();
    }
    let mut keep = vec![false; polyline.len()];
    keep[0] = true;
    *keep.last_mut().unwrap() = true;
    dp_keep(polyline, 0, polyline.len() - 1, epsilon, &mut keep);
    polyline
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(*p))
        .collect()
}

/// Simplifies a closed contour by anchoring at vertex 0 and the vertex
/// farthest from it, then simplifying both halves.
pub fn simplify_closed_contour(contour: &[Point2], epsilon: f64) -> Vec<Point2> {
    let n = contour.len();
    if n < 4 {
        return contour.to_vec();
    }
    let far = (1..n)
        .max_by(|&a, &b| contour[a].distance(contour[0]).total_cmp(&contour[b].distance(contour[0])))
        .unwrap();
    let first = douglas_peucker(&contour[..=far], epsilon);
    let mut second: Vec<Point2> = contour[far..].to_vec();
    second.push(contour[0]);
    let second = douglas_peucker(&second, epsilon);
    let mut out = first;
    out.extend_from_slice(&second[1..second.len() - 1]);
    out
}

fn canonical_order(mut c: [Point2; 4]) -> [Point2; 4] {
    // counter-clockwise first
    let area: f64 = (0..4).map(|i| c[i].cross(c[(i + 1) % 4])).sum();
    if area < 0.0 {
        c.reverse();
    }
    let start = (0..4)
        .min_by(|&a, &b| c[a].y.total_cmp(&c[b].y).then(c[a].x.total_cmp(&c[b].x)))
        .unwrap();
    [c[start], c[(start + 1) % 4], c[(start + 2) % 4], c[(start + 3) % 4]]
}

fn lex_key(c: &[Point2; 4]) -> [f64; 8] {
    [c[0].x, c[0].y, c[1].x, c[1].y, c[2].x, c[2].y, c[3].x, c[3].y]
}

/// Picks the four contour points (in cyclic order) whose quadrilateral has
/// maximum IoU with the contour polygon. Ties prefer larger area, then the
/// lexicographically smaller canonical corner list.
pub fn select_four_corners(contour: &[Point2]) -> Result<ContourQuad> {
    let n = contour.len();
    if n < 4 {
        return Err(Error::InsufficientContour);
    }
    if n > 12 {
        return Err(Error::ContourTooLong(n));
    }
    let shape = Polygon2::new(contour.to_vec())?;
    let mut best: Option<(f64, f64, [Point2; 4])> = None;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let corners = [contour[i], contour[j], contour[k], contour[l]];
                    let Ok(quad) = Polygon2::new(corners.to_vec()) else {
                        continue;
                    };
                    let iou = polygon_iou(&quad, &shape)?;
                    let corners = canonical_order(corners);
                    let area = quad.area();
                    let better = match &best {
                        None => true,
                        Some((bi, ba, bc)) => {
                            if (iou - bi).abs() > 1e-12 {
                                iou > *bi
                            } else if (area - ba).abs() > 1e-12 {
                                area > *ba
                            } else {
                                lex_key(&corners) < lex_key(bc)
                            }
                        }
                    };
                    if better {
                        best = Some((iou, area, corners));
                    }
                }
            }
        }
    }
    let (iou, _, corners) = best.ok_or(Error::InsufficientContour)?;
    Ok(ContourQuad {
        corners,
        iou_with_contour: iou,
    })
}

/// Total least-squares line through the points: (centroid, unit direction).
fn fit_line(points: &[Point2]) -> Option<(Point2, Point2)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let c = points.iter().fold(Point2::ZERO, |a, p| a + *p).scale(1.0 / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = *p - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    if sxx + syy == 0.0 {
        return None;
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Some((c, Point2::new(angle.cos(), angle.sin())))
}

fn intersect_lines(p1: Point2, d1: Point2, p2: Point2, d2: Point2) -> Option<Point2> {
    let denom = d1.cross(d2);
    if denom.abs() < 1e-9 {
        return None;
    }
    let t = (p2 - p1).cross(d2) / denom;
    Some(p1 + d1.scale(t))
}

/// Refits every quad edge to the contour points near it and re-intersects
/// adjacent edges. The refined quad is only returned if its IoU with the
/// contour does not decrease.
pub fn refine_quad_edges(quad: &ContourQuad, contour: &[Point2]) -> (ContourQuad, RefineOutcome) {
    let unchanged = (*quad, RefineOutcome::NoImprovement);
    let (Ok(shape), Ok(qpoly)) = (Polygon2::new(contour.to_vec()), quad.polygon()) else {
        return unchanged;
    };
    let Ok(iou0) = polygon_iou(&qpoly, &shape) else {
        return unchanged;
    };
    if iou0 <= 0.5 {
        return unchanged;
    }
    let c = quad.corners;
    let lines: Vec<(Point2, Point2)> = (0..4)
        .map(|k| {
            let (a, b) = (c[k], c[(k + 1) % 4]);
            let support: Vec<Point2> = contour
                .iter()
                .copied()
                .filter(|p| segment_distance(*p, a, b) <= EDGE_SUPPORT_DIST)
                .collect();
            fit_line(&support).unwrap_or((a, (b - a).normalized()))
        })
        .collect();
    let mut refined = c;
    for k in 0..4 {
        let (prev, cur) = (lines[(k + 3) % 4], lines[k]);
        if let Some(p) = intersect_lines(prev.0, prev.1, cur.0, cur.1) {
            if p.distance(c[k]) <= MAX_CORNER_SHIFT {
                refined[k] = p;
            }
        }
    }
    let Ok(rpoly) = Polygon2::new(refined.to_vec()) else {
        return unchanged;
    };
    match polygon_iou(&rpoly, &shape) {
        Ok(iou) if iou >= iou0 => (
            ContourQuad {
                corners: canonical_order(refined),
                iou_with_contour: iou,
            },
            RefineOutcome::Refined,
        ),
        _ => unchanged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub pose: Pose2,
    pub rms: f64,
}

fn rigid_fit(model: &[Point2; 4], obs: &[Point2; 4]) -> PlanarPose {
    let cm = model.iter().fold(Point2::ZERO, |a, p| a + *p).scale(0.25);
    let co = obs.iter().fold(Point2::ZERO, |a, p| a + *p).scale(0.25);
    let (mut s_cross, mut s_dot) = (0.0, 0.0);
    for (m, o) in model.iter().zip(obs) {
        let (dm, dob) = (*m - cm, *o - co);
        s_cross += dm.cross(dob);
        s_dot += dm.dot(dob);
    }
    let theta = s_cross.atan2(s_dot);
    let t = co - cm.rotate(theta);
    let pose = Pose2::new(t.x, t.y, theta);
    let sse: f64 = model
        .iter()
        .zip(obs)
        .map(|(m, o)| {
            let d = pose.transform_from(*m) - *o;
            d.dot(d)
        })
        .sum();
    PlanarPose {
        pose,
        rms: (sse / 4.0).sqrt(),
    }
}

/// Closed-form 3-DoF fit of model corners (object frame, centred on the
/// origin) to an observed quad. All cyclic correspondences, forward and
/// reversed, are tried and the smallest residual wins. For half-turn
/// symmetric objects the yaw is folded into `[0, π)`.
pub fn estimate_planar_pose(model_corners: &[Point2; 4], observed: &ContourQuad, half_turn_symmetric: bool) -> Result<PlanarPose> {
    let mut best: Option<PlanarPose> = None;
    for reversed in [false, true] {
        for shift in 0..4 {
            let obs: [Point2; 4] = std::array::from_fn(|k| {
                let idx = if reversed { (shift + 4 - k) % 4 } else { (shift + k) % 4 };
                observed.corners[idx]
            });
            let fit = rigid_fit(model_corners, &obs);
            if best.is_none_or(|b| fit.rms < b.rms) {
                best = Some(fit);
            }
        }
    }
    let mut fit = best.expect("at least one correspondence");
    if fit.rms > POSE_OUTLIER_RMS {
        return Err(Error::PoseOutlier(fit.rms));
    }
    if half_turn_symmetric {
        fit.pose = Pose2::new(fit.pose.x, fit.pose.y, fold_half_turn(fit.pose.theta));
    }
    Ok(fit)
}

/// Full edge-side pipeline on a noisy table contour: simplify, pick four
/// corners, refine edges, fit pose.
pub fn table_pose_from_contour(contour: &[Point2]) -> Result<PlanarPose> {
    let simplified = simplify_closed_contour(contour, DEFAULT_DP_EPSILON);
    let quad = select_four_corners(&simplified)?;
    let (quad, _) = refine_quad_edges(&quad, contour);
    estimate_planar_pose(&ObjectClass::Table.model_corners(), &quad, true)
}

/// Grippers symmetric about the midpoint of the short table edge selected by
/// `side_sign` (the edge at `side_sign · L/2` along the table x-axis).
pub fn table_grasp_pair(table: &Pose2, side_sign: i8) -> GraspPair {
    let s = if side_sign >= 0 { 1.0 } else { -1.0 };
    let n_t = table.heading();
    let mid = table.position() + n_t.scale(s * TABLE_LENGTH / 2.0);
    let approach = n_t.scale(-s);
    let lateral = approach.rotate(std::f64::consts::FRAC_PI_2).scale(TABLE_GRASP_SEPARATION / 2.0);
    GraspPair {
        left: mid + lateral,
        right: mid - lateral,
        approach_dir: approach,
        side_sign: s as i8,
    }
}

/// Grasps from a set of backrest cross-section points: a line is fitted,
/// the grasps are placed symmetrically about the projected centre.
/// `inward` disambiguates the approach direction (points into the chair).
pub fn chair_grasp_from_backrest(points: &[Point2], inward: Point2) -> GraspPair {
    let (c, mut d) = fit_line(points).unwrap_or((points[0], inward.rotate(std::f64::consts::FRAC_PI_2)));
    let mut normal = d.rotate(-std::f64::consts::FRAC_PI_2);
    if normal.dot(inward) < 0.0 {
        normal = -normal;
        d = -d;
    }
    // `d` is now the approach direction rotated +90°, i.e. pointing left.
    let half = CHAIR_GRASP_SEPARATION / 2.0;
    GraspPair {
        left: c + d.scale(half),
        right: c - d.scale(half),
        approach_dir: normal,
        side_sign: 1,
    }
}

/// Backrest edge of a chair (its `-x` footprint edge) sampled at both
/// vertices and the midpoint.
pub fn chair_backrest_points(chair: &Pose2) -> [Point2; 3] {
    let h = CHAIR_SIZE / 2.0;
    [
        chair.transform_from(Point2::new(-h, -h)),
        chair.transform_from(Point2::new(-h, 0.0)),
        chair.transform_from(Point2::new(-h, h)),
    ]
}

pub fn chair_grasp_pair(chair: &Pose2) -> GraspPair {
    chair_grasp_from_backrest(&chair_backrest_points(chair), chair.heading())
}
