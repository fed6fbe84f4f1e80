use super::{Point2, Pose2};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Resolution of the rasterization fallback used by [`polygon_iou`].
const RASTER_RES: f64 = 0.01;

/// Simple polygon with counter-clockwise vertex order and positive area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polygon2 {
    vertices: Vec<Point2>,
}

impl TryFrom<Vec<Point2>> for Polygon2 {
    type Error = Error;
    fn try_from(v: Vec<Point2>) -> Result<Self> {
        Polygon2::new(v)
    }
}

impl From<Polygon2> for Vec<Point2> {
    fn from(p: Polygon2) -> Self {
        p.vertices
    }
}

fn signed_area(v: &[Point2]) -> f64 {
    let n = v.len();
    (0..n).map(|i| v[i].cross(v[(i + 1) % n])).sum::<f64>() / 2.0
}

fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let o = |p: Point2, q: Point2, r: Point2| (q - p).cross(r - p);
    let (d1, d2, d3, d4) = (o(c, d, a), o(c, d, b), o(a, b, c), o(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: Point2, q: Point2, r: Point2| {
        r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    (d1 == 0.0 && on(c, d, a))
        || (d2 == 0.0 && on(c, d, b))
        || (d3 == 0.0 && on(a, b, c))
        || (d4 == 0.0 && on(a, b, d))
}

impl Polygon2 {
    /// Validates and normalizes to counter-clockwise order.
    pub fn new(mut vertices: Vec<Point2>) -> Result<Self> {
        if vertices.len() < 3 || vertices.iter().any(|p| !p.is_finite()) {
            return Err(Error::DegeneratePolygon);
        }
        let area = signed_area(&vertices);
        if area.abs() < 1e-12 {
            return Err(Error::DegeneratePolygon);
        }
        if area < 0.0 {
            vertices.reverse();
        }
        let n = vertices.len();
        for i in 0..n {
            for j in i + 1..n {
                // adjacent edges share a vertex by construction
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_intersect(vertices[i], vertices[(i + 1) % n], vertices[j], vertices[(j + 1) % n]) {
                    return Err(Error::NonSimplePolygon);
                }
            }
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned rectangle centred on the origin.
    pub fn rectangle(length: f64, width: f64) -> Result<Self> {
        let (a, b) = (length / 2.0, width / 2.0);
        Self::new(vec![
            Point2::new(-a, -b),
            Point2::new(a, -b),
            Point2::new(a, b),
            Point2::new(-a, b),
        ])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn centroid(&self) -> Point2 {
        let v = &self.vertices;
        let n = v.len();
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..n {
            let (p, q) = (v[i], v[(i + 1) % n]);
            let c = p.cross(q);
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        let a6 = 6.0 * self.area();
        Point2::new(cx / a6, cy / a6)
    }

    pub fn is_convex(&self) -> bool {
        let v = &self.vertices;
        let n = v.len();
        (0..n).all(|i| (v[(i + 1) % n] - v[i]).cross(v[(i + 2) % n] - v[(i + 1) % n]) >= -1e-12)
    }

    /// Even-odd point containment; points on the boundary may go either way.
    pub fn contains(&self, p: Point2) -> bool {
        let v = &self.vertices;
        let n = v.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (v[i], v[j]);
            if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// Polygon mapped from the frame `pose` into the world.
    pub fn transformed(&self, pose: &Pose2) -> Polygon2 {
        Polygon2 {
            vertices: self.vertices.iter().map(|p| pose.transform_from(*p)).collect(),
        }
    }

    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.vertices {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    /// First intersection of the ray `origin + t·dir` (t ≥ 0) with the boundary.
    pub fn ray_intersection(&self, origin: Point2, dir: Point2) -> Option<f64> {
        let v = &self.vertices;
        let n = v.len();
        let mut best: Option<f64> = None;
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            let e = b - a;
            let denom = dir.cross(e);
            if denom.abs() < 1e-15 {
                continue;
            }
            let w = a - origin;
            let t = w.cross(e) / denom;
            let u = w.cross(dir) / denom;
            if t >= 0.0 && (0.0..=1.0).contains(&u) && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
        best
    }
}

/// Sutherland–Hodgman clip of an arbitrary simple `subject` by a convex
/// `clip` polygon. The area of the result equals the intersection area even
/// when the subject is concave.
fn clip_by_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let inside = |p: Point2| (b - a).cross(p - a) >= 0.0;
        let input = std::mem::take(&mut output);
        let k = input.len();
        for j in 0..k {
            let cur = input[j];
            let prev = input[(j + k - 1) % k];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci != pi {
                let d = cur - prev;
                // intersection of segment prev→cur with the clip line
                let denom = (b - a).cross(d);
                let s = (b - a).cross(prev - a) / denom;
                output.push(prev - d.scale(s));
            }
            if ci {
                output.push(cur);
            }
        }
    }
    output
}

/// Edge crossings of the horizontal line at `y`, sorted. A point on that
/// line is inside iff an odd number of crossings lies strictly right of it,
/// the same test as [`Polygon2::contains`].
fn row_crossings(poly: &Polygon2, y: f64, out: &mut Vec<f64>) {
    out.clear();
    let v = &poly.vertices;
    let mut j = v.len() - 1;
    for i in 0..v.len() {
        let (a, b) = (v[i], v[j]);
        if (a.y > y) != (b.y > y) {
            out.push((b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x);
        }
        j = i;
    }
    out.sort_by(f64::total_cmp);
}

fn raster_iou(a: &Polygon2, b: &Polygon2) -> f64 {
    let (la, ha) = a.bounds();
    let (lb, hb) = b.bounds();
    let lo = Point2::new(la.x.min(lb.x), la.y.min(lb.y));
    let hi = Point2::new(ha.x.max(hb.x), ha.y.max(hb.y));
    let nx = ((hi.x - lo.x) / RASTER_RES).ceil() as usize;
    let ny = ((hi.y - lo.y) / RASTER_RES).ceil() as usize;
    let (mut inter, mut union) = (0usize, 0usize);
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for j in 0..ny {
        let y = lo.y + (j as f64 + 0.5) * RASTER_RES;
        row_crossings(a, y, &mut xa);
        row_crossings(b, y, &mut xb);
        let (mut ka, mut kb) = (0, 0);
        for i in 0..nx {
            let x = lo.x + (i as f64 + 0.5) * RASTER_RES;
            while ka < xa.len() && xa[ka] <= x {
                ka += 1;
            }
            while kb < xb.len() && xb[kb] <= x {
                kb += 1;
            }
            let (ia, ib) = ((xa.len() - ka) % 2 == 1, (xb.len() - kb) % 2 == 1);
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Intersection over union of two simple polygons.
///
/// Exact polygon clipping is used whenever at least one input is convex;
/// two concave inputs fall back to a 1 cm rasterization.
pub fn polygon_iou(a: &Polygon2, b: &Polygon2) -> Result<f64> {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 1e-12 || area_b <= 1e-12 {
        return Err(Error::DegeneratePolygon);
    }
    let inter = if b.is_convex() {
        signed_area(&clip_by_convex(a.vertices(), b.vertices()))
    } else if a.is_convex() {
        signed_area(&clip_by_convex(b.vertices(), a.vertices()))
    } else {
        return Ok(raster_iou(a, b));
    };
    let inter = inter.clamp(0.0, area_a.min(area_b));
    Ok((inter / (area_a + area_b - inter)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(x: f64, y: f64) -> Polygon2 {
        Polygon2::new(vec![
            Point2::new(x, y),
            Point2::new(x + 1.0, y),
            Point2::new(x + 1.0, y + 1.0),
            Point2::new(x, y + 1.0),
        ])
        .unwrap()
    }

    /// Independent 1 mm rasterization, used only as a test oracle.
    fn mm_grid_iou(a: &Polygon2, b: &Polygon2) -> f64 {
        let res = 0.001;
        let (la, ha) = a.bounds();
        let (lb, hb) = b.bounds();
        let (x0, y0) = (la.x.min(lb.x), la.y.min(lb.y));
        let (x1, y1) = (ha.x.max(hb.x), ha.y.max(hb.y));
        let (mut i_n, mut u_n) = (0u64, 0u64);
        let mut y = y0 + res / 2.0;
        while y < y1 {
            let mut x = x0 + res / 2.0;
            while x < x1 {
                let p = Point2::new(x, y);
                let (ia, ib) = (a.contains(p), b.contains(p));
                i_n += (ia && ib) as u64;
                u_n += (ia || ib) as u64;
                x += res;
            }
            y += res;
        }
        i_n as f64 / u_n as f64
    }

    fn random_convex_pentagon(rng: &mut ChaCha8Rng) -> Polygon2 {
        let c = Point2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let mut angles: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let r = rng.random_range(0.3..0.6);
        Polygon2::new(angles.iter().map(|a| c + Point2::new(a.cos(), a.sin()).scale(r)).collect()).unwrap()
    }

    #[test]
    fn identical_squares() {
        let a = square(0.0, 0.0);
        assert!((polygon_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_squares_one_third() {
        let iou = polygon_iou(&square(0.0, 0.0), &square(0.5, 0.0)).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(polygon_iou(&square(0.0, 0.0), &square(3.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_rejected() {
        let r = Polygon2::new(vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(2.0, 0.0)]);
        assert_eq!(r, Err(Error::DegeneratePolygon));
    }

    #[test]
    fn bowtie_rejected() {
        let r = Polygon2::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 1.0),
            Point2::new(2.0, 0.0),
            Point2::new(0.0, 1.5),
        ]);
        assert_eq!(r, Err(Error::NonSimplePolygon));
    }

    #[test]
    fn clockwise_input_normalized() {
        let p = Polygon2::new(vec![Point2::new(0.0, 0.0), Point2::new(0.0, 1.0), Point2::new(1.0, 0.0)]).unwrap();
        assert!(p.area() > 0.0);
    }

    #[test]
    fn pentagons_match_mm_raster() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..4 {
            let a = random_convex_pentagon(&mut rng);
            let b = random_convex_pentagon(&mut rng);
            let exact = polygon_iou(&a, &b).unwrap();
            let oracle = mm_grid_iou(&a, &b);
            assert!((exact - oracle).abs() < 0.01, "{exact} vs {oracle}");
            // symmetric
            assert!((exact - polygon_iou(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn concave_pair_uses_raster() {
        // two L-shapes
        let l = |dx: f64| {
            Polygon2::new(vec![
                Point2::new(dx, 0.0),
                Point2::new(dx + 1.0, 0.0),
                Point2::new(dx + 1.0, 0.4),
                Point2::new(dx + 0.4, 0.4),
                Point2::new(dx + 0.4, 1.0),
                Point2::new(dx, 1.0),
            ])
            .unwrap()
        };
        let (a, b) = (l(0.0), l(0.2));
        let iou = polygon_iou(&a, &b).unwrap();
        let oracle = mm_grid_iou(&a, &b);
        assert!((iou - oracle).abs() < 0.01);
        // concave subject clipped by a convex polygon is exact
        let sq = square(0.0, 0.0);
        let exact = polygon_iou(&a, &sq).unwrap();
        assert!((exact - 0.64).abs() < 1e-12);
    }

    #[test]
    fn scanline_raster_matches_point_tests() {
        let star = |rng: &mut ChaCha8Rng| {
            let mut a: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            a.sort_by(f64::total_cmp);
            Polygon2::new(a.iter().map(|t| Point2::new(t.cos(), t.sin()).scale(rng.random_range(0.3..1.2))).collect())
        };
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (Ok(a), Ok(b)) = (star(&mut rng), star(&mut rng)) else { continue };
            let (la, ha) = a.bounds();
            let (lb, hb) = b.bounds();
            let lo = Point2::new(la.x.min(lb.x), la.y.min(lb.y));
            let hi = Point2::new(ha.x.max(hb.x), ha.y.max(hb.y));
            let (mut i_n, mut u_n) = (0usize, 0usize);
            for j in 0..((hi.y - lo.y) / RASTER_RES).ceil() as usize {
                for i in 0..((hi.x - lo.x) / RASTER_RES).ceil() as usize {
                    let p = Point2::new(lo.x + (i as f64 + 0.5) * RASTER_RES, lo.y + (j as f64 + 0.5) * RASTER_RES);
                    let (ia, ib) = (a.contains(p), b.contains(p));
                    i_n += (ia && ib) as usize;
                    u_n += (ia || ib) as usize;
                }
            }
            assert_eq!(raster_iou(&a, &b), i_n as f64 / u_n as f64);
        }
    }

    #[test]
    fn ray_hits_square() {
        let s = square(2.0, -0.5);
        let t = s.ray_intersection(Point2::ZERO, Point2::new(1.0, 0.0)).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert!(s.ray_intersection(Point2::ZERO, Point2::new(-1.0, 0.0)).is_none());
    }
}
