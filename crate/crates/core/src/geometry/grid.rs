use super::{Point2, Pose2};
use crate::error::{Error, Result};
use std::io::{BufRead, Write};

/// Cell value semantics shared by the static map and the cost map.
pub mod cost {
    pub const FREE: u8 = 0;
    /// Largest soft cost.
    pub const MAX_SOFT: u8 = 252;
    /// Within the inflation radius of an obstacle.
    pub const INSCRIBED: u8 = 253;
    pub const LETHAL: u8 = 254;
    pub const UNKNOWN: u8 = 255;

    /// Whether a planner may enter a cell with this value.
    pub fn traversable(v: u8) -> bool {
        v < INSCRIBED
    }
}

/// Integer cell coordinates (column, row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
}

impl Cell {
    pub const fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }
}

/// Result of a [`ray_cast`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RayHit {
    Clear,
    Blocked(Cell),
}

/// Row-major byte grid anchored at `origin` (lower-left corner of cell 0,0).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    resolution: f64,
    origin: Pose2,
    width: usize,
    height: usize,
    cells: Vec<u8>,
}

impl Grid2 {
    pub fn new(resolution: f64, origin: Point2, width: usize, height: usize) -> Result<Self> {
        Self::filled(resolution, origin, width, height, cost::FREE)
    }

    pub fn filled(resolution: f64, origin: Point2, width: usize, height: usize, value: u8) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidGrid(format!("resolution {resolution}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        Ok(Self {
            resolution,
            origin: Pose2::new(origin.x, origin.y, 0.0),
            width,
            height,
            cells: vec![value; width * height],
        })
    }

    /// Same geometry, every cell set to `value`.
    pub fn like(&self, value: u8) -> Self {
        Self {
            cells: vec![value; self.cells.len()],
            ..self.clone()
        }
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Pose2 {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [u8] {
        &mut self.cells
    }

    pub fn index(&self, c: Cell) -> usize {
        c.j * self.width + c.i
    }

    pub fn cell_of_index(&self, idx: usize) -> Cell {
        Cell::new(idx % self.width, idx / self.width)
    }

    /// Upper-right world corner.
    pub fn extent(&self) -> Point2 {
        Point2::new(
            self.origin.x + self.width as f64 * self.resolution,
            self.origin.y + self.height as f64 * self.resolution,
        )
    }

    pub fn contains_point(&self, p: Point2) -> bool {
        self.world_to_cell(p).is_some()
    }

    pub fn world_to_cell(&self, p: Point2) -> Option<Cell> {
        let fx = ((p.x - self.origin.x) / self.resolution).floor();
        let fy = ((p.y - self.origin.y) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.width as f64 || fy >= self.height as f64 || !fx.is_finite() || !fy.is_finite() {
            return None;
        }
        Some(Cell::new(fx as usize, fy as usize))
    }

    pub fn cell_center(&self, c: Cell) -> Point2 {
        Point2::new(
            self.origin.x + (c.i as f64 + 0.5) * self.resolution,
            self.origin.y + (c.j as f64 + 0.5) * self.resolution,
        )
    }

    pub fn get(&self, c: Cell) -> Option<u8> {
        (c.i < self.width && c.j < self.height).then(|| self.cells[self.index(c)])
    }

    pub fn set(&mut self, c: Cell, v: u8) -> Result<()> {
        if c.i >= self.width || c.j >= self.height {
            return Err(Error::OutOfBounds);
        }
        let idx = self.index(c);
        self.cells[idx] = v;
        Ok(())
    }

    /// Value at a world point; out-of-map points read as unknown.
    pub fn value_at(&self, p: Point2) -> u8 {
        self.world_to_cell(p).map_or(cost::UNKNOWN, |c| self.cells[self.index(c)])
    }

    /// Raises every cell whose centre lies within `radius` of `center` to at least `value`.
    pub fn stamp_disk(&mut self, center: Point2, radius: f64, value: u8) {
        let r = self.resolution;
        let i0 = ((center.x - radius - self.origin.x) / r).floor().max(0.0);
        let j0 = ((center.y - radius - self.origin.y) / r).floor().max(0.0);
        let i1 = ((center.x + radius - self.origin.x) / r).ceil().min(self.width as f64 - 1.0);
        let j1 = ((center.y + radius - self.origin.y) / r).ceil().min(self.height as f64 - 1.0);
        if i1 < i0 || j1 < j0 {
            return;
        }
        let r2 = radius * radius;
        for j in j0 as usize..=j1 as usize {
            for i in i0 as usize..=i1 as usize {
                let c = Cell::new(i, j);
                let d = self.cell_center(c) - center;
                if d.dot(d) <= r2 {
                    let idx = self.index(c);
                    self.cells[idx] = self.cells[idx].max(value);
                }
            }
        }
    }

    /// Marks every cell whose centre lies inside `poly` (world frame) with at least `value`.
    pub fn stamp_polygon(&mut self, poly: &super::Polygon2, value: u8) {
        let (lo, hi) = poly.bounds();
        let (Some(a), Some(b)) = (
            self.world_to_cell(Point2::new(lo.x.max(self.origin.x), lo.y.max(self.origin.y))),
            self.world_to_cell(Point2::new(
                hi.x.min(self.extent().x - 1e-9),
                hi.y.min(self.extent().y - 1e-9),
            )),
        ) else {
            return;
        };
        for j in a.j..=b.j {
            for i in a.i..=b.i {
                let c = Cell::new(i, j);
                if poly.contains(self.cell_center(c)) {
                    let idx = self.index(c);
                    self.cells[idx] = self.cells[idx].max(value);
                }
            }
        }
    }

    /// Grid where every cell within `radius` of a cell with value ≥ `threshold`
    /// is raised to `INSCRIBED`, and the source cells keep their value.
    pub fn inflated(&self, threshold: u8, radius: f64) -> Grid2 {
        let mut out = self.clone();
        for idx in 0..self.cells.len() {
            if self.cells[idx] >= threshold {
                let c = self.cell_of_index(idx);
                out.stamp_disk(self.cell_center(c), radius, cost::INSCRIBED);
            }
        }
        out
    }

    /// Cell-wise maximum with a grid of identical geometry.
    pub fn max_with(&mut self, other: &Grid2) {
        debug_assert_eq!(self.cells.len(), other.cells.len());
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a = (*a).max(*b);
        }
    }

    /// Portable grid file: text header followed by the row-major byte payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "GRID2 v1")?;
        writeln!(w, "resolution {}", self.resolution)?;
        writeln!(w, "origin {} {}", self.origin.x, self.origin.y)?;
        writeln!(w, "width {}", self.width)?;
        writeln!(w, "height {}", self.height)?;
        writeln!(w, "data")?;
        w.write_all(&self.cells)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next = |expect: &str| -> Result<Vec<String>> {
            line.clear();
            r.read_line(&mut line)?;
            let parts: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
            if parts.first().map(String::as_str) != Some(expect) {
                return Err(Error::InvalidGrid(format!("expected `{expect}`, got `{}`", line.trim())));
            }
            Ok(parts)
        };
        let num = |s: Option<&String>| -> Result<f64> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidGrid("bad number in header".into()))
        };
        next("GRID2")?;
        let res = num(next("resolution")?.get(1))?;
        let o = next("origin")?;
        let origin = Point2::new(num(o.get(1))?, num(o.get(2))?);
        let width = num(next("width")?.get(1))? as usize;
        let height = num(next("height")?.get(1))? as usize;
        next("data")?;
        let mut g = Grid2::new(res, origin, width, height)?;
        r.read_exact(&mut g.cells)
            .map_err(|_| Error::InvalidGrid("truncated payload".into()))?;
        Ok(g)
    }
}

/// Walks the cells crossed by the segment `from → to` in order (DDA) and
/// returns the first one whose value is at least `threshold`, along with the
/// segment parameter at which the ray enters it. Traversal stops silently at
/// the map border.
pub(crate) fn first_blocked(grid: &Grid2, from: Point2, to: Point2, threshold: u8) -> Option<(Cell, f64)> {
    let res = grid.resolution;
    let o = grid.origin.position();
    let gx = (from.x - o.x) / res;
    let gy = (from.y - o.y) / res;
    let (dx, dy) = ((to.x - from.x) / res, (to.y - from.y) / res);
    let mut ix = gx.floor() as i64;
    let mut iy = gy.floor() as i64;
    let end_x = ((to.x - o.x) / res).floor() as i64;
    let end_y = ((to.y - o.y) / res).floor() as i64;
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { (1.0 / dx).abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { (1.0 / dy).abs() } else { f64::INFINITY };
    let mut t_max_x = if dx > 0.0 {
        ((ix + 1) as f64 - gx) / dx
    } else if dx < 0.0 {
        (ix as f64 - gx) / dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > 0.0 {
        ((iy + 1) as f64 - gy) / dy
    } else if dy < 0.0 {
        (iy as f64 - gy) / dy
    } else {
        f64::INFINITY
    };
    let mut t_enter = 0.0;
    loop {
        if ix < 0 || iy < 0 || ix >= grid.width as i64 || iy >= grid.height as i64 {
            return None;
        }
        let c = Cell::new(ix as usize, iy as usize);
        if grid.cells[grid.index(c)] >= threshold {
            return Some((c, t_enter));
        }
        if ix == end_x && iy == end_y {
            return None;
        }
        if t_max_x < t_max_y {
            if t_max_x > 1.0 {
                return None;
            }
            t_enter = t_max_x;
            ix += step_x;
            t_max_x += t_delta_x;
        } else {
            if t_max_y > 1.0 {
                return None;
            }
            t_enter = t_max_y;
            iy += step_y;
            t_max_y += t_delta_y;
        }
    }
}

/// First cell on the segment `from → to` with value ≥ `blocked_threshold`.
pub fn ray_cast(grid: &Grid2, from: Point2, to: Point2, blocked_threshold: u8) -> Result<RayHit> {
    if !grid.contains_point(from) || !grid.contains_point(to) {
        return Err(Error::OutOfBounds);
    }
    Ok(match first_blocked(grid, from, to, blocked_threshold) {
        Some((c, _)) => RayHit::Blocked(c),
        None => RayHit::Clear,
    })
}
