//! Planar geometry shared by the raster, vector and ingest modules.
//!
//! Coordinates are `[x, y]` pairs: `[lon, lat]` in degrees for geographic
//! geometry, or pixel units for tile-local geometry.

use crate::tilegrid::{lonlat_to_tile_frac, tile_frac_to_lonlat, BBox, LonLat, TileId};
use crate::error::Result;

pub type Point = [f64; 2];

/// Closed ring; the first vertex is not repeated at the end.
pub type Ring = Vec<Point>;

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    /// Exterior ring followed by holes. Filled with the even-odd rule.
    pub rings: Vec<Ring>,
}

impl Polygon {
    pub fn new(exterior: Ring) -> Self {
        Self { rings: vec![exterior] }
    }

    pub fn with_holes(exterior: Ring, holes: Vec<Ring>) -> Self {
        let mut rings = vec![exterior];
        rings.extend(holes);
        Self { rings }
    }

    pub fn exterior(&self) -> &[Point] {
        self.rings.first().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn bbox(&self) -> Option<BBox> {
        bbox_of(self.rings.iter().flatten())
    }

    /// Even-odd area: exterior minus holes.
    pub fn area(&self) -> f64 {
        let mut rings = self.rings.iter();
        let outer = rings.next().map(|r| signed_area(r).abs()).unwrap_or(0.0);
        outer - rings.map(|r| signed_area(r).abs()).sum::<f64>()
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Polygon {
        Polygon {
            rings: self.rings.iter().map(|r| r.iter().map(|&p| f(p)).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub points: Vec<Point>,
}

impl Polyline {
    pub fn bbox(&self) -> Option<BBox> {
        bbox_of(self.points.iter())
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }
}

pub fn bbox_of<'a>(points: impl Iterator<Item = &'a Point>) -> Option<BBox> {
    let mut it = points.peekable();
    it.peek()?;
    let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in it {
        b.west = b.west.min(p[0]);
        b.east = b.east.max(p[0]);
        b.south = b.south.min(p[1]);
        b.north = b.north.max(p[1]);
    }
    Some(b)
}

/// Shoelace area, positive for counter-clockwise rings in a y-up frame.
pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    s / 2.0
}

/// Crossing-number test over all rings (even-odd rule).
pub fn point_in_polygon(p: Point, poly: &Polygon) -> bool {
    let mut inside = false;
    for ring in &poly.rings {
        let n = ring.len();
        if n < 3 {
            continue;
        }
        let mut j = n - 1;
        for i in 0..n {
            let (pi, pj) = (ring[i], ring[j]);
            if (pi[1] > p[1]) != (pj[1] > p[1]) && p[0] < crossing_x(pi, pj, p[1]) {
                inside = !inside;
            }
            j = i;
        }
    }
    inside
}

/// x where edge `a -> b` crosses the horizontal line `y`. Shared by the
/// containment test and the scanline filler so both agree bit for bit.
#[inline]
pub(crate) fn crossing_x(a: Point, b: Point, y: f64) -> f64 {
    (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]
}

/// Squared distance from `p` to the segment `a-b`.
pub fn dist2_point_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    (p[0] - qx).powi(2) + (p[1] - qy).powi(2)
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection test.
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// True if two non-adjacent edges of the ring touch or cross.
pub fn ring_self_intersects(ring: &[Point]) -> bool {
    let n = ring.len();
    if n < 4 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return true;
            }
        }
    }
    false
}

fn rect_corners(b: &BBox) -> [Point; 4] {
    [[b.west, b.south], [b.east, b.south], [b.east, b.north], [b.west, b.north]]
}

fn segment_hits_rect(a: Point, b: Point, r: &BBox) -> bool {
    let inside = |p: Point| p[0] >= r.west && p[0] <= r.east && p[1] >= r.south && p[1] <= r.north;
    if inside(a) || inside(b) {
        return true;
    }
    let c = rect_corners(r);
    (0..4).any(|i| segments_intersect(a, b, c[i], c[(i + 1) % 4]))
}

/// Exact polygon/rectangle intersection test (touching counts).
pub fn polygon_intersects_rect(poly: &Polygon, r: &BBox) -> bool {
    match poly.bbox() {
        Some(b) if b.intersects(r) => {}
        _ => return false,
    }
    for ring in &poly.rings {
        let n = ring.len();
        for i in 0..n {
            if segment_hits_rect(ring[i], ring[(i + 1) % n], r) {
                return true;
            }
        }
    }
    // Rectangle entirely inside the polygon.
    point_in_polygon([r.west, r.south], poly)
}

pub fn polyline_intersects_rect(line: &Polyline, r: &BBox) -> bool {
    match line.bbox() {
        Some(b) if b.intersects(r) => {}
        _ => return false,
    }
    if line.points.len() == 1 {
        return r.contains(LonLat { lon: line.points[0][0], lat: line.points[0][1] });
    }
    line.segments().any(|(a, b)| segment_hits_rect(a, b, r))
}

/// Maps geographic coordinates to pixel coordinates of one tile (x right,
/// y down, origin at the tile's north-west corner) and back.
#[derive(Debug, Clone, Copy)]
pub struct TileProjector {
    pub tile: TileId,
    pub size: u32,
}

impl TileProjector {
    pub fn new(tile: TileId, size: u32) -> Self {
        Self { tile, size }
    }

    pub fn to_pixel(&self, p: Point) -> Result<Point> {
        let (fx, fy) = lonlat_to_tile_frac(LonLat { lon: p[0], lat: p[1] }, self.tile.z)?;
        let s = f64::from(self.size);
        Ok([(fx - f64::from(self.tile.x)) * s, (fy - f64::from(self.tile.y)) * s])
    }

    pub fn to_lonlat(&self, p: Point) -> Point {
        let s = f64::from(self.size);
        let ll = tile_frac_to_lonlat(
            f64::from(self.tile.x) + p[0] / s,
            f64::from(self.tile.y) + p[1] / s,
            self.tile.z,
        );
        [ll.lon, ll.lat]
    }

    pub fn polygon_to_pixels(&self, poly: &Polygon) -> Result<Polygon> {
        let rings = poly
            .rings
            .iter()
            .map(|r| r.iter().map(|&p| self.to_pixel(p)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Polygon { rings })
    }

    pub fn polyline_to_pixels(&self, line: &Polyline) -> Result<Polyline> {
        Ok(Polyline {
            points: line.points.iter().map(|&p| self.to_pixel(p)).collect::<Result<_>>()?,
        })
    }
}

/// Douglas-Peucker simplification of a closed ring.
pub fn simplify_ring(ring: &[Point], tolerance: f64) -> Ring {
    if ring.len() <= 4 || tolerance <= 0.0 {
        return ring.to_vec();
    }
    let mut closed = ring.to_vec();
    closed.push(ring[0]);
    let mut keep = vec![false; closed.len()];
    keep[0] = true;
    *keep.last_mut().expect("non-empty") = true;
    // Split at the vertex farthest from the start so the closed ring is not
    // collapsed onto a single chord.
    let far = (1..ring.len())
        .max_by(|&a, &b| {
            let da = (ring[a][0] - ring[0][0]).powi(2) + (ring[a][1] - ring[0][1]).powi(2);
            let db = (ring[b][0] - ring[0][0]).powi(2) + (ring[b][1] - ring[0][1]).powi(2);
            da.total_cmp(&db)
        })
        .expect("len > 4");
    keep[far] = true;
    let mut stack = vec![(0, far), (far, closed.len() - 1)];
    let tol2 = tolerance * tolerance;
    while let Some((s, e)) = stack.pop() {
        if e <= s + 1 {
            continue;
        }
        let (mut best, mut idx) = (0.0, 0);
        for i in s + 1..e {
            let d = dist2_point_segment(closed[i], closed[s], closed[e]);
            if d > best {
                best = d;
                idx = i;
            }
        }
        if best > tol2 {
            keep[idx] = true;
            stack.push((s, idx));
            stack.push((idx, e));
        }
    }
    closed.pop();
    ring.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect()
}
