//! Raster-to-vector conversion of building masks.
//!
//! Components are 4-connected. Each polygon's rings follow pixel edges, so
//! rasterizing the rings at pixel centers reproduces the mask exactly.

use std::collections::HashMap;

use serde_json::{json, Value};

use crate::geom::{signed_area, simplify_ring, Polygon, Ring, TileProjector};
use crate::raster::RasterTile;
use crate::tilegrid::{tile_bounds, TileId};

pub const DEFAULT_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct BuildingPolygon {
    /// Outer boundary in pixel coordinates (y down), clockwise on screen.
    pub ring: Ring,
    /// Boundaries of enclosed unset regions; excluded from `area_px`.
    pub holes: Vec<Ring>,
    pub area_px: usize,
    pub area_m2: f64,
    pub tile: TileId,
}

impl BuildingPolygon {
    pub fn to_polygon(&self) -> Polygon {
        Polygon::with_holes(self.ring.clone(), self.holes.clone())
    }
}

/// Single-channel mask: `255` where the first channel is `>= threshold`.
pub fn binarize(img: &RasterTile, threshold: u8) -> RasterTile {
    let c = img.channels() as usize;
    let data = img
        .data()
        .chunks_exact(c)
        .map(|p| if p[0] >= threshold { 255 } else { 0 })
        .collect();
    RasterTile::from_data(img.size(), 1, data).expect("same dims")
}

struct DisjointSet(Vec<u32>);

impl DisjointSet {
    fn find(&mut self, mut i: u32) -> u32 {
        while self.0[i as usize] != i {
            let up = self.0[self.0[i as usize] as usize];
            self.0[i as usize] = up;
            i = up;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb) as usize] = ra.min(rb);
        }
    }
}

/// Component label per pixel (`u32::MAX` for background) and component
/// count, labels numbered in raster order of each component's first pixel.
pub fn label_components(mask: &RasterTile) -> (Vec<u32>, usize) {
    let s = mask.size() as usize;
    let set = |i: usize| mask.data()[i] != 0;
    let mut ds = DisjointSet((0..(s * s) as u32).collect());
    for r in 0..s {
        for c in 0..s {
            let i = r * s + c;
            if !set(i) {
                continue;
            }
            if c > 0 && set(i - 1) {
                ds.union(i as u32, (i - 1) as u32);
            }
            if r > 0 && set(i - s) {
                ds.union(i as u32, (i - s) as u32);
            }
        }
    }
    let mut labels = vec![u32::MAX; s * s];
    let mut remap = HashMap::new();
    for i in 0..s * s {
        if set(i) {
            let root = ds.find(i as u32);
            let next = remap.len() as u32;
            labels[i] = *remap.entry(root).or_insert(next);
        }
    }
    (labels, remap.len())
}

// Directions on the corner lattice, clockwise on screen: E, S, W, N.
const STEP: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

fn trace_rings(edges: &[((i64, i64), u8)]) -> Vec<Ring> {
    let mut from: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (k, (start, _)) in edges.iter().enumerate() {
        from.entry(*start).or_default().push(k);
    }
    let mut used = vec![false; edges.len()];
    let mut rings = Vec::new();
    for first in 0..edges.len() {
        if used[first] {
            continue;
        }
        let mut verts: Vec<(i64, i64)> = Vec::new();
        let mut e = first;
        loop {
            used[e] = true;
            let (start, dir) = edges[e];
            verts.push(start);
            let end = (start.0 + STEP[dir as usize].0, start.1 + STEP[dir as usize].1);
            let out = &from[&end];
            // At a pinch vertex the right turn keeps hugging the same pixel,
            // which keeps diagonal neighbours apart.
            let right = (dir + 1) % 4;
            let next = out
                .iter()
                .copied()
                .find(|&k| !used[k] && edges[k].1 == right)
                .or_else(|| out.iter().copied().find(|&k| !used[k]));
            match next {
                Some(k) => e = k,
                None => break,
            }
        }
        rings.push(drop_collinear(&verts));
    }
    rings
}

fn drop_collinear(v: &[(i64, i64)]) -> Ring {
    let n = v.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b, c) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross != 0 {
            out.push([b.0 as f64, b.1 as f64]);
        }
    }
    out
}

/// One polygon per 4-connected component of set pixels, ordered by each
/// component's first pixel in raster order.
pub fn polygonize(mask: &RasterTile, tile: TileId) -> Vec<BuildingPolygon> {
    let s = mask.size() as usize;
    let (labels, n) = label_components(mask);
    let mut edges: Vec<Vec<((i64, i64), u8)>> = vec![Vec::new(); n];
    let mut areas = vec![0usize; n];
    let label_at = |c: i64, r: i64| -> u32 {
        if c < 0 || r < 0 || c >= s as i64 || r >= s as i64 {
            u32::MAX
        } else {
            labels[r as usize * s + c as usize]
        }
    };
    for r in 0..s as i64 {
        for c in 0..s as i64 {
            let l = label_at(c, r);
            if l == u32::MAX {
                continue;
            }
            let e = &mut edges[l as usize];
            areas[l as usize] += 1;
            if label_at(c, r - 1) != l {
                e.push(((c, r), 0));
            }
            if label_at(c + 1, r) != l {
                e.push(((c + 1, r), 1));
            }
            if label_at(c, r + 1) != l {
                e.push(((c + 1, r + 1), 2));
            }
            if label_at(c - 1, r) != l {
                e.push(((c, r + 1), 3));
            }
        }
    }
    let mpp = tile_bounds(tile, mask.size()).meters_per_pixel;
    edges
        .iter()
        .zip(areas)
        .map(|(e, area_px)| {
            let mut rings = trace_rings(e);
            let outer = (0..rings.len())
                .max_by(|&a, &b| signed_area(&rings[a]).abs().total_cmp(&signed_area(&rings[b]).abs()))
                .expect("component has a boundary");
            let ring = rings.swap_remove(outer);
            BuildingPolygon {
                ring,
                holes: rings,
                area_px,
                area_m2: area_px as f64 * mpp * mpp,
                tile,
            }
        })
        .collect()
}

/// `(count, total_area_px, site_cover_fraction)` for a tile of `size` pixels.
pub fn count_and_area(polys: &[BuildingPolygon], size: u32) -> (usize, usize, f64) {
    let total: usize = polys.iter().map(|p| p.area_px).sum();
    let pixels = size as usize * size as usize;
    (polys.len(), total, total as f64 / pixels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportCoords {
    Pixel,
    Wgs84,
}

/// Feature collection with one polygon feature per building. `simplify`
/// applies Douglas-Peucker in pixel units to the exported rings only.
pub fn to_geojson(polys: &[BuildingPolygon], size: u32, coords: ExportCoords, simplify: Option<f64>) -> Value {
    let features: Vec<Value> = polys
        .iter()
        .map(|p| {
            let proj = TileProjector::new(p.tile, size);
            let ring_json = |r: &Ring| {
                let r = match simplify {
                    Some(tol) => simplify_ring(r, tol),
                    None => r.clone(),
                };
                let mut pts: Vec<[f64; 2]> = match coords {
                    ExportCoords::Pixel => r,
                    ExportCoords::Wgs84 => r.iter().map(|&q| proj.to_lonlat(q)).collect(),
                };
                pts.push(pts[0]);
                json!(pts)
            };
            let rings: Vec<Value> = std::iter::once(&p.ring).chain(&p.holes).map(ring_json).collect();
            json!({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": rings},
                "properties": {
                    "area_px": p.area_px,
                    "area_m2": p.area_m2,
                    "tile": p.tile.to_string(),
                },
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}
