//! Web-Mercator XYZ tile arithmetic.
//!
//! Tiles use the XYZ convention: origin at the top-left (north-west) corner,
//! `y` growing southwards. Tile membership is half-open: a point on the
//! shared edge of two tiles belongs to the one with the larger index.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deepest zoom accepted by [`tile_for_lonlat`].
pub const MAX_ZOOM: u8 = 22;

/// Zoom whose equatorial tiles are roughly 1.2 km wide.
pub const DEFAULT_ZOOM: u8 = 15;

/// Latitude limit of the square Web-Mercator world, `atan(sinh(pi))`.
pub const MAX_LATITUDE: f64 = 85.051_128_779_806_59;

/// Equatorial circumference of the WGS84 ellipsoid, `2 * pi * 6378137`.
pub const EARTH_CIRCUMFERENCE_M: f64 = 40_075_016.685_578_49;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId {
    pub z: u8,
    pub x: u32,
    pub y: u32,
}

impl TileId {
    pub fn new(z: u8, x: u32, y: u32) -> Result<Self> {
        if z > MAX_ZOOM {
            return Err(Error::InvalidArgument(format!("zoom {z} > {MAX_ZOOM}")));
        }
        let n = 1u64 << z;
        if u64::from(x) >= n || u64::from(y) >= n {
            return Err(Error::InvalidArgument(format!(
                "tile ({z}, {x}, {y}) outside the {n}x{n} grid"
            )));
        }
        Ok(Self { z, x, y })
    }

    /// Number of tiles along one axis at this zoom.
    pub fn grid_size(&self) -> u32 {
        1 << self.z
    }
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.z, self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        let p = Self { lon, lat };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || self.lat.abs() >= MAX_LATITUDE {
            return Err(Error::Domain(self.lat));
        }
        if !self.lon.is_finite() || !(-180.0..180.0).contains(&self.lon) {
            return Err(Error::InvalidArgument(format!(
                "longitude {} outside [-180, 180)",
                self.lon
            )));
        }
        Ok(())
    }
}

/// Axis-aligned geographic box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
}

impl BBox {
    pub fn new(west: f64, south: f64, east: f64, north: f64) -> Self {
        Self {
            west,
            south,
            east,
            north,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.west > self.east || self.south > self.north
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        !(self.east < other.west
            || other.east < self.west
            || self.north < other.south
            || other.north < self.south)
    }

    pub fn contains(&self, p: LonLat) -> bool {
        (self.west..=self.east).contains(&p.lon) && (self.south..=self.north).contains(&p.lat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileBounds {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
    /// Ground resolution at the tile's center latitude.
    pub meters_per_pixel: f64,
}

impl TileBounds {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.west, self.south, self.east, self.north)
    }

    /// Half-open containment: west/north edges inclusive.
    pub fn contains(&self, p: LonLat) -> bool {
        p.lon >= self.west && p.lon < self.east && p.lat <= self.north && p.lat > self.south
    }
}

/// Fractional tile coordinates of `p` at zoom `z`.
pub fn lonlat_to_tile_frac(p: LonLat, z: u8) -> Result<(f64, f64)> {
    p.validate()?;
    let n = (1u64 << z) as f64;
    let phi = p.lat.to_radians();
    let fx = (p.lon + 180.0) / 360.0 * n;
    let fy = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0 * n;
    Ok((fx, fy))
}

/// Inverse of [`lonlat_to_tile_frac`].
pub fn tile_frac_to_lonlat(fx: f64, fy: f64, z: u8) -> LonLat {
    let n = (1u64 << z) as f64;
    LonLat {
        lon: fx / n * 360.0 - 180.0,
        lat: (PI * (1.0 - 2.0 * fy / n)).sinh().atan().to_degrees(),
    }
}

pub fn tile_for_lonlat(p: LonLat, z: u8) -> Result<TileId> {
    if z > MAX_ZOOM {
        return Err(Error::InvalidArgument(format!("zoom {z} > {MAX_ZOOM}")));
    }
    let (fx, fy) = lonlat_to_tile_frac(p, z)?;
    let max = (1u32 << z) - 1;
    let clamp = |v: f64| (v.floor().max(0.0) as u64).min(u64::from(max)) as u32;
    Ok(TileId {
        z,
        x: clamp(fx),
        y: clamp(fy),
    })
}

/// Geographic center of a tile, used as its location metadata.
pub fn tile_center(t: TileId) -> LonLat {
    tile_frac_to_lonlat(f64::from(t.x) + 0.5, f64::from(t.y) + 0.5, t.z)
}

fn edge_lon(x: u32, z: u8) -> f64 {
    f64::from(x) / (1u64 << z) as f64 * 360.0 - 180.0
}

fn edge_lat(y: u32, z: u8) -> f64 {
    tile_frac_to_lonlat(0.0, f64::from(y), z).lat
}

/// Ground width in meters of a tile at zoom `z` centered on `lat`.
pub fn ground_width_m(lat: f64, z: u8) -> f64 {
    EARTH_CIRCUMFERENCE_M * lat.to_radians().cos() / (1u64 << z) as f64
}

pub fn tile_bounds(t: TileId, tile_pixels: u32) -> TileBounds {
    let center = tile_center(t);
    TileBounds {
        west: edge_lon(t.x, t.z),
        east: edge_lon(t.x + 1, t.z),
        north: edge_lat(t.y, t.z),
        south: edge_lat(t.y + 1, t.z),
        meters_per_pixel: ground_width_m(center.lat, t.z) / f64::from(tile_pixels.max(1)),
    }
}

/// Snaps values within `1e-9` of an integer onto it, so bounds produced by
/// [`tile_bounds`] map back onto exact tile edges.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// All tiles at zoom `z` intersecting `bbox`, in row-major order.
///
/// East and south edges are exclusive unless the box is degenerate along that
/// axis, in which case the single column (row) containing it is returned.
pub fn enumerate_region(bbox: BBox, z: u8) -> Result<Vec<TileId>> {
    if bbox.is_empty() {
        return Ok(Vec::new());
    }
    if z > MAX_ZOOM {
        return Err(Error::InvalidArgument(format!("zoom {z} > {MAX_ZOOM}")));
    }
    let clamp_lat = |lat: f64| lat.clamp(-MAX_LATITUDE + 1e-12, MAX_LATITUDE - 1e-12);
    let clamp_lon = |lon: f64| lon.clamp(-180.0, 180.0 - 1e-12);
    let (fx0, fy0) =
        lonlat_to_tile_frac(LonLat { lon: clamp_lon(bbox.west), lat: clamp_lat(bbox.north) }, z)?;
    let (fx1, fy1) =
        lonlat_to_tile_frac(LonLat { lon: clamp_lon(bbox.east), lat: clamp_lat(bbox.south) }, z)?;
    let max = f64::from((1u32 << z) - 1);
    let (fx0, fy0, fx1, fy1) = (snap(fx0), snap(fy0), snap(fx1), snap(fy1));
    let x0 = fx0.floor().clamp(0.0, max);
    let y0 = fy0.floor().clamp(0.0, max);
    let x1 = if fx1 > fx0 { fx1.ceil() - 1.0 } else { x0 }.clamp(x0, max);
    let y1 = if fy1 > fy0 { fy1.ceil() - 1.0 } else { y0 }.clamp(y0, max);
    let mut tiles = Vec::with_capacity(((x1 - x0 + 1.0) * (y1 - y0 + 1.0)) as usize);
    for y in y0 as u32..=y1 as u32 {
        for x in x0 as u32..=x1 as u32 {
            tiles.push(TileId { z, x, y });
        }
    }
    Ok(tiles)
}

/// `{root}/{kind}/{z}/{x}/{y}.png`
pub fn tile_path(root: &Path, kind: &str, t: TileId) -> PathBuf {
    root.join(kind)
        .join(t.z.to_string())
        .join(t.x.to_string())
        .join(format!("{}.png", t.y))
}

/// Square bounding box made of `n x n` tiles starting at `origin` (top-left).
pub fn tile_block_bbox(origin: TileId, n: u32) -> BBox {
    let a = tile_bounds(origin, 1);
    let b = tile_bounds(
        TileId {
            z: origin.z,
            x: origin.x + n - 1,
            y: origin.y + n - 1,
        },
        1,
    );
    BBox::new(a.west, b.south, b.east, a.north)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equator_prime_meridian_at_zoom_one() {
        let t = tile_for_lonlat(LonLat::new(0.0, 0.0).unwrap(), 1).unwrap();
        assert_eq!(t, TileId { z: 1, x: 1, y: 1 });
    }

    #[test]
    fn zoom_zero_is_a_single_tile() {
        for (lon, lat) in [(-179.9, 80.0), (0.0, 0.0), (179.9, -85.0)] {
            let t = tile_for_lonlat(LonLat::new(lon, lat).unwrap(), 0).unwrap();
            assert_eq!(t, TileId { z: 0, x: 0, y: 0 });
        }
    }

    /// Reference values evaluated independently with mpmath at 50 digits:
    /// fx = 17601.668, fy = 10746.988 for (13.3777, 52.5163) at z=15.
    #[test]
    fn berlin_tile_at_zoom_15() {
        let p = LonLat::new(13.3777, 52.5163).unwrap();
        assert_eq!(tile_for_lonlat(p, 15).unwrap(), TileId { z: 15, x: 17601, y: 10746 });
    }

    #[test]
    fn latitude_outside_band_is_a_domain_error() {
        assert!(matches!(LonLat::new(0.0, 86.0), Err(Error::Domain(_))));
        let p = LonLat { lon: 0.0, lat: -89.0 };
        assert!(matches!(tile_for_lonlat(p, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn world_tile_center_and_bounds() {
        let t = TileId::new(0, 0, 0).unwrap();
        let c = tile_center(t);
        assert_eq!((c.lon, c.lat), (0.0, 0.0));
        let b = tile_bounds(t, 256);
        assert_eq!((b.west, b.east), (-180.0, 180.0));
        assert!((b.north - MAX_LATITUDE).abs() < 1e-9);
    }

    #[test]
    fn north_south_mirror() {
        let n = tile_center(TileId::new(1, 1, 0).unwrap());
        let s = tile_center(TileId::new(1, 1, 1).unwrap());
        assert_eq!(n.lon, 90.0);
        assert_eq!(s.lon, 90.0);
        assert!(n.lat > 0.0);
        assert_eq!(s.lat, -n.lat);
    }

    #[test]
    fn equatorial_ground_width_at_zoom_15() {
        let t = tile_for_lonlat(LonLat::new(0.01, 0.01).unwrap(), 15).unwrap();
        let b = tile_bounds(t, 64);
        let width = b.meters_per_pixel * 64.0;
        // 40075016.686 / 2^15 = 1222.99 m
        assert!((width - 1222.99).abs() < 0.1, "{width}");
    }

    #[test]
    fn adjacent_tiles_share_edges_exactly() {
        let a = tile_bounds(TileId::new(15, 17601, 10748).unwrap(), 64);
        let b = tile_bounds(TileId::new(15, 17602, 10748).unwrap(), 64);
        let c = tile_bounds(TileId::new(15, 17601, 10749).unwrap(), 64);
        assert_eq!(a.east, b.west);
        assert_eq!(a.south, c.north);
    }

    #[test]
    fn region_of_one_tile_bounds() {
        let t = TileId::new(15, 17601, 10748).unwrap();
        let b = tile_bounds(t, 64);
        assert_eq!(enumerate_region(b.bbox(), 15).unwrap(), vec![t]);
    }

    #[test]
    fn seven_by_seven_region() {
        let origin = TileId::new(15, 17600, 10745).unwrap();
        let tiles = enumerate_region(tile_block_bbox(origin, 7), 15).unwrap();
        assert_eq!(tiles.len(), 49);
        assert_eq!(tiles[0], origin);
        assert_eq!(tiles[1], TileId::new(15, 17601, 10745).unwrap());
        assert_eq!(tiles[48], TileId::new(15, 17606, 10751).unwrap());
    }

    #[test]
    fn degenerate_and_empty_regions() {
        let col = enumerate_region(BBox::new(13.4, 52.40, 13.4, 52.45), 15).unwrap();
        assert!(col.len() > 1);
        assert!(col.iter().all(|t| t.x == col[0].x));
        assert!(enumerate_region(BBox::new(13.5, 52.4, 13.4, 52.5), 15)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn tile_path_layout() {
        let t = TileId::new(15, 3, 4).unwrap();
        assert_eq!(
            tile_path(Path::new("/d"), "roads", t),
            PathBuf::from("/d/roads/15/3/4.png")
        );
    }

    proptest! {
        #[test]
        fn center_round_trip(z in 0u8..=18, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let n = 1u32 << z;
            let t = TileId::new(z, ((fx * n as f64) as u32).min(n - 1), ((fy * n as f64) as u32).min(n - 1)).unwrap();
            let c = tile_center(t);
            prop_assert_eq!(tile_for_lonlat(c, z).unwrap(), t);
            let (x, y) = lonlat_to_tile_frac(c, z).unwrap();
            let back = tile_frac_to_lonlat(x, y, z);
            prop_assert!((back.lon - c.lon).abs() < 1e-9 && (back.lat - c.lat).abs() < 1e-9);
        }

        #[test]
        fn point_inside_its_tile(lon in -180.0f64..180.0, lat in -85.0f64..85.0, z in 0u8..=20) {
            let p = LonLat::new(lon, lat).unwrap();
            let t = tile_for_lonlat(p, z).unwrap();
            let b = tile_bounds(t, 256);
            prop_assert!(p.lon >= b.west && p.lon <= b.east);
            prop_assert!(p.lat >= b.south - 1e-12 && p.lat <= b.north + 1e-12);
        }
    }
}
