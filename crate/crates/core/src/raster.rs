//! Rendering of vector layers into fixed-size tiles.
//!
//! All rasterizers sample at pixel centers without anti-aliasing, so a mask
//! pixel is set exactly when `(col + 0.5, row + 0.5)` lies inside a polygon.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{crossing_x, dist2_point_segment, Point, Polygon, Polyline, TileProjector};
use crate::nn::Tensor;
use crate::tilegrid::TileId;

pub const DEFAULT_SIZE: u32 = 64;

/// Reference size at which road widths are specified.
pub const WIDTH_REFERENCE: u32 = 1024;

/// Square, row-major, channel-interleaved 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterTile {
    size: u32,
    channels: u8,
    data: Vec<u8>,
}

impl RasterTile {
    pub fn new(size: u32, channels: u8) -> Self {
        Self {
            size,
            channels,
            data: vec![0; size as usize * size as usize * channels as usize],
        }
    }

    pub fn from_data(size: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != size as usize * size as usize * channels as usize {
            return Err(Error::Shape(format!(
                "{} bytes for a {size}x{size}x{channels} tile",
                data.len()
            )));
        }
        Ok(Self { size, channels, data })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, col: u32, row: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (row as usize * self.size as usize + col as usize) * c;
        &self.data[i..i + c]
    }

    fn put(&mut self, col: usize, row: usize, color: &[u8]) {
        let c = self.channels as usize;
        let i = (row * self.size as usize + col) * c;
        self.data[i..i + c].copy_from_slice(&color[..c]);
    }

    /// Number of nonzero pixels in a single-channel tile.
    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Channel-first tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (s, c) = (self.size as usize, self.channels as usize);
        let mut out = vec![0.0; s * s * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (k, v) in px.iter().enumerate() {
                out[k * s * s + i] = f64::from(*v) / 255.0;
            }
        }
        Tensor::from_vec(&[c, s, s], out).expect("consistent dims")
    }

    /// Inverse of [`RasterTile::to_tensor`]; values are clamped and rounded.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if h != w || !matches!(c, 1 | 3) {
            return Err(Error::Shape(format!("cannot store a {c}x{h}x{w} tensor as a tile")));
        }
        let mut data = vec![0u8; c * h * w];
        for k in 0..c {
            for i in 0..h * w {
                let v = t.data()[k * h * w + i].clamp(0.0, 1.0);
                data[i * c + k] = (v * 255.0).round() as u8;
            }
        }
        Self::from_data(h as u32, c as u8, data)
    }
}

/// Roads-first channel stack of a road and a landuse tile, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImage {
    pub road_channels: usize,
    pub tensor: Tensor,
}

pub fn concat_condition(roads: &RasterTile, landuse: &RasterTile) -> Result<ConditionImage> {
    if roads.size != landuse.size {
        return Err(Error::Shape(format!(
            "road tile is {}px, landuse tile is {}px",
            roads.size, landuse.size
        )));
    }
    let tensor = Tensor::concat_channels(&roads.to_tensor(), &landuse.to_tensor())?;
    Ok(ConditionImage {
        road_channels: roads.channels as usize,
        tensor,
    })
}

impl ConditionImage {
    pub fn split(&self) -> Result<(RasterTile, RasterTile)> {
        let (c, _, _) = self.tensor.dims3()?;
        let roads = RasterTile::from_tensor(&self.tensor.channels(0, self.road_channels)?)?;
        let landuse = RasterTile::from_tensor(&self.tensor.channels(self.road_channels, c)?)?;
        Ok((roads, landuse))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct RasterStyle {
    /// Colors for road classes 1, 2, 3.
    pub road_colors: [[u8; 3]; 3],
    /// Widths in pixels at [`WIDTH_REFERENCE`] for classes 1, 2, 3.
    pub road_widths: [f64; 3],
    /// Landuse categories in draw order (later entries paint over earlier).
    pub landuse_palette: Vec<(String, [u8; 3])>,
    pub landuse_fallback: [u8; 3],
}

impl Default for RasterStyle {
    fn default() -> Self {
        let palette = [
            ("farmland", [200, 190, 120]),
            ("grass", [110, 190, 90]),
            ("park", [60, 170, 70]),
            ("forest", [30, 110, 40]),
            ("cemetery", [150, 170, 140]),
            ("residential", [220, 200, 170]),
            ("commercial", [230, 130, 130]),
            ("retail", [240, 100, 160]),
            ("industrial", [170, 140, 210]),
            ("railway", [120, 120, 120]),
            ("water", [70, 130, 230]),
        ];
        Self {
            road_colors: [[255, 255, 255], [255, 200, 60], [150, 150, 150]],
            road_widths: [5.0, 3.0, 1.0],
            landuse_palette: palette.iter().map(|(k, c)| (k.to_string(), *c)).collect(),
            landuse_fallback: [90, 90, 90],
        }
    }
}

impl RasterStyle {
    pub fn validate(&self) -> Result<()> {
        if self.road_widths.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Config("road widths must be positive".into()));
        }
        if self.road_colors.contains(&[0, 0, 0]) {
            return Err(Error::Config("road colors must differ from the black background".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in &self.landuse_palette {
            if !seen.insert(name) {
                return Err(Error::Config(format!("landuse category {name} listed twice")));
            }
        }
        Ok(())
    }

    /// Width in pixels of `class` (1..=3) at tile size `size`, at least 1.
    pub fn road_width_px(&self, class: u8, size: u32) -> f64 {
        let w = self.road_widths[usize::from(class.clamp(1, 3)) - 1];
        (w * f64::from(size) / f64::from(WIDTH_REFERENCE)).max(1.0)
    }
}

/// Sets `color` at every pixel whose center is inside `poly` (pixel coords).
fn fill_polygon_px(tile: &mut RasterTile, poly: &Polygon, color: &[u8]) {
    let size = tile.size as usize;
    let Some(b) = poly.bbox() else { return };
    let row0 = ((b.south - 0.5).ceil().max(0.0)) as usize;
    let row1 = ((b.north - 0.5).floor().min(size as f64 - 1.0)) as i64;
    if row1 < row0 as i64 {
        return;
    }
    let mut xs: Vec<f64> = Vec::new();
    for row in row0..=row1 as usize {
        let y = row as f64 + 0.5;
        xs.clear();
        for ring in &poly.rings {
            let n = ring.len();
            if n < 3 {
                continue;
            }
            let mut j = n - 1;
            for i in 0..n {
                let (a, c) = (ring[i], ring[j]);
                if (a[1] > y) != (c[1] > y) {
                    xs.push(crossing_x(a, c, y));
                }
                j = i;
            }
        }
        xs.sort_by(f64::total_cmp);
        // A center x is inside iff an odd number of crossings lie strictly
        // to its right, i.e. it falls in [xs[2k], xs[2k + 1]).
        for pair in xs.chunks_exact(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let mut col = ((lo - 0.5).ceil().max(0.0)) as usize;
            while col > 0 && (col - 1) as f64 + 0.5 >= lo {
                col -= 1;
            }
            while col < size && (col as f64 + 0.5) < lo {
                col += 1;
            }
            while col < size && (col as f64 + 0.5) < hi {
                tile.put(col, row, color);
                col += 1;
            }
        }
    }
}

/// Binary building mask (single channel, values 0 or 255).
pub fn rasterize_polygons(polys: &[Polygon], t: TileId, size: u32) -> Result<RasterTile> {
    let proj = TileProjector::new(t, size);
    let mut tile = RasterTile::new(size, 1);
    for p in polys {
        fill_polygon_px(&mut tile, &proj.polygon_to_pixels(p)?, &[255]);
    }
    Ok(tile)
}

/// Same as [`rasterize_polygons`] for polygons already in pixel space.
pub fn rasterize_pixel_polygons(polys: &[Polygon], size: u32) -> RasterTile {
    let mut tile = RasterTile::new(size, 1);
    for p in polys {
        fill_polygon_px(&mut tile, p, &[255]);
    }
    tile
}

fn stroke_polyline_px(tile: &mut RasterTile, line: &[Point], width: f64, color: &[u8]) {
    let size = tile.size as i64;
    let r = width / 2.0;
    let r2 = r * r;
    let segs: Vec<(Point, Point)> = if line.len() == 1 {
        vec![(line[0], line[0])]
    } else {
        line.windows(2).map(|w| (w[0], w[1])).collect()
    };
    for (a, b) in segs {
        let c0 = ((a[0].min(b[0]) - r - 0.5).floor() as i64).max(0);
        let c1 = ((a[0].max(b[0]) + r - 0.5).ceil() as i64).min(size - 1);
        let r0 = ((a[1].min(b[1]) - r - 0.5).floor() as i64).max(0);
        let r1 = ((a[1].max(b[1]) + r - 0.5).ceil() as i64).min(size - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = [col as f64 + 0.5, row as f64 + 0.5];
                if dist2_point_segment(p, a, b) <= r2 {
                    tile.put(col as usize, row as usize, color);
                }
            }
        }
    }
}

/// Styled road image. Class 1 is drawn last so it wins where roads overlap.
pub fn rasterize_roads(lines: &[(Polyline, u8)], t: TileId, size: u32, style: &RasterStyle) -> Result<RasterTile> {
    let proj = TileProjector::new(t, size);
    let mut tile = RasterTile::new(size, 3);
    for class in [3u8, 2, 1] {
        let color = style.road_colors[usize::from(class) - 1];
        let width = style.road_width_px(class, size);
        for (line, _) in lines.iter().filter(|(_, c)| (*c).clamp(1, 3) == class) {
            let px = proj.polyline_to_pixels(line)?;
            stroke_polyline_px(&mut tile, &px.points, width, &color);
        }
    }
    Ok(tile)
}

/// Palette landuse image. Categories draw in palette order; unknown
/// categories draw first in the fallback color.
pub fn rasterize_landuse(polys: &[(Polygon, String)], t: TileId, size: u32, style: &RasterStyle) -> Result<RasterTile> {
    let proj = TileProjector::new(t, size);
    let mut tile = RasterTile::new(size, 3);
    let rank = |cat: &str| style.landuse_palette.iter().position(|(k, _)| k == cat);
    let mut order: Vec<(Option<usize>, usize)> = polys.iter().enumerate().map(|(i, (_, c))| (rank(c), i)).collect();
    order.sort();
    for (r, i) in order {
        let (poly, cat) = &polys[i];
        let color = match r {
            Some(r) => style.landuse_palette[r].1,
            None => {
                log::warn!("unknown landuse category {cat:?}; using fallback color");
                style.landuse_fallback
            }
        };
        fill_polygon_px(&mut tile, &proj.polygon_to_pixels(poly)?, &color);
    }
    Ok(tile)
}

pub fn write_png(path: &Path, tile: &RasterTile) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), tile.size, tile.size);
    enc.set_color(if tile.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    w.write_image_data(&tile.data).map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    w.finish().map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

pub fn read_png(path: &Path) -> Result<RasterTile> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Png(format!("{}: {e}", path.display()));
    let mut dec = png::Decoder::new(std::io::BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.width != info.height {
        return Err(Error::Shape(format!("{}: tile is not square", path.display())));
    }
    buf.truncate(info.buffer_size());
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        other => return Err(Error::Png(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    RasterTile::from_data(info.width, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::point_in_polygon;
    use crate::tilegrid::tile_bounds;
    use proptest::prelude::*;

    fn brute_force(polys: &[Polygon], size: u32) -> Vec<u8> {
        let mut out = Vec::new();
        for row in 0..size {
            for col in 0..size {
                let p = [f64::from(col) + 0.5, f64::from(row) + 0.5];
                out.push(if polys.iter().any(|q| point_in_polygon(p, q)) { 255 } else { 0 });
            }
        }
        out
    }

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    #[test]
    fn covering_polygon_fills_tile() {
        let t = TileId::new(15, 17601, 10746).unwrap();
        let b = tile_bounds(t, 64);
        let m = 0.001;
        let poly = Polygon::new(vec![
            [b.west - m, b.south - m],
            [b.east + m, b.south - m],
            [b.east + m, b.north + m],
            [b.west - m, b.north + m],
        ]);
        let tile = rasterize_polygons(&[poly], t, 64).unwrap();
        assert!(tile.data().iter().all(|&v| v == 255));
        let flat = Polygon::new(vec![[b.west, b.south], [b.east, b.north], [b.west, b.south]]);
        assert_eq!(rasterize_polygons(&[flat], t, 64).unwrap().count_set(), 0);
    }

    #[test]
    fn left_half_matches_brute_force() {
        let p = rect(0.0, 0.0, 32.0, 64.0);
        let tile = rasterize_pixel_polygons(std::slice::from_ref(&p), 64);
        assert_eq!(tile.data(), brute_force(&[p], 64).as_slice());
        assert_eq!(tile.count_set(), 32 * 64);
    }

    #[test]
    fn horizontal_road_is_a_band() {
        let style = RasterStyle {
            road_widths: [80.0, 48.0, 16.0],
            ..RasterStyle::default()
        };
        let t = TileId::new(15, 17601, 10746).unwrap();
        let proj = TileProjector::new(t, 64);
        let line = Polyline {
            points: vec![proj.to_lonlat([-5.0, 32.0]), proj.to_lonlat([70.0, 32.0])],
        };
        let tile = rasterize_roads(&[(line, 1)], t, 64, &style).unwrap();
        let w1 = style.road_width_px(1, 64);
        assert_eq!(w1, 5.0);
        for row in 0..64u32 {
            for col in 0..64u32 {
                let d = (f64::from(row) + 0.5 - 32.0).abs();
                let want: &[u8] = if d <= w1 / 2.0 + 1e-9 { &[255, 255, 255] } else { &[0, 0, 0] };
                assert_eq!(tile.pixel(col, row), want, "pixel {col},{row}");
            }
        }
    }

    #[test]
    fn class_one_wins_overlaps() {
        let style = RasterStyle::default();
        let t = TileId::new(15, 17601, 10746).unwrap();
        let proj = TileProjector::new(t, 64);
        let h = Polyline { points: vec![proj.to_lonlat([0.0, 10.2]), proj.to_lonlat([64.0, 10.2])] };
        let roads = vec![(h.clone(), 1), (h, 3)];
        let tile = rasterize_roads(&roads, t, 64, &style).unwrap();
        assert_eq!(tile.pixel(5, 10), &style.road_colors[0]);
        assert!(rasterize_roads(&[], t, 64, &style).unwrap().data().iter().all(|&v| v == 0));
    }

    #[test]
    fn landuse_draw_order_and_fallback() {
        let style = RasterStyle::default();
        let t = TileId::new(15, 17601, 10746).unwrap();
        let b = tile_bounds(t, 64);
        let cover = Polygon::new(vec![
            [b.west - 1.0, b.south - 1.0],
            [b.east + 1.0, b.south - 1.0],
            [b.east + 1.0, b.north + 1.0],
            [b.west - 1.0, b.north + 1.0],
        ]);
        let polys = vec![(cover.clone(), "water".to_string()), (cover.clone(), "residential".to_string())];
        let tile = rasterize_landuse(&polys, t, 64, &style).unwrap();
        assert_eq!(tile.pixel(0, 0), &[70, 130, 230]);
        let odd = rasterize_landuse(&[(cover, "moon".into())], t, 64, &style).unwrap();
        assert_eq!(odd.pixel(3, 3), &style.landuse_fallback);
    }

    #[test]
    fn condition_concat_and_split() {
        let mut roads = RasterTile::new(8, 3);
        let mut landuse = RasterTile::new(8, 3);
        for (i, v) in roads.data.iter_mut().enumerate() {
            *v = (i * 37 % 256) as u8;
        }
        for (i, v) in landuse.data.iter_mut().enumerate() {
            *v = (i * 91 % 256) as u8;
        }
        let c = concat_condition(&roads, &landuse).unwrap();
        assert_eq!(c.tensor.shape(), &[6, 8, 8]);
        let (r, l) = c.split().unwrap();
        assert_eq!((r, l), (roads, landuse));
        let blank = concat_condition(&RasterTile::new(8, 3), &RasterTile::new(8, 3)).unwrap();
        assert!(blank.tensor.data().iter().all(|&v| v == 0.0));
        assert!(concat_condition(&RasterTile::new(8, 3), &RasterTile::new(4, 3)).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rgb = RasterTile::new(16, 3);
        rgb.put(3, 4, &[1, 2, 3]);
        let mut gray = RasterTile::new(16, 1);
        gray.put(5, 6, &[255]);
        for t in [rgb, gray] {
            let p = dir.path().join(format!("{}.png", t.channels));
            write_png(&p, &t).unwrap();
            assert_eq!(read_png(&p).unwrap(), t);
        }
        assert!(matches!(read_png(&dir.path().join("none.png")), Err(Error::Missing(_))));
    }

    fn arb_polygon() -> impl Strategy<Value = Polygon> {
        prop::collection::vec((-4.0f64..36.0, -4.0f64..36.0), 3..9)
            .prop_map(|pts| Polygon::new(pts.into_iter().map(|(x, y)| [x, y]).collect()))
    }

    proptest! {
        #[test]
        fn scanline_matches_point_in_polygon(polys in prop::collection::vec(arb_polygon(), 1..4)) {
            let tile = rasterize_pixel_polygons(&polys, 32);
            let want = brute_force(&polys, 32);
            prop_assert_eq!(tile.data(), want.as_slice());
        }

        #[test]
        fn rectangle_area_converges(x0 in 0.0f64..0.4, y0 in 0.0f64..0.4, w in 0.1f64..0.6, h in 0.1f64..0.6, size in 16u32..200) {
            let s = f64::from(size);
            let p = rect(x0 * s, y0 * s, (x0 + w) * s, (y0 + h) * s);
            let frac = rasterize_pixel_polygons(&[p], size).count_set() as f64 / (s * s);
            prop_assert!((frac - w * h).abs() <= 2.0 / s);
        }

        #[test]
        fn styled_rasters_are_deterministic(y in 0.0f64..64.0, class in 1u8..4) {
            let t = TileId::new(15, 17601, 10746).unwrap();
            let proj = TileProjector::new(t, 64);
            let line = Polyline { points: vec![proj.to_lonlat([0.0, y]), proj.to_lonlat([64.0, 64.0 - y])] };
            let style = RasterStyle::default();
            let a = rasterize_roads(&[(line.clone(), class)], t, 64, &style).unwrap();
            let b = rasterize_roads(&[(line, class)], t, 64, &style).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
