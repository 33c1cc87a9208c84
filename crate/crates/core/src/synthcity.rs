//! Procedural cities with known ground truth.
//!
//! Layout happens in a local metric frame centered on the region. Streets
//! form a jittered grid; organic cities pass the whole layout through a
//! smooth sinusoidal warp. Buildings keep at least `setback_m` from every
//! street centerline so they never touch rasterized roads.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Polygon, Polyline};
use crate::ingest::{FeatureSet, GeoFeature, Geometry, Layer};
use crate::tilegrid::BBox;

const EARTH_RADIUS_M: f64 = 6_378_137.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CityStyle {
    Grid,
    Organic,
    /// Grid in the west blending into organic in the east.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneDensity {
    pub residential: f64,
    pub commercial: f64,
    pub industrial: f64,
    pub park: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitySpec {
    pub name: String,
    pub seed: u64,
    pub style: CityStyle,
    pub block_min_m: f64,
    pub block_max_m: f64,
    /// Probability that a building lot is occupied, per zone.
    pub density: ZoneDensity,
    /// Relative frequency of residential, commercial, industrial and park.
    pub zone_weights: [f64; 4],
    /// Zones are drawn for square patches of this many blocks.
    pub zone_patch_blocks: u32,
    /// Every n-th street is class 1; of the rest every m-th is class 2.
    pub arterial_every: u32,
    pub collector_every: u32,
    /// Minimum distance from any street centerline to any building.
    pub setback_m: f64,
}

impl CitySpec {
    pub fn gridtown(seed: u64) -> Self {
        Self {
            name: "gridtown".into(),
            seed,
            style: CityStyle::Grid,
            block_min_m: 90.0,
            block_max_m: 140.0,
            density: ZoneDensity {
                residential: 0.85,
                commercial: 0.9,
                industrial: 0.8,
                park: 0.0,
            },
            zone_weights: [0.55, 0.2, 0.15, 0.1],
            zone_patch_blocks: 2,
            arterial_every: 6,
            collector_every: 3,
            setback_m: 12.0,
        }
    }

    pub fn curville(seed: u64) -> Self {
        Self {
            name: "curville".into(),
            style: CityStyle::Organic,
            block_min_m: 70.0,
            block_max_m: 120.0,
            zone_weights: [0.65, 0.15, 0.05, 0.15],
            ..Self::gridtown(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.density;
        let dens_ok = [d.residential, d.commercial, d.industrial, d.park]
            .iter()
            .all(|v| (0.0..=1.0).contains(v));
        if !dens_ok {
            return Err(Error::Config("building densities must lie in [0, 1]".into()));
        }
        if !(self.block_min_m > 0.0 && self.block_min_m <= self.block_max_m && self.block_max_m.is_finite()) {
            return Err(Error::Config("block sizes must satisfy 0 < min <= max".into()));
        }
        if self.zone_weights.iter().any(|w| !(*w >= 0.0)) || self.zone_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("zone weights must be non-negative and not all zero".into()));
        }
        if self.zone_patch_blocks == 0 || self.arterial_every == 0 || self.collector_every == 0 {
            return Err(Error::Config("zone patch and street periods must be positive".into()));
        }
        if !(self.setback_m > 0.0) || 2.0 * self.setback_m >= self.block_min_m {
            return Err(Error::Config("setback must be positive and below half the minimum block size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Zone {
    Residential,
    Commercial,
    Industrial,
    Park,
}

/// Local tangent frame: meters east/north of the region center, mapped
/// through Web-Mercator so straight local lines stay straight on tiles.
struct Frame {
    x0: f64,
    y0: f64,
    k: f64,
}

impl Frame {
    fn new(lon0: f64, lat0: f64) -> Self {
        let phi = lat0.to_radians();
        Self {
            x0: EARTH_RADIUS_M * lon0.to_radians(),
            y0: EARTH_RADIUS_M * (FRAC_PI_4 + phi / 2.0).tan().ln(),
            k: phi.cos(),
        }
    }

    fn to_local(&self, lon: f64, lat: f64) -> Point {
        let x = EARTH_RADIUS_M * lon.to_radians();
        let y = EARTH_RADIUS_M * (FRAC_PI_4 + lat.to_radians() / 2.0).tan().ln();
        [(x - self.x0) * self.k, (y - self.y0) * self.k]
    }

    fn to_lonlat(&self, p: Point) -> Point {
        let x = self.x0 + p[0] / self.k;
        let y = self.y0 + p[1] / self.k;
        let lon = (x / EARTH_RADIUS_M).to_degrees();
        let lat = (2.0 * (y / EARTH_RADIUS_M).exp().atan() - PI / 2.0).to_degrees();
        [lon, lat]
    }
}

struct Warp {
    amplitude: f64,
    wavelength: f64,
    phase: [f64; 2],
    /// For mixed cities the amplitude ramps from 0 at `ramp.0` to full at `ramp.1`.
    ramp: Option<(f64, f64)>,
}

impl Warp {
    /// Lower bound on how much the warp can shrink local distances.
    fn contraction(&self) -> f64 {
        let slope = self.amplitude * TAU / self.wavelength;
        let ramp_slope = self.ramp.map_or(0.0, |(a, b)| self.amplitude / (b - a));
        (1.0 - (slope + ramp_slope) * 2f64.sqrt()).max(0.1)
    }

    fn apply(&self, p: Point) -> Point {
        if self.amplitude == 0.0 {
            return p;
        }
        let a = match self.ramp {
            Some((lo, hi)) => self.amplitude * ((p[0] - lo) / (hi - lo)).clamp(0.0, 1.0),
            None => self.amplitude,
        };
        [
            p[0] + a * (TAU * p[1] / self.wavelength + self.phase[0]).sin(),
            p[1] + a * (TAU * p[0] / self.wavelength + self.phase[1]).sin(),
        ]
    }
}

fn densify(a: Point, b: Point, step: f64) -> Vec<Point> {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let n = (len / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

fn mix(seed: u64, parts: &[i64]) -> u64 {
    // splitmix64 over the parts; gives independent per-block streams.
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p as u64;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn street_positions(rng: &mut ChaCha8Rng, lo: f64, hi: f64, spec: &CitySpec) -> Vec<f64> {
    let mut xs = vec![lo - spec.block_max_m - rng.random_range(0.0..spec.block_max_m)];
    while *xs.last().expect("non-empty") < hi + spec.block_max_m {
        let w = if spec.block_max_m > spec.block_min_m {
            rng.random_range(spec.block_min_m..spec.block_max_m)
        } else {
            spec.block_min_m
        };
        xs.push(xs.last().expect("non-empty") + w);
    }
    xs
}

fn road_tag(class: u8) -> &'static str {
    match class {
        1 => "primary",
        2 => "secondary",
        _ => "residential",
    }
}

type Rect = (f64, f64, f64, f64);

struct Builder<'a> {
    frame: &'a Frame,
    warp: &'a Warp,
    out: Vec<GeoFeature>,
}

impl Builder<'_> {
    fn emit_polygon(&mut self, ring: Vec<Point>, tags: &[(&str, String)], layer: Layer) {
        let ring = ring.into_iter().map(|p| self.frame.to_lonlat(self.warp.apply(p))).collect();
        self.out.push(GeoFeature {
            geometry: Geometry::Polygon(Polygon::new(ring)),
            tags: tags.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<BTreeMap<_, _>>(),
            layer,
        });
    }

    fn building(&mut self, ring: Vec<Point>, tags: &[(&str, String)]) {
        self.emit_polygon(ring, tags, Layer::Buildings);
    }
}

fn rect_ring((l, b, r, t): Rect) -> Vec<Point> {
    vec![[l, b], [r, b], [r, t], [l, t]]
}

fn residential(bd: &mut Builder, rng: &mut ChaCha8Rng, (l, b, r, t): Rect, density: f64) {
    let (w, h) = (r - l, t - b);
    if w < 8.0 || h < 8.0 {
        return;
    }
    let depth = rng.random_range(10.0..16.0f64).min(h);
    let two_rows = h >= 2.0 * depth + 5.0;
    let kind = ["house", "detached", "apartments"][rng.random_range(0..3)];
    let place = |bd: &mut Builder, rng: &mut ChaCha8Rng, rect: Rect| {
        if rng.random_bool(density) {
            let levels = rng.random_range(1..4u32).to_string();
            bd.building(rect_ring(rect), &[("building", kind.into()), ("building:levels", levels)]);
        }
    };
    // Rows along the south and north edges.
    let rows: Vec<(f64, f64)> = if two_rows { vec![(b, b + depth), (t - depth, t)] } else { vec![(b, t)] };
    for (y0, y1) in rows {
        let mut x = l;
        while r - x >= 8.0 {
            let lot = rng.random_range(10.0..18.0f64).min(r - x);
            let inset = rng.random_range(0.0..1.5);
            let (yy0, yy1) = if y0 == b { (y0, y1 - inset) } else { (y0 + inset, y1) };
            place(bd, rng, (x, yy0, x + lot, yy1));
            x += lot + rng.random_range(4.0..7.0);
        }
    }
    if !two_rows || w < 2.0 * depth + 5.0 {
        return;
    }
    // Columns along the west and east edges, between the rows.
    let gap = 5.0;
    for (x0, x1) in [(l, l + depth), (r - depth, r)] {
        let mut y = b + depth + gap;
        while t - depth - gap - y >= 8.0 {
            let lot = rng.random_range(10.0..18.0f64).min(t - depth - gap - y);
            place(bd, rng, (x0, y, x1, y + lot));
            y += lot + rng.random_range(4.0..7.0);
        }
    }
}

fn parcels((l, b, r, t): Rect, split_over: f64, gap: f64) -> Vec<Rect> {
    let nx = if r - l > split_over { 2 } else { 1 };
    let ny = if t - b > split_over { 2 } else { 1 };
    let (pw, ph) = ((r - l - gap * (nx - 1) as f64) / nx as f64, (t - b - gap * (ny - 1) as f64) / ny as f64);
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let x = l + i as f64 * (pw + gap);
            let y = b + j as f64 * (ph + gap);
            out.push((x, y, x + pw, y + ph));
        }
    }
    out
}

fn commercial(bd: &mut Builder, rng: &mut ChaCha8Rng, area: Rect, density: f64) {
    for (l, b, r, t) in parcels(area, 80.0, 6.0) {
        if !rng.random_bool(density) {
            continue;
        }
        let (l, b) = (l + rng.random_range(0.5..4.0), b + rng.random_range(0.5..4.0));
        let (r, t) = (r - rng.random_range(0.5..4.0), t - rng.random_range(0.5..4.0));
        if r - l < 8.0 || t - b < 8.0 {
            continue;
        }
        let ring = if rng.random_bool(0.7) {
            // L shape: cut a notch from one corner.
            let nw = (r - l) * rng.random_range(0.3..0.5);
            let nh = (t - b) * rng.random_range(0.3..0.5);
            match rng.random_range(0..4) {
                0 => vec![[l, b], [r, b], [r, t - nh], [r - nw, t - nh], [r - nw, t], [l, t]],
                1 => vec![[l, b], [r, b], [r, t], [l + nw, t], [l + nw, t - nh], [l, t - nh]],
                2 => vec![[l, b + nh], [l + nw, b + nh], [l + nw, b], [r, b], [r, t], [l, t]],
                _ => vec![[l, b], [r - nw, b], [r - nw, b + nh], [r, b + nh], [r, t], [l, t]],
            }
        } else {
            rect_ring((l, b, r, t))
        };
        let kind = if rng.random_bool(0.5) { "commercial" } else { "retail" };
        let levels = rng.random_range(3..9u32).to_string();
        bd.building(ring, &[("building", kind.into()), ("building:levels", levels)]);
    }
}

fn industrial(bd: &mut Builder, rng: &mut ChaCha8Rng, area: Rect, density: f64) {
    for (l, b, r, t) in parcels(area, 70.0, 8.0) {
        if !rng.random_bool(density) {
            continue;
        }
        let m = |rng: &mut ChaCha8Rng| rng.random_range(2.0..6.0);
        let rect = (l + m(rng), b + m(rng), r - m(rng), t - m(rng));
        if rect.2 - rect.0 < 8.0 || rect.3 - rect.1 < 8.0 {
            continue;
        }
        let kind = if rng.random_bool(0.6) { "industrial" } else { "warehouse" };
        bd.building(rect_ring(rect), &[("building", kind.into()), ("building:levels", "1".into())]);
    }
}

/// Generates streets, landuse blocks and buildings covering `region`.
pub fn generate_city(spec: &CitySpec, region: BBox) -> Result<FeatureSet> {
    spec.validate()?;
    if region.is_empty() {
        return Ok(FeatureSet::default());
    }
    let frame = Frame::new((region.west + region.east) / 2.0, (region.south + region.north) / 2.0);
    let sw = frame.to_local(region.west, region.south);
    let ne = frame.to_local(region.east, region.north);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let xs = street_positions(&mut rng, sw[0], ne[0], spec);
    let ys = street_positions(&mut rng, sw[1], ne[1], spec);
    let mean_block = (spec.block_min_m + spec.block_max_m) / 2.0;
    let organic = Warp {
        amplitude: 0.045 * 3.5 * mean_block,
        wavelength: 3.5 * mean_block,
        phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
        ramp: None,
    };
    let warp = match spec.style {
        CityStyle::Grid => Warp { amplitude: 0.0, ..organic },
        CityStyle::Organic => organic,
        CityStyle::Mixed => Warp { ramp: Some((sw[0], ne[0])), ..organic },
    };
    let setback = spec.setback_m / warp.contraction();
    let step = if warp.amplitude == 0.0 { f64::INFINITY } else { 15.0 };
    let mut bd = Builder { frame: &frame, warp: &warp, out: Vec::new() };

    let class_of = |i: usize| -> u8 {
        if (i as u32).is_multiple_of(spec.arterial_every) {
            1
        } else if (i as u32).is_multiple_of(spec.collector_every) {
            2
        } else {
            3
        }
    };
    let road = |bd: &mut Builder, a: Point, b: Point, class: u8| {
        let points = densify(a, b, step)
            .into_iter()
            .map(|p| bd.frame.to_lonlat(bd.warp.apply(p)))
            .collect();
        bd.out.push(GeoFeature {
            geometry: Geometry::Polyline(Polyline { points }),
            tags: BTreeMap::from([("highway".to_string(), road_tag(class).to_string())]),
            layer: Layer::Roads(class),
        });
    };
    for (i, &x) in xs.iter().enumerate() {
        for w in ys.windows(2) {
            road(&mut bd, [x, w[0]], [x, w[1]], class_of(i));
        }
    }
    for (j, &y) in ys.iter().enumerate() {
        for w in xs.windows(2) {
            road(&mut bd, [w[0], y], [w[1], y], class_of(j));
        }
    }

    let weights = spec.zone_weights;
    let total: f64 = weights.iter().sum();
    let patch = spec.zone_patch_blocks as usize;
    let landuse_inset = (spec.setback_m / 3.0).min(setback);
    for i in 0..xs.len() - 1 {
        for j in 0..ys.len() - 1 {
            let mut zr = ChaCha8Rng::seed_from_u64(mix(spec.seed, &[1, (i / patch) as i64, (j / patch) as i64]));
            let mut u = zr.random_range(0.0..total);
            let mut zone = Zone::Park;
            for (z, w) in [Zone::Residential, Zone::Commercial, Zone::Industrial, Zone::Park].into_iter().zip(weights) {
                if u < w {
                    zone = z;
                    break;
                }
                u -= w;
            }
            let (l, b, r, t) = (xs[i], ys[j], xs[i + 1], ys[j + 1]);
            let li = (l + landuse_inset, b + landuse_inset, r - landuse_inset, t - landuse_inset);
            let mut ring = Vec::new();
            let corners = rect_ring(li);
            for k in 0..4 {
                let mut seg = densify(corners[k], corners[(k + 1) % 4], step);
                seg.pop();
                ring.extend(seg);
            }
            let (tag, layer) = match zone {
                Zone::Residential => (("landuse", "residential"), "residential"),
                Zone::Commercial => (("landuse", "commercial"), "commercial"),
                Zone::Industrial => (("landuse", "industrial"), "industrial"),
                Zone::Park => (("leisure", "park"), "park"),
            };
            bd.emit_polygon(ring, &[(tag.0, tag.1.to_string())], Layer::Landuse(layer.into()));

            let mut br = ChaCha8Rng::seed_from_u64(mix(spec.seed, &[2, i as i64, j as i64]));
            let inner = (l + setback, b + setback, r - setback, t - setback);
            let d = &spec.density;
            match zone {
                Zone::Residential => residential(&mut bd, &mut br, inner, d.residential),
                Zone::Commercial => commercial(&mut bd, &mut br, inner, d.commercial),
                Zone::Industrial => industrial(&mut bd, &mut br, inner, d.industrial),
                Zone::Park => {}
            }
        }
    }
    Ok(FeatureSet { features: bd.out })
}
