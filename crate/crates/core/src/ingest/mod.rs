//! Vector geodata ingestion: parsing, layer classification, tag filtering,
//! per-tile aggregation, captions and the dataset manifest.

mod caption;
mod manifest;
mod remote;

pub use caption::{
    osm_caption, rule_caption, truncate_chars, truncate_tokens, CaptionBundle, CaptionOptions, Captioner,
    DEFAULT_TEMPLATE,
};
pub use manifest::{build_manifest, read_manifest, write_manifest, Split, SplitPolicy, TileRecord};
pub use remote::{seed_cache, Cache, Remote, RemoteConfig, WikiEntry, DEFAULT_GEOSEARCH_RADIUS_M};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::geom::{
    polygon_intersects_rect, polyline_intersects_rect, ring_self_intersects, signed_area, Point, Polygon,
    Polyline,
};
use crate::tilegrid::{lonlat_to_tile_frac, tile_bounds, BBox, LonLat, TileId, MAX_LATITUDE};

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Polygon(Polygon),
    Polyline(Polyline),
    Point(Point),
}

impl Geometry {
    pub fn bbox(&self) -> Option<BBox> {
        match self {
            Geometry::Polygon(p) => p.bbox(),
            Geometry::Polyline(l) => l.bbox(),
            Geometry::Point(p) => Some(BBox::new(p[0], p[1], p[0], p[1])),
        }
    }

    pub fn intersects(&self, r: &BBox) -> bool {
        match self {
            Geometry::Polygon(p) => polygon_intersects_rect(p, r),
            Geometry::Polyline(l) => polyline_intersects_rect(l, r),
            Geometry::Point(p) => p[0] >= r.west && p[0] <= r.east && p[1] >= r.south && p[1] <= r.north,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    Buildings,
    /// Road importance class, 1 (most important) to 3.
    Roads(u8),
    Landuse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoFeature {
    pub geometry: Geometry,
    pub tags: BTreeMap<String, String>,
    pub layer: Layer,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<GeoFeature>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn count(&self, pred: impl Fn(&Layer) -> bool) -> usize {
        self.features.iter().filter(|f| pred(&f.layer)).count()
    }

    /// Feature indices per intersecting tile at zoom `z`.
    pub fn tile_index(&self, z: u8) -> HashMap<TileId, Vec<usize>> {
        let mut index: HashMap<TileId, Vec<usize>> = HashMap::new();
        let max = (1u64 << z) as f64 - 1.0;
        let clamp_lat = |lat: f64| lat.clamp(-MAX_LATITUDE + 1e-9, MAX_LATITUDE - 1e-9);
        for (i, f) in self.features.iter().enumerate() {
            let Some(b) = f.geometry.bbox() else { continue };
            let nw = lonlat_to_tile_frac(LonLat { lon: b.west.clamp(-180.0, 180.0 - 1e-9), lat: clamp_lat(b.north) }, z);
            let se = lonlat_to_tile_frac(LonLat { lon: b.east.clamp(-180.0, 180.0 - 1e-9), lat: clamp_lat(b.south) }, z);
            let (Ok((x0, y0)), Ok((x1, y1))) = (nw, se) else { continue };
            let (x0, y0) = (x0.floor().clamp(0.0, max) as u32, y0.floor().clamp(0.0, max) as u32);
            let (x1, y1) = (x1.floor().clamp(0.0, max) as u32, y1.floor().clamp(0.0, max) as u32);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let t = TileId { z, x, y };
                    if f.geometry.intersects(&tile_bounds(t, 1).bbox()) {
                        index.entry(t).or_default().push(i);
                    }
                }
            }
        }
        index
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
        }
    }

    pub fn building_polygons(&self) -> Vec<Polygon> {
        self.features
            .iter()
            .filter_map(|f| match (&f.layer, &f.geometry) {
                (Layer::Buildings, Geometry::Polygon(p)) => Some(p.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn road_lines(&self) -> Vec<(Polyline, u8)> {
        self.features
            .iter()
            .filter_map(|f| match (&f.layer, &f.geometry) {
                (Layer::Roads(c), Geometry::Polyline(l)) => Some((l.clone(), *c)),
                _ => None,
            })
            .collect()
    }

    pub fn landuse_polygons(&self) -> Vec<(Polygon, String)> {
        self.features
            .iter()
            .filter_map(|f| match (&f.layer, &f.geometry) {
                (Layer::Landuse(c), Geometry::Polygon(p)) => Some((p.clone(), c.clone())),
                _ => None,
            })
            .collect()
    }
}

/// Highway values per road class; anything else tagged `highway` is class 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct RoadClasses {
    pub class1: Vec<String>,
    pub class2: Vec<String>,
}

impl Default for RoadClasses {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            class1: v(&["motorway", "motorway_link", "trunk", "trunk_link", "primary", "primary_link"]),
            class2: v(&["secondary", "secondary_link", "tertiary", "tertiary_link"]),
        }
    }
}

impl RoadClasses {
    pub fn class_of(&self, highway: &str) -> u8 {
        if self.class1.iter().any(|v| v == highway) {
            1
        } else if self.class2.iter().any(|v| v == highway) {
            2
        } else {
            3
        }
    }
}

/// Layer for a tag set and geometry kind, or `None` if the feature is not
/// used by any layer.
pub fn classify_feature(tags: &BTreeMap<String, String>, geometry: &Geometry, roads: &RoadClasses) -> Option<Layer> {
    let tag = |k: &str| tags.get(k).map(String::as_str);
    match geometry {
        Geometry::Polygon(_) => {
            if tag("building").is_some_and(|v| v != "no") {
                return Some(Layer::Buildings);
            }
            if let Some(v) = tag("landuse") {
                return Some(Layer::Landuse(v.to_string()));
            }
            match (tag("leisure"), tag("natural")) {
                (Some("park" | "garden" | "playground"), _) => Some(Layer::Landuse("park".into())),
                (_, Some("water")) => Some(Layer::Landuse("water".into())),
                (_, Some("wood")) => Some(Layer::Landuse("forest".into())),
                _ => None,
            }
        }
        Geometry::Polyline(_) => tag("highway").map(|v| Layer::Roads(roads.class_of(v))),
        Geometry::Point(_) => None,
    }
}

fn parse_point(v: &Value) -> Option<Point> {
    let a = v.as_array()?;
    let (x, y) = (a.first()?.as_f64()?, a.get(1)?.as_f64()?);
    (x.is_finite() && y.is_finite()).then_some([x, y])
}

fn parse_points(v: &Value) -> Option<Vec<Point>> {
    v.as_array()?.iter().map(parse_point).collect()
}

fn dedup(points: Vec<Point>) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(points.len());
    for p in points {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

/// Removes duplicate vertices and the closing vertex; rejects rings with
/// fewer than three vertices, zero area or self-intersections.
fn clean_ring(points: Vec<Point>) -> std::result::Result<Vec<Point>, String> {
    let mut r = dedup(points);
    if r.len() > 1 && r.first() == r.last() {
        r.pop();
    }
    if r.len() < 3 {
        return Err(format!("ring has {} distinct vertices", r.len()));
    }
    if signed_area(&r) == 0.0 {
        return Err("ring has zero area".into());
    }
    if ring_self_intersects(&r) {
        return Err("ring self-intersects".into());
    }
    Ok(r)
}

fn parse_polygon(v: &Value) -> std::result::Result<Polygon, String> {
    let rings = v.as_array().ok_or("polygon coordinates are not an array")?;
    if rings.is_empty() {
        return Err("polygon has no rings".into());
    }
    let rings = rings
        .iter()
        .map(|r| parse_points(r).ok_or_else(|| "malformed ring".to_string()).and_then(clean_ring))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Polygon { rings })
}

fn parse_line(v: &Value) -> std::result::Result<Polyline, String> {
    let pts = dedup(parse_points(v).ok_or("malformed line")?);
    if pts.len() < 2 {
        return Err("line has fewer than 2 distinct vertices".into());
    }
    Ok(Polyline { points: pts })
}

fn parse_geometry(g: &Value) -> std::result::Result<Vec<Geometry>, String> {
    let kind = g.get("type").and_then(Value::as_str).ok_or("geometry without type")?;
    let coords = g.get("coordinates").ok_or("geometry without coordinates");
    let many = |c: &Value| c.as_array().cloned().ok_or_else(|| "coordinates are not an array".to_string());
    Ok(match kind {
        "Point" => vec![Geometry::Point(parse_point(coords?).ok_or("malformed point")?)],
        "LineString" => vec![Geometry::Polyline(parse_line(coords?)?)],
        "MultiLineString" => many(coords?)?
            .iter()
            .map(|l| parse_line(l).map(Geometry::Polyline))
            .collect::<std::result::Result<_, _>>()?,
        "Polygon" => vec![Geometry::Polygon(parse_polygon(coords?)?)],
        "MultiPolygon" => many(coords?)?
            .iter()
            .map(|p| parse_polygon(p).map(Geometry::Polygon))
            .collect::<std::result::Result<_, _>>()?,
        "MultiPoint" => many(coords?)?
            .iter()
            .map(|p| parse_point(p).map(Geometry::Point).ok_or_else(|| "malformed point".to_string()))
            .collect::<std::result::Result<_, _>>()?,
        other => return Err(format!("unsupported geometry type {other}")),
    })
}

fn parse_tags(props: Option<&Value>) -> BTreeMap<String, String> {
    let mut tags = BTreeMap::new();
    let Some(Value::Object(obj)) = props else { return tags };
    // Overpass-style exports nest OSM tags under "tags".
    let src: &Map<String, Value> = match obj.get("tags") {
        Some(Value::Object(inner)) => inner,
        _ => obj,
    };
    for (k, v) in src {
        let s = match v {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            _ => continue,
        };
        tags.insert(k.clone(), s);
    }
    tags
}

/// Parses a GeoJSON FeatureCollection. Features with malformed geometry are
/// dropped with a warning; features matching no layer are dropped silently.
pub fn parse_geodata(input: &str, roads: &RoadClasses) -> Result<FeatureSet> {
    let doc: Value = serde_json::from_str(input)?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::Parse("document is not a FeatureCollection".into()));
    }
    let items = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("FeatureCollection without a features array".into()))?;
    let mut out = FeatureSet::default();
    for (i, item) in items.iter().enumerate() {
        let tags = parse_tags(item.get("properties"));
        let geoms = match item.get("geometry").map(parse_geometry) {
            Some(Ok(g)) => g,
            Some(Err(msg)) => {
                log::warn!("feature {i}: {msg}; dropped");
                continue;
            }
            None => {
                log::warn!("feature {i}: no geometry; dropped");
                continue;
            }
        };
        for geometry in geoms {
            if let Some(layer) = classify_feature(&tags, &geometry, roads) {
                out.features.push(GeoFeature {
                    geometry,
                    tags: tags.clone(),
                    layer,
                });
            }
        }
    }
    Ok(out)
}

fn closed(ring: &[Point]) -> Vec<Point> {
    let mut r = ring.to_vec();
    if let Some(&first) = ring.first() {
        r.push(first);
    }
    r
}

/// Serializes a feature set as a GeoJSON FeatureCollection that
/// [`parse_geodata`] reads back to the same features.
pub fn to_geojson(set: &FeatureSet) -> Value {
    let features: Vec<Value> = set
        .features
        .iter()
        .map(|f| {
            let geometry = match &f.geometry {
                Geometry::Polygon(p) => json!({
                    "type": "Polygon",
                    "coordinates": p.rings.iter().map(|r| closed(r)).collect::<Vec<_>>(),
                }),
                Geometry::Polyline(l) => json!({"type": "LineString", "coordinates": l.points}),
                Geometry::Point(p) => json!({"type": "Point", "coordinates": p}),
            };
            json!({"type": "Feature", "geometry": geometry, "properties": f.tags})
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

/// Set of `key` or `key=value` patterns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagAllowlist {
    keys: BTreeSet<String>,
    pairs: BTreeSet<(String, String)>,
}

pub const DEFAULT_ALLOWLIST: &str = include_str!("../../data/allowlist.txt");

impl TagAllowlist {
    /// One pattern per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let (mut keys, mut pairs) = (BTreeSet::new(), BTreeSet::new());
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.insert((k.trim().to_string(), v.trim().to_string())),
                None => keys.insert(line.to_string()),
            };
        }
        if keys.is_empty() && pairs.is_empty() {
            return Err(Error::Config("tag allowlist is empty".into()));
        }
        Ok(Self { keys, pairs })
    }

    pub fn default_list() -> Self {
        Self::parse(DEFAULT_ALLOWLIST).expect("bundled allowlist parses")
    }

    pub fn matches(&self, key: &str, value: &str) -> bool {
        self.keys.contains(key) || self.pairs.contains(&(key.to_string(), value.to_string()))
    }

    pub fn len(&self) -> usize {
        self.keys.len() + self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn filter_tags(f: &GeoFeature, allow: &TagAllowlist) -> GeoFeature {
    GeoFeature {
        geometry: f.geometry.clone(),
        tags: f
            .tags
            .iter()
            .filter(|(k, v)| allow.matches(k, v))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        layer: f.layer.clone(),
    }
}

/// `key=value` -> number of features intersecting `t` that carry the pair.
pub fn aggregate_tile_tags(features: &FeatureSet, t: TileId) -> BTreeMap<String, usize> {
    let rect = tile_bounds(t, 1).bbox();
    let mut counts = BTreeMap::new();
    for f in features.features.iter().filter(|f| f.geometry.intersects(&rect)) {
        for (k, v) in &f.tags {
            *counts.entry(format!("{k}={v}")).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tilegrid::tile_bounds;

    fn collection(features: Value) -> String {
        json!({"type": "FeatureCollection", "features": features}).to_string()
    }

    fn square(x: f64, y: f64, s: f64) -> Value {
        json!([[[x, y], [x + s, y], [x + s, y + s], [x, y + s], [x, y]]])
    }

    #[test]
    fn parse_examples() {
        let one = collection(json!([{
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": square(13.4, 52.5, 0.001)},
            "properties": {"building": "yes"}
        }]));
        let set = parse_geodata(&one, &RoadClasses::default()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.features[0].layer, Layer::Buildings);
        let Geometry::Polygon(p) = &set.features[0].geometry else { panic!() };
        assert_eq!(p.exterior().len(), 4);

        let road = collection(json!([{
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": [[13.4, 52.5], [13.41, 52.5]]},
            "properties": {"highway": "primary"}
        }]));
        let set = parse_geodata(&road, &RoadClasses::default()).unwrap();
        assert_eq!(set.features[0].layer, Layer::Roads(1));
        assert!(parse_geodata(&collection(json!([])), &RoadClasses::default()).unwrap().is_empty());
        assert!(parse_geodata("{\"type\": \"Feature\"}", &RoadClasses::default()).is_err());
        assert!(parse_geodata("not json", &RoadClasses::default()).is_err());
    }

    #[test]
    fn road_class_table() {
        let rc = RoadClasses::default();
        for (hw, c) in [
            ("motorway", 1),
            ("trunk", 1),
            ("primary", 1),
            ("secondary", 2),
            ("tertiary", 2),
            ("residential", 3),
            ("service", 3),
            ("footway", 3),
        ] {
            assert_eq!(rc.class_of(hw), c, "{hw}");
        }
    }

    #[test]
    fn malformed_features_are_dropped() {
        let doc = collection(json!([
            {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]]]}, "properties": {"building": "yes"}},
            {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [0, 0], [1, 0]]]}, "properties": {"building": "yes"}},
            {"type": "Feature", "geometry": null, "properties": {"building": "yes"}},
            {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": square(0.0, 0.0, 1.0)}, "properties": {"amenity": "bench"}},
            {"type": "Feature", "geometry": {"type": "MultiPolygon", "coordinates": [square(0.0, 0.0, 1.0), square(2.0, 0.0, 1.0)]}, "properties": {"landuse": "residential"}}
        ]));
        let set = parse_geodata(&doc, &RoadClasses::default()).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.features.iter().all(|f| f.layer == Layer::Landuse("residential".into())));
    }

    #[test]
    fn geojson_round_trip() {
        let doc = collection(json!([
            {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": square(1.0, 1.0, 0.5)}, "properties": {"building": "house", "building:levels": 2}},
            {"type": "Feature", "geometry": {"type": "LineString", "coordinates": [[0.0, 0.0], [1.0, 0.5]]}, "properties": {"highway": "tertiary"}}
        ]));
        let set = parse_geodata(&doc, &RoadClasses::default()).unwrap();
        assert_eq!(set.features[0].tags["building:levels"], "2");
        let again = parse_geodata(&to_geojson(&set).to_string(), &RoadClasses::default()).unwrap();
        assert_eq!(again, set);
    }

    fn feature(tags: &[(&str, &str)], geometry: Geometry) -> GeoFeature {
        GeoFeature {
            geometry,
            tags: tags.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            layer: Layer::Buildings,
        }
    }

    #[test]
    fn allowlist_filtering() {
        let allow = TagAllowlist::parse("building\nhighway=primary # major roads\n").unwrap();
        let f = feature(&[("building", "industrial"), ("source", "survey")], Geometry::Point([0.0, 0.0]));
        let g = filter_tags(&f, &allow);
        assert_eq!(g.tags.len(), 1);
        assert_eq!(g.tags["building"], "industrial");
        assert_eq!(filter_tags(&g, &allow), g);
        let none = filter_tags(&feature(&[("name", "x")], Geometry::Point([0.0, 0.0])), &allow);
        assert!(none.tags.is_empty());
        assert!(allow.matches("highway", "primary"));
        assert!(!allow.matches("highway", "secondary"));
        assert!(TagAllowlist::parse("# nothing\n").is_err());
        assert!(TagAllowlist::default_list().len() >= 40);
    }

    #[test]
    fn tile_tag_aggregation() {
        let t = TileId::new(15, 17601, 10746).unwrap();
        let b = tile_bounds(t, 1);
        let (cx, cy) = ((b.west + b.east) / 2.0, (b.south + b.north) / 2.0);
        let d = (b.east - b.west) / 20.0;
        let house = |x: f64| feature(&[("building", "house")], Geometry::Polygon(Polygon::new(vec![[x, cy], [x + d, cy], [x + d, cy + d], [x, cy + d]])));
        let set = FeatureSet { features: vec![house(cx), house(cx - 3.0 * d), house(cx + 3.0 * d)] };
        assert_eq!(aggregate_tile_tags(&set, t), BTreeMap::from([("building=house".to_string(), 3)]));
        let straddle = FeatureSet { features: vec![house(b.east - d / 2.0)] };
        let east = TileId::new(15, 17602, 10746).unwrap();
        assert_eq!(aggregate_tile_tags(&straddle, t).len(), 1);
        assert_eq!(aggregate_tile_tags(&straddle, east).len(), 1);
        let far = TileId::new(15, 100, 100).unwrap();
        assert!(aggregate_tile_tags(&set, far).is_empty());
        let idx = straddle.tile_index(15);
        assert_eq!(idx.len(), 2);
    }
}
