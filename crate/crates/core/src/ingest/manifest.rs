use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::caption::CaptionBundle;
use crate::error::{Error, Result};
use crate::raster::read_png;
use crate::tilegrid::{tile_center, tile_path, TileId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct SplitPolicy {
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self { eval_fraction: 0.1, seed: 0 }
    }
}

impl SplitPolicy {
    /// Hash-based assignment: depends only on the seed and the tile.
    pub fn assign(&self, t: TileId) -> Split {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([t.z]);
        h.update(t.x.to_le_bytes());
        h.update(t.y.to_le_bytes());
        let d = h.finalize();
        let u = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / 2f64.powi(64);
        if u < self.eval_fraction {
            Split::Eval
        } else {
            Split::Train
        }
    }
}

/// One manifest line. Raster paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRecord {
    pub z: u8,
    pub x: u32,
    pub y: u32,
    pub center_lon: f64,
    pub center_lat: f64,
    pub city: String,
    pub caption: String,
    pub fallback: bool,
    pub target_path: String,
    pub roads_path: String,
    pub landuse_path: String,
    pub split: Split,
}

impl TileRecord {
    pub fn tile(&self) -> TileId {
        TileId {
            z: self.z,
            x: self.x,
            y: self.y,
        }
    }

    pub fn resolve(&self, root: &Path, rel: &str) -> PathBuf {
        root.join(rel)
    }
}

fn rel(kind: &str, t: TileId) -> String {
    tile_path(Path::new(""), kind, t).to_string_lossy().replace('\\', "/")
}

/// Records for `tiles` (with captions aligned by index), skipping tiles
/// whose rasters are missing or disagree in size.
pub fn build_manifest(
    root: &Path,
    tiles: &[TileId],
    captions: &[CaptionBundle],
    split: &SplitPolicy,
) -> Result<Vec<TileRecord>> {
    if tiles.len() != captions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tiles but {} captions",
            tiles.len(),
            captions.len()
        )));
    }
    let mut out = Vec::with_capacity(tiles.len());
    'tiles: for (&t, cap) in tiles.iter().zip(captions) {
        let paths = [rel("target", t), rel("roads", t), rel("landuse", t)];
        let mut size = None;
        for p in &paths {
            match read_png(&root.join(p)) {
                Ok(r) if size.is_none_or(|s| s == r.size()) => size = Some(r.size()),
                Ok(_) => {
                    log::warn!("tile {t}: rasters differ in size; skipped");
                    continue 'tiles;
                }
                Err(e) => {
                    log::warn!("tile {t}: {e}; skipped");
                    continue 'tiles;
                }
            }
        }
        let c = tile_center(t);
        let [target_path, roads_path, landuse_path] = paths;
        out.push(TileRecord {
            z: t.z,
            x: t.x,
            y: t.y,
            center_lon: c.lon,
            center_lat: c.lat,
            city: cap.city_name.clone(),
            caption: cap.final_caption.clone(),
            fallback: cap.fallback,
            target_path,
            roads_path,
            landuse_path,
            split: split.assign(t),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[TileRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<TileRecord>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{write_png, RasterTile};
    use crate::tilegrid::{enumerate_region, tile_block_bbox};

    fn caption(city: &str) -> CaptionBundle {
        CaptionBundle {
            osm_caption: String::new(),
            wiki_caption: String::new(),
            final_caption: format!("city tile of {city}"),
            city_name: city.into(),
            fallback: true,
        }
    }

    #[test]
    fn seven_by_seven_region_and_missing_rasters() {
        let dir = tempfile::tempdir().unwrap();
        let origin = TileId::new(15, 17600, 10740).unwrap();
        let tiles = enumerate_region(tile_block_bbox(origin, 7), 15).unwrap();
        assert_eq!(tiles.len(), 49);
        for &t in &tiles {
            for kind in ["target", "roads", "landuse"] {
                let ch = if kind == "target" { 1 } else { 3 };
                write_png(&tile_path(dir.path(), kind, t), &RasterTile::new(8, ch)).unwrap();
            }
        }
        let caps = vec![caption("gridtown"); 49];
        let policy = SplitPolicy { eval_fraction: 0.3, seed: 5 };
        let recs = build_manifest(dir.path(), &tiles, &caps, &policy).unwrap();
        assert_eq!(recs.len(), 49);
        assert!(recs.iter().all(|r| {
            let c = tile_center(r.tile());
            c.lon == r.center_lon && c.lat == r.center_lat
        }));
        assert!(recs.iter().any(|r| r.split == Split::Eval) && recs.iter().any(|r| r.split == Split::Train));

        let m1 = dir.path().join("a.jsonl");
        let m2 = dir.path().join("b.jsonl");
        write_manifest(&m1, &recs).unwrap();
        write_manifest(&m2, &build_manifest(dir.path(), &tiles, &caps, &policy).unwrap()).unwrap();
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
        assert_eq!(read_manifest(&m1).unwrap(), recs);

        std::fs::remove_file(tile_path(dir.path(), "roads", tiles[3])).unwrap();
        assert_eq!(build_manifest(dir.path(), &tiles, &caps, &policy).unwrap().len(), 48);
        assert!(build_manifest(dir.path(), &[], &[], &policy).unwrap().is_empty());
    }
}
