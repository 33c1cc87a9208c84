//! Disk-level stages: dataset build, training, sampling, evaluation and
//! completeness assessment. Each stage reads and writes the tile-directory
//! layout `{root}/{kind}/{z}/{x}/{y}.png` and can be re-run from disk.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completeness::{
    degrade, format_strata, stratum_report, score, site_cover_ratio, Class, ClassificationResult, StratumSummary,
    Thresholds,
};
use crate::condition::embed_caption;
use crate::config::Config;
use crate::diffusion::{
    batch_indices, ddim_sample, ddim_timesteps, restyle_caption, tile_seed, train_step, Ablation, Conditioned,
    Conditioning, ConditionalUnet, NoiseSchedule, TrainSample, TrainState,
};
use crate::error::{Error, Result};
use crate::ingest::{
    aggregate_tile_tags, build_manifest, filter_tags, write_manifest, CaptionBundle, Captioner, FeatureSet, Remote,
    TileRecord,
};
use crate::metrics::{region_report, FeatureSource, RegionReport};
use crate::nn::Tensor;
use crate::raster::{concat_condition, rasterize_landuse, rasterize_polygons, rasterize_roads, read_png, write_png, RasterTile};
use crate::synthcity::{generate_city, CitySpec};
use crate::tilegrid::{enumerate_region, tile_block_bbox, tile_center, tile_for_lonlat, tile_path, LonLat, TileId};
use crate::vector::{binarize, polygonize};

pub const MANIFEST: &str = "manifest.jsonl";
pub const DEGRADATION: &str = "degradation.jsonl";

/// Features of one city and the tiles to build from them.
#[derive(Debug, Clone)]
pub struct CitySource {
    pub name: String,
    pub features: FeatureSet,
    pub tiles: Vec<TileId>,
}

/// Built-in synthetic cities and where they are placed on the map.
pub fn preset(name: &str, seed: u64) -> Option<(CitySpec, LonLat)> {
    match name {
        "gridtown" => Some((CitySpec::gridtown(seed), LonLat { lon: 8.54, lat: 47.37 })),
        "curville" => Some((CitySpec::curville(seed), LonLat { lon: 11.25, lat: 43.77 })),
        _ => None,
    }
}

/// A synthetic city covering the `n x n` tiles whose top-left tile contains `origin`.
pub fn synthetic_source(spec: &CitySpec, origin: LonLat, zoom: u8, n: u32) -> Result<CitySource> {
    if n == 0 {
        return Err(Error::InvalidArgument("region must span at least one tile".into()));
    }
    let region = tile_block_bbox(tile_for_lonlat(origin, zoom)?, n);
    Ok(CitySource {
        name: spec.name.clone(),
        features: generate_city(spec, region)?,
        tiles: enumerate_region(region, zoom)?,
    })
}

/// Target mask, road raster and landuse raster of one tile.
pub fn render_tile(cfg: &Config, features: &FeatureSet, t: TileId) -> Result<[RasterTile; 3]> {
    let size = cfg.tiles.size;
    Ok([
        rasterize_polygons(&features.building_polygons(), t, size)?,
        rasterize_roads(&features.road_lines(), t, size, &cfg.style)?,
        rasterize_landuse(&features.landuse_polygons(), t, size, &cfg.style)?,
    ])
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Model(e.to_string()))
}

/// Writes rasters for every tile of every source, captions them and writes
/// the manifest. Records come out in source order, then tile order.
pub fn build_dataset(
    cfg: &Config,
    sources: &[CitySource],
    out: &Path,
    remote: &Remote,
    jobs: usize,
) -> Result<Vec<TileRecord>> {
    let mut seen = BTreeSet::new();
    for s in sources {
        for t in &s.tiles {
            if t.z != cfg.tiles.zoom {
                return Err(Error::InvalidArgument(format!("tile {t} is not at zoom {}", cfg.tiles.zoom)));
            }
            if !seen.insert(*t) {
                return Err(Error::InvalidArgument(format!("tile {t} appears in two sources")));
            }
        }
    }
    let allow = cfg.allowlist()?;
    let captioner = Captioner {
        remote,
        options: cfg.ingest.caption.clone(),
    };
    let pool = pool(jobs)?;
    let mut records = Vec::new();
    for src in sources {
        let index = src.features.tile_index(cfg.tiles.zoom);
        let filtered = FeatureSet {
            features: src.features.features.iter().map(|f| filter_tags(f, &allow)).collect(),
        };
        let captions: Vec<Result<CaptionBundle>> = pool.install(|| {
            src.tiles
                .par_iter()
                .map(|&t| {
                    let idx = index.get(&t).map(Vec::as_slice).unwrap_or(&[]);
                    let rasters = render_tile(cfg, &src.features.subset(idx), t)?;
                    for (kind, r) in ["target", "roads", "landuse"].iter().zip(&rasters) {
                        write_png(&tile_path(out, kind, t), r)?;
                    }
                    let counts = aggregate_tile_tags(&filtered.subset(idx), t);
                    Ok(captioner.caption(&counts, tile_center(t), &src.name))
                })
                .collect()
        });
        let captions = captions.into_iter().collect::<Result<Vec<_>>>()?;
        records.extend(build_manifest(out, &src.tiles, &captions, &cfg.split_policy())?);
    }
    write_manifest(&out.join(MANIFEST), &records)?;
    log::info!("wrote {} tiles to {}", records.len(), out.display());
    Ok(records)
}

/// Caption text the model sees for a record.
fn caption_text(r: &TileRecord, ablation: Ablation, style_city: Option<&str>) -> String {
    match (ablation.no_prompt, style_city) {
        (true, Some(s)) => s.to_string(),
        (true, None) => r.city.clone(),
        (false, Some(s)) => restyle_caption(&r.caption, &r.city, s),
        (false, None) => r.caption.clone(),
    }
}

/// Condition tensor, caption embedding and coordinates for one record.
pub fn load_conditioning(
    cfg: &Config,
    root: &Path,
    r: &TileRecord,
    ablation: Ablation,
    style_city: Option<&str>,
) -> Result<(Tensor, Vec<f64>, Option<(f64, f64)>)> {
    let s = cfg.tiles.size as usize;
    let condition = if ablation.no_image {
        Tensor::zeros(&[cfg.model.cond_channels, s, s])
    } else {
        let roads = read_png(&root.join(&r.roads_path))?;
        let landuse = read_png(&root.join(&r.landuse_path))?;
        if roads.size() as usize != s {
            return Err(Error::Shape(format!("tile {}: {} px, expected {s}", r.tile(), roads.size())));
        }
        concat_condition(&roads, &landuse)?.tensor
    };
    let caption = embed_caption(&caption_text(r, ablation, style_city), cfg.model.text_dim);
    let coords = (!ablation.no_metadata).then_some((r.center_lon, r.center_lat));
    Ok((condition, caption, coords))
}

/// Training examples for `records`, with ablated modalities removed.
pub fn load_samples(cfg: &Config, root: &Path, records: &[TileRecord], ablation: Ablation) -> Result<Vec<TrainSample>> {
    records
        .iter()
        .map(|r| {
            let target = read_png(&root.join(&r.target_path))?;
            if target.channels() != 1 || target.size() != cfg.tiles.size {
                return Err(Error::Shape(format!("tile {}: target is not a {} px mask", r.tile(), cfg.tiles.size)));
            }
            let mut x0 = target.to_tensor();
            x0.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
            let (condition, caption, coords) = load_conditioning(cfg, root, r, ablation, None)?;
            Ok(TrainSample { x0, condition, caption, coords })
        })
        .collect()
}

pub fn new_train_state(cfg: &Config, ablation: Ablation, jobs: usize) -> Result<TrainState> {
    let model = ConditionalUnet::new(cfg.model, cfg.seed)?;
    Ok(TrainState::new(model, cfg.train_config(ablation, jobs)))
}

/// Runs optimizer steps until `state.step == total_steps`, calling
/// `on_step` after each one.
pub fn train(
    state: &mut TrainState,
    samples: &[TrainSample],
    sched: &NoiseSchedule,
    total_steps: u64,
    mut on_step: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    while state.step < total_steps {
        let idx = batch_indices(state.config.seed, state.step, samples.len(), state.config.batch_size);
        let batch: Vec<TrainSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        train_step(state, &batch, sched)?;
        on_step(state)?;
    }
    Ok(())
}

/// `step,loss` lines, one per completed step.
pub fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{l:e}\n", i + 1));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn tile_key(t: TileId) -> u64 {
    (u64::from(t.z) << 58) | (u64::from(t.x) << 29) | u64::from(t.y)
}

pub struct SampleRequest<'a> {
    pub model: &'a ConditionalUnet,
    pub schedule: &'a NoiseSchedule,
    /// Modalities the model was trained without.
    pub ablation: Ablation,
    /// City whose morphology the captions should ask for.
    pub style_city: Option<&'a str>,
    pub seed: u64,
}

/// Generates one grayscale tile per record into `out/target`. Each tile's
/// noise depends only on the seed and the tile, not on order or workers.
pub fn sample_tiles(
    cfg: &Config,
    req: &SampleRequest,
    root: &Path,
    records: &[TileRecord],
    out: &Path,
    jobs: usize,
) -> Result<Vec<(TileId, RasterTile)>> {
    let s = cfg.tiles.size as usize;
    let steps = ddim_timesteps(req.schedule.steps(), cfg.sample.ddim_steps)?;
    let results: Vec<Result<(TileId, RasterTile)>> = pool(jobs)?.install(|| {
        records
            .par_iter()
            .map(|r| {
                let (condition, caption, coords) = load_conditioning(cfg, root, r, req.ablation, req.style_city)?;
                let pred = Conditioned {
                    model: req.model,
                    cond: Conditioning { coords, text: &caption, image: Some(&condition) },
                };
                let t = r.tile();
                let px = ddim_sample(&pred, req.schedule, &[1, s, s], &steps, tile_seed(req.seed, tile_key(t)))?;
                let tile = RasterTile::from_data(cfg.tiles.size, 1, px)?;
                write_png(&tile_path(out, "target", t), &tile)?;
                Ok((t, tile))
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Tiles present under `{root}/{kind}`, sorted.
pub fn list_tiles(root: &Path, kind: &str) -> Result<Vec<TileId>> {
    let base = root.join(kind);
    if !base.is_dir() {
        return Err(Error::Missing(base));
    }
    let num_entries = |dir: &Path| -> Result<Vec<(u32, PathBuf)>> {
        let mut v = Vec::new();
        for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            let stem = if p.is_dir() { p.file_name() } else { p.extension().filter(|x| *x == "png").and(p.file_stem()) };
            if let Some(n) = stem.and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                v.push((n, p));
            }
        }
        Ok(v)
    };
    let mut tiles = Vec::new();
    for (z, zp) in num_entries(&base)? {
        for (x, xp) in num_entries(&zp)? {
            for (y, yp) in num_entries(&xp)? {
                if yp.is_file() {
                    tiles.push(TileId::new(u8::try_from(z).map_err(|_| Error::Parse(format!("zoom {z}")))?, x, y)?);
                }
            }
        }
    }
    tiles.sort();
    Ok(tiles)
}

fn read_mask(root: &Path, t: TileId, threshold: u8) -> Result<RasterTile> {
    let img = read_png(&tile_path(root, "target", t))?;
    if img.channels() != 1 {
        return Err(Error::Shape(format!("tile {t} under {} is not a grayscale mask", root.display())));
    }
    Ok(binarize(&img, threshold))
}

/// Metrics over every generated tile in `gen_root`; each needs a
/// ground-truth tile at the same path under `gt_root`.
pub fn evaluate_dirs(cfg: &Config, gen_root: &Path, gt_root: &Path, features: FeatureSource) -> Result<RegionReport> {
    let tiles = list_tiles(gen_root, "target")?;
    let pairs = tiles
        .iter()
        .map(|&t| {
            let gn = read_mask(gen_root, t, cfg.sample.threshold)?;
            let gt = read_mask(gt_root, t, cfg.sample.threshold)?;
            Ok((t, gn, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    region_report(&pairs, cfg.metrics.gn_count_mode, features)
}

/// How the fraction of buildings to remove is chosen per tile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FractionPolicy {
    Fixed(f64),
    /// Drawn uniformly from `[lo, hi]` per tile.
    Uniform(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub tile: TileId,
    pub buildings: usize,
    pub removed: usize,
    pub removed_fraction: f64,
    /// Remaining building pixels over original building pixels (1 when empty).
    pub mapped_area_fraction: f64,
    pub true_class: Class,
}

/// Removes buildings from every ground-truth tile under `gt_root` and writes
/// the incomplete masks plus `degradation.jsonl` to `out`.
pub fn degrade_dir(
    cfg: &Config,
    gt_root: &Path,
    out: &Path,
    policy: FractionPolicy,
    seed: u64,
) -> Result<Vec<DegradationRecord>> {
    let (FractionPolicy::Uniform(lo, hi) | FractionPolicy::Fixed(lo @ hi)) = policy;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!("removal fractions [{lo}, {hi}] outside [0, 1]")));
    }
    let mut records = Vec::new();
    for t in list_tiles(gt_root, "target")? {
        let mask = read_mask(gt_root, t, cfg.sample.threshold)?;
        let polys = polygonize(&mask, t);
        let shapes: Vec<_> = polys.iter().map(|p| p.to_polygon()).collect();
        let tseed = tile_seed(seed, tile_key(t));
        let f = match policy {
            FractionPolicy::Fixed(f) => f,
            FractionPolicy::Uniform(lo, hi) => {
                let mut rng = ChaCha8Rng::seed_from_u64(tseed ^ 0xF4AC_7104);
                lo + (hi - lo) * rng.random::<f64>()
            }
        };
        let d = degrade(t, &shapes, mask.size(), f, tseed, cfg.completeness.removal, &cfg.completeness.thresholds)?;
        write_png(&tile_path(out, "target", t), &d.mask)?;
        let total: usize = polys.iter().map(|p| p.area_px).sum();
        let kept: usize = total - d.removed.iter().map(|&i| polys[i].area_px).sum::<usize>();
        records.push(DegradationRecord {
            tile: t,
            buildings: polys.len(),
            removed: d.removed.len(),
            removed_fraction: d.removed_fraction,
            mapped_area_fraction: if total == 0 { 1.0 } else { kept as f64 / total as f64 },
            true_class: d.true_class,
        });
    }
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let path = out.join(DEGRADATION);
    std::fs::File::create(&path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

pub fn read_degradation(root: &Path) -> Result<Vec<DegradationRecord>> {
    let path = root.join(DEGRADATION);
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessedTile {
    pub tile: TileId,
    pub ratio: f64,
    pub true_class: Class,
    pub predicted: Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessReport {
    pub thresholds: Thresholds,
    pub result: ClassificationResult,
    pub strata: Vec<StratumSummary>,
    pub tiles: Vec<AssessedTile>,
}

impl AssessReport {
    pub fn to_text(&self) -> String {
        format!("{}\n{}", self.result.to_table(), format_strata(&self.strata))
    }
}

/// Classifies each degraded tile by the site-cover ratio of the generated
/// tile over it and scores against the recorded true classes.
pub fn assess_dirs(cfg: &Config, gen_root: &Path, degraded_root: &Path, thresholds: &Thresholds) -> Result<AssessReport> {
    thresholds.validate()?;
    let records = read_degradation(degraded_root)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("no degraded tiles under {}", degraded_root.display())));
    }
    let mut masks = Vec::with_capacity(records.len());
    let mut tiles = Vec::with_capacity(records.len());
    for r in &records {
        let gen = read_mask(gen_root, r.tile, cfg.sample.threshold)?;
        let deg = read_mask(degraded_root, r.tile, cfg.sample.threshold)?;
        let ratio = site_cover_ratio(&gen, &deg)?;
        tiles.push(AssessedTile {
            tile: r.tile,
            ratio,
            true_class: r.true_class,
            predicted: thresholds.classify(ratio),
        });
        masks.push((r.true_class, gen, deg));
    }
    let predictions: Vec<Class> = tiles.iter().map(|t| t.predicted).collect();
    let truths: Vec<Class> = tiles.iter().map(|t| t.true_class).collect();
    let rows: Vec<(Class, &RasterTile, &RasterTile)> = masks.iter().map(|(c, g, d)| (*c, g, d)).collect();
    Ok(AssessReport {
        thresholds: *thresholds,
        result: score(&predictions, &truths)?,
        strata: stratum_report(&rows)?,
        tiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{read_manifest, Cache};

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.tiles.size = 32;
        cfg.model.image_size = 32;
        cfg.model.channels = [4, 4, 8];
        cfg.model.cond_width = 8;
        cfg.model.embed_dim = 8;
        cfg.model.text_dim = 16;
        cfg.model.hint_channels = 4;
        cfg.schedule.steps = 50;
        cfg.sample.ddim_steps = 4;
        cfg.train.batch_size = 2;
        cfg
    }

    fn dataset(cfg: &Config, dir: &Path, n: u32) -> Vec<TileRecord> {
        let (spec, origin) = preset("gridtown", 1).unwrap();
        let src = synthetic_source(&spec, origin, cfg.tiles.zoom, n).unwrap();
        build_dataset(cfg, &[src], dir, &Remote::offline(Cache::disabled()), 2).unwrap()
    }

    #[test]
    fn dataset_build_is_reproducible() {
        let cfg = small_config();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = dataset(&cfg, a.path(), 3);
        let rb = dataset(&cfg, b.path(), 3);
        assert_eq!(ra.len(), 9);
        assert_eq!(ra, rb);
        assert_eq!(read_manifest(&a.path().join(MANIFEST)).unwrap(), ra);
        for r in &ra {
            for p in [&r.target_path, &r.roads_path, &r.landuse_path] {
                assert_eq!(std::fs::read(a.path().join(p)).unwrap(), std::fs::read(b.path().join(p)).unwrap());
            }
            assert!(r.caption.starts_with("city tile of gridtown"));
        }
        let mut want: Vec<TileId> = ra.iter().map(|r| r.tile()).collect();
        want.sort();
        assert_eq!(list_tiles(a.path(), "target").unwrap(), want);
    }

    #[test]
    fn ablations_blank_their_modality() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let recs = dataset(&cfg, dir.path(), 2);
        let full = load_samples(&cfg, dir.path(), &recs, Ablation::default()).unwrap();
        let abl = Ablation { no_image: true, no_metadata: true, no_prompt: true };
        let bare = load_samples(&cfg, dir.path(), &recs, abl).unwrap();
        for (f, b) in full.iter().zip(&bare) {
            assert_eq!(f.x0, b.x0);
            assert!(b.condition.data().iter().all(|v| *v == 0.0));
            assert!(b.coords.is_none() && f.coords.is_some());
            assert_eq!(b.caption, embed_caption("gridtown", cfg.model.text_dim));
        }
        assert!(full.iter().any(|s| s.condition.data().iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn train_resume_and_sample_are_deterministic() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let recs = dataset(&cfg, dir.path(), 2);
        let samples = load_samples(&cfg, dir.path(), &recs, Ablation::default()).unwrap();
        let sched = cfg.noise_schedule().unwrap();
        let run = |steps: u64| {
            let mut st = new_train_state(&cfg, Ablation::default(), 1).unwrap();
            train(&mut st, &samples, &sched, steps, |_| Ok(())).unwrap();
            st
        };
        let full = run(4);
        let mut resumed = run(2);
        train(&mut resumed, &samples, &sched, 4, |_| Ok(())).unwrap();
        assert_eq!(full, resumed);
        assert_eq!(full.losses.len(), 4);

        let out = |name: &str| dir.path().join(name);
        let req = SampleRequest { model: &full.model, schedule: &sched, ablation: Ablation::default(), style_city: None, seed: 5 };
        let a = sample_tiles(&cfg, &req, dir.path(), &recs, &out("gen_a"), 1).unwrap();
        let b = sample_tiles(&cfg, &req, dir.path(), &recs[..], &out("gen_b"), 3).unwrap();
        assert_eq!(a, b);
        let styled = SampleRequest { style_city: Some("curville"), ..req };
        let c = sample_tiles(&cfg, &styled, dir.path(), &recs, &out("gen_c"), 1).unwrap();
        assert_eq!(c.len(), a.len());
        let report = evaluate_dirs(&cfg, &out("gen_a"), dir.path(), FeatureSource::BuiltIn).unwrap();
        assert_eq!(report.tiles, recs.len());
    }

    #[test]
    fn evaluating_ground_truth_against_itself_is_perfect() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        dataset(&cfg, dir.path(), 3);
        let r = evaluate_dirs(&cfg, dir.path(), dir.path(), FeatureSource::BuiltIn).unwrap();
        assert_eq!(r.mean_iou, Some(1.0));
        assert_eq!(r.mean_abs_delta_site_cover, 0.0);
        assert_eq!(r.mean_gn_count_pct, Some(100.0));

        let gen = tempfile::tempdir().unwrap();
        let t = list_tiles(dir.path(), "target").unwrap()[0];
        write_png(&tile_path(gen.path(), "target", TileId { y: t.y + 50, ..t }), &RasterTile::new(32, 1)).unwrap();
        let err = evaluate_dirs(&cfg, gen.path(), dir.path(), FeatureSource::BuiltIn).unwrap_err();
        assert!(err.to_string().contains(&format!("{}", t.y + 50)), "{err}");
    }

    #[test]
    fn degrade_then_assess_with_perfect_surrogate() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let deg = tempfile::tempdir().unwrap();
        dataset(&cfg, dir.path(), 3);
        let recs = degrade_dir(&cfg, dir.path(), deg.path(), FractionPolicy::Uniform(0.0, 1.0), 9).unwrap();
        assert_eq!(recs.len(), 9);
        assert_eq!(read_degradation(deg.path()).unwrap(), recs);
        let report = assess_dirs(&cfg, dir.path(), deg.path(), &cfg.completeness.thresholds).unwrap();
        for (a, r) in report.tiles.iter().zip(&recs) {
            assert_eq!(a.predicted, cfg.completeness.thresholds.classify(1.0 / r.mapped_area_fraction));
        }
        assert!(report.to_text().contains("Unmapped"));

        let none = degrade_dir(&cfg, dir.path(), deg.path(), FractionPolicy::Fixed(0.0), 9).unwrap();
        assert!(none.iter().all(|r| r.removed == 0 && r.true_class == Class::Mapped));
        assert!(degrade_dir(&cfg, dir.path(), deg.path(), FractionPolicy::Uniform(0.5, 0.2), 9).is_err());
    }
}
