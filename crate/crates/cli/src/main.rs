use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use geoforge::completeness::Removal;
use geoforge::config::Config;
use geoforge::diffusion::{checkpoint, Ablation};
use geoforge::ingest::{parse_geodata, read_manifest, Cache, Remote, Split, TileRecord};
use geoforge::metrics::{read_feature_file, FeatureSource, GnCountMode};
use geoforge::pipeline::{self, CitySource, FractionPolicy, SampleRequest, MANIFEST};
use geoforge::raster::read_png;
use geoforge::synthcity::CitySpec;
use geoforge::tilegrid::{enumerate_region, tile_path, BBox, LonLat};
use geoforge::vector::{binarize, polygonize, to_geojson, ExportCoords};

#[derive(Parser)]
#[command(name = "geoforge", version, about = "Building-footprint tiles: datasets, diffusion training, sampling and evaluation")]
struct Cli {
    /// TOML config file; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render tiles, caption them and write a manifest.
    BuildDataset(BuildArgs),
    /// Train the conditional denoiser on a dataset's training split.
    Train(TrainArgs),
    /// Generate building masks for dataset tiles.
    Sample(SampleArgs),
    /// Convert building masks to polygons.
    Vectorize(VectorizeArgs),
    /// Compare generated masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Remove buildings from ground-truth tiles to simulate incomplete mapping.
    Degrade(DegradeArgs),
    /// Classify degraded tiles by completeness and score the result.
    Assess(AssessArgs),
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    out: PathBuf,
    /// GeoJSON feature collection to build from.
    #[arg(long, conflicts_with = "synthetic", requires = "city")]
    geodata: Option<PathBuf>,
    /// City name recorded for geodata input.
    #[arg(long)]
    city: Option<String>,
    /// Region as west,south,east,north; defaults to the extent of the geodata.
    #[arg(long, value_parser = parse_bbox)]
    bbox: Option<BBox>,
    /// Built-in city (gridtown, curville) or a TOML city spec; repeatable.
    #[arg(long)]
    synthetic: Vec<String>,
    /// Side length, in tiles, of each synthetic region.
    #[arg(long, default_value_t = 7)]
    tiles: u32,
    /// Top-left corner (lon,lat) for a custom synthetic city.
    #[arg(long, value_parser = parse_lonlat)]
    origin: Option<LonLat>,
    /// Replace an existing dataset in the output directory.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for cached remote responses.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing a manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write; the loss curve goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total steps; overrides the config.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    no_image: bool,
    #[arg(long)]
    no_metadata: bool,
    #[arg(long)]
    no_prompt: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    split: SplitArg,
    /// Only tiles of this city.
    #[arg(long)]
    city: Option<String>,
    /// Ask for this city's morphology in every caption.
    #[arg(long)]
    style_city: Option<String>,
    /// Sampling seed; defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct VectorizeArgs {
    /// Directory with masks under target/.
    #[arg(long)]
    input: PathBuf,
    /// GeoJSON output file.
    #[arg(long)]
    out: PathBuf,
    /// Keep pixel coordinates instead of longitude/latitude.
    #[arg(long)]
    pixel_coords: bool,
    /// Douglas-Peucker tolerance in pixels for the exported rings.
    #[arg(long)]
    simplify: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Pre-computed feature vectors for the generated and ground-truth sets.
    #[arg(long, num_args = 2, value_names = ["GEN", "GT"])]
    features_in: Option<Vec<PathBuf>>,
    #[arg(long, value_enum)]
    gn_count_mode: Option<GnModeArg>,
    /// Write the report as JSON, with a per-tile list.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GnModeArg {
    PerTile,
    RatioOfTotals,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of each tile's buildings to remove.
    #[arg(long, conflicts_with = "fraction_range")]
    fraction: Option<f64>,
    /// Per-tile fraction drawn uniformly from lo,hi.
    #[arg(long, value_parser = parse_pair)]
    fraction_range: Option<(f64, f64)>,
    /// Pick buildings with probability proportional to area.
    #[arg(long)]
    area_weighted: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AssessArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    degraded: PathBuf,
    #[arg(long)]
    mapped_ratio: Option<f64>,
    #[arg(long)]
    partial_ratio: Option<f64>,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers"));
    }
    Ok(v)
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v = parse_floats(s, 4)?;
    Ok(BBox::new(v[0], v[1], v[2], v[3]))
}

fn parse_lonlat(s: &str) -> Result<LonLat, String> {
    let v = parse_floats(s, 2)?;
    LonLat::new(v[0], v[1]).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let v = parse_floats(s, 2)?;
    Ok((v[0], v[1]))
}

enum Failure {
    Usage(String),
    Core(geoforge::Error),
}

impl From<geoforge::Error> for Failure {
    fn from(e: geoforge::Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(geoforge::Error::Parse(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn require_dir(p: &Path) -> CliResult {
    if p.is_dir() {
        Ok(())
    } else {
        Err(geoforge::Error::Missing(p.to_path_buf()).into())
    }
}

fn build_dataset(cfg: &Config, a: &BuildArgs) -> CliResult {
    if a.out.join(MANIFEST).exists() && !a.force {
        return Err(Failure::Usage(format!(
            "{} already contains a dataset; pass --force to rebuild it",
            a.out.display()
        )));
    }
    let mut sources = Vec::new();
    if let Some(path) = &a.geodata {
        if !path.exists() {
            return Err(geoforge::Error::Missing(path.clone()).into());
        }
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let features = parse_geodata(&text, &cfg.ingest.roads)?;
        let region = match a.bbox {
            Some(b) => b,
            None => features
                .features
                .iter()
                .filter_map(|f| f.geometry.bbox())
                .reduce(|a, b| BBox::new(a.west.min(b.west), a.south.min(b.south), a.east.max(b.east), a.north.max(b.north)))
                .ok_or_else(|| Failure::Usage(format!("{} has no features and no --bbox was given", path.display())))?,
        };
        sources.push(CitySource {
            name: a.city.clone().expect("clap requires --city"),
            tiles: enumerate_region(region, cfg.tiles.zoom)?,
            features,
        });
    } else if a.synthetic.is_empty() {
        return Err(Failure::Usage("pass --geodata or at least one --synthetic city".into()));
    }
    for name in &a.synthetic {
        let (spec, origin) = match pipeline::preset(name, cfg.seed) {
            Some((spec, origin)) => (spec, a.origin.unwrap_or(origin)),
            None => {
                let path = Path::new(name);
                if !path.exists() {
                    return Err(geoforge::Error::Missing(path.to_path_buf()).into());
                }
                let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                let spec: CitySpec = toml::from_str(&text)
                    .map_err(|e| geoforge::Error::Config(format!("{}: {e}", path.display())))?;
                let origin = a
                    .origin
                    .ok_or_else(|| Failure::Usage(format!("custom city {} needs --origin", spec.name)))?;
                (spec, origin)
            }
        };
        sources.push(pipeline::synthetic_source(&spec, origin, cfg.tiles.zoom, a.tiles)?);
    }
    let remote = Remote::new(cfg.ingest.remote.clone().with_env(), Cache::new(a.cache_dir.clone()));
    let records = pipeline::build_dataset(cfg, &sources, &a.out, &remote, a.jobs)?;
    write_text(&a.out.join("config.toml"), &cfg.resolved())?;
    let eval = records.iter().filter(|r| r.split == Split::Eval).count();
    println!("{} tiles ({} train, {eval} eval) in {}", records.len(), records.len() - eval, a.out.display());
    Ok(())
}

fn load_records(data: &Path) -> CliResult<Vec<TileRecord>> {
    Ok(read_manifest(&data.join(MANIFEST))?)
}

fn train(cfg: &Config, a: &TrainArgs) -> CliResult {
    let ablation = Ablation {
        no_image: a.no_image,
        no_metadata: a.no_metadata,
        no_prompt: a.no_prompt,
    };
    let records: Vec<TileRecord> = load_records(&a.data)?.into_iter().filter(|r| r.split == Split::Train).collect();
    if records.is_empty() {
        return Err(geoforge::Error::InvalidArgument(format!("{} has no training tiles", a.data.display())).into());
    }
    let (mut state, schedule, kind) = match &a.resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.state.config.ablation != ablation {
                return Err(Failure::Usage(format!(
                    "{} was trained with {:?}; resume with the same ablation flags",
                    p.display(),
                    ck.state.config.ablation
                )));
            }
            if ck.state.model.config != cfg.model {
                log::warn!("model section of the config differs from the checkpoint; using the checkpoint's");
            }
            let mut state = ck.state;
            state.config.jobs = a.jobs.max(1);
            log::info!("resuming at step {}", state.step);
            (state, ck.schedule, ck.schedule_kind)
        }
        None => (pipeline::new_train_state(cfg, ablation, a.jobs)?, cfg.noise_schedule()?, cfg.schedule.kind),
    };
    let mut run_cfg = cfg.clone();
    run_cfg.model = state.model.config;
    let samples = pipeline::load_samples(&run_cfg, &a.data, &records, ablation)?;
    let total = a.steps.unwrap_or(cfg.train.steps);
    let every = cfg.train.checkpoint_every;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    pipeline::train(&mut state, &samples, &schedule, total, |s| {
        if s.step % 50 == 0 || s.step == total {
            log::info!("step {} loss {:.5}", s.step, s.losses.last().copied().unwrap_or(f64::NAN));
        }
        if every > 0 && s.step % every == 0 && s.step < total {
            checkpoint::save(&a.out, s, &schedule, kind)?;
        }
        Ok(())
    })?;
    checkpoint::save(&a.out, &state, &schedule, kind)?;
    pipeline::write_loss_curve(&a.out.with_extension("loss.csv"), &state.losses)?;
    write_text(&a.out.with_extension("config.toml"), &run_cfg.resolved())?;
    let first = state.losses.first().copied().unwrap_or(f64::NAN);
    let last = state.losses.last().copied().unwrap_or(f64::NAN);
    println!("trained to step {} (loss {first:.4} -> {last:.4}); checkpoint {}", state.step, a.out.display());
    Ok(())
}

fn sample(cfg: &Config, a: &SampleArgs) -> CliResult {
    let ck = checkpoint::load(&a.checkpoint)?;
    let records: Vec<TileRecord> = load_records(&a.data)?
        .into_iter()
        .filter(|r| match a.split {
            SplitArg::Train => r.split == Split::Train,
            SplitArg::Eval => r.split == Split::Eval,
            SplitArg::All => true,
        })
        .filter(|r| a.city.as_ref().is_none_or(|c| *c == r.city))
        .collect();
    if records.is_empty() {
        return Err(geoforge::Error::InvalidArgument("no manifest tiles match the selection".into()).into());
    }
    let mut run_cfg = cfg.clone();
    run_cfg.model = ck.state.model.config;
    let req = SampleRequest {
        model: &ck.state.model,
        schedule: &ck.schedule,
        ablation: ck.state.config.ablation,
        style_city: a.style_city.as_deref(),
        seed: a.seed.unwrap_or(cfg.seed),
    };
    let tiles = pipeline::sample_tiles(&run_cfg, &req, &a.data, &records, &a.out, a.jobs)?;
    println!("{} tiles written under {}", tiles.len(), a.out.join("target").display());
    Ok(())
}

fn vectorize(cfg: &Config, a: &VectorizeArgs) -> CliResult {
    let tiles = pipeline::list_tiles(&a.input, "target")?;
    let coords = if a.pixel_coords { ExportCoords::Pixel } else { ExportCoords::Wgs84 };
    let mut features = Vec::new();
    let mut count = 0;
    for t in tiles {
        let mask = binarize(&read_png(&tile_path(&a.input, "target", t))?, cfg.sample.threshold);
        let polys = polygonize(&mask, t);
        count += polys.len();
        if let serde_json::Value::Array(fs) = to_geojson(&polys, mask.size(), coords, a.simplify)["features"].take() {
            features.extend(fs);
        }
    }
    let fc = serde_json::json!({"type": "FeatureCollection", "features": features});
    write_text(&a.out, &fc.to_string())?;
    println!("{count} polygons written to {}", a.out.display());
    Ok(())
}

fn evaluate(cfg: &Config, a: &EvaluateArgs) -> CliResult {
    require_dir(&a.generated)?;
    require_dir(&a.ground_truth)?;
    let mut cfg = cfg.clone();
    if let Some(m) = a.gn_count_mode {
        cfg.metrics.gn_count_mode = match m {
            GnModeArg::PerTile => GnCountMode::PerTile,
            GnModeArg::RatioOfTotals => GnCountMode::RatioOfTotals,
        };
    }
    let features = match &a.features_in {
        Some(paths) => FeatureSource::External {
            label: format!("external:{}", paths[0].display()),
            generated: read_feature_file(&paths[0])?,
            ground_truth: read_feature_file(&paths[1])?,
        },
        None => FeatureSource::BuiltIn,
    };
    let report = pipeline::evaluate_dirs(&cfg, &a.generated, &a.ground_truth, features)?;
    println!("{:<14}{:>8}{:>10}{:>8}{:>8}{:>10}", "tile", "iou", "dSC(%)", "gn", "gt", "%GN");
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    for m in &report.per_tile {
        println!(
            "{:<14}{:>8}{:>10.2}{:>8}{:>8}{:>10}",
            m.tile.to_string(),
            opt(m.iou, 3),
            m.delta_site_cover,
            m.gn_count,
            m.gt_count,
            opt(m.gn_count_pct, 1)
        );
    }
    println!();
    println!("tiles              {}", report.tiles);
    println!("MIoU               {} ({} undefined)", opt(report.mean_iou, 4), report.undefined_iou);
    println!("|dSite Cover| (%)  {:.4}", report.mean_abs_delta_site_cover);
    println!("%GN Count          {} ({:?})", opt(report.mean_gn_count_pct, 2), report.gn_count_mode);
    println!("FID                {} [{}]", opt(report.fid, 4), report.fid_extractor);
    if let Some(p) = &a.json {
        let mut v = serde_json::to_value(&report).map_err(geoforge::Error::from)?;
        v["per_tile"] = serde_json::to_value(&report.per_tile).map_err(geoforge::Error::from)?;
        write_text(p, &serde_json::to_string_pretty(&v).map_err(geoforge::Error::from)?)?;
    }
    Ok(())
}

fn degrade(cfg: &Config, a: &DegradeArgs) -> CliResult {
    require_dir(&a.ground_truth)?;
    if a.out.join(pipeline::DEGRADATION).exists() && !a.force {
        return Err(Failure::Usage(format!("{} already holds degraded tiles; pass --force", a.out.display())));
    }
    let policy = match (a.fraction, a.fraction_range) {
        (Some(f), _) => FractionPolicy::Fixed(f),
        (None, Some((lo, hi))) => FractionPolicy::Uniform(lo, hi),
        (None, None) => return Err(Failure::Usage("pass --fraction or --fraction-range".into())),
    };
    let mut cfg = cfg.clone();
    if a.area_weighted {
        cfg.completeness.removal = Removal::AreaWeighted;
    }
    let recs = pipeline::degrade_dir(&cfg, &a.ground_truth, &a.out, policy, a.seed.unwrap_or(cfg.seed))?;
    let removed: usize = recs.iter().map(|r| r.removed).sum();
    let total: usize = recs.iter().map(|r| r.buildings).sum();
    println!("{} tiles, removed {removed} of {total} buildings", recs.len());
    Ok(())
}

fn assess(cfg: &Config, a: &AssessArgs) -> CliResult {
    require_dir(&a.generated)?;
    require_dir(&a.degraded)?;
    let mut th = cfg.completeness.thresholds;
    if let Some(r) = a.mapped_ratio {
        th.mapped_ratio = r;
    }
    if let Some(r) = a.partial_ratio {
        th.partial_ratio = r;
    }
    th.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let report = pipeline::assess_dirs(cfg, &a.generated, &a.degraded, &th)?;
    println!("{}", report.to_text());
    if let Some(p) = &a.json {
        write_text(p, &serde_json::to_string_pretty(&report).map_err(geoforge::Error::from)?)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    let cfg = Config::load(cli.config.as_deref())?;
    log::info!("resolved config:\n{}", cfg.resolved());
    match &cli.command {
        Command::BuildDataset(a) => build_dataset(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Sample(a) => sample(&cfg, a),
        Command::Vectorize(a) => vectorize(&cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Degrade(a) => degrade(&cfg, a),
        Command::Assess(a) => assess(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                geoforge::Error::NonFinite(_) | geoforge::Error::Numeric(_) => 3,
                geoforge::Error::Config(_) => 1,
                _ => 2,
            })
        }
    }
}
