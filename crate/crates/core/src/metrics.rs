//! Tile-pair morphology metrics, Fréchet distance between Gaussian feature
//! fits, and per-region aggregation.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterTile;
use crate::tilegrid::TileId;
use crate::vector::label_components;

fn check_pair(gn: &RasterTile, gt: &RasterTile) -> Result<()> {
    if gn.size() != gt.size() || gn.channels() != 1 || gt.channels() != 1 {
        return Err(Error::Shape(format!(
            "mask pair {}x{}x{} vs {}x{}x{}",
            gn.size(),
            gn.size(),
            gn.channels(),
            gt.size(),
            gt.size(),
            gt.channels()
        )));
    }
    Ok(())
}

/// Intersection over union of set pixels; `None` when both masks are empty.
pub fn tile_iou(gn: &RasterTile, gt: &RasterTile) -> Result<Option<f64>> {
    check_pair(gn, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in gn.data().iter().zip(gt.data()) {
        let (a, b) = (*a != 0, *b != 0);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

pub fn site_cover(mask: &RasterTile) -> f64 {
    mask.count_set() as f64 / mask.data().len() as f64
}

/// Signed site-cover difference in percent; positive means over-generation.
pub fn delta_site_cover(gn: &RasterTile, gt: &RasterTile) -> Result<f64> {
    check_pair(gn, gt)?;
    Ok(100.0 * (site_cover(gn) - site_cover(gt)))
}

/// Generated building count as a percentage of the ground-truth count.
pub fn gn_count_pct(gn_count: usize, gt_count: usize) -> Option<f64> {
    (gt_count > 0).then(|| 100.0 * gn_count as f64 / gt_count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased, symmetrized covariance (two-pass).
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 feature vectors, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let n = features.len();
    let mut mean = DVector::zeros(d);
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_iterator(d, f.iter().zip(mean.iter()).map(|(v, m)| v - m));
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Squared Fréchet distance between two Gaussians, using the symmetric
/// form `Tr(sqrtm(sqrtm(A) B sqrtm(A)))` for the cross term.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!(
            "feature dims {} and {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = sqrtm_psd(&a.cov)?;
    let s = &ra * &b.cov * &ra;
    let s = (&s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(s, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fid = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !fid.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(fid.max(0.0))
}

pub const FEATURE_GRID: usize = 8;
pub const EDGE_BINS: usize = 16;
pub const FEATURE_DIM: usize = 2 + FEATURE_GRID * FEATURE_GRID + EDGE_BINS;

/// Built-in deterministic descriptor of a mask: site cover, polygon count,
/// 8x8 block densities (row-major) and a 16-bin gradient-orientation
/// histogram weighted by Sobel magnitude, normalized per pixel.
pub fn feature_extract(mask: &RasterTile) -> Vec<f64> {
    let s = mask.size() as usize;
    let v = |c: i64, r: i64| -> f64 {
        let c = c.clamp(0, s as i64 - 1) as usize;
        let r = r.clamp(0, s as i64 - 1) as usize;
        if mask.data()[(r * s + c) * mask.channels() as usize] != 0 {
            1.0
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(FEATURE_DIM);
    out.push(site_cover_any(mask));
    let bin = crate::vector::binarize(mask, 1);
    out.push(label_components(&bin).1 as f64);
    for br in 0..FEATURE_GRID {
        for bc in 0..FEATURE_GRID {
            let (r0, r1) = (br * s / FEATURE_GRID, (br + 1) * s / FEATURE_GRID);
            let (c0, c1) = (bc * s / FEATURE_GRID, (bc + 1) * s / FEATURE_GRID);
            let cells = (r1 - r0) * (c1 - c0);
            let mut set = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    set += v(c as i64, r as i64);
                }
            }
            out.push(if cells == 0 { 0.0 } else { set / cells as f64 });
        }
    }
    let mut hist = [0.0; EDGE_BINS];
    for r in 0..s as i64 {
        for c in 0..s as i64 {
            let gx = (v(c + 1, r - 1) + 2.0 * v(c + 1, r) + v(c + 1, r + 1))
                - (v(c - 1, r - 1) + 2.0 * v(c - 1, r) + v(c - 1, r + 1));
            let gy = (v(c - 1, r + 1) + 2.0 * v(c, r + 1) + v(c + 1, r + 1))
                - (v(c - 1, r - 1) + 2.0 * v(c, r - 1) + v(c + 1, r - 1));
            let mag = gx.hypot(gy);
            if mag > 0.0 {
                let theta = gy.atan2(gx) + std::f64::consts::PI;
                let k = ((theta / std::f64::consts::TAU) * EDGE_BINS as f64) as usize % EDGE_BINS;
                hist[k] += mag;
            }
        }
    }
    let pixels = (s * s) as f64;
    out.extend(hist.iter().map(|h| h / pixels));
    out
}

fn site_cover_any(mask: &RasterTile) -> f64 {
    let c = mask.channels() as usize;
    let set = mask.data().chunks_exact(c).filter(|p| p[0] != 0).count();
    set as f64 / (mask.size() as f64).powi(2)
}

/// Reads an `n x d` feature matrix: a header line `n d`, then either `n`
/// text rows of `d` numbers (comma or whitespace separated) or exactly
/// `n * d` little-endian f64 values.
pub fn read_feature_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Parse(format!("{}: {msg}", path.display()));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text".into()))?;
    let dims: Vec<usize> = header
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| bad(format!("bad header token {t:?}"))))
        .collect::<Result<_>>()?;
    let [n, d] = dims[..] else {
        return Err(bad(format!("header must hold n and d, got {header:?}")));
    };
    let body = &bytes[nl + 1..];
    if let Ok(text) = std::str::from_utf8(body) {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() == n {
            let parsed: Result<Vec<Vec<f64>>> = rows
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let vals: Vec<f64> = row
                        .split(|c: char| c == ',' || c.is_whitespace())
                        .filter(|t| !t.is_empty())
                        .map(|t| t.parse::<f64>().map_err(|_| bad(format!("row {}: bad number {t:?}", i + 1))))
                        .collect::<Result<_>>()?;
                    if vals.len() != d {
                        return Err(bad(format!("row {} has {} values, expected {d}", i + 1, vals.len())));
                    }
                    Ok(vals)
                })
                .collect();
            return parsed;
        }
    }
    if body.len() == n * d * 8 {
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        return Ok(vals.chunks(d.max(1)).take(n).map(<[f64]>::to_vec).collect());
    }
    Err(bad(format!("body is neither {n} text rows nor {n}x{d} binary f64 values")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GnCountMode {
    /// Mean of per-tile percentages over tiles with ground-truth buildings.
    #[default]
    PerTile,
    /// 100 * total generated count / total ground-truth count.
    RatioOfTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePairMetrics {
    pub tile: TileId,
    pub iou: Option<f64>,
    pub delta_site_cover: f64,
    pub gn_count: usize,
    pub gt_count: usize,
    pub gn_count_pct: Option<f64>,
}

pub fn tile_pair_metrics(tile: TileId, gn: &RasterTile, gt: &RasterTile) -> Result<TilePairMetrics> {
    let gn_count = label_components(gn).1;
    let gt_count = label_components(gt).1;
    Ok(TilePairMetrics {
        tile,
        iou: tile_iou(gn, gt)?,
        delta_site_cover: delta_site_cover(gn, gt)?,
        gn_count,
        gt_count,
        gn_count_pct: gn_count_pct(gn_count, gt_count),
    })
}

/// Where the feature vectors behind the FID come from.
pub enum FeatureSource {
    BuiltIn,
    /// Pre-computed vectors for the generated and ground-truth sets.
    External {
        label: String,
        generated: Vec<Vec<f64>>,
        ground_truth: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub tiles: usize,
    pub mean_iou: Option<f64>,
    pub undefined_iou: usize,
    pub mean_abs_delta_site_cover: f64,
    pub mean_gn_count_pct: Option<f64>,
    pub undefined_gn_count: usize,
    pub gn_count_mode: GnCountMode,
    pub fid: Option<f64>,
    pub fid_extractor: String,
    #[serde(skip)]
    pub per_tile: Vec<TilePairMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates metrics over `(tile, generated, ground truth)` mask triples.
/// FID needs at least two tiles and is `None` otherwise.
pub fn region_report(
    pairs: &[(TileId, RasterTile, RasterTile)],
    mode: GnCountMode,
    features: FeatureSource,
) -> Result<RegionReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no tile pairs to evaluate".into()));
    }
    let per_tile = pairs
        .iter()
        .map(|(t, gn, gt)| tile_pair_metrics(*t, gn, gt))
        .collect::<Result<Vec<_>>>()?;
    let mean_iou = mean(per_tile.iter().filter_map(|m| m.iou));
    let mean_abs_dsc = mean(per_tile.iter().map(|m| m.delta_site_cover.abs())).expect("non-empty");
    let mean_gn = match mode {
        GnCountMode::PerTile => mean(per_tile.iter().filter_map(|m| m.gn_count_pct)),
        GnCountMode::RatioOfTotals => gn_count_pct(
            per_tile.iter().map(|m| m.gn_count).sum(),
            per_tile.iter().map(|m| m.gt_count).sum(),
        ),
    };
    let (label, gn_feats, gt_feats) = match features {
        FeatureSource::BuiltIn => (
            "builtin-morphology".to_string(),
            pairs.iter().map(|(_, gn, _)| feature_extract(gn)).collect::<Vec<_>>(),
            pairs.iter().map(|(_, _, gt)| feature_extract(gt)).collect::<Vec<_>>(),
        ),
        FeatureSource::External {
            label,
            generated,
            ground_truth,
        } => (label, generated, ground_truth),
    };
    let fid = if gn_feats.len() >= 2 && gt_feats.len() >= 2 {
        Some(frechet_distance(&gaussian_stats(&gt_feats)?, &gaussian_stats(&gn_feats)?)?)
    } else {
        None
    };
    Ok(RegionReport {
        tiles: per_tile.len(),
        mean_iou,
        undefined_iou: per_tile.iter().filter(|m| m.iou.is_none()).count(),
        mean_abs_delta_site_cover: mean_abs_dsc,
        mean_gn_count_pct: mean_gn,
        undefined_gn_count: per_tile.iter().filter(|m| m.gn_count_pct.is_none()).count(),
        gn_count_mode: mode,
        fid,
        fid_extractor: label,
        per_tile,
    })
}

impl RegionReport {
    /// One JSON object per tile, newline-terminated.
    pub fn per_tile_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.per_tile {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }
}
