//! Completeness assessment: synthetic degradation of complete tiles,
//! three-class labels, Site Cover Ratio classification and scoring.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Polygon;
use crate::metrics::{site_cover, tile_iou};
use crate::raster::{rasterize_pixel_polygons, RasterTile};
use crate::tilegrid::TileId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Mapped,
    PartiallyMapped,
    Unmapped,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Mapped, Class::PartiallyMapped, Class::Unmapped];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Class::Mapped => "Mapped",
            Class::PartiallyMapped => "Partially Mapped",
            Class::Unmapped => "Unmapped",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct Thresholds {
    /// Minimum mapped building fraction for the Mapped label.
    pub mapped_fraction: f64,
    /// Minimum mapped building fraction for the Partially Mapped label.
    pub partial_fraction: f64,
    /// Largest Site Cover Ratio still classified Mapped.
    pub mapped_ratio: f64,
    /// Largest Site Cover Ratio still classified Partially Mapped.
    pub partial_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            mapped_fraction: 0.8,
            partial_fraction: 0.25,
            mapped_ratio: 1.6,
            partial_ratio: 5.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.partial_fraction
            && self.partial_fraction <= self.mapped_fraction
            && self.mapped_fraction <= 1.0
            && 0.0 < self.mapped_ratio
            && self.mapped_ratio <= self.partial_ratio;
        if !ok {
            return Err(Error::Config(format!("inconsistent completeness thresholds {self:?}")));
        }
        Ok(())
    }

    pub fn true_label(&self, mapped_fraction: f64) -> Class {
        if mapped_fraction >= self.mapped_fraction {
            Class::Mapped
        } else if mapped_fraction >= self.partial_fraction {
            Class::PartiallyMapped
        } else {
            Class::Unmapped
        }
    }

    pub fn classify(&self, ratio: f64) -> Class {
        if ratio <= self.mapped_ratio {
            Class::Mapped
        } else if ratio <= self.partial_ratio {
            Class::PartiallyMapped
        } else {
            Class::Unmapped
        }
    }
}

pub fn true_label(mapped_fraction: f64) -> Class {
    Thresholds::default().true_label(mapped_fraction)
}

pub fn classify(ratio: f64) -> Class {
    Thresholds::default().classify(ratio)
}

/// `cover(gen) / cover(degraded)`, with `+inf` when only the degraded tile
/// is empty and `1` when both are.
pub fn site_cover_ratio(gen: &RasterTile, degraded: &RasterTile) -> Result<f64> {
    if gen.size() != degraded.size() {
        return Err(Error::Shape(format!("tiles of {} and {} pixels", gen.size(), degraded.size())));
    }
    let (g, d) = (site_cover(gen), site_cover(degraded));
    Ok(match (g > 0.0, d > 0.0) {
        (_, true) => g / d,
        (true, false) => f64::INFINITY,
        (false, false) => 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Removal {
    /// Every polygon equally likely.
    #[default]
    Uniform,
    /// Selection probability proportional to polygon area.
    AreaWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradedTile {
    pub tile: TileId,
    pub removed_fraction: f64,
    /// Indices of removed polygons, ascending.
    pub removed: Vec<usize>,
    pub mask: RasterTile,
    pub true_class: Class,
}

/// Number of polygons removed for fraction `f` of `n`: `ceil(f * n)`.
/// The product is snapped to the nearest integer first so values like
/// `0.3 * 10` are not pushed up by rounding error.
pub fn removal_count(f: f64, n: usize) -> usize {
    let x = f * n as f64;
    let snapped = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (snapped as usize).min(n)
}

/// Removes `ceil(f * n)` of the tile's polygons (pixel coordinates), chosen
/// without replacement under `seed`, and re-rasterizes the remainder.
pub fn degrade(
    tile: TileId,
    polys: &[Polygon],
    size: u32,
    f: f64,
    seed: u64,
    removal: Removal,
    thresholds: &Thresholds,
) -> Result<DegradedTile> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidArgument(format!("removal fraction {f} outside [0, 1]")));
    }
    let n = polys.len();
    let k = removal_count(f, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut removed: Vec<usize> = match removal {
        Removal::Uniform => rand::seq::index::sample(&mut rng, n, k).into_vec(),
        Removal::AreaWeighted => {
            // Weighted sampling without replacement by exponential keys.
            let mut keyed: Vec<(f64, usize)> = polys
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let w = p.area().abs().max(1e-12);
                    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    (-u.ln() / w, i)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
            keyed.into_iter().take(k).map(|(_, i)| i).collect()
        }
    };
    removed.sort_unstable();
    let kept: Vec<Polygon> = polys
        .iter()
        .enumerate()
        .filter(|(i, _)| removed.binary_search(i).is_err())
        .map(|(_, p)| p.clone())
        .collect();
    let mapped = if n == 0 { 1.0 } else { kept.len() as f64 / n as f64 };
    Ok(DegradedTile {
        tile,
        removed_fraction: if n == 0 { 0.0 } else { k as f64 / n as f64 },
        removed,
        mask: rasterize_pixel_polygons(&kept, size),
        true_class: thresholds.true_label(mapped),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// True when the class was never predicted; precision is then 0.
    pub never_predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub predictions: Vec<Class>,
    /// Rows are true classes, columns predicted, in `Class::ALL` order.
    pub confusion: [[usize; 3]; 3],
    pub per_class: [ClassScores; 3],
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

pub fn score(predictions: &[Class], truths: &[Class]) -> Result<ClassificationResult> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (p, t) in predictions.iter().zip(truths) {
        confusion[t.index()][p.index()] += 1;
    }
    let total = truths.len() as f64;
    let per_class = std::array::from_fn(|k| {
        let tp = confusion[k][k] as f64;
        let predicted: usize = (0..3).map(|r| confusion[r][k]).sum();
        let support: usize = confusion[k].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores {
            precision,
            recall,
            f1,
            support,
            never_predicted: predicted == 0,
        }
    });
    let weighted = |f: fn(&ClassScores) -> f64| -> f64 {
        per_class.iter().map(|c: &ClassScores| f(c) * c.support as f64).sum::<f64>() / total
    };
    Ok(ClassificationResult {
        predictions: predictions.to_vec(),
        accuracy: (0..3).map(|k| confusion[k][k]).sum::<usize>() as f64 / total,
        weighted_precision: weighted(|c| c.precision),
        weighted_recall: weighted(|c| c.recall),
        weighted_f1: weighted(|c| c.f1),
        confusion,
        per_class,
    })
}

impl ClassificationResult {
    /// Per-class precision/recall/F1 table followed by the confusion matrix.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<18}{:>10}{:>10}{:>10}{:>10}\n", "Class", "Precision", "Recall", "F1-Score", "Support");
        for (c, sc) in Class::ALL.iter().zip(&self.per_class) {
            s += &format!(
                "{:<18}{:>10.2}{:>10.2}{:>10.2}{:>10}{}\n",
                c.to_string(),
                sc.precision,
                sc.recall,
                sc.f1,
                sc.support,
                if sc.never_predicted { "  (never predicted)" } else { "" }
            );
        }
        let n = self.predictions.len();
        s += &format!("{:<18}{:>10}{:>10}{:>10.2}{:>10}\n", "accuracy", "", "", self.accuracy, n);
        s += &format!(
            "{:<18}{:>10.2}{:>10.2}{:>10.2}{:>10}\n",
            "weighted avg", self.weighted_precision, self.weighted_recall, self.weighted_f1, n
        );
        s += "\nconfusion matrix (rows: true, columns: predicted)\n";
        s += &format!("{:<18}{:>18}{:>18}{:>18}\n", "", "Mapped", "Partially Mapped", "Unmapped");
        for (c, row) in Class::ALL.iter().zip(&self.confusion) {
            s += &format!("{:<18}{:>18}{:>18}{:>18}\n", c.to_string(), row[0], row[1], row[2]);
        }
        s
    }
}

/// Per true-class summary of generated vs incomplete tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub class: Class,
    pub tiles: usize,
    /// Mean over tiles with a finite ratio.
    pub mean_ratio: Option<f64>,
    pub infinite_ratios: usize,
    /// Mean IoU between generated and incomplete masks over defined tiles.
    pub mean_iou: Option<f64>,
}

pub fn stratum_report(rows: &[(Class, &RasterTile, &RasterTile)]) -> Result<Vec<StratumSummary>> {
    Class::ALL
        .iter()
        .map(|&class| {
            let (mut ratios, mut inf, mut ious, mut tiles) = (Vec::new(), 0, Vec::new(), 0);
            for (c, gen, degraded) in rows.iter().filter(|r| r.0 == class) {
                debug_assert_eq!(*c, class);
                tiles += 1;
                let r = site_cover_ratio(gen, degraded)?;
                if r.is_finite() {
                    ratios.push(r);
                } else {
                    inf += 1;
                }
                if let Some(i) = tile_iou(gen, degraded)? {
                    ious.push(i);
                }
            }
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            Ok(StratumSummary {
                class,
                tiles,
                mean_ratio: mean(&ratios),
                infinite_ratios: inf,
                mean_iou: mean(&ious),
            })
        })
        .collect()
}

pub fn format_strata(strata: &[StratumSummary]) -> String {
    let mut s = format!("{:<18}{:>8}{:>18}{:>10}\n", "Class", "Tiles", "Site Cover Ratio", "MIoU");
    for st in strata {
        let ratio = st.mean_ratio.map_or("-".to_string(), |r| format!("{r:.2}"));
        let iou = st.mean_iou.map_or("-".to_string(), |r| format!("{r:.2}"));
        s += &format!("{:<18}{:>8}{:>18}{:>10}", st.class.to_string(), st.tiles, ratio, iou);
        if st.infinite_ratios > 0 {
            s += &format!("  ({} empty incomplete tiles)", st.infinite_ratios);
        }
        s.push('\n');
    }
    s
}
