//! Per-granularity classification metrics, top-k accuracy and the
//! centroid-distance error distribution.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_consistent_path, predict_topk};
use crate::regions::{Coord, HierarchyTree, LabelVector, RegionSet};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance on a sphere of radius 6371 km.
pub fn haversine_km(a: Coord, b: Coord) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    // Symmetric in a and b: every term above is even in the differences.
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Exact macro-averaged metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMetrics {
    pub accuracy: BigRational,
    pub precision: BigRational,
    pub recall: BigRational,
    pub f1: BigRational,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(n: usize, d: usize) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Accuracy and macro precision/recall/F1 in exact arithmetic. Macro
/// averages run over classes present in `truths`; a class never predicted
/// has precision 0, and F1 is 0 when precision and recall are both 0.
pub fn confusion_metrics_exact(preds: &[usize], truths: &[usize], class_count: usize) -> Result<ExactMetrics> {
    if preds.is_empty() {
        return Err(Error::Config("confusion metrics of an empty sample".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Dimension {
            op: "confusion_metrics",
            left: (preds.len(), 1),
            right: (truths.len(), 1),
        });
    }
    if let Some(bad) = preds.iter().chain(truths).find(|&&c| c >= class_count) {
        return Err(Error::Label(format!("class id {bad} out of range for {class_count} classes")));
    }
    let mut tp = vec![0usize; class_count];
    let mut predicted = vec![0usize; class_count];
    let mut support = vec![0usize; class_count];
    for (&p, &t) in preds.iter().zip(truths) {
        predicted[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let mut sum_p = BigRational::zero();
    let mut sum_r = BigRational::zero();
    let mut sum_f = BigRational::zero();
    let mut classes = 0usize;
    for c in (0..class_count).filter(|&c| support[c] > 0) {
        classes += 1;
        let p = if predicted[c] == 0 { BigRational::zero() } else { ratio(tp[c], predicted[c]) };
        let r = ratio(tp[c], support[c]);
        let pr = &p + &r;
        let f = if pr.is_zero() {
            BigRational::zero()
        } else {
            BigRational::from_integer(BigInt::from(2)) * &p * &r / pr
        };
        sum_p += p;
        sum_r += r;
        sum_f += f;
    }
    let n = BigRational::from_integer(BigInt::from(classes));
    Ok(ExactMetrics {
        accuracy: ratio(correct, preds.len()),
        precision: sum_p / &n,
        recall: sum_r / &n,
        f1: sum_f / n,
    })
}

pub fn confusion_metrics(preds: &[usize], truths: &[usize], class_count: usize) -> Result<ConfusionMetrics> {
    let e = confusion_metrics_exact(preds, truths, class_count)?;
    Ok(ConfusionMetrics {
        accuracy: to_f64(&e.accuracy),
        macro_precision: to_f64(&e.precision),
        macro_recall: to_f64(&e.recall),
        macro_f1: to_f64(&e.f1),
    })
}

/// Fraction of targets whose true id is among its predicted ids.
pub fn topk_accuracy(topk: &[Vec<usize>], truths: &[usize]) -> f64 {
    if truths.is_empty() {
        return 0.0;
    }
    let hits = topk.iter().zip(truths).filter(|(p, t)| p.contains(t)).count();
    hits as f64 / truths.len() as f64
}

/// Median of ascending samples; mean of the middle pair for even counts.
pub fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
    }
}

/// Centroids of every region at one granularity, computed once.
#[derive(Debug, Clone)]
pub struct CentroidTable(Vec<Coord>);

impl CentroidTable {
    pub fn new(set: &RegionSet) -> Result<Self> {
        (0..set.len()).map(|r| set.centroid(r)).collect::<Result<Vec<_>>>().map(CentroidTable)
    }

    pub fn get(&self, id: usize) -> Option<Coord> {
        self.0.get(id).copied()
    }
}

/// Distance from `truth` to the nearest centroid among `candidates`.
pub fn min_centroid_error(truth: Coord, candidates: &[usize], centroids: &CentroidTable) -> Option<f64> {
    candidates
        .iter()
        .filter_map(|&r| centroids.get(r))
        .map(|c| haversine_km(truth, c))
        .min_by(f64::total_cmp)
}

/// Sorted minimum-over-candidates errors. `None` targets are excluded; the
/// second value counts them.
pub fn error_cdf(
    targets: &[(Option<Coord>, Vec<usize>)],
    centroids: &CentroidTable,
    k: usize,
) -> (Vec<f64>, usize) {
    let mut excluded = 0;
    let mut out = Vec::with_capacity(targets.len());
    for (coord, cands) in targets {
        let take = k.min(cands.len());
        match coord.and_then(|c| min_centroid_error(c, &cands[..take], centroids)) {
            Some(d) => out.push(d),
            None => excluded += 1,
        }
    }
    out.sort_by(f64::total_cmp);
    (out, excluded)
}

pub fn write_cdf_csv(path: impl AsRef<Path>, sorted_km: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank_fraction", "km"])?;
    let n = sorted_km.len() as f64;
    for (i, d) in sorted_km.iter().enumerate() {
        w.write_record([((i + 1) as f64 / n).to_string(), d.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line of the prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub ip: String,
    /// True when the target's cluster had no landmark.
    pub fallback: bool,
    /// Top-k ids per granularity, best first.
    pub topk: Vec<Vec<usize>>,
    pub names: Vec<Vec<String>>,
    /// Fused score of every region, coarsest granularity first.
    pub scores: Vec<f64>,
    /// Highest-scoring consistent root-to-leaf path.
    pub path: Vec<usize>,
}

impl PredictionRecord {
    /// Builds the record for one host from its fused scores. Region names
    /// come from `sets` (one per granularity); missing names stay empty.
    pub fn from_scores(
        ip: impl Into<String>,
        fallback: bool,
        scores: Vec<f64>,
        tree: &HierarchyTree,
        sets: &[RegionSet],
        k: usize,
    ) -> Result<Self> {
        let topk = predict_topk(&scores, tree, k)?;
        let names = topk
            .iter()
            .enumerate()
            .map(|(g, ids)| {
                ids.iter()
                    .map(|&id| sets.get(g).and_then(|s| s.region(id)).map_or_else(String::new, |r| r.name.clone()))
                    .collect()
            })
            .collect();
        let path = decode_consistent_path(&scores, tree)?.per_granularity;
        Ok(PredictionRecord {
            ip: ip.into(),
            fallback,
            topk,
            names,
            scores,
            path,
        })
    }
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{} line {}", path.display(), n + 1), e.to_string()))?,
        );
    }
    Ok(out)
}

/// Ground truth for one evaluated target.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub labels: Option<LabelVector>,
    pub coord: Option<Coord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityMetrics {
    pub granularity: usize,
    /// Over all targets; unassignable targets count as misses.
    pub accuracy: f64,
    /// Macro metrics over assignable targets.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `(k, accuracy)` pairs.
    pub topk: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub k: usize,
    pub samples: usize,
    pub excluded: usize,
    pub median_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub targets: usize,
    pub unassignable: usize,
    pub fallback: usize,
    pub granularities: Vec<GranularityMetrics>,
    pub errors: Vec<ErrorSummary>,
    /// Sorted error samples per `k`, aligned with `errors`.
    #[serde(skip)]
    pub error_samples: Vec<Vec<f64>>,
}

impl MetricsReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let ks: Vec<usize> = self.granularities.first().map_or(vec![], |g| g.topk.iter().map(|t| t.0).collect());
        let mut header: Vec<String> = ["granularity", "accuracy", "macro_precision", "macro_recall", "macro_f1"]
            .map(String::from)
            .to_vec();
        header.extend(ks.iter().map(|k| format!("top{k}")));
        w.write_record(&header)?;
        for g in &self.granularities {
            let mut row = vec![
                g.granularity.to_string(),
                g.accuracy.to_string(),
                g.macro_precision.to_string(),
                g.macro_recall.to_string(),
                g.macro_f1.to_string(),
            ];
            row.extend(g.topk.iter().map(|t| t.1.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores prediction records against `truth` (keyed by ip). Every record is
/// a target; records without truth are an error.
pub fn evaluate(
    records: &[PredictionRecord],
    truth: &HashMap<String, Truth>,
    tree: &HierarchyTree,
    leaf_centroids: Option<&CentroidTable>,
    ks: &[usize],
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let kmax = ks.iter().copied().max().unwrap_or(1).max(1);
    let g_count = tree.granularity_count();
    let mut topk_per_target = Vec::with_capacity(records.len());
    let mut truths = Vec::with_capacity(records.len());
    let mut unassignable = 0;
    for r in records {
        let t = truth
            .get(&r.ip)
            .ok_or_else(|| Error::Label(format!("no ground truth for predicted host {}", r.ip)))?;
        if r.scores.len() != tree.total_regions() {
            return Err(Error::Schema(format!(
                "prediction for {} has {} scores, the hierarchy has {} regions",
                r.ip,
                r.scores.len(),
                tree.total_regions()
            )));
        }
        topk_per_target.push(predict_topk(&r.scores, tree, kmax)?);
        if t.labels.is_none() {
            unassignable += 1;
        }
        truths.push(t);
    }
    let mut granularities = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (tk, t) in topk_per_target.iter().zip(&truths) {
            if let Some(lv) = &t.labels {
                preds.push(tk[g][0]);
                labels.push(lv.per_granularity[g]);
            }
        }
        let cm = if preds.is_empty() {
            ConfusionMetrics {
                accuracy: 0.0,
                macro_precision: 0.0,
                macro_recall: 0.0,
                macro_f1: 0.0,
            }
        } else {
            confusion_metrics(&preds, &labels, tree.sizes()[g])?
        };
        let n = records.len() as f64;
        let topk = ks
            .iter()
            .map(|&k| {
                let hits = topk_per_target
                    .iter()
                    .zip(&truths)
                    .filter(|(tk, t)| {
                        t.labels
                            .as_ref()
                            .is_some_and(|lv| tk[g][..k.min(tk[g].len())].contains(&lv.per_granularity[g]))
                    })
                    .count();
                (k, hits as f64 / n)
            })
            .collect::<Vec<_>>();
        let correct = topk_per_target
            .iter()
            .zip(&truths)
            .filter(|(tk, t)| t.labels.as_ref().is_some_and(|lv| tk[g][0] == lv.per_granularity[g]))
            .count();
        granularities.push(GranularityMetrics {
            granularity: g + 1,
            accuracy: correct as f64 / n,
            macro_precision: cm.macro_precision,
            macro_recall: cm.macro_recall,
            macro_f1: cm.macro_f1,
            topk,
        });
    }
    let mut errors = Vec::new();
    let mut error_samples = Vec::new();
    if let Some(centroids) = leaf_centroids {
        let targets: Vec<(Option<Coord>, Vec<usize>)> = topk_per_target
            .iter()
            .zip(&truths)
            .map(|(tk, t)| (t.labels.as_ref().and(t.coord), tk[g_count - 1].clone()))
            .collect();
        for &k in ks {
            let (samples, excluded) = error_cdf(&targets, centroids, k);
            errors.push(ErrorSummary {
                k,
                samples: samples.len(),
                excluded,
                median_km: median(&samples),
            });
            error_samples.push(samples);
        }
    }
    Ok(MetricsReport {
        targets: records.len(),
        unassignable,
        fallback: records.iter().filter(|r| r.fallback).count(),
        granularities,
        errors,
        error_samples,
    })
}

/// Per-granularity accuracy of always predicting `path`.
pub fn majority_path_accuracy(path: &[usize], truths: &[Option<&LabelVector>]) -> Vec<f64> {
    let n = truths.len().max(1) as f64;
    (0..path.len())
        .map(|g| {
            truths
                .iter()
                .filter(|t| t.is_some_and(|lv| lv.per_granularity[g] == path[g]))
                .count() as f64
                / n
        })
        .collect()
}
