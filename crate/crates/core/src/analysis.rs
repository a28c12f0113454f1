//! Spatial spread of hosts sharing a last-hop router: haversine DBSCAN per
//! batch and a summary by clustering outcome.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::haversine_km;
use crate::regions::Coord;

pub const NOISE: i64 = -1;

/// DBSCAN with haversine distance. A point is core when at least
/// `min_samples` points, itself included, lie within `eps_km`. Points are
/// visited in input order, so border points reachable from two clusters go
/// to the one discovered first.
pub fn dbscan_haversine(points: &[Coord], eps_km: f64, min_samples: usize) -> Result<Vec<i64>> {
    if !(eps_km > 0.0) {
        return Err(Error::Config(format!("eps_km {eps_km} must be positive")));
    }
    if min_samples == 0 {
        return Err(Error::Config("min_samples must be at least 1".into()));
    }
    let n = points.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| haversine_km(points[i], points[j]) <= eps_km).collect())
        .collect();
    const UNSEEN: i64 = -2;
    let mut labels = vec![UNSEEN; n];
    let mut next = 0i64;
    for i in 0..n {
        if labels[i] != UNSEEN {
            continue;
        }
        if neighbours[i].len() < min_samples {
            labels[i] = NOISE;
            continue;
        }
        let cluster = next;
        next += 1;
        labels[i] = cluster;
        let mut queue: Vec<usize> = neighbours[i].clone();
        let mut head = 0;
        while head < queue.len() {
            let q = queue[head];
            head += 1;
            if labels[q] == NOISE {
                labels[q] = cluster;
            }
            if labels[q] != UNSEEN {
                continue;
            }
            labels[q] = cluster;
            if neighbours[q].len() >= min_samples {
                queue.extend(neighbours[q].iter().copied());
            }
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    NotClustered,
    AllInOne,
    PartiallyInOne,
    MultipleClusters,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::NotClustered,
        Category::AllInOne,
        Category::PartiallyInOne,
        Category::MultipleClusters,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::NotClustered => "Not clustered",
            Category::AllInOne => "All in one cluster",
            Category::PartiallyInOne => "Partially in one cluster",
            Category::MultipleClusters => "Clusters > 1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub batch: String,
    pub points: usize,
    pub cluster_count: usize,
    pub clustered_fraction: f64,
    /// Mean distance over all same-cluster point pairs.
    pub avg_intra_km: Option<f64>,
    /// Smallest distance between points of different clusters.
    pub min_inter_km: Option<f64>,
    pub category: Category,
}

pub fn batch_statistics(batch: &str, points: &[Coord], labels: &[i64]) -> BatchStats {
    let n = points.len();
    let cluster_count = labels.iter().copied().filter(|&l| l >= 0).max().map_or(0, |m| m as usize + 1);
    let clustered = labels.iter().filter(|&&l| l >= 0).count();
    let clustered_fraction = if n == 0 { 0.0 } else { clustered as f64 / n as f64 };
    let (mut intra_sum, mut intra_pairs) = (0.0, 0usize);
    let mut min_inter = f64::INFINITY;
    for i in 0..n {
        if labels[i] < 0 {
            continue;
        }
        for j in i + 1..n {
            if labels[j] < 0 {
                continue;
            }
            let d = haversine_km(points[i], points[j]);
            if labels[i] == labels[j] {
                intra_sum += d;
                intra_pairs += 1;
            } else {
                min_inter = min_inter.min(d);
            }
        }
    }
    let category = if cluster_count >= 2 {
        Category::MultipleClusters
    } else if clustered == 0 {
        Category::NotClustered
    } else if clustered == n {
        Category::AllInOne
    } else {
        Category::PartiallyInOne
    };
    BatchStats {
        batch: batch.to_string(),
        points: n,
        cluster_count,
        clustered_fraction,
        avg_intra_km: (cluster_count > 0).then(|| if intra_pairs == 0 { 0.0 } else { intra_sum / intra_pairs as f64 }),
        min_inter_km: (cluster_count >= 2).then_some(min_inter),
        category,
    }
}

/// One summary row: batches of one category (or all of them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub category: String,
    pub batches: usize,
    pub ips: usize,
    /// Clustered points over all points in these batches.
    pub clustered_fraction: f64,
    /// Mean of the per-batch values, over batches where defined.
    pub avg_intra_km: Option<f64>,
    pub min_inter_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub batches: Vec<BatchStats>,
    pub summary: Vec<SummaryRow>,
    pub skipped_empty: usize,
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(category: &str, rows: &[&BatchStats]) -> SummaryRow {
    let ips: usize = rows.iter().map(|b| b.points).sum();
    let clustered: f64 = rows.iter().map(|b| b.clustered_fraction * b.points as f64).sum();
    SummaryRow {
        category: category.to_string(),
        batches: rows.len(),
        ips,
        clustered_fraction: if ips == 0 { 0.0 } else { clustered / ips as f64 },
        avg_intra_km: mean_defined(rows.iter().map(|b| b.avg_intra_km)),
        min_inter_km: mean_defined(rows.iter().map(|b| b.min_inter_km)),
    }
}

/// DBSCAN and statistics for every non-empty batch.
pub fn analyze_batches(batches: &[(String, Vec<Coord>)], eps_km: f64, min_samples: usize) -> Result<ClusterReport> {
    let mut stats = Vec::with_capacity(batches.len());
    let mut skipped_empty = 0;
    for (name, points) in batches {
        if points.is_empty() {
            skipped_empty += 1;
            continue;
        }
        let labels = dbscan_haversine(points, eps_km, min_samples)?;
        stats.push(batch_statistics(name, points, &labels));
    }
    let mut summary: Vec<SummaryRow> = Category::ALL
        .iter()
        .map(|&c| {
            let rows: Vec<&BatchStats> = stats.iter().filter(|b| b.category == c).collect();
            summarize(c.label(), &rows)
        })
        .collect();
    summary.push(summarize("Total", &stats.iter().collect::<Vec<_>>()));
    Ok(ClusterReport {
        batches: stats,
        summary,
        skipped_empty,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ClusterReport {
    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["category", "batches", "ips", "cluster_fraction", "avg_intra_km", "min_inter_km"])?;
        for r in &self.summary {
            w.write_record([
                r.category.clone(),
                r.batches.to_string(),
                r.ips.to_string(),
                r.clustered_fraction.to_string(),
                opt(r.avg_intra_km),
                opt(r.min_inter_km),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_detail_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "batch",
            "points",
            "cluster_count",
            "clustered_fraction",
            "avg_intra_km",
            "min_inter_km",
            "category",
        ])?;
        for b in &self.batches {
            w.write_record([
                b.batch.clone(),
                b.points.to_string(),
                b.cluster_count.to_string(),
                b.clustered_fraction.to_string(),
                opt(b.avg_intra_km),
                opt(b.min_inter_km),
                b.category.label().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KM_PER_DEG: f64 = 111.194_926_644_558_74;

    fn offset(c: Coord, east_km: f64, north_km: f64) -> Coord {
        Coord::new(
            c.lon + east_km / (KM_PER_DEG * c.lat.to_radians().cos()),
            c.lat + north_km / KM_PER_DEG,
        )
    }

    #[test]
    fn coincident_points_form_one_cluster() {
        let p = Coord::new(121.4, 31.2);
        assert_eq!(dbscan_haversine(&[p, p, p], 0.3, 3).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn far_pair_is_noise() {
        let a = Coord::new(121.4, 31.2);
        assert_eq!(dbscan_haversine(&[a, offset(a, 10.0, 0.0)], 0.3, 3).unwrap(), vec![-1, -1]);
    }

    #[test]
    fn chain_links_through_core_points() {
        let a = Coord::new(121.4, 31.2);
        let pts: Vec<Coord> = (0..6).map(|i| offset(a, 0.25 * i as f64, 0.0)).collect();
        let labels = dbscan_haversine(&pts, 0.3, 3).unwrap();
        assert!(labels.iter().all(|&l| l == 0), "{labels:?}");
        // every consecutive hop inside the cluster is within eps
        for w in pts.windows(2) {
            assert!(haversine_km(w[0], w[1]) <= 0.3);
        }
    }

    #[test]
    fn categories() {
        let a = Coord::new(121.4, 31.2);
        let noise = vec![a, offset(a, 5.0, 0.0), offset(a, 0.0, 5.0)];
        let tight: Vec<Coord> = (0..4).map(|i| offset(a, 0.02 * i as f64, 0.0)).collect();
        let mut partial = tight.clone();
        partial.push(offset(a, 8.0, 8.0));
        let mut two = tight.clone();
        two.extend((0..4).map(|i| offset(a, 3.0 + 0.02 * i as f64, 0.0)));
        let batches = vec![
            ("n".to_string(), noise),
            ("t".to_string(), tight),
            ("p".to_string(), partial),
            ("m".to_string(), two),
            ("e".to_string(), vec![]),
        ];
        let r = analyze_batches(&batches, 0.3, 3).unwrap();
        let cats: Vec<Category> = r.batches.iter().map(|b| b.category).collect();
        assert_eq!(
            cats,
            vec![Category::NotClustered, Category::AllInOne, Category::PartiallyInOne, Category::MultipleClusters]
        );
        assert_eq!(r.batches[0].clustered_fraction, 0.0);
        assert!(r.batches[1].avg_intra_km.unwrap() < 0.1);
        assert!(r.batches[1].min_inter_km.is_none());
        assert!((r.batches[3].min_inter_km.unwrap() - (3.0 - 0.06)).abs() < 1e-3);
        assert_eq!(r.skipped_empty, 1);
        let total = r.summary.last().unwrap();
        assert_eq!(total.batches, r.summary[..4].iter().map(|s| s.batches).sum::<usize>());
        assert_eq!(total.batches, 4);
    }

    #[test]
    fn relabeling_under_permutation() {
        let a = Coord::new(121.4, 31.2);
        let mut pts: Vec<Coord> = (0..5).map(|i| offset(a, 0.05 * i as f64, 0.0)).collect();
        pts.extend((0..5).map(|i| offset(a, 4.0, 0.05 * i as f64)));
        let l1 = dbscan_haversine(&pts, 0.3, 3).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let mut l2 = dbscan_haversine(&rev, 0.3, 3).unwrap();
        l2.reverse();
        // same partition, possibly different ids
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(l1[i] == l1[j], l2[i] == l2[j]);
            }
        }
    }
}
