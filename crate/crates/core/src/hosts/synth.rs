//! Seeded synthetic cities: nested rectangular regions, last-hop clusters
//! planted over a few nearby leaves, and features that encode the host's leaf.

use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{split_train_test, write_hosts_csv, HostRecord};
use crate::error::{Error, Result};
use crate::regions::{Coord, HierarchyTree, LabelVector, Polygon, Region, RegionSet, DEFAULT_ID_PROPERTY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub granularity_sizes: Vec<usize>,
    pub clusters: usize,
    pub hosts_per_cluster: usize,
    /// Per-cluster host counts; overrides `clusters`/`hosts_per_cluster`.
    pub cluster_sizes: Option<Vec<usize>>,
    pub feature_noise: f64,
    pub seed: u64,
    pub max_leaves_per_cluster: usize,
    /// Width of the random Fourier encoding of the leaf centroid (even).
    pub encoding_dims: usize,
    /// Spread of the encoding frequencies in cycles per leaf spacing; larger
    /// values make neighbouring leaves' encodings less alike.
    pub encoding_scale: f64,
    /// Pure Gaussian feature dimensions carrying no signal.
    pub distractor_dims: usize,
    pub train_ratio: f64,
    /// When set, hosts of a cluster sit within this many km of their leaf's
    /// centroid instead of anywhere in the leaf.
    pub leaf_spread_km: Option<f64>,
    /// `[min_lon, min_lat, max_lon, max_lat]`.
    pub extent: [f64; 4],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            granularity_sizes: vec![4, 12, 36],
            clusters: 60,
            hosts_per_cluster: 30,
            cluster_sizes: None,
            feature_noise: 0.1,
            seed: 17,
            max_leaves_per_cluster: 5,
            encoding_dims: 16,
            encoding_scale: 1.0,
            distractor_dims: 4,
            train_ratio: 0.8,
            leaf_spread_km: None,
            extent: [121.0, 31.0, 121.6, 31.5],
        }
    }
}

impl SynthConfig {
    fn cluster_sizes(&self) -> Vec<usize> {
        self.cluster_sizes
            .clone()
            .unwrap_or_else(|| vec![self.hosts_per_cluster; self.clusters])
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = &self.granularity_sizes;
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Config("granularity sizes must be non-empty and positive".into()));
        }
        if let Some(g) = (1..sizes.len()).find(|&g| sizes[g] < sizes[g - 1]) {
            return Err(Error::Config(format!(
                "granularity {} has {} regions, fewer than the {} parents above it",
                g + 1,
                sizes[g],
                sizes[g - 1]
            )));
        }
        let [x0, y0, x1, y1] = self.extent;
        if !(x1 > x0 && y1 > y0) || x0 < -180.0 || x1 > 180.0 || y0 < -90.0 || y1 > 90.0 {
            return Err(Error::Config(format!("invalid extent {:?}", self.extent)));
        }
        if self.cluster_sizes().is_empty() {
            return Err(Error::Config("at least one cluster is required".into()));
        }
        if self.max_leaves_per_cluster == 0 {
            return Err(Error::Config("max_leaves_per_cluster must be at least 1".into()));
        }
        if self.encoding_dims == 0 || self.encoding_dims % 2 == 1 {
            return Err(Error::Config(format!("encoding_dims {} must be even and positive", self.encoding_dims)));
        }
        if !(self.encoding_scale > 0.0 && self.encoding_scale.is_finite()) {
            return Err(Error::Config("encoding_scale must be positive".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config("feature_noise must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

/// What the generator planted, for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub granularity_sizes: Vec<usize>,
    /// `parents[g - 1][r]`: local parent of region `r` at granularity `g`.
    pub parents: Vec<Vec<usize>>,
    /// Leaf ids planted for each cluster, in host-sampling order.
    pub cluster_leaves: Vec<Vec<usize>>,
    pub host_labels: Vec<LabelVector>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    pub sets: Vec<RegionSet>,
    pub tree: HierarchyTree,
    pub hosts: Vec<HostRecord>,
    pub truth: PlantedTruth,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (rects, parents) = nested_rectangles(cfg, &mut rng)?;
    let sizes = cfg.granularity_sizes.clone();
    let sets = rects
        .iter()
        .enumerate()
        .map(|(g, level)| {
            let regions = level
                .iter()
                .enumerate()
                .map(|(id, &(lo, hi))| Region::new(id, format!("g{}-{id}", g + 1), vec![Polygon::rect(lo, hi)]))
                .collect();
            RegionSet::new(g + 1, regions)
        })
        .collect::<Result<Vec<_>>>()?;
    let tree = HierarchyTree::from_parents(sizes.clone(), &parents)?;
    let leaves = rects.last().unwrap();
    let leaf_centres: Vec<Coord> = leaves
        .iter()
        .map(|(lo, hi)| Coord::new((lo.lon + hi.lon) / 2.0, (lo.lat + hi.lat) / 2.0))
        .collect();

    let cluster_sizes = cfg.cluster_sizes();
    let n_clusters = cluster_sizes.len();
    let cluster_leaves: Vec<Vec<usize>> = (0..n_clusters)
        .map(|_| plant_leaves(&leaf_centres, cfg.max_leaves_per_cluster, &mut rng))
        .collect();

    let encoder = CentroidEncoder::new(cfg, leaves.len(), &mut rng);
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let total: usize = cluster_sizes.iter().sum();
    let splits = split_train_test(total, cfg.train_ratio, cfg.seed ^ 0x5eed)?;
    let mut hosts = Vec::with_capacity(total);
    let mut host_labels = Vec::with_capacity(total);
    for (c, (&n, planted)) in cluster_sizes.iter().zip(&cluster_leaves).enumerate() {
        let last_hop = format!("r{c:04}");
        for _ in 0..n {
            let leaf = planted[rng.random_range(0..planted.len())];
            let coord = sample_in_leaf(&leaves[leaf], leaf_centres[leaf], cfg.leaf_spread_km, &mut rng);
            let mut features = vec![0.0; n_clusters];
            features[c] = 1.0;
            features.extend(
                encoder
                    .encode(leaf_centres[leaf])
                    .into_iter()
                    .map(|v| v + if cfg.feature_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 }),
            );
            features.extend((0..cfg.distractor_dims).map(|_| std_normal.sample(&mut rng)));
            let labels = LabelVector::new(tree.path(leaf), &tree)?;
            let index = hosts.len();
            hosts.push(HostRecord {
                ip: Ipv4Addr::from(0x0A00_0001u32 + index as u32).to_string(),
                features,
                coord: Some(coord),
                last_hop: last_hop.clone(),
                labels: Some(labels.clone()),
                split: splits[index],
            });
            host_labels.push(labels);
        }
    }
    Ok(SyntheticWorld {
        config: cfg.clone(),
        sets,
        tree,
        hosts,
        truth: PlantedTruth {
            granularity_sizes: sizes,
            parents,
            cluster_leaves,
            host_labels,
        },
    })
}

type Rect = (Coord, Coord);

/// Splits every region into its children on a near-square grid, then
/// relabels each level with a seeded permutation.
fn nested_rectangles(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<Rect>>, Vec<Vec<usize>>)> {
    let sizes = &cfg.granularity_sizes;
    let [x0, y0, x1, y1] = cfg.extent;
    let mut levels: Vec<Vec<Rect>> = vec![grid_split((Coord::new(x0, y0), Coord::new(x1, y1)), sizes[0])];
    let mut parents = Vec::new();
    for g in 1..sizes.len() {
        let coarse = &levels[g - 1];
        let (base, extra) = (sizes[g] / coarse.len(), sizes[g] % coarse.len());
        let mut fine = Vec::with_capacity(sizes[g]);
        let mut level_parents = Vec::with_capacity(sizes[g]);
        for (p, &rect) in coarse.iter().enumerate() {
            let k = base + usize::from(p < extra);
            for child in grid_split(rect, k) {
                fine.push(child);
                level_parents.push(p);
            }
        }
        parents.push(level_parents);
        levels.push(fine);
    }
    let min_side = levels
        .last()
        .unwrap()
        .iter()
        .map(|(lo, hi)| (hi.lon - lo.lon).min(hi.lat - lo.lat))
        .fold(f64::INFINITY, f64::min);
    if min_side < 1e-7 {
        return Err(Error::Config(format!(
            "extent too small for {} leaves (leaf side {min_side:e} degrees)",
            sizes.last().unwrap()
        )));
    }

    // Relabel: new_id = perm[old_id].
    let perms: Vec<Vec<usize>> = levels
        .iter()
        .map(|l| {
            let mut p: Vec<usize> = (0..l.len()).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    let relabeled: Vec<Vec<Rect>> = levels
        .iter()
        .zip(&perms)
        .map(|(l, perm)| {
            let mut out = l.clone();
            for (old, &new) in perm.iter().enumerate() {
                out[new] = l[old];
            }
            out
        })
        .collect();
    let relabeled_parents: Vec<Vec<usize>> = parents
        .iter()
        .enumerate()
        .map(|(k, level)| {
            let g = k + 1;
            let mut out = vec![0; level.len()];
            for (old, &p) in level.iter().enumerate() {
                out[perms[g][old]] = perms[g - 1][p];
            }
            out
        })
        .collect();
    Ok((relabeled, relabeled_parents))
}

/// Tiles a rectangle with `k` cells: `floor(sqrt(k))` rows, cells spread as
/// evenly as possible over the rows.
fn grid_split((lo, hi): Rect, k: usize) -> Vec<Rect> {
    let rows = (k as f64).sqrt().floor().max(1.0) as usize;
    let (base, extra) = (k / rows, k % rows);
    let h = (hi.lat - lo.lat) / rows as f64;
    let mut out = Vec::with_capacity(k);
    for r in 0..rows {
        let cols = base + usize::from(r < extra);
        let w = (hi.lon - lo.lon) / cols as f64;
        let ya = lo.lat + h * r as f64;
        let yb = if r + 1 == rows { hi.lat } else { lo.lat + h * (r + 1) as f64 };
        for c in 0..cols {
            let xa = lo.lon + w * c as f64;
            let xb = if c + 1 == cols { hi.lon } else { lo.lon + w * (c + 1) as f64 };
            out.push((Coord::new(xa, ya), Coord::new(xb, yb)));
        }
    }
    out
}

/// 1..=max leaves: a random anchor plus leaves drawn from its nearest neighbours.
fn plant_leaves(centres: &[Coord], max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(1..=max.min(centres.len()));
    let anchor = rng.random_range(0..centres.len());
    let mut by_distance: Vec<usize> = (0..centres.len()).filter(|&i| i != anchor).collect();
    let d2 = |i: usize| {
        let (a, b) = (centres[anchor], centres[i]);
        (a.lon - b.lon).powi(2) + (a.lat - b.lat).powi(2)
    };
    by_distance.sort_by(|&a, &b| d2(a).total_cmp(&d2(b)).then(a.cmp(&b)));
    by_distance.truncate(2 * (n - 1));
    by_distance.shuffle(rng);
    let mut out = vec![anchor];
    out.extend(by_distance.into_iter().take(n - 1));
    out
}

const KM_PER_DEG_LAT: f64 = 111.194_926_644_558_74;

fn sample_in_leaf((lo, hi): &Rect, centre: Coord, spread_km: Option<f64>, rng: &mut ChaCha8Rng) -> Coord {
    let (hw, hh) = ((hi.lon - lo.lon) * 0.4, (hi.lat - lo.lat) * 0.4);
    let (rx, ry) = match spread_km {
        Some(km) => {
            let dlat = km / KM_PER_DEG_LAT;
            let dlon = dlat / centre.lat.to_radians().cos();
            (dlon.min(hw), dlat.min(hh))
        }
        None => (hw, hh),
    };
    Coord::new(
        centre.lon + rng.random_range(-rx..=rx),
        centre.lat + rng.random_range(-ry..=ry),
    )
}

/// Paired cosine and sine random features of the normalized centroid. Every
/// encoding has the same norm and the inner product of two encodings falls
/// off with their distance at a bandwidth matched to the leaf spacing.
struct CentroidEncoder {
    extent: [f64; 4],
    freqs: Vec<(f64, f64)>,
}

impl CentroidEncoder {
    fn new(cfg: &SynthConfig, leaf_count: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = cfg.encoding_scale * (leaf_count as f64).sqrt();
        let normal = Normal::new(0.0, scale).unwrap();
        let freqs = (0..cfg.encoding_dims / 2)
            .map(|_| (normal.sample(rng), normal.sample(rng)))
            .collect();
        CentroidEncoder {
            extent: cfg.extent,
            freqs,
        }
    }

    fn encode(&self, c: Coord) -> Vec<f64> {
        let [x0, y0, x1, y1] = self.extent;
        let (u, v) = ((c.lon - x0) / (x1 - x0), (c.lat - y0) / (y1 - y0));
        self.freqs
            .iter()
            .flat_map(|&(a, b)| {
                let t = a * u + b * v;
                [t.cos(), t.sin()]
            })
            .collect()
    }
}

impl SyntheticWorld {
    pub fn feature_dim(&self) -> usize {
        self.hosts.first().map_or(0, |h| h.features.len())
    }

    pub fn region_file_name(g: usize) -> String {
        format!("regions_g{}.geojson", g + 1)
    }

    /// Writes `regions_g{g}.geojson`, `hosts.csv`, `truth.jsonl` and
    /// `planted.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (g, set) in self.sets.iter().enumerate() {
            set.save(dir.join(Self::region_file_name(g)), DEFAULT_ID_PROPERTY)?;
        }
        write_hosts_csv(dir.join("hosts.csv"), &self.hosts, self.sets.len())?;
        let truth_path = dir.join("truth.jsonl");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&truth_path).map_err(|e| Error::io(&truth_path, e))?);
        for (h, labels) in self.hosts.iter().zip(&self.truth.host_labels) {
            let line = serde_json::json!({
                "ip": h.ip,
                "last_hop": h.last_hop,
                "labels": labels,
                "lon": h.coord.map(|c| c.lon),
                "lat": h.coord.map(|c| c.lat),
            });
            writeln!(f, "{line}").map_err(|e| Error::io(&truth_path, e))?;
        }
        f.flush().map_err(|e| Error::io(&truth_path, e))?;
        let planted_path = dir.join("planted.json");
        std::fs::write(&planted_path, serde_json::to_string_pretty(&self.truth)?).map_err(|e| Error::io(&planted_path, e))
    }
}
