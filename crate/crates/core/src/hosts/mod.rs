//! Host tables, last-hop clustering and landmark selection.

mod synth;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::regions::{assign_labels, Coord, HierarchyTree, LabelVector, RegionSet, Unassignable};

pub use synth::{generate_synthetic, PlantedTruth, SynthConfig, SyntheticWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unlabeled,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "unlabeled" | "" => Some(Split::Unlabeled),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostRecord {
    pub ip: String,
    pub features: Vec<f64>,
    pub coord: Option<Coord>,
    pub last_hop: String,
    pub labels: Option<LabelVector>,
    pub split: Split,
}

impl HostRecord {
    pub fn is_landmark(&self) -> bool {
        self.coord.is_some() && self.labels.is_some()
    }
}

/// Column names of the optional per-granularity label columns.
pub fn label_column(g: usize) -> String {
    format!("region_{}", g + 1)
}

/// Reads a host table. Files ending in `.jsonl`/`.ndjson`/`.json` are line
/// JSON, anything else is CSV with header `ip, f0..f{D-1}, lon, lat, last_hop`
/// plus optional `region_1..region_G` and `split` columns.
pub fn load_hosts(path: impl AsRef<Path>) -> Result<Vec<HostRecord>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "ndjson" | "json") => load_hosts_jsonl(path),
        _ => load_hosts_csv(path),
    }
}

fn feature_index(name: &str) -> Option<usize> {
    name.strip_prefix('f').and_then(|d| d.parse().ok())
}

fn parse_opt_f64(s: &str, ctx: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::parse(ctx, format!("`{s}` is not a number")))
}

fn make_coord(lon: Option<f64>, lat: Option<f64>, ctx: &str) -> Result<Option<Coord>> {
    match (lon, lat) {
        (Some(lon), Some(lat)) => {
            if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
                return Err(Error::parse(ctx, format!("coordinate ({lon}, {lat}) out of range")));
            }
            Ok(Some(Coord::new(lon, lat)))
        }
        (None, None) => Ok(None),
        _ => Err(Error::parse(ctx, "only one of lon/lat present")),
    }
}

fn load_hosts_csv(path: &Path) -> Result<Vec<HostRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(e.into()),
        Err(e) => return Err(e.into()),
    };
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| col(name).ok_or_else(|| Error::Schema(format!("host file missing column `{name}`")));
    let ip = required("ip")?;
    let lon = required("lon")?;
    let lat = required("lat")?;
    let last_hop = required("last_hop")?;
    let split_col = col("split");
    let mut feat_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| feature_index(h).map(|k| (k, i)))
        .collect();
    feat_cols.sort();
    if feat_cols.iter().enumerate().any(|(k, &(fk, _))| k != fk) {
        return Err(Error::Schema("feature columns must be f0..f{D-1} without gaps".into()));
    }
    let label_cols: Vec<usize> = (0..).map_while(|g| col(&label_column(g))).collect();

    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(n as u64 + 2, |p| p.line());
        let ctx = format!("{} line {line}", path.display());
        if rec.len() != headers.len() {
            return Err(Error::Schema(format!(
                "{ctx}: expected {} fields, found {}",
                headers.len(),
                rec.len()
            )));
        }
        let features = feat_cols
            .iter()
            .map(|&(k, i)| parse_opt_f64(&rec[i], &ctx)?.ok_or_else(|| Error::Schema(format!("{ctx}: empty feature f{k}"))))
            .collect::<Result<Vec<_>>>()?;
        let coord = make_coord(parse_opt_f64(&rec[lon], &ctx)?, parse_opt_f64(&rec[lat], &ctx)?, &ctx)?;
        let labels = parse_label_fields(label_cols.iter().map(|&i| rec[i].trim()), &ctx)?;
        let split = match split_col {
            Some(i) => Split::parse(rec[i].trim()).ok_or_else(|| Error::parse(&ctx, "bad split value"))?,
            None => Split::Unlabeled,
        };
        out.push(HostRecord {
            ip: rec[ip].to_string(),
            features,
            coord,
            last_hop: rec[last_hop].trim().to_string(),
            labels,
            split,
        });
    }
    Ok(out)
}

fn parse_label_fields<'a>(fields: impl Iterator<Item = &'a str>, ctx: &str) -> Result<Option<LabelVector>> {
    let raw: Vec<&str> = fields.collect();
    if raw.is_empty() || raw.iter().all(|s| s.is_empty()) {
        return Ok(None);
    }
    let ids = raw
        .iter()
        .map(|s| s.parse::<usize>().map_err(|_| Error::parse(ctx, format!("bad region id `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(LabelVector { per_granularity: ids }))
}

fn load_hosts_jsonl(path: &Path) -> Result<Vec<HostRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = format!("{} line {}", path.display(), n + 1);
        let obj: Map<String, Value> = serde_json::from_str(&line).map_err(|e| Error::parse(&ctx, e.to_string()))?;
        let mut feats: Vec<(usize, f64)> = obj
            .iter()
            .filter_map(|(k, v)| feature_index(k).map(|i| (i, v)))
            .map(|(i, v)| v.as_f64().map(|x| (i, x)).ok_or_else(|| Error::parse(&ctx, format!("f{i} is not a number"))))
            .collect::<Result<_>>()?;
        feats.sort_by_key(|&(i, _)| i);
        if feats.iter().enumerate().any(|(k, &(i, _))| k != i) {
            return Err(Error::Schema(format!("{ctx}: feature keys must be f0..f{{D-1}}")));
        }
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(Error::Schema(format!("{ctx}: expected {d} features, found {}", feats.len())))
            }
            _ => {}
        }
        let get_str = |k: &str| obj.get(k).and_then(Value::as_str).map(str::to_owned);
        let lon = obj.get("lon").and_then(Value::as_f64);
        let lat = obj.get("lat").and_then(Value::as_f64);
        let labels = (0..)
            .map_while(|g| obj.get(&label_column(g)).map(|v| v.as_u64().map(|x| x as usize)))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::parse(&ctx, "bad region id"))?;
        out.push(HostRecord {
            ip: get_str("ip").ok_or_else(|| Error::parse(&ctx, "missing ip"))?,
            features: feats.into_iter().map(|(_, x)| x).collect(),
            coord: make_coord(lon, lat, &ctx)?,
            last_hop: get_str("last_hop").unwrap_or_default(),
            labels: (!labels.is_empty()).then_some(LabelVector { per_granularity: labels }),
            split: get_str("split")
                .map(|s| Split::parse(&s).ok_or_else(|| Error::parse(&ctx, "bad split value")))
                .transpose()?
                .unwrap_or(Split::Unlabeled),
        });
    }
    Ok(out)
}

/// Writes hosts as CSV in the loader's layout. Label columns are written
/// when `granularities > 0`.
pub fn write_hosts_csv(path: impl AsRef<Path>, hosts: &[HostRecord], granularities: usize) -> Result<()> {
    let path = path.as_ref();
    let dim = hosts.first().map_or(0, |h| h.features.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["ip".to_string()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    header.extend(["lon", "lat", "last_hop"].map(String::from));
    header.extend((0..granularities).map(label_column));
    header.push("split".into());
    w.write_record(&header)?;
    for h in hosts {
        let mut row = vec![h.ip.clone()];
        row.extend(h.features.iter().map(|v| v.to_string()));
        match h.coord {
            Some(c) => row.extend([c.lon.to_string(), c.lat.to_string()]),
            None => row.extend([String::new(), String::new()]),
        }
        row.push(h.last_hop.clone());
        for g in 0..granularities {
            row.push(
                h.labels
                    .as_ref()
                    .and_then(|l| l.per_granularity.get(g))
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        row.push(h.split.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Hosts grouped by last-hop router id, ordered by router id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSet {
    pub clusters: BTreeMap<String, Vec<usize>>,
    cluster_of: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejected {
    pub index: usize,
    pub reason: String,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn cluster_of(&self, host: usize) -> Option<&str> {
        self.cluster_of.get(host).and_then(|c| c.as_deref())
    }

    pub fn members(&self, last_hop: &str) -> &[usize] {
        self.clusters.get(last_hop).map_or(&[], Vec::as_slice)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, hosts: &[HostRecord]) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["last_hop", "ip", "host_index"])?;
        for (hop, members) in &self.clusters {
            for &i in members {
                w.write_record([hop.as_str(), hosts[i].ip.as_str(), &i.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Exact partition by last-hop equality; hosts without a last hop are rejected.
pub fn cluster_by_last_hop(hosts: &[HostRecord]) -> (ClusterSet, Vec<Rejected>) {
    let mut clusters: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut cluster_of = vec![None; hosts.len()];
    let mut rejected = Vec::new();
    for (i, h) in hosts.iter().enumerate() {
        if h.last_hop.is_empty() {
            rejected.push(Rejected {
                index: i,
                reason: format!("host {} has no last-hop router id", h.ip),
            });
            continue;
        }
        clusters.entry(h.last_hop.clone()).or_default().push(i);
        cluster_of[i] = Some(h.last_hop.clone());
    }
    (ClusterSet { clusters, cluster_of }, rejected)
}

/// Train-split landmarks sharing the target's last hop, target excluded.
/// `None` signals the empty-landmark fallback.
pub fn select_landmarks(target: usize, clusters: &ClusterSet, hosts: &[HostRecord]) -> Option<Vec<usize>> {
    let hop = clusters.cluster_of(target)?;
    let selected: Vec<usize> = clusters
        .members(hop)
        .iter()
        .copied()
        .filter(|&i| i != target && hosts[i].split == Split::Train && hosts[i].labels.is_some())
        .collect();
    (!selected.is_empty()).then_some(selected)
}

/// Uniform random split: exactly `floor(ratio * n)` train hosts.
pub fn split_train_test(n: usize, ratio: f64, seed: u64) -> Result<Vec<Split>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("train ratio {ratio} must lie in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * n as f64).floor() as usize;
    let mut out = vec![Split::Test; n];
    for &i in &order[..n_train] {
        out[i] = Split::Train;
    }
    Ok(out)
}

/// Labels each host from its coordinate. Returns the per-host outcome;
/// unassignable hosts keep `labels = None`.
pub fn label_hosts(
    hosts: &mut [HostRecord],
    sets: &[RegionSet],
    tree: &HierarchyTree,
) -> Vec<Option<Unassignable>> {
    hosts
        .iter_mut()
        .map(|h| match h.coord {
            Some(c) => match assign_labels(c, sets, tree) {
                Ok(lv) => {
                    h.labels = Some(lv);
                    None
                }
                Err(u) => {
                    h.labels = None;
                    Some(u)
                }
            },
            None => None,
        })
        .collect()
}

/// Per-dimension z-score fitted on training hosts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Dimensions whose standard deviation falls below this pass through untouched.
pub const MIN_STD: f64 = 1e-12;

impl Scaler {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        if rows.len() < 2 {
            return Err(Error::Config("standardization needs at least 2 training hosts".into()));
        }
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, x) in mean.iter_mut().zip(*r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| if s < MIN_STD { v } else { (v - m) / s })
            .collect()
    }

    pub fn apply(&self, hosts: &mut [HostRecord]) {
        for h in hosts {
            h.features = self.transform(&h.features);
        }
    }
}

/// Host table with a guard that records any read of a test host's labels
/// while training is in progress.
#[derive(Debug)]
pub struct Dataset {
    pub hosts: Vec<HostRecord>,
    pub feature_dim: usize,
    locked: AtomicBool,
    violations: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            hosts: self.hosts.clone(),
            feature_dim: self.feature_dim,
            locked: AtomicBool::new(self.locked.load(Ordering::SeqCst)),
            violations: AtomicUsize::new(self.violations.load(Ordering::SeqCst)),
        }
    }
}

impl Dataset {
    pub fn new(hosts: Vec<HostRecord>) -> Result<Self> {
        let feature_dim = hosts.first().map_or(0, |h| h.features.len());
        if let Some((i, h)) = hosts.iter().enumerate().find(|(_, h)| h.features.len() != feature_dim) {
            return Err(Error::Schema(format!(
                "host #{i} ({}) has {} features, expected {feature_dim}",
                h.ip,
                h.features.len()
            )));
        }
        Ok(Dataset {
            hosts,
            feature_dim,
            locked: AtomicBool::new(false),
            violations: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }

    pub fn set_splits(&mut self, splits: &[Split]) {
        for (h, &s) in self.hosts.iter_mut().zip(splits) {
            h.split = s;
        }
    }

    pub fn lock_test_labels(&self) {
        self.locked.store(true, Ordering::SeqCst);
    }

    pub fn unlock_test_labels(&self) {
        self.locked.store(false, Ordering::SeqCst);
    }

    pub fn test_label_violations(&self) -> usize {
        self.violations.load(Ordering::SeqCst)
    }

    /// Labels usable for training: train-split hosts only. Reading a test
    /// host's labels while locked is counted as a violation.
    pub fn training_label(&self, i: usize) -> Option<&LabelVector> {
        let h = &self.hosts[i];
        match h.split {
            Split::Train => h.labels.as_ref(),
            Split::Test => {
                if self.locked.load(Ordering::SeqCst) {
                    self.violations.fetch_add(1, Ordering::SeqCst);
                }
                None
            }
            Split::Unlabeled => None,
        }
    }

    pub fn split_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["ip", "split"])?;
        for h in &self.hosts {
            w.write_record([h.ip.as_str(), h.split.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn host(ip: &str, hop: &str, split: Split, labelled: bool) -> HostRecord {
        HostRecord {
            ip: ip.into(),
            features: vec![0.0],
            coord: labelled.then_some(Coord::new(0.0, 0.0)),
            last_hop: hop.into(),
            labels: labelled.then(|| LabelVector { per_granularity: vec![0] }),
            split,
        }
    }

    #[test]
    fn clusters_by_last_hop() {
        let hosts = vec![
            host("1", "a", Split::Train, true),
            host("2", "a", Split::Train, true),
            host("3", "b", Split::Train, true),
        ];
        let (c, rej) = cluster_by_last_hop(&hosts);
        assert!(rej.is_empty());
        assert_eq!(c.members("a"), &[0, 1]);
        assert_eq!(c.members("b"), &[2]);
    }

    #[test]
    fn missing_last_hop_is_rejected() {
        let hosts = vec![host("1", "", Split::Train, true), host("2", "x", Split::Train, true)];
        let (c, rej) = cluster_by_last_hop(&hosts);
        assert_eq!(rej.len(), 1);
        assert_eq!(rej[0].index, 0);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn landmark_selection_rules() {
        let hosts = vec![
            host("t", "a", Split::Test, false),
            host("l1", "a", Split::Train, true),
            host("l2", "a", Split::Train, true),
            host("x", "b", Split::Test, true),
        ];
        let (c, _) = cluster_by_last_hop(&hosts);
        assert_eq!(select_landmarks(0, &c, &hosts), Some(vec![1, 2]));
        // train target: self excluded
        assert_eq!(select_landmarks(1, &c, &hosts), Some(vec![2]));
        // only test hosts in the cluster
        assert_eq!(select_landmarks(3, &c, &hosts), None);
    }

    #[test]
    fn split_counts_and_determinism() {
        let a = split_train_test(100, 0.8, 7).unwrap();
        assert_eq!(a.iter().filter(|&&s| s == Split::Train).count(), 80);
        assert_eq!(a, split_train_test(100, 0.8, 7).unwrap());
        let big = split_train_test(91_809, 0.8, 1).unwrap();
        assert_eq!(big.iter().filter(|&&s| s == Split::Train).count(), 73_447);
        assert!(split_train_test(10, 1.0, 0).is_err());
    }

    #[test]
    fn scaler_contract() {
        let s = Scaler::fit([&[0.0, 5.0][..], &[2.0, 5.0][..]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 0.0]);
        assert_eq!(s.transform(&[0.0, 5.0]), vec![-1.0, 5.0]);
        assert_eq!(s.transform(&[2.0, 7.0]), vec![1.0, 7.0]);
        // a test host is scaled with the train statistics
        assert_eq!(s.transform(&[4.0, 1.0]), vec![3.0, 1.0]);
        assert!(Scaler::fit([&[1.0][..]]).is_err());
    }

    #[test]
    fn empty_files_load_empty() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["h.csv", "h.jsonl"] {
            let p = dir.path().join(name);
            std::fs::write(&p, "").unwrap();
            assert!(load_hosts(&p).unwrap().is_empty());
        }
    }

    #[test]
    fn ragged_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "ip,f0,f1,lon,lat,last_hop").unwrap();
        writeln!(f, "1.1.1.1,0.1,0.2,121.0,31.0,r1").unwrap();
        writeln!(f, "1.1.1.2,0.1,121.0,31.0,r1").unwrap();
        drop(f);
        let err = load_hosts(&p).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn csv_and_jsonl_agree() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("h.csv");
        std::fs::write(
            &csv_path,
            "ip,f0,f1,lon,lat,last_hop\n10.0.0.1,1.5,-2,121.1,31.2,r9\n10.0.0.2,0,0,,,r9\n",
        )
        .unwrap();
        let jl = dir.path().join("h.jsonl");
        std::fs::write(
            &jl,
            "{\"ip\":\"10.0.0.1\",\"f0\":1.5,\"f1\":-2,\"lon\":121.1,\"lat\":31.2,\"last_hop\":\"r9\"}\n\
             {\"ip\":\"10.0.0.2\",\"f0\":0,\"f1\":0,\"last_hop\":\"r9\"}\n",
        )
        .unwrap();
        let a = load_hosts(&csv_path).unwrap();
        let b = load_hosts(&jl).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].features.len(), 2);
        assert_eq!(a[1].coord, None);
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let mut hosts = vec![host("a", "r", Split::Train, true), host("b", "r", Split::Test, false)];
        hosts[0].features = vec![0.1 + 0.2];
        write_hosts_csv(&p, &hosts, 1).unwrap();
        assert_eq!(load_hosts(&p).unwrap(), hosts);
    }

    #[test]
    fn guard_counts_test_label_reads() {
        let ds = Dataset::new(vec![host("a", "r", Split::Train, true), host("b", "r", Split::Test, true)]).unwrap();
        assert!(ds.training_label(0).is_some());
        assert!(ds.training_label(1).is_none());
        assert_eq!(ds.test_label_violations(), 0);
        ds.lock_test_labels();
        assert!(ds.training_label(1).is_none());
        assert_eq!(ds.test_label_violations(), 1);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 0usize..300, ratio in 0.01f64..0.99, seed in any::<u64>()) {
            let s = split_train_test(n, ratio, seed).unwrap();
            prop_assert_eq!(s.len(), n);
            let train = s.iter().filter(|&&x| x == Split::Train).count();
            let test = s.iter().filter(|&&x| x == Split::Test).count();
            prop_assert_eq!(train + test, n);
            prop_assert_eq!(train, (ratio * n as f64).floor() as usize);
        }

        #[test]
        fn standardized_train_has_zero_mean_unit_std(
            rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 2..40)
        ) {
            let s = Scaler::fit(rows.iter().map(Vec::as_slice)).unwrap();
            let z: Vec<Vec<f64>> = rows.iter().map(|r| s.transform(r)).collect();
            for d in 0..3 {
                if s.std[d] < 1e-6 { continue; }
                let n = z.len() as f64;
                let m: f64 = z.iter().map(|r| r[d]).sum::<f64>() / n;
                let sd = (z.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((sd - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn landmarks_never_include_target(
            hops in prop::collection::vec(0u8..4, 1..30),
            train in prop::collection::vec(any::<bool>(), 30),
        ) {
            let hosts: Vec<HostRecord> = hops.iter().enumerate().map(|(i, h)| {
                let split = if train[i] { Split::Train } else { Split::Test };
                host(&i.to_string(), &format!("r{h}"), split, true)
            }).collect();
            let (c, _) = cluster_by_last_hop(&hosts);
            for t in 0..hosts.len() {
                if let Some(ls) = select_landmarks(t, &c, &hosts) {
                    prop_assert!(!ls.contains(&t));
                    prop_assert!(ls.iter().all(|&l| hosts[l].last_hop == hosts[t].last_hop));
                }
            }
        }
    }
}
