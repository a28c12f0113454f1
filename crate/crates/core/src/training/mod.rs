//! Cluster-batch training, inference over a host table, and hyperparameter
//! search.

mod adam;
mod search;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hosts::{cluster_by_last_hop, Dataset, Scaler, Split};
use crate::loss::{batch_loss, CeSource, LossConfig, LossParts};
use crate::model::{predict_topk, ClusterBatch, HmcGeo, ModalPath, ModelConfig, PredictionBundle};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Precision, Tape, Tensor2};
use crate::regions::{HierarchyTree, LabelVector};

pub use adam::Adam;
pub use search::{
    carve_validation, grid_search, is_unimodal, rank, sweep, validation_accuracy, GridSpec, RankedConfig, SweepParam,
    SweepRow,
};

pub const LR_GRID: [f64; 6] = [2e-2, 1e-2, 2e-3, 1e-3, 2e-4, 1e-4];
pub const HIDDEN_GRID: [usize; 5] = [16, 32, 48, 64, 128];
pub const LAMBDA_GRID: [f64; 3] = [0.1, 0.5, 1.0];

/// The 21-point grid `0, 0.05, ..., 1` used for alpha and beta.
pub fn unit_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

fn on_unit_grid(x: f64) -> bool {
    (0.0..=1.0).contains(&x) && ((x * 20.0).round() - x * 20.0).abs() < 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub hidden: usize,
    /// Per-granularity CE weights; empty means 1.0 everywhere.
    pub lambda: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub ce_source: CeSource,
    /// Accept values outside the search grids.
    pub off_grid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            alpha: 0.3,
            beta: 0.5,
            hidden: 16,
            lambda: Vec::new(),
            epochs: 50,
            seed: 0,
            precision: Precision::F64,
            ce_source: CeSource::Fused,
            off_grid: false,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self, granularities: usize) -> LossConfig {
        let lambda = if self.lambda.is_empty() {
            vec![1.0; granularities]
        } else {
            self.lambda.clone()
        };
        LossConfig {
            beta: self.beta,
            lambda,
            ce_source: self.ce_source,
        }
    }

    pub fn validate(&self, granularities: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        self.loss_config(granularities).validate(granularities)?;
        if self.off_grid {
            return Ok(());
        }
        let off = |what: &str, v: String| Err(Error::Config(format!("{what} {v} is not on the search grid (set off_grid = true to allow)")));
        if !LR_GRID.contains(&self.lr) {
            return off("lr", self.lr.to_string());
        }
        if !HIDDEN_GRID.contains(&self.hidden) {
            return off("hidden", self.hidden.to_string());
        }
        if !on_unit_grid(self.alpha) {
            return off("alpha", self.alpha.to_string());
        }
        if !on_unit_grid(self.beta) {
            return off("beta", self.beta.to_string());
        }
        if let Some(l) = self.lambda.iter().find(|l| !LAMBDA_GRID.contains(l)) {
            return off("lambda", l.to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub pc: f64,
    pub loss: f64,
    /// Train accuracy per granularity, measured before each batch's update.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: HmcGeo,
    pub history: Vec<EpochRecord>,
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let g = history.first().map_or(0, |r| r.accuracy.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["epoch", "ce", "pc", "loss"].map(String::from).to_vec();
    header.extend((1..=g).map(|k| format!("train_acc_g{k}")));
    w.write_record(&header)?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.ce.to_string(), r.pc.to_string(), r.loss.to_string()];
        row.extend(r.accuracy.iter().map(|a| a.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train hosts of one cluster, standardized, ready for leave-one-out passes.
struct Batch {
    features: Tensor2,
    labels: Vec<LabelVector>,
    exclude: Vec<bool>,
    rows: Vec<usize>,
}

fn standardized_rows(dataset: &Dataset, scaler: Option<&Scaler>, rows: &[usize]) -> Result<Tensor2> {
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| {
            let f = &dataset.hosts[i].features;
            scaler.map_or_else(|| f.clone(), |s| s.transform(f))
        })
        .collect();
    if data.is_empty() {
        return Ok(Tensor2::zeros(0, dataset.feature_dim));
    }
    Tensor2::from_rows(&data)
}

fn train_indices(dataset: &Dataset) -> Vec<(usize, LabelVector)> {
    (0..dataset.len())
        .filter(|&i| dataset.hosts[i].split == Split::Train)
        .filter_map(|i| dataset.training_label(i).map(|l| (i, l.clone())))
        .collect()
}

pub fn train(dataset: &Dataset, tree: &HierarchyTree, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_init(dataset, tree, cfg, None)
}

/// Training starting from `init` parameters when given (its scaler is reused).
pub fn train_with_init(
    dataset: &Dataset,
    tree: &HierarchyTree,
    cfg: &TrainConfig,
    init: Option<HmcGeo>,
) -> Result<TrainOutcome> {
    let granularities = tree.granularity_count();
    cfg.validate(granularities)?;
    let loss_cfg = cfg.loss_config(granularities);
    dataset.lock_test_labels();
    let result = run_training(dataset, tree, cfg, &loss_cfg, init);
    dataset.unlock_test_labels();
    result
}

fn run_training(
    dataset: &Dataset,
    tree: &HierarchyTree,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    init: Option<HmcGeo>,
) -> Result<TrainOutcome> {
    let labelled = train_indices(dataset);
    for (i, lv) in &labelled {
        if !tree.is_path(&lv.per_granularity) {
            return Err(Error::Label(format!(
                "host {} has labels {:?} outside the hierarchy",
                dataset.hosts[*i].ip, lv.per_granularity
            )));
        }
    }
    let mut model = match init {
        Some(m) => m,
        None => {
            let scaler = Scaler::fit(labelled.iter().map(|(i, _)| dataset.hosts[*i].features.as_slice()))?;
            let mut m = HmcGeo::new(
                ModelConfig {
                    input_dim: dataset.feature_dim,
                    hidden: cfg.hidden,
                    granularity_sizes: tree.sizes().to_vec(),
                    alpha: cfg.alpha,
                },
                cfg.seed,
            )?;
            m.scaler = Some(scaler);
            m
        }
    };
    model.check_tree(tree)?;
    model.precision = cfg.precision;
    model.fallback = Some(ModalPath::from_labels(labelled.iter().map(|(_, l)| l), tree)?);

    let label_of: std::collections::HashMap<usize, &LabelVector> = labelled.iter().map(|(i, l)| (*i, l)).collect();
    let (clusters, _) = cluster_by_last_hop(&dataset.hosts);
    let mut batches = Vec::new();
    for members in clusters.clusters.values() {
        let rows: Vec<usize> = members.iter().copied().filter(|i| label_of.contains_key(i)).collect();
        if rows.len() < 2 {
            continue;
        }
        let n = rows.len();
        let exclude = (0..n * n).map(|k| k / n == k % n).collect();
        batches.push(Batch {
            features: standardized_rows(dataset, model.scaler.as_ref(), &rows)?,
            labels: rows.iter().map(|i| label_of[i].clone()).collect(),
            exclude,
            rows,
        });
    }
    if batches.is_empty() {
        return Err(Error::Training("no cluster has at least 2 labelled training hosts".into()));
    }
    log::info!(
        "training on {} clusters, {} hosts, {} parameters",
        batches.len(),
        batches.iter().map(|b| b.rows.len()).sum::<usize>(),
        model.params.scalar_count()
    );

    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0bad_5eed);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut correct = vec![0usize; tree.granularity_count()];
        let mut seen = 0usize;
        for &b in &order {
            let batch = &batches[b];
            let n = batch.rows.len();
            let idx: Vec<usize> = (0..n).collect();
            let label_refs: Vec<&LabelVector> = batch.labels.iter().collect();
            let mut tape = Tape::with_precision(cfg.precision);
            let vars = model.forward(
                &mut tape,
                &ClusterBatch {
                    features: &batch.features,
                    landmarks: &idx,
                    landmark_labels: &label_refs,
                    targets: &idx,
                    exclude: Some(&batch.exclude),
                },
            )?;
            let ce_scores = match loss_cfg.ce_source {
                CeSource::Fused => vars.fused,
                CeSource::Local => vars.local_concat,
            };
            let (loss, parts) = batch_loss(&mut tape, ce_scores, vars.fused, &batch.labels, tree, loss_cfg)?;
            let fused = tape.value(vars.fused);
            for (r, lv) in batch.labels.iter().enumerate() {
                for (g, top) in predict_topk(fused.row(r), tree, 1)?.iter().enumerate() {
                    correct[g] += usize::from(top[0] == lv.per_granularity[g]);
                }
            }
            sums.ce += parts.ce * n as f64;
            sums.pc += parts.pc * n as f64;
            sums.total += parts.total * n as f64;
            seen += n;
            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;
            adam.step(&mut model.params, cfg.lr)?;
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters became non-finite in epoch {epoch}")));
        }
        let n = seen as f64;
        let record = EpochRecord {
            epoch,
            ce: sums.ce / n,
            pc: sums.pc / n,
            loss: sums.total / n,
            accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
        };
        log::debug!("epoch {epoch}: loss {:.6} acc {:?}", record.loss, record.accuracy);
        history.push(record);
    }
    model.params.zero_grads();
    Ok(TrainOutcome { model, history })
}

/// Scores for one host: model output, or the modal-path fallback when its
/// cluster offers no landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct HostPrediction {
    pub host: usize,
    pub fallback: bool,
    pub scores: Vec<f64>,
    pub bundle: Option<PredictionBundle>,
}

/// Predicts `targets` (host indices). Landmarks are the labelled train
/// hosts sharing the target's last hop; a train target never sees itself.
pub fn predict_hosts(model: &HmcGeo, dataset: &Dataset, tree: &HierarchyTree, targets: &[usize]) -> Result<Vec<HostPrediction>> {
    model.check_tree(tree)?;
    if dataset.feature_dim != model.config.input_dim {
        return Err(Error::Dimension {
            op: "predict features",
            left: (dataset.len(), dataset.feature_dim),
            right: (model.config.input_dim, model.config.hidden),
        });
    }
    let fallback = model
        .fallback
        .as_ref()
        .ok_or_else(|| Error::State("model has no fallback path; was it trained?".into()))?;
    let (clusters, _) = cluster_by_last_hop(&dataset.hosts);
    let mut by_cluster: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    let mut out: Vec<Option<HostPrediction>> = vec![None; targets.len()];
    for (k, &t) in targets.iter().enumerate() {
        match clusters.cluster_of(t) {
            Some(hop) => by_cluster.entry(hop).or_default().push(k),
            None => {
                out[k] = Some(HostPrediction {
                    host: t,
                    fallback: true,
                    scores: fallback.scores.clone(),
                    bundle: None,
                })
            }
        }
    }
    for (hop, ks) in by_cluster {
        let landmarks: Vec<usize> = clusters
            .members(hop)
            .iter()
            .copied()
            .filter(|&i| dataset.hosts[i].split == Split::Train)
            .filter(|&i| dataset.training_label(i).is_some())
            .collect();
        let target_hosts: Vec<usize> = ks.iter().map(|&k| targets[k]).collect();
        // Local row space: landmarks first, then targets that are not landmarks.
        let mut rows = landmarks.clone();
        let local_target: Vec<usize> = target_hosts
            .iter()
            .map(|t| match landmarks.iter().position(|l| l == t) {
                Some(p) => p,
                None => {
                    rows.push(*t);
                    rows.len() - 1
                }
            })
            .collect();
        let bundles = if landmarks.is_empty() {
            vec![None; ks.len()]
        } else {
            let features = standardized_rows(dataset, model.scaler.as_ref(), &rows)?;
            let labels: Vec<&LabelVector> = landmarks.iter().map(|&i| dataset.training_label(i).unwrap()).collect();
            let lidx: Vec<usize> = (0..landmarks.len()).collect();
            model.predict_cluster(&features, &lidx, &labels, &local_target)?
        };
        for (k, bundle) in ks.into_iter().zip(bundles) {
            out[k] = Some(match bundle {
                Some(b) => HostPrediction {
                    host: targets[k],
                    fallback: false,
                    scores: b.fused.clone(),
                    bundle: Some(b),
                },
                None => HostPrediction {
                    host: targets[k],
                    fallback: true,
                    scores: fallback.scores.clone(),
                    bundle: None,
                },
            });
        }
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Evenly nested tree: region `r` of a granularity with `n` regions has
/// parent `r * m / n` in the coarser granularity with `m` regions.
pub fn balanced_tree(sizes: &[usize]) -> Result<HierarchyTree> {
    let parents: Vec<Vec<usize>> = sizes.windows(2).map(|w| (0..w[1]).map(|r| r * w[0] / w[1]).collect()).collect();
    HierarchyTree::from_parents(sizes.to_vec(), &parents)
}

/// Toy problem for checking the full model's gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGradCheck {
    pub input_dim: usize,
    pub hidden: usize,
    pub granularity_sizes: Vec<usize>,
    pub landmarks: usize,
    pub targets: usize,
    pub alpha: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for ToyGradCheck {
    fn default() -> Self {
        ToyGradCheck {
            input_dim: 6,
            hidden: 16,
            granularity_sizes: vec![2, 3, 5],
            landmarks: 4,
            targets: 2,
            alpha: 0.3,
            loss: LossConfig::new(0.5, vec![1.0; 3]),
            seed: 7,
        }
    }
}

/// Central-difference check of the composite loss with respect to every
/// model parameter, on random features and random leaf labels.
pub fn toy_gradient_check(toy: &ToyGradCheck, opts: GradCheckOptions) -> Result<GradCheckReport> {
    if toy.landmarks == 0 || toy.targets == 0 {
        return Err(Error::Config("gradient check needs at least one landmark and one target".into()));
    }
    let tree = balanced_tree(&toy.granularity_sizes)?;
    toy.loss.validate(tree.granularity_count())?;
    let mut model = HmcGeo::new(
        ModelConfig {
            input_dim: toy.input_dim,
            hidden: toy.hidden,
            granularity_sizes: toy.granularity_sizes.clone(),
            alpha: toy.alpha,
        },
        toy.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(toy.seed ^ 0x9e37);
    let n = toy.landmarks + toy.targets;
    let mut features = Tensor2::zeros(n, toy.input_dim);
    for v in &mut features.data {
        *v = rng.random_range(-1.0..1.0);
    }
    let labels: Vec<LabelVector> = (0..n)
        .map(|_| LabelVector::new(tree.path(rng.random_range(0..tree.leaf_count())), &tree))
        .collect::<Result<_>>()?;
    let landmarks: Vec<usize> = (0..toy.landmarks).collect();
    let targets: Vec<usize> = (toy.landmarks..n).collect();
    let landmark_labels: Vec<&LabelVector> = labels[..toy.landmarks].iter().collect();
    let target_labels = labels[toy.landmarks..].to_vec();
    let model_ref = model.clone();
    grad_check(
        &mut model.params,
        |tape, store| {
            let probe = HmcGeo {
                params: store.clone(),
                ..model_ref.clone()
            };
            let vars = probe.forward(
                tape,
                &ClusterBatch {
                    features: &features,
                    landmarks: &landmarks,
                    landmark_labels: &landmark_labels,
                    targets: &targets,
                    exclude: None,
                },
            )?;
            let ce = match toy.loss.ce_source {
                CeSource::Fused => vars.fused,
                CeSource::Local => vars.local_concat,
            };
            Ok(batch_loss(tape, ce, vars.fused, &target_labels, &tree, &toy.loss)?.0)
        },
        opts,
    )
}
