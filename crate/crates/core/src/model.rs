//! The region classifier.
//!
//! A stack of `G + 1` feature units is applied to landmarks and targets
//! together. Unit 1 maps the `D` input features to the hidden width; every
//! later unit adds a residual connection. Head `g` reads unit `g`'s output
//! and attends from each target over the landmarks of its cluster, with the
//! landmarks' labels (one-hot at its granularity, multi-hot over all regions
//! for the global head) as values. Local outputs are concatenated and mixed
//! with the global output by the fusion weight `alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hosts::Scaler;
use crate::numerics::{init_params, Checkpoint, ParamSpec, ParamStore, Precision, Tape, Tensor2, Var, LEAKY_SLOPE};
use crate::regions::{HierarchyTree, LabelVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub granularity_sizes: Vec<usize>,
    pub alpha: f64,
}

impl ModelConfig {
    pub fn granularities(&self) -> usize {
        self.granularity_sizes.len()
    }

    pub fn total_regions(&self) -> usize {
        self.granularity_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("input_dim and hidden must be positive".into()));
        }
        if self.granularity_sizes.is_empty() || self.granularity_sizes.contains(&0) {
            return Err(Error::Config("granularity sizes must be non-empty and positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    /// Width of head `k`'s label encoding (`k == G` is the global head).
    pub fn head_width(&self, k: usize) -> usize {
        self.granularity_sizes.get(k).copied().unwrap_or_else(|| self.total_regions())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let h = self.hidden;
        let mut specs = Vec::new();
        for k in 0..=self.granularities() {
            let fan_in = if k == 0 { self.input_dim } else { h };
            specs.push(ParamSpec::weight(unit_weight(k), fan_in, h));
            specs.push(ParamSpec::bias(unit_bias(k), h));
        }
        for k in 0..=self.granularities() {
            let w = self.head_width(k);
            specs.push(ParamSpec::weight(head_param(k, "query"), h, h));
            specs.push(ParamSpec::weight(head_param(k, "key"), h, h));
            specs.push(ParamSpec::weight(head_param(k, "value"), w, w));
        }
        specs
    }
}

fn unit_weight(k: usize) -> String {
    format!("unit{}.weight", k + 1)
}

fn unit_bias(k: usize) -> String {
    format!("unit{}.bias", k + 1)
}

fn head_param(k: usize, which: &str) -> String {
    format!("head{}.{which}", k + 1)
}

/// Per-target outputs of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    /// One score vector per granularity.
    pub locals: Vec<Vec<f64>>,
    pub global_scores: Vec<f64>,
    pub fused: Vec<f64>,
}

/// Tape variables of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Unit outputs over all rows, `G + 1` entries.
    pub hidden: Vec<Var>,
    /// Attention weights per head, targets × landmarks.
    pub attention: Vec<Var>,
    pub locals: Vec<Var>,
    pub local_concat: Var,
    pub global: Var,
    pub fused: Var,
}

/// Inputs of one cluster forward pass. Rows of `features` are addressed by
/// `landmarks` and `targets`; `exclude[t][l]` hides landmark `l` from target `t`.
#[derive(Debug, Clone)]
pub struct ClusterBatch<'a> {
    pub features: &'a Tensor2,
    pub landmarks: &'a [usize],
    pub landmark_labels: &'a [&'a LabelVector],
    pub targets: &'a [usize],
    pub exclude: Option<&'a [bool]>,
}

/// `H¹ = σ(X W¹ + b¹)`, `Hᵍ = σ(Hᵍ⁻¹ Wᵍ + bᵍ) + Hᵍ⁻¹`.
pub fn feature_stack(tape: &mut Tape, store: &ParamStore, x: Var, units: usize) -> Result<Vec<Var>> {
    let mut out: Vec<Var> = Vec::with_capacity(units);
    for k in 0..units {
        let input = if k == 0 { x } else { out[k - 1] };
        let w = tape.param_named(store, &unit_weight(k))?;
        let b = tape.param_named(store, &unit_bias(k))?;
        let z = tape.matmul(input, w)?;
        let z = tape.add_bias(z, b)?;
        let a = tape.leaky_relu(z, LEAKY_SLOPE)?;
        out.push(if k == 0 { a } else { tape.add(a, input)? });
    }
    Ok(out)
}

/// Scaled dot-product attention of one head. Returns `(scores, weights)`.
pub fn attention_head(
    tape: &mut Tape,
    store: &ParamStore,
    head: usize,
    targets_hidden: Var,
    landmarks_hidden: Var,
    landmark_labels: Var,
    exclude: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let wq = tape.param_named(store, &head_param(head, "query"))?;
    let wk = tape.param_named(store, &head_param(head, "key"))?;
    let wv = tape.param_named(store, &head_param(head, "value"))?;
    let d_k = tape.value(wk).cols;
    let q = tape.matmul(targets_hidden, wq)?;
    let k = tape.matmul(landmarks_hidden, wk)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax_rows(logits, exclude)?;
    let v = tape.matmul(landmark_labels, wv)?;
    let scores = tape.matmul(weights, v)?;
    Ok((scores, weights))
}

/// `alpha · locals + (1 − alpha) · global`.
pub fn fuse(locals: &[f64], global: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if locals.len() != global.len() {
        return Err(Error::Dimension {
            op: "fuse",
            left: (1, locals.len()),
            right: (1, global.len()),
        });
    }
    Ok(locals
        .iter()
        .zip(global)
        .map(|(l, g)| alpha * l + (1.0 - alpha) * g)
        .collect())
}

/// Ids of the `k` highest scores in each granularity slice, best first;
/// equal scores go to the smaller id. `k` is clamped to the slice width.
pub fn predict_topk(fused: &[f64], tree: &HierarchyTree, k: usize) -> Result<Vec<Vec<usize>>> {
    if fused.len() != tree.total_regions() {
        return Err(Error::Dimension {
            op: "predict_topk",
            left: (1, fused.len()),
            right: (1, tree.total_regions()),
        });
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok((0..tree.granularity_count())
        .map(|g| {
            let width = tree.sizes()[g];
            if k > width {
                log::warn!("k = {k} exceeds the {width} regions at granularity {}; clamped", g + 1);
            }
            let slice = &fused[tree.offset(g)..tree.offset(g) + width];
            let mut ids: Vec<usize> = (0..width).collect();
            ids.sort_by(|&a, &b| slice[b].total_cmp(&slice[a]).then(a.cmp(&b)));
            ids.truncate(k.min(width));
            ids
        })
        .collect())
}

/// Root-to-leaf path with the largest summed score; ties go to the smaller leaf.
pub fn decode_consistent_path(fused: &[f64], tree: &HierarchyTree) -> Result<LabelVector> {
    if fused.len() != tree.total_regions() {
        return Err(Error::Dimension {
            op: "decode_consistent_path",
            left: (1, fused.len()),
            right: (1, tree.total_regions()),
        });
    }
    // Best path score ending at each region, top-down.
    let mut acc = fused.to_vec();
    for gid in 0..tree.total_regions() {
        if let Some(p) = tree.parent(gid) {
            acc[gid] += acc[p];
        }
    }
    let leaf_level = tree.granularity_count() - 1;
    let off = tree.offset(leaf_level);
    let mut best = 0;
    for leaf in 1..tree.leaf_count() {
        if acc[off + leaf] > acc[off + best] {
            best = leaf;
        }
    }
    Ok(LabelVector {
        per_granularity: tree.path(best),
    })
}

/// Training-set fallback for targets without landmarks: train-set
/// frequency per region plus one on the modal path, so the modal path wins
/// every granularity and the rest are ranked by frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalPath {
    pub path: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ModalPath {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a LabelVector>, tree: &HierarchyTree) -> Result<Self> {
        let mut leaf_counts = vec![0usize; tree.leaf_count()];
        let mut region_counts = vec![0usize; tree.total_regions()];
        let mut n = 0usize;
        for lv in labels {
            leaf_counts[lv.leaf()] += 1;
            for id in lv.global_ids(tree) {
                region_counts[id] += 1;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Training("no labelled training hosts for the fallback path".into()));
        }
        let leaf = (0..leaf_counts.len()).fold(0, |best, l| if leaf_counts[l] > leaf_counts[best] { l } else { best });
        let path = tree.path(leaf);
        let mut scores: Vec<f64> = region_counts.iter().map(|&c| c as f64 / n as f64).collect();
        for (g, &r) in path.iter().enumerate() {
            scores[tree.global_id(g, r)] += 1.0;
        }
        Ok(ModalPath { path, scores })
    }
}

/// Model parameters plus everything needed to reproduce predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct HmcGeo {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub scaler: Option<Scaler>,
    pub fallback: Option<ModalPath>,
    pub precision: Precision,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    granularity_sizes: Vec<usize>,
    scaler: Option<Scaler>,
    fallback: Option<ModalPath>,
    precision: Precision,
    #[serde(default)]
    extra: serde_json::Value,
}

impl HmcGeo {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.param_specs(), seed);
        Ok(HmcGeo {
            config,
            params,
            scaler: None,
            fallback: None,
            precision: Precision::F64,
        })
    }

    fn label_matrix(&self, head: usize, labels: &[&LabelVector]) -> Result<Tensor2> {
        let width = self.config.head_width(head);
        let mut t = Tensor2::zeros(labels.len(), width);
        let sizes = &self.config.granularity_sizes;
        for (row, lv) in labels.iter().enumerate() {
            if lv.per_granularity.len() != sizes.len() {
                return Err(Error::Label(format!("label {:?} has the wrong number of granularities", lv.per_granularity)));
            }
            if head < sizes.len() {
                let id = lv.per_granularity[head];
                if id >= width {
                    return Err(Error::Label(format!("region {id} out of range at granularity {}", head + 1)));
                }
                t.set(row, id, 1.0);
            } else {
                let mut off = 0;
                for (g, &id) in lv.per_granularity.iter().enumerate() {
                    if id >= sizes[g] {
                        return Err(Error::Label(format!("region {id} out of range at granularity {}", g + 1)));
                    }
                    t.set(row, off + id, 1.0);
                    off += sizes[g];
                }
            }
        }
        Ok(t)
    }

    /// Records a full forward pass for one cluster on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &ClusterBatch<'_>) -> Result<ForwardVars> {
        let cfg = &self.config;
        if batch.features.cols != cfg.input_dim {
            return Err(Error::Dimension {
                op: "feature_stack",
                left: batch.features.shape(),
                right: (cfg.input_dim, cfg.hidden),
            });
        }
        if batch.landmarks.is_empty() {
            return Err(Error::State("attention needs at least one landmark".into()));
        }
        if batch.landmark_labels.len() != batch.landmarks.len() {
            return Err(Error::Dimension {
                op: "landmark labels",
                left: (batch.landmarks.len(), 1),
                right: (batch.landmark_labels.len(), 1),
            });
        }
        let x = tape.constant(batch.features.clone())?;
        let hidden = feature_stack(tape, &self.params, x, cfg.granularities() + 1)?;
        let mut outputs = Vec::with_capacity(hidden.len());
        let mut attention = Vec::with_capacity(hidden.len());
        for (k, &h) in hidden.iter().enumerate() {
            let ht = tape.gather_rows(h, batch.targets)?;
            let hl = tape.gather_rows(h, batch.landmarks)?;
            let labels = tape.constant(self.label_matrix(k, batch.landmark_labels)?)?;
            let (scores, weights) = attention_head(tape, &self.params, k, ht, hl, labels, batch.exclude)?;
            outputs.push(scores);
            attention.push(weights);
        }
        let global = outputs.pop().unwrap();
        let local_concat = tape.concat_cols(&outputs)?;
        let a = tape.scale(local_concat, cfg.alpha)?;
        let b = tape.scale(global, 1.0 - cfg.alpha)?;
        let fused = tape.add(a, b)?;
        Ok(ForwardVars {
            hidden,
            attention,
            locals: outputs,
            local_concat,
            global,
            fused,
        })
    }

    pub fn bundles(&self, tape: &Tape, vars: &ForwardVars) -> Vec<PredictionBundle> {
        let n = tape.value(vars.fused).rows;
        (0..n)
            .map(|r| PredictionBundle {
                locals: vars.locals.iter().map(|&v| tape.value(v).row(r).to_vec()).collect(),
                global_scores: tape.value(vars.global).row(r).to_vec(),
                fused: tape.value(vars.fused).row(r).to_vec(),
            })
            .collect()
    }

    /// Predictions for `targets` given the cluster's labelled `landmarks`
    /// (indices into `features` rows). A target whose only landmark is
    /// itself, or a cluster without landmarks, yields `None`.
    pub fn predict_cluster(
        &self,
        features: &Tensor2,
        landmarks: &[usize],
        landmark_labels: &[&LabelVector],
        targets: &[usize],
    ) -> Result<Vec<Option<PredictionBundle>>> {
        let mut out = vec![None; targets.len()];
        let usable: Vec<usize> = (0..targets.len())
            .filter(|&t| landmarks.iter().any(|&l| l != targets[t]))
            .collect();
        if usable.is_empty() {
            return Ok(out);
        }
        let rows: Vec<usize> = usable.iter().map(|&t| targets[t]).collect();
        let exclude: Vec<bool> = rows
            .iter()
            .flat_map(|&t| landmarks.iter().map(move |&l| l == t))
            .collect();
        let any_excluded = exclude.iter().any(|&e| e);
        let mut tape = Tape::with_precision(self.precision);
        let vars = self.forward(
            &mut tape,
            &ClusterBatch {
                features,
                landmarks,
                landmark_labels,
                targets: &rows,
                exclude: any_excluded.then_some(exclude.as_slice()),
            },
        )?;
        for (bundle, &t) in self.bundles(&tape, &vars).into_iter().zip(&usable) {
            out[t] = Some(bundle);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = Metadata {
            model: self.config.clone(),
            granularity_sizes: self.config.granularity_sizes.clone(),
            scaler: self.scaler.clone(),
            fallback: self.fallback.clone(),
            precision: self.precision,
            extra,
        };
        Ok(self.params.to_checkpoint(serde_json::to_value(meta)?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Metadata = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Schema(format!("checkpoint metadata: {e}")))?;
        meta.model.validate()?;
        let params = ParamStore::from_checkpoint(ck)?;
        for spec in meta.model.param_specs() {
            let id = params.id(&spec.name).map_err(|_| Error::Schema(format!("checkpoint lacks `{}`", spec.name)))?;
            if params.value(id).shape() != (spec.rows, spec.cols) {
                return Err(Error::Schema(format!(
                    "checkpoint parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    params.value(id).shape(),
                    (spec.rows, spec.cols)
                )));
            }
        }
        Ok(HmcGeo {
            config: meta.model,
            params,
            scaler: meta.scaler,
            fallback: meta.fallback,
            precision: meta.precision,
        })
    }

    /// Errors unless the model was built for `tree`'s granularity sizes.
    pub fn check_tree(&self, tree: &HierarchyTree) -> Result<()> {
        if self.config.granularity_sizes != tree.sizes() {
            return Err(Error::Schema(format!(
                "checkpoint was trained for granularity sizes {:?} but the hierarchy has {:?}",
                self.config.granularity_sizes,
                tree.sizes()
            )));
        }
        Ok(())
    }
}
