use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{predict_hosts, train, TrainConfig};
use crate::error::{Error, Result};
use crate::hosts::{Dataset, Split};
use crate::model::{predict_topk, HmcGeo};
use crate::regions::HierarchyTree;

/// Copy of `dataset` with `fraction` of the labelled train hosts moved to a
/// held-out split. Returns the copy and the held-out host indices (sorted).
pub fn carve_validation(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} must lie in (0, 1)")));
    }
    let mut pool: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.hosts[i].split == Split::Train && dataset.hosts[i].labels.is_some())
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (fraction * pool.len() as f64).floor() as usize;
    if n_val == 0 {
        return Err(Error::Config("too few training hosts to carve a validation split".into()));
    }
    let mut val = pool[..n_val].to_vec();
    val.sort_unstable();
    let mut carved = dataset.clone();
    for &i in &val {
        carved.hosts[i].split = Split::Test;
    }
    Ok((carved, val))
}

/// Top-1 accuracy per granularity on `hosts`; unlabelled hosts count as misses.
pub fn validation_accuracy(model: &HmcGeo, dataset: &Dataset, tree: &HierarchyTree, hosts: &[usize]) -> Result<Vec<f64>> {
    let preds = predict_hosts(model, dataset, tree, hosts)?;
    let mut correct = vec![0usize; tree.granularity_count()];
    for p in &preds {
        let Some(truth) = &dataset.hosts[p.host].labels else { continue };
        for (g, top) in predict_topk(&p.scores, tree, 1)?.iter().enumerate() {
            correct[g] += usize::from(top[0] == truth.per_granularity[g]);
        }
    }
    let n = hosts.len().max(1) as f64;
    Ok(correct.into_iter().map(|c| c as f64 / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub hidden: Vec<usize>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    /// Maximum number of configurations trained, in grid order.
    pub budget: Option<usize>,
    pub validation_fraction: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lr: super::LR_GRID.to_vec(),
            hidden: super::HIDDEN_GRID.to_vec(),
            alpha: Vec::new(),
            beta: Vec::new(),
            lambda: Vec::new(),
            budget: None,
            validation_fraction: 0.1,
        }
    }
}

impl GridSpec {
    /// Configurations in deterministic order; empty axes keep the base value.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for &lr in &axis(&self.lr, base.lr) {
            for &hidden in &axis(&self.hidden, base.hidden) {
                for &alpha in &axis(&self.alpha, base.alpha) {
                    for &beta in &axis(&self.beta, base.beta) {
                        for lambda in axis(&self.lambda, base.lambda.clone()) {
                            out.push(TrainConfig {
                                lr,
                                hidden,
                                alpha,
                                beta,
                                lambda,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        if let Some(b) = self.budget {
            out.truncate(b);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConfig {
    pub config: TrainConfig,
    pub val_accuracy: Vec<f64>,
}

/// Orders by finest-granularity accuracy, then each coarser granularity,
/// then lower learning rate; remaining ties keep grid order.
pub fn rank(results: &mut [RankedConfig]) {
    results.sort_by(|a, b| {
        let by_acc = a
            .val_accuracy
            .iter()
            .rev()
            .zip(b.val_accuracy.iter().rev())
            .map(|(x, y)| y.total_cmp(x))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal);
        by_acc.then(a.config.lr.total_cmp(&b.config.lr))
    });
}

pub fn grid_search(dataset: &Dataset, tree: &HierarchyTree, base: &TrainConfig, grid: &GridSpec) -> Result<Vec<RankedConfig>> {
    let configs = grid.configs(base);
    if configs.is_empty() || grid.budget == Some(0) {
        return Err(Error::Config("grid search has no configurations to evaluate".into()));
    }
    let (carved, val) = carve_validation(dataset, grid.validation_fraction, base.seed)?;
    let mut results = Vec::with_capacity(configs.len());
    for cfg in configs {
        let out = train(&carved, tree, &cfg)?;
        let acc = validation_accuracy(&out.model, &carved, tree, &val)?;
        log::info!("grid lr={} hidden={} alpha={} beta={}: {:?}", cfg.lr, cfg.hidden, cfg.alpha, cfg.beta, acc);
        results.push(RankedConfig {
            config: cfg,
            val_accuracy: acc,
        });
    }
    rank(&mut results);
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub val_accuracy: Vec<f64>,
    pub final_loss: f64,
}

/// Trains once per value of `param` on a shared validation carve.
pub fn sweep(
    dataset: &Dataset,
    tree: &HierarchyTree,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    validation_fraction: f64,
) -> Result<Vec<SweepRow>> {
    let (carved, val) = carve_validation(dataset, validation_fraction, base.seed)?;
    values
        .iter()
        .map(|&v| {
            let cfg = match param {
                SweepParam::Alpha => TrainConfig { alpha: v, ..base.clone() },
                SweepParam::Beta => TrainConfig { beta: v, ..base.clone() },
            };
            let out = train(&carved, tree, &cfg)?;
            Ok(SweepRow {
                value: v,
                val_accuracy: validation_accuracy(&out.model, &carved, tree, &val)?,
                final_loss: out.history.last().map_or(f64::NAN, |r| r.loss),
            })
        })
        .collect()
}

/// True when `ys` is non-decreasing up to its maximum and non-increasing
/// after it, each step allowed to go the wrong way by at most `tol`.
pub fn is_unimodal(ys: &[f64], tol: f64) -> bool {
    let Some(peak) = (0..ys.len()).reduce(|best, i| if ys[i] > ys[best] { i } else { best }) else {
        return true;
    };
    ys[..=peak].windows(2).all(|w| w[1] >= w[0] - tol) && ys[peak..].windows(2).all(|w| w[1] <= w[0] + tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn unimodality() {
        assert!(is_unimodal(&[0.1, 0.3, 0.3, 0.5, 0.4, 0.2], 0.0));
        assert!(is_unimodal(&[1.0, 1.0, 1.0], 0.0));
        assert!(!is_unimodal(&[0.5, 0.1, 0.5, 0.1], 0.0));
        assert!(is_unimodal(&[0.1, 0.3, 0.29, 0.5, 0.2], 0.02));
        assert!(is_unimodal(&[], 0.0));
    }

    #[test]
    fn ranking_rules() {
        let mut rs = vec![
            RankedConfig { config: cfg(1e-2), val_accuracy: vec![0.9, 0.5, 0.2] },
            RankedConfig { config: cfg(2e-2), val_accuracy: vec![0.95, 0.6, 0.3] },
            RankedConfig { config: cfg(1e-3), val_accuracy: vec![0.9, 0.5, 0.2] },
            RankedConfig { config: cfg(1e-4), val_accuracy: vec![0.99, 0.4, 0.2] },
        ];
        rank(&mut rs);
        let lrs: Vec<f64> = rs.iter().map(|r| r.config.lr).collect();
        assert_eq!(lrs, vec![2e-2, 1e-3, 1e-2, 1e-4]);
    }

    #[test]
    fn grid_order_and_budget() {
        let g = GridSpec {
            lr: vec![1e-2, 1e-3],
            hidden: vec![16, 32],
            budget: Some(3),
            ..GridSpec::default()
        };
        let cs = g.configs(&TrainConfig::default());
        let pairs: Vec<(f64, usize)> = cs.iter().map(|c| (c.lr, c.hidden)).collect();
        assert_eq!(pairs, vec![(1e-2, 16), (1e-2, 32), (1e-3, 16)]);
    }
}
