//! Hierarchical cross-entropy and the path-softmax classification loss.
//!
//! The probabilistic classification loss scores a configuration of active
//! regions by `exp(sum of active scores)` and only admits configurations
//! consistent with the hierarchy. With a strict region tree those are
//! exactly the root-to-leaf paths, one region per granularity, so the
//! normalizer is a sum over leaves:
//!
//! ```text
//! log Z = log Σ_leaf exp( Σ_{r ∈ path(leaf)} s[r] )
//! L_pc  = log Z − Σ_{r ∈ true path} s[r]
//! ```
//!
//! `log Z` is computed bottom-up in log space in O(M), and its gradient is
//! the probability that a path passes through each region. See
//! `docs/path-softmax.md` for the derivation and the brute-force check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor2, Var};
use crate::regions::{HierarchyTree, LabelVector};

/// Which score vector the cross-entropy term reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeSource {
    /// Slices of the fused vector (same scores as the path loss).
    #[default]
    Fused,
    /// Raw outputs of the per-granularity heads.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    /// Per-granularity cross-entropy weights, coarsest first.
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub ce_source: CeSource,
}

impl LossConfig {
    pub fn new(beta: f64, lambda: Vec<f64>) -> Self {
        LossConfig {
            beta,
            lambda,
            ce_source: CeSource::Fused,
        }
    }

    pub fn validate(&self, granularities: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.lambda.len() != granularities {
            return Err(Error::Config(format!(
                "{} lambda weights for {granularities} granularities",
                self.lambda.len()
            )));
        }
        if let Some(l) = self.lambda.iter().find(|&&l| !(l > 0.0)) {
            return Err(Error::Config(format!("lambda weight {l} must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub pc: f64,
    pub total: f64,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    // The max term contributes exactly 1; ln_1p keeps precision when the rest is tiny.
    let mut seen_max = false;
    let rest: f64 = xs
        .filter(|&x| {
            if x == max && !seen_max {
                seen_max = true;
                false
            } else {
                true
            }
        })
        .map(|x| (x - max).exp())
        .sum();
    max + rest.ln_1p()
}

fn slice<'a>(scores: &'a [f64], tree: &HierarchyTree, g: usize) -> &'a [f64] {
    let start = tree.offset(g);
    &scores[start..start + tree.sizes()[g]]
}

fn check_len(scores: &[f64], tree: &HierarchyTree) -> Result<()> {
    if scores.len() != tree.total_regions() {
        return Err(Error::Dimension {
            op: "loss scores",
            left: (1, scores.len()),
            right: (1, tree.total_regions()),
        });
    }
    Ok(())
}

/// `−log softmax(slice_g(scores))[true_id]`.
pub fn ce_slice(scores: &[f64], tree: &HierarchyTree, g: usize, true_id: usize) -> Result<f64> {
    check_len(scores, tree)?;
    let s = slice(scores, tree, g);
    if true_id >= s.len() {
        return Err(Error::Label(format!(
            "label {true_id} outside granularity {} with {} regions",
            g + 1,
            s.len()
        )));
    }
    // Shifting by the true score keeps the result exact when it is tiny.
    let t = s[true_id];
    Ok(log_sum_exp(s.iter().map(|&v| v - t)))
}

pub fn hierarchical_ce(scores: &[f64], labels: &LabelVector, lambda: &[f64], tree: &HierarchyTree) -> Result<f64> {
    let mut total = 0.0;
    for (g, (&id, &w)) in labels.per_granularity.iter().zip(lambda).enumerate() {
        total += w * ce_slice(scores, tree, g, id)?;
    }
    Ok(total)
}

/// Log-space subtree sums: `inside[r] = s[r] + logsumexp(inside[children])`,
/// `−∞` for a non-finest region without children.
fn inside_values(scores: &[f64], tree: &HierarchyTree) -> Vec<f64> {
    let m = tree.total_regions();
    let mut inside = vec![f64::NEG_INFINITY; m];
    let last = tree.granularity_count() - 1;
    for g in (0..=last).rev() {
        for r in 0..tree.sizes()[g] {
            let id = tree.global_id(g, r);
            inside[id] = if g == last {
                scores[id]
            } else {
                let kids = tree.children(id);
                let sub = log_sum_exp(kids.iter().map(|&c| inside[c]));
                if sub == f64::NEG_INFINITY {
                    sub
                } else {
                    scores[id] + sub
                }
            };
        }
    }
    inside
}

/// `log Z` over all root-to-leaf paths.
pub fn path_partition(scores: &[f64], tree: &HierarchyTree) -> Result<f64> {
    check_len(scores, tree)?;
    let inside = inside_values(scores, tree);
    Ok(log_sum_exp((0..tree.sizes()[0]).map(|r| inside[r])))
}

/// Probability under the path-softmax that the path passes through each
/// region; this is `∂ log Z / ∂ s`.
pub fn path_marginals(scores: &[f64], tree: &HierarchyTree) -> Result<Vec<f64>> {
    check_len(scores, tree)?;
    let inside = inside_values(scores, tree);
    let log_z = log_sum_exp((0..tree.sizes()[0]).map(|r| inside[r]));
    let m = tree.total_regions();
    let mut prefix = vec![0.0; m];
    let mut out = vec![0.0; m];
    for g in 0..tree.granularity_count() {
        for r in 0..tree.sizes()[g] {
            let id = tree.global_id(g, r);
            if let Some(p) = tree.parent(id) {
                prefix[id] = prefix[p] + scores[p];
            }
            if inside[id] > f64::NEG_INFINITY {
                out[id] = (prefix[id] + inside[id] - log_z).exp();
            }
        }
    }
    Ok(out)
}

fn path_score(scores: &[f64], labels: &LabelVector, tree: &HierarchyTree) -> Result<f64> {
    if !tree.is_path(&labels.per_granularity) {
        return Err(Error::Label(format!(
            "{:?} is not a root-to-leaf path",
            labels.per_granularity
        )));
    }
    Ok(labels.global_ids(tree).iter().map(|&i| scores[i]).sum())
}

/// Negative log path-softmax probability of the true path.
pub fn pc_loss(scores: &[f64], labels: &LabelVector, tree: &HierarchyTree) -> Result<f64> {
    check_len(scores, tree)?;
    let s = path_score(scores, labels, tree)?;
    Ok((path_partition(scores, tree)? - s).max(0.0))
}

pub fn composite_loss(scores: &[f64], labels: &LabelVector, tree: &HierarchyTree, cfg: &LossConfig) -> Result<f64> {
    Ok(composite_parts(scores, scores, labels, tree, cfg)?.total)
}

/// Loss parts with cross-entropy and path loss read from separate vectors.
pub fn composite_parts(
    ce_scores: &[f64],
    pc_scores: &[f64],
    labels: &LabelVector,
    tree: &HierarchyTree,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let ce = hierarchical_ce(ce_scores, labels, &cfg.lambda, tree)?;
    let pc = pc_loss(pc_scores, labels, tree)?;
    Ok(LossParts {
        ce,
        pc,
        total: cfg.beta * pc + (1.0 - cfg.beta) * ce,
    })
}

/// Loss parts and the gradients w.r.t. `ce_scores` and `pc_scores`.
pub fn composite_with_grad(
    ce_scores: &[f64],
    pc_scores: &[f64],
    labels: &LabelVector,
    tree: &HierarchyTree,
    cfg: &LossConfig,
) -> Result<(LossParts, Vec<f64>, Vec<f64>)> {
    let parts = composite_parts(ce_scores, pc_scores, labels, tree, cfg)?;
    let mut d_ce = vec![0.0; ce_scores.len()];
    for (g, &id) in labels.per_granularity.iter().enumerate() {
        let s = slice(ce_scores, tree, g);
        let lse = log_sum_exp(s.iter().copied());
        let w = (1.0 - cfg.beta) * cfg.lambda[g];
        let off = tree.offset(g);
        for (k, &v) in s.iter().enumerate() {
            let onehot = if k == id { 1.0 } else { 0.0 };
            d_ce[off + k] = w * ((v - lse).exp() - onehot);
        }
    }
    let mut d_pc = path_marginals(pc_scores, tree)?;
    for v in &mut d_pc {
        *v *= cfg.beta;
    }
    for id in labels.global_ids(tree) {
        d_pc[id] -= cfg.beta;
    }
    Ok((parts, d_ce, d_pc))
}

/// Mean composite loss over the rows of a cluster-batch, recorded on the
/// tape. Returns the scalar node and the mean of each loss part.
pub fn batch_loss(
    tape: &mut Tape,
    ce_scores: Var,
    pc_scores: Var,
    labels: &[LabelVector],
    tree: &HierarchyTree,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let (rows, cols) = tape.value(pc_scores).shape();
    if rows != labels.len() || tape.value(ce_scores).shape() != (rows, cols) {
        return Err(Error::Dimension {
            op: "batch_loss",
            left: tape.value(ce_scores).shape(),
            right: (labels.len(), cols),
        });
    }
    if rows == 0 {
        return Err(Error::State("batch_loss on an empty batch".into()));
    }
    let n = rows as f64;
    let mut g_ce = Tensor2::zeros(rows, cols);
    let mut g_pc = Tensor2::zeros(rows, cols);
    let mut mean = LossParts::default();
    for (r, lv) in labels.iter().enumerate() {
        let (parts, dce, dpc) = composite_with_grad(tape.value(ce_scores).row(r), tape.value(pc_scores).row(r), lv, tree, cfg)?;
        mean.ce += parts.ce / n;
        mean.pc += parts.pc / n;
        mean.total += parts.total / n;
        for (o, v) in g_ce.row_mut(r).iter_mut().zip(dce) {
            *o = v / n;
        }
        for (o, v) in g_pc.row_mut(r).iter_mut().zip(dpc) {
            *o = v / n;
        }
    }
    let node = tape.custom_scalar("composite_loss", mean.total, vec![(ce_scores, g_ce), (pc_scores, g_pc)])?;
    Ok((node, mean))
}
