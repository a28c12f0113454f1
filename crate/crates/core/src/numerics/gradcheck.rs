use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor2, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter; `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    pub tol: f64,
    /// Largest relative error over coordinates whose derivative is at least
    /// `ROUNDOFF_MARGIN` times the central-difference round-off bound
    /// `eps * |loss| / h`. Smaller derivatives cannot be resolved by the
    /// difference quotient at this step size.
    pub max_rel_error_resolved: f64,
    pub unresolved: usize,
}

pub const ROUNDOFF_MARGIN: f64 = 1e4;

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    /// Pass judged only on coordinates above the round-off bound.
    pub fn passed_resolved(&self) -> bool {
        self.max_rel_error_resolved < self.tol
    }
}

/// Compares `analytic` (one tensor per parameter, store order) with central
/// differences of `loss`. Relative error is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn check_gradients<L>(
    store: &mut ParamStore,
    analytic: &[Tensor2],
    mut loss: L,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
        tol: opts.tol,
        max_rel_error_resolved: 0.0,
        unresolved: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let n = store.value(id).data.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.value(id).data[i];
            store.value_mut(id).data[i] = orig + opts.h;
            let plus = loss(store);
            store.value_mut(id).data[i] = orig - opts.h;
            let minus = loss(store);
            store.value_mut(id).data[i] = orig;
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grad.data[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient check of {}[{i}]", store.name(id))));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            let floor = f64::EPSILON * plus.abs().max(minus.abs()) / opts.h;
            if a.abs() + numeric.abs() >= ROUNDOFF_MARGIN * floor {
                report.max_rel_error_resolved = report.max_rel_error_resolved.max(rel);
            } else {
                report.unresolved += 1;
            }
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), i));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}

/// Gradient check of a scalar built by `forward` on a fresh 64-bit tape.
pub fn grad_check<F>(store: &mut ParamStore, mut forward: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = forward(&mut tape, store)?;
    tape.backward(out, store)?;
    let analytic: Vec<Tensor2> = store.ids().map(|id| store.grad(id).clone()).collect();
    check_gradients(
        store,
        &analytic,
        |s| {
            let mut t = Tape::new();
            let v = forward(&mut t, s)?;
            Ok(t.scalar(v))
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{init_params, ParamSpec, LEAKY_SLOPE};

    fn squared_norm(tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let w = tape.param_named(store, "w")?;
        let wt = tape.transpose(w)?;
        let sq = tape.matmul(w, wt)?; // 1x1 = sum w_i^2 for a row vector
        tape.sum_all(sq)
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = init_params(&[ParamSpec::weight("w", 1, 7)], 4);
        let r = grad_check(&mut store, squared_norm, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 7);
    }

    fn small_net(tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let x = tape.constant(Tensor2::from_rows(&[vec![0.3, -0.7, 1.1], vec![-0.2, 0.5, 0.9]])?)?;
        let w = tape.param_named(store, "w")?;
        let b = tape.param_named(store, "b")?;
        let h = tape.matmul(x, w)?;
        let h = tape.add_bias(h, b)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let ht = tape.transpose(h)?;
        let s = tape.matmul(h, ht)?;
        let s = tape.scale(s, 0.5)?;
        let p = tape.softmax_rows(s, Some(&[true, false, false, false]))?;
        let g = tape.gather_rows(p, &[1, 1, 0])?;
        let hg = tape.gather_rows(h, &[1, 1, 0])?;
        let c = tape.concat_cols(&[g, hg])?;
        let c = tape.add(c, c)?;
        let c = tape.leaky_relu(c, LEAKY_SLOPE)?;
        tape.sum_all(c)
    }

    #[test]
    fn composed_ops_match_finite_differences() {
        let mut store = init_params(&[ParamSpec::weight("w", 3, 4), ParamSpec::bias("b", 4)], 8);
        store.value_mut(store.id("b").unwrap()).data = vec![0.1, -0.2, 0.3, 0.05];
        let r = grad_check(&mut store, small_net, GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn broken_gradient_is_detected() {
        let mut store = init_params(&[ParamSpec::weight("w", 3, 4), ParamSpec::bias("b", 4)], 8);
        store.zero_grads();
        let mut tape = Tape::new();
        let out = small_net(&mut tape, &store).unwrap();
        tape.backward(out, &mut store).unwrap();
        let broken: Vec<Tensor2> = store.ids().map(|id| store.grad(id).scale(1.5)).collect();
        let r = check_gradients(
            &mut store,
            &broken,
            |s| {
                let mut t = Tape::new();
                let v = small_net(&mut t, s)?;
                Ok(t.scalar(v))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }
}
