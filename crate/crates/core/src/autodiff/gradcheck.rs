use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Per-parameter outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Elements where both gradients were below the dead-zone floor; these
    /// carry no signal (saturated exponentials and the like) and are not
    /// failures.
    pub near_zero_elements: usize,
    pub checked_elements: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub eps: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    /// Entries sorted worst-first.
    pub fn worst(&self) -> Vec<&GradCheckEntry> {
        let mut v: Vec<&GradCheckEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
        v
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "gradcheck eps={:.1e} tol={:.1e}: {}\n",
            self.eps,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        for e in self.worst().iter().take(8) {
            s.push_str(&format!(
                "  {}: max_rel={:.3e} at [{}] (analytic {:.6e}, numeric {:.6e}), near-zero {}/{}\n",
                e.name,
                e.max_rel_err,
                e.worst_index,
                e.analytic_at_worst,
                e.numeric_at_worst,
                e.near_zero_elements,
                e.checked_elements
            ));
        }
        s
    }
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences for every trainable parameter the loss builder binds.
///
/// `build` must be deterministic: it is re-invoked many times on perturbed
/// copies of the store, so any stochastic inputs (latent noise, batch
/// selection) have to be captured outside the closure.
pub fn finite_difference_check(
    store: &ParamStore,
    eps: f64,
    tolerance: f64,
    build: impl Fn(&ParamStore, &mut Tape) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let loss = build(store, &mut tape)?;
    tape.backward(loss)?;
    let analytic = tape.param_grads();
    drop(tape);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(s, &mut t)?;
        Ok(t.value(l).item())
    };

    // below this both gradients count as zero signal
    let dead_zone = 1e-9;
    // absolute measurement floor of central differences on f64: disagreement
    // below this is rounding noise in the difference quotient, not gradient
    // error
    let atol = 1e-8;

    let mut entries = Vec::new();
    let mut probe = store.clone();
    for (name, grad) in &analytic {
        let n = grad.data.len();
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            near_zero_elements: 0,
            checked_elements: n,
        };
        for i in 0..n {
            let orig = probe.get(name).unwrap().data[i];
            probe.get_mut(name).unwrap().data[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().data[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().data[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data[i];
            let denom = a.abs().max(numeric.abs());
            if denom < dead_zone {
                entry.near_zero_elements += 1;
                continue;
            }
            let diff = (a - numeric).abs();
            if diff < atol {
                continue;
            }
            let rel = diff / denom;
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic_at_worst = a;
                entry.numeric_at_worst = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries, tolerance, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{MlpSpec, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.4, -1.2, 0.9]));
        let report = finite_difference_check(&store, 1e-5, 1e-8, |s, tape| {
            let w = tape.param(s, "w");
            let x = tape.constant(Tensor::vector(vec![2.0, 0.5, -1.0]));
            let p = tape.mul(w, x);
            Ok(tape.sum_all(p))
        })
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn tanh_norm_squared_matches_finite_differences() {
        // loss = ||tanh(W x)||^2
        let mut store = ParamStore::new();
        let spec = MlpSpec::new("net", vec![4, 3]);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        spec.init_params(&mut store, &mut rng);
        // final layer is zero-initialized; randomize it so the loss is not flat
        for v in &mut store.get_mut("net/l0/w").unwrap().data {
            *v = super::super::mlp::gaussian(&mut rng) * 0.7;
        }
        let report = finite_difference_check(&store, 1e-5, 1e-4, |s, tape| {
            let x = tape.constant(Tensor::vector(vec![0.3, -0.8, 0.2, 1.1]));
            let y = spec.forward(tape, s, x, true)?;
            let t = tape.tanh(y);
            let sq = tape.square(t);
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn saturated_exponential_is_flagged_not_failed() {
        // loss = 1 - exp(-2|err|) evaluated at err = 20: gradient ~ 8.5e-18
        let mut store = ParamStore::new();
        store.insert("err", Tensor::scalar(20.0));
        let report = finite_difference_check(&store, 1e-5, 1e-4, |s, tape| {
            let e = tape.param(s, "err");
            let a = tape.abs(e);
            let neg = tape.affine(a, -2.0, 0.0);
            let ex = tape.exp(neg);
            let one_minus = tape.affine(ex, -1.0, 1.0);
            Ok(tape.sum_all(one_minus))
        })
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
        assert_eq!(report.entries[0].near_zero_elements, 1);
    }
}
