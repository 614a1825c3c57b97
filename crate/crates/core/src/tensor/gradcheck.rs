//! Central-difference gradient checking in 64-bit precision.
//!
//! A check builds the function once with a gradient-tracking leaf, runs
//! backward, then perturbs one input coordinate at a time and compares the
//! analytic derivative to `(f(x+h) - f(x-h)) / 2h`. Non-scalar outputs are
//! reduced to a scalar through a fixed random projection so a single backward
//! covers every output coordinate.
//!
//! Coordinates where the two one-sided differences disagree strongly sit on a
//! non-smooth point of the function (kinks from `max`, clamps, guards); they
//! are reported as flagged rather than failed.

use rand::Rng;

use super::Tensor;
use crate::error::Result;
use crate::rng::derive_rng;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Check at most this many input coordinates (seeded sample); `None`
    /// checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { eps: 1e-5, tolerance: 1e-4, max_coords: None, seed: 0x5eed }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub coords_checked: usize,
    pub coords_flagged: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckCase {
    pub fn line(&self) -> String {
        format!(
            "{} {}: max_rel_err {:.2e} over {} coords ({} flagged, tol {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.coords_checked,
            self.coords_flagged,
            self.tolerance,
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.cases.iter().map(GradCheckCase::line).collect()
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Check the analytic gradient of `f` at `input` against central differences.
///
/// `f` may return a tensor of any shape; non-scalar outputs are contracted
/// with a fixed random matrix drawn from the settings seed.
pub fn check_fn<F>(
    name: &str,
    input: &[f64],
    rows: usize,
    cols: usize,
    settings: &GradCheckSettings,
    f: F,
) -> Result<GradCheckCase>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = Tensor::leaf(input.to_vec(), rows, cols)?;
    let out = f(&leaf)?;
    let (orows, ocols) = out.shape();

    let projection: Option<Tensor<f64>> = if out.len() == 1 {
        None
    } else {
        let mut rng = derive_rng(settings.seed, "gradcheck-projection", &[out.len() as u64]);
        let r: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Some(Tensor::constant(r, orows, ocols)?)
    };

    let objective = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
        let y = f(t)?;
        match &projection {
            None => Ok(y),
            Some(r) => Ok(y.mul(r)?.sum_all()),
        }
    };

    let root = objective(&leaf)?;
    let base = root.item();
    root.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; input.len()]);

    let n = input.len();
    let coords: Vec<usize> = match settings.max_coords {
        Some(k) if k < n => {
            let mut rng = derive_rng(settings.seed, "gradcheck-coords", &[n as u64]);
            let mut seen = std::collections::HashSet::with_capacity(k);
            while seen.len() < k {
                seen.insert(rng.random_range(0..n));
            }
            let mut v: Vec<usize> = seen.into_iter().collect();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };

    let mut probe = input.to_vec();
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::constant(v.to_vec(), rows, cols)?;
        Ok(objective(&t)?.item())
    };

    let mut max_rel = 0.0f64;
    let mut flagged = 0usize;
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + settings.eps;
        let fp = eval(&probe)?;
        probe[i] = orig - settings.eps;
        let fm = eval(&probe)?;
        probe[i] = orig;

        let central = (fp - fm) / (2.0 * settings.eps);
        let rel = rel_err(analytic[i], central);
        if rel > settings.tolerance {
            let fwd = (fp - base) / settings.eps;
            let bwd = (base - fm) / settings.eps;
            let disagreement = (fwd - bwd).abs() / fwd.abs().max(bwd.abs()).max(1e-8);
            if disagreement > 0.5 {
                flagged += 1;
                continue;
            }
        }
        max_rel = max_rel.max(rel);
    }

    Ok(GradCheckCase {
        name: name.to_string(),
        coords_checked: coords.len(),
        coords_flagged: flagged,
        max_rel_err: max_rel,
        tolerance: settings.tolerance,
        passed: max_rel <= settings.tolerance,
    })
}

/// Uniform values in `[-1, 1]` for test inputs, from a seeded stream.
pub fn random_input(seed: u64, tag: u64, len: usize) -> Vec<f64> {
    let mut rng = derive_rng(seed, "gradcheck-input", &[tag, len as u64]);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_gradient() {
        let settings = GradCheckSettings::default();
        let input = random_input(1, 0, 12);
        let case = check_fn("mul_self", &input, 3, 4, &settings, |x| {
            let y = x.mul(x)?;
            Ok(y.sum_all())
        })
        .unwrap();
        assert!(case.passed, "{}", case.line());
        assert_eq!(case.coords_checked, 12);
    }

    #[test]
    fn rejects_wrong_gradient() {
        // exp(x) forward with a deliberately broken derivative via detach:
        // s = sum(exp(detach(x)) * x) has analytic gradient exp(x0) under the
        // graph, but d/dx of the true function exp(x)*x differs. Easier: use
        // scale to build a mismatched function of the values.
        let settings = GradCheckSettings::default();
        let input = vec![0.4, -0.7, 1.1];
        // f(x) = sum(x ⊙ c) where c = detach(exp(x)): analytic gradient is c,
        // while the numeric derivative of the evaluated function is
        // exp(x)·(1 + x) at each coordinate. The check must notice.
        let case = check_fn("broken_on_purpose", &input, 1, 3, &settings, |x| {
            let c = x.exp().detach();
            Ok(x.mul(&c)?.sum_all())
        })
        .unwrap();
        assert!(!case.passed);
    }

    #[test]
    fn flags_nonsmooth_points_instead_of_failing() {
        // row_l2_normalize has a kink where the norm crosses the epsilon
        // guard. Place the input right at the guard boundary.
        let settings = GradCheckSettings { eps: 1e-5, ..Default::default() };
        let eps_guard = 1e-5 * 0.5;
        let input = vec![eps_guard * 0.9, 0.0];
        let case = check_fn("l2_guard_kink", &input, 1, 2, &settings, move |x| {
            Ok(x.row_l2_normalize(eps_guard).sum_all())
        })
        .unwrap();
        assert!(case.passed, "{}", case.line());
        assert!(case.coords_flagged > 0, "expected flagged coords: {}", case.line());
    }

    #[test]
    fn sampled_coordinate_subset() {
        let settings =
            GradCheckSettings { max_coords: Some(5), ..Default::default() };
        let input = random_input(2, 1, 40);
        let case = check_fn("sampled", &input, 5, 8, &settings, |x| {
            Ok(x.gelu().mean_all())
        })
        .unwrap();
        assert!(case.passed);
        assert_eq!(case.coords_checked, 5);
    }
}
