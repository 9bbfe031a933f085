//! Central finite-difference gradient verification.
//!
//! The checker re-evaluates a caller-supplied scalar function at perturbed
//! inputs and compares `(f(x+h) - f(x-h)) / 2h` against a reverse-mode
//! gradient. It never inspects the tape, so the two derivative routes stay
//! independent. All checks run in 64-bit with `h = 1e-5`.

use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        // both effectively zero: compare absolutely at the noise floor
        (analytic - numeric).abs() / 1e-7
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Probe `probes` random elements of one tensor. `eval` must recompute the
/// scalar loss from scratch for the supplied tensor value; `analytic` is the
/// reverse-mode gradient for the same tensor.
pub fn check_tensor(
    label: &str,
    base: &Tensor<f64>,
    analytic: &Tensor<f64>,
    probes: usize,
    step: f64,
    rng: &mut SeededRng,
    mut eval: impl FnMut(&Tensor<f64>) -> f64,
) -> GradCheckReport {
    assert_eq!(
        base.shape(),
        analytic.shape(),
        "gradient shape mismatch for {label}"
    );
    let n = base.numel();
    let mut report = GradCheckReport {
        probes: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        tolerance: DEFAULT_TOLERANCE,
    };
    let count = probes.min(n);
    // sample distinct indices when feasible
    let mut indices: Vec<usize> = if n <= probes {
        (0..n).collect()
    } else {
        let mut set = std::collections::BTreeSet::new();
        while set.len() < count {
            set.insert(rng.next_below(n as u64) as usize);
        }
        set.into_iter().collect()
    };
    indices.sort_unstable();

    for idx in indices {
        let mut plus = base.clone();
        plus.data_mut()[idx] += step;
        let mut minus = base.clone();
        minus.data_mut()[idx] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let a = analytic.data()[idx];
        let err = rel_err(a, numeric);
        report.probes += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{label}[{idx}]: analytic {a:.3e} vs fd {numeric:.3e}");
        }
    }
    report
}

/// Fold reports: keep the worst error.
pub fn merge_reports(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    let mut out = GradCheckReport {
        probes: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        tolerance: DEFAULT_TOLERANCE,
    };
    for r in reports {
        out.probes += r.probes;
        if r.max_rel_err > out.max_rel_err {
            out.max_rel_err = r.max_rel_err;
            out.worst = r.worst;
        }
    }
    out
}
