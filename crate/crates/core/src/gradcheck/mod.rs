//! Central finite-difference checking of hand-written gradients.
//!
//! Checks run on `f64` copies of the parameters; callers supply a closure that
//! evaluates the scalar objective at a perturbed parameter vector.

pub mod suite;

/// Settings for a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            rel_tol: 1e-2,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinates that only agreed after shrinking the step, i.e. ones whose
    /// original stencil straddled a ReLU kink.
    pub refined: usize,
    pub failures: Vec<Mismatch>,
}

impl GradReport {
    /// No mismatches, and at most one coordinate in eight needed a smaller step.
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.refined * 8 <= self.checked.max(1)
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.refined += other.refined;
        self.failures.extend(other.failures);
    }
}

impl GradCheck {
    pub fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs()).max(self.abs_floor);
        (analytic - numeric).abs() / denom
    }

    fn central(&self, f: &mut impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x);
        x[i] = orig - h;
        let minus = f(x);
        x[i] = orig;
        (plus - minus) / (2.0 * h)
    }

    /// Compares `analytic[i]` with the central difference of `f` at `x` for
    /// every `i` in `indices`.
    pub fn run(
        &self,
        mut f: impl FnMut(&[f64]) -> f64,
        x: &[f64],
        analytic: &[f64],
        indices: &[usize],
    ) -> GradReport {
        assert_eq!(x.len(), analytic.len());
        let mut x = x.to_vec();
        let mut report = GradReport::default();
        for &i in indices {
            let a = analytic[i];
            let n = self.central(&mut f, &mut x, i, self.step);
            let mut err = self.rel_err(a, n);
            let mut refined = false;
            if err >= self.rel_tol {
                for shrink in [1e-1, 1e-2] {
                    let n2 = self.central(&mut f, &mut x, i, self.step * shrink);
                    let e2 = self.rel_err(a, n2);
                    if e2 < self.rel_tol {
                        err = e2;
                        refined = true;
                        break;
                    }
                }
            }
            report.checked += 1;
            if refined {
                report.refined += 1;
            }
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= self.rel_tol {
                report.failures.push(Mismatch {
                    index: i,
                    analytic: a,
                    numeric: n,
                    rel_err: err,
                });
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_passes() {
        let f = |x: &[f64]| x[0].sin() * x[1] + x[1].powi(3);
        let x = [0.3f64, -1.2];
        let g = [x[0].cos() * x[1], x[0].sin() + 3.0 * x[1] * x[1]];
        let r = GradCheck::default().run(f, &x, &g, &[0, 1]);
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.refined, 0);
    }

    #[test]
    fn wrong_gradient_fails() {
        let f = |x: &[f64]| x[0] * x[0];
        let r = GradCheck::default().run(f, &[1.0], &[3.0], &[0]);
        assert_eq!(r.failures.len(), 1);
        assert!(!r.passed());
    }

    #[test]
    fn kink_inside_stencil_is_refined() {
        let f = |x: &[f64]| x[0].max(0.0);
        let r = GradCheck::default().run(f, &[2e-4], &[1.0], &[0]);
        assert!(r.failures.is_empty());
        assert_eq!(r.refined, 1);
    }
}
