//! Central finite-difference oracle.

/// Per-coordinate comparison of an analytic derivative against a central
/// difference.
#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub finite_difference: f64,
    pub analytic: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_err: f64,
    /// Set when any difference or analytic value was not finite.
    pub non_finite: bool,
}

/// Relative error with a denominator floor so that derivatives that are
/// exactly zero do not blow up the ratio.
pub fn relative_error(analytic: f64, reference: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(reference.abs()).max(floor);
    (analytic - reference).abs() / denom
}

/// Central differences of `f` at `x0` along every coordinate, compared with
/// `analytic`. `floor` bounds the relative-error denominator from below.
pub fn finite_diff_check<F>(f: F, x0: &[f64], h: f64, analytic: &[f64], floor: f64) -> FdReport
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut entries = Vec::with_capacity(x0.len());
    let mut non_finite = false;
    let mut max_rel_err: f64 = 0.0;
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        if !fd.is_finite() || !a.is_finite() {
            non_finite = true;
        }
        let rel = relative_error(a, fd, floor);
        max_rel_err = if rel.is_nan() { f64::INFINITY } else { max_rel_err.max(rel) };
        entries.push(FdEntry {
            finite_difference: fd,
            analytic: a,
            abs_err: (a - fd).abs(),
            rel_err: rel,
        });
    }
    FdReport {
        entries,
        max_rel_err,
        non_finite,
    }
}

/// Second derivative along one coordinate by nested central differences.
pub fn second_difference<F>(f: F, x0: &[f64], k: usize, h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = x0.to_vec();
    let f0 = f(&x);
    x[k] = x0[k] + h;
    let fp = f(&x);
    x[k] = x0[k] - h;
    let fm = f(&x);
    (fp - 2.0 * f0 + fm) / (h * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let r = finite_diff_check(|x| x[0] * x[0], &[1.0], 1e-5, &[2.0], 1e-12);
        assert!(r.max_rel_err < 1e-8);
        assert!(!r.non_finite);
    }

    #[test]
    fn flags_infinities() {
        let r = finite_diff_check(|x| 1.0 / x[0], &[0.0], 1e-5, &[f64::INFINITY], 1e-12);
        assert!(r.non_finite);
    }
}
