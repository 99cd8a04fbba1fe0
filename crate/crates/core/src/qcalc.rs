//! q-Pochhammer symbols, q-factorials and the q-exponential family.

use crate::error::{domain, Error, Result};
use crate::{Complex64, Estimate};

/// Asymmetry parameter plus truncation budgets for every q-series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QContext {
    pub tau: f64,
    pub poch_tol: f64,
    pub series_tol: f64,
    pub m_cap: usize,
}

impl QContext {
    pub fn new(tau: f64) -> Result<Self> {
        Self::with_tolerances(tau, 1e-16, 1e-15, 64)
    }

    pub fn with_tolerances(tau: f64, poch_tol: f64, series_tol: f64, m_cap: usize) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return domain(format!("tau must lie in (0,1), got {tau}"));
        }
        for (name, v) in [("poch_tol", poch_tol), ("series_tol", series_tol)] {
            if !(v > 0.0 && v <= 1e-3) {
                return domain(format!("{name} must lie in (0, 1e-3], got {v}"));
            }
        }
        if m_cap == 0 {
            return domain("m_cap must be positive");
        }
        Ok(Self { tau, poch_tol, series_tol, m_cap })
    }

    /// tau = p / (1 - p) for a right jump rate p in [0, 1/2).
    pub fn from_p(p: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&p) {
            return domain(format!("p must lie in [0, 1/2), got {p}"));
        }
        Self::new(p / (1.0 - p))
    }
}

/// Length of a Pochhammer product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PochLen {
    Finite(usize),
    Infinite,
}

/// (a;q)_n, with the infinite case truncated from the explicit tail bound.
pub fn qpoch(a: Complex64, q: Complex64, n: PochLen, ctx: &QContext) -> Result<Estimate> {
    match n {
        PochLen::Finite(n) => {
            let mut acc = Complex64::new(1.0, 0.0);
            let mut qk = Complex64::new(1.0, 0.0);
            for _ in 0..n {
                acc *= Complex64::new(1.0, 0.0) - a * qk;
                qk *= q;
            }
            Ok(Estimate::new(acc, 0.0))
        }
        PochLen::Infinite => {
            let qa = q.norm();
            if qa >= 1.0 {
                return domain(format!("infinite Pochhammer needs |q| < 1, got {qa}"));
            }
            let (v, bound) = qpoch_inf_bound(a, q, ctx.poch_tol);
            // |log tail| <= bound, so |tail - 1| <= e^bound - 1
            Ok(Estimate::new(v, v.norm() * bound.exp_m1()))
        }
    }
}

fn qpoch_inf_bound(a: Complex64, q: Complex64, tol: f64) -> (Complex64, f64) {
    let qa = q.norm();
    let an = a.norm();
    let mut acc = Complex64::new(1.0, 0.0);
    let mut qk = Complex64::new(1.0, 0.0);
    let mut mag = an;
    loop {
        let bound = mag / (1.0 - qa);
        if bound < tol || an == 0.0 {
            return (acc, bound);
        }
        acc *= Complex64::new(1.0, 0.0) - a * qk;
        qk *= q;
        mag *= qa;
    }
}

/// (a;q)_inf for real 0 < q < 1, truncated at machine precision.
pub fn qpoch_inf(a: Complex64, q: f64) -> Complex64 {
    qpoch_inf_bound(a, Complex64::new(q, 0.0), 1e-17).0
}

/// [k]_q = (1 - q^k) / (1 - q).
pub fn qint(k: usize, q: f64) -> f64 {
    (1.0 - q.powi(k as i32)) / (1.0 - q)
}

/// n_q! = [1]_q [2]_q ... [n]_q.
pub fn qfactorial(n: usize, q: f64) -> f64 {
    (1..=n).map(|k| qint(k, q)).product()
}

/// q^{-n(n-1)/4} n_q!, invariant under q -> 1/q. Valid for any q > 0, q != 1.
pub fn sym_qfactorial(n: usize, q: f64) -> f64 {
    let mut acc = 1.0;
    for k in 1..=n {
        // q^{-(k-1)/2} [k]_q, written symmetrically
        let h = 0.5 * k as f64;
        acc *= (q.powf(-h) - q.powf(h)) / (q.powf(-0.5) - q.powf(0.5));
    }
    acc
}

/// Generalized q-exponential sum_k xi^{k(k-1)} x^k / k_q!.
///
/// xi = 1, q^{1/2}, q^{1/4} give e_q, E_q and the symmetric exp_q.
pub fn qexp(x: Complex64, q: f64, xi: Complex64, ctx: &QContext) -> Result<Estimate> {
    if !(q > 0.0 && q < 1.0) {
        return domain(format!("q must lie in (0,1), got {q}"));
    }
    let xin = xi.norm();
    let xn = x.norm();
    if xin > 1.0 + 1e-15 {
        return domain(format!("|xi| must be at most 1, got {xin}"));
    }
    let on_circle = (xin - 1.0).abs() <= 1e-15;
    let entire = (xi - Complex64::new(q.sqrt(), 0.0)).norm() < 1e-15
        || (xi - Complex64::new(q.powf(0.25), 0.0)).norm() < 1e-15;
    if on_circle && !entire && xn >= 1.0 {
        return domain(format!("|x| must be below 1 when |xi| = 1, got {xn}"));
    }
    // Term ratio |t_{k+1}/t_k| = |xi|^{2k} |x| / [k+1]_q, nonincreasing in k.
    let mut sum = Complex64::new(1.0, 0.0);
    let mut term = Complex64::new(1.0, 0.0);
    let xi2 = xi * xi;
    let mut xi2k = Complex64::new(1.0, 0.0);
    for k in 0..ctx.m_cap {
        term = term * xi2k * x / qint(k + 1, q);
        xi2k *= xi2;
        sum += term;
        let ratio_after = xi2k.norm() * xn / qint(k + 2, q);
        if ratio_after < 1.0 {
            let tail = term.norm() * ratio_after / (1.0 - ratio_after);
            if tail < ctx.series_tol * (1.0 + sum.norm()) {
                return Ok(Estimate::new(sum, tail));
            }
        }
    }
    Err(Error::Truncation(format!(
        "q-exponential did not converge within m_cap = {} terms",
        ctx.m_cap
    )))
}

/// Symmetric q-exponential exp_q(x) = sum q^{k(k-1)/4} x^k / k_q!.
pub fn exp_sym(x: Complex64, ctx: &QContext) -> Result<Estimate> {
    qexp(x, ctx.tau, Complex64::new(ctx.tau.powf(0.25), 0.0), ctx)
}

/// sum_k x^k / sym_qfactorial(k, 1/q) over k < terms: the symmetric q-exponential
/// written with q replaced by 1/q. Equals exp_sym at q when the series has converged.
pub fn exp_sym_inverted(x: Complex64, q: f64, terms: usize) -> Complex64 {
    let qi = 1.0 / q;
    let mut sum = Complex64::new(0.0, 0.0);
    let mut pw = Complex64::new(1.0, 0.0);
    let mut fac = 1.0;
    for k in 0..terms {
        if k > 0 {
            let h = 0.5 * k as f64;
            fac *= (qi.powf(-h) - qi.powf(h)) / (qi.powf(-0.5) - qi.powf(0.5));
            pw *= x;
        }
        sum += pw / fac;
    }
    sum
}

/// Residual of the q-difference equation (f(q^{1/2} z) - f(q^{-1/2} z)) / ((q^{1/2} - q^{-1/2}) z) = f(z)
/// for f = exp_sym, relative to |f(z)|.
pub fn exp_sym_qdiff_residual(z: Complex64, ctx: &QContext) -> Result<f64> {
    let h = ctx.tau.sqrt();
    let f = exp_sym(z, ctx)?.value;
    let lhs = (exp_sym(z * h, ctx)?.value - exp_sym(z / h, ctx)?.value) / ((h - 1.0 / h) * z);
    Ok((lhs - f).norm() / f.norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn pochhammer_small_cases() {
        let ctx = QContext::new(0.5).unwrap();
        let v0 = qpoch(c(0.7), c(0.5), PochLen::Finite(0), &ctx).unwrap();
        assert_eq!(v0.value, c(1.0));
        let v1 = qpoch(c(0.7), c(0.5), PochLen::Finite(1), &ctx).unwrap();
        assert!((v1.value - c(0.3)).norm() < 1e-15);
    }

    #[test]
    fn infinite_pochhammer_matches_long_product() {
        let ctx = QContext::new(0.5).unwrap();
        let inf = qpoch(c(0.5), c(0.5), PochLen::Infinite, &ctx).unwrap();
        let long = qpoch(c(0.5), c(0.5), PochLen::Finite(200), &ctx).unwrap();
        assert!((inf.value - long.value).norm() < 1e-14);
        assert!(inf.err < 1e-14);
    }

    #[test]
    fn infinite_pochhammer_rejects_unit_q() {
        let ctx = QContext::new(0.5).unwrap();
        assert!(qpoch(c(0.5), c(1.0), PochLen::Infinite, &ctx).is_err());
    }

    #[test]
    fn pochhammer_recurrence() {
        let ctx = QContext::new(0.5).unwrap();
        let a = Complex64::new(0.3, -0.8);
        let q = Complex64::new(0.6, 0.2);
        let mut qn = c(1.0);
        for n in 0..30 {
            let lhs = qpoch(a, q, PochLen::Finite(n + 1), &ctx).unwrap().value;
            let rhs = qpoch(a, q, PochLen::Finite(n), &ctx).unwrap().value * (c(1.0) - a * qn);
            assert!((lhs - rhs).norm() <= 1e-15 * (1.0 + lhs.norm()));
            qn *= q;
        }
    }

    #[test]
    fn qfactorial_values() {
        assert_eq!(qfactorial(0, 0.5), 1.0);
        assert_eq!(qfactorial(1, 0.3), 1.0);
        assert!((qfactorial(3, 0.5) - 2.625).abs() < 1e-15);
        for n in 0..15 {
            let ctx = QContext::new(0.4).unwrap();
            let poch = qpoch(c(0.4), c(0.4), PochLen::Finite(n), &ctx).unwrap().value.re;
            let alt = poch / 0.6f64.powi(n as i32);
            assert!((qfactorial(n, 0.4) - alt).abs() < 1e-13 * alt);
        }
    }

    #[test]
    fn qexp_at_zero() {
        let ctx = QContext::new(0.5).unwrap();
        for xi in [c(1.0), c(0.5f64.sqrt()), c(0.3)] {
            assert_eq!(qexp(c(0.0), 0.5, xi, &ctx).unwrap().value, c(1.0));
        }
    }

    #[test]
    fn small_eq_is_reciprocal_pochhammer() {
        let ctx = QContext::new(0.5).unwrap();
        let e = qexp(c(0.3), 0.5, c(1.0), &ctx).unwrap().value;
        let p = qpoch_inf(c(0.5 * 0.3), 0.5);
        assert!((e - 1.0 / p).norm() < 1e-10);
    }

    #[test]
    fn unit_xi_requires_small_x() {
        let ctx = QContext::new(0.5).unwrap();
        assert!(qexp(c(1.5), 0.5, c(1.0), &ctx).is_err());
        assert!(qexp(c(1.5), 0.5, Complex64::new(0.0, 1.0), &ctx).is_err());
        assert!(qexp(c(-5.0), 0.5, c(0.5f64.sqrt()), &ctx).is_ok());
    }

    #[test]
    fn symmetric_factorial_is_inversion_invariant() {
        for q in [0.3, 0.5, 0.8] {
            for n in 0..20 {
                let a = sym_qfactorial(n, q);
                let b = sym_qfactorial(n, 1.0 / q);
                assert!((a - b).abs() < 1e-12 * a.abs());
                let direct = q.powf(-((n * n.saturating_sub(1)) as f64) / 4.0) * qfactorial(n, q);
                assert!((a - direct).abs() < 1e-11 * a.abs());
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn symmetric_exponential_is_inversion_invariant(q in proptest::sample::select(vec![0.3, 0.5, 0.8]), x in -5.0f64..2.0) {
            let ctx = QContext::new(q).unwrap();
            let a = exp_sym(c(x), &ctx).unwrap().value;
            let b = exp_sym_inverted(c(x), q, 64);
            proptest::prop_assert!((a - b).norm() < 1e-10 * a.norm().max(1e-300), "{a} vs {b}");
        }

        #[test]
        fn symmetric_exponential_solves_q_difference(re in -3.0f64..3.0, im in -3.0f64..3.0) {
            proptest::prop_assume!(re.abs() + im.abs() > 0.05);
            let ctx = QContext::new(0.5).unwrap();
            let r = exp_sym_qdiff_residual(Complex64::new(re, im), &ctx).unwrap();
            proptest::prop_assert!(r < 1e-9, "residual {r}");
        }
    }
}
