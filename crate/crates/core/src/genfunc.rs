//! The exp_tau generating function G(zeta) = E[exp_tau(zeta tau^{h/2}; xi)] of flat ASEP.
//!
//! Two evaluations: the moment series, and the Fredholm Pfaffian pf[J - K~] whose
//! kernel K~ is available by two independent routes. The series route sums the
//! flat moment kernel over m with weight zeta'^m; the Laplace route integrates
//! the inverse Laplace transform psi-check of psi against the F-functions.
//!
//! zeta enters every kernel as zeta' = zeta tau^{-1/4} per unit of m. That is the
//! weight the moment identity leaves: zeta^M xi^{M(M-1)} / M_tau! times
//! E[tau^{Mh/2}] = M_tau! tau^{-M^2/4} (...) with xi = tau^{1/4}.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::flatmoments::{k11_terms, k12_terms, moment_flat_nu, t_eff, Model, NU_FLAT_MAX_M};
use crate::fredholm::{pf_j_minus, Block};
use crate::qcalc::{qfactorial, qpoch_inf};
use crate::quad::{circle_rule_radius, gl_interval, halfline_rule, vline_rule};
use crate::{Complex64 as C, Estimate};

fn c(re: f64) -> C {
    C::new(re, 0.0)
}

/// Quadrature and truncation budgets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budgets {
    /// Trapezoid nodes on the unit circle (both routes).
    pub circle_nodes: usize,
    /// Abscissa of the vertical line for psi-check; the line Re s = 0 meets poles of psi.
    pub vline_c: f64,
    /// Trapezoid step along the vertical line.
    pub vline_step: f64,
    /// The omega integrals run over [omega_lo, omega_hi] by composite Gauss-Legendre.
    pub omega_lo: f64,
    pub omega_hi: f64,
    pub omega_panels: usize,
    pub omega_per_panel: usize,
    pub m_cap: usize,
    pub series_tol: f64,
    /// Half-line rule for the Fredholm Pfaffian.
    pub lambda_nodes: usize,
    pub lambda_cut: f64,
    /// Circle nodes for the moments in the moment series.
    pub moment_nodes: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            circle_nodes: 64,
            vline_c: 0.25,
            vline_step: 0.02,
            omega_lo: -11.0,
            omega_hi: 17.0,
            omega_panels: 28,
            omega_per_panel: 5,
            m_cap: 80,
            series_tol: 1e-14,
            lambda_nodes: 160,
            lambda_cut: 160.0,
            moment_nodes: 96,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenFuncParams {
    pub zeta: C,
    pub xi: C,
    /// Gaussian damping exponent; psi and psi-check need beta > 0, the F-series beta >= 0.
    pub beta: f64,
    pub model: Model,
    pub budgets: Budgets,
}

impl GenFuncParams {
    /// xi = tau^{1/4} and beta = 1/2; `t` is physical time.
    pub fn new(zeta: C, tau: f64, t: f64) -> Result<Self> {
        let model = Model::new(tau, t_eff(tau, t))?;
        let p = Self { zeta, xi: c(tau.powf(0.25)), beta: 0.5, model, budgets: Budgets::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn with_xi(mut self, xi: C) -> Result<Self> {
        self.xi = xi;
        self.validate()?;
        Ok(self)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        self.beta = beta;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.model.tau.powf(0.25);
        let ax = self.xi.norm();
        if !(ax <= r * (1.0 + 1e-12)) {
            return domain(format!("need |xi| <= tau^(1/4) = {r}, got {ax}"));
        }
        if self.xi_is_critical() && !(self.zeta.norm() < r) {
            return domain(format!("with |xi| = tau^(1/4) need |zeta| < {r}, got {}", self.zeta.norm()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return domain(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        Ok(())
    }

    fn xi_is_critical(&self) -> bool {
        (self.xi.norm() - self.model.tau.powf(0.25)).abs() <= 1e-12
    }

    /// zeta' = zeta tau^{-1/4}, the per-m weight in the kernel.
    pub fn zeta_scaled(&self) -> C {
        self.zeta * self.model.tau.powf(-0.25)
    }

    fn ln_tau(&self) -> f64 {
        self.model.tau.ln()
    }
}

fn check_psi_args(lambda: f64, y: C, p: &GenFuncParams) -> Result<()> {
    if p.zeta.im == 0.0 && p.zeta.re > 0.0 {
        return domain("(-zeta)^s has no principal branch for zeta > 0");
    }
    if !(p.beta > 0.0) {
        return domain("psi needs beta > 0");
    }
    if !(lambda >= 0.0) {
        return domain(format!("lambda must be >= 0, got {lambda}"));
    }
    if (y.norm() - 1.0).abs() > 1e-12 {
        return domain(format!("y must lie on the unit circle, got |y| = {}", y.norm()));
    }
    Ok(())
}

fn psi_raw(s: C, lambda: f64, y: C, p: &GenFuncParams) -> C {
    let zp = p.zeta_scaled();
    if zp == c(0.0) {
        return c(0.0);
    }
    let lt = p.ln_tau();
    let half = (0.5 * s * lt).exp();
    let (w, wi) = (half * y, y / half);
    let pp = (1.0 - w) / (1.0 + w);
    let tt = p.model.t_eff * (1.0 / (1.0 + wi) - 1.0 / (1.0 + w));
    let gauss = ((-p.beta * s * s + 0.25 * s) * lt).exp();
    let ratio = qpoch_inf(-wi, p.model.tau) / qpoch_inf(-w, p.model.tau);
    (s * (-zp).ln()).exp() * gauss * pp * (-lambda * pp + tt).exp() * ratio / y
}

/// psi(s, lambda, y) = (-zeta')^s tau^{-beta s^2 + s/4} y^{-1} p_s e^{-lambda p_s + t[...]}
/// (-tau^{-s/2} y; tau)_inf / (-tau^{s/2} y; tau)_inf, with p_s = (1 - tau^{s/2} y)/(1 + tau^{s/2} y).
///
/// At s = m it interpolates the kernel weights: tau^{m^2/4 - m/2} zeta'^m v(lambda, sigma, m)
/// = (-1)^m tau^{(1/4 + beta) m^2 - m/4} / m_tau! psi(m, lambda, sigma).
pub fn psi(s: C, lambda: f64, y: C, p: &GenFuncParams) -> Result<C> {
    check_psi_args(lambda, y, p)?;
    if !(s.re > 0.0) {
        return domain(format!("psi is evaluated for Re s > 0, got {s}"));
    }
    Ok(psi_raw(s, lambda, y, p))
}

/// psi on one vertical line, premultiplied by the trapezoid weights.
struct PsiLine {
    s: Vec<C>,
    a: Vec<C>,
}

impl PsiLine {
    fn new(cc: f64, lambda: f64, y: C, p: &GenFuncParams) -> Result<Self> {
        let b = p.beta * -p.ln_tau();
        // |psi| <= C e^{|arg(-zeta')| |u| - b u^2}: cut where the envelope is below e^{-45}
        let arg = (-p.zeta_scaled()).arg().abs();
        let half = (arg + (arg * arg + 180.0 * b).sqrt()) / (2.0 * b);
        // the nearest singularities sit on Re s = 0, so the trapezoid step may grow with c
        let step = p.budgets.vline_step.max((2.0 * PI * cc / 50.0).min(0.1));
        let n = (2.0 * half / step).ceil() as usize + 1;
        let rule = vline_rule(cc, half, n)?;
        let a = rule.nodes.iter().zip(&rule.weights).map(|(&s, &w)| w * psi_raw(s, lambda, y, p)).collect();
        Ok(Self { s: rule.nodes, a })
    }

    fn eval(&self, omega: f64) -> C {
        // e^{s_j omega} = e^{s_0 omega} (e^{i h omega})^j on the equispaced line
        let h = self.s[1].im - self.s[0].im;
        let step = C::new(0.0, h * omega).exp();
        let mut e = (self.s[0] * omega).exp();
        let mut acc = c(0.0);
        for &a in &self.a {
            acc += a * e;
            e *= step;
        }
        acc
    }
}

/// psi-check on a set of lines: each omega uses the line nearest the real saddle of
/// e^{s omega} psi(s), which sits at Re s = -(omega + kappa) / 2b for omega well below 0.
/// A fixed line would leave psi-check there as a cancellation between O(e^{c omega}) terms.
struct PsiCheck {
    lambda: f64,
    y: C,
    kappa: f64,
    b: f64,
    lines: Vec<(i64, PsiLine)>,
}

impl PsiCheck {
    fn new(lambda: f64, y: C, p: &GenFuncParams) -> Self {
        let kappa = p.zeta_scaled().norm().ln() + 0.25 * p.ln_tau();
        Self { lambda, y, kappa, b: p.beta * -p.ln_tau(), lines: Vec::new() }
    }

    fn line_index(&self, omega: f64) -> i64 {
        (-(omega + self.kappa) / (2.0 * self.b)).round().max(0.0) as i64
    }

    fn eval(&mut self, omega: f64, p: &GenFuncParams) -> Result<C> {
        let k = self.line_index(omega);
        if let Some((_, l)) = self.lines.iter().find(|(j, _)| *j == k) {
            return Ok(l.eval(omega));
        }
        let cc = if k == 0 { p.budgets.vline_c } else { k as f64 };
        let line = PsiLine::new(cc, self.lambda, self.y, p)?;
        let v = line.eval(omega);
        self.lines.push((k, line));
        Ok(v)
    }
}

/// psi-check(omega) = (1/2 pi i) int_{c + iR} e^{s omega} psi(s) ds, the two-sided inverse
/// Laplace transform, so that int e^{-m omega} psi-check(omega) d omega = psi(m).
pub fn psicheck(omega: f64, lambda: f64, y: C, p: &GenFuncParams) -> Result<C> {
    check_psi_args(lambda, y, p)?;
    PsiCheck::new(lambda, y, p).eval(omega, p)
}

/// Which F-function to sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FArg {
    F1 { z: C, y: C },
    F2 { z1: C, z2: C, s1: i32, s2: i32 },
    F3 { z: C },
}

/// Coefficients a_m (m = 1..) of sum_m a_m (-z)^m, truncated once the terms at |z| = zmax
/// are below tol and decreasing.
fn gauss_coeffs(zmax: f64, p: &GenFuncParams, coef: impl Fn(usize) -> C) -> Result<Vec<C>> {
    let tol = p.budgets.series_tol;
    let mut out = Vec::new();
    let (mut prev, mut peak) = (f64::INFINITY, 1.0f64);
    for m in 1..=p.budgets.m_cap {
        let a = coef(m);
        let mag = a.norm() * zmax.powi(m as i32);
        peak = peak.max(mag);
        out.push(a);
        // the coefficient ratios decay like tau^{2 beta' m}, so the tail is at most the term
        if mag < tol * peak && mag < 0.5 * prev {
            return Ok(out);
        }
        prev = mag;
    }
    Err(Error::Truncation(format!("F-series not below {tol} after {} terms at |z| = {zmax}", p.budgets.m_cap)))
}

fn f1_coeffs(y: C, zmax: f64, p: &GenFuncParams) -> Result<Vec<C>> {
    let tau = p.model.tau;
    let y2 = y * y;
    if (y2 - 1.0).norm() < 1e-14 {
        return Err(Error::Numerical("F1 has a pole at y = +-1".into()));
    }
    let mut r = c(1.0) / (y2 - 1.0);
    let mut coeffs = Vec::new();
    let (mut prev, mut peak) = (f64::INFINITY, 1.0f64);
    for m in 1..=p.budgets.m_cap {
        let tm = tau.powi(m as i32);
        r /= (1.0 - tm * y2) * (1.0 - tm / y2);
        let mf = m as f64;
        let a = (1.0 - tau).powi(2 * m as i32) * tau.powf((0.5 + 2.0 * p.beta) * mf * mf - 0.5 * mf) * r;
        coeffs.push(a);
        let mag = a.norm() * zmax.powi(m as i32);
        peak = peak.max(mag);
        if mag < p.budgets.series_tol * peak && mag < 0.5 * prev {
            return Ok(coeffs);
        }
        prev = mag;
    }
    Err(Error::Truncation(format!("F1 not converged after {} terms", p.budgets.m_cap)))
}

fn f23_coeff(m: usize, p: &GenFuncParams) -> C {
    let mf = m as f64;
    c(p.model.tau.powf((0.25 + p.beta) * mf * mf - 0.25 * mf) / qfactorial(m, p.model.tau))
}

fn horner_minus(coeffs: &[C], z: C) -> C {
    // sum_{m>=1} a_m (-z)^m
    let mut acc = c(0.0);
    for a in coeffs.iter().rev() {
        acc = (acc + a) * (-z);
    }
    acc
}

fn f2_sum(a1: &[C], a2: &[C], z1: C, z2: C, s1: i32, s2: i32) -> C {
    let mut total = c(0.0);
    let mut p1 = c(1.0);
    for (i, x1) in a1.iter().enumerate() {
        let m1 = i + 1;
        p1 *= -z1;
        let mut p2 = c(1.0);
        for (j, x2) in a2.iter().enumerate() {
            let m2 = j + 1;
            p2 *= -z2;
            let sg = ((s2 * m2 as i32) - (s1 * m1 as i32)).signum();
            if sg == 0 {
                continue;
            }
            let base = -(s1 * s2) as f64;
            total += sg as f64 * base.powi(m1.min(m2) as i32) * x1 * x2 * p1 * p2;
        }
    }
    total
}

/// The F-functions:
///
/// F1(z, y) = sum_m (-z)^m (1 - tau)^{2m} tau^{(1/2 + 2 beta) m^2 - m/2} R_m(y) / (y^2 - 1),
/// R_m(y) = prod_{l=1}^m 1 / ((1 - tau^l y^2)(1 - tau^l y^{-2})),
///
/// F2(z1, z2; s1, s2) = sum_{m1, m2} (-s1 s2)^{m1 ^ m2} sgn(s2 m2 - s1 m1)
/// prod_i (-z_i)^{m_i} tau^{(1/4 + beta) m_i^2 - m_i/4} / (m_i)_tau!,
///
/// F3(z) = -sum_m tau^{(1/4 + beta) m^2 - m/4} (-z)^m / m_tau!.
pub fn fseries(which: FArg, p: &GenFuncParams) -> Result<C> {
    match which {
        FArg::F1 { z, y } => {
            let a = f1_coeffs(y, z.norm(), p)?;
            Ok(horner_minus(&a, z))
        }
        FArg::F2 { z1, z2, s1, s2 } => {
            if s1.abs() != 1 || s2.abs() != 1 {
                return domain("F2 signs must be +-1");
            }
            let a1 = gauss_coeffs(z1.norm().max(1.0), p, |m| f23_coeff(m, p))?;
            let a2 = gauss_coeffs(z2.norm().max(1.0), p, |m| f23_coeff(m, p))?;
            Ok(f2_sum(&a1, &a2, z1, z2, s1, s2))
        }
        FArg::F3 { z } => {
            let a = gauss_coeffs(z.norm(), p, |m| f23_coeff(m, p))?;
            Ok(-horner_minus(&a, z))
        }
    }
}

/// Which evaluation of K~ to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KRoute {
    Series,
    Laplace,
}

/// K~ as sums of exponentials: K11 = sum c e^{-la ra - lb rb}, K12 = sum c e^{-la r}.
struct SeriesKernel {
    k11: Vec<(C, C, C)>,
    k12: Vec<(C, C)>,
}

impl SeriesKernel {
    fn new(p: &GenFuncParams) -> Result<Self> {
        let md = p.model;
        let zp = p.zeta_scaled();
        let rule = circle_rule_radius(p.budgets.circle_nodes, 1.0)?;
        let nodes: Vec<(C, C)> = rule.nodes.iter().copied().zip(rule.weights.iter().copied()).collect();
        let tol = p.budgets.series_tol;
        let (mut k11, mut k12) = (Vec::new(), Vec::new());
        // |e^{-lambda r}| <= 1 since Re r > 0, so coefficient sizes bound each shell uniformly
        let mut prev = f64::INFINITY;
        for m in 1..=p.budgets.m_cap {
            let mut shell = 0.0;
            for (cf, r) in k12_terms(md, m) {
                let cf = cf * zp.powi(m as i32);
                shell += cf.norm();
                k12.push((cf, r));
            }
            for m2 in 1..=m {
                let pairs = if m2 == m { vec![(m, m)] } else { vec![(m, m2), (m2, m)] };
                for (ma, mb) in pairs {
                    let w = zp.powi((ma + mb) as i32);
                    for (cf, ra, rb) in k11_terms(md, ma, mb, &nodes) {
                        let cf = cf * w;
                        shell += cf.norm();
                        k11.push((cf, ra, rb));
                    }
                }
            }
            if m >= 3 && shell < tol && shell <= prev {
                return Ok(Self { k11, k12 });
            }
            prev = shell;
        }
        Err(Error::Truncation(format!("kernel m-sum not below {tol} after m = {}", p.budgets.m_cap)))
    }

    fn block(&self, la: f64, lb: f64) -> Block {
        let k11: C = self.k11.iter().map(|&(cf, ra, rb)| cf * (-la * ra - lb * rb).exp()).sum();
        let k12 = |l: f64| -> C { self.k12.iter().map(|&(cf, r)| cf * (-l * r).exp()).sum() };
        [[k11, k12(la)], [-k12(lb), c(sgn_half(la, lb))]]
    }

    /// min Re of all decay rates, which fixes the lambda cutoff.
    fn slowest_rate(&self) -> f64 {
        let a = self.k11.iter().map(|t| t.1.re.min(t.2.re));
        let b = self.k12.iter().map(|t| t.1.re);
        a.chain(b).fold(f64::INFINITY, f64::min)
    }
}

fn sgn_half(la: f64, lb: f64) -> f64 {
    if la == lb {
        0.0
    } else {
        0.5 * (lb - la).signum()
    }
}

fn omega_grid(p: &GenFuncParams) -> Vec<(f64, f64)> {
    let b = &p.budgets;
    let w = (b.omega_hi - b.omega_lo) / b.omega_panels as f64;
    (0..b.omega_panels)
        .flat_map(|i| {
            let lo = b.omega_lo + i as f64 * w;
            gl_interval(b.omega_per_panel, lo, lo + w)
        })
        .collect()
}

fn laplace_block(la: f64, lb: f64, p: &GenFuncParams) -> Result<Block> {
    let grid = omega_grid(p);
    let zmax = (-grid[0].0).exp();
    let sample = |l: f64, y: C| -> Result<Vec<C>> {
        let mut pc = PsiCheck::new(l, y, p);
        grid.iter().map(|&(om, w)| Ok(w * pc.eval(om, p)?)).collect()
    };
    // principal-value circle part, (1/pi i) = 2 x the 1/(2 pi i) inside the weights
    let rule = circle_rule_radius(p.budgets.circle_nodes, 1.0)?;
    let pv: Vec<Result<C>> = rule
        .nodes
        .par_iter()
        .zip(rule.weights.par_iter())
        .map(|(&y, &wy)| {
            let a = sample(la, y)?;
            let b = sample(lb, 1.0 / y)?;
            let f1 = f1_coeffs(y, zmax * zmax, p)?;
            let mut acc = c(0.0);
            for (i, ai) in a.iter().enumerate() {
                let mut row = c(0.0);
                for (j, bj) in b.iter().enumerate() {
                    row += bj * horner_minus(&f1, c((-grid[i].0 - grid[j].0).exp()));
                }
                acc += ai * row;
            }
            Ok(2.0 * wy * acc)
        })
        .collect();
    let mut k11 = c(0.0);
    for v in pv {
        k11 += v?;
    }
    let f23 = gauss_coeffs(zmax, p, |m| f23_coeff(m, p))?;
    let powers: Vec<Vec<C>> = grid
        .iter()
        .map(|&(om, _)| {
            let z = (-om).exp();
            (1..=f23.len()).scan(c(1.0), |acc, _| {
                *acc *= -z;
                Some(*acc)
            })
            .collect()
        })
        .collect();
    let mut k12a = c(0.0);
    let mut k12b = c(0.0);
    for s in [1i32, -1] {
        let ys = c(s as f64);
        let a = sample(la, ys)?;
        let bb = sample(lb, ys)?;
        for s2 in [1i32, -1] {
            let b = sample(lb, c(s2 as f64))?;
            let mut acc = c(0.0);
            for (i, ai) in a.iter().enumerate() {
                for (j, bj) in b.iter().enumerate() {
                    acc += ai * bj * f2_grid(&f23, &powers[i], &powers[j], s, s2);
                }
            }
            k11 += 0.5 * acc;
        }
        for (i, (ai, bi)) in a.iter().zip(&bb).enumerate() {
            let f3: C = -f23.iter().zip(&powers[i]).map(|(x, z)| x * z).sum::<C>();
            k12a += 0.5 * s as f64 * f3 * ai;
            k12b += 0.5 * s as f64 * f3 * bi;
        }
    }
    Ok([[k11, k12a], [-k12b, c(sgn_half(la, lb))]])
}

fn f2_grid(a: &[C], z1: &[C], z2: &[C], s1: i32, s2: i32) -> C {
    let base = -(s1 * s2) as f64;
    let mut total = c(0.0);
    for (i, (x1, p1)) in a.iter().zip(z1).enumerate() {
        let m1 = i as i32 + 1;
        for (j, (x2, p2)) in a.iter().zip(z2).enumerate() {
            let m2 = j as i32 + 1;
            let sg = (s2 * m2 - s1 * m1).signum();
            if sg != 0 {
                total += sg as f64 * base.powi(m1.min(m2)) * x1 * x2 * p1 * p2;
            }
        }
    }
    total
}

/// The 2x2 block K~(lambda1, lambda2); K22 = sgn(lambda2 - lambda1)/2.
pub fn wtk_block(l1: f64, l2: f64, p: &GenFuncParams, route: KRoute) -> Result<Block> {
    p.validate()?;
    if !(l1 >= 0.0 && l2 >= 0.0) {
        return domain("K~ is defined for lambda >= 0");
    }
    match route {
        KRoute::Series => Ok(SeriesKernel::new(p)?.block(l1, l2)),
        KRoute::Laplace => {
            check_psi_args(l1, c(1.0), p)?;
            laplace_block(l1, l2, p)
        }
    }
}

/// How to evaluate the generating function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MomentSeries,
    FredholmPf,
}

/// The skew Nystrom matrix of the series-route kernel on the half-line rule.
fn nystrom_series(p: &GenFuncParams) -> Result<(Vec<C>, usize)> {
    let sk = SeriesKernel::new(p)?;
    let cut = p.budgets.lambda_cut.min(32.0 / sk.slowest_rate());
    let rule = halfline_rule(p.budgets.lambda_nodes, cut)?;
    let pairs = rule.real_pairs();
    let n = pairs.len();
    // e^{-lambda_i r} for every node and every rate, then K11 = E_a diag(c) E_b^T
    let ea: Vec<Vec<C>> = pairs.iter().map(|&(l, _)| sk.k11.iter().map(|t| (-l * t.1).exp()).collect()).collect();
    let eb: Vec<Vec<C>> =
        pairs.iter().map(|&(l, _)| sk.k11.iter().map(|t| t.0 * (-l * t.2).exp()).collect()).collect();
    let k12: Vec<C> = pairs.iter().map(|&(l, _)| sk.k12.iter().map(|&(cf, r)| cf * (-l * r).exp()).sum()).collect();
    let d = 2 * n;
    let rows: Vec<Vec<(usize, C)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity(4 * n);
            for j in i..n {
                let s = (pairs[i].1 * pairs[j].1).sqrt();
                let k11: C = ea[i].iter().zip(&eb[j]).map(|(a, b)| a * b).sum();
                let blk = [[k11, k12[i]], [-k12[j], c(sgn_half(pairs[i].0, pairs[j].0))]];
                for a in 0..2 {
                    for b in 0..2 {
                        if i == j && b <= a {
                            continue;
                        }
                        out.push(((2 * i + a) * d + 2 * j + b, s * blk[a][b]));
                    }
                }
            }
            out
        })
        .collect();
    let mut m = vec![c(0.0); d * d];
    for (idx, v) in rows.into_iter().flatten() {
        m[idx] = v;
        m[(idx % d) * d + idx / d] = -v;
    }
    Ok((m, d))
}

fn require_critical_xi(p: &GenFuncParams) -> Result<()> {
    if !p.xi_is_critical() || p.xi.im.abs() > 1e-12 || p.xi.re < 0.0 {
        return domain("the Fredholm Pfaffian represents the xi = tau^(1/4) transform only");
    }
    Ok(())
}

/// The terms of the Fredholm expansion pf[J - K~] = sum_k (-1)^k/k! int pf K~, for k = 0..k_max,
/// read off pf(J - z M) at 2 k_max + 2 roots of unity.
pub fn fredholm_terms(p: &GenFuncParams, k_max: usize) -> Result<Vec<C>> {
    p.validate()?;
    require_critical_xi(p)?;
    let (m, d) = nystrom_series(p)?;
    let nz = 2 * k_max + 2;
    let vals: Vec<C> = (0..nz)
        .into_par_iter()
        .map(|j| {
            let z = C::from_polar(1.0, 2.0 * PI * j as f64 / nz as f64);
            let mz: Vec<C> = m.iter().map(|v| v * z).collect();
            pf_j_minus(&mz, d)
        })
        .collect();
    Ok((0..=k_max)
        .map(|k| {
            let s: C = vals
                .iter()
                .enumerate()
                .map(|(j, v)| v * C::from_polar(1.0, -2.0 * PI * (j * k) as f64 / nz as f64))
                .sum();
            s / nz as f64
        })
        .collect())
}

/// G(zeta) = E[exp_tau(zeta tau^{h/2}; xi)].
///
/// The moment series uses E[tau^{Mh/2}] for M <= 6 and estimates the tail
/// geometrically from the last two terms. The Fredholm route needs xi = tau^{1/4};
/// it extrapolates n, n/2 and n/4 lambda nodes.
pub fn exptau_transform(p: &GenFuncParams, method: Method) -> Result<Estimate> {
    p.validate()?;
    if p.zeta == c(0.0) {
        return Ok(Estimate::new(c(1.0), 0.0));
    }
    match method {
        Method::MomentSeries => {
            let tau = p.model.tau;
            let mut terms = Vec::new();
            for mm in 0..=NU_FLAT_MAX_M {
                let e = moment_flat_nu(mm, p.model, p.budgets.moment_nodes)?;
                let w = p.zeta.powi(mm as i32) * p.xi.powi((mm * mm.saturating_sub(1)) as i32) / qfactorial(mm, tau);
                terms.push(w * e);
            }
            let k = terms.len();
            let (a, b) = (terms[k - 2].norm(), terms[k - 1].norm());
            let r = if a > 0.0 { b / a } else { 0.0 };
            if r >= 0.5 {
                return Err(Error::Truncation(format!(
                    "moment series terms decay too slowly to bound the tail (ratio {r:.3})"
                )));
            }
            Ok(Estimate::new(terms.iter().sum(), b * r / (1.0 - r)))
        }
        Method::FredholmPf => {
            require_critical_xi(p)?;
            // the sgn(lambda_2 - lambda_1) jump makes the Nystrom error O(n^-2); one
            // Richardson step removes it, and the previous step bounds what is left
            let n = p.budgets.lambda_nodes;
            let (a, b, cc) = (fredholm_pf_at(p, n)?, fredholm_pf_at(p, n / 2)?, fredholm_pf_at(p, n / 4)?);
            let r1 = (4.0 * a - b) / 3.0;
            let r2 = (4.0 * b - cc) / 3.0;
            Ok(Estimate::new(r1, (r1 - r2).norm()))
        }
    }
}

fn fredholm_pf_at(p: &GenFuncParams, nodes: usize) -> Result<C> {
    let mut q = *p;
    q.budgets.lambda_nodes = nodes;
    let (m, d) = nystrom_series(&q)?;
    Ok(pf_j_minus(&m, d))
}
