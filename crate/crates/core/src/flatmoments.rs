//! Half-flat and flat moment formulas: the contour-integral (nu) forms and the
//! Pfaffian form with kernel K^flat.
//!
//! Exponential factors use the effective time t_eff = (q - p) t, see [`t_eff`].

use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::qcalc::{qfactorial, QContext};
use crate::quad::circle_rule_radius;
use crate::{Complex64, Estimate};

type C = Complex64;

fn c(re: f64) -> C {
    C::new(re, 0.0)
}

/// (q - p) t for jump rates p = tau / (1 + tau), q = 1 / (1 + tau).
pub fn t_eff(tau: f64, t: f64) -> f64 {
    (1.0 - tau) / (1.0 + tau) * t
}

/// Ordered tuples of positive integers with the given length and sum.
pub fn compositions(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 0 {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for first in 1..=left.saturating_sub(slots - 1) {
            cur.push(first);
            rec(left - first, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k == 0 {
        if m == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    rec(m, k, &mut Vec::new(), &mut out);
    out
}

/// The model constants every germ needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Model {
    pub tau: f64,
    pub t_eff: f64,
}

impl Model {
    pub fn new(tau: f64, t_eff: f64) -> Result<Self> {
        QContext::new(tau)?;
        if !(t_eff >= 0.0 && t_eff.is_finite()) {
            return domain(format!("time must be finite and nonnegative, got {t_eff}"));
        }
        Ok(Self { tau, t_eff })
    }

    fn tp(&self, e: f64) -> f64 {
        self.tau.powf(e)
    }

    pub fn f1(&self, w: C, n: usize) -> C {
        let tn = self.tp(n as f64);
        let pre = (1.0 - self.tau).powi(n as i32) / (1.0 - tn);
        pre / w * (self.t_eff * (1.0 / (1.0 + w) - 1.0 / (1.0 + tn * w))).exp()
    }

    pub fn f2(&self, w: C, n: usize, x: i64) -> C {
        let tn = self.tp(n as f64);
        ((1.0 + tn * w) / (1.0 + w) * self.tp(-0.5 * n as f64)).powi((2 * x - 1) as i32)
    }

    /// The half-flat f of the finite-x formula. The power of the ratio is x, so that
    /// the formula returns E[tau^{m N_x}] with N_x counting particles at sites <= x;
    /// the power x - 1 gives N_{x-1} instead (tau^{m floor((x-1)/2)} at t = 0).
    pub fn f_halfflat(&self, w: C, n: usize, x: i64) -> C {
        let tn = self.tp(n as f64);
        let ex = (self.t_eff * (1.0 / (1.0 + w) - 1.0 / (1.0 + tn * w))).exp();
        (1.0 - self.tau).powi(n as i32) * ex * ((1.0 + tn * w) / (1.0 + w)).powi(x as i32)
    }

    /// (-w)_inf / (-tau^n w)_inf, a finite product.
    fn minus_ratio(&self, w: C, n: usize) -> C {
        (0..n).map(|l| 1.0 + self.tp(l as f64) * w).product()
    }

    pub fn gp(&self, w: C, n: usize) -> C {
        let w2 = w * w;
        let den: C = (n..2 * n).map(|l| 1.0 - self.tp(l as f64) * w2).product();
        self.minus_ratio(w, n) / den
    }

    pub fn gu(&self, w: C, n: usize) -> C {
        let w2 = w * w;
        let den: C = (n + 1..2 * n).map(|l| 1.0 - self.tp(l as f64) * w2).product();
        self.minus_ratio(w, n) / den
    }

    pub fn h1(&self, w1: C, w2: C, n1: usize, n2: usize) -> C {
        let ww = w1 * w2;
        let num: C = (0..n1).map(|l| 1.0 - self.tp(l as f64) * ww).product();
        let den: C = (n2..n1 + n2).map(|l| 1.0 - self.tp(l as f64) * ww).product();
        num / den
    }

    pub fn h2(&self, wa: C, wb: C, na: usize, nb: usize) -> C {
        let (ta, tb) = (self.tp(na as f64), self.tp(nb as f64));
        (wa * ta - wb * tb) * (wb - wa) / ((wa * ta - wb) * (wb * tb - wa))
    }

    pub fn e(&self, w1: C, w2: C, n1: usize, n2: usize) -> C {
        let ww = w1 * w2;
        let (t1, t2) = (self.tp(n1 as f64), self.tp(n2 as f64));
        (1.0 - t1 * ww) * (1.0 - t2 * ww) / ((1.0 - ww) * (1.0 - t1 * t2 * ww))
    }

    /// h1 h2 at two unpaired points sigma_a tau^{-n_a/2}, sigma_b tau^{-n_b/2}, as a
    /// limit in the first argument; finite also in the 0/0 case.
    pub fn h_unpaired(&self, sa: i32, sb: i32, na: usize, nb: usize) -> f64 {
        let s = (sa * sb) as f64;
        let (ha, hb) = (self.tp(0.5 * na as f64), self.tp(0.5 * nb as f64));
        (-s).powi(na.min(nb) as i32) * self.tp(-0.5 * (na * nb) as f64) * (sb as f64 * hb - sa as f64 * ha).abs()
            / (1.0 - s * ha * hb)
    }

    pub fn u(&self, z: C, n: usize) -> C {
        let z2 = z * z;
        let ratio: C = (0..n)
            .map(|l| (1.0 + self.tp(l as f64 - 0.5 * n as f64) * z) / (1.0 - self.tp((l + 1) as f64) * z2))
            .product();
        (1.0 - self.tp(n as f64)) * self.f1(self.tp(-0.5 * n as f64) * z, n) * ratio
    }

    pub fn uu(&self, z: C, n: usize) -> C {
        let tn = self.tp(n as f64);
        self.tp(-0.5 * n as f64) * z * (1.0 - tn * z * z) / (1.0 - tn)
    }

    pub fn uap(&self, z: C, n: usize) -> C {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        sign * self.tp(-0.5 * n as f64) * (1.0 + z * z) / (z * z - 1.0)
    }

    /// p(y, m) = (1 - tau^{m/2} y) / (1 + tau^{m/2} y); Re p > 0 on the unit circle.
    pub fn p(&self, y: C, m: usize) -> C {
        let h = self.tp(0.5 * m as f64);
        (1.0 - h * y) / (1.0 + h * y)
    }

    pub fn v(&self, lambda: f64, y: C, m: usize) -> C {
        let p = self.p(y, m);
        p * (-lambda * p).exp() * self.u(y, m)
    }
}

/// Names of the germ functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Germ {
    F1,
    F2,
    Gp,
    Gu,
    H1,
    H2,
    E,
    V,
    U,
    Uu,
    Uap,
}

/// Arguments for [`germ`]. Two-point germs read `w2`/`n2`; `x` is used by f2 and
/// `lambda` by v.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GermArgs {
    pub w: C,
    pub n: usize,
    pub w2: C,
    pub n2: usize,
    pub x: i64,
    pub lambda: f64,
    pub model: Model,
}

impl GermArgs {
    pub fn one(model: Model, w: C, n: usize) -> Self {
        Self { w, n, w2: c(0.0), n2: 1, x: 0, lambda: 0.0, model }
    }

    pub fn two(model: Model, w: C, w2: C, n: usize, n2: usize) -> Self {
        Self { w, n, w2, n2, x: 0, lambda: 0.0, model }
    }
}

const POLE_GAP: f64 = 1e-8;

fn near(a: C, b: C) -> bool {
    (a - b).norm() < POLE_GAP
}

/// Evaluates a named germ. `tilde` rescales w -> tau^{-n/2} w (each argument with
/// its own n); it only applies to the w-germs.
pub fn germ(name: Germ, args: GermArgs, tilde: bool) -> Result<C> {
    let md = args.model;
    if args.n == 0 || args.n2 == 0 {
        return domain("germ indices must be positive");
    }
    let (mut w, mut w2) = (args.w, args.w2);
    if tilde {
        if matches!(name, Germ::V | Germ::U | Germ::Uu | Germ::Uap) {
            return domain(format!("{name:?} is already written in the rescaled variable"));
        }
        w *= md.tp(-0.5 * args.n as f64);
        w2 *= md.tp(-0.5 * args.n2 as f64);
    }
    let tau = md.tau;
    let (n, n2) = (args.n, args.n2);
    let pole = |hit: bool, what: &str| -> Result<()> {
        if hit {
            Err(Error::Numerical(format!("{what}: argument within {POLE_GAP} of a pole")))
        } else {
            Ok(())
        }
    };
    let val = match name {
        Germ::F1 => {
            pole(w.norm() < POLE_GAP, "f1")?;
            md.f1(w, n)
        }
        Germ::F2 => {
            pole(near(w, c(-1.0)) || near(w, c(-tau.powi(-(n as i32)))), "f2")?;
            md.f2(w, n, args.x)
        }
        Germ::Gp | Germ::Gu => {
            let lo = if name == Germ::Gp { n } else { n + 1 };
            let hit = (lo..2 * n).any(|l| (1.0 - tau.powi(l as i32) * w * w).norm() < POLE_GAP);
            pole(hit, "g")?;
            if name == Germ::Gp {
                md.gp(w, n)
            } else {
                md.gu(w, n)
            }
        }
        Germ::H1 => {
            let ww = w * w2;
            pole((n2..n + n2).any(|l| (1.0 - tau.powi(l as i32) * ww).norm() < POLE_GAP), "h1")?;
            md.h1(w, w2, n, n2)
        }
        Germ::H2 => {
            let (ta, tb) = (tau.powi(n as i32), tau.powi(n2 as i32));
            pole(near(w * ta, w2) || near(w2 * tb, w), "h2")?;
            md.h2(w, w2, n, n2)
        }
        Germ::E => {
            let ww = w * w2;
            pole(near(ww, c(1.0)) || near(ww * tau.powi((n + n2) as i32), c(1.0)), "e")?;
            md.e(w, w2, n, n2)
        }
        Germ::U => md.u(w, n),
        Germ::Uu => md.uu(w, n),
        Germ::Uap => {
            pole(near(w * w, c(1.0)), "uap")?;
            md.uap(w, n)
        }
        Germ::V => {
            pole(near(w * md.tp(0.5 * n as f64), c(-1.0)), "v")?;
            md.v(args.lambda, w, n)
        }
    };
    if !val.is_finite() {
        return Err(Error::Numerical(format!("{name:?} overflowed")));
    }
    Ok(val)
}

/// Half-flat nu_{k,m}(t, x): k-fold trapezoid over the circle of radius tau^{-eta}.
pub fn nu_halfflat(k: usize, m: usize, model: Model, x: i64, eta: f64, nodes: usize) -> Result<C> {
    if k > 4 {
        return domain(format!("half-flat nu is evaluated for k <= 4, got {k}"));
    }
    if k > m {
        return domain(format!("need k <= m, got k={k}, m={m}"));
    }
    if k == 0 {
        return Ok(c(if m == 0 { 1.0 } else { 0.0 }));
    }
    if !(eta > 0.0 && eta < 0.25) {
        return domain(format!("eta must lie in (0, 1/4), got {eta}"));
    }
    let rule = circle_rule_radius(nodes, model.tau.powf(-eta))?;
    let tau = model.tau;
    let mut total = c(0.0);
    for comp in compositions(m, k) {
        // f g_p per node and per slot
        let fg: Vec<Vec<C>> = comp
            .iter()
            .map(|&n| rule.nodes.iter().map(|&w| model.f_halfflat(w, n, x) * model.gp(w, n)).collect())
            .collect();
        let comp = &comp;
        let fg = &fg;
        let rule = &rule;
        let n = rule.len();
        let part: C = (0..n)
            .into_par_iter()
            .map(|i0| {
                let mut idx = vec![0usize; k];
                idx[0] = i0;
                let mut acc = c(0.0);
                loop {
                    let ws: Vec<C> = idx.iter().map(|&i| rule.nodes[i]).collect();
                    let mut val = c(1.0);
                    for a in 0..k {
                        val *= rule.weights[idx[a]] * fg[a][idx[a]];
                    }
                    for a in 0..k {
                        for b in a + 1..k {
                            val *= model.h1(ws[a], ws[b], comp[a], comp[b]);
                        }
                    }
                    let mut mat = vec![c(0.0); k * k];
                    for a in 0..k {
                        for b in 0..k {
                            mat[a * k + b] = -1.0 / (ws[a] * tau.powi(comp[a] as i32) - ws[b]);
                        }
                    }
                    acc += val * crate::skewlin::det(k, &mat);
                    // advance slots 1..k
                    let mut s = 1;
                    while s < k {
                        idx[s] += 1;
                        if idx[s] < n {
                            break;
                        }
                        idx[s] = 0;
                        s += 1;
                    }
                    if s == k {
                        break;
                    }
                }
                acc
            })
            .sum();
        total += part;
    }
    let kf: f64 = (1..=k).map(|v| v as f64).product();
    Ok(total / kf)
}

/// E[tau^{m N_x(t)}] for half-flat data, m_tau! sum_k nu_{k,m}.
pub fn moment_halfflat(m: usize, model: Model, x: i64, nodes: usize) -> Result<C> {
    let mut s = c(0.0);
    for k in 0..=m {
        s += nu_halfflat(k, m, model, x, 0.125, nodes)?;
    }
    Ok(qfactorial(m, model.tau) * s)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Sign assignments with sigma_a nu_a pairwise distinct.
fn signed_tuples(nu: &[usize]) -> Vec<Vec<i32>> {
    let k = nu.len();
    let mut out = Vec::new();
    for mask in 0..(1u32 << k) {
        let s: Vec<i32> = (0..k).map(|a| if mask >> a & 1 == 1 { -1 } else { 1 }).collect();
        let distinct =
            (0..k).all(|a| (a + 1..k).all(|b| s[a] as i64 * nu[a] as i64 != s[b] as i64 * nu[b] as i64));
        if distinct {
            out.push(s);
        }
    }
    out
}

/// Largest m for the nu route: m = 6 already needs threefold circle sums.
pub const NU_FLAT_MAX_M: usize = 6;

/// Flat nu_{k,m}(t): the sum over unpaired/paired splittings with unit-circle
/// integrals for the paired variables.
pub fn nu_flat(k: usize, m: usize, model: Model, nodes: usize) -> Result<C> {
    if m > NU_FLAT_MAX_M {
        return domain(format!("flat nu is evaluated for m <= {NU_FLAT_MAX_M}, got {m}"));
    }
    if k > m {
        return domain(format!("need k <= m, got k={k}, m={m}"));
    }
    if k == 0 {
        return Ok(c(if m == 0 { 1.0 } else { 0.0 }));
    }
    let rule = circle_rule_radius(nodes, 1.0)?;
    let mut total = c(0.0);
    for kp in 0..=k / 2 {
        let ku = k - 2 * kp;
        let mut z = c(0.0);
        for split in 0..=m {
            // split = sum of nu; the rest is 2 sum n^p
            if (m - split) % 2 == 1 || (ku == 0) != (split == 0) || (kp == 0) != (split == m) {
                continue;
            }
            let nus = compositions(split, ku);
            let nps = compositions((m - split) / 2, kp);
            for nu in &nus {
                for sig in signed_tuples(nu) {
                    for np in &nps {
                        z += flat_term(model, &sig, nu, np, &rule);
                    }
                }
            }
        }
        total += z / (factorial(ku) * 2f64.powi(kp as i32) * factorial(kp));
    }
    Ok(total)
}

/// Tensor sum over the paired variables; `chosen` holds the node indices fixed so far.
fn paired_sum(
    per: &[Vec<C>],
    nodes: &[C],
    np: &[usize],
    pp: &dyn Fn(C, C, usize, usize) -> C,
    chosen: &mut Vec<usize>,
    acc: C,
) -> C {
    let a = chosen.len();
    if a == per.len() {
        return acc;
    }
    let mut total = c(0.0);
    for (i, &z) in nodes.iter().enumerate() {
        let mut v = acc * per[a][i];
        for (b, &j) in chosen.iter().enumerate() {
            v *= pp(nodes[j], z, np[b], np[a]);
        }
        chosen.push(i);
        total += paired_sum(per, nodes, np, pp, chosen, v);
        chosen.pop();
    }
    total
}

fn flat_term(md: Model, sig: &[i32], nu: &[usize], np: &[usize], rule: &crate::quad::QuadratureRule) -> C {
    let tau = md.tau;
    let ku = sig.len();
    let kp = np.len();
    let tl = |z: C, n: usize| md.tp(-0.5 * n as f64) * z;
    // unpaired-only factors
    let mut base = c(1.0);
    for a in 0..ku {
        let s = c(sig[a] as f64);
        let w = tl(s, nu[a]);
        base *= md.f1(w, nu[a]) * md.gu(w, nu[a]) * 0.5 * md.tp(-0.5 * nu[a] as f64) * s;
        for b in a + 1..ku {
            base *= md.h_unpaired(sig[a], sig[b], nu[a], nu[b]);
        }
    }
    if kp == 0 {
        return base;
    }
    let paired = |z: C, n: usize| -> C {
        let (w, wi) = (tl(z, n), tl(1.0 / z, n));
        let z2 = z * z;
        let h2 = (1.0 - z2) * (1.0 - z2) / ((tau.powi(n as i32) - z2) * (tau.powi(-(n as i32)) - z2));
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        md.f1(w, n) * md.gp(w, n) * md.f1(wi, n) * md.gp(wi, n)
            * sign
            // the extra tau^{-n/2} is the Jacobian of w = tau^{-n/2} z
            * md.tp(-0.5 * (n * n) as f64 - 0.5 * n as f64)
            * (tau.powi(-(n as i32)) - 1.0)
            / z
            * h2
    };
    let cross = |z: C, n: usize| -> C {
        let mut f = c(1.0);
        for a in 0..ku {
            f *= md.tp(-((nu[a] * n) as f64)) * md.e(tl(c(sig[a] as f64), nu[a]), tl(z, n), nu[a], n);
        }
        f
    };
    let pp = |za: C, zb: C, na: usize, nb: usize| -> C {
        md.tp(-2.0 * (na * nb) as f64)
            * md.e(tl(za, na), tl(zb, nb), na, nb)
            * md.e(tl(1.0 / za, na), tl(zb, nb), na, nb)
    };
    let per: Vec<Vec<C>> = np
        .iter()
        .map(|&n| rule.nodes.iter().zip(&rule.weights).map(|(&z, &w)| w * paired(z, n) * cross(z, n)).collect())
        .collect();
    let acc = paired_sum(&per, &rule.nodes, np, &pp, &mut Vec::new(), c(1.0));
    base * acc
}

/// Budgets for the Pfaffian route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KflatParams {
    pub model: Model,
    /// Trapezoid nodes on the unit circle for the principal-value integral.
    pub circle_nodes: usize,
}

impl KflatParams {
    pub fn new(tau: f64, t: f64) -> Result<Self> {
        Ok(Self { model: Model::new(tau, t_eff(tau, t))?, circle_nodes: 128 })
    }
}

/// K11 as a finite sum of c e^{-lambda_a ra - lambda_b rb} terms.
///
/// The diagonal (ma = mb) circle term carries the weight (-1)^m tau^{-m} / (y^2 - 1)
/// in place of u_ap; with dy as the measure this is what makes the term odd under
/// y -> 1/y, hence K11 skew. The sigma double sum uses (-sigma sigma')^{ma ^ mb},
/// which absorbs the sigma sigma' of u_u(sigma, ma) u_u(sigma', mb).
pub(crate) fn k11_terms(md: Model, ma: usize, mb: usize, nodes: &[(C, C)]) -> Vec<(C, C, C)> {
    let mut out = Vec::new();
    if ma == mb {
        let sgn_m = if ma % 2 == 0 { 1.0 } else { -1.0 };
        let pre = md.tp(0.5 * (ma * ma) as f64 - ma as f64) * sgn_m;
        for &(y, w) in nodes {
            let yi = 1.0 / y;
            let (pa, pb) = (md.p(y, ma), md.p(yi, mb));
            // (1 / pi i) PV = 2 x (1 / 2 pi i) PV; the poles at +-1 cancel across the symmetric nodes
            let coef = 2.0 * w * pre * pa * md.u(y, ma) * pb * md.u(yi, mb) / (y * y - 1.0);
            out.push((coef, pa, pb));
        }
    }
    let pre = md.tp(0.25 * (ma * ma + mb * mb) as f64 - 0.5 * (ma + mb) as f64);
    for s in [1i32, -1] {
        for s2 in [1i32, -1] {
            let sg = (s2 as i64 * mb as i64 - s as i64 * ma as i64).signum() as f64;
            if sg == 0.0 {
                continue;
            }
            let base = -(s * s2) as f64;
            let coef = 0.5 * base.powi(ma.min(mb) as i32) * sg * pre;
            let (ys, ys2) = (c(s as f64), c(s2 as f64));
            let (pa, pb) = (md.p(ys, ma), md.p(ys2, mb));
            out.push((coef * pa * md.u(ys, ma) * pb * md.u(ys2, mb), pa, pb));
        }
    }
    out
}

/// The sigma-sum terms of K12 as c e^{-lambda_a r}.
pub(crate) fn k12_terms(md: Model, ma: usize) -> Vec<(C, C)> {
    let pre = md.tp(0.25 * (ma * ma) as f64 - 0.5 * ma as f64);
    [1.0, -1.0]
        .iter()
        .map(|&s| {
            let y = c(s);
            let p = md.p(y, ma);
            // sigma from u_u(sigma, m) = sigma tau^{-m/2}
            (-0.5 * s * pre * p * md.u(y, ma), p)
        })
        .collect()
}

/// The 2x2 block K^flat(lambda_a, lambda_b; m_a, m_b).
pub fn kflat_block(la: f64, lb: f64, ma: usize, mb: usize, params: &KflatParams) -> Result<[[C; 2]; 2]> {
    if la < 0.0 || lb < 0.0 || ma == 0 || mb == 0 {
        return domain("kflat_block needs lambda >= 0 and m >= 1");
    }
    let md = params.model;
    let rule = circle_rule_radius(params.circle_nodes, 1.0)?;
    let nodes: Vec<(C, C)> = rule.nodes.iter().copied().zip(rule.weights.iter().copied()).collect();
    let k11: C = k11_terms(md, ma, mb, &nodes).iter().map(|&(cf, ra, rb)| cf * (-la * ra - lb * rb).exp()).sum();
    let k12 = |l: f64, m: usize| -> C { k12_terms(md, m).iter().map(|&(cf, r)| cf * (-l * r).exp()).sum() };
    let sg = 0.5 * (lb - la).signum() * if lb == la { 0.0 } else { 1.0 };
    Ok([[k11, k12(la, ma)], [-k12(lb, mb), c(sg)]])
}

/// One entry of the 2k x 2k matrix as a sum of exponentials in the chain labels.
#[derive(Clone)]
struct Term {
    coef: C,
    rates: [(usize, C); 2],
}

/// int over lambda_1 < ... < lambda_k of pf[K^flat(lambda_a, lambda_b; m_a, m_b)],
/// done in closed form matching by matching.
fn chain_integral(md: Model, ms: &[usize], nodes: &[(C, C)]) -> C {
    chain_pf_integral(ms.len(), &|a, b| k11_terms(md, ms[a], ms[b], nodes), &|a| k12_terms(md, ms[a]))
}

/// int over lambda_1 < ... < lambda_k of pf[K], for a kernel with K11(a, b) = sum c e^{-ra la - rb lb},
/// K12(a) = sum c e^{-r la} (no dependence on the second label) and K22 = sgn(lb - la)/2.
/// The skew kernel makes every ordering chamber contribute the same.
pub(crate) fn chain_pf_integral(
    k: usize,
    k11: &dyn Fn(usize, usize) -> Vec<(C, C, C)>,
    k12: &dyn Fn(usize) -> Vec<(C, C)>,
) -> C {
    let d = 2 * k;
    let zero = c(0.0);
    let mut entries: Vec<Vec<Term>> = vec![Vec::new(); d * d];
    for a in 0..k {
        let ka = k12(a);
        for &(cf, r) in &ka {
            entries[2 * a * d + 2 * a + 1].push(Term { coef: cf, rates: [(a, r), (a, zero)] });
        }
        for b in a + 1..k {
            for (cf, ra, rb) in k11(a, b) {
                entries[2 * a * d + 2 * b].push(Term { coef: cf, rates: [(a, ra), (b, rb)] });
            }
            for &(cf, r) in &ka {
                entries[2 * a * d + 2 * b + 1].push(Term { coef: cf, rates: [(a, r), (a, zero)] });
            }
            for (cf, r) in k12(b) {
                entries[(2 * a + 1) * d + 2 * b].push(Term { coef: -cf, rates: [(b, r), (b, zero)] });
            }
            // 1/2 sgn(lambda_b - lambda_a) = 1/2 on the chain
            entries[(2 * a + 1) * d + 2 * b + 1].push(Term { coef: c(0.5), rates: [(a, zero), (a, zero)] });
        }
    }
    let mut rates = vec![zero; k];
    let mut left: Vec<usize> = (0..d).collect();
    matchings(&entries, d, &mut left, c(1.0), &mut rates)
}

fn matchings(entries: &[Vec<Term>], d: usize, left: &mut Vec<usize>, coef: C, rates: &mut [C]) -> C {
    if left.is_empty() {
        // int_{chain} exp(-sum R_a lambda_a) = prod_i 1 / (R_i + ... + R_k)
        let mut tail = c(0.0);
        let mut v = coef;
        for r in rates.iter().rev() {
            tail += r;
            v /= tail;
        }
        return v;
    }
    let i = left[0];
    let mut total = c(0.0);
    for pos in 1..left.len() {
        let j = left[pos];
        let terms = &entries[i * d + j];
        if terms.is_empty() {
            continue;
        }
        let sign = if pos % 2 == 1 { 1.0 } else { -1.0 };
        let mut rest: Vec<usize> = left.iter().copied().filter(|&x| x != i && x != j).collect();
        for t in terms {
            for &(l, r) in &t.rates {
                rates[l] += r;
            }
            total += matchings(entries, d, &mut rest, coef * sign * t.coef, rates);
            for &(l, r) in &t.rates {
                rates[l] -= r;
            }
        }
    }
    total
}

fn moment_flat_at(m: usize, params: &KflatParams, circle_nodes: usize) -> Result<C> {
    let md = params.model;
    let rule = circle_rule_radius(circle_nodes, 1.0)?;
    let nodes: Vec<(C, C)> = rule.nodes.iter().copied().zip(rule.weights.iter().copied()).collect();
    let mut work = Vec::new();
    for k in 1..=m {
        for comp in compositions(m, k) {
            work.push((k, comp));
        }
    }
    // k! orderings of the chain collapse against the 1/k! of the series
    let s: C = work
        .par_iter()
        .map(|(k, comp)| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * chain_integral(md, comp, &nodes)
        })
        .sum();
    Ok(qfactorial(m, md.tau) * md.tp(-0.25 * (m * m) as f64) * s)
}

/// E^flat[tau^{m h(t,0)/2}] by the Pfaffian formula with kernel K^flat. The error
/// estimate compares circle budgets N and 2N.
pub fn moment_flat(m: usize, params: &KflatParams) -> Result<Estimate> {
    if m > 4 {
        return domain(format!("flat moments are evaluated for m <= 4, got {m}"));
    }
    if m == 0 {
        return Ok(Estimate::new(c(1.0), 0.0));
    }
    let a = moment_flat_at(m, params, params.circle_nodes)?;
    let b = moment_flat_at(m, params, 2 * params.circle_nodes)?;
    Ok(Estimate::new(b, (a - b).norm()))
}

/// m_tau! sum_k nu_flat(k, m), the flat moment by the nu route.
pub fn moment_flat_nu(m: usize, model: Model, nodes: usize) -> Result<C> {
    let mut s = c(0.0);
    for k in 0..=m {
        s += nu_flat(k, m, model, nodes)?;
    }
    Ok(qfactorial(m, model.tau) * s)
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn md(t: f64) -> Model {
        Model::new(0.5, t_eff(0.5, t)).unwrap()
    }

    fn close(a: C, b: C, tol: f64) -> bool {
        (a - b).norm() <= tol * (1.0 + b.norm())
    }

    #[test]
    fn compositions_count() {
        // C(m-1, k-1)
        assert_eq!(compositions(4, 2).len(), 3);
        assert_eq!(compositions(5, 3).len(), 6);
        assert_eq!(compositions(0, 0), vec![Vec::<usize>::new()]);
        assert!(compositions(2, 3).is_empty());
    }

    #[test]
    fn germ_examples() {
        let m = md(0.7);
        let w = C::new(0.3, 0.8);
        let h2 = germ(Germ::H2, GermArgs::two(m, w, w, 2, 2), false);
        // w_a = w_b sits on the h2 pole set only if tau^n w = w, which it does not
        assert!(h2.unwrap().norm() < 1e-15);
        for n in 1..=4 {
            for s in [1.0, -1.0] {
                let mut a = GermArgs::one(m, c(s * m.tau.powf(-0.5 * n as f64)), n);
                for x in [-3, 0, 1, 4] {
                    a.x = x;
                    assert!(close(germ(Germ::F2, a, false).unwrap(), c(s), 1e-12));
                }
                // same point reached through the tilde rescaling
                let mut b = GermArgs::one(m, c(s), n);
                b.x = 2;
                assert!(close(germ(Germ::F2, b, true).unwrap(), c(s), 1e-12));
            }
        }
    }

    #[test]
    fn gp_residue() {
        let m = md(0.4);
        for n in 1..=4 {
            for s in [1.0, -1.0] {
                let pole = c(s * m.tau.powf(-0.5 * n as f64));
                let w = pole * (1.0 + 1e-7);
                let lhs = (w - pole) * m.gp(w, n);
                let rhs = -0.5 * s * m.tau.powf(-0.5 * n as f64) * m.gu(pole, n);
                assert!(close(lhs, rhs, 1e-4), "n={n} s={s}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn germ_errors() {
        let m = md(0.0);
        assert!(germ(Germ::F1, GermArgs::one(m, c(0.0), 1), false).is_err());
        assert!(germ(Germ::Uap, GermArgs::one(m, c(1.0), 1), false).is_err());
        assert!(germ(Germ::U, GermArgs::one(m, c(0.5), 1), true).is_err());
        assert!(germ(Germ::F1, GermArgs::one(m, c(0.5), 0), false).is_err());
        let pole = c(m.tau.powf(-1.0));
        assert!(germ(Germ::Gp, GermArgs::one(m, pole, 2), false).is_err());
    }

    #[test]
    fn u_is_f1_gu_at_unpaired_points() {
        let m = md(1.3);
        for n in 1..=4 {
            for s in [1.0, -1.0] {
                let w = c(s * m.tau.powf(-0.5 * n as f64));
                assert!(close(m.u(c(s), n), m.f1(w, n) * m.gu(w, n), 1e-12));
                assert!(close(m.uu(c(s), n), c(s * m.tau.powf(-0.5 * n as f64)), 1e-14));
            }
        }
    }

    #[test]
    fn h_unpaired_is_the_limit() {
        let m = md(0.0);
        for na in 1..=3 {
            for nb in 1..=3 {
                for sa in [1, -1] {
                    for sb in [1, -1] {
                        if sa * na as i32 == sb * nb as i32 {
                            continue;
                        }
                        let wa = c(sa as f64 * m.tau.powf(-0.5 * na as f64));
                        let wb = c(sb as f64 * m.tau.powf(-0.5 * nb as f64));
                        let eps = C::new(1e-7, 1e-7);
                        let direct = m.h1(wa + eps, wb, na, nb) * m.h2(wa + eps, wb, na, nb);
                        let closed = m.h_unpaired(sa, sb, na, nb);
                        assert!(close(direct, c(closed), 1e-5), "{sa}{na} {sb}{nb}: {direct} vs {closed}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn cauchy_determinant(n in 1usize..=6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pt = || C::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let xs: Vec<C> = (0..n).map(|_| pt()).collect();
            let ys: Vec<C> = (0..n).map(|_| pt()).collect();
            let mut mat = vec![c(0.0); n * n];
            for i in 0..n {
                for j in 0..n {
                    mat[i * n + j] = 1.0 / (xs[i] - ys[j]);
                }
            }
            let mut prod = c(1.0);
            for i in 0..n {
                for j in i + 1..n {
                    prod *= (xs[j] - xs[i]) * (ys[i] - ys[j]);
                }
                for j in 0..n {
                    prod /= xs[i] - ys[j];
                }
            }
            let d = crate::skewlin::det(n, &mat);
            prop_assert!((d - prod).norm() <= 1e-10 * prod.norm().max(1e-300) * 10.0, "{} vs {}", d, prod);
        }

        #[test]
        fn h_product_reflection(n1 in 1usize..=5, n2 in 1usize..=5, th1 in 0.0f64..6.28, th2 in 0.0f64..6.28) {
            let m = md(0.0);
            let (w1, w2) = (C::from_polar(1.0, th1), C::from_polar(1.0, th2));
            let (r1, r2) = (m.tau.powi(-(n1 as i32)) / w1, m.tau.powi(-(n2 as i32)) / w2);
            let lhs = m.h1(w1, w2, n1, n2) * m.h1(r1, r2, n1, n2) * m.h2(r1, w2, n1, n2) * m.h2(w1, r2, n1, n2);
            let rhs = m.tau.powi(-((n1 * n2) as i32)) * m.e(w1, w2, n1, n2);
            prop_assume!(rhs.norm().is_finite() && rhs.norm() < 1e8);
            prop_assert!((lhs - rhs).norm() <= 1e-9 * rhs.norm(), "{} vs {}", lhs, rhs);
        }

        #[test]
        fn f2_reflection(n in 1usize..=5, x in -10i64..=10, th in 0.0f64..6.28, r in 0.5f64..2.0) {
            let m = md(0.0);
            let w = C::from_polar(r, th);
            prop_assume!((w + 1.0).norm() > 1e-3 && (w * m.tau.powi(n as i32) + 1.0).norm() > 1e-3);
            let v = m.f2(m.tau.powi(-(n as i32)) / w, n, x) * m.f2(w, n, x);
            prop_assert!((v - 1.0).norm() < 1e-10);
        }

        #[test]
        fn sign_integral(a in 0.5f64..3.0, b in -1.0f64..1.0, cc in 0.5f64..3.0, d in -1.0f64..1.0) {
            // int int p1 p2 e^{-l1 p1 - l2 p2} sgn(l2 - l1) = (p1 - p2) / (p1 + p2)
            let (p1, p2) = (C::new(a, b), C::new(cc, d));
            // inner integral in closed form, outer by Gauss-Legendre on a mapped half-line
            let rule = crate::quad::gl_interval(400, 0.0, 1.0);
            let mut s = c(0.0);
            for &(u, wu) in &rule {
                let l1 = u / (1.0 - u);
                let jac = 1.0 / ((1.0 - u) * (1.0 - u));
                // int_0^inf p2 e^{-l2 p2} sgn(l2 - l1) dl2 = 2 e^{-l1 p2} - 1
                let inner = 2.0 * (-l1 * p2).exp() - 1.0;
                s += wu * jac * p1 * (-l1 * p1).exp() * inner;
            }
            let want = (p1 - p2) / (p1 + p2);
            prop_assert!((s - want).norm() < 1e-6, "{} vs {}", s, want);
        }
    }

    #[test]
    fn pochhammer_ratio_growth() {
        // tau^{0.15 n^2} prod_{l<n} (1 + tau^{l-n/2} z) / (1 - tau^{l+1} z^2) stays bounded
        let tau: f64 = 0.5;
        let rule = circle_rule_radius(64, 1.0).unwrap();
        let mut sup: Vec<f64> = Vec::new();
        for n in 1..=20usize {
            let mut best: f64 = 0.0;
            for &z in rule.nodes.iter().chain([c(1.0)].iter()) {
                let r: C = (0..n)
                    .map(|l| (1.0 + tau.powf(l as f64 - 0.5 * n as f64) * z) / (1.0 - tau.powi(l as i32 + 1) * z * z))
                    .product();
                best = best.max(tau.powf(0.15 * (n * n) as f64) * r.norm());
            }
            sup.push(best);
        }
        assert!(sup.iter().all(|&v| v < 100.0), "{sup:?}");
        assert!(sup[19] < sup[9]);
    }

    #[test]
    fn halfflat_time_zero() {
        // E[tau^{m N_x(0)}] = tau^{m floor(x/2)} for sites 2, 4, 6, ...
        let m0 = md(0.0);
        for m in 1..=2 {
            for x in [0i64, 1, 2, 3] {
                let v = moment_halfflat(m, m0, x, 512).unwrap();
                let want = 0.5f64.powi((m as i64 * x.div_euclid(2)) as i32);
                assert!(close(v, c(want), 1e-9), "m={m} x={x}: {v}");
            }
        }
    }

    #[test]
    fn halfflat_node_doubling() {
        let m1 = md(1.0);
        // the circle sits between singular sets at |w| = 1 and tau^{-1/2}, so the
        // trapezoid error decays like tau^{N/8}
        let a = nu_halfflat(1, 1, m1, 2, 0.125, 256).unwrap();
        let b = nu_halfflat(1, 1, m1, 2, 0.125, 512).unwrap();
        assert!((a - b).norm() < 1e-9);
        assert_eq!(nu_halfflat(0, 0, m1, 2, 0.125, 8).unwrap(), c(1.0));
        assert!(nu_halfflat(5, 5, m1, 2, 0.125, 8).is_err());
        assert!(nu_halfflat(1, 1, m1, 2, 0.3, 8).is_err());
    }

    #[test]
    fn flat_time_zero_is_one() {
        let p = KflatParams { model: md(0.0), circle_nodes: 96 };
        for m in 0..=3 {
            let e = moment_flat(m, &p).unwrap();
            assert!(close(e.value, c(1.0), 1e-10), "m={m}: {}", e.value);
            let nu = moment_flat_nu(m, p.model, 96).unwrap();
            assert!(close(nu, c(1.0), 1e-10), "m={m}: {nu}");
        }
    }

    #[test]
    fn flat_routes_agree() {
        for t in [0.5, 1.0] {
            let p = KflatParams { model: md(t), circle_nodes: 96 };
            for m in 1..=3 {
                let pf = moment_flat(m, &p).unwrap();
                let nu = moment_flat_nu(m, p.model, 96).unwrap();
                assert!(close(pf.value, nu, 1e-8), "t={t} m={m}: {} vs {nu}", pf.value);
                assert!(pf.value.im.abs() < 1e-8);
                assert!(pf.err < 1e-8);
                // moment bound with a generous constant
                let bound = 10.0 * qfactorial(m, 0.5) * 0.5f64.powf(-0.25 * (m * m) as f64);
                assert!(pf.value.norm() <= bound);
            }
        }
    }

    #[test]
    fn flat_m1_closed_form() {
        // m = 1 has no integral: nu_flat(1, 1) is the sigma = +-1 sum
        let m1 = md(0.8);
        let want: C = [1.0, -1.0]
            .iter()
            .map(|&s| {
                let w = c(s * m1.tau.powf(-0.5));
                m1.f1(w, 1) * m1.gu(w, 1) * 0.5 * m1.tau.powf(-0.5) * s
            })
            .sum();
        assert!(close(nu_flat(1, 1, m1, 8).unwrap(), want, 1e-14));
        assert!(nu_flat(1, NU_FLAT_MAX_M + 1, m1, 8).is_err());
    }

    #[test]
    fn kflat_structure() {
        let p = KflatParams { model: md(0.6), circle_nodes: 64 };
        for (ma, mb) in [(1, 1), (1, 2), (2, 3), (3, 3)] {
            let a = kflat_block(0.4, 1.7, ma, mb, &p).unwrap();
            let b = kflat_block(1.7, 0.4, mb, ma, &p).unwrap();
            assert!((a[0][0] + b[0][0]).norm() < 1e-12, "K11 skew ({ma},{mb})");
            assert!((a[1][1] + b[1][1]).norm() < 1e-15);
            assert!((a[0][1] + b[1][0]).norm() < 1e-15);
        }
        let d = kflat_block(0.9, 0.9, 2, 2, &p).unwrap();
        assert_eq!(d[1][1], c(0.0));
        // on the diagonal only the circle term survives, and it is odd, so K11 = 0
        assert!(d[0][0].norm() < 1e-12);
        assert!(kflat_block(-0.1, 0.0, 1, 1, &p).is_err());
        // entries stay bounded after the e^{-c lambda} tau^{m^2/16} extraction
        let c1 = 0.25 * (1.0 - 0.5);
        for &l in &[0.0, 1.0, 5.0, 20.0] {
            for m in 1..=4 {
                let k = kflat_block(l, l + 0.5, m, m, &p).unwrap();
                let scale = (c1 * l).exp() * 0.5f64.powf((m * m) as f64 / 16.0);
                assert!(k[0][0].norm() * scale < 1e3 && k[0][1].norm() * scale < 1e3);
            }
        }
    }
}
