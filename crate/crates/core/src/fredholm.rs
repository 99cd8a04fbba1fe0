//! Nystrom discretizations of Fredholm determinants and Pfaffians on [0, inf).

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::quad::QuadratureRule;
use crate::skewlin::{det, pfaffian_in_place};
use crate::Complex64;

pub type Block = [[Complex64; 2]; 2];

/// A 2x2 matrix kernel with K_ab(x, y) = -K_ba(y, x).
pub struct Kernel2x2<'a> {
    eval: Box<dyn Fn(f64, f64) -> Block + Sync + 'a>,
    /// Set when K_22 carries a sgn(y - x) jump; only used to pick node budgets.
    pub sgn_block: bool,
}

impl<'a> Kernel2x2<'a> {
    pub fn new(eval: impl Fn(f64, f64) -> Block + Sync + 'a, sgn_block: bool) -> Self {
        Self { eval: Box::new(eval), sgn_block }
    }

    pub fn eval(&self, x: f64, y: f64) -> Block {
        (self.eval)(x, y)
    }
}

/// det(I - W^{1/2} K W^{1/2}) on the nodes of a real rule.
pub fn nystrom_det(kernel: impl Fn(f64, f64) -> Complex64 + Sync, rule: &QuadratureRule) -> Complex64 {
    let pairs = rule.real_pairs();
    let n = pairs.len();
    let rows: Vec<Vec<Complex64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (xi, wi) = pairs[i];
            (0..n)
                .map(|j| {
                    let (xj, wj) = pairs[j];
                    let id = if i == j { 1.0 } else { 0.0 };
                    Complex64::new(id, 0.0) - (wi * wj).sqrt() * kernel(xi, xj)
                })
                .collect()
        })
        .collect();
    let flat: Vec<Complex64> = rows.into_iter().flatten().collect();
    det(n, &flat)
}

/// The skew matrix M with M_{(i,a),(j,b)} = sqrt(w_i w_j) K_ab(x_i, x_j), rows
/// interleaved per node. Only the upper triangle is evaluated.
pub fn nystrom_matrix(kernel: &Kernel2x2<'_>, rule: &QuadratureRule) -> Vec<Complex64> {
    let pairs = rule.real_pairs();
    let n = pairs.len();
    let d = 2 * n;
    let rows: Vec<Vec<Complex64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (xi, wi) = pairs[i];
            let mut two = vec![Complex64::new(0.0, 0.0); 2 * d];
            for j in i..n {
                let (xj, wj) = pairs[j];
                let s = (wi * wj).sqrt();
                let k = kernel.eval(xi, xj);
                for a in 0..2 {
                    for b in 0..2 {
                        if i == j && b <= a {
                            continue;
                        }
                        two[a * d + 2 * j + b] = s * k[a][b];
                    }
                }
            }
            two
        })
        .collect();
    let mut m = vec![Complex64::new(0.0, 0.0); d * d];
    for (i, two) in rows.into_iter().enumerate() {
        for a in 0..2 {
            let r = 2 * i + a;
            for c in r + 1..d {
                let v = two[a * d + c];
                m[r * d + c] = v;
                m[c * d + r] = -v;
            }
        }
    }
    m
}

/// pf(J_d - M), the discretized Fredholm Pfaffian pf[J - K].
pub fn nystrom_pf(kernel: &Kernel2x2<'_>, rule: &QuadratureRule) -> Complex64 {
    let m = nystrom_matrix(kernel, rule);
    pf_j_minus(&m, 2 * rule.len())
}

/// pf(J_d - M) for an already assembled skew d x d matrix M (interleaved rows).
pub fn pf_j_minus(m: &[Complex64], d: usize) -> Complex64 {
    let mut a: Vec<Complex64> = m.iter().map(|v| -v).collect();
    for i in 0..d / 2 {
        a[(2 * i) * d + 2 * i + 1] += 1.0;
        a[(2 * i + 1) * d + 2 * i] -= 1.0;
    }
    let pf = pfaffian_in_place(&mut a, d);
    if cfg!(debug_assertions) {
        let dt = det_i_plus_jm(&m, d);
        debug_assert!(
            (pf * pf - dt).norm() <= 1e-9 * (1.0 + dt.norm()),
            "pf^2 = {} but det(I + J M) = {dt}",
            pf * pf
        );
    }
    pf
}

/// det(I + J_d M), whose square root (up to sign) is pf(J_d - M).
pub fn det_i_plus_jm(m: &[Complex64], d: usize) -> Complex64 {
    let mm = DMatrix::from_row_slice(d, d, m);
    let mut jm = DMatrix::<Complex64>::identity(d, d);
    for i in (0..d).step_by(2) {
        for c in 0..d {
            // (J M)_{i,c} = M_{i+1,c}, (J M)_{i+1,c} = -M_{i,c}
            jm[(i, c)] += mm[(i + 1, c)];
            jm[(i + 1, c)] -= mm[(i, c)];
        }
    }
    jm.determinant()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{gl_interval, halfline_rule};
    use crate::skewlin::{pfaffian, SkewMatrix};

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn zero_block() -> Block {
        [[c(0.0); 2]; 2]
    }

    #[test]
    fn zero_kernels() {
        let r = halfline_rule(16, 10.0).unwrap();
        assert_eq!(nystrom_det(|_, _| c(0.0), &r), c(1.0));
        let k = Kernel2x2::new(|_, _| zero_block(), false);
        assert!((nystrom_pf(&k, &r) - c(1.0)).norm() < 1e-15);
    }

    #[test]
    fn rank_one_determinant() {
        let r = halfline_rule(48, 40.0).unwrap();
        let u = |x: f64| (-x).exp();
        let v = |x: f64| (-0.5 * x).exp() * 0.7;
        let d = nystrom_det(|x, y| c(u(x) * v(y)), &r);
        // int_0^inf 0.7 e^{-1.5 x} dx
        assert!((d - c(1.0 - 0.7 / 1.5)).norm() < 1e-10);
    }

    #[test]
    fn det_converges_under_doubling() {
        let k = |x: f64, y: f64| c((-(x + y)).exp() * (x - y).cos() * 0.8);
        let a = nystrom_det(k, &halfline_rule(48, 40.0).unwrap());
        let b = nystrom_det(k, &halfline_rule(96, 40.0).unwrap());
        assert!((a - b).norm() < 1e-8);
    }

    #[test]
    fn rank_one_off_diagonal_coupling() {
        // Only K_12 = u(x) v(y) (and K_21 = -v(x) u(y)); pf^2 follows from the determinant route.
        let u = |x: f64| (-x).exp();
        let v = |x: f64| 0.6 * (-0.3 * x).exp();
        let k = Kernel2x2::new(
            move |x, y| {
                let mut b = zero_block();
                b[0][1] = c(u(x) * v(y));
                b[1][0] = c(-u(y) * v(x));
                b
            },
            false,
        );
        let r = halfline_rule(48, 40.0).unwrap();
        let pf = nystrom_pf(&k, &r);
        let m = nystrom_matrix(&k, &r);
        let dt = det_i_plus_jm(&m, 2 * r.len());
        assert!((pf * pf - dt).norm() < 1e-9);
        // pf(J - M) with M = w ⊗ e12-type rank one: det(I + J M) = (1 - <u, v>)^2
        let uv = 0.6 / 1.3;
        assert!((pf - c(1.0 - uv)).norm() < 1e-10, "{pf}");
    }

    #[test]
    fn series_route_matches() {
        // damped analytic test kernel
        let f = |x: f64| (-x).exp();
        let blk = move |x: f64, y: f64| -> Block {
            let k11 = 0.4 * (x - y) * f(x) * f(y);
            let k12 = 0.5 * f(x) * (-0.5 * y).exp() * (1.0 + 0.2 * x * y);
            let k21 = -0.5 * f(y) * (-0.5 * x).exp() * (1.0 + 0.2 * x * y);
            let k22 = 0.3 * (y - x).sin() * (-0.5 * (x + y)).exp();
            [[c(k11), c(k12)], [c(k21), c(k22)]]
        };
        let kern = Kernel2x2::new(blk, false);
        let r = halfline_rule(40, 40.0).unwrap();
        let pf = nystrom_pf(&kern, &r);

        let nodes = gl_interval(20, 0.0, 25.0);
        let mut series = c(1.0);
        let mut fact = 1.0;
        for k in 1..=4usize {
            fact *= k as f64;
            let mut idx = vec![0usize; k];
            let mut acc = c(0.0);
            'outer: loop {
                let xs: Vec<f64> = idx.iter().map(|&i| nodes[i].0).collect();
                let w: f64 = idx.iter().map(|&i| nodes[i].1).product();
                let m = SkewMatrix::from_upper(2 * k, |p, q| blk(xs[p / 2], xs[q / 2])[p % 2][q % 2]);
                acc += w * pfaffian(&m);
                for slot in idx.iter_mut() {
                    *slot += 1;
                    if *slot < nodes.len() {
                        continue 'outer;
                    }
                    *slot = 0;
                }
                break;
            }
            series += if k % 2 == 1 { -acc } else { acc } / fact;
        }
        assert!((series - pf).norm() < 1e-5, "series {series} vs pf {pf}");
    }
}
