//! GOE Tracy-Widom distribution as a Fredholm Pfaffian, with the Airy-square
//! determinant as an independent check.

use nalgebra::DMatrix;

use crate::error::{domain, Result};
use crate::fredholm::{nystrom_det, nystrom_pf, Block, Kernel2x2};
use crate::quad::{gl_interval, halfline_rule};
use crate::Complex64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoeParams {
    pub r: f64,
    /// Upper limit of the inner xi-integral defining the Airy kernel.
    pub xi_cut: f64,
    pub nodes: usize,
    pub lambda: f64,
}

impl GoeParams {
    /// Budgets for the sgn-block Pfaffian: 80 nodes, Lambda = 16 + max(0, -2r).
    pub fn new(r: f64) -> Result<Self> {
        Self::with_budget(r, 80)
    }

    pub fn with_budget(r: f64, nodes: usize) -> Result<Self> {
        if !(-6.0..=6.0).contains(&r) {
            return domain(format!("r must lie in [-6, 6], got {r}"));
        }
        Ok(Self {
            r,
            xi_cut: 30.0 - (2.0 * r).min(0.0),
            nodes,
            lambda: 16.0 + (-2.0 * r).max(0.0),
        })
    }
}

fn xi_nodes(xi_cut: f64) -> Vec<(f64, f64)> {
    let panels = (xi_cut / 2.0).ceil() as usize;
    let h = xi_cut / panels as f64;
    (0..panels)
        .flat_map(|p| gl_interval(16, p as f64 * h, (p + 1) as f64 * h))
        .collect()
}

/// Ai and Ai' of x + xi at every inner node.
fn airy_profile(x: f64, xi: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    xi.iter()
        .map(|&(s, _)| {
            let z = x + s;
            if z > 30.0 {
                (0.0, 0.0)
            } else {
                crate::quad::airy_unchecked(z)
            }
        })
        .unzip()
}

fn half_sgn(x: f64) -> f64 {
    if x > 0.0 {
        0.5
    } else if x < 0.0 {
        -0.5
    } else {
        0.0
    }
}

/// Sign of K_12 = s Ai(l1 + r) / 2. With s = -1 the first Fredholm term is
/// +(1/2) int Ai and pf[J - K_r] exceeds 1; s = +1 reproduces F_GOE.
const OFFDIAG: f64 = 1.0;

/// The 2x2 block K_r(l1, l2), with the (1,1) entry by direct xi-quadrature of
/// (1/2) int [Ai'(l1+r+xi) Ai(l2+r+xi) - Ai(l1+r+xi) Ai'(l2+r+xi)].
pub fn kr_block(l1: f64, l2: f64, p: &GoeParams) -> [[f64; 2]; 2] {
    let xi = xi_nodes(p.xi_cut);
    let (a1, d1) = airy_profile(l1 + p.r, &xi);
    let (a2, d2) = airy_profile(l2 + p.r, &xi);
    let k11 = 0.5 * (0..xi.len()).map(|k| xi[k].1 * (d1[k] * a2[k] - a1[k] * d2[k])).sum::<f64>();
    let ai = |x: f64| crate::quad::airy_ai(x);
    [[k11, OFFDIAG * 0.5 * ai(l1 + p.r)], [-OFFDIAG * 0.5 * ai(l2 + p.r), half_sgn(l2 - l1)]]
}

/// pf[J - K_r] on L^2([0, inf)), the Pfaffian route. The jump of sgn(l2 - l1) makes the
/// Nystrom error O(n^-2), so the value is extrapolated from n and n/2 nodes.
pub fn fgoe_pf(p: &GoeParams) -> Result<f64> {
    if p.nodes < 8 {
        return domain(format!("need at least 8 nodes, got {}", p.nodes));
    }
    let half = GoeParams { nodes: p.nodes / 2, ..*p };
    Ok((4.0 * pf_with_sign(p, OFFDIAG)? - pf_with_sign(&half, OFFDIAG)?) / 3.0)
}

fn pf_with_sign(p: &GoeParams, sign: f64) -> Result<f64> {
    let rule = halfline_rule(p.nodes, p.lambda)?;
    let xi = xi_nodes(p.xi_cut);
    // Airy profiles per node, so the inner integral is a dot product.
    let prof: Vec<(Vec<f64>, Vec<f64>)> =
        rule.real_pairs().iter().map(|&(x, _)| airy_profile(x + p.r, &xi)).collect();
    let xs: Vec<f64> = rule.real_pairs().iter().map(|q| q.0).collect();
    let idx = |x: f64| xs.iter().position(|&y| y == x).expect("node lookup");
    let r = p.r;
    let kern = Kernel2x2::new(
        |l1, l2| -> Block {
            let (i, j) = (idx(l1), idx(l2));
            let (a1, d1) = &prof[i];
            let (a2, d2) = &prof[j];
            let k11 = 0.5 * (0..xi.len()).map(|k| xi[k].1 * (d1[k] * a2[k] - a1[k] * d2[k])).sum::<f64>();
            let ai = |x: f64| crate::quad::airy_ai(x);
            let c = |v: f64| Complex64::new(v, 0.0);
            [[c(k11), c(sign * 0.5 * ai(l1 + r))], [c(-sign * 0.5 * ai(l2 + r)), c(half_sgn(l2 - l1))]]
        },
        true,
    );
    Ok(nystrom_pf(&kern, &rule).re)
}

/// det[I - B_r] with B_r(x, y) = Ai(x + y + r), the determinant route.
pub fn fgoe_det(r: f64, nodes: usize) -> Result<f64> {
    if !(-6.0..=6.0).contains(&r) {
        return domain(format!("r must lie in [-6, 6], got {r}"));
    }
    let rule = halfline_rule(nodes, 16.0 + (-r).max(0.0))?;
    Ok(nystrom_det(|x, y| Complex64::new(crate::quad::airy_ai(x + y + r), 0.0), &rule).re)
}

/// det[[I - K12^T, K22], [-K11, I - K12]] on the discretization, with K11
/// optionally replaced by its part -d2 K_Ai (the rank-one -Ai x Ai / 2 dropped).
pub fn block_det(p: &GoeParams, drop_rank_one: bool) -> Result<f64> {
    let rule = halfline_rule(p.nodes, p.lambda)?;
    let pr = rule.real_pairs();
    let n = pr.len();
    let xi = xi_nodes(p.xi_cut);
    let prof: Vec<(Vec<f64>, Vec<f64>)> = pr.iter().map(|&(x, _)| airy_profile(x + p.r, &xi)).collect();
    let ai: Vec<f64> = pr.iter().map(|&(x, _)| crate::quad::airy_ai(x + p.r)).collect();
    let mut m = DMatrix::<f64>::identity(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let s = (pr[i].1 * pr[j].1).sqrt();
            let (a1, d1) = &prof[i];
            let (a2, d2) = &prof[j];
            // -d2 K_Ai(l1, l2) = -int Ai(l1 + xi) Ai'(l2 + xi)
            let ka = -(0..xi.len()).map(|k| xi[k].1 * a1[k] * d2[k]).sum::<f64>();
            let k11 = if drop_rank_one {
                ka
            } else {
                0.5 * (0..xi.len()).map(|k| xi[k].1 * (d1[k] * a2[k] - a1[k] * d2[k])).sum::<f64>()
            };
            // K12(l_i, l_j) = OFFDIAG Ai(l_i + r)/2, K12^T(i, j) = K12(l_j, l_i)
            m[(i, j)] -= s * OFFDIAG * 0.5 * ai[j];
            m[(i, n + j)] += s * half_sgn(pr[j].0 - pr[i].0);
            m[(n + i, j)] -= s * k11;
            m[(n + i, n + j)] -= s * OFFDIAG * 0.5 * ai[i];
        }
    }
    Ok(m.determinant())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_entries() {
        let p = GoeParams::new(0.0).unwrap();
        let b = kr_block(0.7, 0.7, &p);
        assert!(b[0][0].abs() < 1e-15 && b[1][1] == 0.0);
        let b = kr_block(0.3, 1.1, &p);
        let bt = kr_block(1.1, 0.3, &p);
        assert!((b[0][0] + bt[0][0]).abs() < 1e-14);
        assert_eq!(b[1][1], 0.5);
        assert!((b[1][0] + bt[0][1]).abs() < 1e-15);
    }

    #[test]
    fn opposite_offdiagonal_sign_is_not_a_distribution() {
        let p = GoeParams::with_budget(0.0, 48).unwrap();
        assert!(pf_with_sign(&p, -OFFDIAG).unwrap() > 1.1);
    }

    #[test]
    fn integration_by_parts_form() {
        let p = GoeParams::new(0.0).unwrap();
        let (l1, l2) = (0.3, 1.1);
        let xi = xi_nodes(p.xi_cut);
        let (a1, _) = airy_profile(l1, &xi);
        let (_, d2) = airy_profile(l2, &xi);
        let d2k = (0..xi.len()).map(|k| xi[k].1 * a1[k] * d2[k]).sum::<f64>();
        let other = -d2k - 0.5 * crate::quad::airy_ai(l1) * crate::quad::airy_ai(l2);
        assert!((kr_block(l1, l2, &p)[0][0] - other).abs() < 1e-8);
    }

    #[test]
    fn determinant_route() {
        // F_GOE(6) = 1 - 1.94e-6, so "1 within 1e-8" does not hold for the true value
        let far = fgoe_det(6.0, 48).unwrap();
        assert!(far < 1.0 && (far - 1.0).abs() < 1e-5);
        let a = fgoe_det(0.0, 48).unwrap();
        let b = fgoe_det(0.0, 96).unwrap();
        assert!((a - b).abs() < 1e-8);
        let mut prev = 0.0;
        for k in -5..=5 {
            let v = fgoe_det(k as f64, 48).unwrap();
            assert!((0.0..=1.0).contains(&v) && v >= prev - 1e-12, "r={k} v={v}");
            prev = v;
        }
    }

    #[test]
    fn pfaffian_matches_determinant() {
        for r in [-2.0, 0.0, 2.0] {
            let pf = fgoe_pf(&GoeParams::new(r).unwrap()).unwrap();
            let dt = fgoe_det(r, 48).unwrap();
            assert!((pf - dt).abs() < 5e-4, "r={r}: pf {pf} det {dt}");
        }
        let far = fgoe_pf(&GoeParams::new(6.0).unwrap()).unwrap();
        assert!((far - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rank_one_part_is_invisible() {
        let p = GoeParams::with_budget(0.0, 40).unwrap();
        let full = block_det(&p, false).unwrap();
        let part = block_det(&p, true).unwrap();
        assert!((full - part).abs() < 1e-8, "{full} vs {part}");
        // and the block layout reproduces pf^2
        let pf = pf_with_sign(&p, OFFDIAG).unwrap();
        assert!((pf * pf - full).abs() < 1e-9);
    }
}
