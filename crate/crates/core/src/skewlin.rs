//! Pfaffians of dense skew-symmetric matrices and a catalog of Pfaffian identities.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Error, Result};
use crate::Complex64;

const SKEW_TOL: f64 = 1e-12;

/// Dense skew-symmetric complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewMatrix {
    order: usize,
    data: Vec<Complex64>,
}

impl SkewMatrix {
    /// Validates skew-symmetry to 1e-12 and then stores the exactly skew part.
    pub fn new(order: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != order * order {
            return domain(format!("expected {} entries, got {}", order * order, data.len()));
        }
        let mut m = Self { order, data };
        for i in 0..order {
            for j in i..order {
                let (a, b) = (m.data[i * order + j], m.data[j * order + i]);
                if (a + b).norm() > SKEW_TOL * (1.0 + a.norm()) {
                    return domain(format!("entries ({i},{j}) and ({j},{i}) are not skew"));
                }
                let s = 0.5 * (a - b);
                m.data[i * order + j] = s;
                m.data[j * order + i] = -s;
            }
        }
        Ok(m)
    }

    /// Builds the matrix from its strict upper triangle.
    pub fn from_upper(order: usize, f: impl Fn(usize, usize) -> Complex64) -> Self {
        let mut data = vec![Complex64::new(0.0, 0.0); order * order];
        for i in 0..order {
            for j in i + 1..order {
                let v = f(i, j);
                data[i * order + j] = v;
                data[j * order + i] = -v;
            }
        }
        Self { order, data }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.order + j]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn to_dmatrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.order, self.order, &self.data)
    }

    /// Standard symplectic form with 2x2 blocks [[0,1],[-1,0]] on the diagonal.
    pub fn j_interleaved(order: usize) -> Self {
        Self::from_upper(order, |i, j| {
            if i % 2 == 0 && j == i + 1 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
    }
}

/// Pfaffian by Parlett-Reid skew tridiagonalization with partial pivoting.
/// Odd order gives 0.
pub fn pfaffian(a: &SkewMatrix) -> Complex64 {
    let mut w = a.data.clone();
    pfaffian_in_place(&mut w, a.order)
}

/// Same as [`pfaffian`] on a raw row-major buffer, which is overwritten.
pub fn pfaffian_in_place(a: &mut [Complex64], n: usize) -> Complex64 {
    let zero = Complex64::new(0.0, 0.0);
    if n % 2 == 1 {
        return zero;
    }
    let mut pf = Complex64::new(1.0, 0.0);
    let mut k = 0;
    while k + 1 < n {
        let mut kp = k + 1;
        let mut best = a[(k + 1) * n + k].norm();
        for i in k + 2..n {
            let v = a[i * n + k].norm();
            if v > best {
                best = v;
                kp = i;
            }
        }
        if kp != k + 1 {
            for c in 0..n {
                a.swap((k + 1) * n + c, kp * n + c);
            }
            for r in 0..n {
                a.swap(r * n + k + 1, r * n + kp);
            }
            pf = -pf;
        }
        let piv = a[k * n + k + 1];
        if piv == zero {
            return zero;
        }
        pf *= piv;
        if k + 2 < n {
            let tau: Vec<Complex64> = (k + 2..n).map(|j| a[k * n + j] / piv).collect();
            let col: Vec<Complex64> = (k + 2..n).map(|i| a[i * n + k + 1]).collect();
            for (ii, i) in (k + 2..n).enumerate() {
                for (jj, j) in (k + 2..n).enumerate() {
                    a[i * n + j] += tau[ii] * col[jj] - col[ii] * tau[jj];
                }
            }
        }
        k += 2;
    }
    pf
}

/// Determinant of a general square matrix given row-major.
pub fn det(n: usize, data: &[Complex64]) -> Complex64 {
    if n == 0 {
        return Complex64::new(1.0, 0.0);
    }
    DMatrix::from_row_slice(n, n, data).determinant()
}

/// Tags of the executable identity catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Identity {
    Schur,
    SchurNl,
    SignPf,
    Block,
    DiagScale,
    Congruence,
    Rank2Det,
    Resum,
    AndreiefPf,
    FinFredPf,
    PfDetConj,
    PfSympl,
}

impl Identity {
    pub const ALL: [Identity; 12] = [
        Identity::Schur,
        Identity::SchurNl,
        Identity::SignPf,
        Identity::Block,
        Identity::DiagScale,
        Identity::Congruence,
        Identity::Rank2Det,
        Identity::Resum,
        Identity::AndreiefPf,
        Identity::FinFredPf,
        Identity::PfDetConj,
        Identity::PfSympl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Identity::Schur => "schur",
            Identity::SchurNl => "schur_nl",
            Identity::SignPf => "sign_pf",
            Identity::Block => "block",
            Identity::DiagScale => "diag_scale",
            Identity::Congruence => "congruence",
            Identity::Rank2Det => "rank2_det",
            Identity::Resum => "resum",
            Identity::AndreiefPf => "andreief_pf",
            Identity::FinFredPf => "fin_fredpf",
            Identity::PfDetConj => "pf_det_conj",
            Identity::PfSympl => "pf_sympl",
        }
    }

    /// Largest admissible size; the summation-heavy checks are capped at 8.
    pub fn max_size(self) -> usize {
        match self {
            Identity::SignPf | Identity::Resum | Identity::AndreiefPf => 8,
            _ => 40,
        }
    }

    /// Size used by the acceptance run.
    pub fn default_size(self) -> usize {
        match self {
            Identity::SignPf => 4,
            Identity::Resum => 4,
            Identity::AndreiefPf => 4,
            Identity::Block => 5,
            _ => 6,
        }
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Identity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Identity::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown identity tag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IdentityReport {
    pub name: String,
    pub residual: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Runs `trials` random instances of an identity and reports the worst
/// relative residual |lhs - rhs| / (1 + |rhs|).
pub fn identity_check(name: Identity, size: usize, trials: usize, seed: u64) -> Result<IdentityReport> {
    if size == 0 || size > name.max_size() {
        return domain(format!("size {size} outside 1..={} for {name}", name.max_size()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut record = |lhs: Complex64, rhs: Complex64| {
        worst = worst.max((lhs - rhs).norm() / (1.0 + rhs.norm()));
        count += 1;
    };
    match name {
        Identity::SignPf => {
            if size % 2 == 1 {
                return domain("sign_pf needs an even size");
            }
            for (m, s) in sign_configs(size, 4) {
                let (l, r) = sign_pf_sides(&m, &s);
                record(Complex64::new(l as f64, 0.0), Complex64::new(r as f64, 0.0));
            }
        }
        _ => {
            for _ in 0..trials {
                let (l, r) = random_instance(name, size, &mut rng)?;
                record(l, r);
            }
        }
    }
    Ok(IdentityReport { name: name.to_string(), residual: worst, trials: count, seed })
}

fn sign_configs(k: usize, m_max: i64) -> Vec<(Vec<i64>, Vec<i64>)> {
    let mut out = Vec::new();
    let total_m = (m_max as usize).pow(k as u32);
    for mi in 0..total_m {
        let mut m = Vec::with_capacity(k);
        let mut r = mi;
        for _ in 0..k {
            m.push((r % m_max as usize) as i64 + 1);
            r /= m_max as usize;
        }
        for si in 0..(1usize << k) {
            let s = (0..k).map(|a| if si >> a & 1 == 1 { -1 } else { 1 }).collect();
            out.push((m.clone(), s));
        }
    }
    out
}

/// Both sides of the integer sign-Pfaffian identity, with the prod(sigma) factor.
pub fn sign_pf_sides(m: &[i64], s: &[i64]) -> (i64, i64) {
    let k = m.len();
    let entry = |a: usize, b: usize| -> i64 {
        let base = -s[a] * s[b];
        base.pow(m[a].min(m[b]) as u32) * (s[b] * m[b] - s[a] * m[a]).signum()
    };
    let mat = SkewMatrix::from_upper(k, |a, b| Complex64::new(entry(a, b) as f64, 0.0));
    let pf = pfaffian(&mat).re.round() as i64;
    let mut prod: i64 = s.iter().product();
    for a in 0..k {
        for b in a + 1..k {
            let base = -s[a] * s[b];
            prod *= base.pow(m[a].min(m[b]) as u32 + 1) * (s[a] * m[a] - s[b] * m[b]).signum();
        }
    }
    (pf, prod)
}

fn unit(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.gen::<f64>(), rng.gen::<f64>())
}

fn rand_general(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    (0..n * n).map(|_| unit(rng)).collect()
}

fn rand_skew(n: usize, rng: &mut ChaCha8Rng) -> SkewMatrix {
    let raw = rand_general(n, rng);
    SkewMatrix::from_upper(n, |i, j| raw[i * n + j] - raw[j * n + i])
}

fn to_dm(n: usize, v: &[Complex64]) -> DMatrix<Complex64> {
    DMatrix::from_row_slice(n, n, v)
}

fn pf_dm(m: &DMatrix<Complex64>) -> Complex64 {
    let n = m.nrows();
    let mut buf: Vec<Complex64> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            buf.push(m[(i, j)]);
        }
    }
    pfaffian_in_place(&mut buf, n)
}

fn skew_dm(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
    rand_skew(n, rng).to_dmatrix()
}

fn random_instance(name: Identity, size: usize, rng: &mut ChaCha8Rng) -> Result<(Complex64, Complex64)> {
    let one = Complex64::new(1.0, 0.0);
    let even = |what: &str| -> Result<()> {
        if size % 2 == 1 {
            domain(format!("{what} needs an even size"))
        } else {
            Ok(())
        }
    };
    match name {
        Identity::Schur => {
            even("schur")?;
            let x: Vec<Complex64> = (0..size).map(|_| unit(rng) + 0.2).collect();
            let m = SkewMatrix::from_upper(size, |a, b| (x[a] - x[b]) / (x[a] + x[b]));
            let mut prod = one;
            for a in 0..size {
                for b in a + 1..size {
                    prod *= (x[a] - x[b]) / (x[a] + x[b]);
                }
            }
            Ok((pfaffian(&m), prod))
        }
        Identity::SchurNl => {
            even("schur_nl")?;
            let y: Vec<Complex64> = (0..size).map(|_| unit(rng) * 0.6).collect();
            let f = |a: usize, b: usize| (y[b] - y[a]) / (y[a] * y[b] - 1.0);
            let m = SkewMatrix::from_upper(size, f);
            let mut prod = one;
            for a in 0..size {
                for b in a + 1..size {
                    prod *= f(a, b);
                }
            }
            Ok((pfaffian(&m), prod))
        }
        Identity::Block => {
            // Both parities: k = size and k = size - 1 (when positive).
            let k = if rng.gen::<bool>() || size == 1 { size } else { size - 1 };
            let a = skew_dm(k, rng);
            let b = skew_dm(k, rng);
            let u: Vec<Complex64> = (0..k).map(|_| unit(rng)).collect();
            let v: Vec<Complex64> = (0..k).map(|_| unit(rng)).collect();
            let mut big = DMatrix::zeros(2 * k, 2 * k);
            for i in 0..k {
                for j in 0..k {
                    big[(i, j)] = a[(i, j)];
                    big[(k + i, k + j)] = b[(i, j)];
                    big[(i, k + j)] = u[i] * v[j];
                    big[(k + j, i)] = -u[i] * v[j];
                }
            }
            let lhs = pf_dm(&big);
            let rhs = if k % 2 == 0 {
                pf_dm(&a) * pf_dm(&b)
            } else {
                let border = |m: &DMatrix<Complex64>, w: &[Complex64]| {
                    let mut e = DMatrix::zeros(k + 1, k + 1);
                    for i in 0..k {
                        for j in 0..k {
                            e[(i, j)] = m[(i, j)];
                        }
                        e[(i, k)] = w[i];
                        e[(k, i)] = -w[i];
                    }
                    pf_dm(&e)
                };
                border(&a, &u) * border(&b, &v)
            };
            Ok((lhs, rhs))
        }
        Identity::DiagScale => {
            let k = size;
            let a = skew_dm(k, rng);
            let b = skew_dm(k, rng);
            let u = to_dm(k, &rand_general(k, rng));
            let d: Vec<Complex64> = (0..2 * k).map(|_| unit(rng) + 0.1).collect();
            let mut m = DMatrix::zeros(2 * k, 2 * k);
            for i in 0..k {
                for j in 0..k {
                    m[(i, j)] = a[(i, j)];
                    m[(k + i, k + j)] = b[(i, j)];
                    m[(i, k + j)] = u[(i, j)];
                    m[(k + j, i)] = -u[(i, j)];
                }
            }
            let dm = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d.clone()));
            let rhs = pf_dm(&(&dm * &m * &dm));
            let lhs = d.iter().product::<Complex64>() * pf_dm(&m);
            Ok((lhs, rhs))
        }
        Identity::Congruence => {
            even("congruence")?;
            let a = skew_dm(size, rng);
            let b = to_dm(size, &rand_general(size, rng));
            let lhs = pf_dm(&(&b * &a * b.transpose()));
            Ok((lhs, b.determinant() * pf_dm(&a)))
        }
        Identity::Rank2Det => {
            let n = size;
            let a = skew_dm(n, rng) * Complex64::new(0.3, 0.0);
            let b = skew_dm(n, rng) * Complex64::new(0.3, 0.0);
            let u = nalgebra::DVector::from_vec((0..n).map(|_| unit(rng)).collect());
            let v = nalgebra::DVector::from_vec((0..n).map(|_| unit(rng)).collect());
            let r = &u * v.transpose();
            let id = DMatrix::<Complex64>::identity(n, n);
            let mut p = DMatrix::zeros(2 * n, 2 * n);
            let mut q = DMatrix::zeros(2 * n, 2 * n);
            for i in 0..n {
                for j in 0..n {
                    p[(i, j)] = id[(i, j)];
                    p[(n + i, n + j)] = id[(i, j)];
                    p[(i, n + j)] = b[(i, j)];
                    p[(n + i, j)] = a[(i, j)];
                    q[(i, j)] = r[(i, j)];
                    q[(n + i, n + j)] = r[(j, i)];
                }
            }
            let lhs = (&p + &q).determinant();
            let iab = &id - &a * &b;
            let w = iab
                .lu()
                .solve(&v)
                .ok_or_else(|| Error::Numerical("I - AB is singular".into()))?;
            let s = one + u.dot(&w);
            Ok((lhs, p.determinant() * s * s))
        }
        Identity::Resum => {
            even("resum")?;
            let n = size / 2;
            let x = 3usize;
            let w: Vec<f64> = (0..x).map(|_| 0.2 + rng.gen::<f64>()).collect();
            let ka = rand_skew(x, rng);
            let kb = rand_skew(x, rng);
            let kc = rand_skew(x, rng);
            let mut lhs = Complex64::new(0.0, 0.0);
            let mut rhs = Complex64::new(0.0, 0.0);
            for_each_tuple(x, size, |pts| {
                let wt: f64 = pts.iter().map(|&i| w[i]).product();
                let sub = |k: &SkewMatrix, lo: usize, hi: usize| {
                    pfaffian(&SkewMatrix::from_upper(hi - lo, |a, b| k.get(pts[lo + a], pts[lo + b])))
                };
                let pc = sub(&kc, 0, size);
                let ab = SkewMatrix::from_upper(size, |a, b| {
                    ka.get(pts[a], pts[b]) + kb.get(pts[a], pts[b])
                });
                lhs += wt * pfaffian(&ab) * pc / factorial(size);
                for k1 in 0..=n {
                    let split = 2 * k1;
                    rhs += wt * sub(&ka, 0, split) * sub(&kb, split, size) * pc
                        / (factorial(split) * factorial(size - split));
                }
            });
            Ok((lhs, rhs))
        }
        Identity::AndreiefPf => {
            let k = size;
            let x = 3usize;
            let mu: Vec<f64> = (0..x).map(|_| 0.2 + rng.gen::<f64>()).collect();
            let phi: Vec<Vec<Complex64>> = (0..k).map(|_| (0..x).map(|_| unit(rng)).collect()).collect();
            // a_raw[a][b][x][x']; A_ab(x,x') = raw_ab(x,x') - raw_ba(x',x)
            let raw: Vec<Complex64> = (0..k * k * x * x).map(|_| unit(rng)).collect();
            let ridx = |a: usize, b: usize, p: usize, q: usize| ((a * k + b) * x + p) * x + q;
            let aker = |a: usize, b: usize, p: usize, q: usize| raw[ridx(a, b, p, q)] - raw[ridx(b, a, q, p)];
            let uker: Vec<Complex64> = (0..k * k * x).map(|_| unit(rng)).collect();
            let uk = |a: usize, b: usize, p: usize| uker[(a * k + b) * x + p];
            let bm = rand_skew(k, rng);
            let mut lhs = Complex64::new(0.0, 0.0);
            for_each_tuple(x, k, |pts| {
                let mut wt = Complex64::new(1.0, 0.0);
                for a in 0..k {
                    wt *= mu[pts[a]] * phi[a][pts[a]];
                }
                let m = SkewMatrix::from_upper(2 * k, |i, j| match (i < k, j < k) {
                    (true, true) => aker(i, j, pts[i], pts[j]),
                    (true, false) => uk(i, j - k, pts[i]),
                    (false, false) => bm.get(i - k, j - k),
                    (false, true) => unreachable!(),
                });
                lhs += wt * pfaffian(&m);
            });
            let int_a = |a: usize, b: usize| {
                let mut s = Complex64::new(0.0, 0.0);
                for p in 0..x {
                    for q in 0..x {
                        s += mu[p] * mu[q] * phi[a][p] * phi[b][q] * aker(a, b, p, q);
                    }
                }
                s
            };
            let int_u = |a: usize, b: usize| (0..x).map(|p| mu[p] * phi[a][p] * uk(a, b, p)).sum::<Complex64>();
            let m = SkewMatrix::from_upper(2 * k, |i, j| match (i < k, j < k) {
                (true, true) => int_a(i, j),
                (true, false) => int_u(i, j - k),
                (false, false) => bm.get(i - k, j - k),
                (false, true) => unreachable!(),
            });
            Ok((lhs, pfaffian(&m)))
        }
        Identity::FinFredPf => {
            even("fin_fredpf")?;
            let a = skew_dm(size, rng) * Complex64::new(0.5, 0.0);
            let j = SkewMatrix::j_interleaved(size).to_dmatrix();
            let pf = pf_dm(&(&j + &a));
            let id = DMatrix::<Complex64>::identity(size, size);
            Ok((pf * pf, (&id - &j * &a).determinant()))
        }
        Identity::PfDetConj => {
            even("pf_det_conj")?;
            let k = skew_dm(size, rng) * Complex64::new(0.5, 0.0);
            let l = to_dm(size, &rand_general(size, rng)) * Complex64::new(0.3, 0.0);
            let j = SkewMatrix::j_interleaved(size).to_dmatrix();
            let id = DMatrix::<Complex64>::identity(size, size);
            let jk = &j + &k;
            let lhs = pf_dm(&((&id + l.transpose()) * &jk * (&id + &l)));
            Ok((lhs, (&id + &l).determinant() * pf_dm(&jk)))
        }
        Identity::PfSympl => {
            even("pf_sympl")?;
            let n = size / 2;
            // Symplectic for J = [[0, I], [-I, 0]]: shears by symmetric blocks
            // and the block map diag(G, G^{-T}).
            let sym = |rng: &mut ChaCha8Rng| {
                let r = to_dm(n, &rand_general(n, rng));
                (&r + r.transpose()) * Complex64::new(0.3, 0.0)
            };
            let idn = DMatrix::<Complex64>::identity(n, n);
            let mut upper = DMatrix::<Complex64>::identity(size, size);
            upper.view_mut((0, n), (n, n)).copy_from(&sym(rng));
            let mut lower = DMatrix::<Complex64>::identity(size, size);
            lower.view_mut((n, 0), (n, n)).copy_from(&sym(rng));
            let g = &idn + to_dm(n, &rand_general(n, rng)) * Complex64::new(0.3, 0.0);
            let ginv_t = g
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Numerical("singular block".into()))?
                .transpose();
            let mut diag = DMatrix::<Complex64>::zeros(size, size);
            diag.view_mut((0, 0), (n, n)).copy_from(&g);
            diag.view_mut((n, n), (n, n)).copy_from(&ginv_t);
            let m = upper * diag * lower;
            let mut j = DMatrix::<Complex64>::zeros(size, size);
            j.view_mut((0, n), (n, n)).copy_from(&idn);
            j.view_mut((n, 0), (n, n)).copy_from(&(-&idn));
            let k = skew_dm(size, rng) * Complex64::new(0.5, 0.0);
            let lhs = pf_dm(&(&j + &k));
            let rhs = pf_dm(&(&j + m.transpose() * &k * &m));
            Ok((lhs, rhs))
        }
        Identity::SignPf => unreachable!(),
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn for_each_tuple(x: usize, len: usize, mut f: impl FnMut(&[usize])) {
    let mut pts = vec![0usize; len];
    loop {
        f(&pts);
        let mut i = 0;
        loop {
            if i == len {
                return;
            }
            pts[i] += 1;
            if pts[i] < x {
                break;
            }
            pts[i] = 0;
            i += 1;
        }
    }
}
