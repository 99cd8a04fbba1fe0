//! Continuous-time Monte Carlo for ASEP with flat and half-flat initial data.
//!
//! Particles jump right at rate p and left at rate q = 1 - p on the window
//! -L..=L with closed ends. The flux counter tracks jumps across the bond
//! (0, 1): 1 -> 0 counts +1 and 0 -> 1 counts -1, and h(t, 0) = 2 N_flux.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::qcalc::{qexp, QContext};
use crate::Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum InitialData {
    /// Even sites occupied.
    Flat,
    /// Sites 2, 4, 6, ... occupied.
    HalfFlat,
    /// Even sites greater than -x occupied.
    HalfFlatShifted(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub p: f64,
    pub q_rate: f64,
    pub t: f64,
    pub window: usize,
    pub init: InitialData,
    pub seed: u64,
}

impl SimConfig {
    /// Smallest admissible window for time t: ceil(4t) + 20.
    pub fn min_window(t: f64) -> usize {
        (4.0 * t).ceil() as usize + 20
    }

    pub fn new(p: f64, t: f64, init: InitialData, seed: u64) -> Result<Self> {
        let cfg = Self { p, q_rate: 1.0 - p, t, window: Self::min_window(t.max(0.0)), init, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_window(mut self, window: usize) -> Result<Self> {
        self.window = window;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.p) {
            return domain(format!("p must lie in [0, 1/2), got {}", self.p));
        }
        if (self.p + self.q_rate - 1.0).abs() > 1e-14 {
            return domain("p + q must equal 1");
        }
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return domain(format!("t must be a finite nonnegative time, got {}", self.t));
        }
        if self.window < Self::min_window(self.t) {
            return domain(format!("window {} below ceil(4t)+20 = {}", self.window, Self::min_window(self.t)));
        }
        if let InitialData::HalfFlatShifted(x) = self.init {
            if x.unsigned_abs() as usize + 2 > self.window {
                return domain(format!("shift {x} does not fit in the window"));
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.p / self.q_rate
    }
}

/// Bonds (i, i+1) grouped by which jump they allow, with O(1) insert and remove.
struct BondSet {
    items: Vec<usize>,
    pos: Vec<usize>,
}

const ABSENT: usize = usize::MAX;

impl BondSet {
    fn new(n: usize) -> Self {
        Self { items: Vec::with_capacity(n), pos: vec![ABSENT; n] }
    }

    fn insert(&mut self, b: usize) {
        if self.pos[b] == ABSENT {
            self.pos[b] = self.items.len();
            self.items.push(b);
        }
    }

    fn remove(&mut self, b: usize) {
        let i = self.pos[b];
        if i != ABSENT {
            let last = self.items.pop().expect("nonempty");
            if last != b {
                self.items[i] = last;
                self.pos[last] = i;
            }
            self.pos[b] = ABSENT;
        }
    }
}

/// State of one trajectory on sites -L..=L, stored at offset L.
struct Lattice {
    occ: Vec<bool>,
    right: BondSet,
    left: BondSet,
    offset: i64,
    flux: i64,
}

impl Lattice {
    fn new(window: usize, init: InitialData) -> Self {
        let n = 2 * window + 1;
        let offset = window as i64;
        let occ: Vec<bool> = (0..n as i64)
            .map(|i| {
                let y = i - offset;
                match init {
                    InitialData::Flat => y.rem_euclid(2) == 0,
                    InitialData::HalfFlat => y > 0 && y % 2 == 0,
                    InitialData::HalfFlatShifted(x) => y > -x && y.rem_euclid(2) == 0,
                }
            })
            .collect();
        let mut lat = Self { occ, right: BondSet::new(n - 1), left: BondSet::new(n - 1), offset, flux: 0 };
        for b in 0..n - 1 {
            lat.refresh(b);
        }
        lat
    }

    fn refresh(&mut self, b: usize) {
        match (self.occ[b], self.occ[b + 1]) {
            (true, false) => {
                self.right.insert(b);
                self.left.remove(b);
            }
            (false, true) => {
                self.left.insert(b);
                self.right.remove(b);
            }
            _ => {
                self.right.remove(b);
                self.left.remove(b);
            }
        }
    }

    fn flip(&mut self, b: usize) {
        self.occ.swap(b, b + 1);
        if b > 0 {
            self.refresh(b - 1);
        }
        self.refresh(b);
        if b + 2 < self.occ.len() {
            self.refresh(b + 1);
        }
    }

    fn run(&mut self, rate_right: f64, rate_left: f64, t: f64, rng: &mut ChaCha8Rng) {
        let bond0 = self.offset as usize; // bond between sites 0 and 1
        let mut now = 0.0;
        loop {
            let (nr, nl) = (self.right.items.len() as f64, self.left.items.len() as f64);
            let total = rate_right * nr + rate_left * nl;
            if total <= 0.0 {
                return;
            }
            now += -(1.0 - rng.gen::<f64>()).ln() / total;
            if now > t {
                return;
            }
            let u = rng.gen::<f64>() * total;
            if u < rate_right * nr {
                let b = self.right.items[((u / rate_right) as usize).min(self.right.items.len() - 1)];
                if b == bond0 {
                    self.flux -= 1;
                }
                self.flip(b);
            } else {
                let v = (u - rate_right * nr) / rate_left;
                let b = self.left.items[(v as usize).min(self.left.items.len() - 1)];
                if b == bond0 {
                    self.flux += 1;
                }
                self.flip(b);
            }
        }
    }

    fn count_upto(&self, x: i64) -> i64 {
        let last = (x + self.offset).min(self.occ.len() as i64 - 1);
        if last < 0 {
            return 0;
        }
        self.occ[..=last as usize].iter().filter(|&&o| o).count() as i64
    }

    #[cfg(test)]
    fn particles(&self) -> usize {
        self.occ.iter().filter(|&&o| o).count()
    }
}

fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn run_one(cfg: &SimConfig, rate_right: f64, rate_left: f64, index: u64) -> Lattice {
    let mut rng = trajectory_rng(cfg.seed, index);
    let mut lat = Lattice::new(cfg.window, cfg.init);
    lat.run(rate_right, rate_left, cfg.t, &mut rng);
    lat
}

/// h(t, 0) of trajectory number 0.
pub fn simulate_height(cfg: &SimConfig) -> Result<i64> {
    cfg.validate()?;
    Ok(2 * run_one(cfg, cfg.p, cfg.q_rate, 0).flux)
}

/// N_x(t), the number of particles at sites <= x, of trajectory number 0.
pub fn simulate_halfflat_n(cfg: &SimConfig, x: i64) -> Result<i64> {
    cfg.validate()?;
    if x.unsigned_abs() as usize > cfg.window {
        return domain(format!("site {x} outside the window"));
    }
    Ok(run_one(cfg, cfg.p, cfg.q_rate, 0).count_upto(x))
}

/// Which integer a trajectory reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Statistic {
    /// h(t, 0) / 2.
    HalfHeight,
    /// N_x(t).
    Count(i64),
}

const CHUNK: usize = 4096;

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return domain("workers must be positive");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Numerical(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Raw statistic of trajectories 0..samples, independent of `workers`.
pub fn sample_statistic(cfg: &SimConfig, stat: Statistic, samples: usize, workers: usize) -> Result<Vec<i64>> {
    sample_with_rates(cfg, cfg.p, cfg.q_rate, stat, samples, workers)
}

fn sample_with_rates(
    cfg: &SimConfig,
    rate_right: f64,
    rate_left: f64,
    stat: Statistic,
    samples: usize,
    workers: usize,
) -> Result<Vec<i64>> {
    cfg.validate()?;
    if let Statistic::Count(x) = stat {
        if x.unsigned_abs() as usize > cfg.window {
            return domain(format!("site {x} outside the window"));
        }
    }
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<Vec<i64>> = with_workers(workers, || {
        (0..chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(samples);
                (lo..hi)
                    .map(|i| {
                        let lat = run_one(cfg, rate_right, rate_left, i as u64);
                        match stat {
                            Statistic::HalfHeight => lat.flux,
                            Statistic::Count(x) => lat.count_upto(x),
                        }
                    })
                    .collect()
            })
            .collect()
    })?;
    Ok(parts.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Observable {
    /// tau^{m h(t,0) / 2}.
    TauPowHalfHeight(u32),
    /// tau^{m N_x(t)}.
    TauPowN(u32, i64),
    /// exp_tau(zeta tau^{h(t,0)/2}) with xi = tau^{1/4}.
    ExpTauGen(Complex64),
}

impl Observable {
    pub fn statistic(&self) -> Statistic {
        match *self {
            Observable::TauPowHalfHeight(_) | Observable::ExpTauGen(_) => Statistic::HalfHeight,
            Observable::TauPowN(_, x) => Statistic::Count(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEnsemble {
    pub samples: usize,
    pub mean: Complex64,
    pub stderr: f64,
    pub observable: Observable,
    pub config: SimConfig,
}

/// Sample mean and standard error of an observable evaluated on raw statistics.
pub fn estimate(values: &[i64], obs: Observable, tau: f64) -> Result<(Complex64, f64)> {
    let mut cache: HashMap<i64, Complex64> = HashMap::new();
    let ctx = QContext::new(tau)?;
    let mut f = |v: i64| -> Result<Complex64> {
        if let Some(c) = cache.get(&v) {
            return Ok(*c);
        }
        let val = match obs {
            Observable::TauPowHalfHeight(m) | Observable::TauPowN(m, _) => {
                Complex64::new(tau.powf(m as f64 * v as f64), 0.0)
            }
            Observable::ExpTauGen(zeta) => {
                let xi = Complex64::new(tau.powf(0.25), 0.0);
                qexp(zeta * tau.powf(v as f64), tau, xi, &ctx)?.value
            }
        };
        cache.insert(v, val);
        Ok(val)
    };
    let n = values.len();
    if n == 0 {
        return domain("no samples");
    }
    // sums in index order, so the result does not depend on scheduling
    let mut sum = Complex64::new(0.0, 0.0);
    let mut sq = 0.0;
    for &v in values {
        let x = f(v)?;
        sum += x;
        sq += x.norm_sqr();
    }
    let mean = sum / n as f64;
    let var = if n > 1 { ((sq - n as f64 * mean.norm_sqr()) / (n - 1) as f64).max(0.0) } else { 0.0 };
    Ok((mean, (var / n as f64).sqrt()))
}

pub fn mc_expectation(obs: Observable, cfg: &SimConfig, samples: usize, workers: usize) -> Result<SimEnsemble> {
    if let Observable::ExpTauGen(z) = obs {
        let bound = cfg.tau().powf(0.25);
        if z.norm() >= bound {
            return domain(format!("|zeta| must be below tau^(1/4) = {bound}"));
        }
    }
    let raw = sample_statistic(cfg, obs.statistic(), samples, workers)?;
    let (mean, stderr) = estimate(&raw, obs, cfg.tau())?;
    Ok(SimEnsemble { samples, mean, stderr, observable: obs, config: *cfg })
}

/// Exact law of the flux across bond (0, 1) on a ring with flat data, by
/// uniformization of the generator on the fixed-particle-number sector.
pub fn exact_ring_flux_law(p: f64, t: f64, ring: usize) -> Result<Vec<(i64, f64)>> {
    if ring < 4 || ring > 14 || ring % 2 == 1 {
        return domain(format!("ring size must be even in 4..=14, got {ring}"));
    }
    if !(0.0..0.5).contains(&p) {
        return domain(format!("p must lie in [0, 1/2), got {p}"));
    }
    if !(t >= 0.0 && t <= ring as f64 / 8.0) {
        return domain(format!("t must lie in [0, ring/8] = [0, {}]", ring as f64 / 8.0));
    }
    let q = 1.0 - p;
    let npart = ring / 2;
    let configs: Vec<u32> = (0u32..1 << ring).filter(|c| c.count_ones() as usize == npart).collect();
    let index: HashMap<u32, usize> = configs.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let fmax = ring as i64;
    let width = (2 * fmax + 1) as usize;
    let slot = |ci: usize, f: i64| ci * width + (f + fmax) as usize;
    let total = configs.len() * width;
    // transitions per configuration: (target, rate, flux change)
    let moves: Vec<Vec<(usize, f64, i64)>> = configs
        .iter()
        .map(|&c| {
            let mut out = Vec::new();
            for s in 0..ring {
                let s1 = (s + 1) % ring;
                let (a, b) = (c >> s & 1, c >> s1 & 1);
                if a == b {
                    continue;
                }
                let nc = c ^ (1 << s) ^ (1 << s1);
                // bond (s, s+1); s = 0 is the bond between sites 0 and 1
                let (rate, df) = if a == 1 { (p, if s == 0 { -1 } else { 0 }) } else { (q, if s == 0 { 1 } else { 0 }) };
                if rate > 0.0 {
                    out.push((index[&nc], rate, df));
                }
            }
            out
        })
        .collect();
    let lam = moves
        .iter()
        .map(|m| m.iter().map(|x| x.1).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1e-300);
    let init: u32 = (0..ring).step_by(2).map(|s| 1u32 << s).sum();
    let mut v = vec![0.0; total];
    v[slot(index[&init], 0)] = 1.0;
    let mut acc = vec![0.0; total];
    let mut weight = (-lam * t).exp();
    let mut k = 0usize;
    let mut mass = 0.0;
    loop {
        for (a, b) in acc.iter_mut().zip(&v) {
            *a += weight * b;
        }
        mass += weight;
        if 1.0 - mass < 1e-15 || k > 2000 {
            break;
        }
        // v <- P v, P = I + G / lam
        let mut nv = vec![0.0; total];
        for (ci, mv) in moves.iter().enumerate() {
            let out: f64 = mv.iter().map(|x| x.1).sum();
            for f in -fmax..=fmax {
                let w = v[slot(ci, f)];
                if w == 0.0 {
                    continue;
                }
                nv[slot(ci, f)] += w * (1.0 - out / lam);
                for &(tj, r, df) in mv {
                    let nf = (f + df).clamp(-fmax, fmax);
                    nv[slot(tj, nf)] += w * r / lam;
                }
            }
        }
        v = nv;
        k += 1;
        weight *= lam * t / k as f64;
    }
    let mut law = Vec::new();
    for f in -fmax..=fmax {
        let pr: f64 = (0..configs.len()).map(|ci| acc[slot(ci, f)]).sum();
        if pr > 0.0 {
            law.push((f, pr));
        }
    }
    Ok(law)
}

/// Exact E[tau^{m N_flux}] on the ring.
pub fn exact_ring_oracle(p: f64, t: f64, ring: usize, m: u32) -> Result<f64> {
    let tau = p / (1.0 - p);
    Ok(exact_ring_flux_law(p, t, ring)?.iter().map(|&(f, pr)| pr * tau.powf(m as f64 * f as f64)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(t: f64, seed: u64) -> SimConfig {
        SimConfig::new(1.0 / 3.0, t, InitialData::Flat, seed).unwrap()
    }

    #[test]
    fn time_zero() {
        assert_eq!(simulate_height(&flat(0.0, 1)).unwrap(), 0);
        let hf = SimConfig::new(1.0 / 3.0, 0.0, InitialData::HalfFlat, 1).unwrap();
        assert_eq!(simulate_halfflat_n(&hf, 1).unwrap(), 0);
        assert_eq!(simulate_halfflat_n(&hf, 4).unwrap(), 2);
    }

    #[test]
    fn conservation_and_parity() {
        for i in 0..200 {
            let cfg = flat(1.5, 9);
            let mut lat = Lattice::new(cfg.window, cfg.init);
            let before = lat.particles();
            let mut rng = trajectory_rng(cfg.seed, i);
            lat.run(cfg.p, cfg.q_rate, cfg.t, &mut rng);
            assert_eq!(lat.particles(), before);
        }
        for s in 0..50 {
            assert_eq!(simulate_height(&flat(1.0, s)).unwrap() % 2, 0);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SimConfig::new(0.5, 1.0, InitialData::Flat, 0).is_err());
        assert!(flat(2.0, 0).with_window(20).is_err());
        let ctx_bad = mc_expectation(Observable::ExpTauGen(Complex64::new(0.9, 0.0)), &flat(1.0, 0), 10, 1);
        assert!(ctx_bad.is_err());
    }

    #[test]
    fn zeroth_moment() {
        let e = mc_expectation(Observable::TauPowHalfHeight(0), &flat(1.0, 3), 1000, 2).unwrap();
        assert_eq!(e.mean, Complex64::new(1.0, 0.0));
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn deterministic_across_workers() {
        let cfg = flat(1.0, 42);
        let a = mc_expectation(Observable::TauPowHalfHeight(2), &cfg, 10_000, 1).unwrap();
        let b = mc_expectation(Observable::TauPowHalfHeight(2), &cfg, 10_000, 4).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.stderr, b.stderr);
    }

    #[test]
    fn ring_oracle_sanity() {
        assert!((exact_ring_oracle(1.0 / 3.0, 0.0, 8, 1).unwrap() - 1.0).abs() < 1e-14);
        let law = exact_ring_flux_law(0.0, 0.2, 8).unwrap();
        let total: f64 = law.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // p = 0 gives tau = 0, so E[tau^{N}] = P(N = 0), in (0, 1)
        let v = exact_ring_oracle(0.0, 0.2, 8, 1).unwrap();
        assert!(v > 0.0 && v < 1.0);
        assert!(exact_ring_flux_law(1.0 / 3.0, 1.0, 6).is_err());
    }

    #[test]
    fn flux_law_matches_ring_oracle() {
        // the light cone at t = 0.5 stays well inside a ring of 12 sites
        let law = exact_ring_flux_law(1.0 / 3.0, 0.5, 12).unwrap();
        let n = 100_000;
        let raw = sample_statistic(&flat(0.5, 5), Statistic::HalfHeight, n, 4).unwrap();
        for &(f, pr) in &law {
            if pr < 1e-4 {
                continue;
            }
            let hits = raw.iter().filter(|&&v| v == f).count() as f64 / n as f64;
            let sd = (pr * (1.0 - pr) / n as f64).sqrt();
            assert!((hits - pr).abs() < 3.5 * sd, "flux {f}: mc {hits} exact {pr}");
        }
        let m1 = exact_ring_oracle(1.0 / 3.0, 0.5, 12, 1).unwrap();
        let e = estimate(&raw, Observable::TauPowHalfHeight(1), 0.5).unwrap();
        assert!((e.0.re - m1).abs() < 3.0 * e.1, "{} vs {m1} (se {})", e.0.re, e.1);
    }

    fn ks_statistic(a: &mut [i64], b: &mut [i64]) -> f64 {
        a.sort_unstable();
        b.sort_unstable();
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < a.len() && j < b.len() {
            let v = a[i].min(b[j]);
            while i < a.len() && a[i] == v {
                i += 1;
            }
            while j < b.len() && b[j] == v {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn rate_swap_symmetry() {
        // -h_0 is the flat zigzag shifted by one site plus 1, so under swapped
        // rates -h(t, 0) has the law of h(t, 1) + 1 = 2 (N_flux + eta_t(1)).
        let cfg = flat(1.0, 77);
        let n = 10_000;
        let mut h: Vec<i64> = (0..n as u64)
            .map(|i| {
                let lat = run_one(&cfg, cfg.p, cfg.q_rate, i);
                lat.flux + lat.occ[(lat.offset + 1) as usize] as i64
            })
            .collect();
        let cfg2 = SimConfig { seed: 78, ..cfg };
        let mut g: Vec<i64> = sample_with_rates(&cfg2, cfg.q_rate, cfg.p, Statistic::HalfHeight, n, 4)
            .unwrap()
            .into_iter()
            .map(|v| -v)
            .collect();
        let d = ks_statistic(&mut h, &mut g);
        let crit = 1.628 * ((2 * n) as f64 / (n * n) as f64).sqrt();
        assert!(d < crit, "KS {d} >= {crit}");
    }

    #[test]
    fn window_doubling() {
        let cfg = flat(1.0, 11);
        let wide = cfg.with_window(2 * cfg.window).unwrap();
        let a = mc_expectation(Observable::TauPowHalfHeight(1), &cfg, 40_000, 4).unwrap();
        let b = mc_expectation(Observable::TauPowHalfHeight(1), &SimConfig { seed: 12, ..wide }, 40_000, 4).unwrap();
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.mean - b.mean).norm() < 3.0 * se);
    }
}
