//! Energetic variational inference: particle free energy with a Gaussian
//! KDE, implicit-Euler (proximal) outer loop and the single-particle
//! proximal-point MAP variant.

pub mod lbfgs;

use std::io::Write;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{invalid, GpError, Result};
use crate::posterior::Posterior;
pub use lbfgs::{lbfgs_minimize, LbfgsOptions, LbfgsResult, StopReason};

/// Negative log target density `V`, known up to a constant.
pub trait Potential: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl Potential for Posterior<'_> {
    fn dim(&self) -> usize {
        Posterior::dim(self)
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Posterior::value(self, x)
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Posterior::value_grad(self, x)
    }
}

/// Coordinates the particles move in. The posterior is always defined on
/// log coordinates; `Natural` drops the Jacobian and works on the positive
/// orthant directly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParticleScale {
    #[default]
    Log,
    Natural,
}

impl std::str::FromStr for ParticleScale {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "log" => Ok(Self::Log),
            "natural" => Ok(Self::Natural),
            other => invalid(format!("unknown particle scale '{other}' (expected log or natural)")),
        }
    }
}

impl ParticleScale {
    /// Maps log coordinates into this scale.
    pub fn from_log(self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Log => x.to_vec(),
            Self::Natural => x.iter().map(|v| v.exp()).collect(),
        }
    }

    /// Maps coordinates in this scale back to logs.
    pub fn to_log(self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Log => x.to_vec(),
            Self::Natural => x.iter().map(|v| v.ln()).collect(),
        }
    }
}

/// A log-coordinate potential seen on the natural scale:
/// `V_nat(t) = V(ln t) + sum ln t`. Non-positive coordinates are an error,
/// which the line search treats as an infinite value.
pub struct NaturalScale<'a, P: Potential>(pub &'a P);

impl<P: Potential> NaturalScale<'_, P> {
    fn logs(x: &[f64]) -> Result<Vec<f64>> {
        if x.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(x.iter().map(|v| v.ln()).collect())
        } else {
            Err(GpError::Numerical("natural-scale coordinate left the positive orthant".into()))
        }
    }
}

impl<P: Potential> Potential for NaturalScale<'_, P> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let u = Self::logs(x)?;
        Ok(self.0.value(&u)? + u.iter().sum::<f64>())
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let u = Self::logs(x)?;
        let (v, g) = self.0.value_grad(&u)?;
        let grad = g.iter().zip(x).map(|(gi, xi)| (gi + 1.0) / xi).collect();
        Ok((v + u.iter().sum::<f64>(), grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EviConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Mean particle displacement below which the outer loop stops.
    pub tol: f64,
    pub lbfgs_history: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for EviConfig {
    fn default() -> Self {
        Self { max_outer: 500, max_inner: 100, tol: 1e-8, lbfgs_history: 50, c1: 1e-4, c2: 0.9 }
    }
}

impl EviConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || self.max_inner == 0 || self.lbfgs_history == 0 {
            return invalid("max_outer, max_inner and lbfgs_history must be positive");
        }
        if !(self.tol > 0.0) {
            return invalid(format!("tol must be positive, got {}", self.tol));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return invalid(format!("line search needs 0 < c1 < c2 < 1, got {} and {}", self.c1, self.c2));
        }
        Ok(())
    }

    pub fn lbfgs_options(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iter: self.max_inner,
            history: self.lbfgs_history,
            c1: self.c1,
            c2: self.c2,
            ..LbfgsOptions::default()
        }
    }
}

/// `N` particles (rows) in log coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub particles: DMatrix<f64>,
    pub h: f64,
    pub step_size: f64,
    pub epoch: usize,
}

impl ParticleEnsemble {
    pub fn new(particles: DMatrix<f64>, h: f64, step_size: f64) -> Result<Self> {
        if particles.nrows() == 0 || particles.ncols() == 0 {
            return invalid("ensemble needs at least one particle of positive dimension");
        }
        if !(h > 0.0) || !(step_size > 0.0) {
            return invalid(format!("bandwidth and step size must be positive, got h={h}, step={step_size}"));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return invalid("particle coordinates must be finite");
        }
        Ok(Self { particles, h, step_size, epoch: 0 })
    }

    pub fn n(&self) -> usize {
        self.particles.nrows()
    }

    pub fn dim(&self) -> usize {
        self.particles.ncols()
    }

    pub fn particle(&self, i: usize) -> Vec<f64> {
        self.particles.row(i).iter().copied().collect()
    }

    /// One row per particle, header `theta1..thetaD`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.dim()).map(|j| format!("theta{j}")).collect();
        csvio::write_matrix(w, &header, &self.particles)
    }
}

/// `K_h(u, v) = exp(-|u - v|^2 / (2h))` and its gradient in `u`.
pub fn kde_kernel(u: &[f64], v: &[f64], h: f64) -> Result<(f64, Vec<f64>)> {
    if !(h > 0.0) {
        return invalid(format!("bandwidth must be positive, got {h}"));
    }
    if u.len() != v.len() {
        return invalid(format!("kernel arguments differ in length: {} vs {}", u.len(), v.len()));
    }
    let sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    let k = (-sq / (2.0 * h)).exp();
    Ok((k, u.iter().zip(v).map(|(a, b)| -(a - b) / h * k).collect()))
}

/// Row-major particle buffer (`n` rows of length `dim`).
struct Flat<'a> {
    x: &'a [f64],
    dim: usize,
}

impl Flat<'_> {
    fn n(&self) -> usize {
        self.x.len() / self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

fn kde_matrix(p: &Flat, h: f64) -> Vec<f64> {
    let n = p.n();
    let mut k = vec![1.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let sq: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = (-sq / (2.0 * h)).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

fn potentials<P: Potential + ?Sized>(p: &Flat, target: &P, grad: bool) -> Result<Vec<(f64, Vec<f64>)>> {
    (0..p.n())
        .into_par_iter()
        .map(|i| {
            let x = p.row(i);
            if grad {
                target.value_grad(x)
            } else {
                target.value(x).map(|v| (v, Vec::new()))
            }
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|vs| {
            if vs.iter().any(|(v, _)| !v.is_finite()) {
                Err(GpError::Numerical("potential is not finite at a particle".into()))
            } else {
                Ok(vs)
            }
        })
}

/// `F_h` and, when asked, its gradient (row-major, same layout as `p`).
fn free_energy_flat<P: Potential + ?Sized>(
    p: &Flat,
    h: f64,
    target: &P,
    grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = p.n();
    let nf = n as f64;
    let vs = potentials(p, target, grad)?;
    let k = kde_matrix(p, h);
    let sums: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum()).collect();
    let mut total = 0.0;
    for i in 0..n {
        total += (sums[i] / nf).ln() + vs[i].0;
    }
    let f = total / nf;
    if !grad {
        return Ok((f, Vec::new()));
    }
    let dim = p.dim;
    let mut g = vec![0.0; n * dim];
    for i in 0..n {
        let xi = p.row(i);
        let gi = &mut g[i * dim..(i + 1) * dim];
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = k[i * n + j] * (1.0 / sums[i] + 1.0 / sums[j]) / h;
            if w == 0.0 {
                continue;
            }
            for ((gv, a), b) in gi.iter_mut().zip(xi).zip(p.row(j)) {
                *gv -= w * (a - b);
            }
        }
        for (gv, dv) in gi.iter_mut().zip(&vs[i].1) {
            *gv = (*gv + dv) / nf;
        }
    }
    Ok((f, g))
}

fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn unflatten(x: &[f64], n: usize, dim: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, dim, x)
}

fn check_target<P: Potential + ?Sized>(ensemble: &ParticleEnsemble, target: &P) -> Result<()> {
    if target.dim() != ensemble.dim() {
        return invalid(format!(
            "ensemble has dimension {} but the target expects {}",
            ensemble.dim(),
            target.dim()
        ));
    }
    Ok(())
}

/// `F_h = (1/N) sum_i [ ln((1/N) sum_j K_h(x_i, x_j)) + V(x_i) ]`.
pub fn free_energy<P: Potential + ?Sized>(ensemble: &ParticleEnsemble, target: &P) -> Result<f64> {
    check_target(ensemble, target)?;
    let x = flatten(&ensemble.particles);
    Ok(free_energy_flat(&Flat { x: &x, dim: ensemble.dim() }, ensemble.h, target, false)?.0)
}

/// Exact gradient of [`free_energy`], one row per particle.
pub fn free_energy_grad<P: Potential + ?Sized>(ensemble: &ParticleEnsemble, target: &P) -> Result<DMatrix<f64>> {
    check_target(ensemble, target)?;
    let x = flatten(&ensemble.particles);
    let (_, g) = free_energy_flat(&Flat { x: &x, dim: ensemble.dim() }, ensemble.h, target, true)?;
    Ok(unflatten(&g, ensemble.n(), ensemble.dim()))
}

fn penalty<'a>(x: &'a [f64], anchor: &'a [f64], scale: f64) -> (f64, impl Iterator<Item = f64> + 'a) {
    let sq: f64 = x.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
    (scale * sq, x.iter().zip(anchor).map(move |(a, b)| 2.0 * scale * (a - b)))
}

/// `J_m = (1/(2 step)) sum_i |x_i - x_i^m|^2 / N + F_h(x)`.
pub fn proximal_objective<P: Potential + ?Sized>(
    candidate: &DMatrix<f64>,
    anchor: &ParticleEnsemble,
    target: &P,
) -> Result<f64> {
    if candidate.shape() != anchor.particles.shape() {
        return invalid(format!(
            "candidate shape {:?} differs from anchor {:?}",
            candidate.shape(),
            anchor.particles.shape()
        ));
    }
    let cand = ParticleEnsemble { particles: candidate.clone(), ..anchor.clone() };
    let f = free_energy(&cand, target)?;
    let (pen, _) = penalty(
        &flatten(candidate),
        &flatten(&anchor.particles),
        1.0 / (2.0 * anchor.step_size * anchor.n() as f64),
    );
    Ok(pen + f)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EviResult {
    pub ensemble: ParticleEnsemble,
    /// `F_h` at the start and after every completed epoch.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Set when an epoch was aborted on a numerical failure.
    pub warning: Option<String>,
    /// Particle positions after every epoch, when requested.
    pub path: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub keep_path: bool,
}

/// Shared implicit-Euler driver: `objective(x, anchor)` returns value and gradient.
fn outer_loop<O, E>(
    x0: Vec<f64>,
    n: usize,
    config: &EviConfig,
    run: RunOptions,
    objective: O,
    energy: E,
) -> Result<(Vec<f64>, Vec<f64>, bool, Option<String>, Vec<Vec<f64>>, usize)>
where
    O: Fn(&[f64], &[f64]) -> Result<(f64, Vec<f64>)>,
    E: Fn(&[f64]) -> Result<f64>,
{
    config.validate()?;
    let opts = config.lbfgs_options();
    let mut x = x0;
    let mut trace = vec![energy(&x)?];
    let mut path = Vec::new();
    let mut converged = false;
    let mut warning = None;
    let mut epochs = 0;
    let dim = x.len() / n;
    for epoch in 0..config.max_outer {
        let anchor = x.clone();
        let res = match lbfgs_minimize(|c| objective(c, &anchor), &anchor, &opts) {
            Ok(r) => r,
            Err(e) => {
                warn!("epoch {epoch}: inner solve failed ({e}); keeping previous ensemble");
                warning = Some(format!("epoch {epoch}: {e}"));
                break;
            }
        };
        let e = match energy(&res.x) {
            Ok(e) => e,
            Err(e) => {
                warning = Some(format!("epoch {epoch}: {e}"));
                break;
            }
        };
        let displacement: f64 = (0..n)
            .map(|i| {
                let r = i * dim..(i + 1) * dim;
                res.x[r.clone()].iter().zip(&anchor[r]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / n as f64;
        x = res.x;
        trace.push(e);
        epochs = epoch + 1;
        if run.keep_path {
            path.push(x.clone());
        }
        debug!("epoch {epoch}: energy {e:.10e}, displacement {displacement:.3e}, inner {:?}", res.reason);
        if displacement < config.tol {
            converged = true;
            break;
        }
    }
    Ok((x, trace, converged, warning, path, epochs))
}

/// Implicit-Euler EVI: one joint L-BFGS solve of `J_m` per epoch.
pub fn evi_im<P: Potential + ?Sized>(
    init: &ParticleEnsemble,
    target: &P,
    config: &EviConfig,
    run: RunOptions,
) -> Result<EviResult> {
    check_target(init, target)?;
    let n = init.n();
    let dim = init.dim();
    let h = init.h;
    let scale = 1.0 / (2.0 * init.step_size * n as f64);
    let (x, trace, converged, warning, path, epochs) = outer_loop(
        flatten(&init.particles),
        n,
        config,
        run,
        |c, anchor| {
            let (f, g) = free_energy_flat(&Flat { x: c, dim }, h, target, true)?;
            let (pen, pg) = penalty(c, anchor, scale);
            Ok((pen + f, g.iter().zip(pg).map(|(a, b)| b + a).collect()))
        },
        |c| Ok(free_energy_flat(&Flat { x: c, dim }, h, target, false)?.0),
    )?;
    let mut ensemble = init.clone();
    ensemble.particles = unflatten(&x, n, dim);
    ensemble.epoch = init.epoch + epochs;
    Ok(EviResult {
        ensemble,
        trace,
        converged,
        warning,
        path: path.iter().map(|p| unflatten(p, n, dim)).collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapResult {
    pub mode: Vec<f64>,
    /// `V` at the start and after every epoch.
    pub trace: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
    pub warning: Option<String>,
    pub path: Vec<Vec<f64>>,
}

/// Proximal-point iteration `x <- argmin |x - x^m|^2 / (2 step) + V(x)`.
pub fn evi_map<P: Potential + ?Sized>(
    x0: &[f64],
    target: &P,
    step_size: f64,
    config: &EviConfig,
    run: RunOptions,
) -> Result<MapResult> {
    if !(step_size > 0.0) {
        return invalid(format!("step size must be positive, got {step_size}"));
    }
    if x0.len() != target.dim() {
        return invalid(format!("start has dimension {} but the target expects {}", x0.len(), target.dim()));
    }
    let scale = 1.0 / (2.0 * step_size);
    let (mode, trace, converged, warning, path, epochs) = outer_loop(
        x0.to_vec(),
        1,
        config,
        run,
        |c, anchor| {
            let (v, g) = target.value_grad(c)?;
            let (pen, pg) = penalty(c, anchor, scale);
            Ok((pen + v, g.iter().zip(pg).map(|(a, b)| b + a).collect()))
        },
        |c| target.value(c),
    )?;
    Ok(MapResult { mode, trace, epochs, converged, warning, path })
}

/// Uniform draws in a natural-scale box, stored as logs (0 bounds become 1e-4).
pub fn init_particles<R: Rng + ?Sized>(
    n: usize,
    bounds: &[(f64, f64)],
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if n == 0 || bounds.is_empty() {
        return invalid("need at least one particle and one coordinate");
    }
    let fixed: Vec<(f64, f64)> = bounds
        .iter()
        .map(|&(lo, hi)| (if lo == 0.0 { 1e-4 } else { lo }, if hi == 0.0 { 1e-4 } else { hi }))
        .collect();
    for (&(lo, hi), &orig) in fixed.iter().zip(bounds) {
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return invalid(format!("invalid initial box {orig:?}"));
        }
    }
    Ok(DMatrix::from_fn(n, bounds.len(), |_, j| {
        let (lo, hi) = fixed[j];
        if lo == hi {
            lo.ln()
        } else {
            rng.gen_range(lo..hi).ln()
        }
    }))
}

/// Trace CSV with header `epoch,energy`.
pub fn write_trace<W: Write>(w: W, trace: &[f64]) -> Result<()> {
    let m = DMatrix::from_fn(trace.len(), 2, |i, j| if j == 0 { i as f64 } else { trace[i] });
    csvio::write_matrix(w, &["epoch".to_string(), "energy".to_string()], &m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Quadratic {
        dim: usize,
    }

    impl Potential for Quadratic {
        fn dim(&self) -> usize {
            self.dim
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>())
        }
        fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.value(x)?, x.to_vec()))
        }
    }

    struct Zero(usize);

    impl Potential for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn value(&self, _: &[f64]) -> Result<f64> {
            Ok(0.0)
        }
        fn value_grad(&self, _: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((0.0, vec![0.0; self.0]))
        }
    }

    fn random_ensemble(n: usize, d: usize, seed: u64, h: f64) -> ParticleEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParticleEnsemble::new(DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)), h, 0.5).unwrap()
    }

    #[test]
    fn kde_kernel_values() {
        let (k, g) = kde_kernel(&[0.3, 0.4], &[0.3, 0.4], 0.1).unwrap();
        assert_eq!(k, 1.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let h: f64 = 0.7;
        let (k, _) = kde_kernel(&[(2.0 * h).sqrt()], &[0.0], h).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
        assert!(kde_kernel(&[0.0], &[0.0], 0.0).is_err());
        assert!(kde_kernel(&[0.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn kde_gradient_matches_finite_differences() {
        let u = [0.3, -0.2, 0.5];
        let v = [0.1, 0.1, 0.2];
        let h = 0.3;
        let (_, g) = kde_kernel(&u, &v, h).unwrap();
        for j in 0..3 {
            let mut up = u;
            up[j] += 1e-6;
            let mut dn = u;
            dn[j] -= 1e-6;
            let fd = (kde_kernel(&up, &v, h).unwrap().0 - kde_kernel(&dn, &v, h).unwrap().0) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn free_energy_special_cases() {
        let q = Quadratic { dim: 2 };
        let one = ParticleEnsemble::new(DMatrix::from_row_slice(1, 2, &[0.3, -1.0]), 0.1, 1.0).unwrap();
        assert_eq!(free_energy(&one, &q).unwrap(), q.value(&[0.3, -1.0]).unwrap());
        let g = free_energy_grad(&one, &q).unwrap();
        assert_eq!(g.row(0).iter().copied().collect::<Vec<_>>(), vec![0.3, -1.0]);

        let twin = ParticleEnsemble::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]), 0.1, 1.0).unwrap();
        assert_eq!(free_energy(&twin, &Zero(2)).unwrap(), 0.0);
    }

    #[test]
    fn free_energy_matches_double_loop() {
        let ens = random_ensemble(5, 3, 11, 0.2);
        let q = Quadratic { dim: 3 };
        let n = 5.0;
        let mut want = 0.0;
        for i in 0..5 {
            let mut s = 0.0;
            for j in 0..5 {
                s += kde_kernel(&ens.particle(i), &ens.particle(j), ens.h).unwrap().0;
            }
            want += (s / n).ln() + q.value(&ens.particle(i)).unwrap();
        }
        want /= n;
        assert!((free_energy(&ens, &q).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn symmetric_pair_repels() {
        let ens = ParticleEnsemble::new(DMatrix::from_row_slice(2, 2, &[-0.1, 0.0, 0.1, 0.0]), 0.05, 1.0).unwrap();
        let g = free_energy_grad(&ens, &Zero(2)).unwrap();
        assert_eq!(g[(0, 0)], -g[(1, 0)]);
        // descending F_h pushes the particles apart
        assert!(g[(0, 0)] > 0.0);
        assert_eq!(g[(0, 1)], 0.0);
    }

    #[test]
    fn proximal_objective_cases() {
        let ens = random_ensemble(4, 2, 3, 0.3);
        let q = Quadratic { dim: 2 };
        assert_eq!(proximal_objective(&ens.particles, &ens, &q).unwrap(), free_energy(&ens, &q).unwrap());

        let cand = random_ensemble(4, 2, 4, 0.3);
        let sq: f64 = (&cand.particles - &ens.particles).iter().map(|v| v * v).sum();
        let want = sq / (2.0 * ens.step_size) / 4.0 + free_energy(&cand, &q).unwrap();
        assert!((proximal_objective(&cand.particles, &ens, &q).unwrap() - want).abs() < 1e-14);

        let far = ParticleEnsemble { step_size: 1e300, ..ens.clone() };
        let j = proximal_objective(&cand.particles, &far, &q).unwrap();
        assert!((j - free_energy(&cand, &q).unwrap()).abs() < 1e-12);
        assert!(proximal_objective(&DMatrix::zeros(3, 2), &ens, &q).is_err());
    }

    #[test]
    fn init_particles_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = init_particles(1, &[(1.0, 1.0)], &mut rng).unwrap();
        assert_eq!(one[(0, 0)], 0.0);

        let bounds = [(0.0, 0.1), (0.1, 0.4)];
        let p = init_particles(200, &bounds, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for i in 0..200 {
            assert!(p[(i, 0)] >= 1e-4f64.ln() && p[(i, 0)] <= 0.1f64.ln());
            assert!(p[(i, 1)] >= 0.1f64.ln() && p[(i, 1)] <= 0.4f64.ln());
        }
        let again = init_particles(200, &bounds, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(p, again);
        assert!(init_particles(3, &[(0.5, 0.1)], &mut rng).is_err());
        assert!(init_particles(3, &[(-1.0, 0.1)], &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EviConfig::default().validate().is_ok());
        assert!(EviConfig { max_outer: 0, ..Default::default() }.validate().is_err());
        assert!(EviConfig { c1: 0.95, ..Default::default() }.validate().is_err());
        assert!(ParticleEnsemble::new(DMatrix::zeros(2, 2), 0.0, 1.0).is_err());
        assert!(ParticleEnsemble::new(DMatrix::from_element(1, 1, f64::NAN), 1.0, 1.0).is_err());
    }
}
