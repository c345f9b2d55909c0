//! Space-filling designs on the unit hypercube.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::csvio;
use crate::error::{invalid, GpError, Result};

/// Default number of random starts for [`maximin_lhs`].
pub const DEFAULT_RESTARTS: usize = 10;

/// Upper bound on accepted swaps per restart during maximin refinement.
const MAX_SWAP_STEPS: usize = 500;

/// `n x d` design with every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub points: DMatrix<f64>,
    pub seed: u64,
}

impl Design {
    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn d(&self) -> usize {
        self.points.ncols()
    }

    /// Checks that every column has exactly one point in each of the `n`
    /// strata `[(k-1)/n, k/n)`.
    pub fn is_latin(&self) -> bool {
        latin_audit(&self.points)
    }

    pub fn min_distance(&self) -> f64 {
        min_pairwise_sq(&self.points).sqrt()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.d()).map(|j| format!("x{j}")).collect();
        csvio::write_matrix(w, &header, &self.points)
    }

    pub fn read_csv<R: BufRead>(r: R, seed: u64) -> Result<Self> {
        let (_, points) = csvio::read_matrix(r)?;
        if points.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GpError::Parse("design entries must lie in [0, 1]".into()));
        }
        Ok(Self { points, seed })
    }
}

/// Latin-property audit for an arbitrary unit-cube matrix.
pub fn latin_audit(points: &DMatrix<f64>) -> bool {
    let n = points.nrows();
    for col in points.column_iter() {
        let mut seen = vec![false; n];
        for &v in col.iter() {
            if !(0.0..=1.0).contains(&v) {
                return false;
            }
            let k = ((v * n as f64).floor() as usize).min(n - 1);
            if seen[k] {
                return false;
            }
            seen[k] = true;
        }
    }
    true
}

fn min_pairwise_sq(points: &DMatrix<f64>) -> f64 {
    let n = points.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = (0..points.ncols())
                .map(|k| (points[(i, k)] - points[(j, k)]).powi(2))
                .sum();
            best = best.min(d2);
        }
    }
    best
}

/// Random Latin hypercube with uniform jitter inside each stratum.
pub fn random_lhs(n: usize, d: usize, seed: u64) -> Result<Design> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = random_lhs_with(n, d, &mut rng)?;
    Ok(Design { points, seed })
}

pub fn random_lhs_with<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if n == 0 || d == 0 {
        return invalid(format!("random_lhs needs n >= 1 and d >= 1, got n={n}, d={d}"));
    }
    let mut points = DMatrix::zeros(n, d);
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(rng);
        for (i, &stratum) in perm.iter().enumerate() {
            let u: f64 = rng.gen();
            // stays strictly below the upper stratum edge
            let v = (stratum as f64 + u) / n as f64;
            points[(i, j)] = v.min(((stratum + 1) as f64 / n as f64).next_down());
        }
    }
    Ok(points)
}

/// Maximin Latin hypercube: best of `restarts` random designs, each refined by
/// coordinate-swap hill-climbing on the minimum pairwise distance.
///
/// The first candidate is the design [`random_lhs`] returns for the same seed,
/// so the result is never worse than the unoptimized design.
pub fn maximin_lhs(n: usize, d: usize, seed: u64, restarts: usize) -> Result<Design> {
    maximin_lhs_traced(n, d, seed, restarts).map(|(design, _)| design)
}

/// Same as [`maximin_lhs`] but also returns the squared min-distance trace of
/// the winning restart (one entry per accepted swap, plus the start).
pub fn maximin_lhs_traced(
    n: usize,
    d: usize,
    seed: u64,
    restarts: usize,
) -> Result<(Design, Vec<f64>)> {
    if n < 2 {
        return invalid(format!("maximin_lhs needs n >= 2, got {n}"));
    }
    if d == 0 {
        return invalid("maximin_lhs needs d >= 1");
    }
    if restarts == 0 {
        return invalid("maximin_lhs needs restarts >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(DMatrix<f64>, Vec<f64>)> = None;
    for _ in 0..restarts {
        let start = random_lhs_with(n, d, &mut rng)?;
        let (refined, trace) = hill_climb(start, &mut rng);
        let score = *trace.last().expect("trace has the start value");
        let better = match &best {
            Some((_, t)) => score > *t.last().unwrap(),
            None => true,
        };
        if better {
            best = Some((refined, trace));
        }
    }
    let (points, trace) = best.unwrap();
    Ok((Design { points, seed }, trace))
}

/// Squared pairwise distances, kept in sync with the design during swaps.
struct DistanceTable {
    n: usize,
    d2: Vec<f64>,
}

impl DistanceTable {
    fn new(points: &DMatrix<f64>) -> Self {
        let n = points.nrows();
        let mut d2 = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v: f64 = (0..points.ncols())
                    .map(|k| (points[(i, k)] - points[(j, k)]).powi(2))
                    .sum();
                d2[i * n + j] = v;
                d2[j * n + i] = v;
            }
        }
        Self { n, d2 }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.d2[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d2[i * self.n + j] = v;
        self.d2[j * self.n + i] = v;
    }

    /// Minimum value and every pair attaining it.
    fn critical_pairs(&self) -> (f64, Vec<(usize, usize)>) {
        let mut min = f64::INFINITY;
        let mut pairs = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let v = self.get(i, j);
                if v < min {
                    min = v;
                    pairs.clear();
                    pairs.push((i, j));
                } else if v == min {
                    pairs.push((i, j));
                }
            }
        }
        (min, pairs)
    }
}

/// Squared distance from row `r` to rows `a` and `b` after swapping
/// `points[a][k]` with `points[b][k]`.
fn swapped_d2(
    points: &DMatrix<f64>,
    table: &DistanceTable,
    a: usize,
    b: usize,
    k: usize,
    r: usize,
) -> (f64, f64) {
    let (xa, xb, xr) = (points[(a, k)], points[(b, k)], points[(r, k)]);
    let da = table.get(a, r) - (xa - xr).powi(2) + (xb - xr).powi(2);
    let db = table.get(b, r) - (xb - xr).powi(2) + (xa - xr).powi(2);
    (da.max(0.0), db.max(0.0))
}

fn hill_climb<R: Rng + ?Sized>(mut points: DMatrix<f64>, rng: &mut R) -> (DMatrix<f64>, Vec<f64>) {
    let n = points.nrows();
    let d = points.ncols();
    let mut table = DistanceTable::new(&points);
    let (mut current, mut critical) = table.critical_pairs();
    let mut trace = vec![current];
    let mut partners: Vec<usize> = (0..n).collect();

    for _ in 0..MAX_SWAP_STEPS {
        let (a0, b0) = critical[0];
        let mut accepted = None;
        'search: for &row in &[a0, b0] {
            partners.shuffle(rng);
            for k in 0..d {
                for &other in &partners {
                    // a swap leaves the distance between the two rows unchanged
                    if other == row || table.get(row, other) <= current {
                        continue;
                    }
                    // every other critical pair must be broken by the swap
                    if critical
                        .iter()
                        .any(|&(p, q)| p != row && q != row && p != other && q != other)
                    {
                        continue;
                    }
                    let improves = (0..n).filter(|&r| r != row && r != other).all(|r| {
                        let (da, db) = swapped_d2(&points, &table, row, other, k, r);
                        da > current && db > current
                    });
                    if improves {
                        accepted = Some((row, other, k));
                        break 'search;
                    }
                }
            }
        }
        let Some((a, b, k)) = accepted else { break };
        for r in 0..n {
            if r == a || r == b {
                continue;
            }
            let (da, db) = swapped_d2(&points, &table, a, b, k, r);
            table.set(a, r, da);
            table.set(b, r, db);
        }
        points.swap((a, k), (b, k));
        let (m, c) = table.critical_pairs();
        current = m;
        critical = c;
        trace.push(current);
    }
    (points, trace)
}

/// Affine map of each unit-cube column onto `[lo, hi]`.
pub fn scale_to_ranges(points: &DMatrix<f64>, ranges: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    if ranges.len() != points.ncols() {
        return invalid(format!(
            "expected {} ranges, got {}",
            points.ncols(),
            ranges.len()
        ));
    }
    for (j, &(lo, hi)) in ranges.iter().enumerate() {
        if !(lo < hi) {
            return invalid(format!("range {j} has lo >= hi: [{lo}, {hi}]"));
        }
    }
    let mut out = points.clone();
    for (j, &(lo, hi)) in ranges.iter().enumerate() {
        out.column_mut(j).apply(|v| *v = lo + *v * (hi - lo));
    }
    Ok(out)
}
