//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line. The full-scale benchmark studies are `#[ignore]`d
//! because they take from minutes to hours; run everything with
//!
//! ```text
//! cargo test --release -p evigp --test acceptance -- --include-ignored
//! ```

use std::io::Write;

use evigp::basis::{build_basis, design_matrix, BasisSpec};
use evigp::benchmarks::{standardized_rmspe, BenchmarkName};
use evigp::evi::{
    evi_im, evi_map, free_energy, free_energy_grad, EviConfig, ParticleEnsemble, Potential, RunOptions,
};
use evigp::experiment::{
    benchmark_basis, replication_data, run_benchmark, select_pipeline, BenchmarkSetup, SelectionOptions,
    SelectionOutcome,
};
use evigp::inference::{beta_intervals, cv_select_nu, fit_map, nu_grid, predict_aggregate, predict_at, FitMode};
use evigp::posterior::{
    beta_conditional, grad_log_posterior, log_posterior, tau2_conditional, GammaPrior, HyperPoint, Posterior,
    PriorConfig,
};
use evigp::{Dataset, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes straight to the process stdout so the line shows even when the
/// test harness captures output.
fn report(id: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    let line = format!("{} criterion {id}: {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn within_rel(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want
}

fn mean_rmspe(setup: &BenchmarkSetup, basis: &BasisSpec, reps: usize, label: &str) -> (f64, usize) {
    let r = run_benchmark(setup, basis, reps, 0, label).expect("benchmark run");
    (r.summary.mean, r.summary.failures)
}

/// Basis picked by interval selection on replication 0's training data at the preset `nu`.
fn selected_basis(setup: &BenchmarkSetup) -> BasisSpec {
    let data = replication_data(setup, 0, 0).unwrap().train;
    let full = benchmark_basis(setup, 2).unwrap();
    let opts = SelectionOptions { grid: None, folds: 5, level: 0.95, seed: 0 };
    match select_pipeline(&data, &full, &setup.prior, &setup.method, &opts).unwrap() {
        SelectionOutcome::Selected(r) => r.selected,
        SelectionOutcome::NothingToSelect(m) => panic!("{m}"),
    }
}

#[test]
#[ignore = "100 replications of four fits; about an hour on one core"]
fn criterion_01_toy_benchmark() {
    let post = BenchmarkSetup::preset(BenchmarkName::Toy);
    let mut map = post.clone();
    map.method.mode = FitMode::Map;
    let cells = [
        ("constant post", &post, 0, 0.1310),
        ("constant map", &map, 0, 0.1311),
        ("linear post", &post, 1, 0.1195),
        ("linear map", &map, 1, 0.1194),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, setup, degree, reference) in cells {
        let basis = benchmark_basis(setup, degree).unwrap();
        let (mean, failures) = mean_rmspe(setup, &basis, 100, label);
        let pass = (mean - reference).abs() <= 0.02 && failures == 0;
        ok &= pass;
        parts.push(format!("{label} {mean:.4} (reference {reference}, {})", if pass { "ok" } else { "off" }));
    }
    assert!(report("1 toy RMSPE within 0.02", ok, parts.join("; ")));
}

#[test]
#[ignore = "20 replications of four MAP fits with n = 200; tens of minutes"]
fn criterion_02_otl_benchmark() {
    let setup = BenchmarkSetup::preset(BenchmarkName::Otl);
    let models = [
        ("constant", benchmark_basis(&setup, 0).unwrap(), 0.01608),
        ("linear", benchmark_basis(&setup, 1).unwrap(), 0.01399),
        ("quadratic", benchmark_basis(&setup, 2).unwrap(), 0.01792),
        ("selected", selected_basis(&setup), 0.01625),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    let mut means = Vec::new();
    for (label, basis, reference) in &models {
        let (mean, failures) = mean_rmspe(&setup, basis, 20, label);
        let pass = within_rel(mean, *reference, 0.5) && failures == 0;
        ok &= pass;
        means.push(mean);
        parts.push(format!("{label} {mean:.5} (reference {reference}, {})", if pass { "ok" } else { "off" }));
    }
    let ordered = means[1] < means[0];
    ok &= ordered;
    parts.push(format!("linear < constant: {ordered}"));
    parts.push(format!("selected terms {}", models[3].1.active_labels().join(",")));
    assert!(report("2 OTL RMSPE within 50% and linear < constant", ok, parts.join("; ")));
}

#[test]
#[ignore = "20 replications of four MAP fits with n = 200; tens of minutes"]
fn criterion_03_borehole_benchmark() {
    let setup = BenchmarkSetup::preset(BenchmarkName::Borehole);
    let models = [
        ("constant", benchmark_basis(&setup, 0).unwrap(), 0.01151),
        ("linear", benchmark_basis(&setup, 1).unwrap(), 0.04191),
        ("quadratic", benchmark_basis(&setup, 2).unwrap(), 0.01212),
        ("selected", selected_basis(&setup), 0.01019),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    let mut means = Vec::new();
    for (label, basis, reference) in &models {
        let (mean, failures) = mean_rmspe(&setup, basis, 20, label);
        let pass = within_rel(mean, *reference, 0.5) && failures == 0;
        ok &= pass;
        means.push(mean);
        parts.push(format!("{label} {mean:.5} (reference {reference}, {})", if pass { "ok" } else { "off" }));
    }
    let best = means[3] < means[0] && means[3] < means[2];
    ok &= best;
    parts.push(format!("selected < constant and < quadratic: {best}"));
    parts.push(format!("selected terms {}", models[3].1.active_labels().join(",")));
    assert!(report("3 borehole selection helps, RMSPE within 50%", ok, parts.join("; ")));
}

/// Non-intercept terms whose 95% interval excludes zero, for seeds 0..10.
fn flagged_sets(name: BenchmarkName) -> Vec<Vec<String>> {
    let setup = BenchmarkSetup::preset(name);
    let basis = benchmark_basis(&setup, 2).unwrap();
    let prior = setup.prior.build(&basis).unwrap();
    (0..10u64)
        .map(|seed| {
            let data = replication_data(&setup, 0, seed).unwrap().train;
            let fit = setup.method.fit(&data, &basis, &prior, seed).unwrap();
            beta_intervals(&fit, 0.95, seed)
                .unwrap()
                .into_iter()
                .filter(|iv| iv.flagged && iv.label != "1")
                .map(|iv| iv.label)
                .collect()
        })
        .collect()
}

#[test]
#[ignore = "ten full-quadratic fits per benchmark; tens of minutes"]
fn criterion_04_selection_reproduction() {
    // The intercept is always kept, so the comparison is on the other terms.
    let targets = [(BenchmarkName::Otl, vec!["x2", "x2^2"]), (BenchmarkName::Borehole, vec!["x1", "x4", "x1*x4"])];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, target) in targets {
        let sets = flagged_sets(name);
        let hits = sets.iter().filter(|s| s.len() == target.len() && target.iter().all(|t| s.contains(&t.to_string()))).count();
        ok &= hits >= 8;
        let shown: Vec<String> = sets.iter().map(|s| format!("{{{}}}", s.join(","))).collect();
        parts.push(format!("{name}: {hits}/10 match {{{}}}; flagged {}", target.join(","), shown.join(" ")));
    }
    assert!(report("4 selection flags the expected terms in >= 8 of 10 runs", ok, parts.join("; ")));
}

fn random_dataset(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let x = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>());
    let y = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let s: f64 = x.row(i).iter().enumerate().map(|(j, v)| (1.5 + j as f64) * v).sum();
            2.0 * s.sin() + s * s
        }),
    );
    Dataset::new(x, y).unwrap()
}

/// Finite-difference step 1e-5 in log coordinates; 20 instances per regime
/// plus 20 particle ensembles for `F_h`.
#[test]
fn criterion_05_gradient_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 3];
    for trial in 0..20 {
        let d = 1 + trial % 3;
        let data = random_dataset(10 + trial, d, &mut rng);
        let basis = build_basis(d, (trial % 3) as u32 % 2 + 1).unwrap();
        let g = design_matrix(&basis, &data.x).unwrap();
        let omega = vec![GammaPrior::new(2.0, 1.0); d];
        let flat = PriorConfig::non_informative(omega.clone(), GammaPrior::new(1.0, 2.0), 3.0);
        let inf = PriorConfig::informative(omega, GammaPrior::new(1.0, 2.0), 7.0, 3.0, &basis, 1.0 / 3.0).unwrap();
        for (k, prior) in [&flat, &inf].into_iter().enumerate() {
            let post = Posterior::new(&data, &g, prior).unwrap();
            let mut c: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..2.0)).collect();
            c.push(rng.gen_range(-5.0..-1.0));
            if prior.is_informative() {
                c.push(rng.gen_range(-1.0..1.5));
            }
            let point = post.point(&c).unwrap();
            let grad = grad_log_posterior(&data, &g, prior, &point).unwrap();
            let fd: Vec<f64> = (0..c.len())
                .map(|j| {
                    let (mut up, mut dn) = (c.clone(), c.clone());
                    up[j] += 1e-5;
                    dn[j] -= 1e-5;
                    let f = |x: &[f64]| log_posterior(&data, &g, prior, &post.point(x).unwrap()).unwrap();
                    (f(&up) - f(&dn)) / 2e-5
                })
                .collect();
            worst[k] = worst[k].max(rel_err(&grad, &fd));
        }
    }
    struct Bowl;
    impl Potential for Bowl {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok((x[0] * x[0] - 1.0).powi(2) + 0.5 * x[1] * x[1] + 0.2 * x[0] * x[1])
        }
        fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.value(x)?, vec![4.0 * x[0] * (x[0] * x[0] - 1.0) + 0.2 * x[1], x[1] + 0.2 * x[0]]))
        }
    }
    for _ in 0..20 {
        let n = rng.gen_range(2..12);
        let h = rng.gen_range(0.05..1.0);
        let ens = ParticleEnsemble::new(DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.5..1.5)), h, 1.0).unwrap();
        let grad = free_energy_grad(&ens, &Bowl).unwrap();
        let mut fd = DMatrix::zeros(n, 2);
        for i in 0..n {
            for j in 0..2 {
                let (mut up, mut dn) = (ens.clone(), ens.clone());
                up.particles[(i, j)] += 1e-6;
                dn.particles[(i, j)] -= 1e-6;
                fd[(i, j)] = (free_energy(&up, &Bowl).unwrap() - free_energy(&dn, &Bowl).unwrap()) / 2e-6;
            }
        }
        worst[2] = worst[2].max(rel_err(grad.as_slice(), fd.as_slice()));
    }
    let ok = worst.iter().all(|w| *w < 1e-5);
    assert!(report(
        "5 gradients vs central differences",
        ok,
        format!("max rel err flat {:.1e}, informative {:.1e}, F_h {:.1e} (< 1e-5)", worst[0], worst[1], worst[2])
    ));
}

/// n = 2, d = 1, intercept only; every quantity by explicit 2x2 arithmetic.
#[test]
fn criterion_06_conjugacy_oracle() {
    let x = [0.15, 0.8];
    let y = [0.9, -1.1];
    let data = Dataset::new(DMatrix::from_column_slice(2, 1, &x), DVector::from_column_slice(&y)).unwrap();
    let g = DMatrix::from_element(2, 1, 1.0);
    let basis = build_basis(1, 0).unwrap();
    let (wp, ep, df) = (GammaPrior::new(2.0, 1.5), GammaPrior::new(1.0, 2.0), 3.0);
    let flat = PriorConfig::non_informative(vec![wp], ep, df);
    let nu = 1.4;
    let inf = PriorConfig::informative(vec![wp], ep, df, nu, &basis, 1.0 / 3.0).unwrap();
    let fit = fit_map(
        &data,
        &basis,
        &flat,
        &BenchmarkSetup::preset(BenchmarkName::Toy).method.settings(),
        Some(&[0.0, -2.0]),
    )
    .unwrap();

    let mut worst = 0.0f64;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for (omega, eta, tau2, xq) in [(0.7, 0.05, 0.9, 0.4), (3.0, 0.2, 2.2, 1.3), (11.0, 0.01, 0.3, -0.2)] {
        let a11 = 1.0 + eta + 1e-10;
        let kf = |u: f64, v: f64| f64::exp(-omega * (u - v) * (u - v));
        let a12 = kf(x[0], x[1]);
        let det = a11 * a11 - a12 * a12;
        let form = |u: [f64; 2], v: [f64; 2]| (a11 * (u[0] * v[0] + u[1] * v[1]) - a12 * (u[0] * v[1] + u[1] * v[0])) / det;
        let one = [1.0, 1.0];
        let m = form(one, one);
        let bhat = form(one, y) / m;
        let r = [y[0] - bhat, y[1] - bhat];
        let s2 = form(r, r);
        let gl = |p: &GammaPrior, t: f64| p.rate * t - p.shape * t.ln();

        // flat beta, tau2 integrated out
        let dfp = df + 1.0;
        let v_flat = 0.5 * dfp * ((1.0 + s2) / dfp).ln() + 0.5 * m.ln() + 0.5 * det.ln() + gl(&wp, omega) + gl(&ep, eta);
        let pf = HyperPoint::from_natural(&[omega], eta, None);
        track(log_posterior(&data, &g, &flat, &pf).unwrap(), v_flat);
        let bc = beta_conditional(&data, &g, &flat, &pf).unwrap();
        track(bc.beta_hat[0], bhat);
        track(bc.sigma_beta[(0, 0)], (1.0 + s2) / dfp / m);
        let tc = tau2_conditional(&data, &g, &flat, &pf).unwrap();
        track(tc.df, dfp);
        track(tc.scale, (1.0 + s2) / dfp);

        // informative beta at fixed tau2
        let prec = m / tau2 + 1.0 / (nu * nu);
        let bi = form(one, y) / tau2 / prec;
        let ri = [y[0] - bi, y[1] - bi];
        let v_inf = 0.5 * prec.ln()
            + 0.5 * (form(ri, ri) / tau2 + bi * bi / (nu * nu))
            + 0.5 * (2.0 + df) * tau2.ln()
            + 0.5 / tau2
            + 0.5 * det.ln()
            + gl(&wp, omega)
            + gl(&ep, eta);
        let pi = HyperPoint::from_natural(&[omega], eta, Some(tau2));
        track(log_posterior(&data, &g, &inf, &pi).unwrap(), v_inf);
        let bci = beta_conditional(&data, &g, &inf, &pi).unwrap();
        track(bci.beta_hat[0], bi);
        track(bci.sigma_beta[(0, 0)], 1.0 / prec);

        // predictive at a new input under the flat regime
        let kq = [kf(xq, x[0]), kf(xq, x[1])];
        let mean = bhat + form(kq, r);
        let c = 1.0 - form(one, kq);
        let var = (1.0 + s2) / dfp * (1.0 - form(kq, kq) + c * c / m);
        let (pm, pv) = predict_at(&fit, &pf, &[xq]).unwrap();
        track(pm, mean);
        track(pv, var);
    }
    assert!(report("6 n=2 conjugacy oracle", worst < 1e-10, format!("max abs deviation {worst:.1e} (< 1e-10)")));
}

struct Iso;

impl Potential for Iso {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(0.5 * (x[0] * x[0] + x[1] * x[1]))
    }
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.value(x)?, x.to_vec()))
    }
}

#[test]
fn criterion_07_evi_sanity() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let init = DMatrix::from_fn(100, 2, |_, _| rng.gen_range(-3.0..3.0));
    let ens = ParticleEnsemble::new(init, 0.2, 1.0).unwrap();
    let res = evi_im(&ens, &Iso, &EviConfig::default(), RunOptions::default()).unwrap();
    let p = &res.ensemble.particles;
    let mean = [p.column(0).mean(), p.column(1).mean()];
    let cov = DMatrix::from_fn(2, 2, |a, b| {
        (0..100).map(|i| (p[(i, a)] - mean[a]) * (p[(i, b)] - mean[b])).sum::<f64>() / 99.0
    });
    let mean_err = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
    let cov_err = (&cov - DMatrix::identity(2, 2)).norm();
    let monotone = res.trace.windows(2).all(|w| w[1] <= w[0]);

    let config = EviConfig { max_outer: 40, ..Default::default() };
    let x0 = [1.3, -0.7];
    let map = evi_map(&x0, &Iso, 0.5, &config, RunOptions { keep_path: true }).unwrap();
    let one = ParticleEnsemble::new(DMatrix::from_row_slice(1, 2, &x0), 0.02, 0.5).unwrap();
    let im = evi_im(&one, &Iso, &config, RunOptions { keep_path: true }).unwrap();
    let same = map.trace == im.trace
        && map.path.len() == im.path.len()
        && map.path.iter().zip(&im.path).all(|(a, b)| a.as_slice() == b.as_slice());

    let ppa = evi_map(&[4.0, -2.0], &Iso, 1.0, &EviConfig { max_outer: 12, ..Default::default() }, RunOptions { keep_path: true })
        .unwrap();
    let mut expect = [4.0, -2.0];
    let mut halving = true;
    for step in &ppa.path {
        expect.iter_mut().for_each(|v| *v *= 0.5);
        halving &= step.iter().zip(&expect).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs());
    }

    let ok = mean_err < 0.15 && cov_err < 0.2 && monotone && same && halving;
    assert!(report(
        "7 EVI sanity",
        ok,
        format!(
            "N=100 h=0.2 mean err {mean_err:.3} (< 0.15), cov err {cov_err:.3} (< 0.2); F_h non-increasing {monotone}; N=1 equals MAP path {same}; PPA halves {halving}"
        )
    ));
}

#[test]
fn criterion_08_map_vs_grid() {
    let setup = BenchmarkSetup::preset(BenchmarkName::Toy);
    let cell = 9.0 / 199.0;
    let mut worst_cells = 0.0f64;
    let mut v_ok = true;
    for rep in 0..3 {
        let data = replication_data(&setup, rep, 0).unwrap().train;
        let basis = build_basis(1, 0).unwrap();
        let prior = setup.prior.build(&basis).unwrap();
        let g = design_matrix(&basis, &data.x).unwrap();
        let post = Posterior::new(&data, &g, &prior).unwrap();
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..200 {
            for j in 0..200 {
                let c = [-6.0 + i as f64 * cell, -6.0 + j as f64 * cell];
                if let Ok(v) = post.value(&c) {
                    if v < best.0 {
                        best = (v, c);
                    }
                }
            }
        }
        let fit = fit_map(&data, &basis, &prior, &setup.method.settings(), None).unwrap();
        let mode = fit.mode.unwrap().coords();
        v_ok &= post.value(&mode).unwrap() <= best.0 + 1e-9;
        for k in 0..2 {
            worst_cells = worst_cells.max((mode[k] - best.1[k]).abs() / cell);
        }
    }
    let ok = worst_cells <= 1.0 && v_ok;
    assert!(report(
        "8 toy MAP vs 200x200 grid on [-6,3]^2 (log scale)",
        ok,
        format!("max offset {worst_cells:.2} cells (<= 1), MAP value below grid minimum {v_ok}")
    ));
}

#[test]
fn criterion_09_interpolation() {
    let setup = BenchmarkSetup::preset(BenchmarkName::Toy);
    let mut worst = 0.0f64;
    for degree in [0, 1] {
        let data = replication_data(&setup, 0, 9).unwrap().train;
        let basis = build_basis(1, degree).unwrap();
        let prior = setup.prior.build(&basis).unwrap();
        let mut fit = fit_map(&data, &basis, &prior, &setup.method.settings(), None).unwrap();
        let mut point = fit.mode.clone().unwrap();
        point = HyperPoint::from_natural(&point.omega(), 1e-12, None);
        fit.mode = Some(point);
        let preds = predict_aggregate(&fit, &data.x).unwrap();
        for (p, y) in preds.iter().zip(data.y.iter()) {
            worst = worst.max((p.mean - y).abs());
        }
    }
    assert!(report("9 interpolation at jitter-level nugget", worst < 1e-6, format!("max |pred - y| {worst:.1e} (< 1e-6)")));
}

#[test]
fn criterion_10_rmspe_affine_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..2000 {
        let m = rng.gen_range(2..60);
        let truth: Vec<f64> = (0..m).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|t| t + rng.gen_range(-2.0..2.0)).collect();
        let base = standardized_rmspe(&pred, &truth).unwrap();
        let a = rng.gen_range(0.1..10.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let b = rng.gen_range(-100.0..100.0);
        let f = |v: &[f64], a: f64, b: f64| v.iter().map(|t| a * t + b).collect::<Vec<_>>();
        let moved = standardized_rmspe(&f(&pred, a, b), &f(&truth, a, b)).unwrap();
        worst = worst.max((moved - base).abs() / base);
        // power-of-two scalings are exact in floating point
        let k = 2f64.powi(rng.gen_range(-8..8));
        exact &= standardized_rmspe(&f(&pred, k, 0.0), &f(&truth, k, 0.0)).unwrap() == base;
    }
    let ok = worst < 1e-12 && exact;
    assert!(report(
        "10 RMSPE affine invariance",
        ok,
        format!("2000 random cases, max rel deviation {worst:.1e} (roundoff), bitwise under 2^k scaling {exact}")
    ));
}

fn cv_nu_for(name: BenchmarkName) -> f64 {
    let setup = BenchmarkSetup::preset(name);
    let data = replication_data(&setup, 0, 0).unwrap().train;
    let basis = benchmark_basis(&setup, 2).unwrap();
    let prior = setup.prior.build(&basis).unwrap();
    let grid = nu_grid(5.0, 0.05).unwrap();
    cv_select_nu(&data, &basis, &prior, &grid, 5, &setup.method.settings(), 0).unwrap().best_nu
}

#[test]
#[ignore = "5-fold CV over 100 values of nu per benchmark; hours on one core"]
fn criterion_11_cv_nu_soft() {
    let otl = cv_nu_for(BenchmarkName::Otl);
    let bh = cv_nu_for(BenchmarkName::Borehole);
    let ok = (3.0..=5.0).contains(&otl) && (3.0..=5.0).contains(&bh);
    assert!(report("soft nu by CV in [3, 5]", ok, format!("OTL {otl}, borehole {bh}")));
}
