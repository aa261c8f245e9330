//! Oracle and invariant checks run by `chmc validate`.
//!
//! Each check returns a [`Check`] holding the measured statistic and the
//! threshold it was held to, so failures are self-describing. Gradient checks
//! use central differences and the relative error
//! `|a - b| / max(|a|, |b|, 1)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::bench::exact_samples;
use crate::dynamics::{counterdiabatic_leapfrog, ParticleState};
use crate::error::Result;
use crate::gauge::{Activation, BracketDesign, GaugeKind, GaugePotential};
use crate::rng::{stream, Purpose};
use crate::smc::{run_chmc, GaugeChoice, RunSettings};
use crate::systems::{benchmark, make_benchmark, make_linear_schedule, BenchmarkName, HamiltonianProblem, MixtureParams};
use crate::training::{fit_gauge_potential, least_squares_oracle, FitConfig};

pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, statistic: f64, threshold: f64, detail: String) -> Check {
        Check { name: name.into(), passed: statistic <= threshold, statistic, threshold, detail }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Plain-text pass/fail table.
    pub fn table(&self) -> String {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$}  {:<6}  {:>12}  {:>12}  detail\n", "check", "result", "statistic", "threshold");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<w$}  {:<6}  {:>12.4e}  {:>12.4e}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.statistic,
                c.threshold,
                c.detail
            );
        }
        s
    }
}

/// Inputs of the full suite. `problems` feeds the potential-level checks.
#[derive(Clone, Debug)]
pub struct Suite {
    pub problems: Vec<HamiltonianProblem>,
    pub seed: u64,
    pub fd_points: usize,
    pub bracket_samples: usize,
    pub log_z_particles: usize,
}

impl Default for Suite {
    fn default() -> Self {
        let mut problems: Vec<HamiltonianProblem> = BenchmarkName::ALL.iter().map(|&b| benchmark(b)).collect();
        problems.extend(
            BenchmarkName::ALL
                .iter()
                .map(|&b| make_benchmark(b, 3, MixtureParams::default()).expect("default benchmark parameters are valid")),
        );
        Suite { problems, seed: 0, fd_points: 100, bracket_samples: 100_000, log_z_particles: 10_000 }
    }
}

pub fn run(suite: &Suite) -> ValidationReport {
    let s = suite.seed;
    let mut checks = vec![
        potential_gradients(&suite.problems, s, suite.fd_points),
        dlambda_potential(&suite.problems, s, suite.fd_points),
        gauge_input_gradients(s, suite.fd_points),
        gauge_param_gradients(s),
    ];
    checks.extend(bracket_vanishing(s, suite.bracket_samples));
    checks.push(loss_equivalence(s, suite.bracket_samples));
    checks.push(moving_mean_recovery(s));
    checks.push(adam_matches_oracle_loss(s));
    checks.push(energy_error_scaling());
    checks.push(reversibility(&suite.problems, s));
    checks.push(annealing_log_z(s, suite.log_z_particles));
    let checks = checks.into_iter().map(|c| c.unwrap_or_else(error_check)).collect();
    ValidationReport { checks }
}

fn error_check(e: crate::ChmcError) -> Check {
    Check { name: "error".into(), passed: false, statistic: f64::NAN, threshold: f64::NAN, detail: e.to_string() }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn uniform_vec<R: Rng + ?Sized>(d: usize, half_width: f64, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-half_width..half_width)).collect()
}

fn normal_vec<R: Rng + ?Sized>(n: usize, sd: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

const FD_STEP: f64 = 1e-5;

/// Worst relative error of `grad_q V` against central differences.
pub fn potential_gradients(problems: &[HamiltonianProblem], seed: u64, points: usize) -> Result<Check> {
    let mut rng = stream(seed, Purpose::Oracle, 100);
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    for prob in problems {
        for _ in 0..points {
            let lam = rng.random_range(0.0..1.0);
            let q = uniform_vec(prob.dim(), 2.5, &mut rng);
            let g = prob.grad_q_potential(lam, &q);
            for i in 0..q.len() {
                let (mut a, mut b) = (q.clone(), q.clone());
                a[i] += FD_STEP;
                b[i] -= FD_STEP;
                let fd = (prob.potential(lam, &a) - prob.potential(lam, &b)) / (2.0 * FD_STEP);
                let e = rel_err(g[i], fd);
                if e > worst || e.is_nan() {
                    worst = if e.is_nan() { f64::INFINITY } else { e };
                    at = format!("{} (d={}) lambda={lam:.3}", prob.name, prob.dim());
                }
            }
        }
    }
    Ok(Check::at_most("grad_q_potential_fd", worst, FD_TOLERANCE, format!("worst at {at}")))
}

pub fn dlambda_potential(problems: &[HamiltonianProblem], seed: u64, points: usize) -> Result<Check> {
    let mut rng = stream(seed, Purpose::Oracle, 101);
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    for prob in problems {
        for _ in 0..points {
            let lam = rng.random_range(FD_STEP..1.0 - FD_STEP);
            let q = uniform_vec(prob.dim(), 2.5, &mut rng);
            let fd = (prob.potential(lam + FD_STEP, &q) - prob.potential(lam - FD_STEP, &q)) / (2.0 * FD_STEP);
            let e = rel_err(prob.dlambda_potential(lam, &q), fd);
            if e > worst || e.is_nan() {
                worst = if e.is_nan() { f64::INFINITY } else { e };
                at = format!("{} (d={}) lambda={lam:.3}", prob.name, prob.dim());
            }
        }
    }
    Ok(Check::at_most("dlambda_potential_fd", worst, FD_TOLERANCE, format!("worst at {at}")))
}

/// A gauge with every parameter drawn from `N(0, sd^2)`.
pub fn random_gauge<R: Rng + ?Sized>(kind: GaugeKind, dim: usize, sd: f64, rng: &mut R) -> Result<GaugePotential> {
    let n = GaugePotential::zeros(kind.clone(), dim)?.num_params();
    GaugePotential::with_params(kind, dim, normal_vec(n, sd, rng))
}

fn test_gauges<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Vec<GaugePotential>> {
    Ok(vec![
        random_gauge(GaugeKind::Polynomial { order: 3 }, dim, 0.5, rng)?,
        random_gauge(GaugeKind::Mlp { hidden_sizes: vec![8, 6], activation: Activation::Tanh }, dim, 0.6, rng)?,
    ])
}

/// `grad_q A` and `grad_p A` against central differences of `A` (tanh MLP and polynomial).
pub fn gauge_input_gradients(seed: u64, points: usize) -> Result<Check> {
    let mut rng = stream(seed, Purpose::Oracle, 102);
    let mut worst: f64 = 0.0;
    for dim in [1, 2] {
        for g in test_gauges(dim, &mut rng)? {
            for _ in 0..points {
                let q = uniform_vec(dim, 2.0, &mut rng);
                let p = uniform_vec(dim, 2.0, &mut rng);
                let (gq, gp) = g.input_gradients(&q, &p)?;
                for i in 0..dim {
                    let (mut a, mut b) = (q.clone(), q.clone());
                    a[i] += FD_STEP;
                    b[i] -= FD_STEP;
                    let fd = (g.evaluate(&a, &p)? - g.evaluate(&b, &p)?) / (2.0 * FD_STEP);
                    worst = worst.max(rel_err(gq[i], fd));
                    let (mut a, mut b) = (p.clone(), p.clone());
                    a[i] += FD_STEP;
                    b[i] -= FD_STEP;
                    let fd = (g.evaluate(&q, &a)? - g.evaluate(&q, &b)?) / (2.0 * FD_STEP);
                    worst = worst.max(rel_err(gp[i], fd));
                }
            }
        }
    }
    Ok(Check::at_most("gauge_input_grad_fd", worst, FD_TOLERANCE, "tanh MLP and order-3 polynomial, d = 1, 2".into()))
}

/// Loss parameter gradients against central differences of the loss.
pub fn gauge_param_gradients(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, Purpose::Oracle, 103);
    let mut worst: f64 = 0.0;
    for name in [BenchmarkName::Annealing, BenchmarkName::DoubleWell, BenchmarkName::MixturePath] {
        let prob = benchmark(name);
        let lam = rng.random_range(0.1..0.9);
        let states: Vec<ParticleState> =
            (0..40).map(|_| ParticleState::new(uniform_vec(1, 2.0, &mut rng), uniform_vec(1, 2.0, &mut rng))).collect();
        let raw: Vec<f64> = (0..40).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        for g in test_gauges(1, &mut rng)? {
            let (_, grad) = g.loss_and_param_gradient(&prob, lam, &states, &w)?;
            let h = 1e-6;
            for j in 0..g.num_params() {
                let mut a = g.params().to_vec();
                let mut b = a.clone();
                a[j] += h;
                b[j] -= h;
                let la = g_with(&g, a)?.loss_and_param_gradient(&prob, lam, &states, &w)?.0;
                let lb = g_with(&g, b)?.loss_and_param_gradient(&prob, lam, &states, &w)?.0;
                worst = worst.max(rel_err(grad[j], (la - lb) / (2.0 * h)));
            }
        }
    }
    Ok(Check::at_most("gauge_param_grad_fd", worst, FD_TOLERANCE, "tanh MLP and order-3 polynomial".into()))
}

fn g_with(g: &GaugePotential, params: Vec<f64>) -> Result<GaugePotential> {
    GaugePotential::with_params(g.kind().clone(), g.dim(), params)
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn brackets(g: &GaugePotential, prob: &HamiltonianProblem, lam: f64, states: &[ParticleState]) -> Result<Vec<f64>> {
    states.par_iter().map(|s| g.poisson_bracket_with_h(prob, lam, &s.q, &s.p)).collect()
}

/// Mean of `{A, H}` over `m` exact samples, in standard errors, for five random gauges.
pub fn bracket_vanishing(seed: u64, m: usize) -> Vec<Result<Check>> {
    let mut rng = stream(seed, Purpose::Oracle, 104);
    let cases = [
        (BenchmarkName::MovingMean, 0.3, GaugeKind::Polynomial { order: 3 }),
        (BenchmarkName::Annealing, 0.6, GaugeKind::Polynomial { order: 4 }),
        (BenchmarkName::MovingMean, 0.8, GaugeKind::Mlp { hidden_sizes: vec![8, 8], activation: Activation::Tanh }),
        (BenchmarkName::Annealing, 0.2, GaugeKind::Mlp { hidden_sizes: vec![16], activation: Activation::Relu }),
        (BenchmarkName::Annealing, 1.0, GaugeKind::Mlp { hidden_sizes: vec![6, 6], activation: Activation::Tanh }),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, lam, kind))| {
            let prob = benchmark(name);
            let g = random_gauge(kind, 1, 0.5, &mut rng)?;
            let states = exact_samples(&prob, lam, m, rng.next_u64(), 0)?;
            let (mean, se) = mean_and_se(&brackets(&g, &prob, lam, &states)?);
            Ok(Check::at_most(
                &format!("bracket_vanishing_{}", i + 1),
                mean.abs() / se,
                4.0,
                format!("{} lambda={lam}, mean {mean:.3e}, se {se:.3e}, M={m}", prob.name),
            ))
        })
        .collect()
}

/// The training loss and `E|G|^2` with `G = {A,H} - dV/dlambda + E[dV/dlambda]`
/// differ by the same constant for any two parameter vectors.
pub fn loss_equivalence(seed: u64, m: usize) -> Result<Check> {
    let mut rng = stream(seed, Purpose::Oracle, 105);
    let prob = benchmark(BenchmarkName::Annealing);
    let lam = 0.5;
    let (_, var) = prob.gaussian_marginal(lam).expect("annealing targets are Gaussian");
    let mean_dl = 4.5 * var;
    let states = exact_samples(&prob, lam, m, rng.next_u64(), 0)?;
    // Unit weights make the training loss the plain sample mean of squared residuals.
    let w = vec![1.0; m];
    let g1 = random_gauge(GaugeKind::Polynomial { order: 3 }, 1, 0.5, &mut rng)?;
    let g2 = random_gauge(GaugeKind::Polynomial { order: 3 }, 1, 0.5, &mut rng)?;
    let (l1, _) = g1.loss_and_param_gradient(&prob, lam, &states, &w)?;
    let (l2, _) = g2.loss_and_param_gradient(&prob, lam, &states, &w)?;
    let (b1, b2) = (brackets(&g1, &prob, lam, &states)?, brackets(&g2, &prob, lam, &states)?);
    let mut g_sq = (0.0, 0.0);
    let d: Vec<f64> = states
        .iter()
        .zip(b1.iter().zip(&b2))
        .map(|(s, (x1, x2))| {
            let t = prob.dlambda_potential(lam, &s.q);
            let (r1, r2) = (x1 - t, x2 - t);
            let (c1, c2) = ((r1 + mean_dl).powi(2), (r2 + mean_dl).powi(2));
            g_sq.0 += c1;
            g_sq.1 += c2;
            (r1 * r1 - r2 * r2) - (c1 - c2)
        })
        .collect();
    let g_diff = (g_sq.0 - g_sq.1) / m as f64;
    let gap = (l1 - l2) - g_diff;
    let (_, se) = mean_and_se(&d);
    Ok(Check::at_most(
        "loss_equivalence",
        gap.abs() / se,
        4.0,
        format!("L(phi1) - L(phi2) = {:.4e}, E|G1|^2 - E|G2|^2 = {g_diff:.4e}, se {se:.3e}", l1 - l2),
    ))
}

/// Removes the component of `v` along directions the design cannot see.
///
/// Functions of `H` have identically zero bracket, so every polynomial basis
/// of order >= 2 has such directions and the loss minimiser is unique only
/// up to them.
pub fn identifiable_part(design: &BracketDesign, v: &[f64]) -> Vec<f64> {
    let (n, k) = (design.len(), design.num_features);
    let m = DMatrix::from_fn(n, k, |i, j| design.weights[i].sqrt() * design.features[i * k + j]);
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors were requested");
    let smax = svd.singular_values.max();
    let x = DVector::from_column_slice(v);
    let mut out = DVector::zeros(k);
    for (i, &sv) in svd.singular_values.iter().enumerate() {
        if sv > 1e-8 * smax {
            let row = vt.row(i).transpose();
            out += &row * row.dot(&x);
        }
    }
    out.iter().copied().collect()
}

fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Polynomial fits on 1000 exact moving-mean samples recover `A = p`, and
/// Adam agrees with the least-squares oracle: literally at order 1, and on
/// the identifiable part of the parameters at order 3.
pub fn moving_mean_recovery(seed: u64) -> Result<Check> {
    let prob = benchmark(BenchmarkName::MovingMean);
    let lam = 0.5;
    let states = exact_samples(&prob, lam, 1000, seed, 106)?;
    let w = vec![1e-3; 1000];

    let g3 = GaugePotential::polynomial(1, 3)?;
    let basis3 = g3.basis().expect("polynomial gauge has a basis").clone();
    let cfg3 = FitConfig { iterations: 1000, learning_rate: 0.03, seed, ..FitConfig::default() };
    let fit3 = fit_gauge_potential(&g3, &prob, lam, &states, &w, &cfg3)?;
    let design3 = BracketDesign::new(&basis3, &prob, lam, &states, &w)?;
    let oracle3 = least_squares_oracle(&design3)?;
    let ip = basis3.index_of(&[0, 1]).expect("order >= 1 basis contains p");
    let params = fit3.gauge.params();
    let p_err = (params[ip] - 1.0).abs();
    let other = params.iter().enumerate().filter(|(k, _)| *k != ip).map(|(_, c)| c.abs()).fold(0.0, f64::max);
    let diff3: Vec<f64> = params.iter().zip(&oracle3).map(|(a, b)| a - b).collect();
    let gap3 = identifiable_part(&design3, &diff3).iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let g1 = GaugePotential::polynomial(1, 1)?;
    let basis1 = g1.basis().expect("polynomial gauge has a basis").clone();
    let cfg1 = FitConfig { iterations: 1000, learning_rate: 0.01, seed, ..FitConfig::default() };
    let fit1 = fit_gauge_potential(&g1, &prob, lam, &states, &w, &cfg1)?;
    let oracle1 = least_squares_oracle(&BracketDesign::new(&basis1, &prob, lam, &states, &w)?)?;
    let gap1 = sup_gap(fit1.gauge.params(), &oracle1);

    // Normalise the tolerances (0.05, 0.05, 1e-3, 1e-3) to one statistic.
    let stat = (p_err / 0.05).max(other / 0.05).max(gap1 / 1e-3).max(gap3 / 1e-3);
    Ok(Check::at_most(
        "moving_mean_a_recovery",
        stat,
        1.0,
        format!(
            "order 3: p coefficient {:.5}, max other {other:.2e}, identifiable |adam - oracle| {gap3:.2e}; \
             order 1: |adam - oracle| {gap1:.2e}",
            params[ip]
        ),
    ))
}

/// Adam reaches the closed-form minimum loss on every benchmark at the table
/// grid points, starting from `lambda = 0` samples. The excess loss is
/// measured relative to the minimum, floored at `1e-4` of the zero-gauge loss
/// because the moving-mean minimum is zero.
pub fn adam_matches_oracle_loss(seed: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    for (bi, &name) in BenchmarkName::ALL.iter().enumerate() {
        let prob = benchmark(name);
        let states = exact_samples(&benchmark(BenchmarkName::Annealing), 0.0, 1000, seed, 107 + bi as u64)?;
        let w = vec![1e-3; 1000];
        for lam in [1.0 / 3.0, 2.0 / 3.0, 1.0] {
            let g0 = GaugePotential::polynomial(1, 3)?;
            let basis = g0.basis().expect("polynomial gauge has a basis").clone();
            let design = BracketDesign::new(&basis, &prob, lam, &states, &w)?;
            let best = design.loss(&least_squares_oracle(&design)?);
            let zero = design.loss(&vec![0.0; basis.len()]);
            let cfg = FitConfig { iterations: 500, learning_rate: 0.03, seed, ..FitConfig::default() };
            let fit = fit_gauge_potential(&g0, &prob, lam, &states, &w, &cfg)?;
            let e = (fit.final_loss - best) / best.max(1e-4 * zero);
            if e > worst {
                worst = e;
                at = format!("{name} lambda={lam:.3}");
            }
        }
    }
    Ok(Check::at_most("adam_oracle_loss", worst, 0.05, format!("order 3, T=500, lr=0.03; worst at {at}")))
}

fn max_energy_error(eps: f64) -> Result<f64> {
    let prob = benchmark(BenchmarkName::Annealing);
    let mut s = ParticleState::new(vec![1.0], vec![0.5]);
    let h0 = prob.hamiltonian(0.0, &s.q, &s.p);
    let steps = (10.0 / eps).round() as usize;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        s = counterdiabatic_leapfrog(&prob, None, 0.0, 0.0, eps, &s)?;
        worst = worst.max((prob.hamiltonian(0.0, &s.q, &s.p) - h0).abs());
    }
    Ok(worst)
}

/// Ratios of the maximum energy error over `t in [0, 10]` for successive halvings of `epsilon`.
pub fn energy_error_ratios() -> Result<Vec<f64>> {
    [0.1, 0.05, 0.025].iter().map(|&e| Ok(max_energy_error(e)? / max_energy_error(e / 2.0)?)).collect()
}

pub fn energy_error_scaling() -> Result<Check> {
    let ratios = energy_error_ratios()?;
    let dev = ratios.iter().map(|r| (r - 4.0).abs()).fold(0.0, f64::max);
    Ok(Check::at_most("energy_error_scaling", dev, 0.5, format!("halving ratios {ratios:.3?}, want 4 +- 0.5")))
}

/// Step forward, flip momentum, step again, flip back: recovers the start with `A = 0`.
pub fn reversibility(problems: &[HamiltonianProblem], seed: u64) -> Result<Check> {
    let mut rng = stream(seed, Purpose::Oracle, 111);
    let mut worst: f64 = 0.0;
    for prob in problems {
        for _ in 0..50 {
            let d = prob.dim();
            let s0 = ParticleState::new(uniform_vec(d, 2.0, &mut rng), uniform_vec(d, 2.0, &mut rng));
            let lam = rng.random_range(0.0..1.0);
            let mut s = counterdiabatic_leapfrog(prob, None, lam, 0.0, 0.1, &s0)?;
            s.p.iter_mut().for_each(|x| *x = -*x);
            let mut back = counterdiabatic_leapfrog(prob, None, lam, 0.0, 0.1, &s)?;
            back.p.iter_mut().for_each(|x| *x = -*x);
            for (a, b) in back.q.iter().chain(&back.p).zip(s0.q.iter().chain(&s0.p)) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    Ok(Check::at_most("reversibility", worst, 1e-12, "A = 0, epsilon = 0.1".into()))
}

/// Analytic `log Z_1 / Z_0 = -ln(10) / 2` of the annealing path.
pub fn annealing_log_z_truth() -> f64 {
    -0.5 * 10f64.ln()
}

/// Baseline run over 101 grid points at `epsilon = 0.02`.
pub fn annealing_log_z(seed: u64, n: usize) -> Result<Check> {
    let prob = benchmark(BenchmarkName::Annealing);
    let schedule = make_linear_schedule(0.02, 101)?;
    let out = run_chmc(&prob, &schedule, &RunSettings::new(GaugeChoice::None, n, seed))?;
    let est = out.report.log_z_estimate;
    let truth = annealing_log_z_truth();
    Ok(Check::at_most(
        "annealing_log_z",
        (est - truth).abs(),
        0.05,
        format!("estimate {est:.5}, analytic {truth:.5}, N={n}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_table_marks_failures() {
        let r = ValidationReport {
            checks: vec![
                Check::at_most("a", 0.5, 1.0, String::new()),
                Check::at_most("bb", 2.0, 1.0, "x".into()),
            ],
        };
        assert!(!r.all_passed());
        assert_eq!(r.failures().len(), 1);
        let t = r.table();
        assert!(t.lines().nth(1).unwrap().contains("PASS"));
        assert!(t.lines().nth(2).unwrap().contains("FAIL"));
    }

    #[test]
    fn nan_statistic_fails() {
        assert!(!Check::at_most("n", f64::NAN, 1.0, String::new()).passed);
    }

    #[test]
    fn rel_err_has_unit_floor() {
        assert_eq!(rel_err(1e-9, 0.0), 1e-9);
        assert!((rel_err(200.0, 202.0) - 2.0 / 202.0).abs() < 1e-15);
    }
}
