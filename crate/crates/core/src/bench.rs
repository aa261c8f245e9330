//! Ground-truth oracles, the standardised squared error, and the benchmark table.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::ParticleState;
use crate::error::{ChmcError, Result};
use crate::rng::{stream, Purpose};
use rand_distr::{Distribution, StandardNormal};
use crate::gauge::{GaugeKind, GaugePotential};
use crate::smc::{run_chmc, FitLambda, GaugeChoice, RunReport, RunSettings};
use crate::systems::{benchmark, make_linear_schedule, BenchmarkName, HamiltonianProblem, Schedule};
use crate::training::FitConfig;

pub const DEFAULT_INTERVAL: (f64, f64) = (-10.0, 10.0);
pub const DEFAULT_NODES: usize = 4001;
/// Largest boundary-to-peak density ratio accepted by the quadrature.
pub const BOUNDARY_RATIO: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMethod {
    Analytic,
    Quadrature,
}

/// `E[f]` and `Var[f]` under `pi_lambda` for a named test function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTruth {
    pub system: String,
    pub f: String,
    pub value: f64,
    pub variance_of_f: f64,
    pub method: TruthMethod,
}

fn simpson(h: f64, ys: &[f64]) -> f64 {
    let n = ys.len();
    let mut s = ys[0] + ys[n - 1];
    for (i, y) in ys.iter().enumerate().take(n - 1).skip(1) {
        s += if i % 2 == 1 { 4.0 * y } else { 2.0 * y };
    }
    s * h / 3.0
}

/// `(E[f], Var[f])` under `pi ∝ exp(-V_lambda)` by composite Simpson on
/// `interval` with `nodes` (odd, at least 101) points.
pub fn quadrature_moment(
    problem: &HamiltonianProblem,
    lambda: f64,
    f: impl Fn(f64) -> f64,
    interval: (f64, f64),
    nodes: usize,
) -> Result<(f64, f64)> {
    if problem.dim() != 1 {
        return Err(ChmcError::Contract("quadrature oracle is 1-D only".into()));
    }
    if nodes < 101 || nodes.is_multiple_of(2) {
        return Err(ChmcError::Contract(format!("quadrature needs an odd node count >= 101, got {nodes}")));
    }
    let (a, b) = interval;
    if !(b > a) {
        return Err(ChmcError::Contract(format!("empty interval [{a}, {b}]")));
    }
    let h = (b - a) / (nodes - 1) as f64;
    let xs: Vec<f64> = (0..nodes).map(|i| a + h * i as f64).collect();
    let logd: Vec<f64> = xs.iter().map(|&x| -problem.potential(lambda, &[x])).collect();
    let peak = logd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = logd.iter().map(|l| (l - peak).exp()).collect();
    let ratio = dens[0].max(dens[nodes - 1]);
    if ratio >= BOUNDARY_RATIO {
        return Err(ChmcError::IntervalTooSmall { a, b, ratio });
    }
    let z = simpson(h, &dens);
    let fx: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let mean = simpson(h, &dens.iter().zip(&fx).map(|(d, v)| d * v).collect::<Vec<_>>()) / z;
    let var = simpson(h, &dens.iter().zip(&fx).map(|(d, v)| d * (v - mean).powi(2)).collect::<Vec<_>>()) / z;
    Ok((mean, var))
}

/// Truth for `f(q) = q^2` at `lambda`: closed form for Gaussian targets,
/// default quadrature otherwise.
pub fn second_moment_truth(problem: &HamiltonianProblem, lambda: f64) -> Result<MomentTruth> {
    let (value, variance_of_f, method) = match problem.gaussian_marginal(lambda) {
        Some((mu, s)) if problem.dim() == 1 => {
            let m2 = s + mu * mu;
            let m4 = mu.powi(4) + 6.0 * mu * mu * s + 3.0 * s * s;
            (m2, m4 - m2 * m2, TruthMethod::Analytic)
        }
        _ => {
            let (m, v) = quadrature_moment(problem, lambda, |x| x * x, DEFAULT_INTERVAL, DEFAULT_NODES)?;
            (m, v, TruthMethod::Quadrature)
        }
    };
    Ok(MomentTruth { system: problem.name.clone(), f: "q2".into(), value, variance_of_f, method })
}

/// `(estimate - E[f])^2 / Var[f]`.
pub fn b_squared(estimate: f64, truth: &MomentTruth) -> Result<f64> {
    if !(truth.variance_of_f > 0.0) {
        return Err(ChmcError::Contract(format!("truth variance must be positive, got {}", truth.variance_of_f)));
    }
    Ok((estimate - truth.value).powi(2) / truth.variance_of_f)
}

/// `n` independent draws from `rho_H` at `lambda` for a Gaussian target, from
/// the oracle stream `index` of `seed`.
pub fn exact_samples(problem: &HamiltonianProblem, lambda: f64, n: usize, seed: u64, index: u64) -> Result<Vec<ParticleState>> {
    let (mean, var) = problem
        .gaussian_marginal(lambda)
        .ok_or_else(|| ChmcError::Contract(format!("{} has no closed-form target at lambda = {lambda}", problem.name)))?;
    let d = problem.dim();
    let (sq, sp) = (var.sqrt(), problem.mass.sqrt());
    let mut rng = stream(seed, Purpose::Oracle, index);
    Ok((0..n)
        .map(|_| {
            let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
            let q = (0..d).map(|_| mean + sq * z()).collect();
            let p = (0..d).map(|_| sp * z()).collect();
            ParticleState::new(q, p)
        })
        .collect())
}

/// Fills `truths` and `b_squared` of a 1-D run report with the `q^2` oracle at
/// `lambda = 1`. Reports for other dimensions are left unchanged.
pub fn annotate_report(report: &mut RunReport, problem: &HamiltonianProblem) -> Result<()> {
    if problem.dim() != 1 {
        return Ok(());
    }
    let truth = second_moment_truth(problem, 1.0)?;
    report.truths.insert("q2".into(), truth.value);
    report.truths.insert("q2_variance".into(), truth.variance_of_f);
    for (label, moments) in [("q2_unweighted", &report.unweighted_moments), ("q2_weighted", &report.weighted_moments)] {
        let b2 = b_squared(moments["q2"], &truth)?;
        report.b_squared.insert(label.into(), b2);
    }
    Ok(())
}

/// `A = p` on the 1-D moving-mean system.
pub fn analytic_gauge_moving_mean() -> GaugePotential {
    GaugePotential::with_params(GaugeKind::Polynomial { order: 1 }, 1, vec![0.0, 1.0])
        .expect("order-1 basis has two monomials")
}

pub const TABLE1_SYSTEMS: [BenchmarkName; 3] =
    [BenchmarkName::MovingMean, BenchmarkName::Annealing, BenchmarkName::DoubleWell];

/// Published `(truth, naive, chmc)` second moments, kept for side-by-side display.
pub fn published_values(system: BenchmarkName) -> Option<(f64, f64, f64)> {
    match system {
        BenchmarkName::MovingMean => Some((2.0, 1.12, 2.1)),
        BenchmarkName::Annealing => Some((0.1, 86.5, 0.65)),
        BenchmarkName::DoubleWell => Some((7.34, 2.06, 4.22)),
        BenchmarkName::MixturePath => None,
    }
}

/// `lambda(t) = 0.5 t` schedules used for the table: `epsilon = 2/3` with 4
/// grid points for the Gaussians, `epsilon = 0.2` with 11 for the double well.
pub fn table1_schedule(system: BenchmarkName) -> Schedule {
    match system {
        BenchmarkName::DoubleWell => make_linear_schedule(0.2, 11),
        _ => make_linear_schedule(2.0 / 3.0, 4),
    }
    .expect("table schedules end at lambda = 1")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Settings {
    pub n_particles: usize,
    pub gauge: GaugeKind,
    pub fit: FitConfig,
    pub fit_lambda: FitLambda,
    pub refresh_every: usize,
    pub resample_threshold: f64,
}

impl Default for Table1Settings {
    fn default() -> Self {
        Table1Settings {
            n_particles: 1000,
            gauge: GaugeKind::Polynomial { order: 5 },
            fit: FitConfig::default(),
            fit_lambda: FitLambda::default(),
            refresh_every: 2,
            resample_threshold: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub system: String,
    pub method: String,
    pub seed: u64,
    pub estimate_unweighted: f64,
    pub estimate_weighted: f64,
    pub truth: f64,
    pub b2: f64,
    pub ess_final: f64,
    pub divergences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Summary {
    pub system: String,
    pub method: String,
    pub truth: f64,
    pub truth_method: TruthMethod,
    pub median_unweighted: f64,
    pub median_weighted: f64,
    pub median_abs_error: f64,
    pub median_b2: f64,
    pub published_estimate: Option<f64>,
    pub published_truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub settings: Table1Settings,
    pub seeds: Vec<u64>,
    pub rows: Vec<Table1Row>,
    pub summary: Vec<Table1Summary>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const METHODS: [&str; 2] = ["baseline", "chmc"];

/// Runs baseline and CHMC for every table system and seed. Rows are ordered
/// by system, then method, then seed.
pub fn run_table1(settings: &Table1Settings, seeds: &[u64]) -> Result<Table1> {
    if seeds.is_empty() {
        return Err(ChmcError::Config("at least one seed is required".into()));
    }
    let truths: Vec<MomentTruth> =
        TABLE1_SYSTEMS.iter().map(|&s| second_moment_truth(&benchmark(s), 1.0)).collect::<Result<_>>()?;

    let jobs: Vec<(usize, &str, u64)> = (0..TABLE1_SYSTEMS.len())
        .flat_map(|si| METHODS.iter().flat_map(move |&m| seeds.iter().map(move |&s| (si, m, s))))
        .collect();

    let rows: Vec<Table1Row> = jobs
        .par_iter()
        .map(|&(si, method, seed)| {
            let system = TABLE1_SYSTEMS[si];
            let problem = benchmark(system);
            let schedule = table1_schedule(system);
            let gauge = if method == "baseline" { GaugeChoice::None } else { GaugeChoice::Learned(settings.gauge.clone()) };
            let mut rs = RunSettings::new(gauge, settings.n_particles, seed);
            rs.fit = FitConfig { seed, ..settings.fit.clone() };
            rs.fit_lambda = settings.fit_lambda;
            rs.refresh_every = settings.refresh_every;
            rs.resample_threshold = settings.resample_threshold;
            let out = run_chmc(&problem, &schedule, &rs)?;
            let truth = &truths[si];
            let est = out.report.unweighted_moments["q2"];
            Ok(Table1Row {
                system: system.to_string(),
                method: method.to_string(),
                seed,
                estimate_unweighted: est,
                estimate_weighted: out.report.weighted_moments["q2"],
                truth: truth.value,
                b2: b_squared(est, truth)?,
                ess_final: *out.report.ess_trace.last().unwrap(),
                divergences: out.report.divergence_count,
            })
        })
        .collect::<Result<_>>()?;

    let mut summary = Vec::new();
    for (si, system) in TABLE1_SYSTEMS.iter().enumerate() {
        let published = published_values(*system);
        for (mi, method) in METHODS.iter().enumerate() {
            let sel: Vec<&Table1Row> =
                rows.iter().filter(|r| r.system == system.as_str() && r.method == *method).collect();
            let col = |f: fn(&Table1Row) -> f64| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            summary.push(Table1Summary {
                system: system.to_string(),
                method: method.to_string(),
                truth: truths[si].value,
                truth_method: truths[si].method,
                median_unweighted: col(|r| r.estimate_unweighted),
                median_weighted: col(|r| r.estimate_weighted),
                median_abs_error: col(|r| (r.estimate_unweighted - r.truth).abs()),
                median_b2: col(|r| r.b2),
                published_estimate: published.map(|p| if mi == 0 { p.1 } else { p.2 }),
                published_truth: published.map(|p| p.0),
            });
        }
    }
    Ok(Table1 { settings: settings.clone(), seeds: seeds.to_vec(), rows, summary })
}

impl Table1 {
    pub fn summary_for(&self, system: BenchmarkName, method: &str) -> Option<&Table1Summary> {
        self.summary.iter().find(|s| s.system == system.as_str() && s.method == method)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ParticleState;
    use crate::rng::{stream, Purpose};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn standard_normal_second_moment() {
        let p = benchmark(BenchmarkName::Annealing);
        let (m, v) = quadrature_moment(&p, 0.0, |x| x * x, DEFAULT_INTERVAL, DEFAULT_NODES).unwrap();
        assert!((m - 1.0).abs() < 1e-8);
        assert!((v - 2.0).abs() < 1e-8);
        let (m, _) = quadrature_moment(&p, 1.0, |x| x * x, DEFAULT_INTERVAL, DEFAULT_NODES).unwrap();
        assert!((m - 0.1).abs() < 1e-8);
    }

    #[test]
    fn analytic_and_quadrature_agree_on_gaussians() {
        for name in [BenchmarkName::MovingMean, BenchmarkName::Annealing] {
            let p = benchmark(name);
            for lam in [0.0, 0.3, 1.0] {
                let t = second_moment_truth(&p, lam).unwrap();
                assert_eq!(t.method, TruthMethod::Analytic);
                let (m, v) = quadrature_moment(&p, lam, |x| x * x, DEFAULT_INTERVAL, DEFAULT_NODES).unwrap();
                assert!((m - t.value).abs() < 1e-8, "{name} {lam}");
                assert!((v - t.variance_of_f).abs() < 1e-8, "{name} {lam}");
            }
        }
    }

    #[test]
    fn quadrature_stable_under_refinement() {
        for name in BenchmarkName::ALL {
            let p = benchmark(name);
            let a = quadrature_moment(&p, 1.0, |x| x * x, DEFAULT_INTERVAL, DEFAULT_NODES).unwrap();
            let b = quadrature_moment(&p, 1.0, |x| x * x, DEFAULT_INTERVAL, 2 * DEFAULT_NODES - 1).unwrap();
            let c = quadrature_moment(&p, 1.0, |x| x * x, (-14.0, 14.0), 2 * DEFAULT_NODES - 1).unwrap();
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9, "{name}");
            assert!((a.0 - c.0).abs() < 1e-8 && (a.1 - c.1).abs() < 1e-8, "{name}");
        }
    }

    #[test]
    fn double_well_truth_differs_from_published() {
        let t = second_moment_truth(&benchmark(BenchmarkName::DoubleWell), 1.0).unwrap();
        assert_eq!(t.method, TruthMethod::Quadrature);
        // mass concentrates near q^2 = 3
        assert!((2.5..3.5).contains(&t.value), "{}", t.value);
        assert!((t.value - 7.34).abs() > 1.0);
    }

    #[test]
    fn narrow_interval_is_rejected() {
        let p = benchmark(BenchmarkName::MovingMean);
        let r = quadrature_moment(&p, 1.0, |x| x * x, (-3.0, 3.0), 1001);
        assert!(matches!(r, Err(ChmcError::IntervalTooSmall { .. })));
        assert!(quadrature_moment(&p, 1.0, |x| x, (-10.0, 10.0), 100).is_err());
    }

    #[test]
    fn b_squared_examples() {
        let t = second_moment_truth(&benchmark(BenchmarkName::MovingMean), 1.0).unwrap();
        assert_eq!(t.value, 2.0);
        assert_eq!(t.variance_of_f, 6.0);
        assert_eq!(b_squared(2.0, &t).unwrap(), 0.0);
        assert!((b_squared(2.0 + 6f64.sqrt(), &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((b_squared(2.1, &t).unwrap() - 0.01 / 6.0).abs() < 1e-12);
        let zero = MomentTruth { variance_of_f: 0.0, ..t };
        assert!(matches!(b_squared(1.0, &zero), Err(ChmcError::Contract(_))));
    }

    #[test]
    fn analytic_gauge_examples() {
        let a = analytic_gauge_moving_mean();
        let mm = benchmark(BenchmarkName::MovingMean);
        for (q, p) in [(0.0, 0.0), (1.5, -2.0), (-3.0, 7.0)] {
            assert_eq!(a.evaluate(&[q], &[p]).unwrap(), p);
            let lam = 0.4;
            assert!((a.poisson_bracket_with_h(&mm, lam, &[q], &[p]).unwrap() + (q - lam)).abs() < 1e-15);
        }
        let mut rng = stream(1, Purpose::Oracle, 0);
        let states: Vec<ParticleState> = (0..1000)
            .map(|_| {
                let zq: f64 = StandardNormal.sample(&mut rng);
                let zp: f64 = StandardNormal.sample(&mut rng);
                ParticleState::new(vec![0.7 + zq], vec![zp])
            })
            .collect();
        let (loss, _) = a.loss_and_param_gradient(&mm, 0.7, &states, &vec![1e-3; 1000]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn empty_seed_list_is_config_error() {
        assert!(matches!(run_table1(&Table1Settings::default(), &[]), Err(ChmcError::Config(_))));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
