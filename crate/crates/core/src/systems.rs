//! Time-varying Hamiltonian problems and annealing schedules.
//!
//! A problem is a potential family `V_lambda(q)` on `R^d` with analytic
//! gradients, plus the kinetic energy `|p|^2 / 2m`. The four benchmarks are
//! separable: each is a sum of the same 1-D potential over coordinates, so
//! they are usable in any dimension although the reference runs are 1-D.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ChmcError, Result};

/// A potential family `V_lambda(q)` with its `q`- and `lambda`-derivatives.
pub trait Potential: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value(&self, lambda: f64, q: &[f64]) -> f64;

    /// Writes `grad_q V_lambda(q)` into `out`.
    fn grad_q(&self, lambda: f64, q: &[f64], out: &mut [f64]);

    fn dlambda(&self, lambda: f64, q: &[f64]) -> f64;

    /// `(mean, variance)` per coordinate when `exp(-V_lambda)` is an isotropic Gaussian.
    fn gaussian_marginal(&self, _lambda: f64) -> Option<(f64, f64)> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkName {
    MovingMean,
    Annealing,
    DoubleWell,
    MixturePath,
}

impl BenchmarkName {
    pub const ALL: [BenchmarkName; 4] = [
        BenchmarkName::MovingMean,
        BenchmarkName::Annealing,
        BenchmarkName::DoubleWell,
        BenchmarkName::MixturePath,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BenchmarkName::MovingMean => "moving_mean",
            BenchmarkName::Annealing => "annealing",
            BenchmarkName::DoubleWell => "double_well",
            BenchmarkName::MixturePath => "mixture_path",
        }
    }
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkName {
    type Err = ChmcError;

    fn from_str(s: &str) -> Result<Self> {
        BenchmarkName::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| {
                ChmcError::Config(format!(
                    "unknown system '{s}' (expected one of moving_mean, annealing, double_well, mixture_path)"
                ))
            })
    }
}

/// Means and standard deviation of the symmetric two-component target of `mixture_path`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub a: f64,
    pub sigma: f64,
}

impl Default for MixtureParams {
    fn default() -> Self {
        MixtureParams { a: 2.0, sigma: 0.5 }
    }
}

/// One of the closed-form benchmark potentials, summed over `dim` coordinates.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: BenchmarkName,
    pub dim: usize,
    pub mixture: MixtureParams,
}

impl Benchmark {
    fn value_1d(&self, lambda: f64, x: f64) -> f64 {
        match self.name {
            BenchmarkName::MovingMean => 0.5 * (x - lambda).powi(2),
            BenchmarkName::Annealing => 0.5 * (1.0 + 9.0 * lambda) * x * x,
            BenchmarkName::DoubleWell => {
                (1.0 - lambda) * 0.5 * x * x + lambda * (x * x - 3.0).powi(2)
            }
            BenchmarkName::MixturePath => {
                (1.0 - lambda) * 0.5 * x * x + lambda * self.mixture_neg_log(x)
            }
        }
    }

    fn grad_1d(&self, lambda: f64, x: f64) -> f64 {
        match self.name {
            BenchmarkName::MovingMean => x - lambda,
            BenchmarkName::Annealing => (1.0 + 9.0 * lambda) * x,
            BenchmarkName::DoubleWell => {
                (1.0 - lambda) * x + lambda * 4.0 * x * (x * x - 3.0)
            }
            BenchmarkName::MixturePath => {
                (1.0 - lambda) * x + lambda * self.mixture_neg_log_grad(x)
            }
        }
    }

    fn dlambda_1d(&self, lambda: f64, x: f64) -> f64 {
        match self.name {
            BenchmarkName::MovingMean => -(x - lambda),
            BenchmarkName::Annealing => 4.5 * x * x,
            BenchmarkName::DoubleWell => (x * x - 3.0).powi(2) - 0.5 * x * x,
            BenchmarkName::MixturePath => self.mixture_neg_log(x) - 0.5 * x * x,
        }
    }

    /// Log-densities of the two normalised components at `x`.
    fn mixture_components(&self, x: f64) -> (f64, f64) {
        let MixtureParams { a, sigma } = self.mixture;
        let s2 = sigma * sigma;
        let norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        let lo = norm - (x + a).powi(2) / (2.0 * s2);
        let hi = norm - (x - a).powi(2) / (2.0 * s2);
        (lo, hi)
    }

    /// `-log(0.5 N(x; -a, s^2) + 0.5 N(x; a, s^2))`
    fn mixture_neg_log(&self, x: f64) -> f64 {
        let (lo, hi) = self.mixture_components(x);
        let m = lo.max(hi);
        -(m + ((lo - m).exp() + (hi - m).exp()).ln() + 0.5f64.ln())
    }

    fn mixture_neg_log_grad(&self, x: f64) -> f64 {
        let MixtureParams { a, sigma } = self.mixture;
        let s2 = sigma * sigma;
        let (lo, hi) = self.mixture_components(x);
        let m = lo.max(hi);
        let (wl, wh) = ((lo - m).exp(), (hi - m).exp());
        let r_lo = wl / (wl + wh);
        let r_hi = wh / (wl + wh);
        r_lo * (x + a) / s2 + r_hi * (x - a) / s2
    }
}

impl Potential for Benchmark {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, lambda: f64, q: &[f64]) -> f64 {
        q.iter().map(|&x| self.value_1d(lambda, x)).sum()
    }

    fn grad_q(&self, lambda: f64, q: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(q) {
            *o = self.grad_1d(lambda, x);
        }
    }

    fn dlambda(&self, lambda: f64, q: &[f64]) -> f64 {
        q.iter().map(|&x| self.dlambda_1d(lambda, x)).sum()
    }

    fn gaussian_marginal(&self, lambda: f64) -> Option<(f64, f64)> {
        match self.name {
            BenchmarkName::MovingMean => Some((lambda, 1.0)),
            BenchmarkName::Annealing => Some((0.0, 1.0 / (1.0 + 9.0 * lambda))),
            _ if lambda == 0.0 => Some((0.0, 1.0)),
            _ => None,
        }
    }
}

/// `H_lambda(q, p) = V_lambda(q) + |p|^2 / 2m`.
#[derive(Clone, Debug)]
pub struct HamiltonianProblem {
    pub name: String,
    pub mass: f64,
    potential: Arc<dyn Potential>,
}

impl HamiltonianProblem {
    pub fn new(name: impl Into<String>, mass: f64, potential: Arc<dyn Potential>) -> Result<Self> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(ChmcError::Config(format!("mass must be positive, got {mass}")));
        }
        if potential.dim() == 0 {
            return Err(ChmcError::Config("dimension must be positive".into()));
        }
        Ok(HamiltonianProblem { name: name.into(), mass, potential })
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    pub fn potential(&self, lambda: f64, q: &[f64]) -> f64 {
        self.potential.value(lambda, q)
    }

    pub fn grad_q_potential(&self, lambda: f64, q: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; q.len()];
        self.potential.grad_q(lambda, q, &mut g);
        g
    }

    pub fn grad_q_potential_into(&self, lambda: f64, q: &[f64], out: &mut [f64]) {
        self.potential.grad_q(lambda, q, out);
    }

    pub fn dlambda_potential(&self, lambda: f64, q: &[f64]) -> f64 {
        self.potential.dlambda(lambda, q)
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        p.iter().map(|x| x * x).sum::<f64>() / (2.0 * self.mass)
    }

    pub fn hamiltonian(&self, lambda: f64, q: &[f64], p: &[f64]) -> f64 {
        debug_assert_eq!(q.len(), self.dim());
        debug_assert_eq!(p.len(), self.dim());
        self.potential(lambda, q) + self.kinetic(p)
    }

    pub fn gaussian_marginal(&self, lambda: f64) -> Option<(f64, f64)> {
        self.potential.gaussian_marginal(lambda)
    }
}

/// Builds a benchmark with unit mass.
pub fn make_benchmark(name: BenchmarkName, dim: usize, mixture: MixtureParams) -> Result<HamiltonianProblem> {
    if !(mixture.sigma > 0.0) {
        return Err(ChmcError::Config(format!("mixture sigma must be positive, got {}", mixture.sigma)));
    }
    let bench = Benchmark { name, dim, mixture };
    HamiltonianProblem::new(name.as_str(), 1.0, Arc::new(bench))
}

/// Shorthand for the 1-D benchmark with default mixture parameters.
pub fn benchmark(name: BenchmarkName) -> HamiltonianProblem {
    make_benchmark(name, 1, MixtureParams::default()).expect("default benchmark parameters are valid")
}

/// Grid `lambda_0 = 0 <= ... <= lambda_{L-1} = 1` with the integrator step size
/// and the rate `lambda_dot` at each point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lambdas: Vec<f64>,
    pub epsilon: f64,
    pub lambda_dots: Vec<f64>,
}

const ENDPOINT_TOL: f64 = 1e-9;

impl Schedule {
    /// Schedule from an explicit grid; `lambda_dot` is the backward difference
    /// `(lambda_k - lambda_{k-1}) / epsilon`, with `lambda_dot_0 = lambda_dot_1`.
    pub fn from_grid(lambdas: Vec<f64>, epsilon: f64) -> Result<Self> {
        if lambdas.len() < 2 {
            return Err(ChmcError::Config("schedule needs at least 2 grid points".into()));
        }
        let mut dots = vec![0.0; lambdas.len()];
        for k in 1..lambdas.len() {
            dots[k] = (lambdas[k] - lambdas[k - 1]) / epsilon;
        }
        dots[0] = dots[1];
        let s = Schedule { lambdas, epsilon, lambda_dots: dots };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ChmcError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        let l = &self.lambdas;
        if l.len() < 2 || self.lambda_dots.len() != l.len() {
            return Err(ChmcError::Config("schedule needs at least 2 grid points".into()));
        }
        if l[0] != 0.0 {
            return Err(ChmcError::Config(format!("schedule must start at lambda = 0, got {}", l[0])));
        }
        if *l.last().unwrap() != 1.0 {
            return Err(ChmcError::Config(format!(
                "schedule must end at lambda = 1, got {}",
                l.last().unwrap()
            )));
        }
        if l.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(ChmcError::Config("schedule lambdas must be nondecreasing".into()));
        }
        Ok(())
    }

    /// Number of grid points `L`.
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// Number of propagation steps, `L - 1`.
    pub fn num_steps(&self) -> usize {
        self.lambdas.len() - 1
    }
}

/// `lambda(t) = 0.5 t` sampled at `t = k * epsilon`, `k = 0..num_steps`.
pub fn make_linear_schedule(epsilon: f64, num_steps: usize) -> Result<Schedule> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ChmcError::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if num_steps < 2 {
        return Err(ChmcError::Config(format!("need at least 2 grid points, got {num_steps}")));
    }
    let end = 0.5 * epsilon * (num_steps - 1) as f64;
    if (end - 1.0).abs() > ENDPOINT_TOL {
        return Err(ChmcError::Config(format!(
            "schedule must end at lambda = 1: lambda(t) = 0.5 t requires 0.5 * epsilon * (steps - 1) = 1, \
             but epsilon = {epsilon}, steps = {num_steps} gives {end}"
        )));
    }
    let mut lambdas: Vec<f64> = (0..num_steps).map(|k| 0.5 * epsilon * k as f64).collect();
    // pin the endpoint exactly; grid points are otherwise k * epsilon / 2
    *lambdas.last_mut().unwrap() = 1.0;
    let schedule = Schedule { lambdas, epsilon, lambda_dots: vec![0.5; num_steps] };
    schedule.validate()?;
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn hamiltonian_examples() {
        let mm = benchmark(BenchmarkName::MovingMean);
        assert_eq!(mm.hamiltonian(0.0, &[0.0], &[0.0]), 0.0);
        assert_eq!(mm.hamiltonian(1.0, &[0.0], &[2.0]), 2.5);
        let an = benchmark(BenchmarkName::Annealing);
        assert_eq!(an.hamiltonian(1.0, &[1.0], &[0.0]), 5.0);
    }

    #[test]
    fn benchmark_examples() {
        let mm = benchmark(BenchmarkName::MovingMean);
        assert!((mm.dlambda_potential(0.3, &[1.0]) + 0.7).abs() < 1e-15);
        let an = benchmark(BenchmarkName::Annealing);
        assert_eq!(an.grad_q_potential(1.0, &[2.0]), vec![20.0]);
        let dw = benchmark(BenchmarkName::DoubleWell);
        assert!(dw.potential(1.0, &[3f64.sqrt()]).abs() < 1e-14);
    }

    #[test]
    fn unknown_name_is_config_error() {
        assert!(matches!("harmonic".parse::<BenchmarkName>(), Err(ChmcError::Config(_))));
        assert_eq!("double_well".parse::<BenchmarkName>().unwrap(), BenchmarkName::DoubleWell);
    }

    #[test]
    fn finite_difference_gradients_all_benchmarks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for name in BenchmarkName::ALL {
            let prob = make_benchmark(name, 2, MixtureParams::default()).unwrap();
            for _ in 0..100 {
                let lam: f64 = rng.random_range(0.0..1.0);
                let q = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
                let g = prob.grad_q_potential(lam, &q);
                for j in 0..2 {
                    let mut qp = q;
                    let mut qm = q;
                    qp[j] += h;
                    qm[j] -= h;
                    let fd = (prob.potential(lam, &qp) - prob.potential(lam, &qm)) / (2.0 * h);
                    assert!(rel_err(g[j], fd) < 1e-6, "{name} grad_q: {} vs {fd}", g[j]);
                }
                let fd = (prob.potential(lam + h, &q) - prob.potential(lam - h, &q)) / (2.0 * h);
                let d = prob.dlambda_potential(lam, &q);
                assert!(rel_err(d, fd) < 1e-6, "{name} dlambda: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn moving_mean_dlambda_is_minus_gradient() {
        let mm = benchmark(BenchmarkName::MovingMean);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let lam: f64 = rng.random_range(0.0..1.0);
            let q = [rng.random_range(-5.0..5.0)];
            assert_eq!(mm.dlambda_potential(lam, &q), -mm.grad_q_potential(lam, &q)[0]);
        }
    }

    #[test]
    fn mixture_path_starts_at_standard_normal() {
        let mix = benchmark(BenchmarkName::MixturePath);
        for x in [-4.0, -1.3, 0.0, 0.7, 3.9] {
            assert_eq!(mix.potential(0.0, &[x]), 0.5 * x * x);
        }
    }

    #[test]
    fn mixture_dlambda_is_endpoint_difference() {
        let mix = benchmark(BenchmarkName::MixturePath);
        for x in [-2.5, -0.1, 1.9] {
            let d = mix.potential(1.0, &[x]) - mix.potential(0.0, &[x]);
            assert!((mix.dlambda_potential(0.4, &[x]) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn potentials_finite_far_out() {
        for name in BenchmarkName::ALL {
            let prob = benchmark(name);
            for lam in [0.0, 0.5, 1.0] {
                for x in [-1e3, -30.0, 0.0, 30.0, 1e3] {
                    assert!(prob.potential(lam, &[x]).is_finite(), "{name} at {x}");
                    assert!(prob.grad_q_potential(lam, &[x])[0].is_finite());
                }
            }
        }
    }

    #[test]
    fn linear_schedule_examples() {
        let s = make_linear_schedule(2.0 / 3.0, 4).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in s.lambdas.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(s.lambda_dots.iter().all(|&d| d == 0.5));
        for w in s.lambdas.windows(2) {
            assert!((w[1] - w[0] - 0.5 * s.epsilon).abs() < 1e-12);
        }

        let s = make_linear_schedule(0.2, 11).unwrap();
        for (k, l) in s.lambdas.iter().enumerate() {
            assert!((l - 0.1 * k as f64).abs() < 1e-12);
        }
        assert_eq!(s.num_steps(), 10);

        let err = make_linear_schedule(1.0, 2).unwrap_err();
        assert!(matches!(err, ChmcError::Config(ref m) if m.contains("0.5 * epsilon * (steps - 1) = 1")));
    }

    #[test]
    fn schedule_rejects_bad_grids() {
        assert!(Schedule::from_grid(vec![0.0, 0.5], 0.1).is_err());
        assert!(Schedule::from_grid(vec![0.0, 0.7, 0.5, 1.0], 0.1).is_err());
        assert!(Schedule::from_grid(vec![0.1, 1.0], 0.1).is_err());
        let s = Schedule::from_grid(vec![0.0, 0.25, 1.0], 0.5).unwrap();
        assert_eq!(s.lambda_dots, vec![0.5, 0.5, 1.5]);
    }
}
