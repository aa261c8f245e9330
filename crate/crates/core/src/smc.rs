//! Weighted populations and the CHMC runner.
//!
//! Weights are kept as normalised log-weights. A step multiplies each weight
//! by `exp(-W_i)`, renormalises, and adds `log sum_i w_i exp(-W_i)` to the
//! running estimate of `log(Z_1 / Z_0)`. Diverged particles carry `W = +inf`
//! and thus weight zero; they stop moving and are dropped at the next resample.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate, refresh_momentum, ParticleState};
use crate::error::{ChmcError, Result};
use crate::gauge::{GaugeCheckpoint, GaugeKind, GaugePotential};
use crate::rng::{stream, Purpose, StreamRng};
use crate::systems::{HamiltonianProblem, Schedule};
use crate::training::{fit_gauge_potential, FitConfig};

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub states: Vec<ParticleState>,
    /// Normalised: `logsumexp(log_weights) = 0`.
    pub log_weights: Vec<f64>,
    pub cumulative_work: Vec<f64>,
    pub diverged: Vec<bool>,
    pub step_index: usize,
    log_z: f64,
}

impl Population {
    /// Uniformly weighted population.
    pub fn new(states: Vec<ParticleState>) -> Result<Self> {
        let n = states.len();
        if n == 0 {
            return Err(ChmcError::Contract("population needs at least one particle".into()));
        }
        Ok(Population {
            states,
            log_weights: vec![-(n as f64).ln(); n],
            cumulative_work: vec![0.0; n],
            diverged: vec![false; n],
            step_index: 0,
            log_z: 0.0,
        })
    }

    /// Population with the given (not necessarily normalised) weights.
    pub fn with_weights(states: Vec<ParticleState>, weights: &[f64]) -> Result<Self> {
        let mut pop = Self::new(states)?;
        if weights.len() != pop.len() {
            return Err(ChmcError::Contract("weights and states differ in length".into()));
        }
        pop.log_weights = weights.iter().map(|w| w.ln()).collect();
        let z = logsumexp(&pop.log_weights);
        if !z.is_finite() {
            return Err(ChmcError::Contract("weights must have a positive finite sum".into()));
        }
        pop.log_weights.iter_mut().for_each(|l| *l -= z);
        Ok(pop)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn live_count(&self) -> usize {
        self.diverged.iter().filter(|d| !**d).count()
    }

    /// Running estimate of `log(Z_final / Z_0)`.
    pub fn log_normalizer_estimate(&self) -> f64 {
        self.log_z
    }

    /// Multiplies weights by `exp(-work)` and renormalises. Returns the
    /// log-normaliser increment `log sum_i w_i exp(-W_i)`.
    pub fn update_weights(&mut self, work: &[f64]) -> Result<f64> {
        if work.len() != self.len() {
            return Err(ChmcError::Contract(format!(
                "work has length {} but population has {}",
                work.len(),
                self.len()
            )));
        }
        for ((lw, cw), &w) in self.log_weights.iter_mut().zip(&mut self.cumulative_work).zip(work) {
            *lw -= w;
            *cw += w;
        }
        let inc = logsumexp(&self.log_weights);
        if !inc.is_finite() {
            return Err(ChmcError::WeightCollapse { step: self.step_index });
        }
        self.log_weights.iter_mut().for_each(|l| *l -= inc);
        self.log_z += inc;
        Ok(inc)
    }

    /// `1 / sum_i w_i^2`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.log_weights.iter().map(|l| (2.0 * l).exp()).sum::<f64>()
    }

    /// Systematic resampling; returns the ancestor index of every offspring.
    pub fn systematic_resample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let n = self.len();
        let u: f64 = rng.random::<f64>() / n as f64;
        let ancestors = systematic_ancestors(&self.weights(), u);
        self.states = ancestors.iter().map(|&a| self.states[a].clone()).collect();
        self.cumulative_work = ancestors.iter().map(|&a| self.cumulative_work[a]).collect();
        self.diverged = ancestors.iter().map(|&a| self.diverged[a]).collect();
        self.log_weights = vec![-(n as f64).ln(); n];
        ancestors
    }

    pub fn weighted_moment(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.states
            .iter()
            .zip(&self.log_weights)
            .filter(|(_, lw)| **lw > f64::NEG_INFINITY)
            .map(|(s, lw)| lw.exp() * f(&s.q))
            .sum()
    }

    /// Plain average over particles that have not diverged.
    pub fn unweighted_moment(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let (sum, n) = self
            .states
            .iter()
            .zip(&self.diverged)
            .filter(|(_, d)| !**d)
            .fold((0.0, 0usize), |(s, n), (st, _)| (s + f(&st.q), n + 1));
        sum / n as f64
    }
}

/// Offspring ancestors for systematic resampling with offset `u` in `[0, 1/N)`.
pub fn systematic_ancestors(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let last_live = weights.iter().rposition(|&w| w > 0.0).unwrap_or(n - 1);
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut cdf = weights[0] / total;
    for j in 0..n {
        let target = u + j as f64 / n as f64;
        while cdf <= target && i < last_live {
            i += 1;
            cdf += weights[i] / total;
        }
        out.push(i);
    }
    out
}

pub fn q_squared(q: &[f64]) -> f64 {
    q.iter().map(|x| x * x).sum()
}

pub fn q_first(q: &[f64]) -> f64 {
    q[0]
}

/// Named moment functions reported by the runner.
pub const MOMENTS: [(&str, fn(&[f64]) -> f64); 2] = [("q", q_first), ("q2", q_squared)];

/// Which `lambda` the gauge is fit at during step `k -> k + 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitLambda {
    /// `lambda_{k-1}`, the level the population was last transported to.
    #[default]
    Current,
    /// `lambda_k`, the level the integrator step targets.
    Target,
}

#[derive(Clone, Debug)]
pub enum GaugeChoice {
    /// `A = 0` throughout.
    None,
    /// Refit every step with the given parametrisation.
    Learned(GaugeKind),
    /// Held fixed for the whole run, no fitting.
    Fixed(GaugePotential),
}

#[derive(Clone, Debug)]
pub struct RunSettings {
    pub gauge: GaugeChoice,
    pub fit: FitConfig,
    pub fit_lambda: FitLambda,
    pub n_particles: usize,
    pub refresh_every: usize,
    pub resample_threshold: f64,
    pub seed: u64,
    /// Reductions are always performed in a fixed order; the flag is recorded
    /// in the report.
    pub deterministic: bool,
}

impl RunSettings {
    pub fn new(gauge: GaugeChoice, n_particles: usize, seed: u64) -> Self {
        RunSettings {
            gauge,
            fit: FitConfig::default(),
            fit_lambda: FitLambda::default(),
            n_particles,
            refresh_every: 2,
            resample_threshold: 0.5,
            seed,
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(ChmcError::Config(format!("n_particles must be at least 2, got {}", self.n_particles)));
        }
        if self.refresh_every < 1 {
            return Err(ChmcError::Config("refresh_every must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(ChmcError::Config(format!(
                "resample_threshold must lie in [0, 1], got {}",
                self.resample_threshold
            )));
        }
        self.fit.validate()
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self.gauge, GaugeChoice::None)
    }
}

/// One row of the per-step trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: f64,
    pub ess: f64,
    pub log_z_increment: f64,
    pub mean_work: f64,
    pub divergences: usize,
    pub resampled: bool,
    pub fit_loss: Option<f64>,
}

pub const TRACE_SCHEMA: &str = "chmc-trace-v1: step,lambda,ess,log_z_increment,mean_work,divergences,resampled";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub system: String,
    pub method: String,
    pub seed: u64,
    pub n_particles: usize,
    pub deterministic: bool,
    pub csv_schema: String,
    pub steps: Vec<StepRecord>,
    pub ess_trace: Vec<f64>,
    pub log_z_estimate: f64,
    pub weighted_moments: BTreeMap<String, f64>,
    pub unweighted_moments: BTreeMap<String, f64>,
    pub b_squared: BTreeMap<String, f64>,
    pub truths: BTreeMap<String, f64>,
    pub divergence_count: usize,
    pub final_gauge: Option<GaugeCheckpoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitTraceRow {
    pub step: usize,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub population: Population,
    pub report: RunReport,
    pub fit_trace: Vec<FitTraceRow>,
}

struct Slot {
    rng: StreamRng,
}

fn gaussian_vec<R: Rng + ?Sized>(d: usize, sd: f64, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

fn fresh_gauge(kind: &GaugeKind, dim: usize, seed: u64, step: usize) -> Result<GaugePotential> {
    match kind {
        GaugeKind::Polynomial { .. } => GaugePotential::zeros(kind.clone(), dim),
        GaugeKind::Mlp { hidden_sizes, activation } => {
            let mut rng = stream(seed, Purpose::GaugeInit, step as u64);
            GaugePotential::mlp_init(dim, hidden_sizes.clone(), *activation, &mut rng)
        }
    }
}

/// Runs a population through the schedule.
///
/// The initial population is `q ~ N(0, I)`, `p ~ N(0, m I)`, which is exact
/// for every benchmark at `lambda = 0`. At step `k = 1..L-1` momenta are
/// refreshed when `k % refresh_every == 0`, the gauge is refit on the
/// weighted population, every live particle takes one integrator step, and
/// weights are updated and resampled when ESS drops below
/// `resample_threshold * N`.
pub fn run_chmc(problem: &HamiltonianProblem, schedule: &Schedule, settings: &RunSettings) -> Result<RunOutput> {
    schedule.validate()?;
    settings.validate()?;
    let n = settings.n_particles;
    let d = problem.dim();
    let mass = problem.mass;
    let seed = settings.seed;

    let mut slots: Vec<Slot> = (0..n).map(|i| Slot { rng: stream(seed, Purpose::Particle, i as u64) }).collect();
    let states: Vec<ParticleState> = slots
        .iter_mut()
        .map(|s| {
            let q = gaussian_vec(d, 1.0, &mut s.rng);
            let p = gaussian_vec(d, mass.sqrt(), &mut s.rng);
            ParticleState::new(q, p)
        })
        .collect();
    let mut pop = Population::new(states)?;
    let mut resample_rng = stream(seed, Purpose::Resample, 0);

    let mut gauge: Option<GaugePotential> = match &settings.gauge {
        GaugeChoice::None => None,
        GaugeChoice::Learned(kind) => Some(fresh_gauge(kind, d, settings.fit.seed, 0)?),
        GaugeChoice::Fixed(g) => {
            if g.dim() != d {
                return Err(ChmcError::Config(format!(
                    "fixed gauge has dimension {} but the problem has {d}",
                    g.dim()
                )));
            }
            Some(g.clone())
        }
    };

    let mut steps = vec![StepRecord {
        step: 0,
        lambda: schedule.lambdas[0],
        ess: pop.effective_sample_size(),
        log_z_increment: 0.0,
        mean_work: 0.0,
        divergences: 0,
        resampled: false,
        fit_loss: None,
    }];
    let mut fit_trace = Vec::new();

    for k in 1..schedule.len() {
        pop.step_index = k;
        let lambda_prev = schedule.lambdas[k - 1];
        let lambda_k = schedule.lambdas[k];
        let lambda_dot = schedule.lambda_dots[k];

        if k % settings.refresh_every == 0 {
            pop.states.par_iter_mut().zip(slots.par_iter_mut()).zip(pop.diverged.par_iter()).for_each(
                |((s, slot), div)| {
                    if !*div {
                        *s = refresh_momentum(s, mass, &mut slot.rng);
                    }
                },
            );
        }

        let mut fit_loss = None;
        if let (GaugeChoice::Learned(kind), Some(current)) = (&settings.gauge, gauge.as_ref()) {
            let start = if settings.fit.warm_start { current.clone() } else { fresh_gauge(kind, d, settings.fit.seed, k)? };
            let fit_at = match settings.fit_lambda {
                FitLambda::Current => lambda_prev,
                FitLambda::Target => lambda_k,
            };
            let weights = pop.weights();
            let out = fit_gauge_potential(&start, problem, fit_at, &pop.states, &weights, &settings.fit)?;
            fit_loss = Some(out.final_loss);
            fit_trace.extend(out.losses.iter().enumerate().map(|(it, &loss)| FitTraceRow { step: k, iteration: it, loss }));
            gauge = Some(out.gauge);
        }

        let g = gauge.as_ref();
        let eps = schedule.epsilon;
        let results: Vec<Option<(ParticleState, f64)>> = pop
            .states
            .par_iter()
            .zip(pop.diverged.par_iter())
            .map(|(s, div)| {
                if *div {
                    return Ok(None);
                }
                match propagate(problem, g, lambda_prev, lambda_k, lambda_dot, eps, s) {
                    Ok(r) => Ok(Some(r)),
                    Err(ChmcError::Divergence { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;

        let mut work = vec![0.0; n];
        let mut new_divergences = 0;
        let mut work_sum = 0.0;
        let mut live = 0usize;
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Some((s, w)) => {
                    pop.states[i] = s;
                    work[i] = w;
                    work_sum += w;
                    live += 1;
                }
                None => {
                    if !pop.diverged[i] {
                        new_divergences += 1;
                    }
                    pop.diverged[i] = true;
                    work[i] = f64::INFINITY;
                }
            }
        }
        let inc = pop.update_weights(&work)?;
        let ess = pop.effective_sample_size();
        let resampled = ess < settings.resample_threshold * n as f64;
        if resampled {
            pop.systematic_resample(&mut resample_rng);
        }
        steps.push(StepRecord {
            step: k,
            lambda: lambda_k,
            ess,
            log_z_increment: inc,
            mean_work: if live > 0 { work_sum / live as f64 } else { f64::NAN },
            divergences: new_divergences,
            resampled,
            fit_loss,
        });
    }

    let mut weighted_moments = BTreeMap::new();
    let mut unweighted_moments = BTreeMap::new();
    for (name, f) in MOMENTS {
        weighted_moments.insert(name.to_string(), pop.weighted_moment(f));
        unweighted_moments.insert(name.to_string(), pop.unweighted_moment(f));
    }
    let method = match &settings.gauge {
        GaugeChoice::None => "baseline",
        GaugeChoice::Learned(_) => "chmc",
        GaugeChoice::Fixed(_) => "fixed_gauge",
    };
    let report = RunReport {
        system: problem.name.clone(),
        method: method.to_string(),
        seed,
        n_particles: n,
        deterministic: settings.deterministic,
        csv_schema: TRACE_SCHEMA.to_string(),
        ess_trace: steps.iter().map(|s| s.ess).collect(),
        log_z_estimate: pop.log_normalizer_estimate(),
        divergence_count: steps.iter().map(|s| s.divergences).sum(),
        steps,
        weighted_moments,
        unweighted_moments,
        b_squared: BTreeMap::new(),
        truths: BTreeMap::new(),
        final_gauge: gauge.as_ref().map(|g| g.to_checkpoint()),
    };
    Ok(RunOutput { population: pop, report, fit_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{benchmark, make_linear_schedule, BenchmarkName};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(qs: &[f64]) -> Vec<ParticleState> {
        qs.iter().map(|&q| ParticleState::new(vec![q], vec![0.0])).collect()
    }

    #[test]
    fn equal_work_leaves_weights() {
        let mut pop = Population::with_weights(pts(&[0.0, 1.0, 2.0]), &[0.2, 0.3, 0.5]).unwrap();
        let before = pop.weights();
        let inc = pop.update_weights(&[1.5, 1.5, 1.5]).unwrap();
        assert!((inc + 1.5).abs() < 1e-14);
        for (a, b) in pop.weights().iter().zip(before) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(pop.cumulative_work, vec![1.5, 1.5, 1.5]);
    }

    #[test]
    fn hand_computed_reweighting() {
        let mut pop = Population::new(pts(&[0.0, 1.0])).unwrap();
        pop.update_weights(&[0.0, 3f64.ln()]).unwrap();
        let w = pop.weights();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert!(logsumexp(&pop.log_weights).abs() < 1e-12);
    }

    #[test]
    fn infinite_work_zeroes_weight() {
        let mut pop = Population::new(pts(&[0.0, 1.0, 2.0])).unwrap();
        pop.update_weights(&[0.0, f64::INFINITY, 0.0]).unwrap();
        assert_eq!(pop.weights(), vec![0.5, 0.0, 0.5]);
        let err = pop.update_weights(&[f64::INFINITY; 3]).unwrap_err();
        assert!(matches!(err, ChmcError::WeightCollapse { .. }));
    }

    #[test]
    fn ess_examples() {
        let pop = Population::new(pts(&vec![0.0; 1000])).unwrap();
        assert!((pop.effective_sample_size() - 1000.0).abs() < 1e-9);
        let pop = Population::with_weights(pts(&[0.0; 4]), &[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((pop.effective_sample_size() - 2.0).abs() < 1e-12);
        let pop = Population::with_weights(pts(&[0.0; 2]), &[0.7, 0.3]).unwrap();
        assert!((pop.effective_sample_size() - 1.0 / 0.58).abs() < 1e-12);
    }

    #[test]
    fn moment_examples() {
        let pop = Population::new(pts(&[-1.5, 1.5])).unwrap();
        assert_eq!(pop.weighted_moment(|_| 1.0), 1.0);
        assert!((pop.weighted_moment(q_squared) - 2.25).abs() < 1e-15);
        let pop = Population::with_weights(pts(&[0.0, 2.0]), &[0.75, 0.25]).unwrap();
        assert!((pop.weighted_moment(q_squared) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_weights_copy_one_particle() {
        let mut pop = Population::with_weights(pts(&[5.0, 6.0, 7.0]), &[1.0, 0.0, 0.0]).unwrap();
        let anc = pop.systematic_resample(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(anc, vec![0, 0, 0]);
        assert!(pop.states.iter().all(|s| s.q[0] == 5.0));
        assert!((pop.effective_sample_size() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_tail_is_never_selected() {
        let anc = systematic_ancestors(&[0.5, 0.5, 0.0, 0.0], 0.2499999);
        assert!(anc.iter().all(|&a| a < 2));
    }

    #[test]
    fn expected_offspring_counts() {
        let w = [0.5, 0.3, 0.2];
        let mut states = pts(&[0.0, 1.0, 2.0]);
        states.extend(pts(&[9.0; 7]));
        let mut weights = w.to_vec();
        weights.extend([0.0; 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let u = rng.random::<f64>() / 10.0;
            for a in systematic_ancestors(&weights, u) {
                counts[a] += 1;
            }
        }
        for (c, e) in counts.iter().zip([5.0, 3.0, 2.0]) {
            let mean = *c as f64 / trials as f64;
            assert!((mean - e).abs() / e < 0.02, "{mean} vs {e}");
        }
    }

    #[test]
    fn zero_work_gives_zero_log_z() {
        let mut pop = Population::new(pts(&[0.0, 1.0, 2.0])).unwrap();
        for _ in 0..5 {
            pop.update_weights(&[0.0; 3]).unwrap();
        }
        assert_eq!(pop.log_normalizer_estimate(), 0.0);
    }

    #[test]
    fn instantaneous_jump_matches_importance_sampling() {
        let prob = benchmark(BenchmarkName::Annealing);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states: Vec<ParticleState> =
            (0..5000).map(|_| ParticleState::new(gaussian_vec(1, 1.0, &mut rng), vec![0.0])).collect();
        let work: Vec<f64> = states.iter().map(|s| prob.potential(1.0, &s.q) - prob.potential(0.0, &s.q)).collect();
        let direct = (work.iter().map(|w| (-w).exp()).sum::<f64>() / 5000.0).ln();
        let mut pop = Population::new(states).unwrap();
        pop.update_weights(&work).unwrap();
        assert!((pop.log_normalizer_estimate() - direct).abs() < 1e-12);
    }

    #[test]
    fn run_rejects_bad_settings() {
        let prob = benchmark(BenchmarkName::MovingMean);
        let sched = make_linear_schedule(2.0 / 3.0, 4).unwrap();
        let s = RunSettings::new(GaugeChoice::None, 1, 0);
        assert!(matches!(run_chmc(&prob, &sched, &s), Err(ChmcError::Config(_))));
        let mut s = RunSettings::new(GaugeChoice::None, 10, 0);
        s.refresh_every = 0;
        assert!(run_chmc(&prob, &sched, &s).is_err());
    }

    #[test]
    fn report_shapes() {
        let prob = benchmark(BenchmarkName::MovingMean);
        let sched = make_linear_schedule(2.0 / 3.0, 4).unwrap();
        let s = RunSettings::new(GaugeChoice::Learned(GaugeKind::Polynomial { order: 3 }), 200, 1);
        let out = run_chmc(&prob, &sched, &s).unwrap();
        assert_eq!(out.report.ess_trace.len(), 4);
        assert!(out.report.ess_trace.iter().all(|&e| (1.0..=200.0 + 1e-9).contains(&e)));
        assert_eq!(out.report.steps.len(), 4);
        assert!(out.report.final_gauge.is_some());
        assert!(logsumexp(&out.population.log_weights).abs() < 1e-12);
    }
}
