//! The counterdiabatic splitting integrator, momentum refresh and work.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ChmcError, Result};
use crate::gauge::GaugePotential;
use crate::systems::HamiltonianProblem;

/// Largest `|H_new - H_old|` tolerated in a single step before the particle
/// is declared diverged.
pub const MAX_STEP_ENERGY_CHANGE: f64 = 1000.0;

/// Phase-space point `z = (q, p)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl ParticleState {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        ParticleState { q, p }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|x| x.is_finite())
    }
}

fn divergence(reason: impl Into<String>, s: &ParticleState) -> ChmcError {
    ChmcError::Divergence { reason: reason.into(), q: s.q.clone(), p: s.p.clone() }
}

/// One step of the drift-kick-drift integrator for `H_{lambda_k} + lambda_dot * A`:
///
/// ```text
/// q_half = q + eps/2 (p/m + lambda_dot grad_p A(q, p))
/// p'     = p - eps (grad_q V(q_half) + lambda_dot grad_q A(q_half, p))
/// q'     = q_half + eps/2 (p'/m + lambda_dot grad_p A(q_half, p'))
/// ```
///
/// `gauge = None` is the undriven kernel.
pub fn counterdiabatic_leapfrog(
    problem: &HamiltonianProblem,
    gauge: Option<&GaugePotential>,
    lambda_k: f64,
    lambda_dot: f64,
    epsilon: f64,
    state: &ParticleState,
) -> Result<ParticleState> {
    if !(epsilon > 0.0) {
        return Err(ChmcError::Contract(format!("step size must be positive, got {epsilon}")));
    }
    let d = problem.dim();
    if state.q.len() != d || state.p.len() != d {
        return Err(ChmcError::Contract(format!("state dimension does not match problem dimension {d}")));
    }
    let m = problem.mass;
    let half = 0.5 * epsilon;
    let gauge = gauge.filter(|g| !g.is_zero() && lambda_dot != 0.0);

    let mut q_half = state.q.clone();
    match gauge {
        Some(a) => {
            let (_, gp) = a.input_gradients(&state.q, &state.p)?;
            for j in 0..d {
                q_half[j] += half * (state.p[j] / m + lambda_dot * gp[j]);
            }
        }
        None => {
            for j in 0..d {
                q_half[j] += half * (state.p[j] / m);
            }
        }
    }

    let grad_v = problem.grad_q_potential(lambda_k, &q_half);
    let mut p_new = state.p.clone();
    let mut q_new = q_half.clone();
    match gauge {
        Some(a) => {
            let (gq, _) = a.input_gradients(&q_half, &state.p)?;
            for j in 0..d {
                p_new[j] -= epsilon * (grad_v[j] + lambda_dot * gq[j]);
            }
            let (_, gp) = a.input_gradients(&q_half, &p_new)?;
            for j in 0..d {
                q_new[j] += half * (p_new[j] / m + lambda_dot * gp[j]);
            }
        }
        None => {
            for j in 0..d {
                p_new[j] -= epsilon * grad_v[j];
            }
            for j in 0..d {
                q_new[j] += half * (p_new[j] / m);
            }
        }
    }

    let out = ParticleState { q: q_new, p: p_new };
    if !out.is_finite() {
        return Err(divergence("non-finite state after integration step", &out));
    }
    Ok(out)
}

/// Replaces `p` by a draw from `N(0, m I)`; `q` is untouched.
pub fn refresh_momentum<R: Rng + ?Sized>(state: &ParticleState, mass: f64, rng: &mut R) -> ParticleState {
    let sd = mass.sqrt();
    let p = (0..state.p.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect();
    ParticleState { q: state.q.clone(), p }
}

/// `H_{lambda_new}(after) - H_{lambda_prev}(before)`: protocol plus shadow work
/// of one step, so the incremental weight is `exp(-W)`.
pub fn work_increment(
    problem: &HamiltonianProblem,
    lambda_prev: f64,
    lambda_new: f64,
    before: &ParticleState,
    after: &ParticleState,
) -> f64 {
    problem.hamiltonian(lambda_new, &after.q, &after.p) - problem.hamiltonian(lambda_prev, &before.q, &before.p)
}

/// Integrates one schedule step from `lambda_prev` to `lambda_k` and returns
/// the new state with its work. Steps whose energy change exceeds
/// [`MAX_STEP_ENERGY_CHANGE`] are reported as divergences.
pub fn propagate(
    problem: &HamiltonianProblem,
    gauge: Option<&GaugePotential>,
    lambda_prev: f64,
    lambda_k: f64,
    lambda_dot: f64,
    epsilon: f64,
    state: &ParticleState,
) -> Result<(ParticleState, f64)> {
    let next = counterdiabatic_leapfrog(problem, gauge, lambda_k, lambda_dot, epsilon, state)?;
    let work = work_increment(problem, lambda_prev, lambda_k, state, &next);
    if !work.is_finite() || work.abs() > MAX_STEP_ENERGY_CHANGE {
        return Err(divergence(format!("energy change {work:e} exceeds {MAX_STEP_ENERGY_CHANGE}"), &next));
    }
    Ok((next, work))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauge::GaugeKind;
    use crate::systems::{benchmark, BenchmarkName};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn analytic_p() -> GaugePotential {
        GaugePotential::with_params(GaugeKind::Polynomial { order: 1 }, 1, vec![0.0, 1.0]).unwrap()
    }

    /// Plain drift-kick-drift leapfrog written out independently.
    fn reference_leapfrog(prob: &HamiltonianProblem, lam: f64, eps: f64, q: f64, p: f64) -> (f64, f64) {
        let qh = q + 0.5 * eps * p;
        let p1 = p - eps * prob.grad_q_potential(lam, &[qh])[0];
        (qh + 0.5 * eps * p1, p1)
    }

    #[test]
    fn hand_computed_step() {
        // lambda = 0 annealing is V = q^2 / 2
        let prob = benchmark(BenchmarkName::Annealing);
        let s = counterdiabatic_leapfrog(&prob, None, 0.0, 0.0, 0.1, &ParticleState::new(vec![0.0], vec![1.0]))
            .unwrap();
        assert!((s.p[0] - 0.995).abs() < 1e-15);
        assert!((s.q[0] - 0.09975).abs() < 1e-15);
    }

    #[test]
    fn stationary_point_is_fixed() {
        let prob = benchmark(BenchmarkName::DoubleWell);
        let s0 = ParticleState::new(vec![0.0], vec![0.0]);
        let s = counterdiabatic_leapfrog(&prob, None, 0.7, 0.0, 0.3, &s0).unwrap();
        assert_eq!(s, s0);
    }

    #[test]
    fn exact_gauge_adds_mean_drift() {
        let prob = benchmark(BenchmarkName::MovingMean);
        let a = analytic_p();
        let (eps, ld, lam) = (2.0 / 3.0, 0.5, 1.0 / 3.0);
        for (q, p) in [(0.2, -0.4), (-1.0, 1.5)] {
            let s = counterdiabatic_leapfrog(&prob, Some(&a), lam, ld, eps, &ParticleState::new(vec![q], vec![p]))
                .unwrap();
            let qh = q + eps / 2.0 * (p + ld);
            let p1 = p - eps * (qh - lam);
            let q1 = qh + eps / 2.0 * (p1 + ld);
            assert!((s.q[0] - q1).abs() < 1e-15 && (s.p[0] - p1).abs() < 1e-15);
        }
    }

    #[test]
    fn reduces_to_plain_leapfrog_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = GaugePotential::polynomial(1, 3).unwrap();
        for name in [BenchmarkName::MovingMean, BenchmarkName::Annealing, BenchmarkName::DoubleWell, BenchmarkName::MixturePath] {
            let prob = benchmark(name);
            for _ in 0..50 {
                let (q, p, lam) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..1.0));
                let (rq, rp) = reference_leapfrog(&prob, lam, 0.2, q, p);
                for g in [None, Some(&zero)] {
                    let s = counterdiabatic_leapfrog(&prob, g, lam, 0.5, 0.2, &ParticleState::new(vec![q], vec![p])).unwrap();
                    assert_eq!((s.q[0], s.p[0]), (rq, rp));
                }
            }
        }
    }

    fn max_energy_error(eps: f64) -> f64 {
        let prob = benchmark(BenchmarkName::Annealing);
        let mut s = ParticleState::new(vec![1.0], vec![0.5]);
        let h0 = prob.hamiltonian(0.0, &s.q, &s.p);
        let steps = (10.0 / eps).round() as usize;
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            s = counterdiabatic_leapfrog(&prob, None, 0.0, 0.0, eps, &s).unwrap();
            worst = worst.max((prob.hamiltonian(0.0, &s.q, &s.p) - h0).abs());
        }
        worst
    }

    #[test]
    fn energy_error_is_second_order() {
        for eps in [0.1, 0.05, 0.025] {
            let ratio = max_energy_error(eps) / max_energy_error(eps / 2.0);
            assert!((3.5..=4.5).contains(&ratio), "eps {eps}: ratio {ratio}");
        }
    }

    #[test]
    fn undriven_step_is_reversible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for name in [BenchmarkName::Annealing, BenchmarkName::DoubleWell, BenchmarkName::MixturePath] {
            let prob = benchmark(name);
            for _ in 0..50 {
                let s0 = ParticleState::new(vec![rng.random_range(-2.0..2.0)], vec![rng.random_range(-2.0..2.0)]);
                let lam = rng.random_range(0.0..1.0);
                let mut s = counterdiabatic_leapfrog(&prob, None, lam, 0.0, 0.1, &s0).unwrap();
                s.p[0] = -s.p[0];
                let mut back = counterdiabatic_leapfrog(&prob, None, lam, 0.0, 0.1, &s).unwrap();
                back.p[0] = -back.p[0];
                for (a, b) in back.q.iter().chain(&back.p).zip(s0.q.iter().chain(&s0.p)) {
                    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn work_examples() {
        let prob = benchmark(BenchmarkName::Annealing);
        let s = ParticleState::new(vec![0.4], vec![-0.3]);
        assert_eq!(work_increment(&prob, 0.2, 0.2, &s, &s), 0.0);

        let s0 = ParticleState::new(vec![0.0], vec![1.0]);
        let s1 = counterdiabatic_leapfrog(&prob, None, 0.0, 0.0, 0.1, &s0).unwrap();
        let w = work_increment(&prob, 0.0, 0.0, &s0, &s1);
        let hand = 0.5 * (0.09975f64.powi(2) + 0.995f64.powi(2)) - 0.5;
        assert!((w - hand).abs() < 1e-15);
        assert!((w + 1.2469e-5).abs() < 1e-8);

        let w = work_increment(&prob, 0.0, 1.0, &s, &s);
        assert!((w - (prob.potential(1.0, &s.q) - prob.potential(0.0, &s.q))).abs() < 1e-15);
    }

    #[test]
    fn refresh_is_reproducible_and_normal() {
        let s = ParticleState::new(vec![1.234], vec![9.0]);
        let a = refresh_momentum(&s, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let b = refresh_momentum(&s, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert_eq!(a.q, s.q);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| refresh_momentum(&s, 1.0, &mut rng).p[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn blow_up_is_divergence() {
        let prob = benchmark(BenchmarkName::DoubleWell);
        let s0 = ParticleState::new(vec![3.0], vec![0.0]);
        let r = propagate(&prob, None, 1.0, 1.0, 0.0, 0.5, &s0);
        assert!(matches!(r, Err(ChmcError::Divergence { .. })));
        let s0 = ParticleState::new(vec![1e200], vec![0.0]);
        let r = counterdiabatic_leapfrog(&prob, None, 1.0, 0.0, 0.5, &s0);
        assert!(matches!(r, Err(ChmcError::Divergence { .. })));
    }
}
