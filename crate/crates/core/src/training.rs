//! Fitting the gauge potential to a weighted population.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::ParticleState;
use crate::error::{ChmcError, Result};
use crate::gauge::{BracketDesign, GaugeKind, GaugePotential, PolynomialBasis};
use crate::systems::HamiltonianProblem;

/// Adam optimiser state with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grad.len() != n {
            return Err(ChmcError::Contract(format!(
                "adam state has {n} entries but params/grad have {}/{}",
                params.len(),
                grad.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..n {
            let g = grad[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / c1;
            let v_hat = self.second_moment[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps_hat);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Start each schedule step from the previous step's parameters.
    pub warm_start: bool,
    pub seed: u64,
    /// Record the loss at every iteration.
    pub trace: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { iterations: 200, learning_rate: 1e-2, warm_start: true, seed: 0, trace: false }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(ChmcError::Config("fit.iterations must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ChmcError::Config(format!(
                "fit.learning_rate must be a nonnegative number, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub gauge: GaugePotential,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss before each update, filled only when tracing.
    pub losses: Vec<f64>,
}

/// Runs `cfg.iterations` Adam steps on the bracket loss starting from `gauge`'s parameters.
pub fn fit_gauge_potential(
    gauge: &GaugePotential,
    problem: &HamiltonianProblem,
    lambda: f64,
    states: &[ParticleState],
    weights: &[f64],
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut params = gauge.params().to_vec();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut losses = Vec::new();
    let mut out = gauge.clone();

    let design = match gauge.kind() {
        GaugeKind::Polynomial { .. } => Some(BracketDesign::new(gauge.basis().unwrap(), problem, lambda, states, weights)?),
        GaugeKind::Mlp { .. } => None,
    };
    let eval = |out: &mut GaugePotential, params: &[f64]| -> Result<(f64, Vec<f64>)> {
        match &design {
            Some(d) => Ok(d.loss_and_gradient(params)),
            None => {
                out.set_params(params.to_vec())?;
                out.loss_and_param_gradient(problem, lambda, states, weights)
            }
        }
    };

    let mut initial_loss = f64::NAN;
    for it in 0..cfg.iterations {
        let (loss, grad) = eval(&mut out, &params)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ChmcError::FitFailure { iteration: it });
        }
        if it == 0 {
            initial_loss = loss;
        }
        if cfg.trace {
            losses.push(loss);
        }
        adam.step(&mut params, &grad)?;
    }
    let (final_loss, _) = eval(&mut out, &params)?;
    if !final_loss.is_finite() {
        return Err(ChmcError::FitFailure { iteration: cfg.iterations });
    }
    out.set_params(params)?;
    Ok(FitOutcome { gauge: out, initial_loss, final_loss, losses })
}

/// Ridge parameter added to the Gram matrix of the least-squares oracle.
pub const ORACLE_RIDGE: f64 = 1e-8;

/// Exact minimiser of the polynomial bracket loss plus `ORACLE_RIDGE |phi|^2`.
///
/// Solved through the SVD of the weighted design matrix rather than the
/// normal equations, since functions of `H` have identically zero bracket and
/// leave the Gram matrix singular.
pub fn closed_form_polynomial_fit(
    basis: &PolynomialBasis,
    problem: &HamiltonianProblem,
    lambda: f64,
    states: &[ParticleState],
    weights: &[f64],
) -> Result<Vec<f64>> {
    let design = BracketDesign::new(basis, problem, lambda, states, weights)?;
    least_squares_oracle(&design)
}

pub fn least_squares_oracle(design: &BracketDesign) -> Result<Vec<f64>> {
    let (n, k) = (design.len(), design.num_features);
    let scale: Vec<f64> = design.weights.iter().map(|w| (w / n as f64).sqrt()).collect();
    let m = DMatrix::from_fn(n, k, |i, j| scale[i] * design.features[i * k + j]);
    let y = DVector::from_fn(n, |i, _| scale[i] * design.targets[i]);
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u.as_ref(), svd.v_t.as_ref()) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(ChmcError::Oracle("SVD did not converge".into())),
    };
    let uty = u.transpose() * &y;
    let mut coeffs = DVector::zeros(svd.singular_values.len());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        coeffs[i] = s / (s * s + ORACLE_RIDGE) * uty[i];
    }
    let phi = vt.transpose() * coeffs;
    if phi.iter().any(|x| !x.is_finite()) {
        return Err(ChmcError::Oracle("non-finite least-squares solution".into()));
    }
    Ok(phi.iter().copied().collect())
}
