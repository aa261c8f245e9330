//! Parametrised gauge potentials `A_phi(q, p)`.
//!
//! Two families are supported:
//!
//! * **Polynomial** of order `r`: a linear combination of the monomials
//!   `q^a p^b` with `0 < |a| + |b| <= r`. Monomials are ordered by total degree,
//!   then lexicographically (descending) on the exponent vector
//!   `(a_1..a_d, b_1..b_d)`. In 1-D with order 2 the order is
//!   `q, p, q^2, qp, p^2`. The constant monomial is left out.
//! * **MLP** `2d -> h_1 -> ... -> h_k -> 1` with `relu` or `tanh` hidden
//!   activations and a linear output. Parameters are stored layer by layer,
//!   each layer as its row-major `(out x in)` weight matrix followed by its bias.
//!
//! The only derivatives needed are `grad_{q,p} A` and the parameter gradient of
//! the bracket loss. For the MLP the bracket `{A, H}` is the directional
//! derivative of `A` along `v = (p/m, -grad V)`, computed by pushing a tangent
//! through the network; its parameter gradient is a reverse sweep over both
//! the primal and tangent lanes.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::ParticleState;
use crate::error::{ChmcError, Result};
use crate::systems::HamiltonianProblem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> (f64, f64, f64) {
        // (sigma, sigma', sigma'')
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GaugeKind {
    Polynomial { order: usize },
    Mlp { hidden_sizes: Vec<usize>, activation: Activation },
}

/// Monomial exponents over the `2d` variables `(q_1..q_d, p_1..p_d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialBasis {
    pub dim: usize,
    pub order: usize,
    pub exponents: Vec<Vec<u32>>,
}

impl PolynomialBasis {
    pub fn new(dim: usize, order: usize) -> Self {
        let vars = 2 * dim;
        let mut exponents = Vec::new();
        for degree in 1..=order as u32 {
            let mut prefix = Vec::with_capacity(vars);
            compositions(vars, degree, &mut prefix, &mut exponents);
        }
        PolynomialBasis { dim, order, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Index of the monomial with the given exponent vector.
    pub fn index_of(&self, exps: &[u32]) -> Option<usize> {
        self.exponents.iter().position(|e| e.as_slice() == exps)
    }

    /// Human-readable label such as `q^2 p` (1-D) or `q1 p2^3`.
    pub fn label(&self, k: usize) -> String {
        let e = &self.exponents[k];
        let mut parts = Vec::new();
        for (v, &x) in e.iter().enumerate() {
            if x == 0 {
                continue;
            }
            let sym = if v < self.dim { "q" } else { "p" };
            let idx = if self.dim == 1 { String::new() } else { format!("{}", v % self.dim + 1) };
            parts.push(if x == 1 { format!("{sym}{idx}") } else { format!("{sym}{idx}^{x}") });
        }
        parts.join(" ")
    }

    fn powers(&self, q: &[f64], p: &[f64]) -> Vec<Vec<f64>> {
        q.iter()
            .chain(p)
            .map(|&x| {
                let mut row = Vec::with_capacity(self.order + 1);
                let mut acc = 1.0;
                for _ in 0..=self.order {
                    row.push(acc);
                    acc *= x;
                }
                row
            })
            .collect()
    }

    /// Values of every monomial and, when `grads` is given, their partial
    /// derivatives (row-major `len x 2d`).
    fn eval_monomials(&self, q: &[f64], p: &[f64], values: &mut [f64], mut grads: Option<&mut [f64]>) {
        let pw = self.powers(q, p);
        let vars = 2 * self.dim;
        for (k, e) in self.exponents.iter().enumerate() {
            values[k] = e.iter().enumerate().map(|(v, &x)| pw[v][x as usize]).product();
            if let Some(g) = grads.as_deref_mut() {
                for v in 0..vars {
                    let ev = e[v] as usize;
                    g[k * vars + v] = if ev == 0 {
                        0.0
                    } else {
                        let mut prod = ev as f64 * pw[v][ev - 1];
                        for (u, &x) in e.iter().enumerate() {
                            if u != v {
                                prod *= pw[u][x as usize];
                            }
                        }
                        prod
                    };
                }
            }
        }
    }

    /// Per-monomial brackets `{b_k, H}(q, p)` given `grad V` at `q`.
    pub fn bracket_features(&self, q: &[f64], p: &[f64], grad_v: &[f64], mass: f64, out: &mut [f64]) {
        let vars = 2 * self.dim;
        let mut vals = vec![0.0; self.len()];
        let mut grads = vec![0.0; self.len() * vars];
        self.eval_monomials(q, p, &mut vals, Some(&mut grads));
        for k in 0..self.len() {
            let g = &grads[k * vars..(k + 1) * vars];
            let mut b = 0.0;
            for j in 0..self.dim {
                b += g[j] * p[j] / mass - g[self.dim + j] * grad_v[j];
            }
            out[k] = b;
        }
    }
}

/// Lexicographically descending compositions of `degree` into `vars` parts.
fn compositions(vars: usize, degree: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if vars == 1 {
        prefix.push(degree);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for e in (0..=degree).rev() {
        prefix.push(e);
        compositions(vars - 1, degree - e, prefix, out);
        prefix.pop();
    }
}

fn mlp_layer_sizes(dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(2 * dim);
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    sizes
}

fn mlp_param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

/// A gauge potential: a kind, its parameters and the phase-space dimension.
#[derive(Clone, Debug)]
pub struct GaugePotential {
    kind: GaugeKind,
    dim: usize,
    params: Vec<f64>,
    basis: Option<Arc<PolynomialBasis>>,
    sizes: Vec<usize>,
}

impl PartialEq for GaugePotential {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.dim == other.dim && self.params == other.params
    }
}

impl GaugePotential {
    /// Zero-parameter gauge potential of the given kind.
    pub fn zeros(kind: GaugeKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ChmcError::Config("gauge dimension must be positive".into()));
        }
        match &kind {
            GaugeKind::Polynomial { order } => {
                if *order == 0 {
                    return Err(ChmcError::Config("polynomial order must be at least 1".into()));
                }
                let basis = Arc::new(PolynomialBasis::new(dim, *order));
                let n = basis.len();
                Ok(GaugePotential { kind, dim, params: vec![0.0; n], basis: Some(basis), sizes: Vec::new() })
            }
            GaugeKind::Mlp { hidden_sizes, .. } => {
                if hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
                    return Err(ChmcError::Config("mlp hidden sizes must be a nonempty list of positive widths".into()));
                }
                let sizes = mlp_layer_sizes(dim, hidden_sizes);
                let n = mlp_param_count(&sizes);
                Ok(GaugePotential { kind, dim, params: vec![0.0; n], basis: None, sizes })
            }
        }
    }

    pub fn with_params(kind: GaugeKind, dim: usize, params: Vec<f64>) -> Result<Self> {
        let mut g = Self::zeros(kind, dim)?;
        g.set_params(params)?;
        Ok(g)
    }

    pub fn polynomial(dim: usize, order: usize) -> Result<Self> {
        Self::zeros(GaugeKind::Polynomial { order }, dim)
    }

    /// MLP with LeCun-normal hidden weights, zero biases and a zero output
    /// layer, so the initial field is identically zero but has a nonzero
    /// parameter gradient.
    pub fn mlp_init<R: Rng + ?Sized>(
        dim: usize,
        hidden_sizes: Vec<usize>,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut g = Self::zeros(GaugeKind::Mlp { hidden_sizes, activation }, dim)?;
        let n_layers = g.sizes.len() - 1;
        let mut off = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (g.sizes[l], g.sizes[l + 1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            for w in &mut g.params[off..off + fan_in * fan_out] {
                *w = if l + 1 == n_layers {
                    0.0
                } else {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                };
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(g)
    }

    pub fn kind(&self) -> &GaugeKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn basis(&self) -> Option<&PolynomialBasis> {
        self.basis.as_deref()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(ChmcError::Contract(format!(
                "expected {} gauge parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.params.iter().all(|&x| x == 0.0)
    }

    fn check_dims(&self, q: &[f64], p: &[f64]) -> Result<()> {
        if q.len() != self.dim || p.len() != self.dim {
            return Err(ChmcError::Contract(format!(
                "gauge expects q, p of length {}, got {} and {}",
                self.dim,
                q.len(),
                p.len()
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        self.check_dims(q, p)?;
        Ok(match &self.kind {
            GaugeKind::Polynomial { .. } => {
                let basis = self.basis.as_ref().unwrap();
                let mut vals = vec![0.0; basis.len()];
                basis.eval_monomials(q, p, &mut vals, None);
                vals.iter().zip(&self.params).map(|(v, c)| v * c).sum()
            }
            GaugeKind::Mlp { activation, .. } => {
                let x: Vec<f64> = q.iter().chain(p).copied().collect();
                self.mlp_forward(&x, *activation).0
            }
        })
    }

    /// `(grad_q A, grad_p A)` at `(q, p)`.
    pub fn input_gradients(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dims(q, p)?;
        let d = self.dim;
        let full = match &self.kind {
            GaugeKind::Polynomial { .. } => {
                let basis = self.basis.as_ref().unwrap();
                let vars = 2 * d;
                let mut vals = vec![0.0; basis.len()];
                let mut grads = vec![0.0; basis.len() * vars];
                basis.eval_monomials(q, p, &mut vals, Some(&mut grads));
                let mut out = vec![0.0; vars];
                for (k, c) in self.params.iter().enumerate() {
                    if *c != 0.0 {
                        for v in 0..vars {
                            out[v] += c * grads[k * vars + v];
                        }
                    }
                }
                out
            }
            GaugeKind::Mlp { activation, .. } => {
                let x: Vec<f64> = q.iter().chain(p).copied().collect();
                self.mlp_input_grad(&x, *activation)
            }
        };
        Ok((full[..d].to_vec(), full[d..].to_vec()))
    }

    /// `{A, H_lambda}(q, p) = grad_q A . p/m - grad_p A . grad_q V_lambda(q)`.
    pub fn poisson_bracket_with_h(
        &self,
        problem: &HamiltonianProblem,
        lambda: f64,
        q: &[f64],
        p: &[f64],
    ) -> Result<f64> {
        self.check_dims(q, p)?;
        if problem.dim() != self.dim {
            return Err(ChmcError::Contract(format!(
                "gauge dimension {} does not match problem dimension {}",
                self.dim,
                problem.dim()
            )));
        }
        let grad_v = problem.grad_q_potential(lambda, q);
        Ok(self.bracket_given_grad(q, p, &grad_v, problem.mass))
    }

    fn bracket_given_grad(&self, q: &[f64], p: &[f64], grad_v: &[f64], mass: f64) -> f64 {
        match &self.kind {
            GaugeKind::Polynomial { .. } => {
                let basis = self.basis.as_ref().unwrap();
                let mut feats = vec![0.0; basis.len()];
                basis.bracket_features(q, p, grad_v, mass, &mut feats);
                feats.iter().zip(&self.params).map(|(b, c)| b * c).sum()
            }
            GaugeKind::Mlp { activation, .. } => {
                let (x, v) = bracket_direction(q, p, grad_v, mass);
                self.mlp_tangent(&x, &v, *activation, None, 0.0).1
            }
        }
    }

    /// Loss `(1/N) sum_i w_i ({A, H}(q_i, p_i) - d_lambda V(q_i))^2` and its
    /// gradient with respect to the parameters.
    ///
    /// Per-particle terms are summed in fixed-size chunks whose partial sums
    /// are combined in index order, so the result does not depend on the
    /// thread pool.
    pub fn loss_and_param_gradient(
        &self,
        problem: &HamiltonianProblem,
        lambda: f64,
        states: &[ParticleState],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        if states.is_empty() {
            return Err(ChmcError::Contract("loss needs a nonempty population".into()));
        }
        if states.len() != weights.len() {
            return Err(ChmcError::Contract("states and weights differ in length".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(ChmcError::Contract("weights must be nonnegative".into()));
        }
        if problem.dim() != self.dim {
            return Err(ChmcError::Contract("gauge and problem dimensions differ".into()));
        }
        match &self.kind {
            GaugeKind::Polynomial { .. } => {
                let design = BracketDesign::new(self.basis.as_ref().unwrap(), problem, lambda, states, weights)?;
                Ok(design.loss_and_gradient(&self.params))
            }
            GaugeKind::Mlp { activation, .. } => {
                let act = *activation;
                let n = states.len() as f64;
                let np = self.params.len();
                let partials: Vec<(f64, Vec<f64>)> = states
                    .par_chunks(CHUNK)
                    .zip(weights.par_chunks(CHUNK))
                    .map(|(sts, ws)| {
                        let mut loss = 0.0;
                        let mut grad = vec![0.0; np];
                        let mut grad_v = vec![0.0; self.dim];
                        for (s, &w) in sts.iter().zip(ws) {
                            if w == 0.0 {
                                continue;
                            }
                            problem.grad_q_potential_into(lambda, &s.q, &mut grad_v);
                            let c = problem.dlambda_potential(lambda, &s.q);
                            let (x, v) = bracket_direction(&s.q, &s.p, &grad_v, problem.mass);
                            let bracket = self.mlp_tangent(&x, &v, act, None, 0.0).1;
                            let r = bracket - c;
                            loss += w * r * r;
                            self.mlp_tangent(&x, &v, act, Some(&mut grad), 2.0 * w * r);
                        }
                        (loss, grad)
                    })
                    .collect();
                let mut loss = 0.0;
                let mut grad = vec![0.0; np];
                for (l, g) in partials {
                    loss += l;
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                grad.iter_mut().for_each(|g| *g /= n);
                Ok((loss / n, grad))
            }
        }
    }

    fn mlp_forward(&self, x: &[f64], act: Activation) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        // returns output, pre-activations z_l and activations a_l (a_0 = x)
        let n_layers = self.sizes.len() - 1;
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + fi * fo];
            let b = &self.params[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            let input = acts.last().unwrap();
            let z: Vec<f64> = (0..fo)
                .map(|i| b[i] + w[i * fi..(i + 1) * fi].iter().zip(input).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            let a = if l + 1 == n_layers { z.clone() } else { z.iter().map(|&zi| act.apply(zi).0).collect() };
            pre.push(z);
            acts.push(a);
        }
        (acts.last().unwrap()[0], pre, acts)
    }

    fn mlp_input_grad(&self, x: &[f64], act: Activation) -> Vec<f64> {
        let (_, pre, _) = self.mlp_forward(x, act);
        let n_layers = self.sizes.len() - 1;
        let offsets = self.layer_offsets();
        let mut delta = vec![1.0];
        for l in (0..n_layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 != n_layers {
                for i in 0..fo {
                    delta[i] *= act.apply(pre[l][i]).1;
                }
            }
            let w = &self.params[offsets[l]..offsets[l] + fi * fo];
            let mut prev = vec![0.0; fi];
            for i in 0..fo {
                let di = delta[i];
                if di != 0.0 {
                    for (pj, wij) in prev.iter_mut().zip(&w[i * fi..(i + 1) * fi]) {
                        *pj += wij * di;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.sizes.len());
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offs.push(off);
            off += w[0] * w[1] + w[1];
        }
        offs
    }

    /// Forward pass carrying the tangent along `v`; returns `(A, dA . v)`.
    /// When `grad` is given, accumulates `seed * d(dA . v)/d(params)` into it.
    fn mlp_tangent(
        &self,
        x: &[f64],
        v: &[f64],
        act: Activation,
        grad: Option<&mut Vec<f64>>,
        seed: f64,
    ) -> (f64, f64) {
        let n_layers = self.sizes.len() - 1;
        let offsets = self.layer_offsets();
        let mut a = vec![x.to_vec()];
        let mut ad = vec![v.to_vec()];
        // per hidden layer: (z, zdot) kept for the reverse sweep
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut zds: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offsets[l]..offsets[l] + fi * fo];
            let b = &self.params[offsets[l] + fi * fo..offsets[l] + fi * fo + fo];
            let (ai, adi) = (&a[l], &ad[l]);
            let mut z = vec![0.0; fo];
            let mut zd = vec![0.0; fo];
            for i in 0..fo {
                let row = &w[i * fi..(i + 1) * fi];
                let mut s = b[i];
                let mut sd = 0.0;
                for j in 0..fi {
                    s += row[j] * ai[j];
                    sd += row[j] * adi[j];
                }
                z[i] = s;
                zd[i] = sd;
            }
            let (an, adn) = if l + 1 == n_layers {
                (z.clone(), zd.clone())
            } else {
                let mut an = vec![0.0; fo];
                let mut adn = vec![0.0; fo];
                for i in 0..fo {
                    let (s, ds, _) = act.apply(z[i]);
                    an[i] = s;
                    adn[i] = ds * zd[i];
                }
                (an, adn)
            };
            zs.push(z);
            zds.push(zd);
            a.push(an);
            ad.push(adn);
        }
        let out = (a[n_layers][0], ad[n_layers][0]);

        if let Some(grad) = grad {
            // adjoints of the primal (abar) and tangent (adbar) lanes
            let mut abar = vec![0.0];
            let mut adbar = vec![seed];
            for l in (0..n_layers).rev() {
                let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
                let (zbar, zdbar) = if l + 1 == n_layers {
                    (abar.clone(), adbar.clone())
                } else {
                    let mut zbar = vec![0.0; fo];
                    let mut zdbar = vec![0.0; fo];
                    for i in 0..fo {
                        let (_, d1, d2) = act.apply(zs[l][i]);
                        zdbar[i] = d1 * adbar[i];
                        zbar[i] = d2 * zds[l][i] * adbar[i] + d1 * abar[i];
                    }
                    (zbar, zdbar)
                };
                let off = offsets[l];
                let w = &self.params[off..off + fi * fo];
                let mut abar_prev = vec![0.0; fi];
                let mut adbar_prev = vec![0.0; fi];
                for i in 0..fo {
                    let (zb, zdb) = (zbar[i], zdbar[i]);
                    if zb == 0.0 && zdb == 0.0 {
                        continue;
                    }
                    let gw = &mut grad[off + i * fi..off + (i + 1) * fi];
                    for j in 0..fi {
                        gw[j] += zb * a[l][j] + zdb * ad[l][j];
                    }
                    grad[off + fi * fo + i] += zb;
                    if l > 0 {
                        let row = &w[i * fi..(i + 1) * fi];
                        for j in 0..fi {
                            abar_prev[j] += row[j] * zb;
                            adbar_prev[j] += row[j] * zdb;
                        }
                    }
                }
                abar = abar_prev;
                adbar = adbar_prev;
            }
        }
        out
    }

    pub fn to_checkpoint(&self) -> GaugeCheckpoint {
        GaugeCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            dim: self.dim,
            kind: self.kind.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: GaugeCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ChmcError::Config(format!("unsupported gauge checkpoint format '{}'", ck.format)));
        }
        Self::with_params(ck.kind, ck.dim, ck.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(s)?)
    }
}

const CHUNK: usize = 64;
const CHECKPOINT_FORMAT: &str = "chmc-gauge-v1";

/// Text checkpoint of a fitted gauge potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeCheckpoint {
    pub format: String,
    pub dim: usize,
    #[serde(flatten)]
    pub kind: GaugeKind,
    pub params: Vec<f64>,
}

fn bracket_direction(q: &[f64], p: &[f64], grad_v: &[f64], mass: f64) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = q.iter().chain(p).copied().collect();
    let v: Vec<f64> = p.iter().map(|pi| pi / mass).chain(grad_v.iter().map(|g| -g)).collect();
    (x, v)
}

/// Bracket features and targets of a population for the polynomial family.
/// The loss is the weighted quadratic `(1/N) sum_i w_i (B_i . phi - c_i)^2`.
#[derive(Clone, Debug)]
pub struct BracketDesign {
    /// Row-major `N x K` matrix of `{b_k, H}(q_i, p_i)`.
    pub features: Vec<f64>,
    /// `d_lambda V(q_i)`.
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
    pub num_features: usize,
}

impl BracketDesign {
    pub fn new(
        basis: &PolynomialBasis,
        problem: &HamiltonianProblem,
        lambda: f64,
        states: &[ParticleState],
        weights: &[f64],
    ) -> Result<Self> {
        if states.is_empty() {
            return Err(ChmcError::Contract("design needs a nonempty population".into()));
        }
        if states.len() != weights.len() {
            return Err(ChmcError::Contract("states and weights differ in length".into()));
        }
        let k = basis.len();
        let mut features = vec![0.0; states.len() * k];
        features.par_chunks_mut(k).zip(states.par_iter()).for_each(|(row, s)| {
            let grad_v = problem.grad_q_potential(lambda, &s.q);
            basis.bracket_features(&s.q, &s.p, &grad_v, problem.mass, row);
        });
        let targets = states.iter().map(|s| problem.dlambda_potential(lambda, &s.q)).collect();
        Ok(BracketDesign { features, targets, weights: weights.to_vec(), num_features: k })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn loss(&self, phi: &[f64]) -> f64 {
        let k = self.num_features;
        let mut loss = 0.0;
        for i in 0..self.len() {
            let row = &self.features[i * k..(i + 1) * k];
            let r: f64 = row.iter().zip(phi).map(|(b, c)| b * c).sum::<f64>() - self.targets[i];
            loss += self.weights[i] * r * r;
        }
        loss / self.len() as f64
    }

    pub fn loss_and_gradient(&self, phi: &[f64]) -> (f64, Vec<f64>) {
        let k = self.num_features;
        let mut loss = 0.0;
        let mut grad = vec![0.0; k];
        for i in 0..self.len() {
            let row = &self.features[i * k..(i + 1) * k];
            let r: f64 = row.iter().zip(phi).map(|(b, c)| b * c).sum::<f64>() - self.targets[i];
            let w = self.weights[i];
            loss += w * r * r;
            let s = 2.0 * w * r;
            for (g, b) in grad.iter_mut().zip(row) {
                *g += s * b;
            }
        }
        let n = self.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{benchmark, BenchmarkName};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn poly_with(order: usize, pairs: &[(&[u32], f64)]) -> GaugePotential {
        let mut g = GaugePotential::polynomial(1, order).unwrap();
        let mut params = vec![0.0; g.num_params()];
        for (e, c) in pairs {
            params[g.basis().unwrap().index_of(e).unwrap()] = *c;
        }
        g.set_params(params).unwrap();
        g
    }

    fn tanh_mlp(seed: u64, dim: usize) -> GaugePotential {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = GaugePotential::mlp_init(dim, vec![8, 6], Activation::Tanh, &mut rng).unwrap();
        let params = (0..g.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.set_params(params).unwrap();
        g
    }

    #[test]
    fn basis_is_graded_lex() {
        let b = PolynomialBasis::new(1, 3);
        let labels: Vec<String> = (0..b.len()).map(|k| b.label(k)).collect();
        assert_eq!(labels, ["q", "p", "q^2", "q p", "p^2", "q^3", "q^2 p", "q p^2", "p^3"]);
        assert_eq!(PolynomialBasis::new(1, 5).len(), 20);
        // 4 variables, degrees 1..=2: 4 + 10
        assert_eq!(PolynomialBasis::new(2, 2).len(), 14);
    }

    #[test]
    fn mlp_param_count_matches_layers() {
        let g = GaugePotential::zeros(GaugeKind::Mlp { hidden_sizes: vec![32, 64], activation: Activation::Relu }, 1)
            .unwrap();
        assert_eq!(g.num_params(), 2 * 32 + 32 + 32 * 64 + 64 + 64 + 1);
    }

    #[test]
    fn evaluate_examples() {
        let a = poly_with(1, &[(&[0, 1], 1.0)]);
        assert_eq!(a.evaluate(&[3.0], &[2.0]).unwrap(), 2.0);

        let z = GaugePotential::polynomial(1, 4).unwrap();
        assert_eq!(z.evaluate(&[1.7], &[-0.3]).unwrap(), 0.0);

        let mut m = GaugePotential::zeros(GaugeKind::Mlp { hidden_sizes: vec![4], activation: Activation::Tanh }, 1)
            .unwrap();
        let mut params = vec![0.0; m.num_params()];
        *params.last_mut().unwrap() = 0.75;
        m.set_params(params).unwrap();
        assert_eq!(m.evaluate(&[5.0], &[-2.0]).unwrap(), 0.75);
        assert_eq!(m.evaluate(&[-1.0], &[0.0]).unwrap(), 0.75);
    }

    #[test]
    fn dimension_mismatch_is_contract_violation() {
        let a = GaugePotential::polynomial(1, 2).unwrap();
        assert!(matches!(a.evaluate(&[1.0, 2.0], &[0.0]), Err(ChmcError::Contract(_))));
        assert!(matches!(a.input_gradients(&[1.0], &[]), Err(ChmcError::Contract(_))));
    }

    #[test]
    fn input_gradient_examples() {
        let a = poly_with(2, &[(&[0, 1], 1.0)]);
        assert_eq!(a.input_gradients(&[-4.0], &[9.0]).unwrap(), (vec![0.0], vec![1.0]));
        let qp = poly_with(2, &[(&[1, 1], 1.0)]);
        assert_eq!(qp.input_gradients(&[2.0], &[3.0]).unwrap(), (vec![3.0], vec![2.0]));
    }

    #[test]
    fn tanh_mlp_input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for trial in 0..10 {
            let g = tanh_mlp(100 + trial, 2);
            for _ in 0..10 {
                let q = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let (gq, gp) = g.input_gradients(&q, &p).unwrap();
                for j in 0..2 {
                    let (mut a, mut b) = (q, q);
                    a[j] += h;
                    b[j] -= h;
                    let fd = (g.evaluate(&a, &p).unwrap() - g.evaluate(&b, &p).unwrap()) / (2.0 * h);
                    assert!(rel_err(gq[j], fd) < 1e-5, "q{j}: {} vs {fd}", gq[j]);
                    let (mut a, mut b) = (p, p);
                    a[j] += h;
                    b[j] -= h;
                    let fd = (g.evaluate(&q, &a).unwrap() - g.evaluate(&q, &b).unwrap()) / (2.0 * h);
                    assert!(rel_err(gp[j], fd) < 1e-5, "p{j}: {} vs {fd}", gp[j]);
                }
            }
        }
    }

    #[test]
    fn bracket_examples() {
        let mm = benchmark(BenchmarkName::MovingMean);
        let a = poly_with(1, &[(&[0, 1], 1.0)]);
        for p in [-3.0, 0.0, 0.4] {
            assert_eq!(a.poisson_bracket_with_h(&mm, 1.0, &[2.0], &[p]).unwrap(), -1.0);
        }
        // A = H_0 = q^2/2 + p^2/2 on the harmonic potential at lambda = 0
        let an = benchmark(BenchmarkName::Annealing);
        let h = poly_with(2, &[(&[2, 0], 0.5), (&[0, 2], 0.5)]);
        for (q, p) in [(0.3, -1.2), (2.0, 0.5), (-1.0, -1.0)] {
            assert!(h.poisson_bracket_with_h(&an, 0.0, &[q], &[p]).unwrap().abs() < 1e-15);
        }
        let z = GaugePotential::polynomial(1, 3).unwrap();
        assert_eq!(z.poisson_bracket_with_h(&mm, 0.5, &[1.0], &[2.0]).unwrap(), 0.0);
    }

    #[test]
    fn mlp_bracket_matches_input_gradients() {
        let prob = benchmark(BenchmarkName::DoubleWell);
        let g = tanh_mlp(9, 1);
        for (q, p) in [(0.3, -1.2), (1.5, 0.5), (-2.0, 1.0)] {
            let (gq, gp) = g.input_gradients(&[q], &[p]).unwrap();
            let gv = prob.grad_q_potential(0.6, &[q])[0];
            let expect = gq[0] * p - gp[0] * gv;
            let got = g.poisson_bracket_with_h(&prob, 0.6, &[q], &[p]).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples_moving_mean() {
        let mm = benchmark(BenchmarkName::MovingMean);
        let lam = 0.25;
        let states = vec![ParticleState::new(vec![lam + 1.0], vec![0.3]), ParticleState::new(vec![lam - 1.0], vec![-0.8])];
        let w = [1.0, 1.0];
        let mut a = GaugePotential::polynomial(1, 1).unwrap();
        let (l0, g0) = a.loss_and_param_gradient(&mm, lam, &states, &w).unwrap();
        assert!((l0 - 1.0).abs() < 1e-14);
        assert!((g0[1] + 2.0).abs() < 1e-14);
        a.set_params(vec![0.0, 1.0]).unwrap();
        let (l1, _) = a.loss_and_param_gradient(&mm, lam, &states, &w).unwrap();
        assert!(l1.abs() < 1e-14);
    }

    #[test]
    fn zero_params_loss_is_mean_squared_target() {
        let prob = benchmark(BenchmarkName::DoubleWell);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states: Vec<ParticleState> = (0..50)
            .map(|_| ParticleState::new(vec![rng.random_range(-2.0..2.0)], vec![rng.random_range(-2.0..2.0)]))
            .collect();
        let w: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let expect: f64 =
            states.iter().zip(&w).map(|(s, wi)| wi * prob.dlambda_potential(0.4, &s.q).powi(2)).sum::<f64>() / 50.0;
        for g in [GaugePotential::polynomial(1, 3).unwrap(), tanh_mlp(1, 1)] {
            let mut g = g;
            let n = g.num_params();
            g.set_params(vec![0.0; n]).unwrap();
            let (l, _) = g.loss_and_param_gradient(&prob, 0.4, &states, &w).unwrap();
            assert!(rel_err(l, expect) < 1e-12);
        }
    }

    #[test]
    fn empty_population_is_rejected() {
        let g = GaugePotential::polynomial(1, 2).unwrap();
        let r = g.loss_and_param_gradient(&benchmark(BenchmarkName::MovingMean), 0.0, &[], &[]);
        assert!(matches!(r, Err(ChmcError::Contract(_))));
    }

    fn fd_param_check(g: &GaugePotential, prob: &HamiltonianProblem, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states: Vec<ParticleState> = (0..40)
            .map(|_| ParticleState::new(vec![rng.random_range(-2.0..2.0)], vec![rng.random_range(-2.0..2.0)]))
            .collect();
        let w: Vec<f64> = (0..40).map(|_| rng.random_range(0.1..1.0)).collect();
        let lam = 0.37;
        let (_, grad) = g.loss_and_param_gradient(prob, lam, &states, &w).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let scale = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in 0..g.num_params() {
            let mut plus = g.clone();
            let mut minus = g.clone();
            let mut pp = g.params().to_vec();
            pp[k] += h;
            plus.set_params(pp).unwrap();
            let mut pm = g.params().to_vec();
            pm[k] -= h;
            minus.set_params(pm).unwrap();
            let lp = plus.loss_and_param_gradient(prob, lam, &states, &w).unwrap().0;
            let lm = minus.loss_and_param_gradient(prob, lam, &states, &w).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs() / grad[k].abs().max(fd.abs()).max(1e-3 * scale));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn tanh_mlp_param_gradient_matches_finite_differences() {
        let prob = benchmark(BenchmarkName::DoubleWell);
        for seed in 0..3 {
            fd_param_check(&tanh_mlp(40 + seed, 1), &prob, seed);
        }
    }

    #[test]
    fn polynomial_param_gradient_matches_finite_differences() {
        let prob = benchmark(BenchmarkName::Annealing);
        let mut g = GaugePotential::polynomial(1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        g.set_params((0..g.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        fd_param_check(&g, &prob, 4);
    }

    #[test]
    fn checkpoint_restores_gauge() {
        let g = tanh_mlp(3, 1);
        let back = GaugePotential::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        let text = poly_with(2, &[(&[1, 1], -0.5)]).to_json().unwrap();
        assert!(text.contains("\"kind\": \"polynomial\""));
        assert!(text.contains("\"order\": 2"));
    }

    proptest! {
        #[test]
        fn polynomial_bracket_is_linear_in_params(
            phi1 in prop::collection::vec(-2.0f64..2.0, 9),
            phi2 in prop::collection::vec(-2.0f64..2.0, 9),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            q in -3.0f64..3.0,
            p in -3.0f64..3.0,
            lam in 0.0f64..1.0,
        ) {
            let prob = benchmark(BenchmarkName::DoubleWell);
            let kind = GaugeKind::Polynomial { order: 3 };
            let b = |phi: Vec<f64>| {
                GaugePotential::with_params(kind.clone(), 1, phi).unwrap()
                    .poisson_bracket_with_h(&prob, lam, &[q], &[p]).unwrap()
            };
            let mix: Vec<f64> = phi1.iter().zip(&phi2).map(|(a, c)| alpha * a + beta * c).collect();
            let lhs = b(mix);
            let rhs = alpha * b(phi1.clone()) + beta * b(phi2.clone());
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
