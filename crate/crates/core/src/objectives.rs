//! Training objective with a complexity penalty, and learned gate policies
//! (Bernoulli gates trained by the score-function estimator or through the
//! binary Concrete relaxation).

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::gating::{GateVector, Utilization};
use crate::tensor::{kernels, Graph, Tensor, Var};
use crate::tmodule::{ArchSpec, LayerSpec, TNetwork};

/// Probabilities are kept inside `[EPS_P, 1 - EPS_P]`.
pub const EPS_P: f64 = 1e-4;

/// Training temperature of the Concrete relaxation.
pub const CONCRETE_TEMPERATURE: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyForm {
    /// `max(0, c - u)^p`
    Hinge,
    /// `|c - u|^p`
    Dist,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyConfig {
    pub form: PenaltyForm,
    pub p: u32,
    pub lambda: f64,
}

impl Default for PenaltyConfig {
    /// Squared distance penalty with weight 10.
    fn default() -> Self {
        PenaltyConfig {
            form: PenaltyForm::Dist,
            p: 2,
            lambda: 10.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p == 1 || self.p == 2) {
            return Err(Error::InvalidConfig(format!(
                "penalty exponent must be 1 or 2, got {}",
                self.p
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "penalty weight must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn penalty(&self, c: f64, u: Utilization) -> f64 {
        match self.form {
            PenaltyForm::Hinge => hinge_penalty(c, u, self.p),
            PenaltyForm::Dist => dist_penalty(c, u, self.p),
        }
    }

    /// Penalty of a `[batch, 1]` complexity variable, averaged over the batch.
    pub fn penalty_graph(&self, g: &mut Graph, c: Var, u: Utilization) -> Var {
        let d = g.add_scalar(c, -(u.value() as f32));
        let base = match self.form {
            PenaltyForm::Hinge => g.relu(d),
            PenaltyForm::Dist => g.abs(d),
        };
        let powered = if self.p == 2 {
            g.mul(base, base).expect("same shape")
        } else {
            base
        };
        g.mean(powered)
    }
}

pub fn hinge_penalty(c: f64, u: Utilization, p: u32) -> f64 {
    (c - u.value()).max(0.0).powi(p as i32)
}

pub fn dist_penalty(c: f64, u: Utilization, p: u32) -> f64 {
    (c - u.value()).abs().powi(p as i32)
}

/// `L + λ·C(c, u)`.
pub fn tnn_loss(task_loss: f64, c_actual: f64, u: Utilization, cfg: &PenaltyConfig) -> f64 {
    task_loss + cfg.lambda * cfg.penalty(c_actual, u)
}

/// `Σ_i log[g_i p_i + (1 - g_i)(1 - p_i)]` with `p` clamped to `[EPS_P, 1 - EPS_P]`.
pub fn gate_log_prob(g: &GateVector, p: &[f64]) -> f64 {
    g.bits()
        .iter()
        .zip(p)
        .map(|(&on, &pi)| {
            let pi = pi.clamp(EPS_P, 1.0 - EPS_P);
            if on {
                pi.ln()
            } else {
                (1.0 - pi).ln()
            }
        })
        .sum()
}

/// Score-function estimate `J · ∇ log Pr(g)` for one sample.
pub fn reinforce_grad(objective: f64, log_prob_grad: &[f64]) -> Vec<f64> {
    log_prob_grad.iter().map(|g| objective * g).collect()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Standard logistic noise `L = log(v) - log(1 - v)`, `v ~ Uniform(0, 1)`.
pub fn logistic_noise(rng: &mut impl Rng) -> f64 {
    let v: f64 = Uniform::new(f64::EPSILON, 1.0).sample(rng);
    v.ln() - (1.0 - v).ln()
}

/// Binary Concrete samples `σ((L + log α) / t)` with `α = p / (1 - p)`.
/// `t = 0` returns hard samples `1(L + log α > 0)`, which are Bernoulli(p).
pub fn concrete_sample(p: &[f64], t: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be >= 0, got {t}")));
    }
    Ok(p.iter()
        .map(|&pi| {
            let z = logistic_noise(rng) + logit(pi.clamp(EPS_P, 1.0 - EPS_P));
            if t == 0.0 {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                kernels::sigmoid(z / t)
            }
        })
        .collect())
}

/// What the gate policy sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PolicyInput {
    /// Only the utilization `u`.
    Blind,
    /// The flattened input together with `u`.
    Contextual,
}

/// Small MLP mapping its input to one activation probability per gate of
/// every learned module.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliGatePolicy {
    pub net: TNetwork,
    pub input: PolicyInput,
    sizes: Vec<usize>,
}

impl BernoulliGatePolicy {
    /// `sizes` lists the component count of every gated module; `features`
    /// is the flattened per-sample input size (ignored when blind).
    pub fn new(
        input: PolicyInput,
        sizes: &[usize],
        features: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = match input {
            PolicyInput::Blind => 1,
            PolicyInput::Contextual => features + 1,
        };
        let total: usize = sizes.iter().sum();
        let spec = ArchSpec {
            input: vec![d],
            layers: vec![
                LayerSpec::Dense { out: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { out: total },
            ],
        };
        let mut net = TNetwork::build(&spec, rng)?;
        // start every gate at p = 0.5
        let last = net.params().len() - 2;
        net.params_mut()[last].data_mut().iter_mut().for_each(|w| *w *= 0.1);
        Ok(BernoulliGatePolicy {
            net,
            input,
            sizes: sizes.to_vec(),
        })
    }

    /// Reassembles a policy from a network whose output covers `sizes`.
    pub fn from_parts(net: TNetwork, input: PolicyInput, sizes: Vec<usize>) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if net.output_shape() != [total] {
            return Err(Error::InvalidConfig(format!(
                "policy network emits {:?}, gates need [{total}]",
                net.output_shape()
            )));
        }
        Ok(BernoulliGatePolicy { net, input, sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn features(&self, x: &Tensor, u: Utilization) -> Result<Tensor> {
        let b = x.shape()[0];
        match self.input {
            PolicyInput::Blind => Ok(Tensor::full(&[b, 1], u.value() as f32)),
            PolicyInput::Contextual => {
                let d = x.numel() / b;
                let mut data = Vec::with_capacity(b * (d + 1));
                for row in x.data().chunks(d) {
                    data.extend_from_slice(row);
                    data.push(u.value() as f32);
                }
                Tensor::new(vec![b, d + 1], data)
            }
        }
    }

    /// Clamped logits `[batch, Σ n_i]` on the tape, plus parameter variables.
    /// The clamp is straight-through: gradients reach saturated logits, so a
    /// gate pushed to the bound can still come back.
    pub fn logits_graph(&self, g: &mut Graph, x: &Tensor, u: Utilization, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let f = g.constant(self.features(x, u)?);
        let (z, params) = self.net.forward_graph(g, f, &[], trainable)?;
        let bound = logit(1.0 - EPS_P) as f32;
        let mut shift = g.value(z).clone();
        shift
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(-bound, bound) - *v);
        let shift = g.constant(shift);
        Ok((g.add(z, shift)?, params))
    }

    /// Activation probabilities `[batch, Σ n_i]`.
    pub fn probs(&self, x: &Tensor, u: Utilization) -> Result<Tensor> {
        let mut g = Graph::new();
        let (z, _) = self.logits_graph(&mut g, x, u, false)?;
        let mut p = g.value(z).clone();
        p.data_mut().iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
        Ok(p)
    }

    /// Splits a row of probabilities by module.
    pub fn split<'a, T>(&self, row: &'a [T]) -> Vec<&'a [T]> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for &n in &self.sizes {
            out.push(&row[start..start + n]);
            start += n;
        }
        out
    }
}

/// Samples hard gates for one example. A module drawing fewer than
/// `min_active` gates is resampled up to 10 times, then its leading gates are
/// forced on.
pub fn sample_bernoulli_gates(probs: &[&[f32]], min_active: &[usize], rng: &mut impl Rng) -> Result<Vec<GateVector>> {
    probs
        .iter()
        .zip(min_active)
        .map(|(p, &min)| {
            let draw = |rng: &mut dyn rand::RngCore| -> Vec<bool> {
                p.iter()
                    .map(|&pi| rng.gen::<f64>() < (pi as f64).clamp(EPS_P, 1.0 - EPS_P))
                    .collect()
            };
            let mut bits = draw(rng);
            let mut tries = 0;
            while bits.iter().filter(|&&b| b).count() < min && tries < 10 {
                bits = draw(rng);
                tries += 1;
            }
            let mut g = GateVector::new(bits)?;
            g.ensure_min_active(min);
            Ok(g)
        })
        .collect()
}
