//! Gumbel-SoftMax relaxation of categorical sampling.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Real, Var};
use crate::error::{Error, Result};

/// Clamp applied to the uniform draw before the double log.
pub const GUMBEL_EPS: f64 = 1e-10;

/// `−ln(−ln u)` with `u` clamped to `[ε, 1 − ε]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// i.i.d. standard Gumbel noise.
pub fn sample_gumbel<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::of(gumbel_from_uniform(rng.random::<f64>())))
}

/// Row-wise `softmax(β·(o + g))`.
pub fn gumbel_softmax<F: Real>(logits: &Array2<F>, beta: F, noise: &Array2<F>) -> Result<Array2<F>> {
    if !(beta > F::zero()) {
        return Err(Error::InvalidInput(format!("inverse temperature must be > 0, got {beta}")));
    }
    if logits.dim() != noise.dim() {
        return Err(Error::InvalidInput(format!(
            "logits {:?} and noise {:?} differ in shape",
            logits.dim(),
            noise.dim()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gumbel_softmax logits".into()));
    }
    let perturbed = (logits + noise).mapv(|v| v * beta);
    Ok(softmax_rows(&perturbed))
}

/// Differentiable counterpart of [`gumbel_softmax`] on the tape.
pub fn gumbel_softmax_var<F: Real>(g: &mut Graph<F>, logits: Var, beta: F, noise: Array2<F>) -> Var {
    let noise = g.leaf(noise);
    let perturbed = g.add(logits, noise);
    let scaled = g.scale(perturbed, beta);
    g.softmax_rows(scaled)
}

/// Inverse-temperature schedule over the adversarial training horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BetaSchedule {
    Constant { beta: f64 },
    /// `start·(end/start)^(min(step/horizon, 1))`.
    Exponential { start: f64, end: f64, horizon: usize },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Exponential {
            start: 1.0,
            end: 100.0,
            horizon: 2000,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BetaSchedule::Constant { beta } => beta > 0.0 && beta.is_finite(),
            BetaSchedule::Exponential { start, end, .. } => {
                start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("β schedule must stay positive: {self:?}")))
        }
    }

    pub fn beta_at(&self, step: usize) -> f64 {
        match *self {
            BetaSchedule::Constant { beta } => beta,
            BetaSchedule::Exponential { start, end, horizon } => {
                let frac = if horizon == 0 {
                    1.0
                } else {
                    (step as f64 / horizon as f64).min(1.0)
                };
                start * (end / start).powf(frac)
            }
        }
    }
}
