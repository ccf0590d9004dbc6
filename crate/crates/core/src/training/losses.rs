//! Adversarial and classification losses, as plain values and on the tape.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub adv: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { adv: 1.0, cls: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !ok(self.adv) || !ok(self.cls) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        if self.adv == 0.0 && self.cls == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }

    pub fn combine(&self, adv: f64, cls: f64) -> f64 {
        self.adv * adv + self.cls * cls
    }
}

/// The six loss terms of one update step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_adv_g: f64,
    pub l_cls_g: f64,
    pub l_g: f64,
    pub l_adv_d: f64,
    pub l_cls_d: f64,
    pub l_d: f64,
}

impl LossReport {
    pub fn new(weights: &LossWeights, l_adv_g: f64, l_cls_g: f64, l_adv_d: f64, l_cls_d: f64) -> Self {
        LossReport {
            l_adv_g,
            l_cls_g,
            l_g: total_loss_g(l_adv_g, l_cls_g, weights),
            l_adv_d,
            l_cls_d,
            l_d: total_loss_d(l_adv_d, l_cls_d, weights),
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.l_adv_g, self.l_cls_g, self.l_g, self.l_adv_d, self.l_cls_d, self.l_d]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

fn check_pair(fake: &[f64], real: &[f64]) -> Result<()> {
    if fake.is_empty() || real.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if fake.len() != real.len() {
        return Err(Error::InvalidInput(format!(
            "{} fake scores vs {} real scores",
            fake.len(),
            real.len()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `−mean(D_r(x̂)) + mean(D_r(x))`.
pub fn adv_loss_g(d_r_fake: &[f64], d_r_real: &[f64]) -> Result<f64> {
    check_pair(d_r_fake, d_r_real)?;
    Ok(-mean(d_r_fake) + mean(d_r_real))
}

/// `mean(D_r(x̂)) − mean(D_r(x))`.
pub fn adv_loss_d(d_r_fake: &[f64], d_r_real: &[f64]) -> Result<f64> {
    check_pair(d_r_fake, d_r_real)?;
    Ok(mean(d_r_fake) - mean(d_r_real))
}

/// Mean of `−log max(p[row, target[row]], 1e-12)`.
pub fn cross_entropy(probs: &Array2<f64>, targets: &[usize]) -> Result<f64> {
    let (rows, k) = probs.dim();
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != rows {
        return Err(Error::InvalidInput(format!("{rows} rows vs {} targets", targets.len())));
    }
    if let Some(&c) = targets.iter().find(|&&c| c >= k) {
        return Err(Error::CategoryOutOfRange { category: c, k });
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &c)| -probs[[r, c]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / rows as f64)
}

/// Category loss of generated sentences against the requested categories.
pub fn cls_loss_g(d_cls_fake: &Array2<f64>, requested: &[usize]) -> Result<f64> {
    cross_entropy(d_cls_fake, requested)
}

/// Category loss of real sentences against their labels.
pub fn cls_loss_d(d_cls_real: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    cross_entropy(d_cls_real, labels)
}

pub fn total_loss_g(l_adv_g: f64, l_cls_g: f64, weights: &LossWeights) -> f64 {
    weights.combine(l_adv_g, l_cls_g)
}

pub fn total_loss_d(l_adv_d: f64, l_cls_d: f64, weights: &LossWeights) -> f64 {
    weights.combine(l_adv_d, l_cls_d)
}

/// `Σ_i coef_i · x_i / n` for a `n×1` column on the tape.
pub fn weighted_mean_var<F: Real>(g: &mut Graph<F>, column: Var, coef: &[F]) -> Var {
    let n = coef.len();
    debug_assert_eq!(g.shape(column), (n, 1));
    let w = Array2::from_shape_fn((n, 1), |(r, _)| coef[r] / F::of(n as f64));
    let w = g.leaf(w);
    let prod = g.mul(column, w);
    g.sum_all(prod)
}

/// Cross-entropy of `B×k` probability rows against `targets` on the tape,
/// with the same floor as [`cross_entropy`].
pub fn cross_entropy_var<F: Real>(g: &mut Graph<F>, probs: Var, targets: &[usize]) -> Result<Var> {
    let (rows, k) = g.shape(probs);
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != rows {
        return Err(Error::InvalidInput(format!("{rows} rows vs {} targets", targets.len())));
    }
    let mut pick = Array2::zeros((rows, k));
    for (r, &c) in targets.iter().enumerate() {
        if c >= k {
            return Err(Error::CategoryOutOfRange { category: c, k });
        }
        pick[[r, c]] = -F::one() / F::of(rows as f64);
    }
    let logp = g.log_clamped(probs, F::of(PROB_FLOOR));
    let pick = g.leaf(pick);
    let prod = g.mul(logp, pick);
    Ok(g.sum_all(prod))
}

/// Binary cross-entropy of `n×1` probabilities against targets in `[0, 1]`.
pub fn binary_cross_entropy_var<F: Real>(g: &mut Graph<F>, probs: Var, targets: &[F]) -> Var {
    let n = targets.len();
    debug_assert_eq!(g.shape(probs), (n, 1));
    let scale = -F::one() / F::of(n as f64);
    let pos = Array2::from_shape_fn((n, 1), |(r, _)| targets[r] * scale);
    let neg = Array2::from_shape_fn((n, 1), |(r, _)| (F::one() - targets[r]) * scale);
    let floor = F::of(PROB_FLOOR);
    let log_p = g.log_clamped(probs, floor);
    let one_minus = g.affine(probs, -F::one(), F::one());
    let log_q = g.log_clamped(one_minus, floor);
    let pos = g.leaf(pos);
    let neg = g.leaf(neg);
    let a = g.mul(log_p, pos);
    let b = g.mul(log_q, neg);
    let both = g.add(a, b);
    g.sum_all(both)
}

/// PAD-masked next-token cross-entropy of teacher-forced logits
/// (`(B·(T−1))×V`, row `b·(T−1) + t`) against `ids[b, t + 1]`.
pub fn masked_nll_var<F: Real>(g: &mut Graph<F>, logits: Var, ids: &Array2<usize>) -> Result<Var> {
    let (b, len) = ids.dim();
    let steps = len - 1;
    let (rows, v) = g.shape(logits);
    if rows != b * steps {
        return Err(Error::InvalidInput(format!("{rows} logit rows for a {b}×{len} target")));
    }
    let count = (0..b)
        .flat_map(|r| (1..len).map(move |t| (r, t)))
        .filter(|&(r, t)| ids[[r, t]] != crate::corpus::PAD)
        .count();
    if count == 0 {
        return Err(Error::InvalidInput("target has no non-PAD tokens".into()));
    }
    let w = -F::one() / F::of(count as f64);
    let mut pick = Array2::zeros((rows, v));
    for r in 0..b {
        for t in 1..len {
            let id = ids[[r, t]];
            if id != crate::corpus::PAD {
                pick[[r * steps + t - 1, id]] = w;
            }
        }
    }
    let logp = g.log_softmax_rows(logits);
    let pick = g.leaf(pick);
    let prod = g.mul(logp, pick);
    Ok(g.sum_all(prod))
}
