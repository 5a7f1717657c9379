//! Probability transforms and losses on plain `f64` slices.

use crate::error::{Error, Result};

/// Floor applied to the second argument of [`kl_divergence`] before the log.
pub const EPS_KL: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` accepted by [`kl_divergence`].
const SIMPLEX_TOL: f64 = 1e-9;

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Dimension("empty logit vector".into()));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("logit {v} is not finite")));
    }
    Ok(())
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let m = max_of(logits);
    Ok(m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let m = max_of(logits);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logits)?;
    Ok(logits.iter().map(|v| v - lse).collect())
}

/// `-ln softmax(logits)[label]`, evaluated through log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits)? - logits[label])
}

/// How [`kl_divergence`] treats entries of `q` below [`EPS_KL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlClamp {
    /// Raise small `q` entries to `EPS_KL`.
    #[default]
    Clamp,
    /// Reject inputs with a `q` entry below `EPS_KL`.
    Strict,
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64], clamp: KlClamp) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Dimension(format!(
            "KL over vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Numeric(format!("{name} is not a probability vector")));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Numeric(format!("{name} sums to {s}, not 1")));
        }
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let qi = match clamp {
            KlClamp::Clamp => qi.max(EPS_KL),
            KlClamp::Strict if qi < EPS_KL => {
                return Err(Error::Numeric(format!("q entry {qi:e} below {EPS_KL:e}")))
            }
            KlClamp::Strict => qi,
        };
        if pi > 0.0 {
            total += pi * (pi / qi).ln();
        }
    }
    // Rounding can leave a tiny negative residue when p and q nearly agree.
    Ok(total.max(0.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
