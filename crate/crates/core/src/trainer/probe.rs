//! Linear probing on frozen image features: L2-regularised multinomial
//! logistic regression solved with damped Newton steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ClassifierHead, ImageEncoder};
use crate::numerics::{log_sum_exp, softmax, Matrix};
use crate::worldgen::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearProbeConfig {
    /// Newton iterations; 0 returns the initial head unchanged.
    pub max_iters: usize,
    /// Penalty `l2/2 * ||theta||^2` on weights and bias.
    pub l2: f64,
    /// Stop once every gradient entry is below this in magnitude.
    pub tol: f64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            l2: 1e-3,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearProbeOutcome {
    pub head: ClassifierHead,
    /// Regularised objective at the returned head.
    pub loss: f64,
    pub iterations: usize,
}

struct Problem {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    k: usize,
    l2: f64,
}

impl Problem {
    fn width(&self) -> usize {
        self.features[0].len()
    }

    fn logits(&self, theta: &[f64], phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (i, f) in phi.iter().enumerate() {
            let row = &theta[i * self.k..(i + 1) * self.k];
            for (o, w) in out.iter_mut().zip(row) {
                *o += f * w;
            }
        }
        out
    }

    fn objective(&self, theta: &[f64]) -> Result<f64> {
        let n = self.features.len() as f64;
        let mut total = 0.0;
        for (phi, &y) in self.features.iter().zip(&self.labels) {
            let s = self.logits(theta, phi);
            total += log_sum_exp(&s)? - s[y];
        }
        Ok(total / n + 0.5 * self.l2 * theta.iter().map(|t| t * t).sum::<f64>())
    }

    fn gradient_and_hessian(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (f, k) = (self.width(), self.k);
        let dim = f * k;
        let n = self.features.len() as f64;
        let mut g = DVector::<f64>::zeros(dim);
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        for (phi, &y) in self.features.iter().zip(&self.labels) {
            let p = softmax(&self.logits(theta, phi))?;
            let mut r = p.clone();
            r[y] -= 1.0;
            for i in 0..f {
                for c in 0..k {
                    g[i * k + c] += phi[i] * r[c] / n;
                }
            }
            for i in 0..f {
                for j in 0..=i {
                    let ff = phi[i] * phi[j] / n;
                    if ff == 0.0 {
                        continue;
                    }
                    for a in 0..k {
                        for b in 0..k {
                            let curv = if a == b { p[a] - p[a] * p[b] } else { -p[a] * p[b] };
                            h[(i * k + a, j * k + b)] += ff * curv;
                        }
                    }
                }
            }
        }
        // fill the upper triangle of blocks
        for i in 0..f {
            for j in 0..i {
                for a in 0..k {
                    for b in 0..k {
                        h[(j * k + b, i * k + a)] = h[(i * k + a, j * k + b)];
                    }
                }
            }
        }
        for (d, t) in theta.iter().enumerate() {
            g[d] += self.l2 * t;
            h[(d, d)] += self.l2;
        }
        Ok((g, h))
    }
}

/// Fits the head on frozen features of `image`, starting from `init`.
pub fn linear_probe(
    image: &ImageEncoder,
    data: &Dataset,
    init: &ClassifierHead,
    head_scale: f64,
    config: &LinearProbeConfig,
) -> Result<LinearProbeOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(config.l2 > 0.0) {
        return Err(Error::Config("linear probe needs a positive l2 penalty".into()));
    }
    let k = init.num_classes();
    let d = init.weight.rows();
    let with_bias = init.bias.is_some();
    let mut features = Vec::with_capacity(data.len());
    for e in data.iter() {
        if e.y >= k {
            return Err(Error::Index { index: e.y, len: k });
        }
        let mut phi: Vec<f64> = image.encode(&e.x)?.into_iter().map(|v| v * head_scale).collect();
        if with_bias {
            phi.push(1.0);
        }
        features.push(phi);
    }
    let problem = Problem {
        labels: data.iter().map(|e| e.y).collect(),
        features,
        k,
        l2: config.l2,
    };
    let mut theta: Vec<f64> = init.weight.as_slice().to_vec();
    if let Some(b) = &init.bias {
        theta.extend_from_slice(b.as_slice());
    }
    let mut loss = problem.objective(&theta)?;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let (g, h) = problem.gradient_and_hessian(&theta)?;
        if g.amax() < config.tol {
            break;
        }
        let step = h
            .cholesky()
            .ok_or_else(|| Error::Numeric("probe Hessian is not positive definite".into()))?
            .solve(&g);
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let trial_loss = problem.objective(&trial)?;
            if trial_loss <= loss - 1e-4 * t * slope {
                theta = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    let weight = Matrix::from_vec(d, k, theta[..d * k].to_vec())?;
    let bias = with_bias
        .then(|| Matrix::from_vec(k, 1, theta[d * k..].to_vec()))
        .transpose()?;
    Ok(LinearProbeOutcome {
        head: ClassifierHead { weight, bias },
        loss,
        iterations,
    })
}
