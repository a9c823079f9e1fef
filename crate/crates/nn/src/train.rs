//! Cross-entropy training with Adam.

use ndarray::{Array5, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay once `epoch >= decay_start`.
    pub decay: f64,
    pub decay_start: usize,
    /// `None` trains on the whole set each step.
    pub batch_size: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed for minibatch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.01,
            decay: 0.98,
            decay_start: 50,
            batch_size: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch.saturating_sub(self.decay_start) as i32)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn logits_of(y: &Array5<f64>) -> Result<Vec<Vec<f64>>> {
    let sh = y.shape();
    if sh[2..] != [1, 1, 1] {
        return Err(NnError::Shape(format!("classifier output must be pooled, got {sh:?}")));
    }
    Ok((0..sh[0])
        .map(|n| (0..sh[1]).map(|c| y[[n, c, 0, 0, 0]]).collect())
        .collect())
}

/// Mean softmax cross-entropy, its gradient with respect to the logits, and
/// the number of correct argmax predictions.
pub fn cross_entropy(y: &Array5<f64>, labels: &[usize]) -> Result<(f64, Array5<f64>, usize)> {
    let logits = logits_of(y)?;
    if logits.len() != labels.len() {
        return Err(NnError::Shape(format!(
            "{} outputs for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut grad = Array5::zeros(y.raw_dim());
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, (z, &t)) in logits.iter().zip(labels).enumerate() {
        if t >= z.len() {
            return Err(NnError::Invalid(format!(
                "label {t} out of range for {} classes",
                z.len()
            )));
        }
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - z[t];
        for (c, v) in z.iter().enumerate() {
            grad[[s, c, 0, 0, 0]] = ((v - lse).exp() - if c == t { 1.0 } else { 0.0 }) / n;
        }
        if argmax(z) == t {
            correct += 1;
        }
    }
    Ok((loss / n, grad, correct))
}

fn argmax(z: &[f64]) -> usize {
    z.iter().enumerate().fold(0, |b, (i, v)| if *v > z[b] { i } else { b })
}

fn select(x: &Array5<f64>, idx: &[usize]) -> Array5<f64> {
    x.select(Axis(0), idx)
}

/// Trains in place. Afterwards the running normalization statistics are set
/// from the full training set. Aborts with [`NnError::Divergence`] on a
/// non-finite loss.
pub fn train(model: &mut Model, x: &Array5<f64>, labels: &[usize], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    let n = x.shape()[0];
    if n != labels.len() || n == 0 {
        return Err(NnError::Shape(format!("{n} samples for {} labels", labels.len())));
    }
    let bs = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.n_params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if bs < n {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(bs) {
            let xb = if bs == n { x.clone() } else { select(x, chunk) };
            let lb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            model.zero_grad();
            let y = model.forward(&xb, true)?;
            let (loss, g, c) = cross_entropy(&y, &lb)?;
            if !loss.is_finite() {
                return Err(NnError::Divergence { epoch, loss });
            }
            model.backward(&g)?;
            let grads = model.grads();
            let mut p = model.params();
            opt.step(&mut p, &grads, lr);
            model.set_params(&p)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        log.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
        });
    }
    model.recalibrate(x)?;
    Ok(log)
}

/// Argmax predictions in inference mode, `chunk` samples at a time.
pub fn predict(model: &mut Model, x: &Array5<f64>, chunk: usize) -> Result<Vec<usize>> {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
        let y = model.forward(&select(x, &idx), false)?;
        out.extend(logits_of(&y)?.iter().map(|z| argmax(z)));
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_follows_protocol() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(50), 0.01);
        assert!((c.lr_at(51) - 0.0098).abs() < 1e-15);
        assert!((c.lr_at(199) - 0.01 * 0.98f64.powi(149)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let y = Array5::from_shape_vec((2, 3, 1, 1, 1), vec![0.3, -1.0, 2.0, 0.1, 0.1, -0.4]).unwrap();
        let labels = [2, 0];
        let (_, g, correct) = cross_entropy(&y, &labels).unwrap();
        assert_eq!(correct, 2);
        let h = 1e-6;
        for i in 0..6 {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp.as_slice_mut().unwrap()[i] += h;
            ym.as_slice_mut().unwrap()[i] -= h;
            let fd = (cross_entropy(&yp, &labels).unwrap().0 - cross_entropy(&ym, &labels).unwrap().0) / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -2.0];
        let mut a = Adam::new(2, 0.9, 0.999, 1e-8);
        a.step(&mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6);
    }
}
