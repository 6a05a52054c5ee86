use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::layers::{loss_forward_backward, FcLayer, LossKind, LossTarget};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        LinearTrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Per-class linear one-vs-all classifiers over standardised inputs:
/// `score_k = w_k . ((x - mean) / scale) + b_k`. Classes without positive
/// training examples are inactive and produce no score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearOva {
    pub layer: FcLayer,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub active: Vec<bool>,
}

impl LinearOva {
    pub fn num_classes(&self) -> usize {
        self.layer.out_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.layer.in_dim()
    }

    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Scores of every class; inactive classes score `None`.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<Option<f64>>> {
        let s = self.layer.forward(&self.standardise(x))?;
        Ok(s.into_iter().zip(&self.active).map(|(v, &a)| a.then_some(v)).collect())
    }

    /// Weight of input `j` for class `k` in raw (unstandardised) units.
    pub fn raw_weight(&self, k: usize, j: usize) -> f64 {
        self.layer.weights.data()[k * self.in_dim() + j] / self.scale[j]
    }

    /// Mean hinge loss over active classes.
    pub fn hinge_loss(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for (x, y) in xs.iter().zip(ys) {
            for (k, s) in self.scores(x)?.into_iter().enumerate() {
                if let Some(s) = s {
                    total += (1.0 - y[k] * s).max(0.0);
                    n += 1;
                }
            }
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }
}

/// Trains one-vs-all classifiers with the multi-class hinge loss by momentum
/// SGD. `ys[i][k]` is `+1` or `-1`. Returns the model and the mean loss of
/// each epoch.
pub fn train_linear_ova(xs: &[Vec<f64>], ys: &[Vec<f64>], cfg: &LinearTrainConfig) -> Result<(LinearOva, Vec<f64>)> {
    let (n, d) = match xs.first() {
        Some(x) => (xs.len(), x.len()),
        None => return Err(Error::invalid("linear classifier needs training data")),
    };
    if ys.len() != n || xs.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("linear classifier inputs are ragged"));
    }
    let k = ys[0].len();
    if ys.iter().any(|y| y.len() != k) {
        return Err(Error::invalid("linear classifier labels are ragged"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let active: Vec<bool> = (0..k).map(|c| ys.iter().any(|y| y[c] > 0.0)).collect();
    for (c, a) in active.iter().enumerate() {
        if !a {
            log::warn!("class {c} has no positive training example; its classifier is skipped");
        }
    }
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = LinearOva {
        layer: FcLayer::zeros(d, k),
        mean,
        scale,
        active,
    };
    let inputs: Vec<Vec<f64>> = xs.iter().map(|x| model.standardise(x)).collect();
    let targets: Vec<LossTarget> = ys.iter().map(|y| LossTarget::OneVsAll(y.clone())).collect();
    let mut vw = Tensor::zeros(&[k, d]);
    let mut vb = Tensor::zeros(&[k]);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::rng_indexed(cfg.seed, "linear.shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = Tensor::zeros(&[k, d]);
            let mut gb = Tensor::zeros(&[k]);
            for &i in batch {
                let s = model.layer.forward(&inputs[i])?;
                let (l, mut g) = loss_forward_backward(&s, &targets[i], LossKind::hinge())?;
                if !l.is_finite() {
                    return Err(Error::Diverged(format!("linear classifier loss {l} at sample {i}")));
                }
                epoch_loss += l;
                for (gc, a) in g.iter_mut().zip(&model.active) {
                    if !a {
                        *gc = 0.0;
                    }
                }
                let fg = model.layer.backward(&inputs[i], &g)?;
                gw.add_assign(&fg.weights)?;
                gb.add_assign(&fg.bias)?;
            }
            let inv = 1.0 / batch.len() as f64;
            for ((w, g), v) in model.layer.weights.data_mut().iter_mut().zip(gw.data()).zip(vw.data_mut()) {
                *v = cfg.momentum * *v + g * inv + cfg.weight_decay * *w;
                *w -= cfg.learning_rate * *v;
            }
            for ((b, g), v) in model.layer.bias.data_mut().iter_mut().zip(gb.data()).zip(vb.data_mut()) {
                *v = cfg.momentum * *v + g * inv;
                *b -= cfg.learning_rate * *v;
            }
        }
        trace.push(epoch_loss / n as f64);
    }
    Ok((model, trace))
}
