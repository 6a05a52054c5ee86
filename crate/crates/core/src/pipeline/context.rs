use serde::{Deserialize, Serialize};

use crate::network::StagedNetwork;
use crate::pipeline::linear::{train_linear_ova, LinearOva, LinearTrainConfig};
use crate::pipeline::resize;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Softmax probabilities of a whole-image classifier, on the image resized
/// to the classifier's input.
pub fn context_scores(net: &StagedNetwork, image: &Tensor) -> Result<Vec<f64>> {
    let shape = &net.config.input;
    let x = resize(image, shape.height, shape.width)?;
    let (s, _) = net.predict(&x)?;
    let max = s.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.data().iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Per-class rescoring over `[detection scores, context scores]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFusion {
    pub num_det: usize,
    pub num_ctx: usize,
    pub classifier: LinearOva,
}

impl ContextFusion {
    fn input(&self, det: &[f64], ctx: &[f64]) -> Result<Vec<f64>> {
        if det.len() != self.num_det || ctx.len() != self.num_ctx {
            return Err(Error::invalid(format!(
                "context fusion expects {}+{} scores, got {}+{}",
                self.num_det,
                self.num_ctx,
                det.len(),
                ctx.len()
            )));
        }
        Ok(det.iter().chain(ctx).copied().collect())
    }

    /// Fused scores; a class without a trained classifier keeps its
    /// detection score.
    pub fn fuse(&self, det: &[f64], ctx: &[f64]) -> Result<Vec<f64>> {
        let s = self.classifier.scores(&self.input(det, ctx)?)?;
        Ok(s.into_iter().zip(det).map(|(f, &d)| f.unwrap_or(d)).collect())
    }

    /// Raw-unit weight linking context score `j` to class `k`.
    pub fn context_weight(&self, k: usize, j: usize) -> f64 {
        self.classifier.raw_weight(k, self.num_det + j)
    }
}

/// Trains the fusion classifiers. `labels[i][k]` is `+1` or `-1`.
pub fn context_fuse_train(
    det_scores: &[Vec<f64>],
    img_scores: &[Vec<f64>],
    labels: &[Vec<f64>],
    cfg: &LinearTrainConfig,
) -> Result<(ContextFusion, Vec<f64>)> {
    let (Some(d0), Some(c0)) = (det_scores.first(), img_scores.first()) else {
        return Err(Error::invalid("context fusion needs training boxes"));
    };
    if det_scores.len() != img_scores.len() || labels.len() != det_scores.len() {
        return Err(Error::invalid("context fusion inputs differ in length"));
    }
    let (num_det, num_ctx) = (d0.len(), c0.len());
    if labels.iter().any(|y| y.len() != num_det) {
        return Err(Error::invalid("context fusion labels must cover every detection class"));
    }
    let xs: Vec<Vec<f64>> = det_scores
        .iter()
        .zip(img_scores)
        .map(|(d, c)| d.iter().chain(c).copied().collect())
        .collect();
    let (classifier, trace) = train_linear_ova(&xs, labels, cfg)?;
    Ok((
        ContextFusion {
            num_det,
            num_ctx,
            classifier,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{average_precision, Detection, GroundTruthSet, GtObject};
    use crate::layers::FcLayer;
    use crate::pipeline::BoundingBox;
    use rand::{Rng, SeedableRng};

    #[test]
    fn separable_toy_reaches_zero_loss() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut det = Vec::new();
        let mut ctx = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let a: f64 = rng.gen_range(0.5..2.0);
            let b: f64 = rng.gen_range(-2.0..-0.5);
            det.push(if c == 0 { vec![a, b] } else { vec![b, a] });
            ctx.push(vec![rng.gen_range(0.0..1.0)]);
            ys.push(if c == 0 { vec![1.0, -1.0] } else { vec![-1.0, 1.0] });
        }
        let cfg = LinearTrainConfig {
            weight_decay: 0.0,
            epochs: 200,
            ..LinearTrainConfig::default()
        };
        let (fusion, trace) = context_fuse_train(&det, &ctx, &ys, &cfg).unwrap();
        assert_eq!(*trace.last().unwrap(), 0.0);
        let xs: Vec<Vec<f64>> = det.iter().zip(&ctx).map(|(d, c)| d.iter().chain(c).copied().collect()).collect();
        assert_eq!(fusion.classifier.hinge_loss(&xs, &ys).unwrap(), 0.0);
    }

    #[test]
    fn zero_context_weight_preserves_rankings() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let k = 3;
        let weights = Tensor::new(vec![k, k + 2], {
            let mut w = vec![0.0; k * (k + 2)];
            for c in 0..k {
                w[c * (k + 2) + c] = 0.5 + c as f64;
            }
            w
        })
        .unwrap();
        let fusion = ContextFusion {
            num_det: k,
            num_ctx: 2,
            classifier: LinearOva {
                layer: FcLayer::new(weights, Tensor::from_vec(vec![0.3, -1.0, 2.0])).unwrap(),
                mean: vec![0.1; k + 2],
                scale: vec![2.0; k + 2],
                active: vec![true; k],
            },
        };
        let mut gts = GroundTruthSet::default();
        let mut raw = Vec::new();
        let mut fused = Vec::new();
        for img in 0..20u64 {
            let gt = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
            gts.insert(
                img,
                vec![GtObject {
                    bbox: gt,
                    class_id: (img % 3) as usize,
                }],
            );
            for j in 0..4 {
                let b = BoundingBox::new(j as f64 * 3.0, 0.0, 10.0 + j as f64 * 3.0, 10.0).unwrap();
                let s: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let ctx = vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                let f = fusion.fuse(&s, &ctx).unwrap();
                for c in 0..k {
                    raw.push(Detection {
                        image_id: img,
                        bbox: b,
                        class_id: c,
                        confidence: s[c],
                    });
                    fused.push(Detection {
                        image_id: img,
                        bbox: b,
                        class_id: c,
                        confidence: f[c],
                    });
                }
            }
        }
        for c in 0..k {
            let a = average_precision(&raw, &gts, c, 0.5).ap;
            let b = average_precision(&fused, &gts, c, 0.5).ap;
            assert!((a - b).abs() < 1e-12);
        }
    }
}
