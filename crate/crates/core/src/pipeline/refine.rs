use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::pipeline::BoundingBox;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Offsets of `target` relative to `b`: `(dcx / w, dcy / h, ln(tw / w), ln(th / h))`.
pub fn box_deltas(b: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (cx, cy) = b.center();
    let (tx, ty) = target.center();
    [
        (tx - cx) / b.width(),
        (ty - cy) / b.height(),
        (target.width() / b.width()).ln(),
        (target.height() / b.height()).ln(),
    ]
}

/// Inverse of [`box_deltas`].
pub fn apply_deltas(b: &BoundingBox, d: &[f64; 4]) -> Result<BoundingBox> {
    let (cx, cy) = b.center();
    BoundingBox::from_center(
        cx + d[0] * b.width(),
        cy + d[1] * b.height(),
        b.width() * d[2].exp(),
        b.height() * d[3].exp(),
    )
}

/// Linear map from a feature to box deltas: `deltas = W x + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegressor {
    /// `[4, F]`.
    pub weights: Tensor,
    pub bias: [f64; 4],
}

impl BoxRegressor {
    pub fn zero(feature_dim: usize) -> Self {
        BoxRegressor {
            weights: Tensor::zeros(&[4, feature_dim]),
            bias: [0.0; 4],
        }
    }

    pub fn predict(&self, feature: &[f64]) -> Result<[f64; 4]> {
        let f = self.weights.shape()[1];
        if feature.len() != f {
            return Err(Error::invalid(format!("regressor expects {f} features, got {}", feature.len())));
        }
        let w = self.weights.data();
        let mut out = self.bias;
        for (r, o) in out.iter_mut().enumerate() {
            *o += w[r * f..(r + 1) * f].iter().zip(feature).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(out)
    }
}

/// Ridge regression with an unpenalised intercept, solved by Cholesky on
/// centred data.
pub fn train_box_regressor(features: &[Vec<f64>], targets: &[[f64; 4]], lambda: f64) -> Result<BoxRegressor> {
    let n = features.len();
    if n == 0 || targets.len() != n {
        return Err(Error::invalid("box regressor needs matching, non-empty features and targets"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("ridge penalty must be positive"));
    }
    let f = features[0].len();
    if features.iter().any(|x| x.len() != f) {
        return Err(Error::invalid("box regressor features are ragged"));
    }
    let x = DMatrix::from_fn(n, f, |i, j| features[i][j]);
    let y = DMatrix::from_fn(n, 4, |i, j| targets[i][j]);
    let xm = DVector::from_fn(f, |j, _| x.column(j).mean());
    let ym = DVector::from_fn(4, |j, _| y.column(j).mean());
    let xc = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - xm[j]);
    let yc = DMatrix::from_fn(n, 4, |i, j| y[(i, j)] - ym[j]);
    let mut gram = xc.transpose() * &xc;
    for j in 0..f {
        gram[(j, j)] += lambda;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("ridge system is not positive definite"))?;
    let w = chol.solve(&(xc.transpose() * yc));
    let mut weights = Tensor::zeros(&[4, f]);
    let mut bias = [0.0; 4];
    for r in 0..4 {
        for j in 0..f {
            weights.data_mut()[r * f + j] = w[(j, r)];
        }
        bias[r] = ym[r] - (0..f).map(|j| w[(j, r)] * xm[j]).sum::<f64>();
    }
    Ok(BoxRegressor { weights, bias })
}

/// Applies the regressor to `b` and clamps to the image. A non-finite or
/// degenerate result leaves `b` unchanged.
pub fn refine_box(feature: &[f64], b: &BoundingBox, reg: &BoxRegressor, width: f64, height: f64) -> BoundingBox {
    let refined = reg
        .predict(feature)
        .and_then(|d| {
            if d.iter().all(|v| v.is_finite()) {
                apply_deltas(b, &d)
            } else {
                Err(Error::NonFinite(format!("regression output {d:?}")))
            }
        })
        .and_then(|r| r.clamp(width, height));
    match refined {
        Ok(r) => r,
        Err(e) => {
            log::warn!("box refinement skipped for {b:?}: {e}");
            *b
        }
    }
}
