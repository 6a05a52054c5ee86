//! Differentiable building blocks with explicit forward and backward passes.
//!
//! Feature maps are `[C, H, W]` tensors for a single sample. Convolution is
//! cross-correlation (no kernel flip). Every max-based operator breaks ties
//! by taking the first maximum in row-major order.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!(
            "{what} expects a [C,H,W] tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Output positions `o` for which `o * stride + k - pad` lands in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_num = len as isize - 1 + pad as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `[out_ch, in_ch, kh, kw]`
    pub weights: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let layer = ConvLayer {
            weights,
            bias,
            stride,
            padding,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Zero-initialised layer with "same" padding for an odd kernel.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("same padding needs an odd kernel, got {kernel}")));
        }
        ConvLayer::new(
            Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            Tensor::zeros(&[out_ch]),
            1,
            kernel / 2,
        )
    }

    fn validate(&self) -> Result<()> {
        let [o, _, kh, kw] = *self.weights.shape() else {
            return Err(Error::invalid("conv weights must be [out, in, kh, kw]"));
        };
        if self.bias.shape() != [o] {
            return Err(Error::ShapeMismatch {
                expected: vec![o],
                actual: self.bias.shape().to_vec(),
            });
        }
        if self.stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv kernel must be odd, got {kh}x{kw}")));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(Error::Geometry {
                layer: "conv".into(),
                reason: format!("kernel {kh}x{kw} does not fit padded input {ph}x{pw}"),
            });
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3(input, "conv2d")?;
        if c != self.in_channels() {
            return Err(Error::invalid(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let (oh, ow) = self.output_dims(h, w)?;
        let (kh, kw) = self.kernel();
        let (s, p) = (self.stride, self.padding);
        let oc = self.out_channels();
        let wt = self.weights.data();
        let x = input.data();
        let mut out = vec![0.0; oc * oh * ow];
        for o in 0..oc {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = self.bias.data()[o]);
            for ci in 0..c {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(oh, h, s, ky, p);
                    for kx in 0..kw {
                        let wv = wt[((o * c + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(ow, w, s, kx, p);
                        for y in y0..y1 {
                            let iy = y * s + ky - p;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut plane[y * ow..(y + 1) * ow];
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                for xo in x0..x1 {
                                    orow[xo] += wv * row[(xo as isize + off) as usize];
                                }
                            } else {
                                for xo in x0..x1 {
                                    orow[xo] += wv * row[xo * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![oc, oh, ow], out)
    }

    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
        let (c, h, w) = dims3(input, "conv2d backward")?;
        let (oh, ow) = self.output_dims(h, w)?;
        let oc = self.out_channels();
        upstream.ensure_shape(&[oc, oh, ow])?;
        let (kh, kw) = self.kernel();
        let (s, p) = (self.stride, self.padding);
        let wt = self.weights.data();
        let x = input.data();
        let up = upstream.data();
        let mut dx = vec![0.0; c * h * w];
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; oc];
        for o in 0..oc {
            let uplane = &up[o * oh * ow..(o + 1) * oh * ow];
            db[o] = uplane.iter().sum();
            for ci in 0..c {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                let dxin = &mut dx[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(oh, h, s, ky, p);
                    for kx in 0..kw {
                        let widx = ((o * c + ci) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let (x0, x1) = valid_range(ow, w, s, kx, p);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = y * s + ky - p;
                            let urow = &uplane[y * ow..(y + 1) * ow];
                            for xo in x0..x1 {
                                let ix = iy * w + xo * s + kx - p;
                                acc += urow[xo] * xin[ix];
                                dxin[ix] += wv * urow[xo];
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: Tensor::new(vec![c, h, w], dx)?,
            weights: Tensor::new(self.weights.shape().to_vec(), dw)?,
            bias: Tensor::new(vec![oc], db)?,
        })
    }
}

/// How pooling windows are placed on the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolEdge {
    /// Windows start at `stride * o` and must lie fully inside the input;
    /// output length is `(len - kernel) / stride + 1`.
    Valid,
    /// Odd windows centred at `stride * o + (stride - 1) / 2`; output length
    /// is `len / stride`. Window cells outside the input are skipped. This
    /// is the geometry def-pooling uses.
    Centered,
}

/// Geometry of centred windows shared by max-pooling and def-pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenteredGrid {
    pub radius_y: usize,
    pub radius_x: usize,
    pub stride_y: usize,
    pub stride_x: usize,
}

impl CenteredGrid {
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.stride_y, w / self.stride_x)
    }

    #[inline]
    pub fn center(&self, oy: usize, ox: usize) -> (usize, usize) {
        (
            self.stride_y * oy + (self.stride_y - 1) / 2,
            self.stride_x * ox + (self.stride_x - 1) / 2,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPoolLayer {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub edge: PoolEdge,
}

/// Pooled output plus, per output element, the flat input index it came from.
#[derive(Debug, Clone)]
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

impl MaxPoolLayer {
    pub fn valid(kernel: usize, stride: usize) -> Self {
        MaxPoolLayer {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            edge: PoolEdge::Valid,
        }
    }

    pub fn centered(radius: usize, stride_y: usize, stride_x: usize) -> Self {
        MaxPoolLayer {
            kernel: (2 * radius + 1, 2 * radius + 1),
            stride: (stride_y, stride_x),
            edge: PoolEdge::Centered,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sy, sx) = self.stride;
        if kh == 0 || kw == 0 || sy == 0 || sx == 0 {
            return Err(Error::invalid("pool kernel and stride must be positive"));
        }
        let dims = match self.edge {
            PoolEdge::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Geometry {
                        layer: "maxpool".into(),
                        reason: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    });
                }
                ((h - kh) / sy + 1, (w - kw) / sx + 1)
            }
            PoolEdge::Centered => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::invalid("centered pooling needs odd kernels"));
                }
                (h / sy, w / sx)
            }
        };
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::Geometry {
                layer: "maxpool".into(),
                reason: format!("input {h}x{w} too small for stride {sy}x{sx}"),
            });
        }
        Ok(dims)
    }

    pub fn forward(&self, input: &Tensor) -> Result<PoolOutput> {
        let (c, h, w) = dims3(input, "maxpool")?;
        let (oh, ow) = self.output_dims(h, w)?;
        let (kh, kw) = self.kernel;
        let (sy, sx) = self.stride;
        let x = input.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            let base = ci * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (ys, xs): (isize, isize) = match self.edge {
                        PoolEdge::Valid => ((oy * sy) as isize, (ox * sx) as isize),
                        PoolEdge::Centered => {
                            let grid = CenteredGrid {
                                radius_y: kh / 2,
                                radius_x: kw / 2,
                                stride_y: sy,
                                stride_x: sx,
                            };
                            let (cy, cx) = grid.center(oy, ox);
                            (cy as isize - (kh / 2) as isize, cx as isize - (kw / 2) as isize)
                        }
                    };
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dy in 0..kh as isize {
                        let iy = ys + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw as isize {
                            let ix = xs + dx;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        Ok(PoolOutput {
            output: Tensor::new(vec![c, oh, ow], out)?,
            argmax,
        })
    }

    pub fn backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
        if upstream.len() != argmax.len() {
            return Err(Error::invalid("maxpool backward: upstream/argmax length mismatch"));
        }
        let mut dx = Tensor::zeros(input_shape);
        let d = dx.data_mut();
        for (&i, &g) in argmax.iter().zip(upstream.data()) {
            d[i] += g;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcLayer {
    /// `[out, in]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl FcLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let [o, _] = *weights.shape() else {
            return Err(Error::invalid("fc weights must be [out, in]"));
        };
        bias.ensure_shape(&[o])?;
        Ok(FcLayer { weights, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        FcLayer {
            weights: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let (o, n) = (self.out_dim(), self.in_dim());
        if input.len() != n {
            return Err(Error::invalid(format!("fully_connected expects {n} inputs, got {}", input.len())));
        }
        let w = self.weights.data();
        Ok((0..o)
            .map(|r| self.bias.data()[r] + w[r * n..(r + 1) * n].iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<FcGrads> {
        let (o, n) = (self.out_dim(), self.in_dim());
        if input.len() != n || upstream.len() != o {
            return Err(Error::invalid("fully_connected backward: length mismatch"));
        }
        let w = self.weights.data();
        let mut dx = vec![0.0; n];
        let mut dw = vec![0.0; o * n];
        for r in 0..o {
            let g = upstream[r];
            if g == 0.0 {
                continue;
            }
            let wrow = &w[r * n..(r + 1) * n];
            let dwrow = &mut dw[r * n..(r + 1) * n];
            for k in 0..n {
                dx[k] += wrow[k] * g;
                dwrow[k] = input[k] * g;
            }
        }
        Ok(FcGrads {
            input: Tensor::from_vec(dx),
            weights: Tensor::new(vec![o, n], dw)?,
            bias: Tensor::from_vec(upstream.to_vec()),
        })
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Subgradient 0 at `x == 0`.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.ensure_shape(input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Mean over the spatial dimensions of a `[C,H,W]` map.
pub fn global_avg_pool(input: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = dims3(input, "global_avg_pool")?;
    let n = (h * w) as f64;
    Ok(input
        .data()
        .chunks(h * w)
        .take(c)
        .map(|plane| plane.iter().sum::<f64>() / n)
        .collect())
}

pub fn global_avg_pool_backward(shape: &[usize], upstream: &[f64]) -> Result<Tensor> {
    let [c, h, w] = *shape else {
        return Err(Error::invalid("global_avg_pool backward expects [C,H,W]"));
    };
    if upstream.len() != c {
        return Err(Error::invalid("global_avg_pool backward: channel mismatch"));
    }
    let n = (h * w) as f64;
    let mut data = Vec::with_capacity(c * h * w);
    for &g in upstream {
        data.extend(std::iter::repeat_n(g / n, h * w));
    }
    Tensor::new(vec![c, h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// One-vs-all hinge, averaged over classes. `squared` switches to the
    /// squared hinge.
    MultiClassHinge {
        margin: f64,
        squared: bool,
    },
}

impl LossKind {
    pub fn hinge() -> Self {
        LossKind::MultiClassHinge {
            margin: 1.0,
            squared: false,
        }
    }
}

/// Training target for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossTarget {
    Index(usize),
    /// Per-class `+1` / `-1` labels; all `-1` encodes background.
    OneVsAll(Vec<f64>),
}

pub fn loss_forward_backward(scores: &[f64], target: &LossTarget, kind: LossKind) -> Result<(f64, Vec<f64>)> {
    let k = scores.len();
    if k < 2 {
        return Err(Error::invalid(format!("loss needs at least 2 classes, got {k}")));
    }
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            let label = match target {
                LossTarget::Index(i) => *i,
                LossTarget::OneVsAll(y) => {
                    let pos: Vec<usize> = (0..y.len()).filter(|&j| y[j] > 0.0).collect();
                    match pos.as_slice() {
                        [i] if y.len() == k => *i,
                        _ => return Err(Error::invalid("softmax loss needs exactly one positive class in the target")),
                    }
                }
            };
            if label >= k {
                return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let loss = z.ln() - (scores[label] - max);
            let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
            grad[label] -= 1.0;
            Ok((loss, grad))
        }
        LossKind::MultiClassHinge { margin, squared } => {
            if !(margin > 0.0) {
                return Err(Error::invalid(format!("hinge margin must be positive, got {margin}")));
            }
            let y: Vec<f64> = match target {
                LossTarget::Index(i) => {
                    if *i >= k {
                        return Err(Error::invalid(format!("label {i} out of range for {k} classes")));
                    }
                    (0..k).map(|j| if j == *i { 1.0 } else { -1.0 }).collect()
                }
                LossTarget::OneVsAll(y) => {
                    if y.len() != k || y.iter().any(|&v| v != 1.0 && v != -1.0) {
                        return Err(Error::invalid("one-vs-all target must be K values of +1/-1"));
                    }
                    y.clone()
                }
            };
            let kf = k as f64;
            let mut loss = 0.0;
            let mut grad = vec![0.0; k];
            for j in 0..k {
                let slack = margin - y[j] * scores[j];
                if slack > 0.0 {
                    if squared {
                        loss += slack * slack;
                        grad[j] = -2.0 * slack * y[j] / kf;
                    } else {
                        loss += slack;
                        grad[j] = -y[j] / kf;
                    }
                }
            }
            Ok((loss / kf, grad))
        }
    }
}
