//! Deformation-constrained pooling.
//!
//! For a part detection map `M` of size `V x H`, each output cell takes the
//! best placement of the part within a `(2R+1) x (2R+1)` window around its
//! block centre, after subtracting a learned placement penalty:
//!
//! ```text
//! b(y, x) = max_{i, j in -R..=R}  M[cy + i, cx + j] - sum_n c[n] * d[n][i][j]
//! ```
//!
//! where `(cy, cx)` is the block centre of output `(y, x)` (see
//! [`CenteredGrid`]). Cells outside `M` are not candidates. Ties go to the
//! first offset in row-major `(i, j)` order, matching max-pooling. With every
//! `c[n] == 0` the operator is exactly centred max-pooling.
//!
//! The single-output configuration reproduces the quadratic part-placement
//! score of deformable part models; [`dpm_score_oracle`] evaluates that score
//! by exhaustive search and [`dpm_to_defpool`] maps its parameters onto
//! def-pooling.

use serde::{Deserialize, Serialize};

use crate::layers::CenteredGrid;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Stand-in for an infinite placement cost.
pub const INFINITE_COST: f64 = 1e9;

/// Parameters of one def-pooling map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefPoolParams {
    pub radius: usize,
    /// Horizontal subsampling step (`k_x`).
    pub stride_x: usize,
    /// Vertical subsampling step (`k_y`).
    pub stride_y: usize,
    /// `[N]` penalty coefficients.
    pub coeffs: Tensor,
    /// `[N, 2R+1, 2R+1]` deformation basis, indexed by offset `(i+R, j+R)`.
    pub basis: Tensor,
    pub basis_frozen: bool,
}

impl DefPoolParams {
    pub fn new(radius: usize, stride_y: usize, stride_x: usize, coeffs: Tensor, basis: Tensor, basis_frozen: bool) -> Result<Self> {
        let p = DefPoolParams {
            radius,
            stride_x,
            stride_y,
            coeffs,
            basis,
            basis_frozen,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero coefficients: plain centred max-pooling.
    pub fn max_pooling(radius: usize, stride_y: usize, stride_x: usize, n_basis: usize) -> Self {
        let s = 2 * radius + 1;
        DefPoolParams {
            radius,
            stride_x,
            stride_y,
            coeffs: Tensor::zeros(&[n_basis]),
            basis: Tensor::zeros(&[n_basis, s, s]),
            basis_frozen: false,
        }
    }

    pub fn num_basis(&self) -> usize {
        self.coeffs.len()
    }

    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn grid(&self) -> CenteredGrid {
        CenteredGrid {
            radius_y: self.radius,
            radius_x: self.radius,
            stride_y: self.stride_y,
            stride_x: self.stride_x,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride_x == 0 || self.stride_y == 0 {
            return Err(Error::invalid("def-pooling strides must be positive"));
        }
        let n = self.coeffs.len();
        if self.coeffs.ndim() != 1 {
            return Err(Error::invalid("def-pooling coefficients must be one-dimensional"));
        }
        let s = self.window();
        self.basis.ensure_shape(&[n, s, s])?;
        self.coeffs.check_finite("def-pooling coefficients")?;
        self.basis.check_finite("def-pooling basis")?;
        Ok(())
    }

    pub fn output_dims(&self, v: usize, h: usize) -> Result<(usize, usize)> {
        let (oy, ox) = self.grid().output_dims(v, h);
        if oy == 0 || ox == 0 {
            return Err(Error::Geometry {
                layer: "defpool".into(),
                reason: format!("map {v}x{h} too small for strides {}x{}", self.stride_y, self.stride_x),
            });
        }
        Ok((oy, ox))
    }

    /// `sum_n c[n] * d[n]` per offset, row-major over the window.
    pub fn penalty(&self) -> Vec<f64> {
        penalty(self.coeffs.data(), self.basis.data(), self.window())
    }
}

fn penalty(coeffs: &[f64], basis: &[f64], window: usize) -> Vec<f64> {
    let cells = window * window;
    let mut pen = vec![0.0; cells];
    for (n, &c) in coeffs.iter().enumerate() {
        for (p, &d) in pen.iter_mut().zip(&basis[n * cells..(n + 1) * cells]) {
            *p += c * d;
        }
    }
    pen
}

/// Winning placement for one output cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Winner {
    /// Flat row-major index into `M`.
    pub input_index: usize,
    /// Flat index into the `(2R+1)^2` window, row-major over `(i+R, j+R)`.
    pub offset_index: usize,
}

impl Winner {
    /// Signed `(i, j)` offset from the block centre.
    pub fn offset(&self, radius: usize) -> (isize, isize) {
        let s = 2 * radius + 1;
        (
            (self.offset_index / s) as isize - radius as isize,
            (self.offset_index % s) as isize - radius as isize,
        )
    }
}

#[derive(Debug, Clone)]
pub struct DefPoolOutput {
    /// `[V / k_y, H / k_x]`
    pub output: Tensor,
    pub winners: Vec<Winner>,
}

#[derive(Debug, Clone)]
pub struct DefPoolGrads {
    pub input: Tensor,
    pub coeffs: Tensor,
    /// `None` when the basis is frozen.
    pub basis: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn forward_plane(m: &[f64], v: usize, h: usize, grid: CenteredGrid, pen: &[f64], out: &mut [f64], winners: &mut [Winner]) -> Result<()> {
    let (oh, ow) = grid.output_dims(v, h);
    let r = grid.radius_y as isize;
    let s = 2 * grid.radius_y + 1;
    for oy in 0..oh {
        for ox in 0..ow {
            let (cy, cx) = grid.center(oy, ox);
            let mut best = f64::NEG_INFINITY;
            let mut win: Option<Winner> = None;
            for i in -r..=r {
                let y = cy as isize + i;
                if y < 0 || y >= v as isize {
                    continue;
                }
                let row = (i + r) as usize * s;
                for j in -r..=r {
                    let x = cx as isize + j;
                    if x < 0 || x >= h as isize {
                        continue;
                    }
                    let idx = y as usize * h + x as usize;
                    let off = row + (j + r) as usize;
                    let val = m[idx] - pen[off];
                    if win.is_none() || val > best {
                        best = val;
                        win = Some(Winner {
                            input_index: idx,
                            offset_index: off,
                        });
                    }
                }
            }
            let win = win.ok_or_else(|| Error::Geometry {
                layer: "defpool".into(),
                reason: format!("window of output ({oy},{ox}) lies outside the map"),
            })?;
            out[oy * ow + ox] = best;
            winners[oy * ow + ox] = win;
        }
    }
    Ok(())
}

pub fn defpool_forward(m: &Tensor, p: &DefPoolParams) -> Result<DefPoolOutput> {
    p.validate()?;
    let [v, h] = *m.shape() else {
        return Err(Error::invalid(format!("defpool expects a [V,H] map, got {:?}", m.shape())));
    };
    let (oh, ow) = p.output_dims(v, h)?;
    let mut out = vec![0.0; oh * ow];
    let mut winners = vec![
        Winner {
            input_index: 0,
            offset_index: 0
        };
        oh * ow
    ];
    forward_plane(m.data(), v, h, p.grid(), &p.penalty(), &mut out, &mut winners)?;
    Ok(DefPoolOutput {
        output: Tensor::new(vec![oh, ow], out)?,
        winners,
    })
}

pub fn defpool_backward(upstream: &Tensor, winners: &[Winner], m_shape: &[usize], p: &DefPoolParams) -> Result<DefPoolGrads> {
    if upstream.len() != winners.len() {
        return Err(Error::invalid("defpool backward: upstream/winner count mismatch"));
    }
    let n = p.num_basis();
    let cells = p.window() * p.window();
    let mut dm = Tensor::zeros(m_shape);
    let mut dc = vec![0.0; n];
    let mut dd = (!p.basis_frozen).then(|| vec![0.0; n * cells]);
    let (c, d) = (p.coeffs.data(), p.basis.data());
    for (w, &g) in winners.iter().zip(upstream.data()) {
        dm.data_mut()[w.input_index] += g;
        for k in 0..n {
            dc[k] -= d[k * cells + w.offset_index] * g;
            if let Some(dd) = dd.as_mut() {
                dd[k * cells + w.offset_index] -= c[k] * g;
            }
        }
    }
    Ok(DefPoolGrads {
        input: dm,
        coeffs: Tensor::new(vec![n], dc)?,
        basis: dd.map(|v| Tensor::new(p.basis.shape().to_vec(), v)).transpose()?,
    })
}

/// Quadratic part-placement parameters of a deformable part model.
///
/// The placement score at `(i, j)` is
/// `M[i,j] - c1 (i - a_i + c3/(2 c1))^2 - c2 (j - a_j + c4/(2 c2))^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpmParams {
    pub anchor_i: i64,
    pub anchor_j: i64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

fn completed_square_shift(lin: f64, quad: f64, name: &str) -> Result<f64> {
    if quad == 0.0 {
        if lin == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::invalid(format!(
                "{name}: quadratic coefficient is 0 with a non-zero linear term"
            )))
        }
    } else {
        Ok(lin / (2.0 * quad))
    }
}

impl DpmParams {
    /// Location-independent constant `c3^2/(4 c1) + c4^2/(4 c2)`.
    pub fn c5(&self) -> Result<f64> {
        let si = completed_square_shift(self.c3, self.c1, "rows")?;
        let sj = completed_square_shift(self.c4, self.c2, "columns")?;
        Ok(self.c1 * si * si + self.c2 * sj * sj)
    }
}

/// Exhaustive maximum of the quadratic placement score over every cell of `M`.
pub fn dpm_score_oracle(m: &Tensor, q: &DpmParams) -> Result<f64> {
    let [v, h] = *m.shape() else {
        return Err(Error::invalid("dpm oracle expects a [V,H] map"));
    };
    let si = completed_square_shift(q.c3, q.c1, "rows")?;
    let sj = completed_square_shift(q.c4, q.c2, "columns")?;
    let mut best = f64::NEG_INFINITY;
    for i in 0..v {
        let di = i as f64 - q.anchor_i as f64 + si;
        for j in 0..h {
            let dj = j as f64 - q.anchor_j as f64 + sj;
            let s = m.data()[i * h + j] - q.c1 * di * di - q.c2 * dj * dj;
            best = best.max(s);
        }
    }
    Ok(best)
}

/// Def-pooling configuration equivalent to a quadratic placement model.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmMapping {
    pub params: DefPoolParams,
    /// Constant subtracted from the pooled output.
    pub c5: f64,
}

/// Single-output def-pooling (`k_y = V`, `k_x = H`) whose window covers the
/// whole map, with the frozen basis `(i-a_i)^2, (j-a_j)^2, i-a_i, j-a_j`
/// and coefficients `(c1, c2, c3, c4)`. `pooled - c5` equals
/// [`dpm_score_oracle`].
pub fn dpm_to_defpool(q: &DpmParams, v: usize, h: usize) -> Result<DpmMapping> {
    if v == 0 || h == 0 {
        return Err(Error::invalid("dpm mapping needs a non-empty map"));
    }
    let c5 = q.c5()?;
    let grid = CenteredGrid {
        radius_y: 0,
        radius_x: 0,
        stride_y: v,
        stride_x: h,
    };
    let (cy, cx) = grid.center(0, 0);
    let radius = [cy, v - 1 - cy, cx, h - 1 - cx].into_iter().max().unwrap_or(0);
    let s = 2 * radius + 1;
    let r = radius as i64;
    let mut basis = vec![0.0; 4 * s * s];
    for oi in 0..s {
        for oj in 0..s {
            let di = (cy as i64 + oi as i64 - r - q.anchor_i) as f64;
            let dj = (cx as i64 + oj as i64 - r - q.anchor_j) as f64;
            let cell = oi * s + oj;
            basis[cell] = di * di;
            basis[s * s + cell] = dj * dj;
            basis[2 * s * s + cell] = di;
            basis[3 * s * s + cell] = dj;
        }
    }
    let params = DefPoolParams::new(
        radius,
        v,
        h,
        Tensor::from_vec(vec![q.c1, q.c2, q.c3, q.c4]),
        Tensor::new(vec![4, s, s], basis)?,
        true,
    )?;
    Ok(DpmMapping { params, c5 })
}

/// A stack of def-pooling maps applied channel-wise to a `[P, V, H]` tensor.
///
/// Either every channel has its own `(c, d)` or one set is shared across
/// channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefPoolBank {
    pub radius: usize,
    pub stride_y: usize,
    pub stride_x: usize,
    /// `[G, N]` with `G` = channels, or 1 when shared.
    pub coeffs: Tensor,
    /// `[G, N, 2R+1, 2R+1]`
    pub basis: Tensor,
    pub basis_frozen: bool,
}

#[derive(Debug, Clone)]
pub struct BankOutput {
    pub output: Tensor,
    pub winners: Vec<Winner>,
}

#[derive(Debug, Clone)]
pub struct BankGrads {
    pub input: Tensor,
    pub coeffs: Tensor,
    pub basis: Option<Tensor>,
}

impl DefPoolBank {
    pub fn groups(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn num_basis(&self) -> usize {
        self.coeffs.shape()[1]
    }

    fn window(&self) -> usize {
        2 * self.radius + 1
    }

    fn group_of(&self, channel: usize) -> usize {
        if self.groups() == 1 {
            0
        } else {
            channel
        }
    }

    /// Parameters of the map applied to `channel`.
    pub fn channel_params(&self, channel: usize) -> DefPoolParams {
        let g = self.group_of(channel);
        let n = self.num_basis();
        let cells = self.window() * self.window();
        DefPoolParams {
            radius: self.radius,
            stride_x: self.stride_x,
            stride_y: self.stride_y,
            coeffs: Tensor::from_vec(self.coeffs.data()[g * n..(g + 1) * n].to_vec()),
            basis: Tensor::new(
                vec![n, self.window(), self.window()],
                self.basis.data()[g * n * cells..(g + 1) * n * cells].to_vec(),
            )
            .expect("bank basis slice"),
            basis_frozen: self.basis_frozen,
        }
    }

    pub fn output_dims(&self, v: usize, h: usize) -> Result<(usize, usize)> {
        self.channel_params(0).output_dims(v, h)
    }

    pub fn forward(&self, input: &Tensor) -> Result<BankOutput> {
        let [c, v, h] = *input.shape() else {
            return Err(Error::invalid("defpool bank expects [P,V,H]"));
        };
        if self.groups() != 1 && self.groups() != c {
            return Err(Error::invalid(format!(
                "defpool bank has {} parameter groups for {c} channels",
                self.groups()
            )));
        }
        let (oh, ow) = self.output_dims(v, h)?;
        let n = self.num_basis();
        let cells = self.window() * self.window();
        let grid = CenteredGrid {
            radius_y: self.radius,
            radius_x: self.radius,
            stride_y: self.stride_y,
            stride_x: self.stride_x,
        };
        let mut out = vec![0.0; c * oh * ow];
        let mut winners = vec![
            Winner {
                input_index: 0,
                offset_index: 0
            };
            c * oh * ow
        ];
        let mut shared_pen = None;
        for ch in 0..c {
            let g = self.group_of(ch);
            let pen = if self.groups() == 1 {
                shared_pen
                    .get_or_insert_with(|| penalty(&self.coeffs.data()[..n], &self.basis.data()[..n * cells], self.window()))
                    .clone()
            } else {
                penalty(
                    &self.coeffs.data()[g * n..(g + 1) * n],
                    &self.basis.data()[g * n * cells..(g + 1) * n * cells],
                    self.window(),
                )
            };
            let plane = &input.data()[ch * v * h..(ch + 1) * v * h];
            let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            let w = &mut winners[ch * oh * ow..(ch + 1) * oh * ow];
            forward_plane(plane, v, h, grid, &pen, o, w)?;
            for win in w.iter_mut() {
                win.input_index += ch * v * h;
            }
        }
        Ok(BankOutput {
            output: Tensor::new(vec![c, oh, ow], out)?,
            winners,
        })
    }

    pub fn backward(&self, input_shape: &[usize], winners: &[Winner], upstream: &Tensor) -> Result<BankGrads> {
        let [c, _, _] = *input_shape else {
            return Err(Error::invalid("defpool bank backward expects [P,V,H]"));
        };
        if upstream.len() != winners.len() || !winners.len().is_multiple_of(c) {
            return Err(Error::invalid("defpool bank backward: upstream/winner mismatch"));
        }
        let per = winners.len() / c;
        let n = self.num_basis();
        let cells = self.window() * self.window();
        let mut dx = Tensor::zeros(input_shape);
        let mut dc = Tensor::zeros(self.coeffs.shape());
        let mut dd = (!self.basis_frozen).then(|| Tensor::zeros(self.basis.shape()));
        let (cf, bs) = (self.coeffs.data(), self.basis.data());
        for (k, (w, &g)) in winners.iter().zip(upstream.data()).enumerate() {
            let grp = self.group_of(k / per);
            dx.data_mut()[w.input_index] += g;
            for b in 0..n {
                let bidx = (grp * n + b) * cells + w.offset_index;
                dc.data_mut()[grp * n + b] -= bs[bidx] * g;
                if let Some(dd) = dd.as_mut() {
                    dd.data_mut()[bidx] -= cf[grp * n + b] * g;
                }
            }
        }
        Ok(BankGrads {
            input: dx,
            coeffs: dc,
            basis: dd,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::MaxPoolLayer;
    use crate::tensor::{compare_gradients, finite_diff_gradient, tie_free, uniform};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(radius: usize, k: usize, basis: Vec<f64>, c: f64) -> DefPoolParams {
        let s = 2 * radius + 1;
        DefPoolParams::new(
            radius,
            k,
            k,
            Tensor::from_vec(vec![c]),
            Tensor::new(vec![1, s, s], basis).unwrap(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn center_wins_with_unit_penalty() {
        let m = Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut d = vec![1.0; 9];
        d[4] = 0.0;
        let out = defpool_forward(&m, &single(1, 3, d, 1.0)).unwrap();
        assert_eq!(out.output.data(), &[5.0]);
        assert_eq!(out.winners[0].offset(1), (0, 0));
    }

    /// Brute force over the nine offsets of the example above, with the
    /// centre value lowered so a neighbour wins instead.
    #[test]
    fn neighbour_wins_when_center_is_weak() {
        let m = Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 0.0, 0.5, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let mut d = vec![1.0; 9];
        d[4] = 0.0;
        let out = defpool_forward(&m, &single(1, 3, d.clone(), 1.0)).unwrap();
        let brute = (0..9).map(|k| m.data()[k] - d[k]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.output.data(), &[brute]);
        assert_eq!(brute, 2.0);
        assert_eq!(out.winners[0].offset(1), (0, 1));
    }

    #[test]
    fn infinite_cost_pins_part_to_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = uniform(&[9, 9], &mut rng, 10.0);
        let mut d = vec![INFINITE_COST; 9];
        d[4] = 0.0;
        let out = defpool_forward(&m, &single(1, 3, d, 1.0)).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                assert_eq!(out.output.data()[oy * 3 + ox], m.data()[(3 * oy + 1) * 9 + 3 * ox + 1]);
            }
        }
    }

    #[test]
    fn zero_coeffs_match_centered_maxpool() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let r = rng.gen_range(0..3);
            let (ky, kx) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (v, h) = (rng.gen_range(ky..10), rng.gen_range(kx..10));
            let m = uniform(&[v, h], &mut rng, 1.0);
            let mut p = DefPoolParams::max_pooling(r, ky, kx, 2);
            p.basis = uniform(p.basis.shape(), &mut rng, 3.0);
            let a = defpool_forward(&m, &p).unwrap();
            let pool = MaxPoolLayer::centered(r, ky, kx)
                .forward(&m.clone().reshape(&[1, v, h]).unwrap())
                .unwrap();
            assert_eq!(a.output.data(), pool.output.data());
            let idx: Vec<usize> = a.winners.iter().map(|w| w.input_index).collect();
            assert_eq!(idx, pool.argmax);
        }
    }

    #[test]
    fn single_output_center_backward() {
        let m = Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut d = vec![1.0; 9];
        d[4] = 0.25;
        let p = single(1, 3, d, 1.0);
        let out = defpool_forward(&m, &p).unwrap();
        let g = defpool_backward(&Tensor::from_vec(vec![1.0]), &out.winners, m.shape(), &p).unwrap();
        assert_eq!(g.coeffs.data(), &[-0.25]);
        assert_eq!(g.input.data()[4], 1.0);
        assert_eq!(g.basis.unwrap().data()[4], -1.0);
    }

    #[test]
    fn frozen_basis_has_no_gradient() {
        let mut p = single(1, 2, vec![0.5; 9], 0.3);
        p.basis_frozen = true;
        let m = Tensor::zeros(&[4, 4]);
        let out = defpool_forward(&m, &p).unwrap();
        let g = defpool_backward(&Tensor::filled(&[2, 2], 1.0), &out.winners, m.shape(), &p).unwrap();
        assert!(g.basis.is_none());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..8u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = 1 + (seed as usize % 2);
            let s = 2 * r + 1;
            let m = tie_free(&[6, 6], &mut rng, 0.05);
            let p = DefPoolParams::new(
                r,
                2,
                3,
                Tensor::from_vec(vec![rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05)]),
                tie_free(&[2, s, s], &mut rng, 0.05),
                false,
            )
            .unwrap();
            let out = defpool_forward(&m, &p).unwrap();
            let up = uniform(out.output.shape(), &mut rng, 1.0);
            let g = defpool_backward(&up, &out.winners, m.shape(), &p).unwrap();
            let num_m = finite_diff_gradient(|t| defpool_forward(t, &p)?.output.dot(&up), &m, 1e-5).unwrap();
            assert!(compare_gradients(&g.input, &num_m, 1e-4, 1e-7).unwrap().passed);
            let num_c = finite_diff_gradient(
                |t| {
                    let mut q = p.clone();
                    q.coeffs = t.clone();
                    defpool_forward(&m, &q)?.output.dot(&up)
                },
                &p.coeffs,
                1e-5,
            )
            .unwrap();
            assert!(compare_gradients(&g.coeffs, &num_c, 1e-4, 1e-7).unwrap().passed);
            let num_d = finite_diff_gradient(
                |t| {
                    let mut q = p.clone();
                    q.basis = t.clone();
                    defpool_forward(&m, &q)?.output.dot(&up)
                },
                &p.basis,
                1e-5,
            )
            .unwrap();
            assert!(compare_gradients(g.basis.as_ref().unwrap(), &num_d, 1e-4, 1e-7).unwrap().passed);
        }
    }

    #[test]
    fn two_separated_peaks_both_survive() {
        let mut m = Tensor::zeros(&[9, 9]);
        m.data_mut()[9 + 1] = 4.0;
        m.data_mut()[7 * 9 + 7] = 3.0;
        let mut d = vec![0.1; 9];
        d[4] = 0.0;
        let out = defpool_forward(&m, &single(1, 3, d, 1.0)).unwrap();
        let picks: Vec<usize> = out.winners.iter().map(|w| w.input_index).collect();
        assert!(picks.contains(&10));
        assert!(picks.contains(&70));
        assert!(out.output.data().contains(&4.0));
        assert!(out.output.data().contains(&3.0));
    }

    #[test]
    fn dpm_zero_params_is_global_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = uniform(&[5, 7], &mut rng, 1.0);
        let q = DpmParams {
            anchor_i: 1,
            anchor_j: 3,
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
            c4: 0.0,
        };
        let global = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(dpm_score_oracle(&m, &q).unwrap(), global);
        let map = dpm_to_defpool(&q, 5, 7).unwrap();
        assert!(map.params.coeffs.is_all_zero());
        assert_eq!(map.c5, 0.0);
        assert_eq!(defpool_forward(&m, &map.params).unwrap().output.data(), &[global]);
    }

    #[test]
    fn dpm_infinite_stiffness_returns_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = uniform(&[6, 6], &mut rng, 5.0);
        let q = DpmParams {
            anchor_i: 4,
            anchor_j: 1,
            c1: INFINITE_COST,
            c2: INFINITE_COST,
            c3: 0.0,
            c4: 0.0,
        };
        assert_eq!(dpm_score_oracle(&m, &q).unwrap(), m.data()[4 * 6 + 1]);
    }

    #[test]
    fn dpm_undefined_completed_square() {
        let m = Tensor::zeros(&[3, 3]);
        let q = DpmParams {
            anchor_i: 0,
            anchor_j: 0,
            c1: 0.0,
            c2: 1.0,
            c3: 0.5,
            c4: 0.0,
        };
        assert!(dpm_score_oracle(&m, &q).is_err());
    }

    #[test]
    fn dpm_mapping_matches_oracle_including_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..50 {
            let (v, h) = (rng.gen_range(5..10), rng.gen_range(5..10));
            let m = uniform(&[v, h], &mut rng, 2.0);
            let (ai, aj) = match trial % 5 {
                0 => (0, 0),
                1 => (v as i64 - 1, h as i64 - 1),
                2 => (0, h as i64 - 1),
                _ => (rng.gen_range(0..v as i64), rng.gen_range(0..h as i64)),
            };
            let q = DpmParams {
                anchor_i: ai,
                anchor_j: aj,
                c1: rng.gen_range(0.01..1.0),
                c2: rng.gen_range(0.01..1.0),
                c3: rng.gen_range(-1.0..1.0),
                c4: rng.gen_range(-1.0..1.0),
            };
            let map = dpm_to_defpool(&q, v, h).unwrap();
            let pooled = defpool_forward(&m, &map.params).unwrap();
            assert_eq!(pooled.output.len(), 1);
            let oracle = dpm_score_oracle(&m, &q).unwrap();
            assert!((pooled.output.data()[0] - map.c5 - oracle).abs() <= 1e-9);
        }
    }

    #[test]
    fn bank_matches_per_channel_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bank = DefPoolBank {
            radius: 1,
            stride_y: 2,
            stride_x: 2,
            coeffs: uniform(&[3, 2], &mut rng, 1.0),
            basis: uniform(&[3, 2, 3, 3], &mut rng, 1.0),
            basis_frozen: false,
        };
        let x = uniform(&[3, 6, 5], &mut rng, 1.0);
        let out = bank.forward(&x).unwrap();
        for ch in 0..3 {
            let plane = Tensor::new(vec![6, 5], x.data()[ch * 30..(ch + 1) * 30].to_vec()).unwrap();
            let single = defpool_forward(&plane, &bank.channel_params(ch)).unwrap();
            assert_eq!(&out.output.data()[ch * 6..(ch + 1) * 6], single.output.data());
        }
        let up = uniform(out.output.shape(), &mut rng, 1.0);
        let g = bank.backward(x.shape(), &out.winners, &up).unwrap();
        let num = finite_diff_gradient(
            |t| {
                let mut b = bank.clone();
                b.coeffs = t.clone();
                b.forward(&x)?.output.dot(&up)
            },
            &bank.coeffs,
            1e-5,
        )
        .unwrap();
        assert!(compare_gradients(&g.coeffs, &num, 1e-4, 1e-7).unwrap().passed);
    }

    proptest! {
        #[test]
        fn raising_a_coefficient_never_raises_output(seed in 0u64..500, n in 0usize..2, bump in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = uniform(&[7, 6], &mut rng, 1.0);
            let basis = uniform(&[2, 3, 3], &mut rng, 1.0).map(f64::abs);
            let p = DefPoolParams::new(1, 2, 2, Tensor::from_vec(vec![0.3, 0.1]), basis, false).unwrap();
            let mut q = p.clone();
            q.coeffs.data_mut()[n] += bump;
            let a = defpool_forward(&m, &p).unwrap();
            let b = defpool_forward(&m, &q).unwrap();
            for (x, y) in a.output.data().iter().zip(b.output.data()) {
                prop_assert!(y <= x);
            }
        }
    }
}
