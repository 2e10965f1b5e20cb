//! Dense and 1-D convolution layers with hand-written backward passes.
//!
//! Activations of a convolution stack are laid out as `[channels, batch * len]`
//! with column `b * len + l` holding position `l` of batch item `b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::Parameters;

fn fan_in_uniform<R: Rng>(shape: (usize, usize), fan_in: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

/// Same-padded, stride-1 convolution along the position axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `[out_channels, in_channels * kernel]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let fan_in = in_channels * kernel;
        let weight = fan_in_uniform((out_channels, fan_in), fan_in, rng);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let bias = Array1::from_shape_simple_fn(out_channels, || rng.gen_range(-bound..bound));
        Self {
            weight,
            bias,
            in_channels,
            kernel,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
            in_channels: self.in_channels,
            kernel: self.kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn im2col(&self, x: ArrayView2<'_, f64>, len: usize) -> Array2<f64> {
        let cols_n = x.ncols();
        let batch = cols_n / len;
        let pad = self.kernel / 2;
        let mut cols = Array2::<f64>::zeros((self.in_channels * self.kernel, cols_n));
        for ci in 0..self.in_channels {
            let src = x.row(ci);
            let src = src.as_slice().expect("contiguous activations");
            for kk in 0..self.kernel {
                let mut dst = cols.row_mut(ci * self.kernel + kk);
                let dst = dst.as_slice_mut().expect("contiguous cols");
                let off = kk as isize - pad as isize;
                for b in 0..batch {
                    let base = b * len;
                    let lo = (-off).max(0) as usize;
                    let hi = (len as isize - off).min(len as isize).max(0) as usize;
                    if lo < hi {
                        let s0 = (base as isize + lo as isize + off) as usize;
                        dst[base + lo..base + hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, len: usize) -> Array2<f64> {
        let cols_n = dcols.ncols();
        let batch = cols_n / len;
        let pad = self.kernel / 2;
        let mut dx = Array2::<f64>::zeros((self.in_channels, cols_n));
        for ci in 0..self.in_channels {
            let mut dst = dx.row_mut(ci);
            let dst = dst.as_slice_mut().expect("contiguous dx");
            for kk in 0..self.kernel {
                let src = dcols.row(ci * self.kernel + kk);
                let src = src.as_slice().expect("contiguous dcols");
                let off = kk as isize - pad as isize;
                for b in 0..batch {
                    let base = b * len;
                    let lo = (-off).max(0) as usize;
                    let hi = (len as isize - off).min(len as isize).max(0) as usize;
                    for l in lo..hi {
                        dst[(base as isize + l as isize + off) as usize] += src[base + l];
                    }
                }
            }
        }
        dx
    }

    /// Returns the pre-activation output and the im2col buffer needed by
    /// [`Conv1d::backward`].
    pub fn forward(&self, x: ArrayView2<'_, f64>, len: usize) -> (Array2<f64>, Array2<f64>) {
        debug_assert_eq!(x.nrows(), self.in_channels);
        let cols = self.im2col(x, len);
        let mut out = Array2::<f64>::zeros((self.out_channels(), x.ncols()));
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row.fill(b);
        }
        general_mat_mul(1.0, &self.weight, &cols, 1.0, &mut out);
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        dout: &Array2<f64>,
        len: usize,
        grad: &mut Conv1d,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        general_mat_mul(1.0, dout, &cols.t(), 1.0, &mut grad.weight);
        grad.bias += &dout.sum_axis(Axis(1));
        if !need_input_grad {
            return None;
        }
        let mut dcols = Array2::<f64>::zeros(cols.dim());
        general_mat_mul(1.0, &self.weight.t(), dout, 0.0, &mut dcols);
        Some(self.col2im(&dcols, len))
    }
}

impl Parameters for Conv1d {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            (
                "weight".into(),
                vec![self.out_channels(), self.in_channels, self.kernel],
                self.weight.as_slice().expect("standard layout"),
            ),
            (
                "bias".into(),
                vec![self.out_channels()],
                self.bias.as_slice().expect("standard layout"),
            ),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Fully connected layer `y = x W^T + b` over rows of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out_features, in_features]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let weight = fan_in_uniform((out_features, in_features), in_features, rng);
        let bound = 1.0 / (in_features as f64).sqrt();
        let bias = Array1::from_shape_simple_fn(out_features, || rng.gen_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((x.nrows(), self.out_features()));
        for mut row in out.rows_mut() {
            row.assign(&self.bias);
        }
        general_mat_mul(1.0, &x, &self.weight.t(), 1.0, &mut out);
        out
    }

    /// Accumulates into `grad` and adds the input gradient into `dx` when
    /// given.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dout: &Array2<f64>,
        grad: &mut Linear,
        dx: Option<&mut Array2<f64>>,
    ) {
        general_mat_mul(1.0, &dout.t(), &x, 1.0, &mut grad.weight);
        grad.bias += &dout.sum_axis(Axis(0));
        if let Some(dx) = dx {
            general_mat_mul(1.0, dout, &self.weight, 1.0, dx);
        }
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            (
                "weight".into(),
                vec![self.out_features(), self.in_features()],
                self.weight.as_slice().expect("standard layout"),
            ),
            (
                "bias".into(),
                vec![self.out_features()],
                self.bias.as_slice().expect("standard layout"),
            ),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// `[channels, batch * len]` to `[batch, channels * len]`.
pub fn flatten(act: &Array2<f64>, len: usize) -> Array2<f64> {
    let channels = act.nrows();
    let batch = act.ncols() / len;
    let mut out = Array2::<f64>::zeros((batch, channels * len));
    for c in 0..channels {
        let src = act.row(c);
        let src = src.as_slice().expect("contiguous");
        for b in 0..batch {
            let mut dst = out.row_mut(b);
            let dst = dst.as_slice_mut().expect("contiguous");
            dst[c * len..(c + 1) * len].copy_from_slice(&src[b * len..(b + 1) * len]);
        }
    }
    out
}

/// Inverse of [`flatten`].
pub fn unflatten(flat: ArrayView2<'_, f64>, channels: usize, len: usize) -> Array2<f64> {
    let batch = flat.nrows();
    let mut out = Array2::<f64>::zeros((channels, batch * len));
    for b in 0..batch {
        let src = flat.row(b);
        for c in 0..channels {
            let mut dst = out.row_mut(c);
            for l in 0..len {
                dst[b * len + l] = src[c * len + l];
            }
        }
    }
    out
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the post-activation output was not positive.
pub fn relu_backward_inplace(grad: &mut Array2<f64>, activated: &Array2<f64>) {
    grad.zip_mut_with(activated, |g, &a| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution used as an oracle for the im2col path.
    fn naive_conv(conv: &Conv1d, x: &Array2<f64>, len: usize) -> Array2<f64> {
        let batch = x.ncols() / len;
        let pad = conv.kernel as isize / 2;
        let mut out = Array2::zeros((conv.out_channels(), x.ncols()));
        for co in 0..conv.out_channels() {
            for b in 0..batch {
                for l in 0..len {
                    let mut acc = conv.bias[co];
                    for ci in 0..conv.in_channels {
                        for kk in 0..conv.kernel {
                            let p = l as isize + kk as isize - pad;
                            if p >= 0 && (p as usize) < len {
                                acc += conv.weight[[co, ci * conv.kernel + kk]] * x[[ci, b * len + p as usize]];
                            }
                        }
                    }
                    out[[co, b * len + l]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::new(3, 4, 3, &mut rng);
        let len = 7;
        let x = Array2::from_shape_simple_fn((3, 2 * len), || rng.gen_range(-1.0..1.0));
        let (out, _) = conv.forward(x.view(), len);
        let expected = naive_conv(&conv, &x, len);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv1d::new(2, 3, 3, &mut rng);
        let len = 5;
        let x = Array2::from_shape_simple_fn((2, 2 * len), || rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_simple_fn((3, 2 * len), || rng.gen_range(-1.0..1.0));
        let loss = |c: &Conv1d, x: &Array2<f64>| (&c.forward(x.view(), len).0 * &probe).sum();
        let (_, cols) = conv.forward(x.view(), len);
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&cols, &probe, len, &mut grad, true).unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (1, 4), (2, 5)] {
            let mut p = conv.clone();
            p.weight[idx] += h;
            let mut m = conv.clone();
            m.weight[idx] -= h;
            let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((num - grad.weight[idx]).abs() < 1e-7);
        }
        for idx in [(0, 0), (1, 3), (0, 9)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((num - dx[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let act = Array2::from_shape_fn((3, 8), |(c, j)| (c * 100 + j) as f64);
        let flat = flatten(&act, 4);
        assert_eq!(flat.dim(), (2, 12));
        assert_eq!(flat[[1, 4 + 2]], act[[1, 4 + 2]]);
        assert_eq!(unflatten(flat.view(), 3, 4), act);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_simple_fn((2, 4), || rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_simple_fn((2, 3), || rng.gen_range(-1.0..1.0));
        let mut grad = lin.zeros_like();
        let mut dx = Array2::zeros((2, 4));
        lin.backward(x.view(), &probe, &mut grad, Some(&mut dx));
        let loss = |l: &Linear, x: &Array2<f64>| (&l.forward(x.view()) * &probe).sum();
        let h = 1e-6;
        let mut p = lin.clone();
        p.weight[(1, 2)] += h;
        let mut m = lin.clone();
        m.weight[(1, 2)] -= h;
        assert!(((loss(&p, &x) - loss(&m, &x)) / (2.0 * h) - grad.weight[(1, 2)]).abs() < 1e-7);
        let mut xp = x.clone();
        xp[(1, 3)] += h;
        let mut xm = x.clone();
        xm[(1, 3)] -= h;
        assert!(((loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h) - dx[(1, 3)]).abs() < 1e-7);
    }
}
