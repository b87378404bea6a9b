//! Convolution as a matrix product: patch unrolling (im2col), its adjoint
//! scatter-add (col2im) and non-overlapping max pooling.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument("kernel and stride must be positive".into()));
        }
        let (ph, pw) = (self.height + 2 * self.padding, self.width + 2 * self.padding);
        if self.kernel > ph || self.kernel > pw {
            return Err(Error::InvalidArgument(format!(
                "kernel {} exceeds padded extent {ph}x{pw}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Width of one unrolled patch, `C_i · k · k`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input pixel feeding entry `(row, col)` of the unrolled matrix, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, row: usize, col: usize) -> Option<usize> {
        let k = self.kernel;
        let (oh, ow) = (row / self.out_width(), row % self.out_width());
        let (c, rem) = (col / (k * k), col % (k * k));
        let (ki, kj) = (rem / k, rem % k);
        let y = (oh * self.stride + ki) as isize - self.padding as isize;
        let x = (ow * self.stride + kj) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(c * self.height * self.width + y as usize * self.width + x as usize)
        }
    }
}

/// Unrolls one `C x h x w` image (flat, channel-major) into a
/// `(h_o·w_o) x (C·k·k)` matrix. Row `j` is the receptive field of output
/// position `j`, laid out channel-major then row-major within the patch.
pub fn im2col_slice(x: &[f64], g: &ConvGeometry) -> Result<Tensor> {
    g.validate()?;
    if x.len() != g.input_len() {
        return Err(shape_err("im2col", [g.channels, g.height, g.width], x.len()));
    }
    let (rows, cols) = (g.positions(), g.patch_len());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if let Some(src) = g.source(r, c) {
                out[r * cols + c] = x[src];
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

pub fn im2col(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(shape_err("im2col", "C x h x w", x.shape()));
    }
    let g = ConvGeometry {
        channels: x.shape()[0],
        height: x.shape()[1],
        width: x.shape()[2],
        kernel,
        stride,
        padding,
    };
    im2col_slice(x.data(), &g)
}

/// Adjoint of [`im2col_slice`]: scatter-adds an unrolled gradient back onto
/// the image, returning a flat `C x h x w` buffer.
pub fn col2im_slice(cols: &[f64], g: &ConvGeometry) -> Result<Vec<f64>> {
    g.validate()?;
    let (rows, width) = (g.positions(), g.patch_len());
    if cols.len() != rows * width {
        return Err(shape_err("col2im", [rows, width], cols.len()));
    }
    let mut out = vec![0.0; g.input_len()];
    for r in 0..rows {
        for c in 0..width {
            if let Some(dst) = g.source(r, c) {
                out[dst] += cols[r * width + c];
            }
        }
    }
    Ok(out)
}

pub fn col2im(grad_cols: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    if grad_cols.shape() != [g.positions(), g.patch_len()] {
        return Err(shape_err("col2im", [g.positions(), g.patch_len()], grad_cols.shape()));
    }
    let data = col2im_slice(grad_cols.data(), g)?;
    Tensor::new(vec![g.channels, g.height, g.width], data)
}

/// Non-overlapping `window x window` max pooling over a flat `C x h x w`
/// buffer (floor semantics). Returns pooled values and the flat source index
/// of each maximum; ties go to the lowest flat index.
pub fn max_pool(x: &[f64], channels: usize, h: usize, w: usize, window: usize) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (h / window, w / window);
    let mut vals = Vec::with_capacity(channels * ph * pw);
    let mut idx = Vec::with_capacity(channels * ph * pw);
    for c in 0..channels {
        for oy in 0..ph {
            for ox in 0..pw {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for dy in 0..window {
                    for dx in 0..window {
                        let at = c * h * w + (oy * window + dy) * w + ox * window + dx;
                        if best == usize::MAX || x[at] > best_v || (x[at] == best_v && at < best) {
                            best = at;
                            best_v = x[at];
                        }
                    }
                }
                vals.push(best_v);
                idx.push(best);
            }
        }
    }
    (vals, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn geom(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> ConvGeometry {
        ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride: s,
            padding: p,
        }
    }

    #[test]
    fn single_patch() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&x, 2, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[1, 4]);
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn three_by_three_enumerates_four_patches() {
        // Hand enumeration of the 2x2 windows of [[1,2,3],[4,5,6],[7,8,9]].
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let cols = im2col(&x, 2, 1, 0).unwrap();
        let expected = [
            [1.0, 2.0, 4.0, 5.0],
            [2.0, 3.0, 5.0, 6.0],
            [4.0, 5.0, 7.0, 8.0],
            [5.0, 6.0, 8.0, 9.0],
        ];
        assert_eq!(cols.shape(), &[4, 4]);
        for (r, row) in expected.iter().enumerate() {
            assert_eq!(cols.row(r), row);
        }
    }

    #[test]
    fn unit_kernel_is_a_permuted_reshape() {
        let x = SeededRng::new(1).normal(&[2, 3, 4]);
        let cols = im2col(&x, 1, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[12, 2]);
        for pos in 0..12 {
            for c in 0..2 {
                assert_eq!(cols.at(pos, c), x.data()[c * 12 + pos]);
            }
        }
        let g = geom(2, 3, 4, 1, 1, 0);
        assert_eq!(col2im(&cols, &g).unwrap(), x);
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = SeededRng::new(2);
        for &(c, h, w, k, s, p) in &[(1, 3, 3, 2, 1, 0), (2, 5, 4, 3, 2, 1), (3, 4, 4, 3, 1, 1)] {
            let g = geom(c, h, w, k, s, p);
            for _ in 0..5 {
                let x = rng.normal(&[c, h, w]);
                let y = rng.normal(&[g.positions(), g.patch_len()]);
                let lhs = im2col(&x, k, s, p).unwrap().dot(&y).unwrap();
                let rhs = x.dot(&col2im(&y, &g).unwrap()).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn zero_gradient_scatters_to_zero() {
        let g = geom(1, 3, 3, 2, 1, 0);
        let out = col2im(&Tensor::zeros(&[4, 4]), &g).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(im2col(&x, 3, 1, 0).is_err());
        assert!(im2col(&x, 3, 1, 1).is_ok());
    }

    #[test]
    fn output_extent_formula() {
        let g = geom(1, 8, 7, 3, 2, 1);
        assert_eq!(g.out_height(), (8 + 2 - 3) / 2 + 1);
        assert_eq!(g.out_width(), (7 + 2 - 3) / 2 + 1);
    }

    #[test]
    fn pool_tie_breaks_low() {
        let x = [1.0, 1.0, 0.0, 1.0];
        let (v, i) = max_pool(&x, 1, 2, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(i, vec![0]);
    }
}
