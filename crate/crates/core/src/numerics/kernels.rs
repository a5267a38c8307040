//! Raw array kernels behind the differentiable ops.

/// `c = op(a) · op(b) + beta · c` for row-major buffers.
///
/// `op(a)` is `m × k`; when `ta` is set, `a` is stored as `k × m`.
/// `op(b)` is `k × n`; when `tb` is set, `b` is stored as `n × k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds asserted above cover every index dgemm touches
    // for these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2D convolution window sweep over one image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfold `[C, H, W]` into `[C·k·k, OH·OW]`.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width
                        {
                            img[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `[C·k·k, OH·OW]` into `[C, H, W]`.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, evaluated as `x·σ(2u)` (the same function as
/// `½x(1 + tanh u)`).
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(2.0 * GELU_C * (x + GELU_A * x * x * x))
}

pub fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid(2.0 * GELU_C * (x + GELU_A * x * x * x));
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2x3
        let at = [1., 4., 2., 5., 3., 6.]; // 3x2
        let b = [1., 0., 0., 1., 1., 1.]; // 3x2
        let bt = [1., 0., 1., 0., 1., 1.]; // 2x3
        let mut c1 = [0.0; 4];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c1);
        gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c1, [4., 5., 10., 11.]);
        assert_eq!(c1, c2);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for &x in &[-40.0, -3.0, -0.5, 0.0, 0.7, 2.5, 40.0] {
            let reference = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
            assert!((gelu(x) - reference).abs() < 1e-14, "{x}");
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
