//! Centered 2D discrete Fourier transforms.
//!
//! "Centered" means the zero-frequency bin sits at `(H / 2, W / 2)`, i.e. the
//! output of `fftshift(fft2(x))`. Two routes are provided: [`centered_fft2`]
//! (rustfft, for plain numerics) and [`SpectralTransform`] (dense DFT matrices
//! applied with tensor matmuls, so gradients flow through it).

use candle_core::{Tensor, D};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};
use crate::tensor::DEVICE;

fn fft_2d_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// `fftshift(fft2(plane))` for a row-major `h x w` real plane.
pub fn centered_fft2(plane: &[f32], h: usize, w: usize) -> Vec<Complex64> {
    assert_eq!(plane.len(), h * w, "plane length");
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(f64::from(v), 0.0)).collect();
    fft_2d_in_place(&mut buf, h, w, false);
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = buf[y * w + x];
        }
    }
    out
}

/// Inverse of [`centered_fft2`]; returns the complex spatial plane.
pub fn centered_ifft2(spec: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    assert_eq!(spec.len(), h * w, "spectrum length");
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            buf[y * w + x] = spec[((y + h / 2) % h) * w + (x + w / 2) % w];
        }
    }
    fft_2d_in_place(&mut buf, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// Index of the point reflection of `(y, x)` about the spectrum center.
pub fn mirror_index(y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
    let (cy, cx) = (h / 2, w / 2);
    ((2 * cy + h - y) % h, (2 * cx + w - x) % w)
}

/// Centered DFT as a pair of real matmuls: `Y = M_h X M_w^T`.
#[derive(Debug, Clone)]
pub struct SpectralTransform {
    h: usize,
    w: usize,
    mh_re: Tensor,
    mh_im: Tensor,
    mw_re_t: Tensor,
    mw_im_t: Tensor,
}

fn centered_dft_matrix(n: usize) -> (Vec<f32>, Vec<f32>) {
    let mut re = Vec::with_capacity(n * n);
    let mut im = Vec::with_capacity(n * n);
    for k in 0..n {
        let freq = k as f64 - (n / 2) as f64;
        for j in 0..n {
            let angle = -2.0 * std::f64::consts::PI * freq * j as f64 / n as f64;
            re.push(angle.cos() as f32);
            im.push(angle.sin() as f32);
        }
    }
    (re, im)
}

impl SpectralTransform {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(invalid("empty spectral plane"));
        }
        let (hr, hi) = centered_dft_matrix(h);
        let (wr, wi) = centered_dft_matrix(w);
        Ok(Self {
            h,
            w,
            mh_re: Tensor::from_vec(hr, (h, h), &DEVICE)?,
            mh_im: Tensor::from_vec(hi, (h, h), &DEVICE)?,
            mw_re_t: Tensor::from_vec(wr, (w, w), &DEVICE)?.t()?.contiguous()?,
            mw_im_t: Tensor::from_vec(wi, (w, w), &DEVICE)?.t()?.contiguous()?,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Real and imaginary parts of the centered spectrum of the last two
    /// dimensions of a real tensor.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let dims = x.dims();
        if dims.len() < 2 || x.dim(D::Minus2)? != self.h || x.dim(D::Minus1)? != self.w {
            return Err(invalid(format!("spectral transform {}x{} applied to {dims:?}", self.h, self.w)));
        }
        let a_re = x.broadcast_matmul(&self.mw_re_t)?;
        let a_im = x.broadcast_matmul(&self.mw_im_t)?;
        let re = (self.mh_re.broadcast_matmul(&a_re)? - self.mh_im.broadcast_matmul(&a_im)?)?;
        let im = (self.mh_re.broadcast_matmul(&a_im)? + self.mh_im.broadcast_matmul(&a_re)?)?;
        Ok((re, im))
    }
}
