//! Dilated 2D convolution kernels, forward and backward.
//!
//! Layout: input (N, Cin, H, W), weight (Cout, Cin, Kh, Kw), bias (Cout).
//! "Same" padding is symmetric zero padding with the extra cell of an odd
//! total placed on the trailing side. Reduction order per output element is
//! fixed (in-channel, then kernel row, then kernel column), so parallel and
//! sequential execution give bit-identical results.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::runtime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: (usize, usize),
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(kernel: usize, in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        ConvSpec {
            kernel: (kernel, kernel),
            in_channels,
            out_channels,
            stride: (1, 1),
            dilation,
            padding: Padding::Same,
        }
    }

    /// Effective kernel extent per axis: (k - 1) * d + 1.
    pub fn effective_kernel(&self) -> (usize, usize) {
        let d = self.dilation;
        ((self.kernel.0 - 1) * d + 1, (self.kernel.1 - 1) * d + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::invalid("kernel size must be >= 1"));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("dilation must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        Ok(())
    }

    /// Output spatial size and leading pad for one axis.
    fn axis_geometry(&self, input: usize, axis: usize) -> Result<(usize, usize)> {
        let stride = if axis == 0 { self.stride.0 } else { self.stride.1 };
        let eff = if axis == 0 {
            self.effective_kernel().0
        } else {
            self.effective_kernel().1
        };
        match self.padding {
            Padding::Valid => {
                if input < eff {
                    return Err(Error::invalid(format!(
                        "input extent {} smaller than effective kernel {} under valid padding",
                        input, eff
                    )));
                }
                Ok(((input - eff) / stride + 1, 0))
            }
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + eff).saturating_sub(input);
                Ok((out, total / 2))
            }
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<(usize, usize, Vec<usize>)> {
        if input.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d expects a 4-axis input, got shape {:?}",
                input
            )));
        }
        if input[1] != self.in_channels {
            return Err(Error::shape(
                "conv2d input channels vs spec.in_channels",
                &[input[1]],
                &[self.in_channels],
            ));
        }
        let (oh, pad_h) = self.axis_geometry(input[2], 0)?;
        let (ow, pad_w) = self.axis_geometry(input[3], 1)?;
        Ok((pad_h, pad_w, vec![input[0], self.out_channels, oh, ow]))
    }
}

pub(crate) fn forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    spec.validate()?;
    let expected_w = [
        spec.out_channels,
        spec.in_channels,
        spec.kernel.0,
        spec.kernel.1,
    ];
    if weight.shape() != expected_w {
        return Err(Error::shape("conv2d weight", weight.shape(), &expected_w));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape("conv2d bias", b.shape(), &[spec.out_channels]));
        }
    }
    if !weight.is_finite() {
        return Err(Error::NonFinite("conv2d weights".into()));
    }
    let (pad_h, pad_w, out_shape) = spec.output_shape(input.shape())?;
    let (n, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (cout, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let d = spec.dilation;

    let x = input.data();
    let wd = weight.data();
    let mut out = vec![0.0f64; n * cout * oh * ow];

    let per_image = cout * oh * ow;
    let body = |ni: usize, chunk: &mut [f64]| {
        let x_img = &x[ni * cin * h * w..(ni + 1) * cin * h * w];
        for oc in 0..cout {
            let w_oc = &wd[oc * cin * kh * kw..(oc + 1) * cin * kh * kw];
            let b = bias.map(|t| t.data()[oc]).unwrap_or(0.0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for ic in 0..cin {
                        let x_ch = &x_img[ic * h * w..(ic + 1) * h * w];
                        let w_ch = &w_oc[ic * kh * kw..(ic + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (oy * sh + ky * d) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                            for kx in 0..kw {
                                let ix = (ox * sw + kx * d) as isize - pad_w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += row[ix as usize] * w_ch[ky * kw + kx];
                            }
                        }
                    }
                    chunk[oc * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
    };

    if runtime::deterministic() || n == 1 {
        for (ni, chunk) in out.chunks_mut(per_image).enumerate() {
            body(ni, chunk);
        }
    } else {
        out.par_chunks_mut(per_image)
            .enumerate()
            .for_each(|(ni, chunk)| body(ni, chunk));
    }

    Tensor::new(out_shape, out)
}

/// Gradients of the convolution wrt input, weight and bias.
pub(crate) fn backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    spec: &ConvSpec,
    has_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (pad_h, pad_w, out_shape) = spec
        .output_shape(input.shape())
        .expect("backward after successful forward");
    let (n, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (cout, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let d = spec.dilation;
    let x = input.data();
    let wd = weight.data();

    // dInput: partitioned by image, deterministic inner order.
    let mut d_input = vec![0.0f64; x.len()];
    let din_body = |ni: usize, chunk: &mut [f64]| {
        let g_img = &grad_out[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
        for oc in 0..cout {
            let w_oc = &wd[oc * cin * kh * kw..(oc + 1) * cin * kh * kw];
            let g_ch = &g_img[oc * oh * ow..(oc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = g_ch[oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..cin {
                        let w_ch = &w_oc[ic * kh * kw..(ic + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (oy * sh + ky * d) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx * d) as isize - pad_w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                chunk[ic * h * w + iy as usize * w + ix as usize] +=
                                    g * w_ch[ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    };
    if runtime::deterministic() || n == 1 {
        for (ni, chunk) in d_input.chunks_mut(cin * h * w).enumerate() {
            din_body(ni, chunk);
        }
    } else {
        d_input
            .par_chunks_mut(cin * h * w)
            .enumerate()
            .for_each(|(ni, chunk)| din_body(ni, chunk));
    }

    // dWeight: partitioned by output channel.
    let mut d_weight = vec![0.0f64; wd.len()];
    let dw_body = |oc: usize, chunk: &mut [f64]| {
        for ni in 0..n {
            let x_img = &x[ni * cin * h * w..(ni + 1) * cin * h * w];
            let g_ch = &grad_out[(ni * cout + oc) * oh * ow..(ni * cout + oc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = g_ch[oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..cin {
                        let x_ch = &x_img[ic * h * w..(ic + 1) * h * w];
                        for ky in 0..kh {
                            let iy = (oy * sh + ky * d) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx * d) as isize - pad_w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                chunk[ic * kh * kw + ky * kw + kx] +=
                                    g * x_ch[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    };
    if runtime::deterministic() || cout == 1 {
        for (oc, chunk) in d_weight.chunks_mut(cin * kh * kw).enumerate() {
            dw_body(oc, chunk);
        }
    } else {
        d_weight
            .par_chunks_mut(cin * kh * kw)
            .enumerate()
            .for_each(|(oc, chunk)| dw_body(oc, chunk));
    }

    let d_bias = if has_bias {
        let mut db = vec![0.0f64; cout];
        for ni in 0..n {
            for (oc, db_oc) in db.iter_mut().enumerate() {
                let g_ch = &grad_out[(ni * cout + oc) * oh * ow..(ni * cout + oc + 1) * oh * ow];
                for g in g_ch {
                    *db_oc += g;
                }
            }
        }
        Some(db)
    } else {
        None
    };

    (d_input, d_weight, d_bias)
}
