//! 3-D convolution kernels (im2col + gemm) and their adjoints.

use super::{matmul, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        input.require_4d("conv3d input")?;
        let ws = weight.shape();
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::dim(format!(
                "conv3d weight must be [C_out, C_in, k, k, k], got {ws:?}"
            )));
        }
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        if cin != input.channels() {
            return Err(Error::dim(format!(
                "conv3d weight expects {cin} input channels, input has {}",
                input.channels()
            )));
        }
        if bias.len() != cout {
            return Err(Error::dim(format!(
                "conv3d bias has {} entries for {cout} output channels",
                bias.len()
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv3d stride must be at least 1"));
        }
        let inp = input.spatial();
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = inp[axis] + 2 * pad;
            if padded < k {
                return Err(Error::dim(format!(
                    "padded extent {padded} smaller than kernel {k}"
                )));
            }
            out[axis] = (padded - k) / stride + 1;
        }
        Ok(Self {
            cin,
            cout,
            k,
            stride,
            pad,
            inp,
            out,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn out_voxels(&self) -> usize {
        self.out.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output indices `[lo, hi)` along one axis whose tap `kk` lands inside the input.
    fn valid(&self, kk: usize, extent_in: usize, extent_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kk >= self.pad {
            0
        } else {
            (self.pad - kk).div_ceil(s)
        };
        let hi = if extent_in + self.pad <= kk {
            0
        } else {
            (extent_in + self.pad - kk).div_ceil(s).min(extent_out)
        };
        (lo.min(extent_out), hi.max(lo.min(extent_out)))
    }
}

/// Visits every (column row, output line, input line) triple of the im2col
/// matrix. `f(dst_offset, src_offset, len, contiguous)` is called for each
/// run of valid taps; invalid taps are reported with `src_offset = None`.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, Option<usize>, usize, usize)) {
    let [xi, yi, zi] = g.inp;
    let [xo, yo, zo] = g.out;
    let p = xo * yo * zo;
    let vin = xi * yi * zi;
    let k = g.k;
    for ci in 0..g.cin {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let (x0, x1) = g.valid(kx, xi, xo);
                    for oz in 0..zo {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        for oy in 0..yo {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let dst = row * p + (oz * yo + oy) * xo;
                            if iz < 0 || iz >= zi as isize || iy < 0 || iy >= yi as isize {
                                f(dst, None, xo, 0);
                                continue;
                            }
                            if x0 > 0 {
                                f(dst, None, x0, 0);
                            }
                            if x1 > x0 {
                                let base = ci * vin + (iz as usize * yi + iy as usize) * xi;
                                let ix0 = x0 * g.stride + kx - g.pad;
                                f(dst + x0, Some(base + ix0), x1 - x0, g.stride);
                            }
                            if x1 < xo {
                                f(dst + x1, None, xo - x1, 0);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(src: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.out_voxels()];
    for_each_tap(g, |dst, src_off, len, step| {
        if let Some(s0) = src_off {
            let line = &mut cols[dst..dst + len];
            if step == 1 {
                line.copy_from_slice(&src[s0..s0 + len]);
            } else {
                for (i, v) in line.iter_mut().enumerate() {
                    *v = src[s0 + i * step];
                }
            }
        }
    });
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut img = vec![T::zero(); g.cin * g.inp.iter().product::<usize>()];
    for_each_tap(g, |dst, src_off, len, step| {
        if let Some(s0) = src_off {
            let line = &cols[dst..dst + len];
            for (i, &v) in line.iter().enumerate() {
                img[s0 + i * step] += v;
            }
        }
    });
    img
}

/// 3-D cross-correlation with zero padding.
///
/// Output extent per axis is `(X + 2·pad − k) / stride + 1` (floor).
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, bias, stride, pad)?;
    let p = g.out_voxels();
    let mut out = vec![T::zero(); g.cout * p];
    if g.pointwise() {
        matmul(g.cout, g.rows(), p, weight.data(), false, input.data(), false, &mut out, false);
    } else {
        let cols = im2col(input.data(), &g);
        matmul(g.cout, g.rows(), p, weight.data(), false, &cols, false, &mut out, false);
    }
    for (co, chunk) in out.chunks_mut(p).enumerate() {
        let b = bias.data()[co];
        for v in chunk {
            *v += b;
        }
    }
    Tensor::new(vec![g.cout, g.out[0], g.out[1], g.out[2]], out)
}

/// Adjoint of [`conv3d`]: returns `(d_input, d_weight, d_bias)`.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, weight, bias, stride, pad)?;
    let p = g.out_voxels();
    let rows = g.rows();
    if grad_out.len() != g.cout * p {
        return Err(Error::dim("conv3d gradient does not match output shape"));
    }
    let go = grad_out.data();
    let d_bias: Vec<T> = go.chunks(p).map(|c| c.iter().fold(T::zero(), |a, &v| a + v)).collect();

    let mut d_weight = vec![T::zero(); g.cout * rows];
    let mut d_cols = vec![T::zero(); rows * p];
    if g.pointwise() {
        matmul(g.cout, p, rows, go, false, input.data(), true, &mut d_weight, false);
        matmul(rows, g.cout, p, weight.data(), true, go, false, &mut d_cols, false);
        let d_input = Tensor::new(input.shape().to_vec(), d_cols)?;
        return Ok((
            d_input,
            Tensor::new(weight.shape().to_vec(), d_weight)?,
            Tensor::new(vec![g.cout], d_bias)?,
        ));
    }
    let cols = im2col(input.data(), &g);
    matmul(g.cout, p, rows, go, false, &cols, true, &mut d_weight, false);
    drop(cols);
    matmul(rows, g.cout, p, weight.data(), true, go, false, &mut d_cols, false);
    let d_input = col2im(&d_cols, &g);
    Ok((
        Tensor::new(input.shape().to_vec(), d_input)?,
        Tensor::new(weight.shape().to_vec(), d_weight)?,
        Tensor::new(vec![g.cout], d_bias)?,
    ))
}

#[derive(Clone, Copy, Debug)]
struct UpGeom {
    cin: usize,
    cout: usize,
    s: usize,
    inp: [usize; 3],
}

impl UpGeom {
    fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
    ) -> Result<Self> {
        input.require_4d("conv3d_transposed input")?;
        if stride == 0 {
            return Err(Error::dim("transposed convolution stride must be at least 1"));
        }
        let ws = weight.shape();
        if ws.len() != 5 || ws[2] != stride || ws[3] != stride || ws[4] != stride {
            return Err(Error::dim(format!(
                "transposed weight must be [C_in, C_out, {stride}, {stride}, {stride}], got {ws:?}"
            )));
        }
        if ws[0] != input.channels() {
            return Err(Error::dim(format!(
                "transposed weight expects {} input channels, input has {}",
                ws[0],
                input.channels()
            )));
        }
        if bias.len() != ws[1] {
            return Err(Error::dim("transposed bias length must equal C_out"));
        }
        Ok(Self {
            cin: ws[0],
            cout: ws[1],
            s: stride,
            inp: input.spatial(),
        })
    }

    fn taps(&self) -> usize {
        self.s * self.s * self.s
    }

    fn out(&self) -> [usize; 3] {
        [self.inp[0] * self.s, self.inp[1] * self.s, self.inp[2] * self.s]
    }

    /// Calls `f(row_index, column_index, output_offset)` for every (tap, input voxel).
    fn scatter_map(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [xi, yi, zi] = self.inp;
        let [xo, yo, _] = self.out();
        let s = self.s;
        let p = xi * yi * zi;
        let vout = p * self.taps();
        for co in 0..self.cout {
            for kz in 0..s {
                for ky in 0..s {
                    for kx in 0..s {
                        let row = co * self.taps() + (kz * s + ky) * s + kx;
                        for z in 0..zi {
                            for y in 0..yi {
                                let col0 = (z * yi + y) * xi;
                                let out0 = co * vout + ((z * s + kz) * yo + y * s + ky) * xo + kx;
                                for x in 0..xi {
                                    f(row, col0 + x, out0 + x * s);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping transposed convolution (kernel extent equals stride);
/// every spatial extent is multiplied by `stride`.
pub fn conv3d_transposed<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = UpGeom::new(input, weight, bias, stride)?;
    let p: usize = g.inp.iter().product();
    let m = g.cout * g.taps();
    let mut cols = vec![T::zero(); m * p];
    matmul(m, g.cin, p, weight.data(), true, input.data(), false, &mut cols, false);
    let out_shape = g.out();
    let mut out = vec![T::zero(); g.cout * out_shape.iter().product::<usize>()];
    g.scatter_map(|row, col, o| out[o] = cols[row * p + col]);
    let vout: usize = out_shape.iter().product();
    for (co, chunk) in out.chunks_mut(vout).enumerate() {
        let b = bias.data()[co];
        for v in chunk {
            *v += b;
        }
    }
    Tensor::new(vec![g.cout, out_shape[0], out_shape[1], out_shape[2]], out)
}

/// Adjoint of [`conv3d_transposed`]: returns `(d_input, d_weight, d_bias)`.
pub fn conv3d_transposed_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = UpGeom::new(input, weight, bias, stride)?;
    let p: usize = g.inp.iter().product();
    let m = g.cout * g.taps();
    if grad_out.len() != m * p {
        return Err(Error::dim("transposed gradient does not match output shape"));
    }
    let go = grad_out.data();
    let mut gathered = vec![T::zero(); m * p];
    g.scatter_map(|row, col, o| gathered[row * p + col] = go[o]);

    let mut d_input = vec![T::zero(); g.cin * p];
    matmul(g.cin, m, p, weight.data(), false, &gathered, false, &mut d_input, false);
    let mut d_weight = vec![T::zero(); g.cin * m];
    matmul(g.cin, p, m, input.data(), false, &gathered, true, &mut d_weight, false);
    let vout = p * g.taps();
    let d_bias: Vec<T> = go
        .chunks(vout)
        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    Ok((
        Tensor::new(input.shape().to_vec(), d_input)?,
        Tensor::new(weight.shape().to_vec(), d_weight)?,
        Tensor::new(vec![g.cout], d_bias)?,
    ))
}
