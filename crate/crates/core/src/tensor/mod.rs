//! Dense channels-first tensors with a recorded-tape reverse mode.
//!
//! A 4-D tensor has shape `[C, X, Y, Z]`. Storage is x-fastest: the linear
//! index of `(c, x, y, z)` is `((c * Z + z) * Y + y) * X + x`. Convolution
//! weights use `[C_out, C_in, kx, ky, kz]` with the same kernel-x-fastest
//! layout; transposed convolution weights use `[C_in, C_out, s, s, s]`.

pub mod conv;
pub mod optim;
pub mod tape;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use optim::Sgd;
pub use tape::{grad_eval, Gradients, ParamId, ParamStore, Tape, Var};

/// Floating point element type. Tests run in `f64`; training may use `f32`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` for row/column strided matrices.
    ///
    /// # Safety
    /// Slices must cover every index addressed by the given dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c[m×n] (+)= a[m×k] · b[k×n]`, with optional
/// transposition of either operand expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserted lengths cover all addressed elements for both layouts.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                count,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("tensor extents must be positive");
        let count = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Channel extent of a `[C, X, Y, Z]` tensor.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extents `[X, Y, Z]` of a 4-D tensor.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub(crate) fn require_4d(&self, what: &str) -> Result<()> {
        if self.shape.len() != 4 {
            return Err(Error::dim(format!(
                "{what} expects a [C, X, Y, Z] tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::dim(format!(
            "extents must be strictly positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Concatenates 4-D tensors along the channel axis, preserving input order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors"))?;
    first.require_4d("concat_channels")?;
    let spatial = first.spatial();
    let mut channels = 0;
    for p in parts {
        p.require_4d("concat_channels")?;
        if p.spatial() != spatial {
            return Err(Error::dim(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                p.spatial(),
                spatial
            )));
        }
        channels += p.channels();
    }
    let mut data = Vec::with_capacity(channels * spatial.iter().product::<usize>());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![channels, spatial[0], spatial[1], spatial[2]], data)
}

/// Channels `start..start + count` of a 4-D tensor.
pub fn slice_channels<T: Real>(t: &Tensor<T>, start: usize, count: usize) -> Result<Tensor<T>> {
    t.require_4d("slice_channels")?;
    if count == 0 || start + count > t.channels() {
        return Err(Error::dim(format!(
            "channel slice {start}..{} out of range for {} channels",
            start + count,
            t.channels()
        )));
    }
    let vox: usize = t.spatial().iter().product();
    let [x, y, z] = t.spatial();
    Tensor::new(
        vec![count, x, y, z],
        t.data()[start * vox..(start + count) * vox].to_vec(),
    )
}

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Per-voxel softmax over the channel axis, with max subtraction.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.require_4d("softmax_channels")?;
    let k = logits.channels();
    let vox: usize = logits.spatial().iter().product();
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for j in 0..vox {
        let mut max = src[j];
        for c in 1..k {
            max = max.max(src[c * vox + j]);
        }
        let mut total = T::zero();
        for c in 0..k {
            let e = (src[c * vox + j] - max).exp();
            out[c * vox + j] = e;
            total += e;
        }
        for c in 0..k {
            out[c * vox + j] = out[c * vox + j] / total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Per-voxel argmax over channels; ties resolve to the lowest channel.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    t.require_4d("argmax_channels")?;
    let k = t.channels();
    if k > u8::MAX as usize + 1 {
        return Err(Error::dim("too many channels for u8 labels"));
    }
    let vox: usize = t.spatial().iter().product();
    let src = t.data();
    Ok((0..vox)
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if src[c * vox + j] > src[best * vox + j] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_count_mismatch_and_zero_extent() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn concat_shape_and_order() {
        let a = Tensor::<f64>::full(&[3, 8, 8, 8], 1.0);
        let b = Tensor::<f64>::full(&[5, 8, 8, 8], 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[8, 8, 8, 8]);
        assert_eq!(slice_channels(&c, 0, 3).unwrap(), a);
        assert_eq!(slice_channels(&c, 3, 5).unwrap(), b);
    }

    #[test]
    fn concat_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 8, 8, 8]);
        let b = Tensor::<f64>::zeros(&[1, 4, 4, 4]);
        assert!(matches!(
            concat_channels(&[&a, &b]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn relu_values_and_idempotence() {
        let t = Tensor::<f64>::from_vec(vec![-1.0, 0.0, 2.0]);
        let r = relu(&t);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&r), r);
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let z = Tensor::<f64>::zeros(&[4, 2, 2, 2]);
        let p = softmax_channels(&z).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let logits =
            Tensor::<f64>::from_f64(&[3, 1, 1, 2], &[0.3, -1.0, 2.0, 0.5, -0.7, 4.0]).unwrap();
        let shifted = logits.map(|v| v + 123.0);
        let a = softmax_channels(&logits).unwrap();
        let b = softmax_channels(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(argmax_channels(&a).unwrap(), argmax_channels(&logits).unwrap());
    }
}
