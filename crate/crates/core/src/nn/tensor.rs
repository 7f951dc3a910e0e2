//! Dense row-major tensors and the primitive operations the network is
//! built from.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Element type of a tensor. `f32` is used for training, `f64` for
/// gradient verification.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    /// `c = a * b + beta * c` with arbitrary strides; `a` is `m x k`, `b`
    /// is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm(m: usize, k: usize, n: usize, la: usize, lb: usize, lc: usize, s: [usize; 6]) {
    let last = |r: usize, c: usize, rs: usize, cs: usize| {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * rs + (c - 1) * cs + 1
        }
    };
    assert!(last(m, k, s[0], s[1]) <= la, "gemm: a too short");
    assert!(last(k, n, s[2], s[3]) <= lb, "gemm: b too short");
    assert!(last(m, n, s[4], s[5]) <= lc, "gemm: c too short");
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                check_gemm(m, k, n, a.len(), b.len(), c.len(), [rsa, csa, rsb, csb, rsc, csc]);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the bounds of every operand were checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|v| T::from_f64(*v))).collect();
        Tensor::new(vec![rows.len(), w], data)
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

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Element at a 2-D index.
    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }
}

/// Output length of a sliding window.
pub fn conv_out(n: usize, k: usize, padding: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let padded = n + 2 * padding;
    if k == 0 || k > padded {
        return Err(Error::Shape(format!(
            "kernel {k} does not fit input {n} with padding {padding}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Single-channel 2-D cross-correlation with zero padding.
pub fn xcorr2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, padding: usize, stride: usize) -> Result<Tensor<T>> {
    let (&[h, w], &[kh, kw]) = (input.shape(), kernel.shape()) else {
        return Err(Error::Shape("xcorr2d expects 2-D input and kernel".into()));
    };
    let oh = conv_out(h, kh, padding, stride)?;
    let ow = conv_out(w, kw, padding, stride)?;
    let mut out = vec![T::zero(); oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = T::zero();
            for a in 0..kh {
                for b in 0..kw {
                    let (r, c) = (
                        (i * stride + a) as isize - padding as isize,
                        (j * stride + b) as isize - padding as isize,
                    );
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        acc = acc + input.at2(r as usize, c as usize) * kernel.at2(a, b);
                    }
                }
            }
            out[i * ow + j] = acc;
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// Unfolds a `c x h x w` image into a `(c*k*k) x (h*w)` matrix for a
/// stride-1 "same" convolution with an odd `k x k` kernel.
pub fn im2col_same<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for a in 0..k {
            for b in 0..k {
                let row = &mut cols[((ch * k + a) * k + b) * hw..][..hw];
                let dj = b as isize - p;
                let j_lo = (-dj).max(0) as usize;
                let j_hi = (w as isize - dj).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let r = i as isize + a as isize - p;
                    let out = &mut row[i * w..(i + 1) * w];
                    if r < 0 || r >= h as isize || j_lo >= j_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[r as usize * w..(r as usize + 1) * w];
                    out[..j_lo].fill(T::zero());
                    out[j_hi..].fill(T::zero());
                    let s0 = (j_lo as isize + dj) as usize;
                    out[j_lo..j_hi].copy_from_slice(&src[s0..s0 + (j_hi - j_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_same`]: accumulates columns back into an image.
pub fn col2im_same<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    x.fill(T::zero());
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for a in 0..k {
            for b in 0..k {
                let row = &cols[((ch * k + a) * k + b) * hw..][..hw];
                let dj = b as isize - p;
                let j_lo = (-dj).max(0) as usize;
                let j_hi = (w as isize - dj).min(w as isize).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                for i in 0..h {
                    let r = i as isize + a as isize - p;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    let s0 = (j_lo as isize + dj) as usize;
                    let dst = &mut plane[r as usize * w + s0..][..j_hi - j_lo];
                    for (d, s) in dst.iter_mut().zip(&row[i * w + j_lo..i * w + j_hi]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `n` planes of `h x w`; a trailing odd row
/// or column is dropped. Returns the pooled planes and, per output cell,
/// the flat in-plane index of the winning input (first maximum in scan
/// order).
pub fn maxpool2d<T: Scalar>(x: &[T], n: usize, h: usize, w: usize) -> Result<(Vec<T>, Vec<u32>)> {
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow);
    let mut arg = Vec::with_capacity(n * oh * ow);
    for p in 0..n {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = 2 * i * w + 2 * j;
                for idx in [
                    2 * i * w + 2 * j + 1,
                    (2 * i + 1) * w + 2 * j,
                    (2 * i + 1) * w + 2 * j + 1,
                ] {
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                out.push(plane[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((out, arg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Inverted dropout. The mask holds `0` for dropped elements and
/// `1/(1-p)` for survivors; at inference it is all ones.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, training: bool, rng: &mut impl Rng) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), vec![T::one(); x.len()]));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data,
        },
        mask,
    ))
}
