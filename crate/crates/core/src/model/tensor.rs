use crate::error::{Error, Result};

/// Dense `N x C x H x W` tensor of `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape("tensor", [n, c, h, w], data.len()));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// All channels of sample `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.c * self.plane();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.c * self.plane();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn channel(&self, i: usize, c: usize) -> &[f32] {
        let p = self.plane();
        let off = (i * self.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn channel_mut(&mut self, i: usize, c: usize) -> &mut [f32] {
        let p = self.plane();
        let off = (i * self.c + c) * p;
        &mut self.data[off..off + p]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "at least one tensor", 0))?;
        let mut data = Vec::with_capacity(parts.len() * first.sample(0).len());
        for p in parts {
            if (p.c, p.h, p.w) != (first.c, first.h, first.w) {
                return Err(Error::shape("stack", first.shape(), p.shape()));
            }
            data.extend_from_slice(&p.data);
        }
        let n = parts.iter().map(|p| p.n).sum();
        Tensor::from_vec(n, first.c, first.h, first.w, data)
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
            return Err(Error::shape("concat", a.shape(), b.shape()));
        }
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        for i in 0..a.n {
            let s = out.sample_mut(i);
            let (left, right) = s.split_at_mut(a.c * a.plane());
            left.copy_from_slice(a.sample(i));
            right.copy_from_slice(b.sample(i));
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::concat_channels`] for gradients.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let mut a = Tensor::zeros(self.n, first, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - first, self.h, self.w);
        for i in 0..self.n {
            let s = self.sample(i);
            let cut = first * self.plane();
            a.sample_mut(i).copy_from_slice(&s[..cut]);
            b.sample_mut(i).copy_from_slice(&s[cut..]);
        }
        (a, b)
    }
}

/// `C = A * B + beta * C` with arbitrary strides on `A` and `B`; `C` is
/// row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: bounds of every accessed element are asserted above.
    unsafe {
        matrixmultiply::sgemm(
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
            n as isize,
            1,
        );
    }
}
