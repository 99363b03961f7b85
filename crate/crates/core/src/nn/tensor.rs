//! Dense f64 tensor in NCHW layout. Dense layers treat the trailing three
//! axes as one flattened feature axis.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            data: vec![0.0; n * c * h * w],
            n,
            c,
            h,
            w,
        }
    }

    pub fn from_vec(data: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data/shape mismatch");
        Tensor { data, n, c, h, w }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    /// Features per sample: c*h*w.
    pub fn features(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        self.data[((n * self.c + c) * self.h + h) * self.w + w]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        &mut self.data[((n * self.c + c) * self.h + h) * self.w + w]
    }

    /// One sample's features as a contiguous slice.
    pub fn sample(&self, n: usize) -> &[f64] {
        let f = self.features();
        &self.data[n * f..(n + 1) * f]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let f = self.features();
        &mut self.data[n * f..(n + 1) * f]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshaped(mut self, n: usize, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(self.data.len(), n * c * h * w, "reshape changes volume");
        self.n = n;
        self.c = c;
        self.h = h;
        self.w = w;
        self
    }
}
