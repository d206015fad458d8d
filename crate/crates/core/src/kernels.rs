//! Raw numeric kernels shared by the tape and the plain array helpers.

/// `c = beta * c + op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `ta` / `tb` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly the row-major layouts of those slices.
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

/// Geometry of a 2-D cross-correlation over a batch of images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output extent `floor((n + 2p - l) / s) + 1`, or `None` when the kernel
/// does not fit in the padded input.
pub fn conv_out_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        conv_out_extent(self.height, self.kernel, self.stride, self.padding).unwrap()
    }

    pub fn out_width(&self) -> usize {
        conv_out_extent(self.width, self.kernel, self.stride, self.padding).unwrap()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Multiplications performed by the forward pass.
    pub fn multiplications(&self) -> u64 {
        (self.batch * self.out_channels * self.patch_len() * self.out_pixels()) as u64
    }

    /// Output indices `lo..hi` along one axis whose input coordinate
    /// `o·stride + k − padding` lies inside `0..extent`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.padding.saturating_sub(k).div_ceil(s).min(out);
        let hi = (extent + self.padding).saturating_sub(k).div_ceil(s).min(out);
        (lo, hi.max(lo))
    }

    /// Unfolds the batch into a `[C·l·l, N·Ho·Wo]` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let cols = self.batch * ho * wo;
        let mut out = vec![0.0; self.patch_len() * cols];
        let (l, s, hw) = (self.kernel, self.stride, self.height * self.width);
        for c in 0..self.in_channels {
            for ky in 0..l {
                let (y0, y1) = self.valid_range(ky, self.height, ho);
                for kx in 0..l {
                    let (x0, x1) = self.valid_range(kx, self.width, wo);
                    let row = (c * l + ky) * l + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for n in 0..self.batch {
                        let img = &x[(n * self.in_channels + c) * hw..][..hw];
                        for oy in y0..y1 {
                            let iy = oy * s + ky - self.padding;
                            let src = &img[iy * self.width..][..self.width];
                            let d = &mut dst[(n * ho + oy) * wo..][x0..x1];
                            let start = x0 * s + kx - self.padding;
                            for (j, v) in d.iter_mut().enumerate() {
                                *v = src[start + j * s];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, cols_data: &[f64], dx: &mut [f64]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let cols = self.batch * ho * wo;
        let (l, s, hw) = (self.kernel, self.stride, self.height * self.width);
        for c in 0..self.in_channels {
            for ky in 0..l {
                let (y0, y1) = self.valid_range(ky, self.height, ho);
                for kx in 0..l {
                    let (x0, x1) = self.valid_range(kx, self.width, wo);
                    let row = (c * l + ky) * l + kx;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for n in 0..self.batch {
                        let img = &mut dx[(n * self.in_channels + c) * hw..][..hw];
                        for oy in y0..y1 {
                            let iy = oy * s + ky - self.padding;
                            let d = &mut img[iy * self.width..][..self.width];
                            let g = &src[(n * ho + oy) * wo..][x0..x1];
                            let start = x0 * s + kx - self.padding;
                            for (j, v) in g.iter().enumerate() {
                                d[start + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Images per chunk so that one patch matrix stays around 256 KiB.
    fn chunk_images(&self) -> usize {
        const TARGET: usize = 32 * 1024;
        (TARGET / (self.patch_len() * self.out_pixels()).max(1)).clamp(1, self.batch.max(1))
    }

    fn chunk(&self, images: usize) -> Self {
        Self { batch: images, ..*self }
    }

    /// Forward cross-correlation; returns `[N, O, Ho, Wo]` data.
    pub fn forward(&self, x: &[f64], kernels: &[f64]) -> Vec<f64> {
        let (p, o, k) = (self.out_pixels(), self.out_channels, self.patch_len());
        let img = self.in_channels * self.height * self.width;
        let mut out = vec![0.0; self.batch * o * p];
        let mut tmp = Vec::new();
        let step = self.chunk_images();
        for n0 in (0..self.batch).step_by(step) {
            let nb = step.min(self.batch - n0);
            let sub = self.chunk(nb);
            let cols = sub.im2col(&x[n0 * img..(n0 + nb) * img]);
            tmp.resize(o * nb * p, 0.0);
            gemm(o, k, nb * p, kernels, false, &cols, false, &mut tmp, 0.0);
            // [O, nb, P] -> [nb, O, P]
            for oc in 0..o {
                for n in 0..nb {
                    out[((n0 + n) * o + oc) * p..][..p].copy_from_slice(&tmp[(oc * nb + n) * p..][..p]);
                }
            }
        }
        out
    }

    /// Gradients for an upstream gradient laid out like the output. Each
    /// side is computed only when requested.
    pub fn backward(
        &self,
        x: &[f64],
        kernels: &[f64],
        grad_out: &[f64],
        want_dx: bool,
        want_dk: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (p, o, k) = (self.out_pixels(), self.out_channels, self.patch_len());
        let img = self.in_channels * self.height * self.width;
        let mut dk = want_dk.then(|| vec![0.0; o * k]);
        let mut dx = want_dx.then(|| vec![0.0; x.len()]);
        let mut g = Vec::new();
        let mut dcols = Vec::new();
        let step = self.chunk_images();
        for n0 in (0..self.batch).step_by(step) {
            let nb = step.min(self.batch - n0);
            let sub = self.chunk(nb);
            g.resize(o * nb * p, 0.0);
            for n in 0..nb {
                for oc in 0..o {
                    g[(oc * nb + n) * p..][..p].copy_from_slice(&grad_out[((n0 + n) * o + oc) * p..][..p]);
                }
            }
            if let Some(dk) = dk.as_mut() {
                let cols = sub.im2col(&x[n0 * img..(n0 + nb) * img]);
                gemm(o, nb * p, k, &g, false, &cols, true, dk, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                dcols.resize(k * nb * p, 0.0);
                gemm(k, o, nb * p, kernels, true, &g, false, &mut dcols, 0.0);
                sub.col2im(&dcols, &mut dx[n0 * img..(n0 + nb) * img]);
            }
        }
        (dx, dk)
    }
}
