//! im2col convolution kernels backed by `matrixmultiply::dgemm`.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let op = g.out_plane();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * op..(row + 1) * op];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *d = if jj < 0 || jj >= g.width as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `[C, H, W]`, accumulating.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let op = g.out_plane();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * op..(row + 1) * op];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let base = ii as usize * g.width;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && (jj as usize) < g.width {
                            plane[base + jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]`, with explicit strides for a and b.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strided extents were checked against the slice lengths above
    // (in debug builds) and every caller derives them from the same geometry
    // used to size the buffers.
    unsafe {
        matrixmultiply::dgemm(
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

pub(crate) fn forward(g: &ConvGeom, batch: usize, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (patch, op) = (g.patch(), g.out_plane());
    let mut out = vec![0.0; batch * g.filters * op];
    let mut cols = vec![0.0; patch * op];
    for n in 0..batch {
        let xn = &x[n * g.channels * g.in_plane()..(n + 1) * g.channels * g.in_plane()];
        im2col(g, xn, &mut cols);
        let yn = &mut out[n * g.filters * op..(n + 1) * g.filters * op];
        gemm(g.filters, patch, op, kernel, (patch, 1), &cols, (op, 1), 0.0, yn);
    }
    out
}

/// Returns `(d_input, d_kernel)`, each only when requested.
pub(crate) fn backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (patch, op) = (g.patch(), g.out_plane());
    let img = g.channels * g.in_plane();
    let mut dx = want_input.then(|| vec![0.0; batch * img]);
    let mut dk = want_kernel.then(|| vec![0.0; g.filters * patch]);
    let mut cols = vec![0.0; patch * op];
    let mut dcols = vec![0.0; patch * op];
    for n in 0..batch {
        let dyn_ = &dy[n * g.filters * op..(n + 1) * g.filters * op];
        if let Some(dk) = dk.as_mut() {
            im2col(g, &x[n * img..(n + 1) * img], &mut cols);
            // dK += dY . cols^T
            gemm(g.filters, op, patch, dyn_, (op, 1), &cols, (1, op), 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T . dY
            gemm(patch, g.filters, op, kernel, (1, patch), dyn_, (op, 1), 0.0, &mut dcols);
            col2im(g, &dcols, &mut dx[n * img..(n + 1) * img]);
        }
    }
    (dx, dk)
}
