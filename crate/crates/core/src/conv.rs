//! Cross-correlation kernels (im2col + GEMM) used by the graph's conv2d node.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c` with explicit strides for `a` and `b`; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents above index only within the provided slices.
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

fn im2col(geo: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let (k, s, p) = (geo.kernel, geo.stride, geo.padding as isize);
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (h, w) = (geo.height as isize, geo.width as isize);
    let ncols = oh * ow;
    for c in 0..geo.in_channels {
        let plane = &image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(geo: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let (k, s, p) = (geo.kernel, geo.stride, geo.padding as isize);
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (h, w) = (geo.height as isize, geo.width as isize);
    let ncols = oh * ow;
    for c in 0..geo.in_channels {
        let plane = &mut image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * geo.width;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(geo: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (rows, ncols) = (geo.col_rows(), geo.col_cols());
    let in_plane = geo.in_channels * geo.height * geo.width;
    let out_plane = geo.out_channels * ncols;
    let mut out = vec![0.0; geo.batch * out_plane];
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..geo.batch {
        im2col(geo, &input[n * in_plane..(n + 1) * in_plane], &mut cols);
        gemm(
            geo.out_channels,
            rows,
            ncols,
            weight,
            (rows as isize, 1),
            &cols,
            (ncols as isize, 1),
            0.0,
            &mut out[n * out_plane..(n + 1) * out_plane],
        );
    }
    out
}

/// Returns `(d_input, d_weight)`; either may be skipped.
pub(crate) fn backward(
    geo: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, ncols) = (geo.col_rows(), geo.col_cols());
    let in_plane = geo.in_channels * geo.height * geo.width;
    let out_plane = geo.out_channels * ncols;
    let mut d_input = want_input.then(|| vec![0.0; geo.batch * in_plane]);
    let mut d_weight = want_weight.then(|| vec![0.0; geo.out_channels * rows]);
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..geo.batch {
        let g = &d_out[n * out_plane..(n + 1) * out_plane];
        if let Some(dw) = d_weight.as_mut() {
            im2col(geo, &input[n * in_plane..(n + 1) * in_plane], &mut cols);
            // dW[O×CKK] += dOut[O×L] · colsᵀ[L×CKK]
            gemm(
                geo.out_channels,
                ncols,
                rows,
                g,
                (ncols as isize, 1),
                &cols,
                (1, ncols as isize),
                1.0,
                dw,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            // dcols[CKK×L] = Wᵀ[CKK×O] · dOut[O×L]
            gemm(
                rows,
                geo.out_channels,
                ncols,
                weight,
                (1, rows as isize),
                g,
                (ncols as isize, 1),
                0.0,
                &mut cols,
            );
            col2im_add(geo, &cols, &mut dx[n * in_plane..(n + 1) * in_plane]);
        }
    }
    (d_input, d_weight)
}
