//! Periodic 2D cross-correlation kernels.
//!
//! Layout: input `[B, C_in, H, W]`, kernel `[C_out, C_in, k, k]`, bias
//! `[C_out]`, output `[B, C_out, H, W]`, with
//!
//! ```text
//! out[b, o, y, x] = bias[o]
//!     + sum_{i, ky, kx} kernel[o, i, ky, kx] * in[b, i, (y + ky - r) mod H, (x + kx - r) mod W]
//! ```
//!
//! where `r = k / 2`. Kernels are not flipped (cross-correlation). The
//! implementation lowers to a column matrix of shape `[C_in k k, B H W]` so
//! that every inner loop runs over the whole batch.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.batch * self.plane()
    }

    /// `table[d][i] = (i + d - r) mod n` for the kernel offsets `d`.
    fn shift_table(&self, n: usize) -> Vec<Vec<usize>> {
        let r = (self.k / 2) as isize;
        (0..self.k)
            .map(|d| {
                (0..n)
                    .map(|i| (i as isize + d as isize - r).rem_euclid(n as isize) as usize)
                    .collect()
            })
            .collect()
    }
}

fn im2col(input: &[f64], d: &ConvDims) -> Vec<f64> {
    let (h, w, k) = (d.h, d.w, d.k);
    let plane = d.plane();
    let cl = d.cols_len();
    let ys = d.shift_table(h);
    let xs = d.shift_table(w);
    let mut cols = vec![0.0; d.cols_rows() * cl];
    for ci in 0..d.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * cl..(row + 1) * cl];
                for b in 0..d.batch {
                    let src = &input[(b * d.c_in + ci) * plane..(b * d.c_in + ci + 1) * plane];
                    let dst = &mut dst[b * plane..(b + 1) * plane];
                    for y in 0..h {
                        let src_row = &src[ys[ky][y] * w..(ys[ky][y] + 1) * w];
                        for (x, out) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                            *out = src_row[xs[kx][x]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], d: &ConvDims, grad_in: &mut [f64]) {
    let (h, w, k) = (d.h, d.w, d.k);
    let plane = d.plane();
    let cl = d.cols_len();
    let ys = d.shift_table(h);
    let xs = d.shift_table(w);
    for ci in 0..d.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * cl..(row + 1) * cl];
                for b in 0..d.batch {
                    let dst = &mut grad_in[(b * d.c_in + ci) * plane..(b * d.c_in + ci + 1) * plane];
                    let src = &src[b * plane..(b + 1) * plane];
                    for y in 0..h {
                        let dst_row = ys[ky][y] * w;
                        for x in 0..w {
                            dst[dst_row + xs[kx][x]] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `[B, C, P]` -> `[C, B P]`
fn to_channel_major(x: &[f64], batch: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            out[ch * batch * plane + b * plane..ch * batch * plane + (b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B P]` -> `[B, C, P]`
fn to_batch_major(x: &[f64], batch: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for b in 0..batch {
            let src = &x[ch * batch * plane + b * plane..ch * batch * plane + (b + 1) * plane];
            out[(b * c + ch) * plane..(b * c + ch + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn forward(input: &[f64], kernel: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let cols = im2col(input, d);
    let cl = d.cols_len();
    let rows = d.cols_rows();
    let mut out_cm = vec![0.0; d.c_out * cl];
    for co in 0..d.c_out {
        let out = &mut out_cm[co * cl..(co + 1) * cl];
        if let Some(b) = bias {
            out.fill(b[co]);
        }
        let wrow = &kernel[co * rows..(co + 1) * rows];
        for (j, &wj) in wrow.iter().enumerate() {
            if wj != 0.0 {
                axpy(out, wj, &cols[j * cl..(j + 1) * cl]);
            }
        }
    }
    to_batch_major(&out_cm, d.batch, d.c_out, d.plane())
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    want: (bool, bool, bool),
) -> ConvGrads {
    let cl = d.cols_len();
    let rows = d.cols_rows();
    let g_cm = to_channel_major(grad_out, d.batch, d.c_out, d.plane());
    let bias = want.2.then(|| (0..d.c_out).map(|co| g_cm[co * cl..(co + 1) * cl].iter().sum()).collect());
    let mut kernel_grad = None;
    if want.1 {
        let cols = im2col(input, d);
        let mut gk = vec![0.0; d.c_out * rows];
        for co in 0..d.c_out {
            let g = &g_cm[co * cl..(co + 1) * cl];
            for j in 0..rows {
                gk[co * rows + j] = dot(g, &cols[j * cl..(j + 1) * cl]);
            }
        }
        kernel_grad = Some(gk);
    }
    let mut input_grad = None;
    if want.0 {
        let mut gcols = vec![0.0; rows * cl];
        for j in 0..rows {
            let dst = &mut gcols[j * cl..(j + 1) * cl];
            for co in 0..d.c_out {
                let wj = kernel[co * rows + j];
                if wj != 0.0 {
                    axpy(dst, wj, &g_cm[co * cl..(co + 1) * cl]);
                }
            }
        }
        let mut gi = vec![0.0; input.len()];
        col2im_add(&gcols, d, &mut gi);
        input_grad = Some(gi);
    }
    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias,
    }
}
