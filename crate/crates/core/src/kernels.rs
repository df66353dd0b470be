//! Raw numeric kernels over flat slices. No shape validation happens here;
//! callers in `graph` check extents before dispatching.

/// Geometry of a 2-D (optionally grouped) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.positions() * (self.c_in / self.groups) * self.kh * self.kw) as u64
    }
}

/// `c = a·b + beta·c` where `a` is `[m,k]` (or `[k,m]` when `ta`) and `b` is
/// `[k,n]` (or `[n,k]` when `tb`), all row-major and contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees every strided access stays
    // within the three slices, and `c` does not alias `a` or `b`.
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

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let seg = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let p = g.positions();
    let (cig, cog) = (g.c_in / g.groups, g.c_out / g.groups);
    let krows = cig * g.kh * g.kw;
    let mut out = vec![0.0; g.batch * g.c_out * p];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![0.0; g.col_rows() * p] };
    for n in 0..g.batch {
        let img = &input[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        let cols: &[f64] = if g.pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let dst = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        for gi in 0..g.groups {
            gemm(
                cog,
                krows,
                p,
                &weight[gi * cog * krows..],
                false,
                &cols[gi * krows * p..],
                false,
                1.0,
                &mut dst[gi * cog * p..(gi + 1) * cog * p],
            );
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.positions();
    let (cig, cog) = (g.c_in / g.groups, g.c_out / g.groups);
    let krows = cig * g.kh * g.kw;
    let in_plane = g.c_in * g.h * g.w;
    let mut d_input = vec![0.0; g.batch * in_plane];
    let mut d_weight = vec![0.0; weight.len()];
    let mut d_bias = vec![0.0; g.c_out];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![0.0; g.col_rows() * p] };
    let mut d_cols = vec![0.0; g.col_rows() * p];
    for n in 0..g.batch {
        let img = &input[n * in_plane..(n + 1) * in_plane];
        let dy = &d_out[n * g.c_out * p..(n + 1) * g.c_out * p];
        for (co, row) in dy.chunks(p).enumerate() {
            d_bias[co] += row.iter().sum::<f64>();
        }
        let cols: &[f64] = if g.pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        for gi in 0..g.groups {
            let dy_g = &dy[gi * cog * p..(gi + 1) * cog * p];
            gemm(
                cog,
                p,
                krows,
                dy_g,
                false,
                &cols[gi * krows * p..(gi + 1) * krows * p],
                true,
                1.0,
                &mut d_weight[gi * cog * krows..(gi + 1) * cog * krows],
            );
            gemm(
                krows,
                cog,
                p,
                &weight[gi * cog * krows..(gi + 1) * cog * krows],
                true,
                dy_g,
                false,
                0.0,
                &mut d_cols[gi * krows * p..(gi + 1) * krows * p],
            );
        }
        let dst = &mut d_input[n * in_plane..(n + 1) * in_plane];
        if g.pointwise() {
            dst.iter_mut().zip(&d_cols).for_each(|(d, s)| *d += s);
        } else {
            col2im_add(g, &d_cols, dst);
        }
    }
    (d_input, d_weight, d_bias)
}

/// Reorders axes: `out.shape[i] = shape[perm[i]]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let in_strides = crate::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if nd == 0 {
        out.extend_from_slice(data);
        return out;
    }
    let inner = out_shape[nd - 1];
    let inner_stride = src_stride[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let outer: usize = out_shape[..nd - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_stride).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
