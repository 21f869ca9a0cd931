//! Numeric kernels shared by forward and backward passes.

/// Row and column stride of a matrix view.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    pub fn transposed(self) -> Self {
        Layout {
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(self, rows: usize, cols: usize, len: usize) {
        if rows > 0 && cols > 0 {
            assert!(
                (rows - 1) * self.rs + (cols - 1) * self.cs < len,
                "matrix view out of bounds"
            );
        }
    }
}

/// `c = beta * c + a * b` over strided views; `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    la.check(m, k, a.len());
    lb.check(k, n, b.len());
    lc.check(m, n, c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * lc.rs + j * lc.cs] *= beta;
            }
        }
        return;
    }
    // SAFETY: `check` bounds every element the strides can reach.
    unsafe {
        if m < 8 && n > m {
            // Narrow outputs pack poorly; solve C^T = B^T A^T instead.
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                b.as_ptr(),
                lb.cs as isize,
                lb.rs as isize,
                a.as_ptr(),
                la.cs as isize,
                la.rs as isize,
                beta,
                c.as_mut_ptr(),
                lc.cs as isize,
                lc.rs as isize,
            );
        } else {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                la.rs as isize,
                la.cs as isize,
                b.as_ptr(),
                lb.rs as isize,
                lb.cs as isize,
                beta,
                c.as_mut_ptr(),
                lc.rs as isize,
                lc.cs as isize,
            );
        }
    }
}

/// `c = beta * c + op(a) * op(b)` on dense row-major buffers. The transpose
/// flags describe how `a` and `b` are laid out in memory.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let la = if a_trans {
        Layout::row_major(m).transposed()
    } else {
        Layout::row_major(k)
    };
    let lb = if b_trans {
        Layout::row_major(k).transposed()
    } else {
        Layout::row_major(n)
    };
    gemm_strided(m, k, n, a, la, b, lb, beta, c, Layout::row_major(n));
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Target size of one patch-matrix tile, in elements (fits in L2).
const TILE_ELEMS: usize = 32 * 1024;

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.ksize * self.ksize
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output-row ranges covering the image in cache-sized tiles.
    pub fn row_tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let per = (TILE_ELEMS / (self.col_rows() * self.out_w).max(1)).max(1);
        let out_h = self.out_h;
        (0..out_h)
            .step_by(per)
            .map(move |s| (s, (s + per).min(out_h)))
    }

    /// Column span `[lo, hi)` of output positions whose input column
    /// `ox * stride + k - pad` lies inside the image.
    fn valid_span(&self, k: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.padding.saturating_sub(k).div_ceil(s).min(self.out_w);
        let hi = if self.width + self.padding > k {
            ((self.width + self.padding - k - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds output rows `[oy0, oy1)` of one `C x H x W` image into a
/// `(C*K*K) x ((oy1-oy0)*Wo)` patch matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, (oy0, oy1): (usize, usize), cols: &mut [f64]) {
    let tn = (oy1 - oy0) * g.out_w;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = (c * g.ksize + ky) * g.ksize + kx;
                let dst = &mut cols[row * tn..(row + 1) * tn];
                let (lo, hi) = g.valid_span(kx);
                for oy in oy0..oy1 {
                    let d = &mut dst[(oy - oy0) * g.out_w..(oy - oy0 + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let first = lo * g.stride + kx - g.padding;
                    d[..lo].fill(0.0);
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[first + j * g.stride];
                        }
                    }
                    d[hi..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch tile back onto the image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, (oy0, oy1): (usize, usize), img: &mut [f64]) {
    let tn = (oy1 - oy0) * g.out_w;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = (c * g.ksize + ky) * g.ksize + kx;
                let src = &cols[row * tn..(row + 1) * tn];
                let (lo, hi) = g.valid_span(kx);
                if lo == hi {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let s = &src[(oy - oy0) * g.out_w + lo..(oy - oy0) * g.out_w + hi];
                    let first = lo * g.stride + kx - g.padding;
                    for (j, v) in s.iter().enumerate() {
                        dst[first + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// `out += conv(x, kernel)` for a batch of `n` images; `kernel` is
/// `o x (C*K*K)` row-major and `out` holds `n x o x Ho x Wo`.
pub(crate) fn conv_accumulate(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    kernel: &[f64],
    o: usize,
    out: &mut [f64],
    cols: &mut Vec<f64>,
) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let img = g.channels * g.height * g.width;
    for i in 0..n {
        let dst = &mut out[i * o * ncols..(i + 1) * o * ncols];
        for tile in g.row_tiles() {
            let tn = (tile.1 - tile.0) * g.out_w;
            cols.resize(rows * tn, 0.0);
            im2col(&x[i * img..(i + 1) * img], g, tile, cols);
            gemm_strided(
                o,
                rows,
                tn,
                kernel,
                Layout::row_major(rows),
                cols,
                Layout::row_major(tn),
                1.0,
                &mut dst[tile.0 * g.out_w..],
                Layout::row_major(ncols),
            );
        }
    }
}

impl ConvGeom {
    /// For stride 1 the input gradient is itself a convolution of the
    /// output gradient with the flipped, channel-swapped kernel. Returns
    /// that geometry when it applies. Few input channels make a poor GEMM
    /// shape for it, so callers may still prefer the scatter path.
    pub fn input_grad_geom(&self, out_channels: usize) -> Option<ConvGeom> {
        if self.stride != 1 || self.padding >= self.ksize {
            return None;
        }
        Some(ConvGeom {
            channels: out_channels,
            height: self.out_h,
            width: self.out_w,
            ksize: self.ksize,
            stride: 1,
            padding: self.ksize - 1 - self.padding,
            out_h: self.height,
            out_w: self.width,
        })
    }
}

/// `O x C x K x K` kernel to `C x O x K x K`, spatially reversed.
pub(crate) fn flip_kernel(k: &[f64], o: usize, c: usize, ks: usize) -> Vec<f64> {
    let kk = ks * ks;
    let mut out = vec![0.0; k.len()];
    for oc in 0..o {
        for ic in 0..c {
            let src = &k[(oc * c + ic) * kk..(oc * c + ic + 1) * kk];
            let dst = &mut out[(ic * o + oc) * kk..(ic * o + oc + 1) * kk];
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
    }
    out
}

/// Catmull-Rom cubic convolution kernel (a = -0.5).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four (source index, weight) taps per output sample of a 2x upsampling
/// along one axis, half-pixel centres, replicate edges.
pub(crate) fn upsample_taps(len: usize) -> Vec<[(usize, f64); 4]> {
    (0..2 * len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let mut taps = [(0usize, 0.0); 4];
            for (j, tap) in taps.iter_mut().enumerate() {
                let offset = j as isize - 1;
                let idx = (base + offset).clamp(0, len as isize - 1) as usize;
                *tap = (idx, cubic_weight(t - offset as f64));
            }
            taps
        })
        .collect()
}

/// Separable 2x upsampling of one plane. `tmp` holds `2H x W`.
pub(crate) fn upsample_plane(
    src: &[f64],
    h: usize,
    w: usize,
    rows: &[[(usize, f64); 4]],
    cols: &[[(usize, f64); 4]],
    tmp: &mut [f64],
    dst: &mut [f64],
) {
    for (oy, taps) in rows.iter().enumerate() {
        let out = &mut tmp[oy * w..(oy + 1) * w];
        out.fill(0.0);
        for &(iy, wt) in taps {
            for (o, s) in out.iter_mut().zip(&src[iy * w..(iy + 1) * w]) {
                *o += wt * s;
            }
        }
    }
    let w2 = 2 * w;
    for y in 0..2 * h {
        let row = &tmp[y * w..(y + 1) * w];
        let out = &mut dst[y * w2..(y + 1) * w2];
        for (ox, taps) in cols.iter().enumerate() {
            out[ox] = taps.iter().map(|&(ix, wt)| wt * row[ix]).sum();
        }
    }
}

/// Adjoint of [`upsample_plane`], accumulating into `grad_src`.
pub(crate) fn upsample_plane_adjoint(
    grad_dst: &[f64],
    h: usize,
    w: usize,
    rows: &[[(usize, f64); 4]],
    cols: &[[(usize, f64); 4]],
    tmp: &mut [f64],
    grad_src: &mut [f64],
) {
    let w2 = 2 * w;
    tmp.fill(0.0);
    for y in 0..2 * h {
        let g = &grad_dst[y * w2..(y + 1) * w2];
        let t = &mut tmp[y * w..(y + 1) * w];
        for (ox, taps) in cols.iter().enumerate() {
            for &(ix, wt) in taps {
                t[ix] += wt * g[ox];
            }
        }
    }
    for (oy, taps) in rows.iter().enumerate() {
        let t = &tmp[oy * w..(oy + 1) * w];
        for &(iy, wt) in taps {
            for (d, s) in grad_src[iy * w..(iy + 1) * w].iter_mut().zip(t) {
                *d += wt * s;
            }
        }
    }
}
