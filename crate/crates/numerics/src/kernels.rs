//! Raw slice kernels behind the tape operations.
//!
//! Every product here accumulates its reduction index in ascending order with
//! plain multiply/add, so results are bit-reproducible and agree exactly with a
//! naive nested-loop evaluation of the same sum.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        out_extent(self.height, self.width, self.kernel, self.stride, self.padding)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }
}

/// Output spatial size of a sliding window; `(0, 0)` when the window does not fit.
pub fn out_extent(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> (usize, usize) {
    let ph = h + 2 * padding.0;
    let pw = w + 2 * padding.1;
    if ph < kernel.0 || pw < kernel.1 || stride.0 == 0 || stride.1 == 0 {
        return (0, 0);
    }
    ((ph - kernel.0) / stride.0 + 1, (pw - kernel.1) / stride.1 + 1)
}

/// Unfolds one `[C, H, W]` image into a `[C·kh·kw, Ho·Wo]` column matrix.
pub fn im2col(img: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    let mut cols = vec![0.0; g.patch_len() * oh * ow];
    for c in 0..g.channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride.0 + ki) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for x in 0..ow {
                        let ix = (x * g.stride.1 + kj) as isize - g.padding.1 as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[y * ow + x] =
                            img[(c * g.height + iy as usize) * g.width + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    for c in 0..g.channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride.0 + ki) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for x in 0..ow {
                        let ix = (x * g.stride.1 + kj) as isize - g.padding.1 as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        img[(c * g.height + iy as usize) * g.width + ix as usize] +=
                            src[y * ow + x];
                    }
                }
            }
        }
    }
}
