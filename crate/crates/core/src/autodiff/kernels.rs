//! Raw numeric kernels on flat slices. Shapes are validated by the caller.

/// `[m, k] x [k, n] -> [m, n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry shared by the three convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    /// Calls `f(x_index, k_index, y_index)` for every term of the
    /// cross-correlation sum. All three kernels are contractions of this
    /// one trilinear form.
    #[inline]
    fn for_each_term(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pad = self.pad as isize;
        for n in 0..self.n {
            for o in 0..self.o {
                for c in 0..self.c {
                    for p in 0..self.kh {
                        for q in 0..self.kw {
                            let k_idx = ((o * self.c + c) * self.kh + p) * self.kw + q;
                            for i in 0..oh {
                                let xi = i as isize + p as isize - pad;
                                if xi < 0 || xi >= self.h as isize {
                                    continue;
                                }
                                let x_row = ((n * self.c + c) * self.h + xi as usize) * self.w;
                                let y_row = ((n * self.o + o) * oh + i) * ow;
                                for j in 0..ow {
                                    let xj = j as isize + q as isize - pad;
                                    if xj < 0 || xj >= self.w as isize {
                                        continue;
                                    }
                                    f(x_row + xj as usize, k_idx, y_row + j);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(x: &[f64], k: &[f64], g: ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.n * g.o * g.out_h() * g.out_w()];
    g.for_each_term(|xi, ki, yi| y[yi] += x[xi] * k[ki]);
    y
}

pub(crate) fn conv2d_back_input(dy: &[f64], k: &[f64], g: ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    g.for_each_term(|xi, ki, yi| dx[xi] += dy[yi] * k[ki]);
    dx
}

pub(crate) fn conv2d_back_kernel(x: &[f64], dy: &[f64], g: ConvGeom) -> Vec<f64> {
    let mut dk = vec![0.0; g.o * g.c * g.kh * g.kw];
    g.for_each_term(|xi, ki, yi| dk[ki] += dy[yi] * x[xi]);
    dk
}

/// For every flat index of `big`, the flat index of `small`, where `small`
/// keeps the axes `keep` (in order) of `big` and drops the rest.
pub(crate) fn broadcast_index(big: &[usize], keep: &[usize]) -> Vec<usize> {
    let rank = big.len();
    let mut small_stride = vec![0usize; rank];
    let mut acc = 1;
    for &axis in keep.iter().rev() {
        small_stride[axis] = acc;
        acc *= big[axis];
    }
    let total: usize = big.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut small = 0usize;
    for _ in 0..total {
        out.push(small);
        // odometer increment
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            small += small_stride[axis];
            if idx[axis] < big[axis] {
                break;
            }
            small -= small_stride[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    out
}

/// Flat indices of the max element of each `size x size` window
/// (stride = size, floor semantics). Ties go to the first element in
/// row-major window order.
pub(crate) fn max_pool_table(x: &[f64], shape: &[usize], size: usize) -> (Vec<usize>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut table = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (i * size) * w + j * size;
                for p in 0..size {
                    for q in 0..size {
                        let idx = base + (i * size + p) * w + j * size + q;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                table.push(best);
            }
        }
    }
    (table, vec![n, c, oh, ow])
}
