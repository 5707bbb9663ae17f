//! Raw numeric kernels shared by the graph ops. Everything here works on flat slices.

use crate::tensor::{numel, strides};

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and `op(b)` of
/// shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are asserted above and the strides describe exactly those buffers.
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

/// Shape of the result of broadcasting `a` against `b` (equal rank, unit dims stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast requires equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

/// For every flat index of `out_shape`, the flat index of the broadcast source with `in_shape`.
pub fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sum `grad` (shaped `from`) down to the broadcast source shape `to`.
pub fn reduce_to(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let map = broadcast_map(from, to);
    let mut out = vec![0.0; numel(to)];
    for (g, &i) in grad.iter().zip(&map) {
        out[i] += g;
    }
    out
}

/// Spatial geometry of one 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for i in 0..3 {
            let span = self.input[i] + 2 * self.pad[i];
            assert!(
                span >= self.kernel[i],
                "kernel {:?} larger than padded input {:?}",
                self.kernel,
                self.input
            );
            o[i] = (span - self.kernel[i]) / self.stride[i] + 1;
        }
        o
    }

    pub fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }
}

/// Unfold one sample `[cin, d, h, w]` into `[cin*kd*kh*kw, od*oh*ow]`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output();
    let p = od * oh * ow;
    debug_assert_eq!(cols.len(), g.rows() * p);
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            if zi < 0 || zi >= d as isize || yi < 0 || yi >= h as isize {
                                dst[q..q + ow].fill(0.0);
                                q += ow;
                                continue;
                            }
                            let base = (zi as usize * h + yi as usize) * w;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                dst[q] = if xi < 0 || xi >= w as isize {
                                    0.0
                                } else {
                                    xc[base + xi as usize]
                                };
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into a sample gradient.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output();
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..g.cin {
        let base_c = c * d * h * w;
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            if zi < 0 || zi >= d as isize || yi < 0 || yi >= h as isize {
                                q += ow;
                                continue;
                            }
                            let base = base_c + (zi as usize * h + yi as usize) * w;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                if xi >= 0 && xi < w as isize {
                                    dx[base + xi as usize] += src[q];
                                }
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Bin edges used by adaptive pooling: `[floor(i*n/o), ceil((i+1)*n/o))`.
pub fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end.max(start + 1).min(input))
        })
        .collect()
}

/// Permute the axes of a row-major buffer.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    assert_eq!(shape.len(), perm.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
