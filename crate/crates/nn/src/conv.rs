//! im2col / col2im kernels for volumetric (depth, height, width) convolution.
//!
//! A 2-D convolution is the depth-1 special case, so a single code path
//! serves both the planar and the inflated spatio-temporal networks.

/// Stride and zero padding per axis, ordered (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn planar(stride: usize, padding: usize) -> Self {
        Self { stride: [1, stride, stride], padding: [0, padding, padding] }
    }

    pub fn volumetric(stride: usize, padding: usize, depth_padding: usize) -> Self {
        Self { stride: [1, stride, stride], padding: [depth_padding, padding, padding] }
    }

    pub fn output_extent(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < kernel[a] {
                return None;
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub(crate) fn is_pointwise(&self, kernel: [usize; 3]) -> bool {
        kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
}

impl ConvDims {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn positions(&self) -> usize {
        self.output.iter().product()
    }
}

/// Expands one sample `[C, D, H, W]` into `cols[(c, kd, kh, kw), (od, oh, ow)]`.
pub(crate) fn im2col(x: &[f64], dims: &ConvDims, geom: &ConvGeom, cols: &mut [f64]) {
    let [d_in, h_in, w_in] = dims.input;
    let [kd, kh, kw] = dims.kernel;
    let [d_out, h_out, w_out] = dims.output;
    let positions = dims.positions();
    let mut row = 0;
    for c in 0..dims.channels {
        let xc = &x[c * d_in * h_in * w_in..(c + 1) * d_in * h_in * w_in];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    let mut idx = 0;
                    for od in 0..d_out {
                        let id = (od * geom.stride[0] + a) as isize - geom.padding[0] as isize;
                        if id < 0 || id >= d_in as isize {
                            dst[idx..idx + h_out * w_out].fill(0.0);
                            idx += h_out * w_out;
                            continue;
                        }
                        let plane = &xc[id as usize * h_in * w_in..(id as usize + 1) * h_in * w_in];
                        for oh in 0..h_out {
                            let ih = (oh * geom.stride[1] + b) as isize - geom.padding[1] as isize;
                            if ih < 0 || ih >= h_in as isize {
                                dst[idx..idx + w_out].fill(0.0);
                                idx += w_out;
                                continue;
                            }
                            let line = &plane[ih as usize * w_in..(ih as usize + 1) * w_in];
                            for ow in 0..w_out {
                                let iw = (ow * geom.stride[2] + e) as isize
                                    - geom.padding[2] as isize;
                                dst[idx] = if iw < 0 || iw >= w_in as isize {
                                    0.0
                                } else {
                                    line[iw as usize]
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into one sample gradient.
pub(crate) fn col2im(cols: &[f64], dims: &ConvDims, geom: &ConvGeom, dx: &mut [f64]) {
    let [d_in, h_in, w_in] = dims.input;
    let [kd, kh, kw] = dims.kernel;
    let [d_out, h_out, w_out] = dims.output;
    let positions = dims.positions();
    let mut row = 0;
    for c in 0..dims.channels {
        let xc = &mut dx[c * d_in * h_in * w_in..(c + 1) * d_in * h_in * w_in];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * positions..(row + 1) * positions];
                    let mut idx = 0;
                    for od in 0..d_out {
                        let id = (od * geom.stride[0] + a) as isize - geom.padding[0] as isize;
                        if id < 0 || id >= d_in as isize {
                            idx += h_out * w_out;
                            continue;
                        }
                        let plane_off = id as usize * h_in * w_in;
                        for oh in 0..h_out {
                            let ih = (oh * geom.stride[1] + b) as isize - geom.padding[1] as isize;
                            if ih < 0 || ih >= h_in as isize {
                                idx += w_out;
                                continue;
                            }
                            let line_off = plane_off + ih as usize * w_in;
                            for ow in 0..w_out {
                                let iw = (ow * geom.stride[2] + e) as isize
                                    - geom.padding[2] as isize;
                                if iw >= 0 && iw < w_in as isize {
                                    xc[line_off + iw as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slice lengths cover every strided access computed from
    // (m, k, n) and the row/column strides chosen above.
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let dims = ConvDims {
            channels: 2,
            input: [3, 5, 4],
            kernel: [3, 3, 3],
            output: [3, 3, 2],
        };
        let geom = ConvGeom::volumetric(2, 1, 1);
        assert_eq!(geom.output_extent(dims.input, dims.kernel), Some(dims.output));
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..dims.rows() * dims.positions())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &dims, &geom, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &dims, &geom, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
