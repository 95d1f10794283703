//! 2-D convolution kernels (im2col + GEMM) and their tape bindings.

use ndarray::{Array2, Array4, ArrayD, ArrayView4, Ix1, Ix4, IxDyn};

use crate::graph::{Tape, Var};

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn unit(padding: usize) -> Self {
        ConvSpec { stride: 1, padding, dilation: 1 }
    }

    /// Same-padding for an odd kernel at stride 1.
    pub fn same(kernel: usize) -> Self {
        debug_assert!(kernel % 2 == 1);
        ConvSpec::unit(kernel / 2)
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> usize {
        let eff = (kernel - 1) * self.dilation + 1;
        (input + 2 * self.padding).saturating_sub(eff) / self.stride + 1
    }
}

/// Lays out padded receptive fields as columns: `(C*K*K, OH*OW)`.
fn im2col(x: &ArrayView4<f64>, b: usize, k: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Array2<f64> {
    let (_, c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    let ColsGeom { stride, padding, dilation } =
        ColsGeom { stride: spec.stride, padding: spec.padding, dilation: spec.dilation };
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let mut row_view = cols.row_mut(row);
                let row_slice = row_view.as_slice_mut().unwrap();
                for oy in 0..oh {
                    let iy = (oy * stride + kh * dilation) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    let base = oy * ow;
                    if stride == 1 {
                        // contiguous copy of the valid run
                        let off = kw * dilation as usize;
                        let (ox0, ix0) = if off >= padding {
                            (0usize, off - padding)
                        } else {
                            (padding - off, 0usize)
                        };
                        if ix0 >= w {
                            continue;
                        }
                        let run = (w - ix0).min(ow - ox0);
                        let src = x.slice(ndarray::s![b, ci, iy, ix0..ix0 + run]);
                        let src = src.as_slice().unwrap();
                        row_slice[base + ox0..base + ox0 + run].copy_from_slice(src);
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kw * dilation) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                row_slice[base + ox] = x[[b, ci, iy, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

struct ColsGeom {
    stride: usize,
    padding: usize,
    dilation: usize,
}

/// Scatters column gradients back onto the padded input (transpose of im2col).
fn col2im_accumulate(
    dcols: &Array2<f64>,
    dx: &mut Array4<f64>,
    b: usize,
    k: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) {
    let (_, c, h, w) = dx.dim();
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let row_view = dcols.row(row);
                let row_slice = row_view.as_slice().unwrap();
                for oy in 0..oh {
                    let iy = (oy * spec.stride + kh * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix =
                            (ox * spec.stride + kw * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[[b, ci, iy, ix as usize]] += row_slice[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain forward convolution. `w` is `(O, C, K, K)`, bias is `(O,)`.
pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Array4<f64> {
    let (bn, c, h, wd) = x.dim();
    let (o, wc, k, k2) = w.dim();
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(c, wc, "input channels {c} do not match weight channels {wc}");
    let oh = spec.out_extent(h, k);
    let ow = spec.out_extent(wd, k);
    let w_mat = w.to_shape((o, wc * k * k)).unwrap();
    let mut y = Array4::<f64>::zeros((bn, o, oh, ow));
    for bi in 0..bn {
        let cols = im2col(x, bi, k, spec, oh, ow);
        let prod = w_mat.dot(&cols); // (O, OH*OW)
        let mut yb = y.index_axis_mut(ndarray::Axis(0), bi);
        for (oi, prow) in prod.outer_iter().enumerate() {
            let add = bias.map_or(0.0, |b| b[oi]);
            let mut plane = yb.index_axis_mut(ndarray::Axis(0), oi);
            let dst = plane.as_slice_mut().unwrap();
            for (d, &s) in dst.iter_mut().zip(prow.iter()) {
                *d = s + add;
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    dy: &ArrayView4<f64>,
    spec: &ConvSpec,
    with_bias: bool,
) -> (Array4<f64>, Array4<f64>, Option<Vec<f64>>) {
    let (bn, c, h, wd) = x.dim();
    let (o, _, k, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let w_mat = w.to_shape((o, c * k * k)).unwrap();
    let mut dx = Array4::<f64>::zeros((bn, c, h, wd));
    let mut dw_mat = Array2::<f64>::zeros((o, c * k * k));
    let mut db = if with_bias { Some(vec![0.0; o]) } else { None };
    for bi in 0..bn {
        let cols = im2col(x, bi, k, spec, oh, ow);
        let dy_b = dy.slice(ndarray::s![bi, .., .., ..]);
        let dy_mat = dy_b.to_shape((o, oh * ow)).unwrap();
        dw_mat = dw_mat + dy_mat.dot(&cols.t());
        let dcols = w_mat.t().dot(&dy_mat);
        col2im_accumulate(&dcols, &mut dx, bi, k, spec, oh, ow);
        if let Some(db) = db.as_mut() {
            for (oi, row) in dy_mat.outer_iter().enumerate() {
                db[oi] += row.sum();
            }
        }
    }
    let dw = dw_mat.into_shape_with_order((o, c, k, k)).unwrap();
    (dx, dw, db)
}

impl Tape {
    /// Records a convolution of `x` with weight `w` and optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bias_slice = bias.map(|b| {
            self.value(b)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_vec()
        });
        let y = conv2d_forward(&xv, &wv, bias_slice.as_deref(), &spec);
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let with_bias = bias.is_some();
        self.push(
            y.into_dyn(),
            parents,
            Some(Box::new(move |g, pv, _| {
                let xv = pv[0].view().into_dimensionality::<Ix4>().unwrap();
                let wv = pv[1].view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw, db) = conv2d_backward(&xv, &wv, &gv, &spec, with_bias);
                let mut out = vec![dx.into_dyn(), dw.into_dyn()];
                if let Some(db) = db {
                    out.push(ArrayD::from_shape_vec(IxDyn(&[db.len()]), db).unwrap());
                }
                out
            })),
            None,
        )
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;
    use ndarray::Array4;

    /// Direct seven-loop convolution used as the independent oracle.
    pub(crate) fn conv_oracle(
        x: &Array4<f64>,
        w: &Array4<f64>,
        bias: Option<&[f64]>,
        spec: &ConvSpec,
    ) -> Array4<f64> {
        let (bn, c, h, wd) = x.dim();
        let (o, _, k, _) = w.dim();
        let oh = spec.out_extent(h, k);
        let ow = spec.out_extent(wd, k);
        let mut y = Array4::<f64>::zeros((bn, o, oh, ow));
        for b in 0..bn {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb[oi]);
                        for ci in 0..c {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = (oy * spec.stride + kh * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let ix = (ox * spec.stride + kw * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iy >= 0
                                        && (iy as usize) < h
                                        && ix >= 0
                                        && (ix as usize) < wd
                                    {
                                        acc += x[[b, ci, iy as usize, ix as usize]]
                                            * w[[oi, ci, kh, kw]];
                                    }
                                }
                            }
                        }
                        y[[b, oi, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }
}
