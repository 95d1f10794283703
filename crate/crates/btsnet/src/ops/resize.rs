//! Bilinear interpolation with half-pixel-center sampling.
//!
//! Source coordinates are `(dst + 0.5) * (src_len / dst_len) - 0.5`, clamped
//! to the valid range (the convention without corner alignment). Constants
//! are preserved exactly and equal sizes reproduce the input bitwise.

use ndarray::{Array2, Array4, Ix4};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};

/// Per-axis sample table: low index, high index and high-side weight.
#[derive(Clone)]
pub(crate) struct AxisTable {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

pub(crate) fn axis_table(src: usize, dst: usize) -> AxisTable {
    let scale = src as f64 / dst as f64;
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut w_hi = Vec::with_capacity(dst);
    for d in 0..dst {
        let pos = (d as f64 + 0.5) * scale - 0.5;
        let pos = pos.clamp(0.0, (src - 1) as f64);
        let l = pos.floor() as usize;
        let h = (l + 1).min(src - 1);
        lo.push(l);
        hi.push(h);
        w_hi.push(pos - l as f64);
    }
    AxisTable { lo, hi, w_hi }
}

/// Resizes one plane in either direction (used by data preprocessing).
pub fn bilinear_resize_plane(src: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (th, tw) {
        return src.clone();
    }
    let ty = axis_table(h, th);
    let tx = axis_table(w, tw);
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let (y0, y1, wy) = (ty.lo[y], ty.hi[y], ty.w_hi[y]);
        let (x0, x1, wx) = (tx.lo[x], tx.hi[x], tx.w_hi[x]);
        let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
        let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
        top * (1.0 - wy) + bot * wy
    })
}

/// Nearest-neighbour resize for label masks.
pub fn nearest_resize_plane(src: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (th, tw) {
        return src.clone();
    }
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / th as f64 - 0.5).round().max(0.0) as usize)
            .min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / tw as f64 - 0.5).round().max(0.0) as usize)
            .min(w - 1);
        src[[sy, sx]]
    })
}

pub(crate) fn upsample_forward(
    x: &ndarray::ArrayView4<f64>,
    th: usize,
    tw: usize,
) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    if (h, w) == (th, tw) {
        return x.to_owned();
    }
    let ty = axis_table(h, th);
    let tx = axis_table(w, tw);
    let mut y = Array4::<f64>::zeros((b, c, th, tw));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..th {
                let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
                for ox in 0..tw {
                    let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                    let top = x[[bi, ci, y0, x0]] * (1.0 - wx) + x[[bi, ci, y0, x1]] * wx;
                    let bot = x[[bi, ci, y1, x0]] * (1.0 - wx) + x[[bi, ci, y1, x1]] * wx;
                    y[[bi, ci, oy, ox]] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    y
}

impl Tape {
    /// Bilinear upsampling to `(th, tw)`. Targets must not shrink the input.
    pub fn upsample_bilinear(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        let shape = self.shape(x);
        let (h, w) = (shape[2], shape[3]);
        if th < h || tw < w {
            return Err(Error::Shape(format!(
                "upsample target ({th}, {tw}) is smaller than source ({h}, {w})"
            )));
        }
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let y = upsample_forward(&xv, th, tw);
        if (h, w) == (th, tw) {
            // identity: still record a pass-through node for a uniform graph
            return Ok(self.push(
                y.into_dyn(),
                vec![x],
                Some(Box::new(|g, _, _| vec![g.clone()])),
                None,
            ));
        }
        let ty = axis_table(h, th);
        let tx = axis_table(w, tw);
        Ok(self.push(
            y.into_dyn(),
            vec![x],
            Some(Box::new(move |g, pv, _| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, _, _) = pv[0].view().into_dimensionality::<Ix4>().unwrap().dim();
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..th {
                            let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
                            for ox in 0..tw {
                                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                                let gvo = gv[[bi, ci, oy, ox]];
                                dx[[bi, ci, y0, x0]] += gvo * (1.0 - wy) * (1.0 - wx);
                                dx[[bi, ci, y0, x1]] += gvo * (1.0 - wy) * wx;
                                dx[[bi, ci, y1, x0]] += gvo * wy * (1.0 - wx);
                                dx[[bi, ci, y1, x1]] += gvo * wy * wx;
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
            None,
        ))
    }
}
