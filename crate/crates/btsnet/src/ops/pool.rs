//! Max pooling.

use ndarray::{Array4, Ix4};

use crate::graph::{Tape, Var};

impl Tape {
    /// Square max pooling; gradient routes to the argmax of each window.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = xv.dim();
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let mut y = Array4::<f64>::zeros((b, c, oh, ow));
        let mut argmax = vec![0usize; b * c * oh * ow];
        let mut flat = 0usize;
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                let iy = (oy * stride + kh) as isize - padding as isize;
                                let ix = (ox * stride + kw) as isize - padding as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    let v = xv[[bi, ci, iy as usize, ix as usize]];
                                    if v > best {
                                        best = v;
                                        best_idx = (iy as usize) * w + ix as usize;
                                    }
                                }
                            }
                        }
                        y[[bi, ci, oy, ox]] = best;
                        argmax[flat] = best_idx;
                        flat += 1;
                    }
                }
            }
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Some(Box::new(move |g, pv, _| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros(
                    pv[0].view().into_dimensionality::<Ix4>().unwrap().dim(),
                );
                let mut flat = 0usize;
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let idx = argmax[flat];
                                dx[[bi, ci, idx / w, idx % w]] += gv[[bi, ci, oy, ox]];
                                flat += 1;
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
            None,
        )
    }
}
