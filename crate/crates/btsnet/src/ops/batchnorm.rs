//! Batch normalization over `(B, C, H, W)` with per-channel statistics.

use ndarray::{Array1, ArrayD, Ix4, IxDyn};

use crate::graph::{Tape, Var};

/// Per-channel mean and biased variance over batch and space.
pub fn channel_stats(x: &ndarray::ArrayView4<f64>) -> (Array1<f64>, Array1<f64>) {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let lane = x.slice(ndarray::s![.., ci, .., ..]);
        let m = lane.sum() / n;
        mean[ci] = m;
        var[ci] = lane.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    (mean, var)
}

impl Tape {
    /// Training-mode batch norm: normalizes by batch statistics and returns
    /// them so the caller can maintain running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = xv.dim();
        let n = (b * h * w) as f64;
        let (mean, var) = channel_stats(&xv);
        let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut y = ndarray::Array4::<f64>::zeros((b, c, h, w));
        let mut xhat = ndarray::Array4::<f64>::zeros((b, c, h, w));
        for ci in 0..c {
            let (m, is, ga, be) = (mean[ci], inv_std[ci], g[IxDyn(&[ci])], bt[IxDyn(&[ci])]);
            for bi in 0..b {
                for yi in 0..h {
                    for xi in 0..w {
                        let xh = (xv[[bi, ci, yi, xi]] - m) * is;
                        xhat[[bi, ci, yi, xi]] = xh;
                        y[[bi, ci, yi, xi]] = ga * xh + be;
                    }
                }
            }
        }
        let inv_std_c = inv_std.clone();
        let mean_out = mean;
        let var_out = var;
        let node = self.push(
            y.into_dyn(),
            vec![x, gamma, beta],
            Some(Box::new(move |gout, pv, _| {
                let gv = gout.view().into_dimensionality::<Ix4>().unwrap();
                let gamma_v = pv[1];
                let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let ga = gamma_v[IxDyn(&[ci])];
                    let is = inv_std_c[ci];
                    // reductions over the channel lane
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for bi in 0..b {
                        for yi in 0..h {
                            for xi in 0..w {
                                let dy = gv[[bi, ci, yi, xi]];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat[[bi, ci, yi, xi]];
                            }
                        }
                    }
                    dbeta[ci] = sum_dy;
                    dgamma[ci] = sum_dy_xhat;
                    let k1 = sum_dy / n;
                    let k2 = sum_dy_xhat / n;
                    for bi in 0..b {
                        for yi in 0..h {
                            for xi in 0..w {
                                let dy = gv[[bi, ci, yi, xi]];
                                dx[[bi, ci, yi, xi]] =
                                    ga * is * (dy - k1 - xhat[[bi, ci, yi, xi]] * k2);
                            }
                        }
                    }
                }
                vec![
                    dx.into_dyn(),
                    dgamma.into_dyn(),
                    dbeta.into_dyn(),
                ]
            })),
            None,
        );
        (node, mean_out, var_out)
    }

    /// Evaluation-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &ArrayD<f64>,
        running_var: &ArrayD<f64>,
        eps: f64,
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = xv.dim();
        let inv_std: Array1<f64> =
            Array1::from_shape_fn(c, |ci| 1.0 / (running_var[IxDyn(&[ci])] + eps).sqrt());
        let mean: Array1<f64> = Array1::from_shape_fn(c, |ci| running_mean[IxDyn(&[ci])]);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut y = ndarray::Array4::<f64>::zeros((b, c, h, w));
        for ci in 0..c {
            let (m, is, ga, be) = (mean[ci], inv_std[ci], g[IxDyn(&[ci])], bt[IxDyn(&[ci])]);
            for bi in 0..b {
                for yi in 0..h {
                    for xi in 0..w {
                        y[[bi, ci, yi, xi]] = ga * (xv[[bi, ci, yi, xi]] - m) * is + be;
                    }
                }
            }
        }
        let inv_std_c = inv_std;
        let mean_c = mean;
        self.push(
            y.into_dyn(),
            vec![x, gamma, beta],
            Some(Box::new(move |gout, pv, _| {
                let gv = gout.view().into_dimensionality::<Ix4>().unwrap();
                let xv = pv[0].view().into_dimensionality::<Ix4>().unwrap();
                let gamma_v = pv[1];
                let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let ga = gamma_v[IxDyn(&[ci])];
                    let is = inv_std_c[ci];
                    let m = mean_c[ci];
                    for bi in 0..b {
                        for yi in 0..h {
                            for xi in 0..w {
                                let dy = gv[[bi, ci, yi, xi]];
                                dx[[bi, ci, yi, xi]] = dy * ga * is;
                                dgamma[ci] += dy * (xv[[bi, ci, yi, xi]] - m) * is;
                                dbeta[ci] += dy;
                            }
                        }
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
            None,
        )
    }
}
