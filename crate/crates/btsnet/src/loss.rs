//! Three-way binary cross-entropy supervision.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderOutput;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};

/// Clamp keeping predictions away from the log singularities.
pub const BCE_EPS: f64 = 1e-7;

/// Per-map supervision weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_c: 1.0, lambda_r: 0.5, lambda_d: 0.5 }
    }
}

/// Pixel-mean binary cross-entropy between a saliency map and a binary mask.
///
/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the mean (rather
/// than sum) reduction keeps the magnitude resolution-independent.
pub fn bce(tape: &mut Tape, s: Var, g: &ArrayD<f64>) -> Result<Var> {
    if tape.shape(s) != g.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            tape.shape(s),
            g.shape()
        )));
    }
    let sv = tape.value(s);
    let n = sv.len() as f64;
    let mut total = 0.0;
    for (&p, &t) in sv.iter().zip(g.iter()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    let gt = g.clone();
    Ok(tape.push(
        ArrayD::from_elem(ndarray::IxDyn(&[]), total / n),
        vec![s],
        Some(Box::new(move |gout, pv, _| {
            let gs = gout.iter().next().copied().unwrap() / n;
            let mut ds = pv[0].clone();
            ds.zip_mut_with(&gt, |p, &t| {
                if *p <= BCE_EPS || *p >= 1.0 - BCE_EPS {
                    // clamped region is locally flat
                    *p = 0.0;
                } else {
                    *p = gs * (*p - t) / (*p * (1.0 - *p));
                }
            });
            vec![ds]
        })),
        None,
    ))
}

/// `lambda_c * bce(s_c) + lambda_r * bce(s_r) + lambda_d * bce(s_d)`.
pub fn total_loss(
    tape: &mut Tape,
    out: &DecoderOutput,
    g: &ArrayD<f64>,
    w: &LossWeights,
) -> Result<Var> {
    let lc = bce(tape, out.s_c, g)?;
    let lr = bce(tape, out.s_r, g)?;
    let ld = bce(tape, out.s_d, g)?;
    let lc = tape.scale(lc, w.lambda_c);
    let lr = tape.scale(lr, w.lambda_r);
    let ld = tape.scale(ld, w.lambda_d);
    let sum = tape.add(lc, lr);
    Ok(tape.add(sum, ld))
}

/// Plain-value BCE for evaluation code that has no tape at hand.
pub fn bce_value(s: &ArrayD<f64>, g: &ArrayD<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.leaf(s.clone());
    let l = bce(&mut tape, sv, g)?;
    Ok(tape.scalar(l))
}
