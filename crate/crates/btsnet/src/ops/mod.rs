//! Neural building blocks: BConv, spatial attention, channel selection,
//! ASPP, bilinear upsampling and the saliency prediction head.

pub mod batchnorm;
pub mod conv;
pub mod pool;
pub mod resize;

pub use conv::ConvSpec;
pub use resize::{bilinear_resize_plane, nearest_resize_plane};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{BufId, BufferStore, Builder, ParamId, ParamStore};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Everything a layer needs during one forward pass.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub ps: &'a ParamStore,
    pub bufs: &'a mut BufferStore,
    pub train: bool,
}

impl<'a> Fwd<'a> {
    pub fn new(
        tape: &'a mut Tape,
        ps: &'a ParamStore,
        bufs: &'a mut BufferStore,
        train: bool,
    ) -> Self {
        Fwd { tape, ps, bufs, train }
    }
}

/// Plain convolution layer; bias is optional because BConv folds it into BN.
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let mut scope = b.child(name);
        let weight = scope.conv_weight("weight", out_c, in_c, kernel);
        let bias = bias.then(|| scope.zeros("bias", &[out_c]));
        Conv2dLayer { weight, bias, spec, in_c, out_c, kernel }
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Var {
        debug_assert_eq!(
            cx.tape.shape(x)[1],
            self.in_c,
            "channel mismatch into conv {}",
            cx.ps.name(self.weight)
        );
        let w = cx.tape.param(cx.ps, self.weight);
        let b = self.bias.map(|id| cx.tape.param(cx.ps, id));
        cx.tape.conv2d(x, w, b, self.spec)
    }

    pub fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let c = tape.shape(x)[1];
        if c != self.in_c {
            return Err(Error::Config(format!(
                "layer expects {} input channels, got {c}",
                self.in_c
            )));
        }
        Ok(())
    }
}

/// Batch normalization layer with running statistics.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufId,
    pub running_var: BufId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        let mut scope = b.child(name);
        BatchNorm2d {
            gamma: scope.ones("gamma", &[channels]),
            beta: scope.zeros("beta", &[channels]),
            running_mean: scope.buffer_zeros("running_mean", &[channels]),
            running_var: scope.buffer_ones("running_var", &[channels]),
        }
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Var {
        let gamma = cx.tape.param(cx.ps, self.gamma);
        let beta = cx.tape.param(cx.ps, self.beta);
        if cx.train {
            let (y, mean, var) = cx.tape.batch_norm_train(x, gamma, beta, BN_EPS);
            let rm = cx.bufs.value_mut(self.running_mean);
            rm.zip_mut_with(&mean.view().into_dyn(), |r, &m| {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            });
            let rv = cx.bufs.value_mut(self.running_var);
            rv.zip_mut_with(&var.view().into_dyn(), |r, &v| {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            });
            y
        } else {
            let mean = cx.bufs.value(self.running_mean).clone();
            let var = cx.bufs.value(self.running_var).clone();
            cx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

/// Convolution -> batch norm -> ReLU, the unit the whole network is made of.
pub struct BConv {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2d,
}

impl BConv {
    pub fn new(b: &mut Builder, name: &str, in_c: usize, out_c: usize, kernel: usize) -> Self {
        Self::with_spec(b, name, in_c, out_c, kernel, ConvSpec::same(kernel))
    }

    pub fn with_spec(
        b: &mut Builder,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Self {
        let mut scope = b.child(name);
        let conv = Conv2dLayer::new(&mut scope, "conv", in_c, out_c, kernel, spec, false);
        let bn = BatchNorm2d::new(&mut scope, "bn", out_c);
        BConv { conv, bn }
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.bn.forward(cx, y);
        cx.tape.relu(y)
    }
}

/// Single-channel sigmoid map telling "where" the salient object is.
pub struct SpatialAttention {
    pub conv: Conv2dLayer,
}

impl SpatialAttention {
    pub fn new(b: &mut Builder, name: &str, in_c: usize) -> Self {
        let mut scope = b.child(name);
        SpatialAttention {
            conv: Conv2dLayer::new(&mut scope, "conv", in_c, 1, 3, ConvSpec::same(3), true),
        }
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Var {
        let logits = self.conv.forward(cx, x);
        cx.tape.sigmoid(logits)
    }
}

/// Channel selection: GAP -> 1x1 conv (equal channels) -> softmax -> reweight.
pub struct ChannelSelect {
    pub conv: Conv2dLayer,
}

impl ChannelSelect {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        let mut scope = b.child(name);
        ChannelSelect {
            conv: Conv2dLayer::new(&mut scope, "conv", channels, channels, 1, ConvSpec::unit(0), true),
        }
    }

    /// Returns the `(B, C, 1, 1)` softmax weights and the reweighted map.
    pub fn forward(&self, cx: &mut Fwd, x: Var) -> (Var, Var) {
        let pooled = cx.tape.gap(x);
        let logits = self.conv.forward(cx, pooled);
        let weights = cx.tape.softmax_channels(logits);
        let selected = cx.tape.mul(weights, x);
        (weights, selected)
    }
}

/// Atrous spatial pyramid pooling head.
///
/// One 1x1 branch for the unit rate, a 3x3 dilated branch per remaining
/// rate, and a global-pooling branch, concatenated and projected back to
/// `out_c` by a 1x1 BConv.
pub struct Aspp {
    pub unit_branch: BConv,
    pub dilated: Vec<BConv>,
    pub pool_branch: BConv,
    pub project: BConv,
    pub rates: Vec<usize>,
}

impl Aspp {
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_c: usize,
        width: usize,
        out_c: usize,
        rates: &[usize],
    ) -> Self {
        assert!(!rates.is_empty() && rates[0] == 1, "rate list must start at 1");
        let mut scope = b.child(name);
        let unit_branch = BConv::new(&mut scope, "branch0", in_c, width, 1);
        let dilated = rates[1..]
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let spec = ConvSpec { stride: 1, padding: r, dilation: r };
                BConv::with_spec(&mut scope, &format!("branch{}", i + 1), in_c, width, 3, spec)
            })
            .collect::<Vec<_>>();
        let pool_branch = BConv::new(&mut scope, "pool", in_c, width, 1);
        let project = BConv::new(&mut scope, "project", width * (rates.len() + 1), out_c, 1);
        Aspp { unit_branch, dilated, pool_branch, project, rates: rates.to_vec() }
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        let (h, w) = (shape[2], shape[3]);
        if let Some(&bad) = self.rates.iter().find(|&&r| r > h.min(w)) {
            return Err(Error::Degenerate(format!(
                "aspp dilation {bad} exceeds spatial extent {}x{}; shrink the rates or grow the input",
                h, w
            )));
        }
        let mut parts = vec![self.unit_branch.forward(cx, x)];
        for branch in &self.dilated {
            parts.push(branch.forward(cx, x));
        }
        let pooled = cx.tape.gap(x);
        let pooled = self.pool_branch.forward(cx, pooled);
        parts.push(cx.tape.upsample_bilinear(pooled, h, w)?);
        let cat = cx.tape.concat_channels(&parts);
        Ok(self.project.forward(cx, cat))
    }
}

/// Two BConv, a 1x1 single-channel conv, sigmoid, bilinear upsampling.
pub struct PredictionHead {
    pub b1: BConv,
    pub b2: BConv,
    pub out: Conv2dLayer,
}

impl PredictionHead {
    pub fn new(b: &mut Builder, name: &str, in_c: usize, k: usize) -> Self {
        let mut scope = b.child(name);
        PredictionHead {
            b1: BConv::new(&mut scope, "bconv1", in_c, k, 3),
            b2: BConv::new(&mut scope, "bconv2", k, k, 3),
            out: Conv2dLayer::new(&mut scope, "out", k, 1, 1, ConvSpec::unit(0), true),
        }
    }

    /// Produces a saliency map in `(0,1)` at `(out_h, out_w)`.
    pub fn forward(&self, cx: &mut Fwd, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = self.b1.forward(cx, x);
        let y = self.b2.forward(cx, y);
        let y = self.out.forward(cx, y);
        let y = cx.tape.sigmoid(y);
        cx.tape.upsample_bilinear(y, out_h, out_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;
    use ndarray::{Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (ParamStore, BufferStore, ChaCha8Rng) {
        (ParamStore::new(), BufferStore::new(), ChaCha8Rng::seed_from_u64(42))
    }

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn bconv_shape_contract() {
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let layer = BConv::new(&mut b, "bconv", 64, 256, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(rand4((2, 64, 22, 22), 1).into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let y = layer.forward(&mut cx, x);
        assert_eq!(tape.shape(y), &[2, 256, 22, 22]);
        assert!(tape.value(y).iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn bconv_zero_input_zero_shift_gives_zero() {
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let layer = BConv::new(&mut b, "bconv", 4, 8, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 4, 6, 6])));
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let y = layer.forward(&mut cx, x);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bconv_matches_hand_oracle_on_1x1() {
        // conv(1x1) -> BN over batch stats -> relu, all recomputed by hand
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let layer = BConv::with_spec(&mut b, "bconv", 2, 3, 1, ConvSpec::unit(0));
        let w = vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        ps.value_mut(layer.conv.weight)
            .assign(&ArrayD::from_shape_vec(IxDyn(&[3, 2, 1, 1]), w.clone()).unwrap());
        let x = rand4((1, 2, 4, 4), 5);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let y = layer.forward(&mut cx, xv);

        // oracle
        let mut conv = Array4::<f64>::zeros((1, 3, 4, 4));
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    conv[[0, o, i, j]] = w[o * 2] * x[[0, 0, i, j]] + w[o * 2 + 1] * x[[0, 1, i, j]];
                }
            }
        }
        for o in 0..3 {
            let lane = conv.slice(ndarray::s![0, o, .., ..]).to_owned();
            let n = 16.0;
            let m = lane.sum() / n;
            let var = lane.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            for i in 0..4 {
                for j in 0..4 {
                    let want = ((conv[[0, o, i, j]] - m) * inv).max(0.0);
                    let got = tape.value(y)[IxDyn(&[0, o, i, j])];
                    assert!((want - got).abs() < 1e-6, "{want} vs {got}");
                }
            }
        }
    }

    #[test]
    fn spatial_attention_zero_conv_gives_half() {
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let sa = SpatialAttention::new(&mut b, "sa", 4);
        ps.value_mut(sa.conv.weight).fill(0.0);
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 4, 5, 5])));
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let y = sa.forward(&mut cx, x);
        assert_eq!(tape.shape(y), &[1, 1, 5, 5]);
        assert!(tape.value(y).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn spatial_attention_matches_sigmoid_conv_oracle() {
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let sa = SpatialAttention::new(&mut b, "sa", 4);
        let x = rand4((1, 4, 5, 5), 8);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let y = sa.forward(&mut cx, xv);
        assert!(tape.value(y).iter().all(|&v| v > 0.0 && v < 1.0));

        let wv = ps.value(sa.conv.weight).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bias = ps.value(sa.conv.bias.unwrap()).as_slice().unwrap().to_vec();
        let oracle = conv::oracle::conv_oracle(
            &x,
            &wv.to_owned(),
            Some(&bias),
            &ConvSpec::same(3),
        )
        .mapv(crate::graph::stable_sigmoid);
        for (a, b) in tape.value(y).iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_select_uniform_on_identical_channels() {
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let cs = ChannelSelect::new(&mut b, "cs", 3);
        // identity-initialized 1x1 conv
        let mut ident = ArrayD::zeros(IxDyn(&[3, 3, 1, 1]));
        for i in 0..3 {
            ident[IxDyn(&[i, i, 0, 0])] = 1.0;
        }
        ps.value_mut(cs.conv.weight).assign(&ident);
        let plane = rand4((1, 1, 4, 4), 3);
        let x = ndarray::concatenate(
            ndarray::Axis(1),
            &[plane.view(), plane.view(), plane.view()],
        )
        .unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let (weights, out) = cs.forward(&mut cx, xv);
        for c in 0..3 {
            assert!((tape.value(weights)[IxDyn(&[0, c, 0, 0])] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(tape.shape(out), tape.shape(xv));
    }

    #[test]
    fn channel_select_zero_input() {
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let cs = ChannelSelect::new(&mut b, "cs", 5);
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[2, 5, 3, 3])));
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let (weights, out) = cs.forward(&mut cx, x);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
        for b in 0..2 {
            for c in 0..5 {
                assert!((tape.value(weights)[IxDyn(&[b, c, 0, 0])] - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_select_matches_composed_oracle() {
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let cs = ChannelSelect::new(&mut b, "cs", 3);
        let w = vec![0.2, -0.4, 0.6, 1.0, 0.5, -0.3, -0.1, 0.8, 0.9];
        ps.value_mut(cs.conv.weight)
            .assign(&ArrayD::from_shape_vec(IxDyn(&[3, 3, 1, 1]), w.clone()).unwrap());
        let x = rand4((1, 3, 2, 2), 17);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let (weights, out) = cs.forward(&mut cx, xv);

        // GAP -> conv -> softmax -> multiply, all by hand
        let mut pooled = [0.0; 3];
        for c in 0..3 {
            pooled[c] = x.slice(ndarray::s![0, c, .., ..]).mean().unwrap();
        }
        let mut logits = [0.0; 3];
        for o in 0..3 {
            for c in 0..3 {
                logits[o] += w[o * 3 + c] * pooled[c];
            }
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for c in 0..3 {
            let want_w = exps[c] / sum;
            assert!((tape.value(weights)[IxDyn(&[0, c, 0, 0])] - want_w).abs() < 1e-9);
            for i in 0..2 {
                for j in 0..2 {
                    let want = want_w * x[[0, c, i, j]];
                    let got = tape.value(out)[IxDyn(&[0, c, i, j])];
                    assert!((want - got).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn aspp_preserves_extents_and_rejects_oversized_rates() {
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let aspp = Aspp::new(&mut b, "aspp", 16, 8, 16, &[1, 2]);
        let mut tape = Tape::new();
        let x = tape.leaf(rand4((2, 16, 4, 4), 2).into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let y = aspp.forward(&mut cx, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 16, 4, 4]);

        let tiny = tape.leaf(rand4((1, 16, 1, 1), 3).into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let err = aspp.forward(&mut cx, tiny).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn prediction_head_zero_final_conv_is_half() {
        let (mut ps, mut bufs, mut rng) = fixture();
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let head = PredictionHead::new(&mut b, "head", 16, 8);
        ps.value_mut(head.out.weight).fill(0.0);
        let mut tape = Tape::new();
        let x = tape.leaf(rand4((1, 16, 8, 8), 4).into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let y = head.forward(&mut cx, x, 32, 32).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 32, 32]);
        assert!(tape.value(y).iter().all(|&v| v == 0.5));
    }
}
