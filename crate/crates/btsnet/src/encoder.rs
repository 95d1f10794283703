//! Dual-branch residual encoder with BTS modules between hierarchies.
//!
//! Both branches share one structure: a strided stem, four residual stages
//! (the last one running at stride 1), and an ASPP head. After every
//! hierarchy the BTS module exchanges attention between the branches, and
//! the next stage consumes the exchanged features.

use serde::{Deserialize, Serialize};

use crate::bts::{BtsBlock, BtsConfig};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::ops::{Aspp, BConv, BatchNorm2d, Conv2dLayer, ConvSpec, Fwd};
use crate::params::Builder;

/// Desk-scale or paper-scale instantiation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Tiny,
}

/// Backbone geometry for one branch.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub scale: Scale,
    /// Output channels of the five hierarchies.
    pub stage_channels: [usize; 5],
    /// Per-stage strides; the last hierarchy must run at stride 1.
    pub stage_strides: [usize; 5],
    pub input_size: (usize, usize),
    /// Branch width inside ASPP.
    pub aspp_width: usize,
    /// ASPP rates; the leading 1 is realized as a 1x1 branch.
    pub aspp_rates: Vec<usize>,
    /// Residual blocks per stage (index 0 is the stem and ignored).
    pub blocks_per_stage: [usize; 5],
}

impl BackboneConfig {
    /// ResNet-50-style widths at the paper's 352x352 input.
    pub fn full() -> Self {
        BackboneConfig {
            scale: Scale::Full,
            stage_channels: [64, 256, 512, 1024, 2048],
            stage_strides: [2, 2, 2, 2, 1],
            input_size: (352, 352),
            aspp_width: 256,
            aspp_rates: vec![1, 6, 12, 18],
            blocks_per_stage: [1, 3, 4, 6, 3],
        }
    }

    /// Desk-scale configuration: one basic block per stage, 32x32 input.
    pub fn tiny() -> Self {
        Self::tiny_with_input(32, 32)
    }

    pub fn tiny_with_input(h: usize, w: usize) -> Self {
        BackboneConfig {
            scale: Scale::Tiny,
            stage_channels: [4, 8, 8, 16, 16],
            stage_strides: [2, 2, 2, 2, 1],
            input_size: (h, w),
            aspp_width: 8,
            aspp_rates: vec![1, 2],
            blocks_per_stage: [1, 1, 1, 1, 1],
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Full => Self::full(),
            Scale::Tiny => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_strides[4] != 1 {
            return Err(Error::Config(format!(
                "last hierarchy must run at stride 1, got {}",
                self.stage_strides[4]
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        if self.aspp_rates.first() != Some(&1) {
            return Err(Error::Config("aspp rates must start at 1".into()));
        }
        if self.input_size.0 < 32 || self.input_size.1 < 32 {
            return Err(Error::Config(
                "input extents below 32 leave no spatial support at stride 16".into(),
            ));
        }
        Ok(())
    }

    /// Cumulative stride of each of the six pyramid levels.
    pub fn stride_table(&self) -> [usize; 6] {
        let mut out = [1usize; 6];
        let mut acc = 1;
        for i in 0..5 {
            acc *= self.stage_strides[i];
            out[i] = acc;
        }
        out[5] = acc; // ASPP preserves the last extent
        out
    }

    /// Channels of each of the six pyramid levels.
    pub fn level_channels(&self) -> [usize; 6] {
        [
            self.stage_channels[0],
            self.stage_channels[1],
            self.stage_channels[2],
            self.stage_channels[3],
            self.stage_channels[4],
            self.stage_channels[4],
        ]
    }

    fn bottleneck(&self) -> bool {
        matches!(self.scale, Scale::Full)
    }

    fn stem_kernel(&self) -> usize {
        match self.scale {
            Scale::Full => 7,
            Scale::Tiny => 3,
        }
    }

    /// The max-pool is folded into hierarchy 1 on the full scale so the
    /// stride pattern lands on /2, /4, /8, /16, /16.
    fn stage1_pool(&self) -> bool {
        matches!(self.scale, Scale::Full)
    }
}

/// The six per-branch features `f^0..f^5` feeding the decoder.
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> Var {
        self.levels[i]
    }
}

struct Stem {
    conv: Conv2dLayer,
    bn: BatchNorm2d,
}

impl Stem {
    fn forward(&self, cx: &mut Fwd, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.bn.forward(cx, y);
        cx.tape.relu(y)
    }
}

struct BasicBlock {
    conv1: BConv,
    conv2: Conv2dLayer,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2dLayer, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(b: &mut Builder, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        let mut scope = b.child(name);
        let spec1 = ConvSpec { stride, padding: 1, dilation: 1 };
        let conv1 = BConv::with_spec(&mut scope, "conv1", in_c, out_c, 3, spec1);
        let conv2 = Conv2dLayer::new(&mut scope, "conv2", out_c, out_c, 3, ConvSpec::same(3), false);
        let bn2 = BatchNorm2d::new(&mut scope, "bn2", out_c);
        let shortcut = (stride != 1 || in_c != out_c).then(|| {
            let spec = ConvSpec { stride, padding: 0, dilation: 1 };
            let conv = Conv2dLayer::new(&mut scope, "down_conv", in_c, out_c, 1, spec, false);
            let bn = BatchNorm2d::new(&mut scope, "down_bn", out_c);
            (conv, bn)
        });
        BasicBlock { conv1, conv2, bn2, shortcut }
    }

    fn forward(&self, cx: &mut Fwd, x: Var) -> Var {
        let y = self.conv1.forward(cx, x);
        let y = self.conv2.forward(cx, y);
        let y = self.bn2.forward(cx, y);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x);
                bn.forward(cx, s)
            }
            None => x,
        };
        let sum = cx.tape.add(y, skip);
        cx.tape.relu(sum)
    }
}

struct BottleneckBlock {
    reduce: BConv,
    conv: BConv,
    expand: Conv2dLayer,
    bn3: BatchNorm2d,
    shortcut: Option<(Conv2dLayer, BatchNorm2d)>,
}

impl BottleneckBlock {
    fn new(b: &mut Builder, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        let width = out_c / 4;
        let mut scope = b.child(name);
        let reduce = BConv::with_spec(&mut scope, "conv1", in_c, width, 1, ConvSpec::unit(0));
        let spec2 = ConvSpec { stride, padding: 1, dilation: 1 };
        let conv = BConv::with_spec(&mut scope, "conv2", width, width, 3, spec2);
        let expand = Conv2dLayer::new(&mut scope, "conv3", width, out_c, 1, ConvSpec::unit(0), false);
        let bn3 = BatchNorm2d::new(&mut scope, "bn3", out_c);
        let shortcut = (stride != 1 || in_c != out_c).then(|| {
            let spec = ConvSpec { stride, padding: 0, dilation: 1 };
            let conv = Conv2dLayer::new(&mut scope, "down_conv", in_c, out_c, 1, spec, false);
            let bn = BatchNorm2d::new(&mut scope, "down_bn", out_c);
            (conv, bn)
        });
        BottleneckBlock { reduce, conv, expand, bn3, shortcut }
    }

    fn forward(&self, cx: &mut Fwd, x: Var) -> Var {
        let y = self.reduce.forward(cx, x);
        let y = self.conv.forward(cx, y);
        let y = self.expand.forward(cx, y);
        let y = self.bn3.forward(cx, y);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x);
                bn.forward(cx, s)
            }
            None => x,
        };
        let sum = cx.tape.add(y, skip);
        cx.tape.relu(sum)
    }
}

enum ResBlock {
    Basic(BasicBlock),
    Bottleneck(BottleneckBlock),
}

impl ResBlock {
    fn forward(&self, cx: &mut Fwd, x: Var) -> Var {
        match self {
            ResBlock::Basic(b) => b.forward(cx, x),
            ResBlock::Bottleneck(b) => b.forward(cx, x),
        }
    }
}

struct Stage {
    pool: bool,
    blocks: Vec<ResBlock>,
}

impl Stage {
    fn forward(&self, cx: &mut Fwd, x: Var) -> Var {
        let mut y = if self.pool { cx.tape.max_pool2d(x, 3, 2, 1) } else { x };
        for block in &self.blocks {
            y = block.forward(cx, y);
        }
        y
    }
}

/// One modality branch: stem plus four residual stages.
struct Backbone {
    stem: Stem,
    stages: Vec<Stage>,
}

impl Backbone {
    fn new(b: &mut Builder, name: &str, cfg: &BackboneConfig) -> Self {
        let mut scope = b.child(name);
        let k = cfg.stem_kernel();
        let stem_spec = ConvSpec { stride: cfg.stage_strides[0], padding: k / 2, dilation: 1 };
        let stem = Stem {
            conv: Conv2dLayer::new(&mut scope, "stem.conv", 3, cfg.stage_channels[0], k, stem_spec, false),
            bn: BatchNorm2d::new(&mut scope, "stem.bn", cfg.stage_channels[0]),
        };
        let mut stages = Vec::new();
        for i in 1..5 {
            let mut stage_scope = scope.child(&format!("stage{i}"));
            let pool = i == 1 && cfg.stage1_pool();
            let block_stride = if pool { 1 } else { cfg.stage_strides[i] };
            let in_c = cfg.stage_channels[i - 1];
            let out_c = cfg.stage_channels[i];
            let mut blocks = Vec::new();
            for j in 0..cfg.blocks_per_stage[i] {
                let (bin, stride) = if j == 0 { (in_c, block_stride) } else { (out_c, 1) };
                let block = if cfg.bottleneck() {
                    ResBlock::Bottleneck(BottleneckBlock::new(
                        &mut stage_scope,
                        &format!("block{j}"),
                        bin,
                        out_c,
                        stride,
                    ))
                } else {
                    ResBlock::Basic(BasicBlock::new(
                        &mut stage_scope,
                        &format!("block{j}"),
                        bin,
                        out_c,
                        stride,
                    ))
                };
                blocks.push(block);
            }
            stages.push(Stage { pool, blocks });
        }
        Backbone { stem, stages }
    }
}

/// Replicates a single-channel depth map to the three-channel stem shape.
pub fn depth_stem(tape: &mut Tape, depth: Var) -> Result<Var> {
    let shape = tape.shape(depth);
    if shape[1] != 1 {
        return Err(Error::Config(format!(
            "depth input must be single-channel, got {} channels",
            shape[1]
        )));
    }
    if tape.value(depth).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Normalization(
            "depth values must lie in [0,1]; normalize before the stem".into(),
        ));
    }
    Ok(tape.concat_channels(&[depth, depth, depth]))
}

/// Two structurally identical backbones, five BTS modules, two ASPP heads.
pub struct Encoder {
    pub cfg: BackboneConfig,
    pub bts_cfg: BtsConfig,
    rgb: Backbone,
    depth: Backbone,
    pub bts: Vec<BtsBlock>,
    aspp_rgb: Aspp,
    aspp_depth: Aspp,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: BackboneConfig, bts_cfg: BtsConfig) -> Result<Self> {
        cfg.validate()?;
        let mut scope = b.child("encoder");
        let rgb = Backbone::new(&mut scope, "rgb", &cfg);
        let depth = Backbone::new(&mut scope, "depth", &cfg);
        let bts = (0..5)
            .map(|i| {
                BtsBlock::new(&mut scope, &format!("bts{i}"), cfg.stage_channels[i], bts_cfg)
            })
            .collect();
        let c_last = cfg.stage_channels[4];
        let aspp_rgb =
            Aspp::new(&mut scope, "aspp_rgb", c_last, cfg.aspp_width, c_last, &cfg.aspp_rates);
        let aspp_depth =
            Aspp::new(&mut scope, "aspp_depth", c_last, cfg.aspp_width, c_last, &cfg.aspp_rates);
        Ok(Encoder { cfg, bts_cfg, rgb, depth, bts, aspp_rgb, aspp_depth })
    }

    /// Runs both branches with BTS interleaving and returns both pyramids.
    pub fn forward(
        &self,
        cx: &mut Fwd,
        rgb: Var,
        depth3: Var,
    ) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let rs = cx.tape.shape(rgb).to_vec();
        let ds = cx.tape.shape(depth3).to_vec();
        if rs[1] != 3 || ds[1] != 3 {
            return Err(Error::Config(format!(
                "encoder expects 3-channel inputs, got {} and {}",
                rs[1], ds[1]
            )));
        }
        if rs != ds {
            return Err(Error::Shape(format!(
                "rgb and depth inputs differ: {rs:?} vs {ds:?}"
            )));
        }
        let mut levels_r = Vec::with_capacity(6);
        let mut levels_d = Vec::with_capacity(6);
        let mut x_r = rgb;
        let mut x_d = depth3;
        for i in 0..5 {
            let bf_r = if i == 0 {
                self.rgb.stem.forward(cx, x_r)
            } else {
                self.rgb.stages[i - 1].forward(cx, x_r)
            };
            let bf_d = if i == 0 {
                self.depth.stem.forward(cx, x_d)
            } else {
                self.depth.stages[i - 1].forward(cx, x_d)
            };
            let (f_r, f_d) = self.bts[i].forward(cx, bf_r, bf_d)?;
            levels_r.push(f_r);
            levels_d.push(f_d);
            x_r = f_r;
            x_d = f_d;
        }
        levels_r.push(self.aspp_rgb.forward(cx, x_r)?);
        levels_d.push(self.aspp_depth.forward(cx, x_d)?);
        Ok((FeaturePyramid { levels: levels_r }, FeaturePyramid { levels: levels_d }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{BufferStore, ParamStore};
    use ndarray::{Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn build_tiny(
        bts_cfg: BtsConfig,
        seed: u64,
    ) -> (Encoder, ParamStore, BufferStore) {
        let mut ps = ParamStore::new();
        let mut bufs = BufferStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let enc = Encoder::new(&mut b, BackboneConfig::tiny(), bts_cfg).unwrap();
        (enc, ps, bufs)
    }

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(0.0..1.0))
    }

    #[test]
    fn stride_and_channel_tables() {
        let full = BackboneConfig::full();
        assert_eq!(full.stride_table(), [2, 4, 8, 16, 16, 16]);
        assert_eq!(full.level_channels(), [64, 256, 512, 1024, 2048, 2048]);
        let tiny = BackboneConfig::tiny();
        assert_eq!(tiny.stride_table(), [2, 4, 8, 16, 16, 16]);
        assert_eq!(tiny.level_channels(), [4, 8, 8, 16, 16, 16]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = BackboneConfig::tiny();
        cfg.stage_strides[4] = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::tiny();
        cfg.stage_channels[2] = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tiny_forward_obeys_stride_table_and_is_finite() {
        let (enc, ps, mut bufs) = build_tiny(BtsConfig::default(), 1);
        let mut tape = Tape::new();
        let rgb = tape.leaf(rand4((1, 3, 32, 32), 2).into_dyn());
        let depth = tape.leaf(rand4((1, 1, 32, 32), 3).into_dyn());
        let depth3 = depth_stem(&mut tape, depth).unwrap();
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let (pr, pd) = enc.forward(&mut cx, rgb, depth3).unwrap();
        let strides = enc.cfg.stride_table();
        let channels = enc.cfg.level_channels();
        for pyr in [&pr, &pd] {
            assert_eq!(pyr.levels.len(), 6);
            for (i, &lv) in pyr.levels.iter().enumerate() {
                let shape = tape.shape(lv);
                assert_eq!(shape[1], channels[i], "level {i}");
                assert_eq!(shape[2], 32 / strides[i], "level {i}");
                assert_eq!(shape[3], 32 / strides[i], "level {i}");
                assert!(tape.value(lv).iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn depth_stem_replicates_channels() {
        let mut tape = Tape::new();
        let d = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 1, 4, 4]), 0.5));
        let d3 = depth_stem(&mut tape, d).unwrap();
        assert_eq!(tape.shape(d3), &[2, 3, 4, 4]);
        assert!(tape.value(d3).iter().all(|&v| v == 0.5));
        // channel mean reproduces the original
        let v = tape.value(d3);
        for i in 0..4 {
            for j in 0..4 {
                let mean = (0..3).map(|c| v[IxDyn(&[0, c, i, j])]).sum::<f64>() / 3.0;
                assert_eq!(mean, 0.5);
            }
        }

        let bad = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.5));
        assert!(matches!(depth_stem(&mut tape, bad), Err(Error::Normalization(_))));
    }

    #[test]
    fn none_direction_keeps_rgb_pyramid_depth_free() {
        let bts_cfg = BtsConfig { direction: crate::bts::Direction::None, ..Default::default() };
        let (enc, ps, mut bufs) = build_tiny(bts_cfg, 5);
        let rgb = rand4((1, 3, 32, 32), 6);
        let d1 = rand4((1, 1, 32, 32), 7);
        let mut d2 = d1.clone();
        d2[[0, 0, 16, 16]] = 1.0 - d2[[0, 0, 16, 16]];

        let run = |depth_in: &Array4<f64>, bufs: &mut BufferStore| -> Vec<ArrayD<f64>> {
            let mut tape = Tape::new();
            let r = tape.leaf(rgb.clone().into_dyn());
            let d = tape.leaf(depth_in.clone().into_dyn());
            let d3 = depth_stem(&mut tape, d).unwrap();
            let mut cx = Fwd::new(&mut tape, &ps, bufs, false);
            let (pr, _) = enc.forward(&mut cx, r, d3).unwrap();
            pr.levels.iter().map(|&l| tape.value(l).clone()).collect()
        };
        assert_eq!(run(&d1, &mut bufs), run(&d2, &mut bufs));
    }

    #[test]
    fn fixed_seed_forward_is_deterministic() {
        let (enc, ps, mut bufs) = build_tiny(BtsConfig::default(), 9);
        let rgb = rand4((1, 3, 32, 32), 10);
        let depth = rand4((1, 1, 32, 32), 11);
        let run = |bufs: &mut BufferStore| {
            let mut tape = Tape::new();
            let r = tape.leaf(rgb.clone().into_dyn());
            let d = tape.leaf(depth.clone().into_dyn());
            let d3 = depth_stem(&mut tape, d).unwrap();
            let mut cx = Fwd::new(&mut tape, &ps, bufs, false);
            let (pr, pd) = enc.forward(&mut cx, r, d3).unwrap();
            (tape.value(pr.level(5)).clone(), tape.value(pd.level(5)).clone())
        };
        assert_eq!(run(&mut bufs), run(&mut bufs));
    }
}
