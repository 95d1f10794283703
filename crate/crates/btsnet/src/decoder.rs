//! Light-weight group decoder and the U-net ablation baseline.
//!
//! The six per-branch pyramid levels are first unified to `k` channels.
//! Levels 0-2 sum into a low-level group on the /2 grid, levels 3-5 into a
//! high-level group on the /16 grid. The fused prediction multiplies and
//! adds the two modalities per group before a shared-structure prediction
//! head; the branch predictions reuse each modality's own groups. The U-net
//! variant replaces only the fused path, keeping three-way supervision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::ops::{BConv, Fwd, PredictionHead};
use crate::params::Builder;

/// Fused-path selector for the decoder ablation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Group,
    Unet,
}

/// The three saliency maps, each at input resolution in `(0,1)`.
pub struct DecoderOutput {
    pub s_c: Var,
    pub s_r: Var,
    pub s_d: Var,
}

struct UnetStage {
    merge: BConv,
    refine: BConv,
}

enum FusedPath {
    Group { fuse_h: BConv, fuse_l: BConv, head_c: PredictionHead },
    Unet { stages: Vec<UnetStage>, head: PredictionHead },
}

/// Decoder over two feature pyramids.
pub struct Decoder {
    pub k: usize,
    pub variant: DecoderVariant,
    unify_r: Vec<BConv>,
    unify_d: Vec<BConv>,
    head_r: PredictionHead,
    head_d: PredictionHead,
    fused: FusedPath,
}

impl Decoder {
    pub fn new(
        b: &mut Builder,
        level_channels: &[usize; 6],
        k: usize,
        variant: DecoderVariant,
    ) -> Self {
        let mut scope = b.child("decoder");
        let unify = |scope: &mut Builder, tag: &str| -> Vec<BConv> {
            let mut u = scope.child("unify");
            level_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| BConv::new(&mut u, &format!("{tag}{i}"), c, k, 3))
                .collect()
        };
        let unify_r = unify(&mut scope, "r");
        let unify_d = unify(&mut scope, "d");
        let head_r = PredictionHead::new(&mut scope, "head_r", 2 * k, k);
        let head_d = PredictionHead::new(&mut scope, "head_d", 2 * k, k);
        let fused = match variant {
            DecoderVariant::Group => {
                let mut fuse = scope.child("fuse");
                let fuse_h = BConv::new(&mut fuse, "high", 2 * k, k, 3);
                let fuse_l = BConv::new(&mut fuse, "low", 2 * k, k, 3);
                let head_c = PredictionHead::new(&mut scope, "head_c", 2 * k, k);
                FusedPath::Group { fuse_h, fuse_l, head_c }
            }
            DecoderVariant::Unet => {
                let mut unet = scope.child("unet");
                // widths 2k,2k,2k,2k,k top-down; skip levels carry 2k channels
                let widths = [2 * k, 2 * k, 2 * k, 2 * k, k];
                let mut prev = 2 * k;
                let mut stages = Vec::new();
                for (idx, &w) in widths.iter().enumerate() {
                    let mut s = unet.child(&format!("stage{idx}"));
                    let merge = BConv::new(&mut s, "merge", prev + 2 * k, w, 3);
                    let refine = BConv::new(&mut s, "refine", w, w, 3);
                    stages.push(UnetStage { merge, refine });
                    prev = w;
                }
                let head = PredictionHead::new(&mut unet, "head", k, k);
                FusedPath::Unet { stages, head }
            }
        };
        Decoder { k, variant, unify_r, unify_d, head_r, head_d, fused }
    }

    /// 3x3 BConv onto every level, unifying channel counts to `k`.
    pub(crate) fn unify_levels(&self, cx: &mut Fwd, levels: &[Var], rgb: bool) -> Vec<Var> {
        let bank = if rgb { &self.unify_r } else { &self.unify_d };
        levels.iter().zip(bank).map(|(&lv, bc)| bc.forward(cx, lv)).collect()
    }

    /// Sums unified levels into the high (/16) and low (/2) groups.
    pub(crate) fn group_levels(&self, cx: &mut Fwd, unified: &[Var]) -> Result<(Var, Var)> {
        assert_eq!(unified.len(), 6);
        let shape_of = |cx: &Fwd, v: Var| cx.tape.shape(v).to_vec();
        for hi in [4usize, 5] {
            if shape_of(cx, unified[hi]) != shape_of(cx, unified[3]) {
                return Err(Error::Config(format!(
                    "high-level strides disagree: level {hi} {:?} vs level 3 {:?}",
                    shape_of(cx, unified[hi]),
                    shape_of(cx, unified[3])
                )));
            }
        }
        let f_h = {
            let s = cx.tape.add(unified[3], unified[4]);
            cx.tape.add(s, unified[5])
        };
        let target = shape_of(cx, unified[0]);
        let up1 = cx.tape.upsample_bilinear(unified[1], target[2], target[3]).map_err(|_| {
            Error::Config("level 1 is finer than level 0; stride table violated".into())
        })?;
        let up2 = cx.tape.upsample_bilinear(unified[2], target[2], target[3]).map_err(|_| {
            Error::Config("level 2 is finer than level 0; stride table violated".into())
        })?;
        let f_l = {
            let s = cx.tape.add(unified[0], up1);
            cx.tape.add(s, up2)
        };
        Ok((f_h, f_l))
    }

    /// `BConv([a*b, a+b])`, the explicit cross-modal fusion.
    pub(crate) fn fuse_pair(&self, cx: &mut Fwd, a: Var, b: Var, high: bool) -> Var {
        let FusedPath::Group { fuse_h, fuse_l, .. } = &self.fused else {
            panic!("fuse_pair is only defined for the group decoder");
        };
        let prod = cx.tape.mul(a, b);
        let sum = cx.tape.add(a, b);
        let cat = cx.tape.concat_channels(&[prod, sum]);
        if high {
            fuse_h.forward(cx, cat)
        } else {
            fuse_l.forward(cx, cat)
        }
    }

    /// `head([Up(f_h), f_l])` at the requested output resolution.
    pub(crate) fn predict(
        &self,
        cx: &mut Fwd,
        head: &PredictionHead,
        f_h: Var,
        f_l: Var,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let target = cx.tape.shape(f_l).to_vec();
        let up = cx.tape.upsample_bilinear(f_h, target[2], target[3])?;
        let cat = cx.tape.concat_channels(&[up, f_l]);
        head.forward(cx, cat, out_hw.0, out_hw.1)
    }

    fn unet_decode(
        &self,
        cx: &mut Fwd,
        u_r: &[Var],
        u_d: &[Var],
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let FusedPath::Unet { stages, head } = &self.fused else {
            panic!("unet_decode is only defined for the unet decoder");
        };
        let cat_levels: Vec<Var> = (0..6)
            .map(|i| cx.tape.concat_channels(&[u_r[i], u_d[i]]))
            .collect();
        let mut x = cat_levels[5];
        for (stage, level) in stages.iter().zip([4usize, 3, 2, 1, 0]) {
            let skip = cat_levels[level];
            let target = cx.tape.shape(skip).to_vec();
            let up = cx.tape.upsample_bilinear(x, target[2], target[3])?;
            let cat = cx.tape.concat_channels(&[up, skip]);
            let y = stage.merge.forward(cx, cat);
            x = stage.refine.forward(cx, y);
        }
        head.forward(cx, x, out_hw.0, out_hw.1)
    }

    /// Full decode of both pyramids into the three supervised maps.
    pub fn forward(
        &self,
        cx: &mut Fwd,
        pyramid_r: &[Var],
        pyramid_d: &[Var],
        out_hw: (usize, usize),
    ) -> Result<DecoderOutput> {
        let u_r = self.unify_levels(cx, pyramid_r, true);
        let u_d = self.unify_levels(cx, pyramid_d, false);
        let (fh_r, fl_r) = self.group_levels(cx, &u_r)?;
        let (fh_d, fl_d) = self.group_levels(cx, &u_d)?;
        let s_r = self.predict(cx, &self.head_r, fh_r, fl_r, out_hw)?;
        let s_d = self.predict(cx, &self.head_d, fh_d, fl_d, out_hw)?;
        let s_c = match &self.fused {
            FusedPath::Group { head_c, .. } => {
                let f_c_h = self.fuse_pair(cx, fh_r, fh_d, true);
                let f_c_l = self.fuse_pair(cx, fl_r, fl_d, false);
                self.predict(cx, head_c, f_c_h, f_c_l, out_hw)?
            }
            FusedPath::Unet { .. } => self.unet_decode(cx, &u_r, &u_d, out_hw)?,
        };
        Ok(DecoderOutput { s_c, s_r, s_d })
    }
}
