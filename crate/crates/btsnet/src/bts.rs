//! Bi-directional transfer-and-selection block.
//!
//! Stage one transfers spatial attention across modalities: the map derived
//! from one branch multiplicatively gates the other branch's features, with
//! an `SA_r + SA_r * SA_d` term preserving modality individuality. Stage two
//! selects channels with softmax weights computed from globally pooled
//! features. Direction, residual and attention-order switches reproduce every
//! ablation variant while keeping both attention sub-modules built.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::ops::{ChannelSelect, Fwd, SpatialAttention};
use crate::params::Builder;

/// Which branch feeds spatial attention into the other.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// No cross-modal connection; each branch keeps its own attention.
    None,
    /// RGB attention is transferred into the depth branch.
    RToD,
    /// Depth attention is transferred into the RGB branch.
    DToR,
    /// Both transfers, the default design.
    Bidirectional,
}

/// Order of the spatial and channel attention stages.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOrder {
    /// Spatial transfer only; channel selection skipped.
    SaOnly,
    /// Channel selection first, then spatial transfer.
    CaThenSa,
    /// Spatial transfer first, then channel selection (default).
    SaThenCa,
}

/// Switchboard for the interaction-direction and attention-design ablations.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BtsConfig {
    pub direction: Direction,
    #[serde(default)]
    pub residual: bool,
    #[serde(default = "default_order")]
    pub attention_order: AttentionOrder,
}

fn default_order() -> AttentionOrder {
    AttentionOrder::SaThenCa
}

impl Default for BtsConfig {
    fn default() -> Self {
        BtsConfig {
            direction: Direction::Bidirectional,
            residual: false,
            attention_order: AttentionOrder::SaThenCa,
        }
    }
}

impl BtsConfig {
    /// All direction x residual x order combinations, for shape fuzzing.
    pub fn all_combinations() -> Vec<BtsConfig> {
        let mut out = Vec::new();
        for direction in [Direction::None, Direction::RToD, Direction::DToR, Direction::Bidirectional] {
            for residual in [false, true] {
                for attention_order in
                    [AttentionOrder::SaOnly, AttentionOrder::CaThenSa, AttentionOrder::SaThenCa]
                {
                    out.push(BtsConfig { direction, residual, attention_order });
                }
            }
        }
        out
    }
}

/// Spatial-attention transfer on precomputed maps.
///
/// Receiving branches see `(SA_other + SA_other * SA_own) * bf`; branches
/// that receive nothing keep their own-modality gating `SA_own * bf`.
pub(crate) fn transfer_maps(
    tape: &mut Tape,
    sa_r: Var,
    sa_d: Var,
    bf_r: Var,
    bf_d: Var,
    direction: Direction,
) -> (Var, Var) {
    let receive = |tape: &mut Tape, sa_own: Var, sa_other: Var, bf: Var| {
        let cross = tape.mul(sa_other, sa_own);
        let gate = tape.add(sa_other, cross);
        tape.mul(gate, bf)
    };
    let keep = |tape: &mut Tape, sa_own: Var, bf: Var| tape.mul(sa_own, bf);
    match direction {
        Direction::None => (keep(tape, sa_r, bf_r), keep(tape, sa_d, bf_d)),
        Direction::RToD => (keep(tape, sa_r, bf_r), receive(tape, sa_d, sa_r, bf_d)),
        Direction::DToR => (receive(tape, sa_r, sa_d, bf_r), keep(tape, sa_d, bf_d)),
        Direction::Bidirectional => (
            receive(tape, sa_r, sa_d, bf_r),
            receive(tape, sa_d, sa_r, bf_d),
        ),
    }
}

/// One BTS module for a pair of same-stage feature maps.
pub struct BtsBlock {
    pub sa_r: SpatialAttention,
    pub sa_d: SpatialAttention,
    pub ca_r: ChannelSelect,
    pub ca_d: ChannelSelect,
    pub cfg: BtsConfig,
}

impl BtsBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, cfg: BtsConfig) -> Self {
        let mut scope = b.child(name);
        BtsBlock {
            sa_r: SpatialAttention::new(&mut scope, "sa_r", channels),
            sa_d: SpatialAttention::new(&mut scope, "sa_d", channels),
            ca_r: ChannelSelect::new(&mut scope, "ca_r", channels),
            ca_d: ChannelSelect::new(&mut scope, "ca_d", channels),
            cfg,
        }
    }

    fn check_shapes(&self, tape: &Tape, bf_r: Var, bf_d: Var) -> Result<()> {
        if tape.shape(bf_r) != tape.shape(bf_d) {
            return Err(Error::Config(format!(
                "BTS branches must share a shape, got {:?} vs {:?}",
                tape.shape(bf_r),
                tape.shape(bf_d)
            )));
        }
        Ok(())
    }

    /// The bi-directional transfer stage alone.
    pub fn transfer(&self, cx: &mut Fwd, bf_r: Var, bf_d: Var) -> Result<(Var, Var)> {
        self.check_shapes(cx.tape, bf_r, bf_d)?;
        let sa_r = self.sa_r.forward(cx, bf_r);
        let sa_d = self.sa_d.forward(cx, bf_d);
        Ok(transfer_maps(cx.tape, sa_r, sa_d, bf_r, bf_d, self.cfg.direction))
    }

    /// Full block: attention stages in the configured order, optional
    /// residual, shape preserved.
    pub fn forward(&self, cx: &mut Fwd, bf_r: Var, bf_d: Var) -> Result<(Var, Var)> {
        self.check_shapes(cx.tape, bf_r, bf_d)?;
        let (f_r, f_d) = match self.cfg.attention_order {
            AttentionOrder::SaOnly | AttentionOrder::SaThenCa => {
                let sa_r = self.sa_r.forward(cx, bf_r);
                let sa_d = self.sa_d.forward(cx, bf_d);
                return Ok(self.forward_with_maps(cx, bf_r, bf_d, sa_r, sa_d));
            }
            AttentionOrder::CaThenSa => {
                // channel weights from the raw features, transfer on the
                // reweighted ones
                let (_, cw_r) = self.ca_r.forward(cx, bf_r);
                let (_, cw_d) = self.ca_d.forward(cx, bf_d);
                let sa_r = self.sa_r.forward(cx, cw_r);
                let sa_d = self.sa_d.forward(cx, cw_d);
                transfer_maps(cx.tape, sa_r, sa_d, cw_r, cw_d, self.cfg.direction)
            }
        };
        Ok(self.apply_residual(cx, f_r, f_d, bf_r, bf_d))
    }

    /// Same as [`forward`](Self::forward) for the SA-first orders but with
    /// injected attention maps; the test seam for forcing SA to 0 or 1.
    pub(crate) fn forward_with_maps(
        &self,
        cx: &mut Fwd,
        bf_r: Var,
        bf_d: Var,
        sa_r: Var,
        sa_d: Var,
    ) -> (Var, Var) {
        let (cf_r, cf_d) = transfer_maps(cx.tape, sa_r, sa_d, bf_r, bf_d, self.cfg.direction);
        let (f_r, f_d) = match self.cfg.attention_order {
            AttentionOrder::SaOnly => (cf_r, cf_d),
            _ => {
                let (_, f_r) = self.ca_r.forward(cx, cf_r);
                let (_, f_d) = self.ca_d.forward(cx, cf_d);
                (f_r, f_d)
            }
        };
        self.apply_residual(cx, f_r, f_d, bf_r, bf_d)
    }

    fn apply_residual(
        &self,
        cx: &mut Fwd,
        f_r: Var,
        f_d: Var,
        bf_r: Var,
        bf_d: Var,
    ) -> (Var, Var) {
        if self.cfg.residual {
            (cx.tape.add(f_r, bf_r), cx.tape.add(f_d, bf_d))
        } else {
            (f_r, f_d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{BufferStore, ParamStore};
    use ndarray::{Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(channels: usize, cfg: BtsConfig) -> (BtsBlock, ParamStore, BufferStore) {
        let mut ps = ParamStore::new();
        let mut bufs = BufferStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let blk = BtsBlock::new(&mut b, "bts", channels, cfg);
        (blk, ps, bufs)
    }

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forced_unit_attention_doubles_receiving_branch() {
        let mut tape = Tape::new();
        let bf_r = tape.leaf(rand4((1, 2, 3, 3), 1).into_dyn());
        let bf_d = tape.leaf(rand4((1, 2, 3, 3), 2).into_dyn());
        let ones = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0));
        let (_, cf_d) =
            transfer_maps(&mut tape, ones, ones, bf_r, bf_d, Direction::Bidirectional);
        let want = tape.value(bf_d).mapv(|v| 2.0 * v);
        assert_eq!(tape.value(cf_d), &want);
    }

    #[test]
    fn forced_zero_rgb_attention_annihilates_depth() {
        for direction in [Direction::Bidirectional, Direction::RToD] {
            let mut tape = Tape::new();
            let bf_r = tape.leaf(rand4((1, 2, 3, 3), 3).into_dyn());
            let bf_d = tape.leaf(rand4((1, 2, 3, 3), 4).into_dyn());
            let zero = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1, 3, 3])));
            let half = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 0.5));
            let (_, cf_d) = transfer_maps(&mut tape, zero, half, bf_r, bf_d, direction);
            assert!(tape.value(cf_d).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn transfer_matches_elementwise_formula_oracle() {
        let cfg = BtsConfig::default();
        let (blk, ps, mut bufs) = block(2, cfg);
        let bf_r = rand4((1, 2, 3, 3), 5);
        let bf_d = rand4((1, 2, 3, 3), 6);
        let mut tape = Tape::new();
        let r = tape.leaf(bf_r.clone().into_dyn());
        let d = tape.leaf(bf_d.clone().into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let (cf_r, cf_d) = blk.transfer(&mut cx, r, d).unwrap();

        // recompute SA maps and Eq. 2 + mirror directly
        let conv = |sa: &SpatialAttention, x: &Array4<f64>| -> Array4<f64> {
            let w = ps.value(sa.conv.weight).view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let bias = ps.value(sa.conv.bias.unwrap()).as_slice().unwrap().to_vec();
            crate::ops::conv::oracle::conv_oracle(
                x,
                &w.to_owned(),
                Some(&bias),
                &crate::ops::ConvSpec::same(3),
            )
            .mapv(crate::graph::stable_sigmoid)
        };
        let sar = conv(&blk.sa_r, &bf_r);
        let sad = conv(&blk.sa_d, &bf_d);
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let a = sar[[0, 0, i, j]];
                    let b = sad[[0, 0, i, j]];
                    let want_d = (a + a * b) * bf_d[[0, c, i, j]];
                    let want_r = (b + b * a) * bf_r[[0, c, i, j]];
                    let got_d = tape.value(cf_d)[IxDyn(&[0, c, i, j])];
                    let got_r = tape.value(cf_r)[IxDyn(&[0, c, i, j])];
                    assert!((want_d - got_d).abs() < 1e-9, "{want_d} vs {got_d}");
                    assert!((want_r - got_r).abs() < 1e-9, "{want_r} vs {got_r}");
                }
            }
        }
    }

    #[test]
    fn forward_matches_composed_transfer_then_select_oracle() {
        let cfg = BtsConfig::default();
        let (blk, ps, mut bufs) = block(2, cfg);
        let bf_r = rand4((1, 2, 3, 3), 7);
        let bf_d = rand4((1, 2, 3, 3), 8);

        let mut tape = Tape::new();
        let r = tape.leaf(bf_r.clone().into_dyn());
        let d = tape.leaf(bf_d.clone().into_dyn());
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        let (f_r, f_d) = blk.forward(&mut cx, r, d).unwrap();

        // compose the two already-verified oracles on a fresh tape
        let mut tape2 = Tape::new();
        let r2 = tape2.leaf(bf_r.into_dyn());
        let d2 = tape2.leaf(bf_d.into_dyn());
        let mut cx2 = Fwd::new(&mut tape2, &ps, &mut bufs, true);
        let (cf_r, cf_d) = blk.transfer(&mut cx2, r2, d2).unwrap();
        let (_, want_r) = blk.ca_r.forward(&mut cx2, cf_r);
        let (_, want_d) = blk.ca_d.forward(&mut cx2, cf_d);
        for (got, want) in
            [(f_r, want_r), (f_d, want_d)].iter().map(|&(g, w)| (tape.value(g), tape2.value(w)))
        {
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_preserved_for_every_config() {
        for cfg in BtsConfig::all_combinations() {
            let (blk, ps, mut bufs) = block(3, cfg);
            let mut tape = Tape::new();
            let r = tape.leaf(rand4((2, 3, 4, 5), 9).into_dyn());
            let d = tape.leaf(rand4((2, 3, 4, 5), 10).into_dyn());
            let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
            let (f_r, f_d) = blk.forward(&mut cx, r, d).unwrap();
            assert_eq!(tape.shape(f_r), &[2, 3, 4, 5], "{cfg:?}");
            assert_eq!(tape.shape(f_d), &[2, 3, 4, 5], "{cfg:?}");
        }
    }

    #[test]
    fn none_direction_isolates_branches_bitwise() {
        let cfg = BtsConfig { direction: Direction::None, ..Default::default() };
        let (blk, ps, mut bufs) = block(2, cfg);
        let bf_r = rand4((1, 2, 4, 4), 12);
        let bf_d = rand4((1, 2, 4, 4), 13);
        let mut perturbed = bf_d.clone();
        perturbed[[0, 1, 2, 2]] += 5.0;

        let run = |d_input: &Array4<f64>, bufs: &mut BufferStore| -> ArrayD<f64> {
            let mut tape = Tape::new();
            let r = tape.leaf(bf_r.clone().into_dyn());
            let d = tape.leaf(d_input.clone().into_dyn());
            let mut cx = Fwd::new(&mut tape, &ps, bufs, false);
            let (f_r, _) = blk.forward(&mut cx, r, d).unwrap();
            tape.value(f_r).clone()
        };
        assert_eq!(run(&bf_d, &mut bufs), run(&perturbed, &mut bufs));
    }

    #[test]
    fn gradient_paths_follow_direction() {
        let checks = [
            (Direction::None, false, false),
            (Direction::RToD, false, true),
            (Direction::DToR, true, false),
            (Direction::Bidirectional, true, true),
        ];
        for (direction, r_sees_d, d_sees_r) in checks {
            let cfg = BtsConfig { direction, ..Default::default() };
            let (blk, ps, mut bufs) = block(2, cfg);
            let mut tape = Tape::new();
            let r = tape.leaf(rand4((1, 2, 3, 3), 20).into_dyn());
            let d = tape.leaf(rand4((1, 2, 3, 3), 21).into_dyn());
            let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
            let (f_r, f_d) = blk.forward(&mut cx, r, d).unwrap();

            let s_r = tape.mean_all(f_r);
            let g = tape.backward(s_r);
            let r_grad_from_d = g.wrt(d).map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false);
            assert_eq!(r_grad_from_d, r_sees_d, "{direction:?}: df_r/dbf_d");

            let s_d = tape.mean_all(f_d);
            let g = tape.backward(s_d);
            let d_grad_from_r = g.wrt(r).map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false);
            assert_eq!(d_grad_from_r, d_sees_r, "{direction:?}: df_d/dbf_r");
        }
    }

    #[test]
    fn residual_with_zeroed_attention_is_identity() {
        for residual in [true, false] {
            let cfg = BtsConfig { residual, ..Default::default() };
            let (blk, ps, mut bufs) = block(2, cfg);
            let bf_r = rand4((1, 2, 3, 3), 30);
            let bf_d = rand4((1, 2, 3, 3), 31);
            let mut tape = Tape::new();
            let r = tape.leaf(bf_r.clone().into_dyn());
            let d = tape.leaf(bf_d.clone().into_dyn());
            let zero_r = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1, 3, 3])));
            let zero_d = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1, 3, 3])));
            let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
            let (f_r, f_d) = blk.forward_with_maps(&mut cx, r, d, zero_r, zero_d);
            if residual {
                assert_eq!(tape.value(f_r), &bf_r.into_dyn());
                assert_eq!(tape.value(f_d), &bf_d.into_dyn());
            } else {
                assert!(tape.value(f_r).iter().all(|&v| v == 0.0));
                assert!(tape.value(f_d).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn mismatched_branch_shapes_are_rejected() {
        let (blk, ps, mut bufs) = block(2, BtsConfig::default());
        let mut tape = Tape::new();
        let r = tape.leaf(ArrayD::zeros(IxDyn(&[1, 2, 3, 3])));
        let d = tape.leaf(ArrayD::zeros(IxDyn(&[1, 2, 4, 4])));
        let mut cx = Fwd::new(&mut tape, &ps, &mut bufs, true);
        assert!(blk.forward(&mut cx, r, d).is_err());
    }
}
