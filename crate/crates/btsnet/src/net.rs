//! The assembled network and its configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bts::BtsConfig;
use crate::decoder::{Decoder, DecoderOutput, DecoderVariant};
use crate::encoder::{depth_stem, BackboneConfig, Encoder, FeaturePyramid, Scale};
use crate::error::Result;
use crate::graph::Var;
use crate::ops::Fwd;
use crate::params::{BufferStore, Builder, ParamStore};

/// Everything needed to instantiate the network.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub bts: BtsConfig,
    pub decoder: DecoderVariant,
    /// Unified channel width in the decoder.
    pub k: usize,
}

impl NetworkConfig {
    pub fn for_scale(scale: Scale, bts: BtsConfig, decoder: DecoderVariant) -> Self {
        let backbone = BackboneConfig::for_scale(scale);
        let k = match scale {
            Scale::Full => 256,
            Scale::Tiny => 8,
        };
        NetworkConfig { backbone, bts, decoder, k }
    }

    pub fn full(bts: BtsConfig) -> Self {
        Self::for_scale(Scale::Full, bts, DecoderVariant::Group)
    }

    pub fn tiny(bts: BtsConfig) -> Self {
        Self::for_scale(Scale::Tiny, bts, DecoderVariant::Group)
    }
}

/// Encoder plus decoder; parameters live outside in the stores.
pub struct BtsNet {
    pub cfg: NetworkConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Saliency maps plus the pyramids that produced them.
pub struct NetOutput {
    pub maps: DecoderOutput,
    pub pyramid_r: FeaturePyramid,
    pub pyramid_d: FeaturePyramid,
}

impl BtsNet {
    pub fn new(b: &mut Builder, cfg: NetworkConfig) -> Result<Self> {
        let encoder = Encoder::new(b, cfg.backbone.clone(), cfg.bts)?;
        let decoder = Decoder::new(b, &cfg.backbone.level_channels(), cfg.k, cfg.decoder);
        Ok(BtsNet { cfg, encoder, decoder })
    }

    /// Forward from a 3-channel RGB batch and a 1-channel depth batch.
    /// Saliency maps come back at the input resolution.
    pub fn forward(&self, cx: &mut Fwd, rgb: Var, depth: Var) -> Result<NetOutput> {
        let shape = cx.tape.shape(rgb).to_vec();
        let out_hw = (shape[2], shape[3]);
        let depth3 = depth_stem(cx.tape, depth)?;
        let (pyramid_r, pyramid_d) = self.encoder.forward(cx, rgb, depth3)?;
        let maps =
            self.decoder.forward(cx, &pyramid_r.levels, &pyramid_d.levels, out_hw)?;
        Ok(NetOutput { maps, pyramid_r, pyramid_d })
    }
}

/// A network bundled with its parameter and buffer stores.
pub struct Model {
    pub net: BtsNet,
    pub ps: ParamStore,
    pub bufs: BufferStore,
}

impl Model {
    /// Builds and seeds a fresh model deterministically.
    pub fn build(cfg: NetworkConfig, seed: u64) -> Result<Model> {
        let mut ps = ParamStore::new();
        let mut bufs = BufferStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut ps, &mut bufs, &mut rng);
        let net = BtsNet::new(&mut b, cfg)?;
        Ok(Model { net, ps, bufs })
    }
}
