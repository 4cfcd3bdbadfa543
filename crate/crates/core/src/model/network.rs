use super::config::{BlockKind, DecoderMode, ModelConfig};
use crate::autodiff::{ConvSpec, Var};
use crate::error::{shape_err, Result};
use crate::nn::group_attention::{GroupAttentionBlock, GroupAttentionConfig, PairMode};
use crate::nn::variants::{VariantBlock, VariantConfig, VariantKind};
use crate::nn::{BatchNorm, Conv, Init, ParamStore, Session};

#[derive(Clone, Debug)]
pub enum Block {
    Group(GroupAttentionBlock),
    Variant(VariantBlock),
}

impl Block {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
        in_channels: usize,
        width: usize,
    ) -> Result<Self> {
        let variant = |kind| VariantConfig {
            kind,
            in_channels,
            width,
            body_kernel: cfg.body_kernel,
            attention_kernel: cfg.attention_kernel,
            cardinality: cfg.cardinality,
            leaky_slope: cfg.leaky_slope,
            se_reduction: cfg.se_reduction,
        };
        let group = |pair_mode| GroupAttentionConfig {
            in_channels,
            width,
            body_kernel: cfg.body_kernel,
            attention_kernel: cfg.attention_kernel,
            leaky_slope: cfg.leaky_slope,
            se_reduction: cfg.se_reduction,
            combine: cfg.combine_mode,
            pair_mode,
        };
        Ok(match cfg.block_kind {
            BlockKind::GroupAttention => Block::Group(GroupAttentionBlock::register(
                store,
                init,
                name,
                &group(PairMode::Hadamard),
            )?),
            BlockKind::ConcatHorizontal => Block::Group(GroupAttentionBlock::register(
                store,
                init,
                name,
                &group(PairMode::ConcatHorizontal),
            )?),
            kind => {
                let k = match kind {
                    BlockKind::Basic => VariantKind::Basic,
                    BlockKind::IdentityPreact => VariantKind::IdentityPreact,
                    BlockKind::ResNeXt => VariantKind::ResNeXt,
                    BlockKind::ResNeXtSe => VariantKind::ResNeXtSe,
                    _ => VariantKind::ResA,
                };
                Block::Variant(VariantBlock::register(store, init, name, &variant(k))?)
            }
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Block::Group(b) => b.forward(s, x),
            Block::Variant(b) => b.forward(s, x),
        }
    }
}

/// `conv(k) -> bn -> LeakyReLU -> conv1x1 -> sigmoid`, producing one channel.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv1: Conv,
    pub bn: BatchNorm,
    pub conv2: Conv,
    pub slope: f64,
}

impl Head {
    fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let hw = cfg.head_width;
        Ok(Head {
            conv1: Conv::register(
                store,
                init,
                &format!("{name}.conv1"),
                ConvSpec::new(in_channels, hw, cfg.body_kernel),
            )?,
            bn: BatchNorm::register(store, &format!("{name}.bn"), hw)?,
            conv2: Conv::register(
                store,
                init,
                &format!("{name}.conv2"),
                ConvSpec::new(hw, 1, cfg.attention_kernel).with_bias(true),
            )?,
            slope: cfg.leaky_slope,
        })
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn.forward(s, h)?;
        let h = s.graph().leaky_relu(h, self.slope);
        let z = self.conv2.forward(s, h)?;
        Ok(s.graph().sigmoid(z))
    }
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Final `(N, 1, H, W)` probability map.
    pub prediction: Var,
    /// Per-decoder-scale head outputs upsampled to full resolution, scale 0
    /// first (empty for the plain decoder).
    pub scale_heads: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub stem: Conv,
    pub encoder: Vec<Block>,
    /// `decoder[i]` runs at scale `i` (`0..S-1`).
    pub decoder: Vec<Block>,
    pub heads: Vec<Head>,
    pub fuse: Head,
    pub dropout: f64,
    pub slope: f64,
}

impl Network {
    pub fn register(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let s_count = cfg.scales;
        let w = &cfg.widths;
        let stem = Conv::register(
            store,
            init,
            "stem",
            ConvSpec::new(cfg.in_channels, w[0], cfg.first_kernel).with_bias(true),
        )?;
        let mut encoder = Vec::with_capacity(s_count);
        for i in 0..s_count {
            let cin = if i == 0 { w[0] } else { w[i - 1] };
            encoder.push(Block::register(
                store,
                init,
                &format!("enc{i}"),
                cfg,
                cin,
                w[i],
            )?);
        }
        let mut decoder = Vec::with_capacity(s_count - 1);
        for i in 0..s_count - 1 {
            decoder.push(Block::register(
                store,
                init,
                &format!("dec{i}"),
                cfg,
                w[i + 1],
                w[i],
            )?);
        }
        let (heads, fuse_in) = match cfg.decoder_mode {
            DecoderMode::Multiscale => {
                let heads = (0..s_count - 1)
                    .map(|i| Head::register(store, init, &format!("head{i}"), w[i], cfg))
                    .collect::<Result<Vec<_>>>()?;
                (heads, s_count - 1)
            }
            DecoderMode::Plain => (Vec::new(), w[0]),
        };
        let fuse = Head::register(store, init, "fuse", fuse_in, cfg)?;
        Ok(Network {
            stem,
            encoder,
            decoder,
            heads,
            fuse,
            dropout: cfg.bottleneck_dropout,
            slope: cfg.leaky_slope,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<ModelOutput> {
        s.scope("stem");
        let h = self.stem.forward(s, x)?;
        let mut h = s.graph().leaky_relu(h, self.slope);

        let last = self.encoder.len() - 1;
        let mut skips = Vec::with_capacity(last);
        for (i, block) in self.encoder.iter().enumerate() {
            s.scope(&format!("enc{i}"));
            h = block.forward(s, h)?;
            if i < last {
                skips.push(h);
                h = s.graph().max_pool2(h)?;
            } else {
                let seed = s.next_dropout_seed();
                let mode = s.mode();
                h = s.graph().dropout(h, self.dropout, mode, seed)?;
            }
        }

        let mut decoded = vec![None; last];
        for i in (0..last).rev() {
            s.scope(&format!("dec{i}"));
            let up = s.graph().upsample_repeat2(h)?;
            let d = self.decoder[i].forward(s, up)?;
            h = skip_connect(s, skips[i], d)?;
            decoded[i] = Some(h);
        }

        let mut scale_heads = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            s.scope(&format!("head{i}"));
            let mut p = head.forward(s, decoded[i].expect("decoded every scale"))?;
            for _ in 0..i {
                p = s.graph().upsample_repeat2(p)?;
            }
            scale_heads.push(p);
        }
        s.scope("fuse");
        let fuse_in = if scale_heads.is_empty() {
            h
        } else {
            s.graph().concat_channels(&scale_heads)?
        };
        let prediction = self.fuse.forward(s, fuse_in)?;
        s.scope("");
        Ok(ModelOutput {
            prediction,
            scale_heads,
        })
    }
}

/// Additive encoder-to-decoder skip.
pub fn skip_connect(s: &mut Session, encoder: Var, decoder: Var) -> Result<Var> {
    if s.graph_ref().shape(encoder) != s.graph_ref().shape(decoder) {
        return Err(shape_err!(
            "skip connection {:?} vs {:?}",
            s.graph_ref().shape(encoder),
            s.graph_ref().shape(decoder)
        ));
    }
    s.graph().add(encoder, decoder)
}
