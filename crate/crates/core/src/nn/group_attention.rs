//! Residual group attention block.
//!
//! ```text
//! e = entry1x1(x)                      width C, split into 4 groups of C/4
//! pair 0: A0 = attn(g0) ⊙ res(g1)      group 0 gates group 1
//! pair 1: A1 = attn(g2) ⊙ res(g3)      group 2 gates group 3
//! P_j = post1x1_j(A_j)                 C/4 -> 2·C/4
//! M = concat(P_0, P_1)                 width C
//! y = SE(combine(M)) + e
//! ```
//! `combine` is a shared 1x1 convolution, or a fixed channel shuffle.
//! `attn` is two bn-LeakyReLU-conv stages then conv-sigmoid; `res` is two
//! bn-LeakyReLU-conv stages plus an identity skip.

use serde::{Deserialize, Serialize};

use super::layers::{BnActConv, Conv};
use super::params::{Init, ParamStore};
use super::se::SqueezeExcite;
use super::session::Session;
use super::shuffle::channel_shuffle;
use crate::autodiff::{ConvSpec, Var};
use crate::error::{config_err, shape_err, Result};

/// Number of filter groups.
pub const GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[serde(rename = "permutation_equivariant_1x1")]
    PermutationEquivariant1x1,
    ChannelShuffle,
}

/// How the two groups of a pair are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMode {
    /// Left group is an attention group gating the right group.
    Hadamard,
    /// Both groups are residual groups, concatenated depthwise.
    ConcatHorizontal,
}

#[derive(Clone, Debug)]
pub struct GroupAttentionConfig {
    pub in_channels: usize,
    pub width: usize,
    pub body_kernel: usize,
    pub attention_kernel: usize,
    pub leaky_slope: f64,
    pub se_reduction: usize,
    pub combine: CombineMode,
    pub pair_mode: PairMode,
}

#[derive(Clone, Debug)]
pub struct AttentionSubblock {
    pub stages: [BnActConv; 2],
    pub gate: Conv,
}

impl AttentionSubblock {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        body_kernel: usize,
        attention_kernel: usize,
        slope: f64,
    ) -> Result<Self> {
        let stages = [
            BnActConv::register(store, init, name, 1, channels, body_kernel, slope)?,
            BnActConv::register(store, init, name, 2, channels, body_kernel, slope)?,
        ];
        let gate = Conv::register(
            store,
            init,
            &format!("{name}.gate"),
            ConvSpec::new(channels, channels, attention_kernel).with_bias(true),
        )?;
        Ok(AttentionSubblock { stages, gate })
    }

    /// Per-pixel map in (0, 1), same shape as the input.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.stages[0].forward(s, x)?;
        let h = self.stages[1].forward(s, h)?;
        let z = self.gate.forward(s, h)?;
        Ok(s.graph().sigmoid(z))
    }
}

#[derive(Clone, Debug)]
pub struct ResidualSubblock {
    pub stages: [BnActConv; 2],
}

impl ResidualSubblock {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        body_kernel: usize,
        slope: f64,
    ) -> Result<Self> {
        Ok(ResidualSubblock {
            stages: [
                BnActConv::register(store, init, name, 1, channels, body_kernel, slope)?,
                BnActConv::register(store, init, name, 2, channels, body_kernel, slope)?,
            ],
        })
    }

    /// `F(x)` alone, without the skip.
    pub fn residual(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.stages[0].forward(s, x)?;
        self.stages[1].forward(s, h)
    }

    /// `x + F(x)`
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let f = self.residual(s, x)?;
        s.graph().add(x, f)
    }
}

#[derive(Clone, Debug)]
pub enum LeftGroup {
    Attention(AttentionSubblock),
    Residual(ResidualSubblock),
}

#[derive(Clone, Debug)]
pub struct GroupPair {
    pub left: LeftGroup,
    pub feature: ResidualSubblock,
    pub post: Conv,
}

#[derive(Clone, Debug)]
pub struct GroupAttentionBlock {
    pub entry: Conv,
    pub pairs: Vec<GroupPair>,
    pub combine: Option<Conv>,
    pub se: SqueezeExcite,
    pub width: usize,
    pub group_width: usize,
    pub pair_mode: PairMode,
    /// `slot_order[k]` is the logical group written to concat slot `k`;
    /// logical groups `2j, 2j+1` are the two halves of pair `j`'s output.
    pub slot_order: [usize; GROUPS],
}

/// Intermediate values of one block evaluation.
#[derive(Clone, Debug)]
pub struct GroupAttentionTrace {
    pub entry: Var,
    pub attention_maps: Vec<Var>,
    pub out: Var,
}

impl GroupAttentionBlock {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: &GroupAttentionConfig,
    ) -> Result<Self> {
        if cfg.width == 0 || !cfg.width.is_multiple_of(GROUPS) {
            return Err(config_err!(
                "group attention width {} not divisible by {GROUPS}",
                cfg.width
            ));
        }
        let gw = cfg.width / GROUPS;
        let entry = Conv::register(
            store,
            init,
            &format!("{name}.entry"),
            ConvSpec::new(cfg.in_channels, cfg.width, 1).with_bias(true),
        )?;
        let mut pairs = Vec::with_capacity(GROUPS / 2);
        for j in 0..GROUPS / 2 {
            let p = format!("{name}.pair{j}");
            let (left, post_in) = match cfg.pair_mode {
                PairMode::Hadamard => (
                    LeftGroup::Attention(AttentionSubblock::register(
                        store,
                        init,
                        &format!("{p}.attn"),
                        gw,
                        cfg.body_kernel,
                        cfg.attention_kernel,
                        cfg.leaky_slope,
                    )?),
                    gw,
                ),
                PairMode::ConcatHorizontal => (
                    LeftGroup::Residual(ResidualSubblock::register(
                        store,
                        init,
                        &format!("{p}.left"),
                        gw,
                        cfg.body_kernel,
                        cfg.leaky_slope,
                    )?),
                    2 * gw,
                ),
            };
            let feature = ResidualSubblock::register(
                store,
                init,
                &format!("{p}.feat"),
                gw,
                cfg.body_kernel,
                cfg.leaky_slope,
            )?;
            let post = Conv::register(
                store,
                init,
                &format!("{p}.post"),
                ConvSpec::new(post_in, 2 * gw, 1).with_bias(true),
            )?;
            pairs.push(GroupPair {
                left,
                feature,
                post,
            });
        }
        let combine = match cfg.combine {
            CombineMode::PermutationEquivariant1x1 => Some(Conv::register(
                store,
                init,
                &format!("{name}.combine"),
                ConvSpec::new(cfg.width, cfg.width, 1).with_bias(true),
            )?),
            CombineMode::ChannelShuffle => None,
        };
        let se = SqueezeExcite::register(
            store,
            init,
            &format!("{name}.se"),
            cfg.width,
            cfg.se_reduction,
        )?;
        Ok(GroupAttentionBlock {
            entry,
            pairs,
            combine,
            se,
            width: cfg.width,
            group_width: gw,
            pair_mode: cfg.pair_mode,
            slot_order: [0, 1, 2, 3],
        })
    }

    pub fn set_slot_order(&mut self, order: [usize; GROUPS]) -> Result<()> {
        let mut seen = [false; GROUPS];
        for &o in &order {
            if o >= GROUPS || std::mem::replace(&mut seen[o], true) {
                return Err(config_err!("slot order {order:?} is not a permutation"));
            }
        }
        self.slot_order = order;
        Ok(())
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        Ok(self.trace(s, x)?.out)
    }

    pub fn trace(&self, s: &mut Session, x: Var) -> Result<GroupAttentionTrace> {
        let e = self.entry.forward(s, x)?;
        let gw = self.group_width;
        let mut attention_maps = Vec::new();
        let mut pair_outputs = Vec::with_capacity(self.pairs.len());
        for (j, pair) in self.pairs.iter().enumerate() {
            let left_in = s.graph().narrow_channels(e, 2 * j * gw, gw)?;
            let right_in = s.graph().narrow_channels(e, (2 * j + 1) * gw, gw)?;
            let o = pair.feature.forward(s, right_in)?;
            let merged = match &pair.left {
                LeftGroup::Attention(attn) => {
                    let a = attn.forward(s, left_in)?;
                    attention_maps.push(a);
                    s.graph().mul(a, o)?
                }
                LeftGroup::Residual(res) => {
                    let l = res.forward(s, left_in)?;
                    s.graph().concat_channels(&[l, o])?
                }
            };
            pair_outputs.push(pair.post.forward(s, merged)?);
        }
        let m = if self.slot_order == [0, 1, 2, 3] {
            s.graph().concat_channels(&pair_outputs)?
        } else {
            let mut slots = Vec::with_capacity(GROUPS);
            for &logical in &self.slot_order {
                let src = pair_outputs[logical / 2];
                slots.push(s.graph().narrow_channels(src, (logical % 2) * gw, gw)?);
            }
            s.graph().concat_channels(&slots)?
        };
        let combined = match &self.combine {
            Some(conv) => conv.forward(s, m)?,
            None => channel_shuffle(s.graph(), m, GROUPS)?,
        };
        let recal = self.se.forward(s, combined)?;
        if s.graph_ref().shape(recal) != s.graph_ref().shape(e) {
            return Err(shape_err!("group attention output does not match skip"));
        }
        let out = s.graph().add(recal, e)?;
        Ok(GroupAttentionTrace {
            entry: e,
            attention_maps,
            out,
        })
    }
}
