//! Comparison residual blocks. Every kind starts with a 1x1 entry projection
//! `e = entry(x)` and ends with an additive skip from `e`.
//!
//! | kind              | output                                       |
//! |-------------------|----------------------------------------------|
//! | `Basic`           | `relu(e + bn(conv(relu(bn(conv(e))))))`      |
//! | `IdentityPreact`  | `e + conv(relu(bn(conv(relu(bn(e))))))`      |
//! | `ResNeXt`         | `e + Σ_i T_i(e)`                             |
//! | `ResNeXtSe`       | `e + SE(Σ_i T_i(e))`                         |
//! | `ResA`            | `e + sigmoid(conv1x1(F(e))) ⊙ e`             |
//!
//! `T_i` is 1x1 (C -> C/card), bn, ReLU, kxk, bn, ReLU, 1x1 (C/card -> C).
//! `F` is two bn-LeakyReLU-conv stages.

use super::group_attention::ResidualSubblock;
use super::layers::{BatchNorm, Conv};
use super::params::{Init, ParamStore};
use super::se::SqueezeExcite;
use super::session::Session;
use crate::autodiff::{ConvSpec, Var};
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantKind {
    Basic,
    IdentityPreact,
    ResNeXt,
    ResNeXtSe,
    ResA,
}

#[derive(Clone, Debug)]
pub struct VariantConfig {
    pub kind: VariantKind,
    pub in_channels: usize,
    pub width: usize,
    pub body_kernel: usize,
    pub attention_kernel: usize,
    pub cardinality: usize,
    pub leaky_slope: f64,
    pub se_reduction: usize,
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        index: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let conv = Conv::register(store, init, &format!("{name}.conv{index}"), spec)?;
        let bn = BatchNorm::register(store, &format!("{name}.bn{index}"), spec.out_channels)?;
        Ok(ConvBn { conv, bn })
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }
}

/// One ResNeXt transformation `T_i`.
#[derive(Clone, Debug)]
pub struct ResNeXtBranch {
    pub reduce: ConvBn,
    pub body: ConvBn,
    pub expand: Conv,
}

impl ResNeXtBranch {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.reduce.forward(s, x)?;
        let h = s.graph().relu(h);
        let h = self.body.forward(s, h)?;
        let h = s.graph().relu(h);
        self.expand.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub enum VariantBody {
    Basic([ConvBn; 2]),
    IdentityPreact([(BatchNorm, Conv); 2]),
    ResNeXt {
        branches: Vec<ResNeXtBranch>,
        se: Option<SqueezeExcite>,
    },
    ResA {
        features: ResidualSubblock,
        gate: Conv,
    },
}

#[derive(Clone, Debug)]
pub struct VariantBlock {
    pub kind: VariantKind,
    pub entry: Conv,
    pub body: VariantBody,
}

impl VariantBlock {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: &VariantConfig,
    ) -> Result<Self> {
        let c = cfg.width;
        let k = cfg.body_kernel;
        let entry = Conv::register(
            store,
            init,
            &format!("{name}.entry"),
            ConvSpec::new(cfg.in_channels, c, 1).with_bias(true),
        )?;
        let body = match cfg.kind {
            VariantKind::Basic => VariantBody::Basic([
                ConvBn::register(store, init, name, 1, ConvSpec::new(c, c, k))?,
                ConvBn::register(store, init, name, 2, ConvSpec::new(c, c, k))?,
            ]),
            VariantKind::IdentityPreact => {
                let mut stage = |i: usize| -> Result<(BatchNorm, Conv)> {
                    Ok((
                        BatchNorm::register(store, &format!("{name}.bn{i}"), c)?,
                        Conv::register(
                            store,
                            init,
                            &format!("{name}.conv{i}"),
                            ConvSpec::new(c, c, k),
                        )?,
                    ))
                };
                VariantBody::IdentityPreact([stage(1)?, stage(2)?])
            }
            VariantKind::ResNeXt | VariantKind::ResNeXtSe => {
                let card = cfg.cardinality;
                if card == 0 || !c.is_multiple_of(card) {
                    return Err(config_err!(
                        "ResNeXt width {c} not divisible by cardinality {card}"
                    ));
                }
                let d = c / card;
                let mut branches = Vec::with_capacity(card);
                for i in 0..card {
                    let b = format!("{name}.branch{i}");
                    branches.push(ResNeXtBranch {
                        reduce: ConvBn::register(store, init, &b, 1, ConvSpec::new(c, d, 1))?,
                        body: ConvBn::register(store, init, &b, 2, ConvSpec::new(d, d, k))?,
                        expand: Conv::register(
                            store,
                            init,
                            &format!("{b}.conv3"),
                            ConvSpec::new(d, c, 1),
                        )?,
                    });
                }
                let se = if cfg.kind == VariantKind::ResNeXtSe {
                    Some(SqueezeExcite::register(
                        store,
                        init,
                        &format!("{name}.se"),
                        c,
                        cfg.se_reduction,
                    )?)
                } else {
                    None
                };
                VariantBody::ResNeXt { branches, se }
            }
            VariantKind::ResA => VariantBody::ResA {
                features: ResidualSubblock::register(
                    store,
                    init,
                    &format!("{name}.feat"),
                    c,
                    k,
                    cfg.leaky_slope,
                )?,
                gate: Conv::register(
                    store,
                    init,
                    &format!("{name}.gate"),
                    ConvSpec::new(c, c, cfg.attention_kernel).with_bias(true),
                )?,
            },
        };
        Ok(VariantBlock {
            kind: cfg.kind,
            entry,
            body,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let e = self.entry.forward(s, x)?;
        match &self.body {
            VariantBody::Basic([first, second]) => {
                let h = first.forward(s, e)?;
                let h = s.graph().relu(h);
                let h = second.forward(s, h)?;
                let y = s.graph().add(e, h)?;
                Ok(s.graph().relu(y))
            }
            VariantBody::IdentityPreact(stages) => {
                let mut h = e;
                for (bn, conv) in stages {
                    let y = bn.forward(s, h)?;
                    let y = s.graph().relu(y);
                    h = conv.forward(s, y)?;
                }
                s.graph().add(e, h)
            }
            VariantBody::ResNeXt { branches, se } => {
                let mut acc: Option<Var> = None;
                for b in branches {
                    let t = b.forward(s, e)?;
                    acc = Some(match acc {
                        Some(a) => s.graph().add(a, t)?,
                        None => t,
                    });
                }
                let mut agg = acc.expect("cardinality is positive");
                if let Some(se) = se {
                    agg = se.forward(s, agg)?;
                }
                s.graph().add(e, agg)
            }
            VariantBody::ResA { features, gate } => {
                let f = features.residual(s, e)?;
                let z = gate.forward(s, f)?;
                let a = s.graph().sigmoid(z);
                let scaled = s.graph().mul(a, e)?;
                s.graph().add(e, scaled)
            }
        }
    }
}
