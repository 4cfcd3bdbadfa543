//! The FocusNet attention module.
//!
//! ```text
//! F1 = sigmoid(conv1x1(relu(conv3x3(relu(conv3x3(F))))))     pixel branch
//! I2 = relu(conv3x3(relu(conv3x3(F))))                       feature branch
//! s  = SE(I2)            P = F1 ⊙ s
//! F2 = SA(P)             F_out = F + F2
//! ```
//! `SA` is a second squeeze-and-excitation unit with its own weights.

use super::layers::Conv;
use super::params::{Init, ParamStore};
use super::se::SqueezeExcite;
use super::session::Session;
use crate::autodiff::{ConvSpec, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub channels: usize,
    pub pixel: [Conv; 2],
    pub pixel_gate: Conv,
    pub feature: [Conv; 2],
    pub se: SqueezeExcite,
    pub sa: SqueezeExcite,
}

/// Intermediate maps of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub f1: Var,
    pub i2: Var,
    pub s: Var,
    pub p: Var,
    pub f2: Var,
    pub out: Var,
}

impl AttentionModule {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        body_kernel: usize,
        attention_kernel: usize,
        se_reduction: usize,
    ) -> Result<Self> {
        let conv = |store: &mut ParamStore, init: &mut Init, n: String, k: usize| {
            Conv::register(
                store,
                init,
                &n,
                ConvSpec::new(channels, channels, k).with_bias(true),
            )
        };
        let pixel = [
            conv(store, init, format!("{name}.pixel.conv1"), body_kernel)?,
            conv(store, init, format!("{name}.pixel.conv2"), body_kernel)?,
        ];
        let pixel_gate = conv(store, init, format!("{name}.pixel.gate"), attention_kernel)?;
        let feature = [
            conv(store, init, format!("{name}.feature.conv1"), body_kernel)?,
            conv(store, init, format!("{name}.feature.conv2"), body_kernel)?,
        ];
        let se =
            SqueezeExcite::register(store, init, &format!("{name}.se"), channels, se_reduction)?;
        let sa =
            SqueezeExcite::register(store, init, &format!("{name}.sa"), channels, se_reduction)?;
        Ok(AttentionModule {
            channels,
            pixel,
            pixel_gate,
            feature,
            se,
            sa,
        })
    }

    pub fn forward(&self, s: &mut Session, f: Var) -> Result<Var> {
        Ok(self.trace(s, f)?.out)
    }

    pub fn trace(&self, s: &mut Session, f: Var) -> Result<AttentionTrace> {
        let c = s.graph_ref().shape(f).get(1).copied();
        if c != Some(self.channels) {
            return Err(shape_err!(
                "attention module built for {} channels, input {:?}",
                self.channels,
                s.graph_ref().shape(f)
            ));
        }
        let mut h = f;
        for conv in &self.pixel {
            let y = conv.forward(s, h)?;
            h = s.graph().relu(y);
        }
        let gate = self.pixel_gate.forward(s, h)?;
        let f1 = s.graph().sigmoid(gate);

        let mut i2 = f;
        for conv in &self.feature {
            let y = conv.forward(s, i2)?;
            i2 = s.graph().relu(y);
        }
        let scaled = self.se.forward(s, i2)?;
        let p = s.graph().mul(f1, scaled)?;
        let f2 = self.sa.forward(s, p)?;
        let out = s.graph().add(f, f2)?;
        Ok(AttentionTrace {
            f1,
            i2,
            s: scaled,
            p,
            f2,
            out,
        })
    }
}
