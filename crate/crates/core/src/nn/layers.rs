//! Parameterised primitives shared by the blocks.

use super::params::{Init, ParamKind, ParamStore};
use super::session::Session;
use crate::autodiff::{ConvSpec, Mode, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: Option<String>,
    pub spec: ConvSpec,
}

impl Conv {
    /// Registers `{name}.weight` (and `{name}.bias` when the spec has one).
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let weight = format!("{name}.weight");
        store.insert(
            &weight,
            init.he_uniform(&spec.weight_shape(), spec.fan_in()),
            ParamKind::Weight,
        )?;
        let bias = if spec.has_bias {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(&[spec.out_channels]), ParamKind::Weight)?;
            Some(b)
        } else {
            None
        };
        Ok(Conv { weight, bias, spec })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(s.param(b)?),
            None => None,
        };
        s.graph().conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub prefix: String,
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
}

impl BatchNorm {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let bn = BatchNorm {
            prefix: name.to_string(),
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            running_mean: format!("{name}.running_mean"),
            running_var: format!("{name}.running_var"),
        };
        store.insert(&bn.gamma, Tensor::ones(&[channels]), ParamKind::Weight)?;
        store.insert(&bn.beta, Tensor::zeros(&[channels]), ParamKind::Weight)?;
        store.insert(
            &bn.running_mean,
            Tensor::zeros(&[channels]),
            ParamKind::Buffer,
        )?;
        store.insert(
            &bn.running_var,
            Tensor::ones(&[channels]),
            ParamKind::Buffer,
        )?;
        Ok(bn)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(&self.gamma)?;
        let beta = s.param(&self.beta)?;
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph().batch_norm_train(x, gamma, beta)?;
                s.record_stats(&self.prefix, stats);
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.buffer(&self.running_mean)?;
                let var = s.buffer(&self.running_var)?;
                s.graph()
                    .batch_norm_eval(x, gamma, beta, mean.data(), var.data())
            }
        }
    }
}

/// `bn -> LeakyReLU -> conv` (no conv bias).
#[derive(Clone, Debug)]
pub struct BnActConv {
    pub bn: BatchNorm,
    pub conv: Conv,
    pub slope: f64,
}

impl BnActConv {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        index: usize,
        channels: usize,
        kernel: usize,
        slope: f64,
    ) -> Result<Self> {
        let bn = BatchNorm::register(store, &format!("{name}.bn{index}"), channels)?;
        let conv = Conv::register(
            store,
            init,
            &format!("{name}.conv{index}"),
            ConvSpec::new(channels, channels, kernel),
        )?;
        Ok(BnActConv { bn, conv, slope })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.bn.forward(s, x)?;
        let y = s.graph().leaky_relu(y, self.slope);
        self.conv.forward(s, y)
    }
}
