use super::params::{Init, ParamKind, ParamStore};
use super::session::Session;
use crate::autodiff::Var;
use crate::error::{config_err, shape_err, Result};

/// Squeeze-and-excitation: global average pool, `c -> c/r` ReLU, `c/r -> c`
/// sigmoid, then per-channel scaling of the input. The dense stages have no
/// bias.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    /// `(c, c/r)`
    pub reduce: String,
    /// `(c/r, c)`
    pub expand: String,
    pub channels: usize,
    pub latent: usize,
}

/// Latent width for `channels` at reduction `r`. Narrow layers (`channels < r`)
/// collapse to a single latent unit.
pub fn latent_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 {
        return Err(config_err!("SE reduction must be positive"));
    }
    if channels < reduction {
        return Ok(1);
    }
    if !channels.is_multiple_of(reduction) {
        return Err(config_err!(
            "SE reduction {reduction} does not divide {channels} channels"
        ));
    }
    Ok(channels / reduction)
}

impl SqueezeExcite {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let latent = latent_width(channels, reduction)?;
        let reduce = format!("{name}.reduce.weight");
        let expand = format!("{name}.expand.weight");
        store.insert(
            &reduce,
            init.he_uniform(&[channels, latent], channels),
            ParamKind::Weight,
        )?;
        store.insert(
            &expand,
            init.he_uniform(&[latent, channels], latent),
            ParamKind::Weight,
        )?;
        Ok(SqueezeExcite {
            reduce,
            expand,
            channels,
            latent,
        })
    }

    /// The per-channel gates `f_x`, shape `(n, c)`, each in (0, 1).
    pub fn gates(&self, s: &mut Session, x: Var) -> Result<Var> {
        let c = s.graph_ref().shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(shape_err!(
                "SE built for {} channels, input has {c}",
                self.channels
            ));
        }
        let wk = s.param(&self.reduce)?;
        let wr = s.param(&self.expand)?;
        let g = s.graph();
        let pooled = g.global_avg_pool(x)?;
        let z = g.matmul(pooled, wk)?;
        let z = g.relu(z);
        let z = g.matmul(z, wr)?;
        Ok(g.sigmoid(z))
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let f = self.gates(s, x)?;
        s.graph().scale_channels(x, f)
    }
}
